import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from geoformer import GeoTransformerRegressor
from geoformer.exceptions import ConfigError, DataError
from geoformer.synthetic import make_dataset
from geoformer.validation import as_molecule, check_molecules, with_target

SMALL = dict(blocks=1, dim=8, heads=2, ff_dim=16, gpe_hidden=8, metric_hidden=4, epochs=2,
             batch_size=4, lr=1e-3)


def test_params_round_trip_and_clone():
    est = GeoTransformerRegressor(dim=32, attention="mat_exp")
    params = est.get_params()
    assert params["dim"] == 32 and params["attention"] == "mat_exp"
    c = clone(est)
    assert c.get_params() == params and c is not est
    est.set_params(blocks=2)
    assert est.blocks == 2


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        GeoTransformerRegressor().predict(make_dataset(1))


def test_fit_predict_shapes_and_determinism():
    mols = make_dataset(10, seed=0)
    y = np.array([m.properties["y"] for m in mols])
    a = GeoTransformerRegressor(**SMALL).fit(mols[:8], X_val=mols[8:])
    b = GeoTransformerRegressor(**SMALL).fit(mols[:8], X_val=mols[8:])
    pa = a.predict(mols)
    assert pa.shape == (10,) and np.array_equal(pa, b.predict(mols))
    assert np.isfinite(a.score(mols, y))
    contrib = a.atom_contributions(mols[:3])
    assert [c.shape for c in contrib] == [(m.n_atoms,) for m in mols[:3]]
    assert np.allclose([c.sum() for c in contrib], a.predict(mols[:3]), rtol=0, atol=1e-12)


def test_fit_with_explicit_y_and_pairs():
    mols = make_dataset(6, seed=1)
    pairs = [(m.atomic_numbers, m.positions) for m in mols]
    est = GeoTransformerRegressor(**SMALL, standardize=True).fit(pairs, np.arange(6.0))
    n = np.array([m.n_atoms for m in mols], float)
    assert est.scaler_.per_atom and est.scaler_.mean_ == pytest.approx(n @ np.arange(6.0) / (n @ n))
    assert est.predict(pairs).shape == (6,)
    with pytest.raises(DataError):
        GeoTransformerRegressor(**SMALL).fit(pairs)
    with pytest.raises(DataError):
        GeoTransformerRegressor(**SMALL).fit(pairs, np.arange(5.0))


def test_forces_follow_input_atom_order():
    mols = make_dataset(4, seed=2)
    rng = np.random.default_rng(0)
    mols = [m.copy(forces=rng.normal(size=(m.n_atoms, 3))) for m in mols]
    est = GeoTransformerRegressor(**{**SMALL, "epochs": 1}, metric_activation="gelu", forces=True,
                                  rho=1.0, augment=False).fit(mols)
    f = est.predict_forces(mols[:1])[0]
    perm = rng.permutation(mols[0].n_atoms)
    m = mols[0]
    fp = est.predict_forces([m.copy(atomic_numbers=m.atomic_numbers[perm], positions=m.positions[perm])])[0]
    assert np.allclose(fp, f[perm], rtol=0, atol=1e-10)


def test_invalid_hyperparameters():
    with pytest.raises(ConfigError):
        GeoTransformerRegressor(**{**SMALL, "epochs": 0}).fit(make_dataset(2))
    with pytest.raises(ConfigError):
        GeoTransformerRegressor(**SMALL, metric_activation="relu", forces=True).fit(make_dataset(2))
    with pytest.raises(ConfigError):
        GeoTransformerRegressor(**SMALL, forces=True, metric_activation="gelu", standardize=True).fit(
            [m.copy(forces=np.zeros((m.n_atoms, 3))) for m in make_dataset(2)])


def test_validation_helpers():
    m = as_molecule(([1, 1], [[0, 0, 0], [0, 0, 0.7]]))
    assert m.n_atoms == 2
    with pytest.raises(DataError, match="sample 0"):
        as_molecule("water")
    with pytest.raises(DataError):
        check_molecules([])
    with pytest.raises(DataError, match="non-finite"):
        check_molecules([([1], [[np.nan, 0, 0]])])
    out = with_target([m], [1.5], "E")
    assert out[0].properties == {"E": 1.5} and m.properties == {}
