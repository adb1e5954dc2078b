"""Input checks shared by the estimator, the CLI and the training loop."""

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError

from .data import Molecule
from .exceptions import ConfigError, DataError


def as_molecule(obj, index=0):
    """Accept a :class:`Molecule` or an ``(atomic_numbers, positions)`` pair."""
    if isinstance(obj, Molecule):
        return obj
    if isinstance(obj, (tuple, list)) and len(obj) == 2:
        try:
            return Molecule(np.asarray(obj[0]), np.asarray(obj[1], dtype=np.float64))
        except (TypeError, ValueError) as exc:
            raise DataError(f"sample {index}: {exc}") from None
    raise DataError(f"sample {index}: expected a Molecule or (atomic_numbers, positions), "
                    f"got {type(obj).__name__}")


def check_molecules(X, allow_empty=False):
    """List of validated molecules built from ``X``."""
    if isinstance(X, Molecule):
        X = [X]
    try:
        mols = [as_molecule(m, i) for i, m in enumerate(X)]
    except TypeError:
        raise DataError(f"expected a sequence of molecules, got {type(X).__name__}") from None
    if not mols and not allow_empty:
        raise DataError("no molecules given")
    for i, m in enumerate(mols):
        if not np.isfinite(m.positions).all():
            raise DataError(f"sample {i}: non-finite coordinates")
    return mols


def check_targets(y, n):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise DataError(f"got {y.shape[0]} targets for {n} molecules")
    if not np.isfinite(y).all():
        raise DataError("targets contain NaN or inf")
    return y


def check_forces(forces, molecules):
    if len(forces) != len(molecules):
        raise DataError(f"got {len(forces)} force arrays for {len(molecules)} molecules")
    out = []
    for i, (f, m) in enumerate(zip(forces, molecules)):
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (m.n_atoms, 3):
            raise DataError(f"sample {i}: forces have shape {f.shape}, expected ({m.n_atoms}, 3)")
        out.append(f)
    return out


def with_target(molecules, y, name, forces=None):
    """Copies of ``molecules`` carrying ``y`` (and ``forces``) under property ``name``."""
    if y is None:
        for i, m in enumerate(molecules):
            if name not in m.properties:
                raise DataError(f"sample {i} has no property {name!r} and no y was given")
        return list(molecules)
    y = check_targets(y, len(molecules))
    forces = check_forces(forces, molecules) if forces is not None else [None] * len(molecules)
    out = []
    for m, v, f in zip(molecules, y, forces):
        props = dict(m.properties)
        props[name] = float(v)
        out.append(m.copy(properties=props, forces=f if f is not None else m.forces))
    return out


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fitted(estimator, attr="model_"):
    if not hasattr(estimator, attr):
        raise NotFittedError(f"{type(estimator).__name__} is not fitted; call fit first")
