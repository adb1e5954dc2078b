"""scikit-learn style wrapper around model construction and training."""

from sklearn.base import BaseEstimator, RegressorMixin

from .autodiff import no_grad
from .data import make_batch
from .model import GeoTransformer, ModelConfig
from .training import TrainConfig, n_atoms_of, predict_molecules, predict_molecules_forces, train
from .validation import check_fitted, check_molecules, check_positive_int, with_target

MODEL_PARAMS = ("blocks", "dim", "heads", "ff_dim", "attention", "metric_activation", "metric_hidden",
                "positional", "gpe_hidden", "laplacian_k", "omega", "precision")
TRAIN_PARAMS = ("batch_size", "epochs", "max_steps", "lr", "lr_decay", "lr_floor", "patience",
                "augment", "aug_fraction", "translation", "rho", "standardize", "clip_norm", "eval_every")


class GeoTransformerRegressor(RegressorMixin, BaseEstimator):
    """Molecular property regressor; ``X`` is a list of molecules.

    Each sample is a :class:`~geoformer.data.Molecule` or an
    ``(atomic_numbers, positions)`` pair.  ``y`` may be omitted when the
    molecules already carry the ``target`` property.  Defaults are the desk
    configuration; pass ``blocks=10, dim=512, ...`` for full size.
    """

    def __init__(self, blocks=3, dim=64, heads=4, ff_dim=128, attention="gated_lm",
                 metric_activation="relu", metric_hidden=50, positional="gpe", gpe_hidden=64,
                 laplacian_k=15, omega=1.0, precision="float64", forces=False,
                 batch_size=32, epochs=100, max_steps=None, lr=1e-4, lr_decay=0.8, lr_floor=1e-6,
                 patience=10, augment=True, aug_fraction=0.5, translation=1e4, rho=1e3,
                 standardize=False, clip_norm=None, eval_every=1, target="y", random_state=0):
        self.blocks = blocks
        self.dim = dim
        self.heads = heads
        self.ff_dim = ff_dim
        self.attention = attention
        self.metric_activation = metric_activation
        self.metric_hidden = metric_hidden
        self.positional = positional
        self.gpe_hidden = gpe_hidden
        self.laplacian_k = laplacian_k
        self.omega = omega
        self.precision = precision
        self.forces = forces
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_floor = lr_floor
        self.patience = patience
        self.augment = augment
        self.aug_fraction = aug_fraction
        self.translation = translation
        self.rho = rho
        self.standardize = standardize
        self.clip_norm = clip_norm
        self.eval_every = eval_every
        self.target = target
        self.random_state = random_state

    def model_config(self):
        return ModelConfig(forces=self.forces, **{k: getattr(self, k) for k in MODEL_PARAMS})

    def train_config(self):
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.epochs, "epochs")
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(forces=self.forces, seed=seed, **{k: getattr(self, k) for k in TRAIN_PARAMS})

    def fit(self, X, y=None, forces=None, X_val=None, y_val=None, forces_val=None):
        train_set = with_target(check_molecules(X), y, self.target, forces)
        val_set = []
        if X_val is not None:
            val_set = with_target(check_molecules(X_val), y_val, self.target, forces_val)
        mcfg = self.model_config()
        tcfg = self.train_config()
        self.model_ = GeoTransformer(mcfg, seed=tcfg.seed)
        self.result_ = train(self.model_, train_set, val_set, tcfg, self.target)
        if self.result_.best_state is not None and val_set:
            self.model_.load_state_dict(self.result_.best_state)
        self.scaler_ = self.result_.scaler
        self.history_ = self.result_.metrics
        self.n_features_in_ = 1
        return self

    def _unscale(self, pred, mols):
        return pred if self.scaler_ is None else self.scaler_.inverse_transform(pred, n_atoms_of(mols))

    def predict(self, X):
        check_fitted(self)
        mols = check_molecules(X)
        return self._unscale(predict_molecules(self.model_, mols), mols)

    def predict_forces(self, X):
        """Per-molecule ``(n_atoms, 3)`` force arrays (negative gradient of the prediction)."""
        check_fitted(self)
        _, forces = predict_molecules_forces(self.model_, check_molecules(X))
        if self.scaler_ is not None:
            forces = [f * self.scaler_.scale_ for f in forces]
        return forces

    def atom_contributions(self, X):
        """Per-atom additive terms whose sum is the prediction (before unscaling)."""
        check_fitted(self)
        mols = check_molecules(X)
        batch = make_batch(mols, dtype=self.model_.config.dtype)
        with no_grad():
            c = self.model_.atom_contributions(batch.atom_types, batch.distances, batch.mask)
        return [batch.atoms(c.data, i) for i in range(len(mols))]

    def _more_tags(self):
        return {"X_types": ["molecules"], "requires_y": False}
