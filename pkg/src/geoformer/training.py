"""Objectives, Adam, plateau learning-rate decay and the epoch loop."""

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import MixConfig, augment_half_batch, mix
from .autodiff import Tensor, mean, mul, sub, tabs, tsum, where
from .data import TargetScaler, iter_batches, make_batch
from .exceptions import ConfigError, ContractError, DataError, NumericError
from .model import save_checkpoint

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "mae", "aug_mae", "sep_gap", "lr", "seconds")


# -- objectives ----------------------------------------------------------------------

def l1_loss(pred, target):
    """Mean absolute error between a (B,) prediction tensor and targets."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ContractError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ContractError("l1_loss on an empty batch")
    return mean(tabs(sub(pred, target)))


def force_loss(pred_p, target_p, pred_f, target_f, mask, rho):
    """``MAE(p) + rho/3 * mean |F_pred - F|`` over real atoms and all three components."""
    mask = np.asarray(mask, dtype=bool)
    target_f = np.asarray(target_f, dtype=pred_f.dtype)
    if pred_f.shape != target_f.shape or pred_f.shape[:2] != mask.shape or pred_f.shape[-1] != 3:
        raise ContractError(
            f"force_loss: forces {pred_f.shape} / {target_f.shape} vs mask {mask.shape}"
        )
    base = l1_loss(pred_p, target_p)
    if rho == 0:
        return base
    m3 = np.broadcast_to(mask[..., None], pred_f.shape)
    err = where(m3, tabs(sub(pred_f, Tensor(target_f))), Tensor(np.zeros((), dtype=pred_f.dtype)))
    count = int(m3.sum())
    if count == 0:
        raise ContractError("force_loss with no real atoms")
    return base + mul(tsum(err), rho / 3.0 / count)


# -- optimizer and scheduler -------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a list of parameter tensors."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        """Apply one update; ``grads`` defaults to each parameter's ``.grad``.

        A non-finite gradient raises :class:`NumericError` and leaves both the
        parameters and the moments untouched.
        """
        if grads is None:
            grads = [p.grad for p in self.params]
        garr = []
        for p, g in zip(self.params, grads):
            g = np.zeros_like(p.data) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {p.name or '?'}")
            garr.append(g)
        t = self.t + 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for i, (p, g) in enumerate(zip(self.params, garr)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype, copy=False)
        self.t = t

    def state(self):
        names = [p.name or str(i) for i, p in enumerate(self.params)]
        arrays = {f"adam.m.{n}": m for n, m in zip(names, self.m)}
        arrays.update({f"adam.v.{n}": v for n, v in zip(names, self.v)})
        return {"t": self.t, "lr": self.lr}, arrays

    def load_state(self, meta, arrays):
        names = [p.name or str(i) for i, p in enumerate(self.params)]
        self.t = int(meta["t"])
        self.lr = float(meta["lr"])
        self.m = [arrays[f"adam.m.{n}"].astype(p.data.dtype) for n, p in zip(names, self.params)]
        self.v = [arrays[f"adam.v.{n}"].astype(p.data.dtype) for n, p in zip(names, self.params)]


class PlateauScheduler:
    """Multiply the learning rate by ``ratio`` after ``patience`` epochs without improvement.

    The rate is kept in closed form, ``max(init * ratio**k, floor)`` after ``k``
    decays, so long runs do not accumulate rounding drift.
    """

    def __init__(self, init_lr=1e-4, ratio=0.8, floor=1e-6, patience=10, threshold=1e-4):
        if not 0.0 < ratio < 1.0:
            raise ConfigError(f"decay ratio must be in (0, 1), got {ratio}")
        self.init_lr = init_lr
        self.ratio = ratio
        self.floor = floor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0
        self.n_decays = 0

    @property
    def lr(self):
        return max(self.init_lr * self.ratio ** self.n_decays, self.floor)

    def step(self, val_loss):
        val_loss = float(val_loss)
        if val_loss < self.best * (1.0 - self.threshold) or self.best == math.inf:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                if self.lr > self.floor:
                    self.n_decays += 1
                self.bad_epochs = 0
        return self.lr

    def state(self):
        return {"best": self.best if math.isfinite(self.best) else None,
                "bad_epochs": self.bad_epochs, "n_decays": self.n_decays}

    def load_state(self, st):
        self.best = math.inf if st["best"] is None else float(st["best"])
        self.bad_epochs = int(st["bad_epochs"])
        self.n_decays = int(st["n_decays"])


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float((p.grad.data ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = Tensor(p.grad.data * scale)
    return total


# -- configuration and metrics ---------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 100
    max_steps: int = None
    lr: float = 1e-4
    lr_decay: float = 0.8
    lr_floor: float = 1e-6
    patience: int = 10
    threshold: float = 1e-4
    rho: float = 1e3
    forces: bool = False
    augment: bool = True
    aug_fraction: float = 0.5
    translation: float = 1e4
    seed: int = 0
    eval_every: int = 1
    eval_batch_size: int = 64
    clip_norm: float = None
    standardize: bool = False
    sep_pairs: int = 16
    stop_mae: float = None
    wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.rho < 0:
            raise ConfigError(f"train.rho must be >= 0, got {self.rho}")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every must be >= 1")

    def mix_config(self):
        return MixConfig(translation=self.translation, fraction=self.aug_fraction, seed=self.seed)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    mae: float
    aug_mae: float = None
    sep_gap: float = None
    lr: float = None
    seconds: float = None

    def as_csv(self):
        def f(v):
            return "" if v is None else repr(float(v))

        return [str(self.epoch), self.split, f(self.mae), f(self.aug_mae), f(self.sep_gap),
                f(self.lr), f(self.seconds)]


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    best_state: dict = None
    best_val: float = math.inf
    best_epoch: int = -1
    steps: int = 0
    scaler: TargetScaler = None
    initial_sep_gap: float = None  # before the first update


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow(r.as_csv())


def append_metrics(path, rows):
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow(r.as_csv())


# -- evaluation ----------------------------------------------------------------------------

def predict_molecules(model, molecules, batch_size=64):
    out = []
    for chunk in iter_batches(list(molecules), batch_size):
        out.append(model.predict(make_batch(chunk, dtype=model.config.dtype)))
    return np.concatenate(out) if out else np.zeros(0)


def predict_molecules_forces(model, molecules, batch_size=64):
    preds, forces = [], []
    for chunk in iter_batches(list(molecules), batch_size):
        batch = make_batch(chunk, with_positions=True, dtype=model.config.dtype)
        p, f = model.predict_forces(batch)
        preds.append(p.data.copy())
        for i, m in enumerate(chunk):
            forces.append(batch.atoms(f.data, i).copy())
    return (np.concatenate(preds) if preds else np.zeros(0)), forces


def targets_of(molecules, target):
    vals = []
    for i, m in enumerate(molecules):
        if target not in m.properties:
            raise DataError(f"molecule {i} has no property {target!r}")
        vals.append(m.properties[target])
    return np.asarray(vals, dtype=np.float64)


def n_atoms_of(molecules):
    return np.array([m.n_atoms for m in molecules])


def evaluate(model, molecules, target, batch_size=64, scaler=None):
    """Mean absolute error of the model on ``molecules`` in raw target units."""
    if not molecules:
        return math.nan
    pred = predict_molecules(model, molecules, batch_size)
    if scaler is not None:
        pred = scaler.inverse_transform(pred, n_atoms_of(molecules))
    return float(np.mean(np.abs(pred - targets_of(molecules, target))))


def evaluate_forces(model, molecules, batch_size=16):
    """Mean absolute force error per (atom, component)."""
    _, forces = predict_molecules_forces(model, molecules, batch_size)
    err = [np.abs(f - m.forces) for f, m in zip(forces, molecules)]
    return float(np.concatenate([e.ravel() for e in err]).mean())


def separation_pairs(molecules, n_pairs, cfg, seed):
    """Fixed ``(M_i, M_j, M_ij)`` triples for monitoring additivity."""
    rng = np.random.default_rng([seed, 7919])
    triples = []
    for k in range(min(n_pairs, len(molecules) // 2)):
        a, b = molecules[2 * k], molecules[2 * k + 1]
        triples.append((a, b, mix(a, b, cfg, prop=None, rng=rng)))
    return triples


def separability_gap(model, triples, scale=1.0, batch_size=64):
    """Mean ``|f(M_ij) - f(M_i) - f(M_j)|`` over precomputed triples."""
    if not triples:
        return None
    a = predict_molecules(model, [t[0] for t in triples], batch_size)
    b = predict_molecules(model, [t[1] for t in triples], batch_size)
    ab = predict_molecules(model, [t[2] for t in triples], batch_size)
    return float(np.mean(np.abs(ab - a - b)) * scale)


# -- training loop ---------------------------------------------------------------------------

def _scaled(molecules, target, scaler):
    if scaler is None:
        return molecules
    out = []
    for m in molecules:
        props = dict(m.properties)
        props[target] = float(scaler.transform([props[target]], [m.n_atoms])[0])
        out.append(m.copy(properties=props))
    return out


def train(model, train_set, val_set, config, target, run_dir=None, on_epoch=None):
    """Fit ``model`` in place; returns a :class:`TrainResult`.

    Each step: seeded shuffle, optional half-batch mixup, forward (and forces),
    loss, backward, Adam.  After every ``eval_every`` epochs the clean train
    and validation MAEs are measured, the plateau scheduler is stepped on the
    validation objective and the best parameters are kept.  With ``run_dir``,
    ``metrics.csv``, ``ckpt_best`` and ``ckpt_last`` are written there.
    """
    cfg = config
    if not train_set:
        raise DataError("empty training set")
    targets_of(train_set, target)
    if val_set:
        targets_of(val_set, target)
    use_forces = cfg.forces
    if use_forces:
        if not model.config.forces:
            raise ConfigError("train.forces needs a model built with model.forces = true")
        if any(m.forces is None for m in list(train_set) + list(val_set or [])):
            raise DataError("force training needs per-atom forces on every molecule")
        if cfg.standardize:
            # rescaling the energy would silently rescale the force targets too
            raise ConfigError("train.standardize cannot be combined with train.forces")
    mixcfg = cfg.mix_config() if cfg.augment else None

    scaler = None
    if cfg.standardize:
        scaler = TargetScaler(per_atom=True).fit(targets_of(train_set, target), n_atoms_of(train_set))
    train_fit = _scaled(list(train_set), target, scaler)
    scale = scaler.scale_ if scaler is not None else 1.0

    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.lr_decay, cfg.lr_floor, cfg.patience, cfg.threshold)
    triples = separation_pairs(list(val_set or []), cfg.sep_pairs, mixcfg or MixConfig(), cfg.seed)
    dtype = model.config.dtype

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = run_dir / "metrics.csv"
        if metrics_path.exists():
            metrics_path.unlink()

    result = TrainResult(scaler=scaler, initial_sep_gap=separability_gap(model, triples, scale, cfg.eval_batch_size))
    steps = 0
    t0 = time.perf_counter()
    n = len(train_fit)
    epoch = 0
    done = False
    while epoch < cfg.epochs and not done:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        aug_err, aug_count = 0.0, 0
        for b_idx, start in enumerate(range(0, n, cfg.batch_size)):
            mols = [train_fit[i] for i in order[start:start + cfg.batch_size]]
            flags = [False] * len(mols)
            if mixcfg is not None:
                mols, flags = augment_half_batch(
                    mols, mixcfg, np.random.default_rng([cfg.seed, epoch, b_idx, 1]),
                    prop=target, return_flags=True)
            batch = make_batch(mols, target, with_positions=use_forces, dtype=dtype)
            model.zero_grad()
            if use_forces:
                pred, f = model.predict_forces(batch, create_graph=True)
                loss = force_loss(pred, batch.targets, f, batch.forces, batch.mask, cfg.rho)
            else:
                pred = model.forward(batch)
                loss = l1_loss(pred, batch.targets)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite loss at step {steps}")
            loss.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(params, cfg.clip_norm)
            opt.lr = sched.lr
            opt.step()
            steps += 1
            fl = np.asarray(flags)
            if fl.any():
                aug_err += float(np.abs(pred.data[fl] - batch.targets[fl]).sum()) * scale
                aug_count += int(fl.sum())
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                done = True
                break

        last_epoch = done or epoch + 1 >= cfg.epochs
        if (epoch + 1) % cfg.eval_every == 0 or last_epoch:
            tr_mae = evaluate(model, list(train_set), target, cfg.eval_batch_size, scaler)
            va_mae = evaluate(model, list(val_set), target, cfg.eval_batch_size, scaler) if val_set else None
            gap = separability_gap(model, triples, scale, cfg.eval_batch_size)
            objective = va_mae if va_mae is not None else tr_mae
            rows_f = []
            if use_forces:
                tr_f = evaluate_forces(model, list(train_set), cfg.eval_batch_size)
                rows_f.append(MetricsRow(epoch, "train_force", tr_f))
                if val_set:
                    va_f = evaluate_forces(model, list(val_set), cfg.eval_batch_size)
                    rows_f.append(MetricsRow(epoch, "val_force", va_f))
                    objective = va_mae + cfg.rho / 3.0 * va_f
                else:
                    objective = tr_mae + cfg.rho / 3.0 * tr_f
            lr = sched.lr
            secs = time.perf_counter() - t0 if cfg.wall_time else None
            rows = [MetricsRow(epoch, "train", tr_mae, aug_err / aug_count if aug_count else None,
                               None, lr, secs)]
            if va_mae is not None:
                rows.append(MetricsRow(epoch, "val", va_mae, None, gap, lr, secs))
            rows.extend(rows_f)
            result.metrics.extend(rows)
            improved = objective < result.best_val
            if improved:
                result.best_val = objective
                result.best_epoch = epoch
                result.best_state = model.state_dict()
            sched.step(objective)
            if run_dir is not None:
                append_metrics(metrics_path, rows)
                meta = _meta(target, scaler, sched, opt, epoch)
                if improved:
                    save_checkpoint(run_dir / "ckpt_best", model, steps, meta)
                _, extra = opt.state()
                save_checkpoint(run_dir / "ckpt_last", model, steps, meta, extra)
            log.info("epoch %d step %d train %.6g val %s lr %.3g", epoch, steps, tr_mae,
                     "-" if va_mae is None else f"{va_mae:.6g}", lr)
            if on_epoch is not None:
                on_epoch(epoch, rows)
            if cfg.stop_mae is not None and tr_mae < cfg.stop_mae:
                done = True
        epoch += 1

    result.steps = steps
    return result


def _meta(target, scaler, sched, opt, epoch):
    adam_meta, _ = opt.state()
    return {
        "target": target,
        "epoch": epoch,
        "scaler": None if scaler is None else {"mean": scaler.mean_, "scale": scaler.scale_,
                                               "per_atom": scaler.per_atom},
        "scheduler": sched.state(),
        "adam": adam_meta,
    }


def scaler_from_meta(meta):
    s = (meta or {}).get("scaler")
    if not s:
        return None
    sc = TargetScaler(per_atom=bool(s.get("per_atom", False)))
    sc.mean_ = float(s["mean"])
    sc.scale_ = float(s["scale"])
    return sc
