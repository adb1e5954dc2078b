"""The geometric Transformer: positional encoder, pre-LN blocks, summed per-atom head."""

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import AttentionVariant, attend, attention_maps, init_attention, metric_net
from .autodiff import Tensor, geglu, grad, layer_norm, linear, neg, no_grad, tsum, where
from .data import distances_on_tape
from .encoding import atom_embedding, encode, encode_laplacian, init_gpe, init_laplacian, init_plain
from .exceptions import CheckpointVersionError, ConfigError, DataError, NumericError

POSITIONAL = ("gpe", "laplacian", "none")
PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    blocks: int = 10
    dim: int = 512
    heads: int = 8
    ff_dim: int = 2048
    attention: str = "gated_lm"
    metric_activation: str = "relu"
    metric_hidden: int = 50
    positional: str = "gpe"
    gpe_hidden: int = 1024
    laplacian_k: int = 15
    omega: float = 1.0
    precision: str = "float64"
    forces: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        self.attention = AttentionVariant.parse(self.attention).value
        if self.blocks < 1:
            raise ConfigError(f"model.blocks must be >= 1, got {self.blocks}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"model.dim={self.dim} is not divisible by model.heads={self.heads}")
        if self.metric_activation not in ("relu", "gelu"):
            raise ConfigError(f"model.metric_activation must be relu or gelu, got {self.metric_activation!r}")
        if self.positional not in POSITIONAL:
            raise ConfigError(f"model.positional must be one of {POSITIONAL}, got {self.positional!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"model.precision must be float32 or float64, got {self.precision!r}")
        if self.forces and self.metric_activation == "relu" and AttentionVariant(self.attention).uses_metric:
            raise ConfigError(
                "force prediction needs a twice-differentiable metric: set model.metric_activation = gelu"
            )
        if self.forces and self.positional == "laplacian":
            raise ConfigError("force prediction is not available with the laplacian positional encoder")
        return self

    @classmethod
    def desk(cls, **overrides):
        """Small configuration that trains in minutes on a laptop CPU."""
        base = dict(blocks=3, dim=64, heads=4, ff_dim=128, gpe_hidden=64)
        base.update(overrides)
        return cls(**base)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class GeoTransformer:
    """Parameters plus forward / force evaluation for one :class:`ModelConfig`."""

    def __init__(self, config=None, seed=0, params=None):
        self.config = config if config is not None else ModelConfig.desk()
        self.config.validate()
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: Tensor(np.asarray(v, dtype=self.config.dtype), requires_grad=True, name=k)
                       for k, v in params.items()}

    # -- parameters -----------------------------------------------------------
    def _init_params(self, rng):
        c = self.config
        dt = c.dtype
        p = {}
        if c.positional == "gpe":
            enc = init_gpe(rng, c.dim, c.gpe_hidden, dt)
        elif c.positional == "laplacian":
            enc = init_laplacian(rng, c.dim, c.laplacian_k, dt)
        else:
            enc = init_plain(rng, c.dim, dt)
        p.update({f"enc.{k}": v for k, v in enc.items()})
        for m in range(c.blocks):
            pre = f"blocks.{m}"
            p[f"{pre}.ln1.g"] = np.ones(c.dim, dtype=dt)
            p[f"{pre}.ln1.b"] = np.zeros(c.dim, dtype=dt)
            att = init_attention(rng, c.dim, c.heads, c.attention, c.metric_hidden, dt)
            p.update({f"{pre}.attn.{k}": v for k, v in att.items()})
            p[f"{pre}.ln2.g"] = np.ones(c.dim, dtype=dt)
            p[f"{pre}.ln2.b"] = np.zeros(c.dim, dtype=dt)
            p[f"{pre}.ff.w1"] = _glorot(rng, c.dim, 2 * c.ff_dim).astype(dt)
            p[f"{pre}.ff.b1"] = np.zeros(2 * c.ff_dim, dtype=dt)
            p[f"{pre}.ff.w2"] = _glorot(rng, c.ff_dim, c.dim).astype(dt)
            p[f"{pre}.ff.b2"] = np.zeros(c.dim, dtype=dt)
        p["head.ln.g"] = np.ones(c.dim, dtype=dt)
        p["head.ln.b"] = np.zeros(c.dim, dtype=dt)
        p["head.w"] = _glorot(rng, c.dim, 1).astype(dt)
        p["head.b"] = np.zeros(1, dtype=dt)
        return p

    def parameters(self):
        return list(self.params.values())

    @property
    def n_params(self):
        return int(sum(t.size for t in self.params.values()))

    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ConfigError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.config.dtype, copy=True)
            t.grad = None

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # -- evaluation -------------------------------------------------------------
    def _cast(self, arr):
        return np.asarray(arr, dtype=self.config.dtype)

    def embed(self, atom_types, distances, mask):
        c = self.config
        if c.positional == "gpe":
            return encode(self.params, "enc", atom_types, distances, mask)
        if c.positional == "laplacian":
            return encode_laplacian(self.params, "enc", atom_types, distances, mask, c.laplacian_k)
        return atom_embedding(self.params, "enc", atom_types, mask)

    def _block(self, m, y, distances, mask, psi=None, return_maps=False):
        c = self.config
        pre = f"blocks.{m}"
        p = self.params
        h = layer_norm(y, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], c.ln_eps)
        res = attend(p, f"{pre}.attn", h, distances, mask, c.attention, c.heads, omega=c.omega,
                     activation=c.metric_activation, psi=psi, return_maps=return_maps)
        maps = None
        if return_maps:
            res, maps = res
        y = y + res
        h = layer_norm(y, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], c.ln_eps)
        h = linear(geglu(linear(h, p[f"{pre}.ff.w1"], p[f"{pre}.ff.b1"])), p[f"{pre}.ff.w2"], p[f"{pre}.ff.b2"])
        return y + h, maps

    def atom_contributions(self, atom_types, distances, mask, psi=None):
        """Per-atom scalar contributions (B, N), zero on padding."""
        mask = np.asarray(mask, dtype=bool)
        if not isinstance(distances, Tensor):
            distances = Tensor(self._cast(distances))
        y = self.embed(atom_types, distances, mask)
        for m in range(self.config.blocks):
            y, _ = self._block(m, y, distances, mask, psi=psi)
            if not np.isfinite(y.data).all():
                raise NumericError(f"non-finite activation after block {m}")
        p = self.params
        h = layer_norm(y, p["head.ln.g"], p["head.ln.b"], self.config.ln_eps)
        c = linear(h, p["head.w"], p["head.b"])
        b, n, _ = c.shape
        zero = Tensor(np.zeros((), dtype=c.dtype))
        return where(mask, c.reshape(b, n), zero)

    def forward(self, batch, psi=None):
        """Molecule-level predictions as a (B,) tensor on the tape."""
        return tsum(self.atom_contributions(batch.atom_types, batch.distances, batch.mask, psi), axis=1)

    __call__ = forward

    def predict(self, batch):
        with no_grad():
            return self.forward(batch).data.copy()

    def predict_forces(self, batch, create_graph=False):
        """Predictions and forces ``-d prediction / d positions``, both (B,) and (B, N, 3).

        With ``create_graph`` the forces stay on the tape so a loss on them can
        be differentiated with respect to the parameters.
        """
        if batch.positions is None:
            raise DataError("force prediction needs a batch built with positions")
        c = self.config
        if c.metric_activation == "relu" and AttentionVariant(c.attention).uses_metric:
            raise ConfigError("force prediction needs model.metric_activation = gelu")
        if c.positional == "laplacian":
            raise ConfigError("force prediction is not available with the laplacian positional encoder")
        pos = Tensor(self._cast(batch.positions), requires_grad=True)
        dist = distances_on_tape(pos, batch.mask)
        pred = tsum(self.atom_contributions(batch.atom_types, dist, batch.mask), axis=1)
        g = grad(tsum(pred), pos, create_graph=create_graph)
        return pred, neg(g)

    def block_inputs(self, batch):
        """Residual stream entering each block (list of (B, N, d) arrays)."""
        with no_grad():
            dist = Tensor(self._cast(batch.distances))
            y = self.embed(batch.atom_types, dist, batch.mask)
            out = []
            for m in range(self.config.blocks):
                out.append(y)
                y, _ = self._block(m, y, dist, batch.mask)
        return out

    def attention_maps(self, batch):
        """Per block: dict of softmax / gate / combined maps (and head means)."""
        c = self.config
        out = []
        with no_grad():
            dist = Tensor(self._cast(batch.distances))
            for m, y in enumerate(self.block_inputs(batch)):
                pre = f"blocks.{m}"
                h = layer_norm(y, self.params[f"{pre}.ln1.g"], self.params[f"{pre}.ln1.b"], c.ln_eps)
                out.append(attention_maps(self.params, f"{pre}.attn", h, dist, batch.mask, c.attention,
                                          c.heads, omega=c.omega, activation=c.metric_activation))
        return out

    def metric_curves(self, d_grid):
        """``psi(1/d)^2`` per block and head on a distance grid: (blocks, heads, len(grid))."""
        c = self.config
        if not AttentionVariant(c.attention).uses_metric:
            raise ConfigError(f"attention variant {c.attention} has no learned metric")
        d_grid = np.asarray(d_grid, dtype=np.float64)
        x = Tensor(self._cast(1.0 / d_grid).reshape(1, 1, -1))
        curves = []
        with no_grad():
            for m in range(c.blocks):
                raw = metric_net(self.params, f"blocks.{m}.attn.metric", x, c.metric_activation)
                curves.append(raw.data[0, :, 0, :] ** 2)
        return np.stack(curves).astype(np.float64)


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GEOFORMER-CKPT\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, step=0, meta=None, extra=None):
    """Write config, parameters (as float64) and optional extra arrays.

    The byte layout is a pure function of the contents, so equal models give
    equal files.
    """
    tensors = [(k, np.asarray(t.data, dtype="<f8")) for k, t in model.params.items()]
    for k, v in (extra or {}).items():
        tensors.append((f"extra.{k}", np.asarray(v, dtype="<f8")))
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "meta": meta or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(b"%d\n" % CHECKPOINT_VERSION)
        fh.write(b"%016d\n" % len(hbytes))
        fh.write(hbytes)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path):
    """Return ``(header, arrays)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointVersionError(f"{path} is not a geoformer checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    nl = raw.index(b"\n", pos)
    version = int(raw[pos:nl])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    pos = nl + 1
    hlen = int(raw[pos:pos + 16])
    pos += 17
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    arrays = {}
    for e in header["tensors"]:
        start = pos + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8").reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path):
    """Return ``(model, header, extra_arrays)``."""
    header, arrays = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    params = {k: v for k, v in arrays.items() if not k.startswith("extra.")}
    extra = {k[6:]: v for k, v in arrays.items() if k.startswith("extra.")}
    model = GeoTransformer(config, params=params)
    return model, header, extra

