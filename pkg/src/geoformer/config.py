"""Flat ``section.key = value`` run configuration with command-line overrides."""

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetManifest
from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig

DATA_KEYS = ("manifest", "data", "target", "split", "seed", "unit")
TOP_KEYS = ("seed", "run_dir")
# Short spellings accepted in files and on the command line.
ALIASES = {"d": "model.dim", "M": "model.blocks", "h": "model.heads", "seed": "seed",
           "forces": ("model.forces", "train.forces"), "out": "run_dir"}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


MODEL_TYPES = _field_types(ModelConfig)
TRAIN_TYPES = _field_types(TrainConfig)


def coerce(value, kind, key):
    if not isinstance(value, str):
        return value
    text = value.strip()
    if text.lower() in ("none", "null", ""):
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind is int:
            f = float(text)
            if f != int(f):
                raise ValueError
            return int(f)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None
    return text


def canonical_keys(key):
    """Fully qualified key(s) for ``key``; raises on unknown or ambiguous names."""
    key = key.strip().replace("-", "_")
    if key in ALIASES:
        target = ALIASES[key]
        return list(target) if isinstance(target, tuple) else [target]
    if "." in key:
        section, name = key.split(".", 1)
        if section == "model" and isinstance(ALIASES.get(name), str) and ALIASES[name].startswith("model."):
            return [ALIASES[name]]
        ok = {"model": MODEL_TYPES, "train": TRAIN_TYPES, "data": dict.fromkeys(DATA_KEYS)}
        if section not in ok or name not in ok[section]:
            raise ConfigError(f"unknown config key {key!r}")
        return [key]
    if key in TOP_KEYS:
        return [key]
    hits = [f"{s}.{key}" for s, names in (("model", MODEL_TYPES), ("train", TRAIN_TYPES),
                                           ("data", DATA_KEYS)) if key in names]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    if len(hits) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of {hits}")
    return hits


def read_config_text(text, path="<config>"):
    """Parse ``key = value`` lines (``#`` comments) into an ordered dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            for ck in canonical_keys(k):
                out[ck] = v
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def parse_overrides(args):
    """``['--model.dim', '64', '--seed', '7']`` -> ``{'model.dim': '64', 'seed': '7'}``.

    ``--key=value`` is accepted too.  A bare flag followed by another flag (or
    nothing) means ``true``.
    """
    out = {}
    i = 0
    args = list(args)
    while i < len(args):
        a = args[i]
        if not a.startswith("--"):
            raise ConfigError(f"unexpected argument {a!r}")
        a = a[2:]
        if "=" in a:
            k, v = a.split("=", 1)
            i += 1
        elif i + 1 < len(args) and not args[i + 1].startswith("--"):
            k, v = a, args[i + 1]
            i += 2
        else:
            k, v = a, "true"
            i += 1
        for ck in canonical_keys(k):
            out[ck] = v
    return out


@dataclass
class RunConfig:
    """Model, training and dataset settings resolved from a file plus overrides."""

    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetManifest = None
    seed: int = 0
    run_dir: str = "run"

    @classmethod
    def from_sources(cls, path=None, overrides=None, base=None):
        raw = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file {path} does not exist")
            raw.update(read_config_text(path.read_text(), str(path)))
            base = path.parent if base is None else base
        raw.update(overrides or {})
        return cls.from_mapping(raw, base=base)

    @classmethod
    def from_mapping(cls, raw, base=None):
        model_kw, train_kw, data_kw = {}, {}, {}
        top = {}
        for key, value in raw.items():
            if "." not in key:
                top[key] = value
                continue
            section, name = key.split(".", 1)
            if section == "model":
                model_kw[name] = coerce(value, MODEL_TYPES[name], key)
            elif section == "train":
                train_kw[name] = coerce(value, TRAIN_TYPES[name], key)
            else:
                data_kw[name] = value
        seed = coerce(top.get("seed", "0"), int, "seed")
        train_kw.setdefault("seed", seed)
        defaults = ModelConfig.desk().to_dict()
        defaults.update({k: v for k, v in model_kw.items() if v is not None})
        try:
            model = ModelConfig(**defaults)
            train = TrainConfig(**train_kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        data = None
        manifest = data_kw.pop("manifest", None)
        if manifest:
            mpath = Path(manifest)
            if base is not None and not mpath.is_absolute():
                mpath = Path(base) / mpath
            if not mpath.exists():
                raise ConfigError(f"data.manifest: {mpath} does not exist")
            merged = read_manifest_mapping(mpath)
            merged.update(data_kw)
            data = DatasetManifest.from_mapping(merged, base=None)
        elif data_kw:
            data = DatasetManifest.from_mapping(data_kw, base=base)
        if data is not None:
            data.data = [p.resolve() for p in data.data]
        return cls(model=model, train=train, data=data, seed=seed,
                   run_dir=str(top.get("run_dir", "run")))

    def to_lines(self):
        lines = [f"seed = {self.seed}", f"run_dir = {self.run_dir}"]
        for k, v in self.model.to_dict().items():
            lines.append(f"model.{k} = {_fmt(v)}")
        for k, v in self.train.to_dict().items():
            lines.append(f"train.{k} = {_fmt(v)}")
        if self.data is not None:
            d = self.data
            lines.append(f"data.data = {','.join(str(p) for p in d.data)}")
            lines.append(f"data.target = {d.target}")
            lines.append(f"data.split = {','.join(str(s) for s in d.split)}")
            lines.append(f"data.seed = {d.seed}")
            if d.unit is not None:
                lines.append(f"data.unit = {d.unit}")
        return lines

    def write_resolved(self, path):
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


def read_manifest_mapping(path):
    """Manifest ``key = value`` pairs with data paths made absolute against the file."""
    kv = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    if "data" in kv:
        kv["data"] = ",".join(
            str(p if Path(p).is_absolute() else Path(path).parent / p)
            for p in (s.strip() for s in kv["data"].split(",")) if p)
    return kv


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
