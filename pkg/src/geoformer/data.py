"""Molecules, distance matrices, extended-XYZ I/O, dataset splits and padded batches."""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, sqrt, tsum, where
from .exceptions import ConfigError, DataError, ParseError

# fmt: off
ELEMENTS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
)
# fmt: on
MAX_Z = len(ELEMENTS)
SYMBOL_TO_Z = {s: i + 1 for i, s in enumerate(ELEMENTS)}


def element_number(symbol):
    """Atomic number for a symbol (case-insensitive) or a numeric string."""
    if symbol.isdigit():
        z = int(symbol)
        if 1 <= z <= MAX_Z:
            return z
        raise KeyError(symbol)
    return SYMBOL_TO_Z[symbol[:1].upper() + symbol[1:].lower()]


@dataclass
class Molecule:
    """One molecular system: atom types, coordinates (Å), scalar labels, optional forces."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    properties: dict = field(default_factory=dict)
    forces: np.ndarray = None
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.atomic_numbers)
        if n < 1:
            raise DataError("a molecule needs at least one atom")
        if self.positions.shape != (n, 3):
            raise DataError(f"positions {self.positions.shape} do not match {n} atoms")
        bad = (self.atomic_numbers < 1) | (self.atomic_numbers > MAX_Z)
        if bad.any():
            raise DataError(
                f"atomic number {self.atomic_numbers[bad][0]} outside [1, {MAX_Z}]"
            )
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)
            if self.forces.shape != (n, 3):
                raise DataError(f"forces {self.forces.shape} do not match {n} atoms")
        self.properties = {k: float(v) for k, v in self.properties.items()}

    @property
    def n_atoms(self):
        return len(self.atomic_numbers)

    @property
    def symbols(self):
        return [ELEMENTS[z - 1] for z in self.atomic_numbers]

    def copy(self, **changes):
        fields_ = dict(
            atomic_numbers=self.atomic_numbers.copy(),
            positions=self.positions.copy(),
            properties=dict(self.properties),
            forces=None if self.forces is None else self.forces.copy(),
            units=dict(self.units),
        )
        fields_.update(changes)
        return Molecule(**fields_)

    def distances(self):
        return pairwise_distances(self.positions)

    def target(self, name):
        try:
            return self.properties[name]
        except KeyError:
            raise DataError(f"molecule has no property {name!r}") from None


def pairwise_distances(positions):
    """Euclidean distance matrix of an (N, 3) coordinate array."""
    x = np.asarray(positions, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) < 1:
        raise DataError(f"positions must be (N>=1, 3), got {x.shape}")
    finite = np.isfinite(x).all(axis=1)
    if not finite.all():
        raise DataError(f"non-finite coordinate at atom {int(np.argmin(finite))}")
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def pair_mask(mask):
    """(B, N, N) mask of distinct real-atom pairs; the diagonal is always off."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[-1]
    return mask[..., :, None] & mask[..., None, :] & ~np.eye(n, dtype=bool)


def distances_on_tape(positions, mask):
    """Pairwise distances of a (B, N, 3) tensor, differentiable in the positions.

    Diagonal and padded pairs are exactly 0 with zero gradient; the square root
    is only ever evaluated on distinct real pairs.
    """
    pm = pair_mask(mask)
    b, n, _ = positions.shape
    diff = positions.reshape(b, n, 1, 3) - positions.reshape(b, 1, n, 3)
    sq = tsum(diff * diff, axis=-1)
    one = Tensor(np.ones((), dtype=positions.dtype))
    zero = Tensor(np.zeros((), dtype=positions.dtype))
    return where(pm, sqrt(where(pm, sq, one)), zero)


# -- extended XYZ ----------------------------------------------------------------

def _parse_header(text, path, lineno):
    props, units = {}, {}
    for tok in text.split():
        if "=" not in tok:
            raise ParseError(f"expected key=value, got {tok!r}", path, lineno)
        key, val = tok.split("=", 1)
        if key.startswith("unit:"):
            units[key[5:]] = val
            continue
        try:
            props[key] = float(val)
        except ValueError:
            raise ParseError(f"property {key!r} has non-numeric value {val!r}", path, lineno) from None
    return props, units


def parse_extxyz(text, path=None):
    """Parse extended-XYZ text into a list of :class:`Molecule`."""
    lines = text.splitlines()
    mols = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        count_line = i + 1
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise ParseError(f"malformed atom count {lines[i].strip()!r}", path, count_line) from None
        if n < 1:
            raise ParseError(f"atom count must be positive, got {n}", path, count_line)
        if i + 1 >= len(lines):
            raise ParseError("missing property line", path, count_line + 1)
        props, units = _parse_header(lines[i + 1], path, count_line + 1)
        if i + 2 + n > len(lines):
            raise ParseError(f"record declares {n} atoms but the file ends early", path, count_line)
        z = np.empty(n, dtype=np.int64)
        pos = np.empty((n, 3))
        frc = None
        for k in range(n):
            lineno = i + 3 + k
            cols = lines[i + 2 + k].split()
            if len(cols) not in (4, 7):
                raise ParseError(
                    f"expected 'Symbol x y z [fx fy fz]', got {len(cols)} columns", path, lineno
                )
            try:
                z[k] = element_number(cols[0])
            except KeyError:
                raise ParseError(f"unknown element symbol {cols[0]!r}", path, lineno) from None
            try:
                vals = [float(c) for c in cols[1:]]
            except ValueError:
                raise ParseError("non-numeric coordinate", path, lineno) from None
            if not np.isfinite(vals).all():
                raise ParseError("non-finite coordinate", path, lineno)
            pos[k] = vals[:3]
            if len(vals) == 6:
                if frc is None:
                    if k:
                        raise ParseError("force columns missing on earlier atoms", path, lineno)
                    frc = np.empty((n, 3))
                frc[k] = vals[3:]
            elif frc is not None:
                raise ParseError("force columns missing on this atom", path, lineno)
        mols.append(Molecule(z, pos, props, frc, units))
        i += 2 + n
    return mols


def load_extxyz(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return parse_extxyz(text, path)


def worker_threads():
    try:
        return max(1, int(os.environ.get("GEOFORMER_THREADS", "1")))
    except ValueError:
        return 1


def load_many(paths):
    """Load several files, in order, using up to ``GEOFORMER_THREADS`` workers."""
    paths = list(paths)
    with ThreadPoolExecutor(max_workers=worker_threads()) as ex:
        parts = list(ex.map(load_extxyz, paths))
    return [m for part in parts for m in part]


def _fmt(x):
    return repr(float(x))


def format_extxyz(molecules):
    out = []
    for mol in molecules:
        out.append(str(mol.n_atoms))
        header = [f"{k}={_fmt(v)}" for k, v in mol.properties.items()]
        header += [f"unit:{k}={u}" for k, u in mol.units.items()]
        out.append(" ".join(header))
        for k in range(mol.n_atoms):
            cols = [ELEMENTS[mol.atomic_numbers[k] - 1]] + [_fmt(v) for v in mol.positions[k]]
            if mol.forces is not None:
                cols += [_fmt(v) for v in mol.forces[k]]
            out.append(" ".join(cols))
    return "\n".join(out) + "\n"


def write_extxyz(path, molecules):
    Path(path).write_text(format_extxyz(molecules))


# -- manifest and splits -----------------------------------------------------------

@dataclass
class DatasetManifest:
    data: list
    target: str
    split: tuple
    seed: int = 0
    unit: str = None

    def __post_init__(self):
        if isinstance(self.data, (str, Path)):
            self.data = [self.data]
        self.data = [Path(p) for p in self.data]
        self.split = tuple(int(s) for s in self.split)
        if len(self.split) != 3 or min(self.split) < 0:
            raise ConfigError(f"split must be three non-negative sizes, got {self.split}")

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        kv = {}
        for lineno, raw in enumerate(path.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = v
        return cls.from_mapping(kv, base=path.parent)

    @classmethod
    def from_mapping(cls, kv, base=None):
        missing = [k for k in ("data", "target", "split") if k not in kv]
        if missing:
            raise ConfigError(f"manifest is missing {', '.join(missing)}")
        data = [p.strip() for p in str(kv["data"]).split(",") if p.strip()]
        if base is not None:
            data = [p if Path(p).is_absolute() else str(Path(base) / p) for p in data]
        try:
            split = [int(s) for s in str(kv["split"]).split(",")]
            seed = int(kv.get("seed", 0))
        except ValueError:
            raise ConfigError(f"bad split/seed in manifest: {kv}") from None
        return cls(data, kv["target"], split, seed, kv.get("unit"))

    def load(self):
        mols = load_many(self.data)
        return mols

    def splits(self, molecules):
        tr, va, te = split_dataset(len(molecules), self.split, self.seed)
        return (
            [molecules[i] for i in tr],
            [molecules[i] for i in va],
            [molecules[i] for i in te],
        )


def split_dataset(molecules, sizes, seed):
    """Seeded shuffle followed by contiguous train/val/test partition (index lists)."""
    n = molecules if isinstance(molecules, (int, np.integer)) else len(molecules)
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 0:
        raise ConfigError(f"need three non-negative split sizes, got {sizes}")
    if sum(sizes) > n:
        raise ConfigError(f"split sizes {sizes} exceed the {n} available molecules")
    perm = np.random.default_rng(seed).permutation(n)
    a, b, c = sizes
    return perm[:a].tolist(), perm[a:a + b].tolist(), perm[a + b:a + b + c].tolist()


# -- batching --------------------------------------------------------------------

@dataclass
class Batch:
    atom_types: np.ndarray
    distances: np.ndarray
    mask: np.ndarray
    targets: np.ndarray = None
    forces: np.ndarray = None
    positions: np.ndarray = None
    order: np.ndarray = None

    def atoms(self, arr, i):
        """Rows of a per-atom array for molecule ``i``, back in input atom order."""
        arr = np.asarray(arr)
        k = int(self.mask[i].sum())
        if self.order is None:
            return arr[i, :k]
        out = np.empty_like(arr[i, :k])
        out[self.order[i, :k]] = arr[i, :k]
        return out

    def atom_pairs(self, arr, i):
        """An (..., N, N) per-pair array for molecule ``i`` in input atom order."""
        arr = np.asarray(arr)[i]
        k = int(self.mask[i].sum())
        arr = arr[..., :k, :k]
        if self.order is None:
            return arr
        inv = np.argsort(self.order[i, :k])
        return arr[..., inv[:, None], inv[None, :]]

    @property
    def size(self):
        return self.atom_types.shape[0]

    @property
    def n_max(self):
        return self.atom_types.shape[1]

    @property
    def n_atoms(self):
        return self.mask.sum(axis=1)


def canonical_order(atomic_numbers, distances):
    """Atom order by atomic number, then by sorted distance row.

    The key depends only on the geometry, so every input permutation of a
    molecule is batched identically and float reductions see one order.
    """
    rows = np.sort(distances, axis=1)
    return np.lexsort(tuple(rows.T[::-1]) + (atomic_numbers,))


def make_batch(molecules, target=None, with_positions=False, dtype=np.float64, canonical=True):
    """Pad molecules to the largest atom count; padding uses atom type 0.

    With ``canonical`` atoms are reordered by :func:`canonical_order`; ``order``
    records the input index of each batched atom (see :meth:`Batch.atoms`).
    """
    molecules = list(molecules)
    if not molecules:
        raise DataError("cannot batch an empty list of molecules")
    b = len(molecules)
    n = max(m.n_atoms for m in molecules)
    types = np.zeros((b, n), dtype=np.int64)
    dist = np.zeros((b, n, n), dtype=dtype)
    mask = np.zeros((b, n), dtype=bool)
    pos = np.zeros((b, n, 3), dtype=dtype) if with_positions else None
    has_forces = all(m.forces is not None for m in molecules)
    frc = np.zeros((b, n, 3), dtype=dtype) if has_forces else None
    targets = np.zeros(b, dtype=dtype) if target is not None else None
    order = np.zeros((b, n), dtype=np.int64)
    for i, m in enumerate(molecules):
        k = m.n_atoms
        d = pairwise_distances(m.positions)
        perm = canonical_order(m.atomic_numbers, d) if canonical else np.arange(k)
        order[i, :k] = perm
        types[i, :k] = m.atomic_numbers[perm]
        mask[i, :k] = True
        dist[i, :k, :k] = d[perm][:, perm]
        if pos is not None:
            pos[i, :k] = m.positions[perm]
        if frc is not None:
            frc[i, :k] = m.forces[perm]
        if targets is not None:
            if target not in m.properties:
                raise DataError(f"molecule {i} of the batch has no property {target!r}")
            targets[i] = m.properties[target]
    return Batch(types, dist, mask, targets, frc, pos, order)


def iter_batches(molecules, batch_size):
    for start in range(0, len(molecules), batch_size):
        yield molecules[start:start + batch_size]


# -- target conditioning and atomization energies ----------------------------------

class TargetScaler:
    """Standardize a scalar target with train-set statistics (sklearn-style).

    With ``per_atom=True`` the offset is ``n_atoms * mean_``, a per-atom mean
    fit by least squares. That transform is additive over merged systems, so a
    mixed label stays the sum of its parts after scaling.
    """

    def __init__(self, with_mean=True, with_std=True, per_atom=False):
        self.with_mean = with_mean
        self.with_std = with_std
        self.per_atom = per_atom

    def _counts(self, y, n_atoms):
        if not self.per_atom:
            return np.ones_like(y)
        if n_atoms is None:
            raise ValueError("a per-atom scaler needs n_atoms")
        n = np.asarray(n_atoms, dtype=np.float64)
        if n.shape != y.shape:
            raise ValueError(f"n_atoms has shape {n.shape}, targets have {y.shape}")
        return n

    def fit(self, y, n_atoms=None):
        y = np.asarray(y, dtype=np.float64)
        n = self._counts(y, n_atoms)
        self.mean_ = float((y * n).sum() / (n * n).sum()) if self.with_mean else 0.0
        std = float((y - n * self.mean_).std()) if self.with_std else 1.0
        self.scale_ = std if std > 0 else 1.0
        return self

    def transform(self, y, n_atoms=None):
        y = np.asarray(y, dtype=np.float64)
        return (y - self._counts(y, n_atoms) * self.mean_) / self.scale_

    def inverse_transform(self, y, n_atoms=None):
        y = np.asarray(y, dtype=np.float64)
        return y * self.scale_ + self._counts(y, n_atoms) * self.mean_

    def fit_transform(self, y, n_atoms=None):
        return self.fit(y, n_atoms).transform(y, n_atoms)


def read_reference_table(path):
    """Per-element reference energies, one ``Symbol value`` (or ``Symbol=value``) per line."""
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].replace("=", " ").strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected 'Symbol value'", path, lineno)
        try:
            table[element_number(parts[0])] = float(parts[1])
        except (KeyError, ValueError):
            raise ParseError(f"bad reference entry {raw.strip()!r}", path, lineno) from None
    return table


def subtract_references(molecules, table, properties):
    """Return copies with ``sum_i table[z_i]`` subtracted from each named property."""
    out = []
    for idx, m in enumerate(molecules):
        missing = sorted({int(z) for z in m.atomic_numbers} - set(table))
        if missing:
            names = ", ".join(ELEMENTS[z - 1] for z in missing)
            raise DataError(f"record {idx}: no reference energy for {names}")
        ref = float(sum(table[int(z)] for z in m.atomic_numbers))
        props = dict(m.properties)
        for p in properties:
            if p in props:
                props[p] = props[p] - ref
        out.append(m.copy(properties=props))
    return out
