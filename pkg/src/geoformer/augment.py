"""Molecule mixup: merge two molecules placed far apart and sum their labels."""

from dataclasses import dataclass

import numpy as np

from .data import Molecule
from .exceptions import ConfigError, DataError


@dataclass
class MixConfig:
    translation: float = 1e4
    fraction: float = 0.5
    min_separation: float = 1e3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"augmentation fraction must be in [0, 1], got {self.fraction}")
        if self.translation * np.sqrt(3.0) <= self.min_separation:
            raise ConfigError(
                f"translation {self.translation} cannot separate molecules by {self.min_separation} Å"
            )


def random_rotation(rng):
    """Uniform random rotation matrix from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def cross_distances(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def mix(mi, mj, cfg=None, prop=None, rng=None, rotation=None):
    """Union of ``mi`` and a rotated, translated copy of ``mj``.

    Both parts are centered first; ``mj`` is moved by ``x -> R x + t * (1, 1, 1)``.
    The label is the sum of the parents' labels (``prop``, or every property
    both share when ``None``).  Forces of ``mj`` rotate with it.
    """
    cfg = cfg or MixConfig()
    if rotation is None:
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        rotation = random_rotation(rng)
    names = [prop] if prop is not None else [k for k in mi.properties if k in mj.properties]
    for name in names:
        for which, m in (("first", mi), ("second", mj)):
            if name not in m.properties:
                raise DataError(f"{which} molecule has no property {name!r}")
    xi = mi.positions - mi.positions.mean(axis=0)
    xj = (mj.positions - mj.positions.mean(axis=0)) @ rotation.T + cfg.translation
    sep = cross_distances(xi, xj).min()
    if sep <= cfg.min_separation:
        raise DataError(f"mixed parts are only {sep:.3g} Å apart (need > {cfg.min_separation})")
    forces = None
    if mi.forces is not None and mj.forces is not None:
        forces = np.concatenate([mi.forces, mj.forces @ rotation.T])
    return Molecule(
        np.concatenate([mi.atomic_numbers, mj.atomic_numbers]),
        np.concatenate([xi, xj]),
        {k: mi.properties[k] + mj.properties[k] for k in names},
        forces,
        dict(mi.units),
    )


def augment_half_batch(molecules, cfg=None, rng=None, prop=None, return_flags=False):
    """Keep the leading part of a shuffled batch and mix the trailing ``fraction`` in pairs.

    With the default fraction of one half a batch of ``B`` becomes
    ``B - B//2`` originals followed by ``B//4`` mixed systems (an unpaired
    leftover passes through unmixed).
    """
    cfg = cfg or MixConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    molecules = list(molecules)
    n = len(molecules)
    n_aug = int(np.floor(n * cfg.fraction)) if n >= 2 else 0
    keep = molecules[:n - n_aug]
    pool = molecules[n - n_aug:]
    out = list(keep)
    flags = [False] * len(keep)
    for k in range(0, len(pool) - 1, 2):
        out.append(mix(pool[k], pool[k + 1], cfg, prop, rng))
        flags.append(True)
    if len(pool) % 2:
        out.append(pool[-1])
        flags.append(False)
    return (out, flags) if return_flags else out
