"""Initial atom embeddings: geometric positional encoding and a Laplacian-eigenmap baseline."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autodiff import Tensor, embedding, gelu, linear, mul, tsum, where
from .data import MAX_Z, make_batch, pair_mask
from .exceptions import DataError

EMB_STD = 0.02


def _check_types(atom_types, vocab):
    atom_types = np.asarray(atom_types)
    if atom_types.size and (atom_types.min() < 0 or atom_types.max() >= vocab):
        raise DataError(f"atom type outside vocabulary [0, {vocab}): {atom_types.max()}")
    return atom_types


def atom_embedding(params, prefix, atom_types, mask):
    table = params[f"{prefix}.emb"]
    atom_types = _check_types(atom_types, table.shape[0])
    emb = embedding(table, atom_types)
    zero = Tensor(np.zeros((), dtype=table.dtype))
    return where(np.asarray(mask)[..., None], emb, zero)


def fpos_net(params, prefix, distances):
    """Scalar-to-scalar distance map applied elementwise: dense(1->H), gelu, dense(H->1)."""
    b, n, _ = distances.shape
    h = linear(distances.reshape(b, n, n, 1), params[f"{prefix}.fpos.w1"], params[f"{prefix}.fpos.b1"])
    out = linear(gelu(h), params[f"{prefix}.fpos.w2"], params[f"{prefix}.fpos.b2"])
    return out.reshape(b, n, n)


def encode(params, prefix, atom_types, distances, mask, fpos=None):
    """Geometry-aware initial embedding.

    ``y_i = Emb(z_i) + W * sum_{j != i} f_pos(d_ij)`` over real atoms ``j``;
    padded rows come out as zeros.  ``fpos`` replaces the learned distance map
    (used by tests to stub it).
    """
    mask = np.asarray(mask, dtype=bool)
    distances = distances if isinstance(distances, Tensor) else Tensor(distances)
    emb = atom_embedding(params, prefix, atom_types, mask)
    f = fpos(distances) if fpos is not None else fpos_net(params, prefix, distances)
    zero = Tensor(np.zeros((), dtype=emb.dtype))
    f = where(pair_mask(mask), f, zero)
    s = tsum(f, axis=-1)                                   # (B, N)
    b, n = s.shape
    pe = mul(s.reshape(b, n, 1), params[f"{prefix}.proj"])  # (B, N, d)
    return where(mask[..., None], emb + pe, zero)


def init_gpe(rng, d, hidden, dtype=np.float64, vocab=MAX_Z + 1):
    emb = rng.normal(0.0, EMB_STD, size=(vocab, d))
    emb[0] = 0.0
    lim1 = np.sqrt(6.0 / (1 + hidden))
    lim2 = np.sqrt(6.0 / (hidden + 1))
    limp = np.sqrt(6.0 / (1 + d))
    return {
        "emb": emb.astype(dtype),
        "fpos.w1": rng.uniform(-lim1, lim1, size=(1, hidden)).astype(dtype),
        "fpos.b1": np.zeros(hidden, dtype=dtype),
        "fpos.w2": rng.uniform(-lim2, lim2, size=(hidden, 1)).astype(dtype),
        "fpos.b2": np.zeros(1, dtype=dtype),
        "proj": rng.uniform(-limp, limp, size=d).astype(dtype),
    }


# -- Laplacian eigenmap baseline ---------------------------------------------------

def _fix_sign(vecs, tol=1e-12):
    for c in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, c]) > tol)
        if nz.size and vecs[nz[0], c] < 0:
            vecs[:, c] = -vecs[:, c]
    return vecs


def molecule_eigenmap(dist, k):
    """Eigenvectors of the k smallest nonzero eigenvalues of a Gaussian-affinity Laplacian.

    Bandwidth is the median off-diagonal distance.  Columns beyond ``n - 1``
    are zero.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    out = np.zeros((n, k))
    if n < 2 or k == 0:
        return out
    off = dist[~np.eye(n, dtype=bool)]
    sigma = float(np.median(off))
    if sigma <= 0:
        return out
    aff = np.exp(-(dist ** 2) / (2.0 * sigma ** 2))
    np.fill_diagonal(aff, 0.0)
    lap = np.diag(aff.sum(axis=1)) - aff
    _, vecs = np.linalg.eigh(lap)
    m = min(k, n - 1)
    out[:, :m] = _fix_sign(vecs[:, 1:1 + m].copy())
    return out


def laplacian_eigenmap_pe(distances, mask, k):
    """Per-molecule eigenmaps for a padded batch; (B, N_max, k), zero on padding."""
    distances = np.asarray(distances, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    b, n, _ = distances.shape
    out = np.zeros((b, n, k))
    for i in range(b):
        idx = np.flatnonzero(mask[i])
        sub = distances[i][np.ix_(idx, idx)]
        out[i, idx] = molecule_eigenmap(sub, k)
    return out


def encode_laplacian(params, prefix, atom_types, distances, mask, k):
    mask = np.asarray(mask, dtype=bool)
    dist = distances.data if isinstance(distances, Tensor) else distances
    emb = atom_embedding(params, prefix, atom_types, mask)
    eig = Tensor(laplacian_eigenmap_pe(dist, mask, k).astype(emb.dtype))
    return emb + linear(eig, params[f"{prefix}.lap"])


def init_laplacian(rng, d, k, dtype=np.float64, vocab=MAX_Z + 1):
    emb = rng.normal(0.0, EMB_STD, size=(vocab, d))
    emb[0] = 0.0
    lim = np.sqrt(6.0 / (k + d))
    return {
        "emb": emb.astype(dtype),
        "lap": rng.uniform(-lim, lim, size=(k, d)).astype(dtype),
    }


def init_plain(rng, d, dtype=np.float64, vocab=MAX_Z + 1):
    emb = rng.normal(0.0, EMB_STD, size=(vocab, d))
    emb[0] = 0.0
    return {"emb": emb.astype(dtype)}


class LaplacianEigenmapEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer from molecules to padded (B, N_max, k) eigenmap features."""

    def __init__(self, n_components=15):
        self.n_components = n_components

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        batch = make_batch(X, canonical=False)
        return laplacian_eigenmap_pe(batch.distances, batch.mask, self.n_components)

