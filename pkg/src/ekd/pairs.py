"""In-batch pair enumeration and cosine similarities with their adjoint."""
from dataclasses import dataclass

import numpy as np

from .numeric import matmul


@dataclass
class PairSet:
    """Positive and negative pairs as ``(n, 2)`` index arrays with ``i < j``."""
    pos: np.ndarray
    neg: np.ndarray

    @property
    def num_pos(self):
        return self.pos.shape[0]

    @property
    def num_neg(self):
        return self.neg.shape[0]


def enumerate_pairs(labels):
    labels = np.asarray(labels)
    ii, jj = np.triu_indices(labels.size, k=1)
    same = labels[ii] == labels[jj]
    pos = np.stack([ii[same], jj[same]], axis=1)
    neg = np.stack([ii[~same], jj[~same]], axis=1)
    return PairSet(pos, neg)


def gram(emb, tol=1e-6):
    emb = np.asarray(emb, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", emb, emb))
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError("pairwise similarities need unit-norm embeddings")
    return matmul(emb, emb.T)


def pairwise_similarities(emb, pairs):
    """Cosine similarities at pair indices; returns ``(pos_sims, neg_sims)``."""
    g = gram(emb)
    return g[pairs.pos[:, 0], pairs.pos[:, 1]], g[pairs.neg[:, 0], pairs.neg[:, 1]]


def similarities_at(emb, index_pairs):
    g = gram(emb)
    return g[index_pairs[:, 0], index_pairs[:, 1]]


def scatter_pair_grads(emb, index_pairs, grad_per_pair):
    """Adjoint of ``s_ij = <e_i, e_j>``: route per-pair grads back to rows."""
    emb = np.asarray(emb, dtype=np.float64)
    index_pairs = np.asarray(index_pairs, dtype=np.int64).reshape(-1, 2)
    g = np.asarray(grad_per_pair, dtype=np.float64).ravel()
    if g.size != index_pairs.shape[0]:
        raise ValueError("one gradient per pair required")
    n = emb.shape[0]
    if index_pairs.size and (index_pairs.min() < 0 or index_pairs.max() >= n):
        raise IndexError("pair index out of range")
    w = np.zeros((n, n))
    np.add.at(w, (index_pairs[:, 0], index_pairs[:, 1]), g)
    w = w + w.T
    return matmul(w, emb)
