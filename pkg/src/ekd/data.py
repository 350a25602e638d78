"""Synthetic identity datasets, balanced batches and evaluation pairs.

Identities are prototype directions drawn uniformly on the unit sphere;
each sample is its prototype plus isotropic Gaussian noise. The resulting
same/different-identity similarity distributions overlap, which gives the
FPR-anchored thresholds something non-trivial to track.

With ``latent_dim > 0`` the sphere and the noise live in a small latent
space instead, and a fixed random one-hidden-layer ReLU map lifts them to
``input_dim``. The lifted features are centred and scaled to unit RMS norm.
Identity structure then sits on a curved manifold, so a wider network
learns a better metric than a narrow one and the teacher/student capacity
gap shows up on held-out identities.
"""
import csv
import struct
from dataclasses import dataclass

import numpy as np

from .numeric import make_rng

EKDS_MAGIC = b"EKDSETv1"


@dataclass(frozen=True)
class DatasetSpec:
    num_identities: int = 250
    samples_per_identity: int = 20
    input_dim: int = 64
    noise_sigma: float = 0.3
    seed: int = 0
    latent_dim: int = 0
    warp_hidden: int = 128

    def validate(self):
        if self.num_identities < 2:
            raise ValueError("num_identities must be >= 2 (negative pairs need two identities)")
        if self.samples_per_identity < 2:
            raise ValueError("samples_per_identity must be >= 2 (positive pairs need two samples)")
        if self.input_dim < 2:
            raise ValueError("input_dim must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.latent_dim < 0 or self.latent_dim == 1:
            raise ValueError("latent_dim must be 0 (off) or >= 2")
        if self.latent_dim and self.warp_hidden < 1:
            raise ValueError("warp_hidden must be >= 1")


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_identities: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, dim) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_identities):
            raise ValueError("labels must lie in [0, num_identities)")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]

    def identity_indices(self):
        """Row indices per identity, each in ascending order."""
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(self.num_identities + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(self.num_identities)]


@dataclass
class BalancedBatch:
    sample_indices: np.ndarray
    p: int
    q: int


@dataclass
class PairList:
    """Evaluation pairs as parallel index arrays, canonical ``i < j`` order."""
    pos_i: np.ndarray
    pos_j: np.ndarray
    neg_i: np.ndarray
    neg_j: np.ndarray

    @property
    def num_pos(self):
        return self.pos_i.shape[0]

    @property
    def num_neg(self):
        return self.neg_i.shape[0]


def _warp(latent, spec, rng):
    h = spec.warp_hidden
    w1 = rng.standard_normal((spec.latent_dim, h)) * np.sqrt(2.0 / spec.latent_dim)
    b1 = 0.5 * rng.standard_normal(h)
    w2 = rng.standard_normal((h, spec.input_dim)) * np.sqrt(1.0 / h)
    x = np.maximum(latent @ w1 + b1, 0.0) @ w2
    x -= x.mean(axis=0)
    return x / np.sqrt(np.mean(np.einsum("ij,ij->i", x, x)))


def generate_dataset(spec):
    spec.validate()
    rng = make_rng(spec.seed, "data")
    dim = spec.latent_dim or spec.input_dim
    protos = rng.standard_normal((spec.num_identities, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    labels = np.repeat(np.arange(spec.num_identities), spec.samples_per_identity)
    noise = rng.standard_normal((labels.size, dim))
    features = protos[labels] + spec.noise_sigma * noise
    if spec.latent_dim:
        features = _warp(features, spec, rng)
    # round to float32 so an EKDS save/load round trip is lossless
    features = features.astype(np.float32).astype(np.float64)
    return LabeledDataset(features, labels, spec.num_identities)


def split_identities(dataset, num_eval_identities):
    """Split off the last ``num_eval_identities`` identities as a held-out set.

    Both halves are relabelled to ``0..n-1``; the identity sets are disjoint.
    """
    n_train = dataset.num_identities - num_eval_identities
    if n_train < 2 or num_eval_identities < 2:
        raise ValueError("both splits need at least 2 identities")
    is_train = dataset.labels < n_train
    train = LabeledDataset(dataset.features[is_train], dataset.labels[is_train], n_train)
    held = LabeledDataset(dataset.features[~is_train], dataset.labels[~is_train] - n_train,
                          num_eval_identities)
    return train, held


def make_balanced_batches(dataset, p, q, rng):
    """One epoch of balanced batches with ``p`` identities x ``q`` samples.

    Each identity's samples are shuffled and cut into ``n // q`` chunks of
    ``q``. Round ``r`` takes chunk ``r`` of every identity that has one,
    shuffles those identities and packs them ``p`` at a time; identities left
    over at the end of a round are dropped.
    """
    if p * q == 0:
        raise ValueError("p and q must both be positive")
    groups = dataset.identity_indices()
    if p > dataset.num_identities:
        raise ValueError(f"p={p} exceeds num_identities={dataset.num_identities}")
    if q > min(len(g) for g in groups):
        raise ValueError(f"q={q} exceeds the smallest identity size")
    chunks = []
    for g in groups:
        perm = g[rng.permutation(len(g))]
        chunks.append([perm[c * q:(c + 1) * q] for c in range(len(g) // q)])
    n_rounds = max(len(c) for c in chunks)
    batches = []
    for r in range(n_rounds):
        ids = np.array([i for i, c in enumerate(chunks) if len(c) > r])
        ids = ids[rng.permutation(ids.size)]
        for b in range(ids.size // p):
            members = ids[b * p:(b + 1) * p]
            idx = np.concatenate([chunks[i][r] for i in members])
            batches.append(BalancedBatch(idx, p, q))
    return batches


def _sample_pairs(i, j, cap, rng):
    if cap is None or cap >= i.size:
        return i, j
    keep = np.sort(rng.choice(i.size, size=cap, replace=False))
    return i[keep], j[keep]


def build_eval_pairs(dataset, max_pos=None, max_neg=None, rng=None):
    """Positive/negative pairs over ``dataset``, capped by uniform subsampling."""
    n = len(dataset)
    ii, jj = np.triu_indices(n, k=1)
    same = dataset.labels[ii] == dataset.labels[jj]
    if not same.any():
        raise ValueError("no positive pairs available")
    if rng is None:
        rng = make_rng(0, "eval_pairs")
    pos_i, pos_j = _sample_pairs(ii[same], jj[same], max_pos, rng)
    neg_i, neg_j = _sample_pairs(ii[~same], jj[~same], max_neg, rng)
    return PairList(pos_i, pos_j, neg_i, neg_j)


def flip_augment(features, coords, prob, rng):
    """Sign-flip ``coords`` of each row with probability ``prob``."""
    if not coords or prob <= 0:
        return features
    out = features.copy()
    flip = rng.random(features.shape[0]) < prob
    cols = np.asarray(coords, dtype=np.int64)
    out[np.ix_(flip, cols)] *= -1.0
    return out


def save_ekds(dataset, path):
    n, dim = dataset.features.shape
    with open(path, "wb") as fh:
        fh.write(EKDS_MAGIC)
        fh.write(struct.pack("<III", n, dim, dataset.num_identities))
        fh.write(dataset.features.astype("<f4").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())


def load_ekds(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != EKDS_MAGIC:
        raise ValueError(f"{path}: not an EKDS dataset file (bad magic)")
    n, dim, n_ids = struct.unpack_from("<III", blob, 8)
    off = 8 + 12
    expected = off + 4 * n * dim + 4 * n
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated or oversized EKDS file ({len(blob)} != {expected} bytes)")
    feats = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=off).reshape(n, dim)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off + 4 * n * dim)
    return LabeledDataset(feats.astype(np.float64), labels.astype(np.int64), n_ids)


def export_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(dataset.input_dim)])
        for lab, row in zip(dataset.labels, dataset.features):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def similarity_summary(dataset):
    """Mean within- and cross-identity cosine similarity in input space."""
    x = dataset.features / np.linalg.norm(dataset.features, axis=1, keepdims=True)
    gram = x @ x.T
    same = dataset.labels[:, None] == dataset.labels[None, :]
    np.fill_diagonal(same, False)
    diff = dataset.labels[:, None] != dataset.labels[None, :]
    return float(gram[same].mean()), float(gram[diff].mean())
