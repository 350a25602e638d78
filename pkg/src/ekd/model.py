"""Embedding MLPs with hand-written backprop, the ArcFace head and SGD.

An embedding network is ``linear -> ReLU -> ... -> linear`` followed by row
L2 normalisation, so inner products between outputs are cosines.
"""
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .numeric import matmul, row_l2_normalize

CKPT_MAGIC = b"EKDCKPT1"


@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def embedding_dim(self):
        return self.weights[-1].shape[1]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])


@dataclass
class ForwardTrace:
    inputs: list          # input to each layer
    pre_activations: list  # z = h W + b per layer
    raw_embeddings: np.ndarray
    norms: np.ndarray
    embeddings: np.ndarray


@dataclass
class ArcFaceHead:
    centers: np.ndarray
    scale: float = 64.0
    margin: float = 0.5
    easy_margin: bool = True

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("ArcFace scale must be > 0")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("ArcFace margin must lie in [0, pi/2)")

    @property
    def num_classes(self):
        return self.centers.shape[0]

    def renormalize(self):
        self.centers /= np.linalg.norm(self.centers, axis=1, keepdims=True)


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)


def init_params(dims, rng):
    """He-normal weights, zero biases."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dims")
    if any(d <= 0 for d in dims):
        raise ValueError(f"all layer dims must be positive, got {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def init_head(num_classes, dim, rng, scale=64.0, margin=0.5, easy_margin=True):
    centers = rng.standard_normal((num_classes, dim))
    head = ArcFaceHead(centers, scale, margin, easy_margin)
    head.renormalize()
    return head


def forward(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input has shape {x.shape}, network expects (*, {params.weights[0].shape[0]})")
    inputs, pres = [], []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = matmul(h, w) + b
        pres.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    emb, norms = row_l2_normalize(h)
    return emb, ForwardTrace(inputs, pres, h, norms, emb)


def backward(params, trace, grad_embeddings):
    """Gradients of ``sum(grad_embeddings * embeddings)`` wrt the params."""
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != trace.embeddings.shape:
        raise ValueError(f"grad shape {g.shape} != embedding shape {trace.embeddings.shape}")
    e = trace.embeddings
    # Jacobian of x / ||x||: (I - e e^T) / ||x||
    g = (g - e * np.einsum("ij,ij->i", e, g)[:, None]) / trace.norms[:, None]
    grads = params.zeros_like()
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * (trace.pre_activations[i] > 0)
        grads.weights[i] = matmul(trace.inputs[i].T, g)
        grads.biases[i] = g.sum(axis=0)
        if i > 0:
            g = matmul(g, params.weights[i].T)
    return grads


def arcface_logits(head, embeddings, labels):
    """Return ``(logits, cos, target_cos, d target_cos / d cos)``."""
    cos = matmul(embeddings, head.centers.T)
    rows = np.arange(labels.size)
    cy = cos[rows, labels]
    sin = np.sqrt(np.maximum(1.0 - cy * cy, 1e-12))
    cm, sm = math.cos(head.margin), math.sin(head.margin)
    phi = cy * cm - sin * sm
    dphi = cm + sm * cy / sin
    use = cy > 0 if head.easy_margin else np.ones_like(cy, dtype=bool)
    target = np.where(use, phi, cy)
    dtarget = np.where(use, dphi, 1.0)
    logits = head.scale * cos
    logits[rows, labels] = head.scale * target
    return logits, cos, target, dtarget


def arcface_loss_and_grad(head, embeddings, labels):
    """Mean ArcFace cross-entropy plus gradients wrt embeddings and centers."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise ValueError(f"label out of range for {head.num_classes} classes")
    n = labels.size
    logits, cos, _, dtarget = arcface_logits(head, embeddings, labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1)
    rows = np.arange(n)
    loss = float(np.mean(np.log(denom) - shifted[rows, labels]))
    dz = expz / denom[:, None]
    dz[rows, labels] -= 1.0
    dz /= n
    dcos = head.scale * dz
    dcos[rows, labels] *= dtarget
    return loss, matmul(dcos, head.centers), matmul(dcos.T, embeddings)


def sgd_step(params, grads, opt, key="model"):
    """Momentum SGD with L2 weight decay folded into the velocity; in place."""
    arrays = params.arrays() if isinstance(params, MlpParams) else list(params)
    garrays = grads.arrays() if isinstance(grads, MlpParams) else list(grads)
    bufs = opt.buffers.setdefault(key, [np.zeros_like(a) for a in arrays])
    if len(bufs) != len(arrays) or any(b.shape != a.shape for b, a in zip(bufs, arrays)):
        raise ValueError("optimizer buffers do not match parameter shapes")
    for p, g, v in zip(arrays, garrays, bufs):
        v *= opt.momentum
        v += g
        if opt.weight_decay:
            v += opt.weight_decay * p
        p -= opt.lr * v
    return params


def lr_schedule(epoch, base_lr=0.1, milestones=(10, 18, 24)):
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr / 10.0 ** passed


def config_hash(config):
    """64-bit hash of a JSON-serialisable config mapping."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return struct.unpack("<Q", hashlib.sha256(blob).digest()[:8])[0]


def save_checkpoint(path, params, head, chash):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params.weights)))
        for w, b in zip(params.weights, params.biases):
            fh.write(struct.pack("<II", *w.shape))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        if head is None:
            fh.write(struct.pack("<II", 0, 0))
            fh.write(struct.pack("<ddB", 0.0, 0.0, 0))
        else:
            fh.write(struct.pack("<II", *head.centers.shape))
            fh.write(struct.pack("<ddB", head.scale, head.margin, int(head.easy_margin)))
            fh.write(np.ascontiguousarray(head.centers, dtype="<f8").tobytes())
        fh.write(struct.pack("<Q", chash))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expected_hash=None):
    """Return ``(params, head, config_hash)``; ``head`` may be None."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not an EKDCKPT1 checkpoint (bad magic)")
    off = 8
    try:
        (n_layers,) = struct.unpack_from("<I", blob, off)
        off += 4
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", blob, off)
            off += 8
            w = np.frombuffer(blob, "<f8", rows * cols, off).reshape(rows, cols).astype(np.float64)
            off += 8 * rows * cols
            b = np.frombuffer(blob, "<f8", cols, off).astype(np.float64)
            off += 8 * cols
            weights.append(w)
            biases.append(b)
        n_cls, dim = struct.unpack_from("<II", blob, off)
        off += 8
        scale, margin, easy = struct.unpack_from("<ddB", blob, off)
        off += 17
        head = None
        if n_cls:
            centers = np.frombuffer(blob, "<f8", n_cls * dim, off).reshape(n_cls, dim).astype(np.float64)
            off += 8 * n_cls * dim
            head = ArcFaceHead(centers, scale, margin, bool(easy))
        (chash,) = struct.unpack_from("<Q", blob, off)
        off += 8
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    if expected_hash is not None and chash != expected_hash:
        raise CheckpointError(
            f"{path}: config hash mismatch (checkpoint {chash:016x}, expected {expected_hash:016x})")
    return MlpParams(weights, biases), head, chash
