"""scikit-learn style wrappers around the training loop.

``ArcFaceEmbedder`` learns an embedding network with ArcFace alone and
``EKDStudent`` distils a fitted teacher into a smaller network. Both map
``X`` to unit-norm embedding rows in ``transform``.
"""
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import TrainConfig
from .data import LabeledDataset
from .model import forward
from .trainer import fit_embedding


def _relabel(y):
    classes, y_idx = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise ValueError("need at least 2 identities")
    return classes, y_idx


class ArcFaceEmbedder(BaseEstimator, TransformerMixin):
    def __init__(self, hidden=(256, 128), embedding_dim=64, epochs=20, p=32, q=4, lr=0.01,
                 momentum=0.9, weight_decay=5e-4, milestones=(8, 14, 18),
                 arcface_scale=64.0, arcface_margin=0.5, seed=0):
        self.hidden = hidden
        self.embedding_dim = embedding_dim
        self.epochs = epochs
        self.p = p
        self.q = q
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.milestones = milestones
        self.arcface_scale = arcface_scale
        self.arcface_margin = arcface_margin
        self.seed = seed

    def _config(self, mode, **extra):
        return TrainConfig(mode=mode, epochs=self.epochs, p=self.p, q=self.q, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay,
                           milestones=tuple(self.milestones),
                           arcface_scale=self.arcface_scale,
                           arcface_margin=self.arcface_margin, seed=self.seed,
                           **extra).validate()

    def _fit(self, X, y, mode, teacher=None, **extra):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = _relabel(y)
        dims = [X.shape[1], *self.hidden, self.embedding_dim]
        train = LabeledDataset(X, y_idx, self.classes_.size)
        self.history_ = []
        self.params_, self.head_ = fit_embedding(self._config(mode, **extra), train, dims,
                                                 teacher, mode, self.history_.append)
        self.n_features_in_ = X.shape[1]
        return self

    def fit(self, X, y):
        return self._fit(X, y, "teacher")

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return forward(self.params_, X)[0]


class EKDStudent(ArcFaceEmbedder):
    """Student trained with ArcFace plus a pair term against ``teacher``.

    ``teacher`` is a fitted ``ArcFaceEmbedder``. ``mode`` picks the pair
    term: ``distill`` (rank loss by default), ``baseline_relation_l2`` or
    ``baseline_arcface`` (no pair term; diagnostics only).
    """

    def __init__(self, teacher=None, hidden=(32,), embedding_dim=64, mode="distill",
                 tau=0.01, lambda_pos=0.02, lambda_neg=0.01, n_hard_neg=2000,
                 variant="rank", mining="hard", warmup_steps=100, alpha=0.99,
                 train_fpr_upper=1e-1, train_fpr_lower=1e-4, train_k=4,
                 epochs=20, p=32, q=4, lr=0.01, momentum=0.9, weight_decay=5e-4,
                 milestones=(8, 14, 18), arcface_scale=64.0, arcface_margin=0.5, seed=0):
        super().__init__(hidden, embedding_dim, epochs, p, q, lr, momentum, weight_decay,
                         milestones, arcface_scale, arcface_margin, seed)
        self.teacher = teacher
        self.mode = mode
        self.tau = tau
        self.lambda_pos = lambda_pos
        self.lambda_neg = lambda_neg
        self.n_hard_neg = n_hard_neg
        self.variant = variant
        self.mining = mining
        self.warmup_steps = warmup_steps
        self.alpha = alpha
        self.train_fpr_upper = train_fpr_upper
        self.train_fpr_lower = train_fpr_lower
        self.train_k = train_k

    def fit(self, X, y):
        if self.teacher is None:
            raise ValueError("EKDStudent needs a fitted teacher")
        check_is_fitted(self.teacher, "params_")
        return self._fit(X, y, self.mode, self.teacher.params_,
                         tau=self.tau, lambda_pos=self.lambda_pos,
                         lambda_neg=self.lambda_neg, n_hard_neg=self.n_hard_neg,
                         variant=self.variant, mining=self.mining,
                         warmup_steps=self.warmup_steps, alpha=self.alpha,
                         train_fpr_upper=self.train_fpr_upper,
                         train_fpr_lower=self.train_fpr_lower, train_k=self.train_k)

    @property
    def critical_ratios_(self):
        check_is_fitted(self, "history_")
        return np.array([r["critical_ratio"] for r in self.history_])
