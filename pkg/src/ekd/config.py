"""Run configuration with layered overrides.

Precedence is built-in defaults < flat ``key = value`` config file <
command-line flags. ``#`` starts a comment in config files.
"""
import dataclasses
from dataclasses import dataclass, fields

from .losses import LossConfig
from .metrics import fpr_grid

MODES = ("teacher", "distill", "baseline_arcface", "baseline_relation_l2")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "distill"
    seed: int = 0
    # data: either files or a synthetic spec
    data: str = ""
    eval_data: str = ""
    num_train_ids: int = 200
    num_eval_ids: int = 50
    samples_per_id: int = 20
    input_dim: int = 64
    noise_sigma: float = 0.05
    data_seed: int = 1
    latent_dim: int = 6
    warp_hidden: int = 128
    # models
    teacher_hidden: tuple = (256, 128)
    student_hidden: tuple = (32,)
    embedding_dim: int = 64
    # optimisation
    epochs: int = 20
    p: int = 32
    q: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (8, 14, 18)
    arcface_scale: float = 64.0
    arcface_margin: float = 0.5
    easy_margin: bool = True
    flip_coords: tuple = ()
    flip_prob: float = 0.5
    # distillation
    tau: float = 0.01
    lambda_pos: float = 0.02
    lambda_neg: float = 0.01
    n_hard_neg: int = 2000
    variant: str = "rank"
    mining: str = "hard"
    mine_by: str = "student"
    warmup_steps: int = 100
    alpha: float = 0.99
    train_fpr_upper: float = 1e-1
    train_fpr_lower: float = 1e-4
    train_k: int = 4
    # evaluation
    eval_fprs: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    eval_max_pos: int = 0
    eval_max_neg: int = 0
    roc_points: int = 200

    def loss_config(self):
        return LossConfig(self.tau, self.lambda_pos, self.lambda_neg, self.n_hard_neg,
                          self.variant, self.mining, self.mine_by, self.warmup_steps)

    def train_grid(self):
        return fpr_grid(self.train_fpr_upper, self.train_fpr_lower, self.train_k)

    def teacher_dims(self):
        return [self.input_dim, *self.teacher_hidden, self.embedding_dim]

    def student_dims(self):
        return [self.input_dim, *self.student_hidden, self.embedding_dim]

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.p < 2 or self.q < 2:
            raise ConfigError("balanced batches need p >= 2 identities and q >= 2 samples")
        if self.train_k < 1:
            raise ConfigError("train_k must be >= 1")
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must be in [0, 1)")
        try:
            self.loss_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_DEFAULTS = TrainConfig()


def _coerce(key, raw):
    kind = type(getattr(_DEFAULTS, key))
    raw = raw.strip() if isinstance(raw, str) else raw
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is tuple:
        if isinstance(raw, (list, tuple)):
            items = list(raw)
        else:
            items = [s for s in str(raw).replace(",", " ").split() if s]
        elem = type(getattr(_DEFAULTS, key)[0]) if getattr(_DEFAULTS, key) else int
        return tuple(elem(float(s)) if elem is int else elem(s) for s in items)
    if kind is int:
        val = float(raw)
        if val != int(val):
            raise ValueError(f"not an integer: {raw!r}")
        return int(val)
    return kind(raw)


def parse_config_text(text, source="<config>"):
    """Parse flat ``key = value`` lines into a dict of typed overrides."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return out


def load_config_file(path):
    with open(path) as fh:
        return parse_config_text(fh.read(), source=str(path))


def resolve_config(file_overrides=None, flag_overrides=None, **base):
    """Layer defaults, config-file values and flags into one validated config."""
    merged = dict(base)
    for layer in (file_overrides or {}, flag_overrides or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
    return TrainConfig(**merged).validate()


def format_config(config):
    """Render as flat ``key = value`` text that parses back to the same config."""
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
