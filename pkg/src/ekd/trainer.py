"""Teacher training, student distillation, baselines and evaluation.

The step loop follows the distillation recipe literally: forward both
models, build in-batch pairs, refresh both EMA threshold vectors from the
batch negatives, score positives and mined negatives with the configured
pair loss, add ArcFace, and update the student only.

A run directory holds::

    manifest.json   resolved config, seed, hash, artifact paths, version
    metrics.txt     one ``key=value`` record per step, appended as we go
    model.ckpt      EKDCKPT1 checkpoint
    eval.csv        fpr,threshold,tpr on the held-out identities
    roc.csv         threshold,fpr,tpr
"""
import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import TrainConfig
from .data import (DatasetSpec, build_eval_pairs, flip_augment, generate_dataset,
                   load_ekds, make_balanced_batches, split_identities)
from .losses import (LossBreakdown, combine_ekd, hard_negative_mine, pair_loss,
                     random_negative_select, select_critical)
from .metrics import (RocCurve, ThresholdState, batch_thresholds, check_resolution, ema_update,
                      evaluate_tpr_at_fpr, roc_points, write_roc_csv, write_tpr_table_csv)
from .model import (OptimizerState, arcface_loss_and_grad, backward, config_hash, forward,
                    init_head, init_params, load_checkpoint, lr_schedule, save_checkpoint,
                    sgd_step)
from .numeric import make_rng, matmul
from .pairs import enumerate_pairs, pairwise_similarities, scatter_pair_grads

log = logging.getLogger(__name__)

METRIC_KEYS = ("step", "epoch", "lr", "l_pos", "l_neg", "l_ekd", "l_arcface", "total",
               "n_critical_pos", "n_critical_neg", "n_total_pos", "n_total_neg",
               "critical_ratio", "ekd_active")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, what):
        super().__init__(f"training diverged at step {step}: {what} is not finite")
        self.step = step


@dataclass
class RunMetrics:
    steps: list = field(default_factory=list)
    eval_table: list = field(default_factory=list)
    roc: RocCurve = None

    def column(self, key):
        return np.array([rec[key] for rec in self.steps])

    def final_ratio(self, fraction=0.1):
        ratios = self.column("critical_ratio")
        tail = max(1, int(math.ceil(len(ratios) * fraction)))
        return float(ratios[-tail:].mean())

    def tpr_at(self, fpr):
        for f, _, t in self.eval_table:
            if math.isclose(f, fpr, rel_tol=1e-9):
                return t
        raise KeyError(f"no evaluation row at FPR={fpr:g}")


def format_record(rec):
    parts = []
    for key, value in rec.items():
        if isinstance(value, float):
            parts.append(f"{key}={value!r}")
        elif isinstance(value, (list, tuple, np.ndarray)):
            parts.append(f"{key}=" + ",".join(repr(float(v)) for v in value))
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)


def parse_record(line):
    rec = {}
    for tok in line.split():
        key, _, value = tok.partition("=")
        if "," in value:
            rec[key] = [float(v) for v in value.split(",")]
        else:
            try:
                rec[key] = int(value)
            except ValueError:
                rec[key] = float(value)
    return rec


def read_metrics(path):
    with open(path) as fh:
        return [parse_record(line) for line in fh if line.strip()]


def load_datasets(config):
    """Return ``(train, held_out)`` datasets for a config."""
    if config.data:
        train = load_ekds(config.data)
        if not config.eval_data:
            raise ValueError("a training data file needs a matching held-out file (eval_data)")
        return train, load_ekds(config.eval_data)
    spec = DatasetSpec(config.num_train_ids + config.num_eval_ids, config.samples_per_id,
                       config.input_dim, config.noise_sigma, config.data_seed,
                       config.latent_dim, config.warp_hidden)
    return split_identities(generate_dataset(spec), config.num_eval_ids)


def _finite(step, name, value):
    if not np.all(np.isfinite(value)):
        raise TrainingDiverged(step, name)


def fit_embedding(config, train, dims, teacher=None, mode="teacher", on_step=None):
    """Core training loop shared by every run mode.

    ``teacher`` (frozen ``MlpParams``) enables pair diagnostics; the EKD or
    relation term enters the objective only in ``distill`` and
    ``baseline_relation_l2`` modes after ``warmup_steps``.
    """
    if train.num_identities < 2:
        raise ValueError("training needs at least 2 identities (no negative pairs otherwise)")
    if teacher is not None and teacher.embedding_dim != dims[-1]:
        raise ValueError(f"teacher embedding dim {teacher.embedding_dim} != student {dims[-1]}")
    lcfg = config.loss_config()
    grid = config.train_grid()
    seed = config.seed
    params = init_params(dims, make_rng(seed, "init"))
    head = init_head(train.num_identities, dims[-1], make_rng(seed, "head"),
                     config.arcface_scale, config.arcface_margin, config.easy_margin)
    opt = OptimizerState(config.lr, config.momentum, config.weight_decay)
    thr_t = ThresholdState(len(grid), config.alpha)
    thr_s = ThresholdState(len(grid), config.alpha)
    mining_rng = make_rng(seed, "mining")
    augment_rng = make_rng(seed, "augment")
    uses_pair_loss = mode in ("distill", "baseline_relation_l2") and teacher is not None
    variant = "l2" if mode == "baseline_relation_l2" else lcfg.variant

    step = 0
    for epoch in range(config.epochs):
        opt.lr = lr_schedule(epoch, config.lr, config.milestones)
        batches = make_balanced_batches(train, config.p, config.q, make_rng(seed, "shuffle", epoch))
        for batch in batches:
            idx = batch.sample_indices
            x = flip_augment(train.features[idx], config.flip_coords, config.flip_prob, augment_rng)
            y = train.labels[idx]
            emb_s, trace = forward(params, x)
            l_arc, g_emb, g_centers = arcface_loss_and_grad(head, emb_s, y)
            _finite(step, "ArcFace loss", l_arc)
            bd = LossBreakdown(l_arcface=l_arc)
            active = False
            if teacher is not None:
                emb_t, _ = forward(teacher, x)
                pairs = enumerate_pairs(y)
                st_pos, st_neg = pairwise_similarities(emb_t, pairs)
                ss_pos, ss_neg = pairwise_similarities(emb_s, pairs)
                ema_update(thr_t, batch_thresholds(st_neg, grid))
                ema_update(thr_s, batch_thresholds(ss_neg, grid))
                if lcfg.mining == "random":
                    sel = random_negative_select(ss_neg.size, lcfg.n_hard_neg, mining_rng)
                else:
                    score = {"student": ss_neg, "teacher": st_neg,
                             "max": np.maximum(ss_neg, st_neg)}[lcfg.mine_by]
                    sel = hard_negative_mine(score, lcfg.n_hard_neg)
                crit_pos = select_critical(st_pos, ss_pos, thr_t, thr_s)
                crit_neg = select_critical(st_neg[sel], ss_neg[sel], thr_t, thr_s)
                bd.n_critical_pos, bd.n_total_pos = crit_pos.count, st_pos.size
                bd.n_critical_neg, bd.n_total_neg = crit_neg.count, sel.size
                active = uses_pair_loss and step >= lcfg.warmup_steps
                if active:
                    if variant == "l2":
                        neg_pairs, nt, ns, ncrit = pairs.neg, st_neg, ss_neg, None
                    else:
                        neg_pairs, nt, ns, ncrit = pairs.neg[sel], st_neg[sel], ss_neg[sel], crit_neg
                    l_pos, gp = pair_loss(variant, st_pos, ss_pos, thr_t, thr_s, lcfg.tau, crit_pos)
                    l_neg, gn = pair_loss(variant, nt, ns, thr_t, thr_s, lcfg.tau, ncrit)
                    l_ekd, gp, gn = combine_ekd(l_pos, gp, l_neg, gn, lcfg)
                    bd.l_pos, bd.l_neg, bd.l_ekd = l_pos, l_neg, l_ekd
                    if lcfg.lambda_pos > 0:
                        g_emb = g_emb + scatter_pair_grads(emb_s, pairs.pos, gp)
                    if lcfg.lambda_neg > 0:
                        g_emb = g_emb + scatter_pair_grads(emb_s, neg_pairs, gn)
            bd.total = bd.l_ekd + bd.l_arcface
            _finite(step, "total loss", bd.total)
            grads = backward(params, trace, g_emb)
            sgd_step(params, grads, opt, key="model")
            sgd_step([head.centers], [g_centers], opt, key="head")
            head.renormalize()
            rec = {"step": step, "epoch": epoch, "lr": opt.lr,
                   "l_pos": bd.l_pos, "l_neg": bd.l_neg, "l_ekd": bd.l_ekd,
                   "l_arcface": bd.l_arcface, "total": bd.total,
                   "n_critical_pos": bd.n_critical_pos, "n_critical_neg": bd.n_critical_neg,
                   "n_total_pos": bd.n_total_pos, "n_total_neg": bd.n_total_neg,
                   "critical_ratio": bd.critical_ratio, "ekd_active": int(active)}
            if teacher is not None:
                rec["thr_teacher"] = thr_t.thresholds.copy()
                rec["thr_student"] = thr_s.thresholds.copy()
            if on_step is not None:
                on_step(rec)
            step += 1
    return params, head


def embed(params, features, chunk=4096):
    out = [forward(params, features[i:i + chunk])[0] for i in range(0, len(features), chunk)]
    return np.concatenate(out, axis=0)


def evaluate_params(params, held_out, fprs, max_pos=0, max_neg=0, num_roc_points=200, seed=0):
    """TPR@FPR table and ROC for ``params`` on held-out identities."""
    pairs = build_eval_pairs(held_out, max_pos or None, max_neg or None,
                             make_rng(seed, "eval_pairs"))
    emb = embed(params, held_out.features)
    gram = matmul(emb, emb.T)
    pos = gram[pairs.pos_i, pairs.pos_j]
    neg = gram[pairs.neg_i, pairs.neg_j]
    return evaluate_tpr_at_fpr(pos, neg, fprs), roc_points(pos, neg, num_roc_points)


class _MetricsWriter:
    def __init__(self, path):
        self.path = path
        self.records = []
        self._fh = open(path, "w") if path else None

    def __call__(self, rec):
        self.records.append(rec)
        if self._fh:
            self._fh.write(format_record(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def write_manifest(run_dir, config, chash, artifacts, extra=None):
    manifest = {"config": config.to_dict(), "seed": config.seed, "config_hash": f"{chash:016x}",
                "artifacts": artifacts, "tool_version": __version__}
    if extra:
        manifest.update(extra)
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _run(config, run_dir, teacher_ckpt=None):
    config.validate()
    train, held = load_datasets(config)
    if config.mode == "teacher":
        if train.num_identities < 2:
            raise ValueError("teacher training needs at least 2 identities (no negatives otherwise)")
        teacher, dims = None, config.teacher_dims()
    else:
        if not teacher_ckpt:
            raise ValueError(f"mode {config.mode!r} needs a teacher checkpoint")
        teacher, _, _ = load_checkpoint(teacher_ckpt)
        dims = config.student_dims()
        if teacher.embedding_dim != dims[-1]:
            raise ValueError(f"teacher embedding dim {teacher.embedding_dim} "
                             f"!= student embedding dim {dims[-1]}")
        if teacher.dims[0] != train.input_dim:
            raise ValueError("teacher input dim does not match the data")
    n = len(held)
    same = np.bincount(held.labels)
    num_neg = n * (n - 1) // 2 - int((same * (same - 1) // 2).sum())
    check_resolution(config.eval_fprs, min(num_neg, config.eval_max_neg or num_neg))
    chash = config_hash(config.to_dict())
    artifacts = {k: os.path.join(run_dir, v) for k, v in
                 [("metrics", "metrics.txt"), ("checkpoint", "model.ckpt"),
                  ("eval", "eval.csv"), ("roc", "roc.csv")]}
    os.makedirs(run_dir, exist_ok=True)
    write_manifest(run_dir, config, chash, artifacts,
                   {"teacher_checkpoint": teacher_ckpt or "", "status": "running"})
    writer = _MetricsWriter(artifacts["metrics"])
    try:
        params, head = fit_embedding(config, train, dims, teacher, config.mode, writer)
    finally:
        writer.close()
    save_checkpoint(artifacts["checkpoint"], params, head, chash)
    table, roc = evaluate_params(params, held, config.eval_fprs, config.eval_max_pos,
                                 config.eval_max_neg, config.roc_points, config.seed)
    write_tpr_table_csv(table, artifacts["eval"])
    write_roc_csv(roc, artifacts["roc"])
    write_manifest(run_dir, config, chash, artifacts,
                   {"teacher_checkpoint": teacher_ckpt or "", "status": "complete"})
    for f, t, p in table:
        log.info("%s TPR@FPR=%.0e: %.6g (threshold %.6g)", config.mode, f, p, t)
    return artifacts["checkpoint"], RunMetrics(writer.records, table, roc)


def train_teacher(config, run_dir):
    """ArcFace-only teacher run; returns ``(checkpoint_path, RunMetrics)``."""
    return _run(config.replace(mode="teacher"), run_dir)


def distill_student(config, teacher_ckpt, run_dir):
    return _run(config.replace(mode="distill"), run_dir, teacher_ckpt)


def train_baseline_arcface(config, teacher_ckpt, run_dir):
    """Student with ArcFace only; the teacher is used for diagnostics."""
    return _run(config.replace(mode="baseline_arcface"), run_dir, teacher_ckpt)


def train_baseline_relation_l2(config, teacher_ckpt, run_dir):
    return _run(config.replace(mode="baseline_relation_l2"), run_dir, teacher_ckpt)


RUNNERS = {"distill": distill_student, "baseline_arcface": train_baseline_arcface,
           "baseline_relation_l2": train_baseline_relation_l2}


def evaluate_checkpoint(ckpt, held_out, fprs, max_pos=0, max_neg=0, num_roc_points=200, seed=0):
    params, _, _ = load_checkpoint(ckpt)
    return evaluate_params(params, held_out, fprs, max_pos, max_neg, num_roc_points, seed)


def default_config(**changes):
    return TrainConfig().replace(**changes).validate()


class RunError(RuntimeError):
    pass


def read_eval_table(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["fpr", "threshold", "tpr"]:
        raise RunError(f"{path}: not an fpr,threshold,tpr table")
    return [tuple(float(v) for v in r) for r in rows[1:] if r]


def load_run(run_dir):
    """Read a finished run directory back into ``(manifest, RunMetrics)``."""
    path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(path):
        raise RunError(f"{run_dir}: missing manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    arts = manifest.get("artifacts", {})
    for key in ("metrics", "eval"):
        if not os.path.exists(arts.get(key, "")):
            raise RunError(f"{run_dir}: missing {key} file {arts.get(key)!r}")
    roc = None
    if os.path.exists(arts.get("roc", "")):
        data = np.loadtxt(arts["roc"], delimiter=",", skiprows=1, ndmin=2)
        roc = RocCurve(data[:, 0], data[:, 1], data[:, 2])
    return manifest, RunMetrics(read_metrics(arts["metrics"]), read_eval_table(arts["eval"]), roc)


def verify_run(run_dir):
    """Check every artifact of a run against its manifest; raises ``RunError``."""
    manifest, metrics = load_run(run_dir)
    if manifest.get("status") != "complete":
        raise RunError(f"{run_dir}: run status is {manifest.get('status')!r}")
    arts = manifest["artifacts"]
    for key in ("checkpoint", "roc"):
        if not os.path.exists(arts.get(key, "")):
            raise RunError(f"{run_dir}: missing {key} file {arts.get(key)!r}")
    chash = int(manifest["config_hash"], 16)
    load_checkpoint(arts["checkpoint"], expected_hash=chash)
    if chash != config_hash(manifest["config"]):
        raise RunError(f"{run_dir}: manifest hash does not match its config")
    if not metrics.steps or not metrics.eval_table:
        raise RunError(f"{run_dir}: empty metrics or evaluation table")
    return manifest, metrics
