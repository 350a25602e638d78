"""Command-line entry point: ``ekd <command> [options]``.

Commands
--------
gen-data       write a synthetic EKDS dataset (plus optional held-out file)
train-teacher  ArcFace-only teacher run
distill        student run against a frozen teacher (or a baseline mode)
eval           TPR@FPR table and ROC CSV for a checkpoint
roc            ROC CSV only
ablate         sweep over loss settings, one sub-run per combination
report         tabulate finished runs and write a ROC overlay CSV

Training options resolve as built-in defaults < ``--config`` file < flags.
"""
import argparse
import csv
import itertools
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .config import MODES, ConfigError, TrainConfig, _coerce, format_config, load_config_file, resolve_config
from .data import (DatasetSpec, export_csv, generate_dataset, load_ekds, save_ekds,
                   similarity_summary, split_identities)
from .metrics import ResolutionError, write_roc_csv, write_tpr_table_csv
from .model import CheckpointError
from .trainer import (RUNNERS, RunError, TrainingDiverged, evaluate_checkpoint, load_datasets,
                      load_run, train_teacher, verify_run)

log = logging.getLogger("ekd")

# Help text for training options. Defaults are appended from TrainConfig.
FIELD_HELP = {
    "seed": "seed for init, shuffling, mining and eval-pair sampling",
    "data": "training EKDS file (default: generate synthetic data)",
    "eval_data": "held-out EKDS file, required with --data",
    "num_train_ids": "synthetic training identities",
    "num_eval_ids": "synthetic held-out identities",
    "samples_per_id": "synthetic samples per identity",
    "input_dim": "synthetic feature dimension",
    "noise_sigma": "synthetic per-sample noise std",
    "data_seed": "synthetic data seed",
    "latent_dim": "synthetic latent dimension; 0 puts prototypes directly in input space",
    "warp_hidden": "hidden width of the synthetic latent-to-input map",
    "teacher_hidden": "teacher hidden widths, comma separated",
    "student_hidden": "student hidden widths, comma separated",
    "embedding_dim": "embedding dimension d",
    "epochs": "training epochs",
    "p": "identities per balanced batch",
    "q": "samples per identity in a batch (published setting)",
    "lr": "base learning rate (desk-scale; the published recipe starts at 0.1)",
    "momentum": "SGD momentum (published setting)",
    "weight_decay": "SGD weight decay (published setting)",
    "milestones": "epochs where the learning rate is divided by 10",
    "arcface_scale": "ArcFace scale s (published setting)",
    "arcface_margin": "ArcFace additive angular margin m in radians (published setting)",
    "easy_margin": "apply the margin only when the target cosine is positive",
    "flip_coords": "coordinates sign-flipped by the flip augmentation (default: off)",
    "flip_prob": "per-sample probability of the flip augmentation",
    "tau": "sigmoid temperature of the rank loss (published setting)",
    "lambda_pos": "weight of the positive-pair term (published setting)",
    "lambda_neg": "weight of the negative-pair term (published setting)",
    "n_hard_neg": "hard negatives mined per batch (published setting)",
    "variant": "pair loss: rank (smooth rank vectors), hard (threshold-relative L1), l2",
    "mining": "negative selection: hard (top-N) or random",
    "mine_by": "similarity used for hard mining: student, teacher or max",
    "warmup_steps": "steps before the pair term switches on while thresholds settle",
    "alpha": "EMA momentum of the threshold tracker (published setting)",
    "train_fpr_upper": "largest FPR anchoring a training threshold",
    "train_fpr_lower": "smallest FPR anchoring a training threshold",
    "train_k": "number of training thresholds, log-spaced between the two FPRs",
    "eval_fprs": "FPR operating points of the final evaluation",
    "eval_max_pos": "cap on held-out positive pairs (0: all)",
    "eval_max_neg": "cap on held-out negative pairs (0: all)",
    "roc_points": "thresholds sampled for the ROC CSV",
}
FLAG_ALIASES = {"n_hard_neg": ["--n-hard"], "train_k": ["--k"]}
# ablate axis short names
AXIS_ALIASES = {"n": "n_hard_neg", "k": "train_k", "student": "student_hidden"}


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v) or "none"
    return str(v)


def add_train_options(parser, skip=("mode",)):
    group = parser.add_argument_group("training options")
    group.add_argument("--config", help="flat key = value config file")
    defaults = TrainConfig()
    for key in TrainConfig.__dataclass_fields__:
        if key in skip:
            continue
        flags = ["--" + key.replace("_", "-")] + FLAG_ALIASES.get(key, [])
        text = FIELD_HELP.get(key, key.replace("_", " "))
        group.add_argument(*flags, dest=key, default=None, metavar=key.upper(),
                           help=f"{text} (default: {_fmt(getattr(defaults, key))})")


def config_from_args(args, **fixed):
    file_overrides = load_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k) for k in TrainConfig.__dataclass_fields__
             if getattr(args, k, None) is not None}
    flags.update(fixed)
    return resolve_config(file_overrides, flags)


def parse_fprs(text):
    """``1e-1..1e-4`` (every decade in between) or a comma-separated list."""
    if ".." in text:
        hi, lo = (float(s) for s in text.split("..", 1))
        if not 0 < lo <= hi <= 1:
            raise argparse.ArgumentTypeError(f"bad FPR range {text!r}")
        n = int(round(np.log10(hi) - np.log10(lo))) + 1
        return tuple(float(v) for v in np.logspace(np.log10(hi), np.log10(lo), n))
    vals = tuple(float(s) for s in text.split(",") if s.strip())
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError(f"bad FPR list {text!r}")
    return vals


def print_table(header, rows, out=None):
    out = out or sys.stdout
    cells = [[str(h) for h in header]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)), file=out)


def _finish_run(run_dir):
    manifest, metrics = verify_run(run_dir)
    print(f"run: {run_dir} ({manifest['config']['mode']})")
    print_table(["fpr", "threshold", "tpr"], metrics.eval_table)
    if manifest["config"]["mode"] != "teacher":
        print(f"critical ratio (final 10% of steps): {metrics.final_ratio():.6g}")
    return 0


# ----------------------------------------------------------------- commands

def cmd_gen_data(args):
    spec = DatasetSpec(args.ids, args.per_id, args.dim, args.sigma, args.seed,
                       args.latent_dim, args.warp_hidden)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(f"invalid dataset spec: {exc}") from exc
    data = generate_dataset(spec)
    parts = [(args.out, data)]
    if args.eval_ids:
        train, held = split_identities(data, args.eval_ids)
        parts = [(args.out, train), (args.eval_out or args.out + ".eval", held)]
    for path, ds in parts:
        save_ekds(ds, path)
        intra, inter = similarity_summary(ds)
        print(f"{path}: {len(ds)} rows, {ds.num_identities} identities, dim {ds.input_dim}, "
              f"mean intra {intra:.6g}, mean inter {inter:.6g}")
        if args.csv:
            export_csv(ds, path + ".csv")
    return 0


def cmd_train_teacher(args):
    config = config_from_args(args, mode="teacher")
    os.makedirs(args.out, exist_ok=True)
    train_teacher(config, args.out)
    return _finish_run(args.out)


def cmd_distill(args):
    config = config_from_args(args, mode=args.mode)
    if not args.teacher or not os.path.exists(args.teacher):
        raise UsageError(f"teacher checkpoint not found: {args.teacher!r}")
    RUNNERS[args.mode](config, args.teacher, args.out)
    return _finish_run(args.out)


def _held_out(args):
    if args.data:
        return load_ekds(args.data)
    return load_datasets(config_from_args(args))[1]


def cmd_eval(args):
    held = _held_out(args)
    fprs = args.fpr or config_from_args(args).eval_fprs
    table, roc = evaluate_checkpoint(args.ckpt, held, fprs, args.max_pos, args.max_neg,
                                     args.points, args.pair_seed)
    print_table(["fpr", "threshold", "tpr"], table)
    roc_out = args.roc_out or os.path.splitext(args.ckpt)[0] + ".roc.csv"
    write_roc_csv(roc, roc_out)
    print(f"roc: {roc_out}")
    if args.table_out:
        write_tpr_table_csv(table, args.table_out)
    return 0


def cmd_roc(args):
    held = _held_out(args)
    _, roc = evaluate_checkpoint(args.ckpt, held, (1.0,), args.max_pos, args.max_neg,
                                 args.points, args.pair_seed)
    write_roc_csv(roc, args.out)
    print(f"{args.out}: {len(roc.thresholds)} points")
    return 0


def parse_axis(text):
    if "=" not in text:
        raise UsageError(f"axis must look like name=v1,v2,... got {text!r}")
    name, raw = (s.strip() for s in text.split("=", 1))
    key = AXIS_ALIASES.get(name, name).replace("-", "_")
    if key not in TrainConfig.__dataclass_fields__ or key == "mode":
        raise UsageError(f"unknown ablation axis {name!r}")
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise UsageError(f"ablation axis {name!r} is empty")
    try:
        # tuple-valued axes use 'x' between elements, e.g. student=32,64x32
        return key, [_coerce(key, v.replace("x", ",")) for v in values]
    except ValueError as exc:
        raise UsageError(f"bad value on axis {name!r}: {exc}") from exc


def _run_label(combo, seed):
    parts = [f"{k}={_fmt(v).replace(',', 'x')}" for k, v in combo]
    return "__".join(parts + [f"seed={seed}"])


def _ablate_job(job):
    config, teacher, run_dir = job
    RUNNERS[config.mode](config, teacher, run_dir)
    verify_run(run_dir)
    return run_dir


def worker_count(requested=None):
    cap = os.environ.get("EKD_THREADS", "")
    try:
        cap = max(1, int(cap)) if cap else os.cpu_count() or 1
    except ValueError as exc:
        raise UsageError(f"EKD_THREADS must be a positive integer, got {cap!r}") from exc
    return max(1, min(requested or cap, cap))


def cmd_ablate(args):
    if not args.axis:
        raise UsageError("ablate needs at least one --axis")
    axes = [parse_axis(a) for a in args.axis]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds is empty")
    base = config_from_args(args, mode=args.mode)
    os.makedirs(args.out, exist_ok=True)
    teacher = args.teacher
    if not teacher:
        teacher_dir = os.path.join(args.out, "teacher")
        teacher, _ = train_teacher(base, teacher_dir)
        verify_run(teacher_dir)
    jobs, rows = [], []
    for values in itertools.product(*(vals for _, vals in axes)):
        combo = [(key, v) for (key, _), v in zip(axes, values)]
        for seed in seeds:
            config = base.replace(seed=seed, **dict(combo)).validate()
            run_dir = os.path.join(args.out, _run_label(combo, seed))
            jobs.append((config, teacher, run_dir))
            rows.append((combo, seed, run_dir))
    workers = worker_count(args.workers)
    log.info("ablate: %d runs on %d worker(s)", len(jobs), workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_ablate_job, jobs))
    else:
        for job in jobs:
            _ablate_job(job)
    fprs = base.eval_fprs
    keys = [k for k, _ in axes]
    tpr_cols = [f"tpr@{f:g}" for f in fprs]
    per_run = []
    for combo, seed, run_dir in rows:
        _, metrics = load_run(run_dir)
        per_run.append([_fmt(v) for _, v in combo] + [seed]
                       + [metrics.tpr_at(f) for f in fprs] + [metrics.final_ratio(), run_dir])
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + ["seed"] + tpr_cols + ["critical_ratio", "run"])
        w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in per_run])
    summary = []
    n_ax = len(keys)
    for i in range(0, len(per_run), len(seeds)):
        group = per_run[i:i + len(seeds)]
        summary.append(group[0][:n_ax] + [statistics.median(r[n_ax + 1 + j] for r in group)
                                          for j in range(len(fprs) + 1)])
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys + tpr_cols + ["critical_ratio"])
        w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in summary])
    print(f"median over seeds {','.join(map(str, seeds))}:")
    print_table(keys + tpr_cols + ["critical_ratio"], summary)
    return 0


def _collect_runs(paths):
    runs = []
    for path in paths:
        if os.path.exists(os.path.join(path, "manifest.json")):
            runs.append(path)
        elif os.path.isdir(path):
            subs = sorted(os.path.join(path, d) for d in os.listdir(path)
                          if os.path.exists(os.path.join(path, d, "manifest.json")))
            runs.extend(subs)
        else:
            raise RunError(f"{path}: not a run directory")
    if not runs:
        raise RunError("no runs found")
    return runs


def cmd_report(args):
    runs = _collect_runs(args.runs)
    loaded = [(r, *load_run(r)) for r in runs]
    fprs = [f for f, _, _ in loaded[0][2].eval_table]
    header = ["run", "mode", "student", "variant", "tau", "N", "K", "mining"]
    header += [f"tpr@{f:g}" for f in fprs] + ["critical_ratio"]
    rows = []
    for run_dir, manifest, metrics in loaded:
        c = manifest["config"]
        net = c["teacher_hidden"] if c["mode"] == "teacher" else c["student_hidden"]
        row = [os.path.basename(os.path.normpath(run_dir)), c["mode"], "x".join(map(str, net))]
        if c["mode"] in ("distill", "baseline_relation_l2"):
            variant = "l2" if c["mode"] == "baseline_relation_l2" else c["variant"]
            row += [variant, c["tau"], c["n_hard_neg"], c["train_k"], c["mining"]]
        else:
            row += [""] * 5
        row += [metrics.tpr_at(f) if any(abs(f - g) <= 1e-12 * f for g, _, _ in metrics.eval_table)
                else "" for f in fprs]
        row.append(metrics.final_ratio() if c["mode"] != "teacher" else "")
        rows.append(row)
    print_table(header, rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
    if args.roc_out:
        with open(args.roc_out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "threshold", "fpr", "tpr"])
            for (run_dir, _, metrics), row in zip(loaded, rows):
                if metrics.roc is None:
                    raise RunError(f"{run_dir}: missing roc file")
                for t, f, p in metrics.roc.points():
                    w.writerow([row[0], f"{t:.9g}", f"{f:.9g}", f"{p:.9g}"])
    return 0


def cmd_show_config(args):
    sys.stdout.write(format_config(config_from_args(args)))
    return 0


# ------------------------------------------------------------------ parser

class UsageError(ValueError):
    pass


def _eval_options(p):
    p.add_argument("--ckpt", required=True, help="EKDCKPT1 checkpoint")
    p.add_argument("--data", help="held-out EKDS file (default: synthetic held-out split)")
    p.add_argument("--max-pos", type=int, default=0, help="cap on positive pairs (0: all)")
    p.add_argument("--max-neg", type=int, default=0, help="cap on negative pairs (0: all)")
    p.add_argument("--points", type=int, default=200, help="ROC thresholds (default: 200)")
    p.add_argument("--pair-seed", type=int, default=0, help="seed for pair subsampling")


def build_parser():
    parser = argparse.ArgumentParser(prog="ekd", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic EKDS dataset")
    p.add_argument("--ids", type=int, default=200, help="identities (default: 200)")
    p.add_argument("--per-id", type=int, default=20, help="samples per identity (default: 20)")
    p.add_argument("--dim", type=int, default=64, help="feature dimension (default: 64)")
    p.add_argument("--sigma", type=float, default=0.3, help="noise std (default: 0.3)")
    p.add_argument("--seed", type=int, default=7, help="data seed (default: 7)")
    p.add_argument("--latent-dim", type=int, default=0,
                   help="latent dimension of the warped generator (default: 0, off)")
    p.add_argument("--warp-hidden", type=int, default=128,
                   help="hidden width of the warp map (default: 128)")
    p.add_argument("--eval-ids", type=int, default=0,
                   help="split off this many identities into a held-out file (default: 0)")
    p.add_argument("--eval-out", help="held-out file path (default: OUT.eval)")
    p.add_argument("--csv", action="store_true", help="also write a CSV mirror")
    p.add_argument("--out", required=True, help="output EKDS path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="ArcFace-only teacher run")
    p.add_argument("--out", required=True, help="run directory")
    add_train_options(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distil a student from a frozen teacher")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--mode", choices=[m for m in MODES if m != "teacher"], default="distill",
                   help="distill, or a baseline (default: distill)")
    add_train_options(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="TPR@FPR table and ROC CSV for a checkpoint")
    _eval_options(p)
    p.add_argument("--fpr", type=parse_fprs, default=None,
                   help="FPRs: a list or a decade range like 1e-1..1e-4 "
                        "(default: the resolved eval_fprs)")
    p.add_argument("--roc-out", help="ROC CSV path (default: next to the checkpoint)")
    p.add_argument("--table-out", help="also write the table as CSV")
    add_train_options(p, skip=("mode", "data", "eval_data"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", help="ROC CSV for a checkpoint")
    _eval_options(p)
    p.add_argument("--out", required=True, help="ROC CSV path")
    add_train_options(p, skip=("mode", "data", "eval_data"))
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("ablate", help="sweep loss settings")
    p.add_argument("--axis", action="append", default=[],
                   help="name=v1,v2,... (names: tau, n, k, mining, variant, student, "
                        "or any config key); repeat for a grid")
    p.add_argument("--seeds", default="0", help="comma-separated seeds per combination")
    p.add_argument("--teacher", help="teacher checkpoint (default: train one in OUT/teacher)")
    p.add_argument("--mode", choices=[m for m in MODES if m != "teacher"], default="distill")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel sub-runs (capped by EKD_THREADS)")
    p.add_argument("--out", required=True, help="sweep directory")
    add_train_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="tabulate finished runs")
    p.add_argument("runs", nargs="+", help="run directories or directories of runs")
    p.add_argument("--out", help="table CSV path")
    p.add_argument("--roc-out", help="ROC overlay CSV path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("show-config", help="print the resolved training config")
    add_train_options(p)
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.exit(2, f"ekd {args.command}: error: {exc}\n")
    except (RunError, CheckpointError, ResolutionError, TrainingDiverged,
            OSError, ValueError) as exc:
        print(f"ekd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
