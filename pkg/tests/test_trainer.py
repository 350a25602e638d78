import json
import os

import numpy as np
import pytest

from ekd.data import LabeledDataset
from ekd.metrics import ResolutionError
from ekd.model import forward, init_params, load_checkpoint, save_checkpoint
from ekd.numeric import make_rng
from ekd.trainer import (RunError, RunMetrics, TrainingDiverged, distill_student, embed,
                         evaluate_checkpoint, evaluate_params, fit_embedding, format_record,
                         load_datasets, parse_record, read_metrics, train_baseline_arcface,
                         train_baseline_relation_l2, train_teacher, verify_run)


@pytest.fixture(scope="module")
def teacher_run(tmp_path_factory):
    from conftest import TINY
    from ekd.config import TrainConfig
    cfg = TrainConfig(**TINY).validate()
    d = tmp_path_factory.mktemp("teacher")
    ckpt, metrics = train_teacher(cfg, str(d))
    return cfg, ckpt, metrics


def test_record_round_trip(tmp_path):
    rec = {"step": 3, "l_pos": 0.1 + 0.2, "thr_teacher": np.array([0.1, 1 / 3])}
    back = parse_record(format_record(rec))
    assert back["step"] == 3 and back["l_pos"] == 0.1 + 0.2
    assert back["thr_teacher"] == [0.1, 1 / 3]


def test_teacher_run_artifacts(teacher_run):
    cfg, ckpt, metrics = teacher_run
    run_dir = os.path.dirname(ckpt)
    manifest, back = verify_run(run_dir)
    assert manifest["status"] == "complete" and manifest["config"]["mode"] == "teacher"
    assert len(back.steps) == len(metrics.steps) > 0
    assert [r["step"] for r in back.steps] == list(range(len(back.steps)))
    assert back.eval_table == metrics.eval_table
    params, head, h = load_checkpoint(ckpt)
    assert f"{h:016x}" == manifest["config_hash"]
    assert params.dims == cfg.teacher_dims()


def test_teacher_deterministic(teacher_run, tmp_path):
    cfg, ckpt, _ = teacher_run
    ckpt2, _ = train_teacher(cfg, str(tmp_path / "again"))
    assert open(ckpt, "rb").read() == open(ckpt2, "rb").read()
    a = open(os.path.join(os.path.dirname(ckpt), "metrics.txt")).read()
    assert a == open(tmp_path / "again" / "metrics.txt").read()


def test_single_identity_is_rejected(tiny_config):
    ds = LabeledDataset(np.random.default_rng(0).standard_normal((8, 8)), np.zeros(8, int), 1)
    with pytest.raises(ValueError, match="2 identities"):
        fit_embedding(tiny_config, ds, tiny_config.teacher_dims())


def test_distill_loop_invariants(teacher_run, tmp_path):
    cfg, ckpt, _ = teacher_run
    # a short EMA memory lets the thresholds catch up within a few steps
    cfg = cfg.replace(alpha=0.5, epochs=4)
    _, metrics = distill_student(cfg, ckpt, str(tmp_path / "s"))
    for rec in metrics.steps:
        assert rec["total"] == pytest.approx(
            cfg.lambda_pos * rec["l_pos"] + cfg.lambda_neg * rec["l_neg"] + rec["l_arcface"],
            rel=1e-12, abs=1e-15)
        assert 0.0 <= rec["critical_ratio"] <= 1.0
        assert rec["n_total_neg"] == min(cfg.n_hard_neg, 8 * 4 * 7 * 4 // 2)
        assert rec["n_total_pos"] == 8 * 4 * 3 // 2
        if rec["step"] >= cfg.warmup_steps:
            assert rec["ekd_active"] == 1
            for key in ("thr_teacher", "thr_student"):
                assert np.all(np.diff(rec[key]) >= 0)
        else:
            assert rec["ekd_active"] == 0 and rec["l_ekd"] == 0.0
    assert metrics.steps[-1]["l_ekd"] > 0


def test_zero_lambda_equals_arcface_baseline(teacher_run, tmp_path):
    cfg, ckpt, _ = teacher_run
    z = cfg.replace(lambda_pos=0.0, lambda_neg=0.0)
    a, _ = distill_student(z, ckpt, str(tmp_path / "a"))
    b, _ = train_baseline_arcface(z, ckpt, str(tmp_path / "b"))
    c, _ = train_baseline_relation_l2(z, ckpt, str(tmp_path / "c"))
    pa, pb, pc = (load_checkpoint(p)[0] for p in (a, b, c))
    for x, y, w in zip(pa.arrays(), pb.arrays(), pc.arrays()):
        assert np.array_equal(x, y) and np.array_equal(x, w)


def test_relation_l2_uses_all_negatives(teacher_run, tmp_path):
    cfg, ckpt, _ = teacher_run
    _, m = train_baseline_relation_l2(cfg, ckpt, str(tmp_path / "l2"))
    last = m.steps[-1]
    assert last["ekd_active"] == 1 and last["l_ekd"] > 0


def test_variants_and_mining_run(teacher_run, tmp_path):
    cfg, ckpt, _ = teacher_run
    for i, kw in enumerate([dict(variant="hard"), dict(mining="random"), dict(mine_by="max"),
                            dict(flip_coords=(0, 1))]):
        _, m = distill_student(cfg.replace(**kw), ckpt, str(tmp_path / f"v{i}"))
        assert np.isfinite(m.column("total")).all()


def test_dim_mismatch(teacher_run, tmp_path):
    cfg, ckpt, _ = teacher_run
    with pytest.raises(ValueError, match="embedding dim"):
        distill_student(cfg.replace(embedding_dim=4), ckpt, str(tmp_path / "x"))
    with pytest.raises(ValueError, match="teacher checkpoint"):
        distill_student(cfg, "", str(tmp_path / "y"))


def test_divergence_reports_step(tiny_config):
    train, _ = load_datasets(tiny_config)
    bad = LabeledDataset(train.features * np.nan, train.labels, train.num_identities)
    with pytest.raises(TrainingDiverged, match="step 0"):
        fit_embedding(tiny_config, bad, tiny_config.student_dims(), None, "teacher")


def test_resolution_checked_before_training(tiny_config, tmp_path):
    with pytest.raises(ResolutionError):
        train_teacher(tiny_config.replace(eval_fprs=(1e-6,)), str(tmp_path / "r"))
    assert not (tmp_path / "r").exists()


def test_evaluation_deterministic_and_teacher_beats_random(teacher_run):
    cfg, ckpt, metrics = teacher_run
    _, held = load_datasets(cfg)
    a = evaluate_checkpoint(ckpt, held, cfg.eval_fprs)[0]
    b = evaluate_checkpoint(ckpt, held, cfg.eval_fprs)[0]
    assert a == b == metrics.eval_table


def test_random_weights_are_chance_level():
    r = np.random.default_rng(0)
    held = LabeledDataset(r.standard_normal((400, 8)), np.repeat(np.arange(40), 10), 40)
    params = init_params([8, 16, 8], make_rng(0, "init"))
    table, _ = evaluate_params(params, held, (0.1,))
    assert abs(table[0][2] - 0.1) <= 0.1


def test_embed_chunks_match_forward(teacher_run):
    cfg, ckpt, _ = teacher_run
    params = load_checkpoint(ckpt)[0]
    x = np.random.default_rng(0).standard_normal((50, cfg.input_dim))
    assert np.array_equal(embed(params, x, chunk=7), forward(params, x)[0])


def test_verify_run_catches_tampering(teacher_run, tmp_path):
    cfg, ckpt, _ = teacher_run
    import shutil
    run = tmp_path / "copy"
    shutil.copytree(os.path.dirname(ckpt), run)
    man = json.loads((run / "manifest.json").read_text())
    man["artifacts"] = {k: str(run / os.path.basename(v)) for k, v in man["artifacts"].items()}
    (run / "manifest.json").write_text(json.dumps(man))
    verify_run(str(run))
    man["config"]["tau"] = 0.5
    (run / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(RunError, match="hash"):
        verify_run(str(run))
    os.remove(run / "metrics.txt")
    with pytest.raises(RunError, match="missing metrics"):
        verify_run(str(run))


def test_run_metrics_helpers():
    m = RunMetrics([{"critical_ratio": v} for v in [0.5] * 90 + [0.1] * 10], [(0.1, 0.3, 0.9)])
    assert m.final_ratio() == pytest.approx(0.1)
    assert m.tpr_at(0.1) == 0.9
    with pytest.raises(KeyError):
        m.tpr_at(0.01)
