import csv
import os

import pytest

from conftest import tiny_flags
from ekd.cli import build_parser, main, parse_axis, parse_fprs, worker_count, UsageError


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def teacher_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "teacher"
    assert main(["train-teacher", "--out", str(d)] + tiny_flags()) == 0
    return d


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "d.ekds"
    args = ["gen-data", "--ids", "200", "--per-id", "20", "--dim", "64", "--sigma", "0.3",
            "--seed", "7", "--out", str(out)]
    code, text, _ = run(capsys, *args)
    assert code == 0 and "4000 rows" in text and "mean intra" in text
    first = out.read_bytes()
    assert len(first) == 8 + 12 + 4000 * 64 * 4 + 4000 * 4
    run(capsys, *args)
    assert out.read_bytes() == first


def test_gen_data_split_and_csv(tmp_path, capsys):
    code, text, _ = run(capsys, "gen-data", "--ids", "10", "--per-id", "4", "--dim", "8",
                        "--latent-dim", "3", "--eval-ids", "4", "--csv",
                        "--out", str(tmp_path / "tr.ekds"))
    assert code == 0
    assert "tr.ekds: 24 rows, 6 identities" in text
    assert "tr.ekds.eval: 16 rows, 4 identities" in text
    assert (tmp_path / "tr.ekds.csv").exists()


def test_gen_data_invalid_spec(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--ids", "1", "--out", str(tmp_path / "x.ekds")])
    assert exc.value.code == 2
    assert "num_identities must be >= 2" in capsys.readouterr().err


def test_help_shows_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["distill"].format_help()
    for flag, default in [("--tau", "0.01"), ("--lambda-pos", "0.02"), ("--lambda-neg", "0.01"),
                          ("--n-hard-neg", "2000"), ("--alpha", "0.99"), ("--arcface-scale", "64"),
                          ("--arcface-margin", "0.5"), ("--momentum", "0.9"),
                          ("--weight-decay", "0.0005"), ("--q", "4")]:
        assert flag in text
    assert "(default: 0.01)" in text and "(default: 2000)" in text


def test_train_distill_eval_roc_report(teacher_dir, tmp_path, capsys):
    ckpt = str(teacher_dir / "model.ckpt")
    s = tmp_path / "s"
    code, text, _ = run(capsys, "distill", "--teacher", ckpt, "--out", str(s),
                        "--tau", "0.01", "--lambda-pos", "0.02", "--lambda-neg", "0.01",
                        "--n-hard", "50", *tiny_flags())
    assert code == 0 and "critical ratio" in text
    code, _, _ = run(capsys, "distill", "--teacher", ckpt, "--out", str(tmp_path / "h"),
                     "--variant", "hard", *tiny_flags())
    assert code == 0
    code, text, _ = run(capsys, "eval", "--ckpt", str(s / "model.ckpt"), "--fpr", "1e-1..1e-2",
                        "--roc-out", str(tmp_path / "r.csv"), *tiny_flags())
    assert code == 0
    lines = text.splitlines()
    assert lines[0].split() == ["fpr", "threshold", "tpr"] and len(lines) == 4
    assert (tmp_path / "r.csv").read_text().startswith("threshold,fpr,tpr\n")
    code, _, _ = run(capsys, "roc", "--ckpt", str(s / "model.ckpt"), "--out",
                     str(tmp_path / "r2.csv"), *tiny_flags())
    assert code == 0 and (tmp_path / "r2.csv").read_text() == (tmp_path / "r.csv").read_text()
    code, text, _ = run(capsys, "report", str(teacher_dir), str(s), str(tmp_path / "h"),
                        "--out", str(tmp_path / "rep.csv"), "--roc-out", str(tmp_path / "ov.csv"))
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "rep.csv")))
    assert len(rows) == 4 and rows[0][:2] == ["run", "mode"]
    assert [r[3] for r in rows[1:]] == ["", "rank", "hard"]
    again = tmp_path / "rep2.csv"
    run(capsys, "report", str(teacher_dir), str(s), str(tmp_path / "h"), "--out", str(again))
    assert again.read_text() == (tmp_path / "rep.csv").read_text()
    ov = list(csv.reader(open(tmp_path / "ov.csv")))
    assert ov[0] == ["run", "threshold", "fpr", "tpr"]
    assert {r[0] for r in ov[1:]} == {"teacher", "s", "h"}


def test_eval_random_checkpoint_is_chance(tmp_path, capsys):
    import numpy as np
    from ekd.model import init_params, save_checkpoint
    from ekd.numeric import make_rng
    ckpt = tmp_path / "rand.ckpt"
    save_checkpoint(ckpt, init_params([8, 16, 8], make_rng(5, "init")), None, 0)
    code, text, _ = run(capsys, "eval", "--ckpt", str(ckpt), "--fpr", "1e-1",
                        "--num-train-ids", "40", "--num-eval-ids", "100", "--samples-per-id", "10",
                        "--input-dim", "8", "--latent-dim", "0", "--noise-sigma", "3.0")
    assert code == 0
    tpr = float(text.splitlines()[1].split()[2])
    assert abs(tpr - 0.1) <= 0.1


def test_distill_missing_teacher(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["distill", "--teacher", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path / "x")])
    assert exc.value.code == 2


def test_config_error_names_line(tmp_path, capsys, teacher_dir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 2\nbogus = 1\n")
    with pytest.raises(SystemExit) as exc:
        main(["distill", "--teacher", str(teacher_dir / "model.ckpt"), "--out",
              str(tmp_path / "x"), "--config", str(cfg)])
    assert exc.value.code == 2
    assert "bad.cfg:2: unknown key 'bogus'" in capsys.readouterr().err


def test_config_file_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("tau = 0.1\nepochs = 3\n")
    code, text, _ = run(capsys, "show-config", "--config", str(cfg), "--tau", "0.001")
    assert "tau = 0.001\n" in text and "epochs = 3\n" in text and "lambda_pos = 0.02\n" in text


def test_report_errors(tmp_path, capsys, teacher_dir):
    code, _, err = run(capsys, "report", str(tmp_path))
    assert code == 1 and "no runs found" in err
    import shutil, json
    run_dir = tmp_path / "r"
    shutil.copytree(teacher_dir, run_dir)
    man = json.loads((run_dir / "manifest.json").read_text())
    man["artifacts"] = {k: str(run_dir / os.path.basename(v)) for k, v in man["artifacts"].items()}
    (run_dir / "manifest.json").write_text(json.dumps(man))
    os.remove(run_dir / "metrics.txt")
    code, _, err = run(capsys, "report", str(run_dir))
    assert code == 1 and "missing metrics file" in err


def test_ablate(teacher_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("EKD_THREADS", "1")
    out = tmp_path / "sweep"
    code, text, _ = run(capsys, "ablate", "--teacher", str(teacher_dir / "model.ckpt"),
                        "--axis", "tau=0.1,0.01", "--axis", "variant=hard,rank",
                        "--seeds", "0,1", "--out", str(out), *tiny_flags())
    assert code == 0
    rows = list(csv.reader(open(out / "ablation.csv")))
    assert rows[0][:3] == ["tau", "variant", "seed"] and len(rows) == 1 + 8
    summary = list(csv.reader(open(out / "summary.csv")))
    assert len(summary) == 1 + 4
    assert len([d for d in os.listdir(out) if "seed=" in d]) == 8


def test_ablate_empty_axis(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--axis", "tau=", "--out", str(tmp_path / "s")])
    assert exc.value.code == 2


def test_parse_helpers(monkeypatch):
    assert parse_fprs("1e-1..1e-4") == pytest.approx((1e-1, 1e-2, 1e-3, 1e-4))
    assert parse_fprs("0.1,0.01") == (0.1, 0.01)
    assert parse_axis("n=1000,2000,5000") == ("n_hard_neg", [1000, 2000, 5000])
    assert parse_axis("k=3,6") == ("train_k", [3, 6])
    assert parse_axis("student=32,64x32") == ("student_hidden", [(32,), (64, 32)])
    with pytest.raises(UsageError):
        parse_axis("bogus=1")
    monkeypatch.setenv("EKD_THREADS", "2")
    assert worker_count(8) == 2 and worker_count(1) == 1
    monkeypatch.setenv("EKD_THREADS", "x")
    with pytest.raises(UsageError):
        worker_count()
