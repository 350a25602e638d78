import numpy as np
import pytest


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(num_train_ids=16, num_eval_ids=8, samples_per_id=8, input_dim=8, latent_dim=3,
            warp_hidden=16, noise_sigma=0.1, teacher_hidden=(16,), student_hidden=(8,),
            embedding_dim=8, epochs=2, p=8, q=4, milestones=(1,), n_hard_neg=50,
            warmup_steps=4, eval_fprs=(0.1, 0.01), roc_points=20)


@pytest.fixture
def tiny_config():
    from ekd.config import TrainConfig
    return TrainConfig(**TINY).validate()


def tiny_flags():
    out = []
    for k, v in TINY.items():
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        out += ["--" + k.replace("_", "-"), str(v)]
    return out


# one summary line per acceptance criterion, printed after the run
_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _ACCEPTANCE[report.nodeid] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(
            _ACCEPTANCE.items(), key=lambda kv: int(kv[0].split("test_criterion_")[1].split("_")[0])):
        name = nodeid.split("::")[-1].replace("test_criterion_", "criterion ")
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}  {detail}")
