import numpy as np
import pytest

from branchy.data import split, synth_generate
from branchy.engine import BranchyModel, calibrate_thresholds
from branchy.models import ArchSpec

H = 1e-5
RTOL = 1e-4
ATOL = 1e-8


def numeric_grad(loss_fn, param):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + H
        up = loss_fn().item()
        flat[i] = old - H
        down = loss_fn().item()
        flat[i] = old
        g[i] = (up - down) / (2 * H)
    return grad


def assert_grads_match(loss_fn, params):
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    for p, a in zip(params, analytic):
        n = numeric_grad(loss_fn, p)
        err = np.abs(a - n)
        bound = RTOL * np.maximum(np.abs(a), np.abs(n)) + ATOL
        assert np.all(err <= bound), f"max abs err {err.max()} for shape {p.shape}"


@pytest.fixture(scope="session")
def tiny_corpus():
    data = synth_generate(3, 30, 6, noise=0.1, seed=11)
    return split(data, (0.6, 0.2, 0.2), seed=11)


def small_model(kind, vocab_size, n_classes=3, hidden=(5, 4, 3), embed_dim=4, seed=0, calibrated_on=None):
    model = BranchyModel.create(ArchSpec(kind, vocab_size, embed_dim, hidden, n_classes), seed)
    if calibrated_on is not None:
        model.thresholds = calibrate_thresholds(model, calibrated_on)
    return model


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE = []


def record(criterion, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
