"""End-to-end acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line and the same lines are repeated in the
"acceptance criteria" section at the end of the pytest run.
"""

import math

import numpy as np
import pytest

from branchy import tensor as T
from branchy.cli import check_trace, evaluate, main
from branchy.cost import count_flops, expected_complexity, relative_savings
from branchy.data import split, synth_generate
from branchy.engine import (
    AlphaSchedule,
    BranchyModel,
    TrainConfig,
    alpha_weights,
    calibrate_thresholds,
    entropy,
    forward_logits,
    infer_early_exit,
    joint_loss,
    mean_exit_entropies,
    row_entropies,
    train_branchy,
)
from branchy.metrics import accuracy, macro_f1
from branchy.models import DNN, LSTM, ArchSpec, lstm_cell_step
from branchy.persist import model_bytes, model_from_bytes
from branchy.tensor import Tensor

from conftest import assert_grads_match, record, small_model

K = 1000.0


# -- cost arithmetic ----------------------------------------------------------

def test_reported_complexity_arithmetic():
    dnn = expected_complexity([32.5 * K, 38.7 * K, 40.6 * K], [0.2780, 0.0192, 0.7020])
    lstm = expected_complexity([23.1 * K, 46.1 * K, 69.2 * K], [0.1532, 0.0071, 0.8397])
    savings = relative_savings(61.99 * K, 69.2 * K)
    ok = (abs(dnn - 38.27 * K) <= 0.05 * K and abs(lstm - 61.99 * K) <= 0.05 * K
          and abs(savings - 0.104) <= 0.001)
    assert record("expected-complexity arithmetic", ok,
                  f"dnn {dnn / K:.5f}K, lstm {lstm / K:.5f}K, savings {100 * savings:.3f}%")


def test_flops_oracle_on_random_architectures():
    rng = np.random.default_rng(2024)
    mismatches = checked = 0
    for i in range(50):
        kind = DNN if i % 2 == 0 else LSTM
        depth = int(rng.integers(2, 6)) if kind == DNN else int(rng.integers(2, 5))
        hidden = [int(h) for h in rng.integers(1, 17, depth)]
        model = small_model(kind, 40, n_classes=int(rng.integers(2, 17)), hidden=hidden,
                            embed_dim=int(rng.integers(1, 17)), seed=i)
        tokens = [int(t) for t in rng.integers(0, 40, int(rng.integers(1, 7)))]
        for n in range(1, depth + 1):
            with T.count_macs() as counter:
                infer_early_exit(model, tokens, force_exit=n)
            checked += 1
            mismatches += counter.total != count_flops(model, n, seq_len=len(tokens))
    assert record("FLOPS oracle, 50 architectures", mismatches == 0,
                  f"{checked} exit points, {mismatches} mismatches")


# -- gradients ----------------------------------------------------------------

def _param(a):
    return Tensor(a, requires_grad=True)


def _grad_instances(build, n=20):
    failures = 0
    for seed in range(n):
        loss, params = build(np.random.default_rng(seed))
        try:
            assert_grads_match(loss, params)
        except AssertionError:
            failures += 1
    return failures


def _affine(rng):
    x = _param(rng.normal(size=(3, 4)))
    W = _param(rng.normal(size=(4, 5)))
    b = _param(rng.normal(size=5))
    w = Tensor(rng.normal(size=(3, 5)))
    return (lambda: (T.affine(x, W, b) * w).sum()), [x, W, b]


def _relu(rng):
    # keep inputs away from the kink where the derivative is undefined
    raw = rng.uniform(0.05, 2, (4, 6)) * rng.choice([-1, 1], (4, 6))
    x = _param(raw)
    w = Tensor(rng.normal(size=(4, 6)))
    return (lambda: (T.relu(x) * w).sum()), [x]


def _softmax_ce(rng):
    C = int(rng.integers(2, 8))
    z = _param(rng.normal(scale=2, size=C))
    label = int(rng.integers(C))
    return (lambda: T.cross_entropy(T.softmax(z), label)), [z]


def _lstm_cell(rng):
    d, h = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    from branchy.models import LstmCellParams

    kw = {f"W_{g}": _param(rng.uniform(-1, 1, (d, h))) for g in "ifog"}
    kw.update({f"U_{g}": _param(rng.uniform(-1, 1, (h, h))) for g in "ifog"})
    kw.update({f"b_{g}": _param(rng.uniform(-1, 1, h)) for g in "ifog"})
    cell = LstmCellParams(**kw)
    x, h0, c0 = (_param(rng.uniform(-2, 2, s)) for s in (d, h, h))
    wh, wc = Tensor(rng.normal(size=h)), Tensor(rng.normal(size=h))

    def loss():
        hn, cn = lstm_cell_step(x, h0, c0, cell)
        return (hn * wh).sum() + (cn * wc).sum()

    return loss, [x, h0, c0, *cell.parameters()]


_CORPUS = synth_generate(3, 8, 4, noise=0.2, seed=5)


def _joint(rng):
    seed = int(rng.integers(1 << 30))
    kind = DNN if seed % 2 else LSTM
    mode = "trainable" if rng.random() < 0.5 else "fixed"
    model = BranchyModel.create(ArchSpec(kind, _CORPUS.vocab.size, 3, (3, 2, 3), 3), seed, alpha_mode=mode)
    for p in model.parameters():
        p.data += rng.uniform(-0.3, 0.3, p.shape)
    pick = rng.choice(len(_CORPUS), 3, replace=False)
    toks = [_CORPUS.examples[i].tokens for i in pick]
    labels = _CORPUS.labels[pick]
    return (lambda: joint_loss(forward_logits(model, toks), labels, model.alphas)), model.parameters()


@pytest.mark.parametrize("layer, build", [("affine", _affine), ("ReLU", _relu),
                                          ("softmax+cross-entropy", _softmax_ce),
                                          ("LSTM cell", _lstm_cell), ("joint multi-exit loss", _joint)])
def test_gradient_suite(layer, build):
    failures = _grad_instances(build)
    assert record(f"finite-difference gradients: {layer}", failures == 0,
                  f"20 instances, {failures} outside 1e-4 relative")


# -- trained models on the synthetic corpus -----------------------------------

SETUPS = {DNN: (32, 32, 32), LSTM: (32, 32)}


@pytest.fixture(scope="module")
def corpus():
    data = synth_generate(10, 200, 20, noise=0.3, seed=7)
    return split(data, (0.8, 0.1, 0.1), seed=7)


@pytest.fixture(scope="module")
def trained(corpus):
    train, dev, _ = corpus
    models = {}
    for kind, hidden in SETUPS.items():
        model = BranchyModel.create(ArchSpec(kind, train.vocab.size, 32, hidden, train.n_classes), seed=1)
        train_branchy(model, train, dev, TrainConfig(lr=0.5, epochs=30, batch_size=32, seed=1))
        model.thresholds = calibrate_thresholds(model, train)
        model.vocab, model.label_names = train.vocab, train.label_names
        models[kind] = model
    return models


@pytest.fixture(scope="module")
def reports(trained, corpus):
    return {kind: evaluate(model, corpus[2]) for kind, model in trained.items()}


@pytest.mark.parametrize("kind", [DNN, LSTM])
def test_early_exit_does_not_degrade_accuracy(kind, reports):
    r = reports[kind]
    early, final = r["accuracy"], r["final_exit"]["accuracy"]
    assert record(f"no degradation ({kind})", early >= final - 0.01,
                  f"early-exit {100 * early:.2f}% vs final-exit {100 * final:.2f}%")


def test_early_exit_utility(reports):
    r = reports[LSTM]
    early_mass = 1.0 - r["exit_distribution"][-1]
    ok = early_mass >= 0.10 and r["expected_flops"] < r["final_exit"]["flops"]
    assert record("early-exit utility (stacked-lstm)", ok,
                  f"{100 * early_mass:.1f}% exit early, expected {r['expected_flops']:.0f} "
                  f"vs final {r['final_exit']['flops']} FLOPS")


def test_calibration_identity(trained, corpus):
    worst = 0.0
    for model in trained.values():
        means = mean_exit_entropies(model, corpus[0])
        worst = max(worst, max(abs(h - t) for h, t in zip(means, model.thresholds)))
    assert record("calibration identity", worst <= 1e-9, f"max |mean H - threshold| = {worst:.2e}")


def test_routing_invariants(trained, corpus):
    violations = checked = 0
    for model in trained.values():
        for part in corpus:
            for ex in part.examples:
                trace = infer_early_exit(model, ex.tokens)
                checked += 1
                try:
                    check_trace(trace, model.thresholds)
                except Exception:
                    violations += 1
    assert record("routing invariants", violations == 0, f"{checked} traces, {violations} violations")


def test_determinism(tmp_path, trained):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("classes = 4\nn_per_class = 25\nvocab_per_class = 6\nnoise = 0.2\n"
                   "data = all.tsv\nmodel = stacked-lstm\nhidden_sizes = 6,6\nembed_dim = 5\n"
                   "epochs = 3\nalpha_mode = trainable\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "all.tsv"), "--seed", "9"]) == 0
    for name in ("a.bin", "b.bin"):
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "9"]) == 0
    same_files = (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    exact = True
    for model in trained.values():
        blob = model_bytes(model)
        loaded = model_from_bytes(blob)
        exact &= all(a.data.tobytes() == b.data.tobytes()
                     for (_, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()))
        exact &= model_bytes(loaded) == blob
    assert record("determinism", same_files and exact,
                  f"identical train outputs: {same_files}, bit-exact round trip: {exact}")


# -- metric oracles, alpha schedule, entropy bounds ---------------------------

def _oracle(pred, gold, C):
    hits = sum(1 for p, g in zip(pred, gold) if p == g)
    f1s = []
    for c in range(C):
        tp = fp = fn = 0
        for p, g in zip(pred, gold):
            tp += p == c and g == c
            fp += p == c and g != c
            fn += p != c and g == c
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return hits / len(gold), math.fsum(f1s) / C


def test_metric_oracles_and_alpha_schedule():
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(1000):
        C = int(rng.integers(2, 9))
        n = int(rng.integers(1, 40))
        gold = rng.integers(0, C, n).tolist()
        pred = [g if rng.random() < 0.5 else int(rng.integers(C)) for g in gold]
        acc, f1 = _oracle(pred, gold, C)
        mismatches += accuracy(pred, gold) != acc or macro_f1(pred, gold, C) != f1
    alphas = alpha_weights(3, 0.3, 1.0)
    schedule_err = max(abs(a - b) for a, b in zip(alphas, [1.0, 0.65, 0.3 + 0.7 / 3]))
    schedule_err = max(schedule_err, max(abs(a - b) for a, b in zip(AlphaSchedule(0.3, 1.0, 3).values, alphas)))
    ok = mismatches == 0 and schedule_err <= 1e-12
    assert record("metric oracles and alpha schedule", ok,
                  f"1000 cases, {mismatches} mismatches; alpha error {schedule_err:.1e}")


def test_entropy_bounds():
    rng = np.random.default_rng(3)
    worst_low, worst_high = 0.0, -np.inf
    for i in range(10_000):
        C = int(rng.integers(2, 40))
        p = rng.dirichlet(np.full(C, 10.0 ** rng.uniform(-2, 2)))
        if i % 5 == 0:
            p[rng.random(C) < 0.3] = 0.0
            p = p / p.sum() if p.sum() > 0 else np.eye(C)[0]
        h = entropy(p)
        worst_low = min(worst_low, h)
        worst_high = max(worst_high, h - math.log(C))
    one_hot_ok = all(entropy(np.eye(C)[k]) == 0.0 for C in (2, 10, 25) for k in (0, C - 1))
    uniform_err = max(abs(entropy(np.full(C, 1 / C)) - math.log(C)) for C in (2, 3, 10, 25, 150))
    batch = row_entropies(np.full((4, 7), 1 / 7))
    uniform_err = max(uniform_err, float(np.max(np.abs(batch - math.log(7)))))
    # float64 rounding of ln C itself allows a few ulps above the bound
    ok = worst_low >= 0 and worst_high <= 1e-12 and one_hot_ok and uniform_err <= 1e-12
    assert record("entropy bounds, 10000 distributions", ok,
                  f"min H {worst_low}, max H - ln C {worst_high:.1e}, uniform error {uniform_err:.1e}")
