import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffseg.errors import ConfigError, DataError, ShapeError
from diffseg.gradcore import Tensor, softmax_channel
from diffseg.seglosses import (LOG_FLOOR, ConfusionMatrix, FocalConfig, MultiLossConfig,
                               SSLossConfig, ce_loss, focal_loss, normalized_deviation,
                               segmentation_loss, segmentation_metrics, ss_loss, ssfl_loss)

from conftest import check_grads

# -- scalar-loop oracles (written directly from the loss definitions) -------------


def oracle_ce(y, p):
    N, C, H, W = y.shape
    total = 0.0
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    total += y[n, c, i, j] * math.log(p[n, c, i, j] + LOG_FLOOR)
    return -total / (N * H * W)


def oracle_focal(y, p, gamma):
    N, C, H, W = y.shape
    total = 0.0
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    q = p[n, c, i, j]
                    total += (1 - q) ** gamma * y[n, c, i, j] * math.log(q + LOG_FLOOR)
    return -total / (N * H * W)


def oracle_deviation(a, b, c1):
    """e map for one (n, c) patch; population statistics over the pixels."""
    H, W = len(a), len(a[0])
    P = H * W

    def stats(m):
        mu = sum(m[i][j] for i in range(H) for j in range(W)) / P
        var = sum((m[i][j] - mu) ** 2 for i in range(H) for j in range(W)) / P
        return mu, math.sqrt(var)

    mu_a, sd_a = stats(a)
    mu_b, sd_b = stats(b)
    return [[abs((a[i][j] - mu_a + c1) / (sd_a + c1) - (b[i][j] - mu_b + c1) / (sd_b + c1))
             for j in range(W)] for i in range(H)]


def oracle_ss(y, p, c1=0.01, beta=0.1, mode="pixel", scope="batch"):
    N, C, H, W = y.shape
    e = [[oracle_deviation(y[n, c].tolist(), p[n, c].tolist(), c1) for c in range(C)]
         for n in range(N)]
    if scope == "batch":
        emax = [max(e[n][c][i][j] for n in range(N) for c in range(C) for i in range(H)
                    for j in range(W))] * N
    else:
        emax = [max(e[n][c][i][j] for c in range(C) for i in range(H) for j in range(W))
                for n in range(N)]
    scalar_ce = oracle_ce(y, p)
    total, M = 0.0, 0
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    if e[n][c][i][j] > beta * emax[n]:
                        M += 1
                        if mode == "pixel":
                            w = -sum(y[n, k, i, j] * math.log(p[n, k, i, j] + LOG_FLOOR)
                                     for k in range(C))
                        else:
                            w = scalar_ce
                        total += w * e[n][c][i][j]
    return 0.0 if M == 0 else total / M


def random_instance(rng, N=2, C=3, H=4, W=4):
    labels = rng.integers(0, C, size=(N, H, W))
    y = np.eye(C)[labels].transpose(0, 3, 1, 2)
    logits = rng.normal(scale=2.0, size=(N, C, H, W))
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    return y, p


def one_hot(labels, C):
    return np.eye(C)[np.asarray(labels)].transpose(0, 3, 1, 2)


# -- cross entropy ------------------------------------------------------------------

def test_ce_uniform_two_class():
    y = one_hot(np.array([[[0, 1], [1, 0]]]), 2)
    assert ce_loss(y, Tensor(np.full(y.shape, 0.5))).item() == pytest.approx(math.log(2), abs=1e-11)


def test_ce_perfect_prediction(rng):
    y, _ = random_instance(rng)
    # log(1 + floor) makes the perfect-prediction value -floor, not exactly zero
    assert abs(ce_loss(y, Tensor(y)).item()) <= 1e-9


def test_ce_not_one_hot_names_pixel():
    y = np.zeros((1, 2, 2, 2))
    y[0, 0] = 1
    y[0, 0, 1, 0] = 0
    with pytest.raises(DataError, match=r"\(0, 1, 0\)"):
        ce_loss(y, Tensor(np.full(y.shape, 0.5)))


def test_shape_mismatch(rng):
    y, p = random_instance(rng)
    with pytest.raises(ShapeError):
        ce_loss(y, Tensor(p[:, :2]))


# -- focal ------------------------------------------------------------------------

def test_focal_single_pixel_half():
    y = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    p = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
    out = focal_loss(y, Tensor(p), FocalConfig(2.0)).item()
    assert out == pytest.approx(0.25 * math.log(2), abs=1e-11)
    assert out == pytest.approx(0.1733, abs=1e-4)


def test_focal_confident_pixel_zero():
    y = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    assert abs(focal_loss(y, Tensor(y), FocalConfig(2.0)).item()) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_focal_gamma_zero_is_ce(seed):
    y, p = random_instance(np.random.default_rng(seed))
    diff = focal_loss(y, Tensor(p), FocalConfig(0.0)).item() - ce_loss(y, Tensor(p)).item()
    assert abs(diff) <= 1e-12


# -- normalized deviation -------------------------------------------------------------

def test_deviation_identical_inputs(rng):
    a = rng.uniform(size=(3, 3))
    np.testing.assert_array_equal(normalized_deviation(a, Tensor(a)).data, 0.0)


def test_deviation_constants():
    # both sides normalise to C1/C1 = 1; only rounding in the mean survives
    out = normalized_deviation(np.full((2, 2), 0.2), Tensor(np.full((2, 2), 0.9)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_deviation_two_by_two_case():
    y = np.array([[1.0, 0.0], [0.0, 0.0]])
    p = np.array([[0.5, 0.5], [0.0, 0.0]])
    expected = oracle_deviation(y.tolist(), p.tolist(), 0.01)
    np.testing.assert_allclose(normalized_deviation(y, Tensor(p), 0.01).data, expected,
                               rtol=0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 5), st.floats(-3, 3))
def test_deviation_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    y, p = rng.normal(size=(6, 6)) * 10, rng.normal(size=(6, 6)) * 10
    base = normalized_deviation(y, Tensor(p), 1e-9).data
    moved = normalized_deviation(a * y + b, Tensor(a * p + b), 1e-9).data
    np.testing.assert_allclose(moved, base, atol=1e-6)


# -- SS loss ------------------------------------------------------------------------

def test_ss_perfect_prediction_zero(rng):
    y, _ = random_instance(rng)
    out = ss_loss(y, Tensor(y))
    assert out.item() == 0.0


def test_ss_zero_hard_examples_rule(rng):
    # e is exactly zero everywhere, so no pixel exceeds beta * e_max and M = 0
    y, _ = random_instance(rng)
    t = Tensor(y.copy(), requires_grad=True)
    out = ss_loss(y, t)
    assert out.item() == 0.0
    out.backward()
    np.testing.assert_array_equal(t.grad, 0.0)


def test_ss_constant_maps_negligible():
    y = one_hot(np.zeros((1, 3, 3), dtype=int), 2)
    p = np.zeros_like(y)
    p[:, 0], p[:, 1] = 0.7, 0.3
    assert abs(ss_loss(y, Tensor(p)).item()) <= 1e-12


def test_ss_beta_near_one_keeps_only_max(rng):
    y, p = random_instance(rng, N=1, C=2, H=4, W=4)
    e = normalized_deviation(y, Tensor(p), 0.01).data
    cfg = SSLossConfig(beta_frac=1 - 1e-12)
    hard = e >= e.max() * (1 - 1e-12)
    w = -(y * np.log(p + LOG_FLOOR)).sum(axis=1, keepdims=True) * np.ones_like(e)
    expected = (w[hard] * e[hard]).sum() / hard.sum()
    assert ss_loss(y, Tensor(p), cfg).item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("mode,scope", [("pixel", "batch"), ("scalar", "batch"),
                                        ("pixel", "sample")])
def test_ss_matches_scalar_oracle(mode, scope):
    rng = np.random.default_rng(7)
    for _ in range(10):
        y, p = random_instance(rng, N=2, C=2, H=4, W=4)
        cfg = SSLossConfig(weighting_mode=mode, emax_scope=scope)
        got = ss_loss(y, Tensor(p), cfg).item()
        assert abs(got - oracle_ss(y, p, mode=mode, scope=scope)) <= 1e-10


# -- combined loss --------------------------------------------------------------------

def test_ssfl_lambda_zero_is_ss(rng):
    y, p = random_instance(rng)
    cfg = MultiLossConfig(lambda_fl=0.0)
    assert ssfl_loss(y, Tensor(p), cfg).item() == ss_loss(y, Tensor(p), cfg.ss).item()


def test_ssfl_perfect_zero(rng):
    y, _ = random_instance(rng)
    assert abs(ssfl_loss(y, Tensor(y)).item()) <= 1e-9


def test_ssfl_component_sum(rng):
    for _ in range(5):
        y, p = random_instance(rng)
        got = ssfl_loss(y, Tensor(p), MultiLossConfig(lambda_fl=1.0)).item()
        assert abs(got - (oracle_ss(y, p) + oracle_focal(y, p, 2.0))) <= 1e-10


def test_segmentation_loss_dispatch(rng):
    y, p = random_instance(rng)
    assert segmentation_loss("ce", y, Tensor(p)).item() == ce_loss(y, Tensor(p)).item()
    with pytest.raises(ConfigError):
        segmentation_loss("dice", y, Tensor(p))


@pytest.mark.parametrize("kw", [dict(c1=0), dict(beta_frac=1.0), dict(weighting_mode="x"),
                                dict(emax_scope="x")])
def test_ss_config_validation(kw):
    with pytest.raises(ConfigError):
        SSLossConfig(**kw)


def test_config_validation_other():
    with pytest.raises(ConfigError):
        FocalConfig(-1)
    with pytest.raises(ConfigError):
        MultiLossConfig(lambda_fl=-0.1)


# -- gradients ------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["ce", "fl", "ss", "ssfl"])
def test_loss_gradients_through_softmax(name, rng):
    y, _ = random_instance(rng, N=2, C=3, H=3, W=3)
    logits = Tensor(rng.normal(size=y.shape), requires_grad=True)
    err = check_grads(lambda: segmentation_loss(name, y, softmax_channel(logits)), [logits])
    assert err < 1e-4


def test_scalar_weighting_gradient(rng):
    y, _ = random_instance(rng, N=1, C=2, H=3, W=3)
    logits = Tensor(rng.normal(size=y.shape), requires_grad=True)
    cfg = SSLossConfig(weighting_mode="scalar")
    assert check_grads(lambda: ss_loss(y, softmax_channel(logits), cfg), [logits]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_non_negative(seed):
    y, p = random_instance(np.random.default_rng(seed))
    for name in ("ce", "fl", "ss", "ssfl"):
        assert segmentation_loss(name, y, Tensor(p)).item() >= -LOG_FLOOR


# -- metrics --------------------------------------------------------------------------

def hand_metrics(cm):
    """Macro metrics from a confusion matrix given as nested lists [true][pred]."""
    C = len(cm)
    total = sum(sum(r) for r in cm)
    precs, recs, f1s = [], [], []
    for c in range(C):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(C)) - tp
        fn = sum(cm[c]) - tp
        if tp + fp + fn == 0:
            continue
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        precs.append(pr)
        recs.append(rc)
        f1s.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    return {"accuracy": sum(cm[c][c] for c in range(C)) / total,
            "precision": sum(precs) / len(precs), "recall": sum(recs) / len(recs),
            "f1": sum(f1s) / len(f1s)}


def test_metrics_two_by_two_three_correct():
    truth = np.array([[[0, 1], [1, 1]]])
    pred = np.array([[[0, 0], [1, 1]]])
    m = segmentation_metrics(one_hot(truth, 2), one_hot(pred, 2))
    # cm = [[1, 0], [1, 2]]
    assert m["accuracy"] == 0.75
    assert m["precision"] == (0.5 + 1.0) / 2
    assert m["recall"] == (1.0 + 2 / 3) / 2
    assert m["f1"] == pytest.approx((2 / 3 + 0.8) / 2, abs=0)


def _constructed_cases():
    rng = np.random.default_rng(99)
    cases = []
    for k in range(20):
        C = 2 + k % 3
        truth = rng.integers(0, C, size=(2, 3, 4))
        pred = np.where(rng.uniform(size=truth.shape) < 0.6, truth, rng.integers(0, C, truth.shape))
        if k % 5 == 0:
            truth[truth == C - 1] = 0          # class absent from truth
            pred[pred == C - 1] = 0            # and from prediction
        cases.append((C, truth, pred))
    return cases


@pytest.mark.parametrize("case", range(20))
def test_metrics_hand_confusion_cases(case):
    C, truth, pred = _constructed_cases()[case]
    cm = [[0] * C for _ in range(C)]
    for t_, p_ in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        cm[t_][p_] += 1
    got = segmentation_metrics(one_hot(truth, C), one_hot(pred, C))
    want = hand_metrics(cm)
    for key in ("accuracy", "precision", "recall", "f1"):
        assert got[key] == pytest.approx(want[key], rel=1e-15, abs=1e-15)
    assert got["averaging"] == "macro"


def test_metrics_perfect(rng):
    y, _ = random_instance(rng)
    m = segmentation_metrics(y, y)
    assert all(m[k] == 1.0 for k in ("accuracy", "precision", "recall", "f1"))


def test_metrics_random_predictions_accuracy():
    rng = np.random.default_rng(3)
    C = 4
    truth = rng.integers(0, C, size=(50, 32, 32))
    pred = rng.integers(0, C, size=truth.shape)
    m = segmentation_metrics(one_hot(truth, C), one_hot(pred, C))
    assert m["accuracy"] == pytest.approx(1 / C, abs=0.01)


def test_confusion_accumulates(rng):
    y1, p1 = random_instance(rng)
    y2, p2 = random_instance(rng)
    cm = ConfusionMatrix(3)
    cm.update(y1, p1)
    cm.update(y2, p2)
    joint = segmentation_metrics(np.concatenate([y1, y2]), np.concatenate([p1, p2]))
    assert cm.metrics()["f1"] == joint["f1"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_f1_bounds(seed):
    rng = np.random.default_rng(seed)
    y, p = random_instance(rng, C=3)
    m = segmentation_metrics(y, p)
    assert 0 <= m["f1"] <= 1
    pc = m["per_class"]
    for pr, rc, f1 in zip(pc["precision"], pc["recall"], pc["f1"]):
        assert min(pr, rc) - 1e-12 <= f1 <= max(pr, rc) + 1e-12
