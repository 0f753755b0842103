import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from madsep.gradcheck import grad_check
from madsep.models import TINY, init_params
from madsep.signal import SegmentPair
from madsep.tensor import ShapeError, Tensor, backward
from madsep.training import (ACCOMP_HIGH_CUTOFF, ACCOMP_LOW_CUTOFF, History, LossConfig, OptimizerState,
                             TrainingError, adam_step, clip_grad_norm, diag_l1, gkl, global_norm, mad_loss,
                             mad_loss_terms, make_synthetic_dataset, train)

EPS = 1e-12


# -- GKL -------------------------------------------------------------------
def test_gkl_hand_value():
    assert abs(gkl([2.0], Tensor([1.0])).item() - (2 * math.log(2) - 1)) < 1e-12


def test_gkl_of_equal_arguments_is_zero(rng):
    x = rng.uniform(0, 3, (5, 7))
    x[0, :3] = 0.0
    assert gkl(x, Tensor(x)).item() == pytest.approx(0.0, abs=1e-12)


def test_gkl_zero_reference_is_sum_of_estimate(rng):
    y = rng.uniform(0, 2, 20)
    assert gkl(np.zeros(20), Tensor(y)).item() == pytest.approx(y.sum(), rel=1e-14)


nonneg = arrays(np.float64, 12, elements=st.floats(0.0, 1e3, allow_nan=False))


@given(nonneg, nonneg)
@settings(max_examples=200, deadline=None)
def test_gkl_nonnegative(x, y):
    assert gkl(x, Tensor(y)).item() >= -1e-9 * (1 + x.sum() + y.sum())


def test_gkl_positive_when_different(rng):
    for _ in range(200):
        x, y = rng.uniform(0, 2, 6), rng.uniform(0, 2, 6)
        assert gkl(x, Tensor(y)).item() > 0


def test_gkl_errors():
    with pytest.raises(ValueError):
        gkl([-1.0], Tensor([1.0]))
    with pytest.raises(ValueError):
        gkl([1.0], Tensor([-1.0]))
    with pytest.raises(ShapeError):
        gkl([1.0, 2.0], Tensor([1.0]))


@pytest.mark.parametrize("seed", range(10))
def test_gkl_of_masked_mixture_gradcheck(seed):
    rng = np.random.default_rng(seed)
    v, x = rng.uniform(0.1, 2, (4, 6)), rng.uniform(0.5, 2, (4, 6))
    rep = grad_check(lambda m: gkl(v, x * m), Tensor(rng.uniform(0.2, 1.5, (4, 6))), tol=1e-5)
    assert rep.passed, rep


# -- joint loss ------------------------------------------------------------------
def test_perfect_estimates_and_zero_weights_give_zero(rng):
    V = rng.uniform(0.1, 1, (4, 6))
    z = Tensor(np.zeros((6, 6)))
    assert mad_loss(V, Tensor(V), Tensor(V), z, z).item() == pytest.approx(0.0, abs=1e-12)


def test_zero_estimates_against_scalar_loop():
    T, F = 3, 5
    V = np.ones((T, F))
    z = Tensor(np.zeros((F, F)))
    want = 0.0
    for _ in range(2):
        for i in range(T):
            for j in range(F):
                x, y = V[i, j], 0.0
                want += x * math.log(max(x, EPS) / max(y, EPS)) - x + y
    got = mad_loss(V, Tensor(np.zeros((T, F))), Tensor(np.zeros((T, F))), z, z).item()
    assert got == pytest.approx(want, rel=1e-14)
    assert got == pytest.approx(2 * T * F * (math.log(1 / EPS) - 1), rel=1e-14)


def test_lambda1_identity_slice():
    W = np.zeros((2, 5))
    W[0, 0] = W[1, 1] = 1.0
    V = np.ones((1, 2))
    t = mad_loss_terms(V, Tensor(V), Tensor(V), Tensor(W), Tensor(np.zeros((2, 2))))
    assert t.total.item() == pytest.approx(0.02, abs=1e-15)


def test_lambda2_is_squared_frobenius(rng):
    W = rng.standard_normal((3, 4))
    V = np.ones((1, 3))
    t = mad_loss_terms(V, Tensor(V), Tensor(V), Tensor(np.zeros((3, 3))), Tensor(W), LossConfig(0.0, 1e-4))
    assert t.total.item() == pytest.approx(1e-4 * np.sum(W ** 2), rel=1e-13)


def test_diag_term_ignores_off_diagonal(rng):
    W = rng.standard_normal((4, 7))
    base = diag_l1(Tensor(W)).item()
    W2 = W + np.where(np.eye(4, 7) == 1, 0.0, rng.standard_normal((4, 7)))
    assert diag_l1(Tensor(W2)).item() == base == pytest.approx(np.abs(np.diag(W)).sum())
    g = backward(diag_l1(Tensor(W, requires_grad=True)))
    (grad,) = g.values()
    assert np.count_nonzero(grad) == 4


def test_loss_config_rejects_negative():
    with pytest.raises(ValueError):
        LossConfig(lambda1=-1.0)


# -- clipping ----------------------------------------------------------------
def test_clip_to_half():
    g = {"a": np.array([0.6]), "b": np.array([[0.8]])}
    out, norm = clip_grad_norm(g, 0.5)
    assert norm == pytest.approx(1.0)
    assert global_norm(out) == pytest.approx(0.5, rel=1e-15)
    np.testing.assert_allclose(out["a"], [0.3])


def test_small_and_zero_norm_untouched():
    g = {"a": np.array([0.3, 0.0])}
    out, _ = clip_grad_norm(g, 0.5)
    np.testing.assert_array_equal(out["a"], g["a"])
    z = {"a": np.zeros(3)}
    np.testing.assert_array_equal(clip_grad_norm(z, 0.5)[0]["a"], z["a"])


@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False)))
@settings(max_examples=100, deadline=None)
def test_clip_idempotent(v):
    once, _ = clip_grad_norm({"a": v}, 0.5)
    twice, _ = clip_grad_norm(once, 0.5)
    np.testing.assert_allclose(twice["a"], once["a"], rtol=1e-12, atol=0)


# -- Adam ------------------------------------------------------------------------
def test_adam_two_step_hand_trace():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p0 = np.array([1.0, -2.0, 0.5])
    g1, g2 = np.array([0.5, -1.0, 0.0]), np.array([0.1, 0.2, -0.3])
    state = OptimizerState(lr=lr)
    p1 = adam_step(state, {"w": Tensor(p0)}, {"w": g1})["w"].data
    p2 = adam_step(state, {"w": Tensor(p1)}, {"w": g2})["w"].data
    # by hand
    m1, v1 = 0.1 * g1, 0.001 * g1 ** 2
    e1 = p0 - lr * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + eps)
    m2, v2 = 0.9 * m1 + 0.1 * g2, 0.999 * v1 + 0.001 * g2 ** 2
    e2 = e1 - lr * (m2 / (1 - 0.81)) / (np.sqrt(v2 / (1 - 0.999 ** 2)) + eps)
    np.testing.assert_allclose(p1, e1, rtol=1e-15)
    np.testing.assert_allclose(p2, e2, rtol=1e-14)
    # first step moves each coordinate by ~lr against its gradient sign
    np.testing.assert_allclose(p1[:2] - p0[:2], [-lr, lr], rtol=1e-6)
    assert state.step == 2


def test_adam_zero_grad_leaves_params():
    p = Tensor(np.array([1.0, 2.0]))
    out = adam_step(OptimizerState(), {"w": p}, {"w": np.zeros(2)})["w"]
    np.testing.assert_array_equal(out.data, p.data)


def test_adam_constant_grad_monotone():
    state, p = OptimizerState(lr=0.01), {"w": Tensor(np.array([0.0, 0.0]))}
    trace = []
    for _ in range(50):
        p = adam_step(state, p, {"w": np.array([1.0, -2.0])})
        trace.append(p["w"].data.copy())
    trace = np.array(trace)
    assert np.all(np.diff(trace[:, 0]) < 0) and np.all(np.diff(trace[:, 1]) > 0)


def test_adam_shape_error():
    with pytest.raises(ShapeError):
        adam_step(OptimizerState(), {"w": Tensor(np.zeros(2))}, {"w": np.zeros(3)})


# -- training loop ---------------------------------------------------------
def _pairs(cfg, n, seed=0):
    rng = np.random.default_rng(seed)
    return [SegmentPair(rng.uniform(0, 1, (cfg.T + cfg.L, cfg.F)), rng.uniform(0, 1, (cfg.T, cfg.F)), cfg.T, cfg.L, i)
            for i in range(n)]


def test_zero_lr_keeps_loss_constant():
    cfg = TINY.replace(variant="rnn")
    data = _pairs(cfg, 1)
    _, hist = train(init_params(cfg), data, epochs=5, batch=1, state=OptimizerState(lr=0.0))
    assert len(set(hist.step_losses)) == 1


@pytest.mark.parametrize("variant", ["rnn", "dws-cnn"])
def test_same_seed_same_history(variant):
    cfg = TINY.replace(variant=variant)
    data = _pairs(cfg, 6)
    runs = [train(init_params(cfg, 1), data, epochs=3, batch=4, seed=9, state=OptimizerState(lr=1e-3))
            for _ in range(2)]
    assert runs[0][1].step_losses == runs[1][1].step_losses
    for k in runs[0][0].params:
        np.testing.assert_array_equal(runs[0][0].params[k].data, runs[1][0].params[k].data)


def test_partial_last_batch_kept():
    cfg = TINY.replace(variant="rnn")
    _, hist = train(init_params(cfg), _pairs(cfg, 5), epochs=2, batch=4)
    assert len(hist.step_losses) == 4 and len(hist.epochs) == 2


def test_training_reduces_loss():
    cfg = TINY.replace(variant="rnn")
    rng = np.random.default_rng(3)
    data = []
    for i in range(4):
        x = rng.uniform(0, 1, (cfg.T + cfg.L, cfg.F))
        data.append(SegmentPair(x, 0.5 * x[cfg.L // 2: cfg.L // 2 + cfg.T], cfg.T, cfg.L, i))
    _, hist = train(init_params(cfg), data, epochs=60, batch=4, state=OptimizerState(lr=3e-3))
    assert hist.losses[-1] < 0.5 * hist.losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_location():
    cfg = TINY.replace(variant="rnn")
    data = _pairs(cfg, 3)
    data[2] = SegmentPair(np.full((6, 16), 1e300), np.ones((4, 16)), 4, 2)
    with pytest.raises(TrainingError, match=r"epoch 1, batch \d"):
        train(init_params(cfg), data, epochs=1, batch=1)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(init_params(TINY), [], epochs=1)


def test_history_csv():
    cfg = TINY.replace(variant="rnn")
    _, hist = train(init_params(cfg), _pairs(cfg, 2), epochs=2, batch=2)
    text = hist.to_csv("a=1\nb=2")
    lines = text.splitlines()
    assert lines[:3] == ["# a=1", "# b=2", "epoch,loss,grad_norm,wall_ms"]
    assert [int(l.split(",")[0]) for l in lines[3:]] == [1, 2]
    assert float(lines[3].split(",")[1]) == hist.losses[0]
    assert History().to_csv() == "epoch,loss,grad_norm,wall_ms\n"


# -- synthetic corpus --------------------------------------------------------------
def test_synthetic_sources_sum_exactly():
    for tr in make_synthetic_dataset(3, 2, 2.5):
        assert not np.any(tr.mixture.samples - tr.voice.samples - tr.accompaniment.samples)
        assert len(tr.mixture) == int(2.5 * 44100)
        assert np.max(np.abs(tr.mixture.samples)) <= 0.45 + 1e-12


def test_synthetic_is_seeded():
    a, b, c = (make_synthetic_dataset(s, 1, 2.0)[0] for s in (5, 5, 6))
    np.testing.assert_array_equal(a.mixture.samples, b.mixture.samples)
    assert not np.array_equal(a.mixture.samples, c.mixture.samples)


def test_synthetic_sources_occupy_separate_bands():
    tr = make_synthetic_dataset(0, 1, 3.0)[0]
    sr = 44100
    f = np.fft.rfftfreq(len(tr.voice), 1 / sr)
    pv = np.abs(np.fft.rfft(tr.voice.samples)) ** 2
    pa = np.abs(np.fft.rfft(tr.accompaniment.samples)) ** 2
    mid = (f > 300) & (f < 4500)
    outer = (f < ACCOMP_LOW_CUTOFF) | (f > ACCOMP_HIGH_CUTOFF)
    assert pa[mid].sum() < 1e-3 * pa.sum()
    assert pv[outer].sum() < 1e-3 * pv.sum()
    # where one source dominates, the mixture carries at least its energy
    pm = np.abs(np.fft.rfft(tr.mixture.samples)) ** 2
    assert pm[mid].sum() >= 0.99 * pv[mid].sum() and pm[outer].sum() >= 0.99 * pa[outer].sum()


def test_synthetic_minimum_duration():
    with pytest.raises(ValueError, match="2 s"):
        make_synthetic_dataset(0, 1, 1.0)
