"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_coords: int
    passed: bool
    n_skipped: int = 0

    def __bool__(self) -> bool:
        return self.passed


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    tol: float = 1e-6,
    n_coords: int = 64,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    atol: float = 0.0,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` against
    ``(f(x + h e_i) - f(x - h e_i)) / 2h`` on up to ``n_coords`` coordinates.

    ``f`` may close over other requires-grad tensors; only ``x`` is perturbed.
    The relative error denominator is floored at ``floor`` so coordinates with
    a vanishing gradient compare in absolute terms.  A coordinate also passes
    when its absolute error is at most ``atol`` (roundoff on large losses).

    With ``skip_kinks`` the difference quotient is repeated at ``h / 2``; a
    coordinate whose two estimates disagree beyond ``tol`` and ``atol`` sits
    within ``h`` of a ReLU / max-pool kink and is excluded and counted in
    ``n_skipped``.  The check fails if more than a quarter are skipped.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    analytic = backward(out).get(probe, np.zeros_like(base)).reshape(-1)

    flat = base.reshape(-1)
    coords = np.arange(flat.size) if flat.size <= n_coords else rng.choice(flat.size, n_coords, replace=False)

    def quotient(i: int, step: float) -> float:
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        with no_grad():
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
        return (fp - fm) / (2 * step)

    numeric = np.array([quotient(i, h) for i in coords])
    picked = analytic[coords]
    keep = np.ones(len(coords), dtype=bool)
    if skip_kinks:
        half = np.array([quotient(i, h / 2) for i in coords])
        spread = np.abs(numeric - half)
        keep = (spread <= atol) | (_rel_err(numeric, half, floor) < tol)
    abs_err = np.abs(picked - numeric)[keep]
    rel = _rel_err(picked, numeric, floor)[keep]
    ok = (abs_err <= atol) | (rel < tol)
    n_skipped = int(len(coords) - keep.sum())
    return GradCheckReport(
        max_rel_err=float(rel.max(initial=0.0)),
        max_abs_err=float(abs_err.max(initial=0.0)),
        n_coords=len(coords),
        passed=bool(ok.all() and 4 * n_skipped <= len(coords)),
        n_skipped=n_skipped,
    )


# -- suite ---------------------------------------------------------------
@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    tol: float


def _weighted(rng: np.random.Generator):
    """Random fixed projection turning any output into a scalar."""
    cache = {}

    def proj(y: Tensor) -> Tensor:
        if y.shape not in cache:
            cache[y.shape] = rng.standard_normal(y.shape)
        return (y * cache[y.shape]).sum()

    return proj


def _swap(params: dict, name: str, value: Tensor) -> dict:
    out = dict(params)
    out[name] = value
    return out


def layer_cases(seed: int = 0):
    """(name, f, x) triples covering every layer type on small shapes."""
    from . import layers as nn
    from .training import gkl

    rng = np.random.default_rng(seed)
    proj = _weighted(rng)
    p, b = {}, {}
    nn.init_linear(p, "lin", 5, 3, rng)
    nn.init_gru(p, "gru", 3, 4, rng)
    nn.init_depthwise(p, "dw", 2, 3, 3, rng, multiplier=2)
    nn.init_pointwise(p, "pw", 2, 3, rng)
    nn.init_conv(p, "conv", 2, 3, 3, 3, rng)
    nn.init_transposed_conv(p, "up", 2, 3, 1, 2, rng)
    nn.init_batch_norm(p, b, "bn", 2)
    blk = nn.DwsBlockConfig(2, 3, 3, 3)
    gkl_x = Tensor(rng.uniform(0.1, 2.0, (3, 4)))
    nn.init_dws_block(p, b, "dws", blk, rng)

    def img():
        return Tensor(rng.standard_normal((2, 2, 4, 6)))

    cases = [
        ("linear/x", lambda x: proj(nn.linear(x, p, "lin")), Tensor(rng.standard_normal((2, 5)))),
        ("linear/weight", lambda w: proj(nn.linear(Tensor(np.ones((2, 5))), _swap(p, "lin.weight", w), "lin")),
         p["lin.weight"]),
        ("gru/x", lambda x: proj(nn.gru_sequence(x, p, "gru")), Tensor(rng.standard_normal((2, 4, 3)))),
        ("gru/weight_hh",
         lambda w: proj(nn.gru_sequence(Tensor(np.full((1, 4, 3), 0.5)), _swap(p, "gru.weight_hh", w), "gru")),
         p["gru.weight_hh"]),
        ("depthwise/x", lambda x: proj(nn.depthwise_conv(x, p, "dw", padding=1)), img()),
        ("depthwise/weight",
         lambda w: proj(nn.depthwise_conv(Tensor(np.ones((1, 2, 4, 4))), _swap(p, "dw.weight", w), "dw", 1)),
         p["dw.weight"]),
        ("pointwise/x", lambda x: proj(nn.pointwise_conv(x, p, "pw")), img()),
        ("conv2d/x", lambda x: proj(nn.conv2d(x, p, "conv", stride=(1, 2), padding=1)), img()),
        ("transposed_conv/x", lambda x: proj(nn.transposed_conv(x, p, "up", stride=(1, 2))), img()),
        ("max_pool/x", lambda x: proj(nn.max_pool(x, 1, 2)), img()),
        ("batch_norm/x", lambda x: proj(nn.batch_norm(x, p, dict(b), "bn", "train")), img()),
        ("dws_block/x", lambda x: proj(nn.dws_block(x, blk, p, dict(b), "dws", "train")), img()),
        ("gkl/y", lambda y: gkl(gkl_x, y), Tensor(rng.uniform(0.1, 2.0, (3, 4)))),
    ]
    return cases


def model_cases(variant: str, seed: int = 0, dropout: bool = True):
    """(name, f, x) per trainable tensor of the tiny model: f is the full
    training loss with that tensor replaced by x."""
    from .models import TINY, init_params, mad_forward
    from .training import mad_loss

    cfg = TINY.replace(variant=variant)
    if not dropout:
        cfg = cfg.replace(p_enc=0.0, p_dec=0.0)
    model = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    V = rng.uniform(0.0, 1.0, (2, cfg.T + cfg.L, cfg.F))
    target = rng.uniform(0.0, 1.0, (2, cfg.T, cfg.F))

    def loss_with(name):
        def f(x: Tensor) -> Tensor:
            m = model.with_params(_swap(model.params, name, x))
            m.buffers = {k: v.copy() for k, v in model.buffers.items()}
            v1, v2 = mad_forward(V, m, "train", np.random.default_rng(seed + 2))
            return mad_loss(target, v1, v2, m.fnn_m_weight, m.fnn_d2_weight)
        return f

    return [(f"{variant}/{name}", loss_with(name), model.params[name]) for name in sorted(model.params)]


LAYER_TOL = 1e-6
MODEL_TOL = 1e-4
# roundoff of a difference quotient on a summed loss of O(100) at h = 1e-5
MODEL_ATOL = 1e-8


def run_suite(seed: int = 0, n_coords: int = 64) -> list[SuiteResult]:
    """Layer checks at LAYER_TOL, then every tensor of both tiny models at MODEL_TOL."""
    results = []
    for i, (name, f, x) in enumerate(layer_cases(seed)):
        rep = grad_check(f, x, tol=LAYER_TOL, n_coords=n_coords, rng=np.random.default_rng([seed, i]))
        results.append(SuiteResult(name, rep, LAYER_TOL))
    cases = model_cases("rnn", seed) + model_cases("dws-cnn", seed)
    for i, (name, f, x) in enumerate(cases):
        rep = grad_check(f, x, tol=MODEL_TOL, n_coords=n_coords, rng=np.random.default_rng([seed, 1000 + i]),
                         atol=MODEL_ATOL, skip_kinks=True)
        results.append(SuiteResult(name, rep, MODEL_TOL))
    return results
