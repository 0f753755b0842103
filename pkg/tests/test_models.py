import numpy as np
import pytest

from madsep import tensor as tn
from madsep.models import (C_O_GRID, DENOISER_PARAMS, L_ENC_GRID, RNN_MASKER_PARAMS, REFERENCE_TOTALS, TINY,
                           ConfigError, MaskerConfig, ModelParams, count_params, delta_law, denoiser_forward,
                           init_params, mad_forward, masker_forward, rnn_encode, temporal_trim)
from madsep.tensor import ShapeError, Tensor

TINY_RNN = TINY.replace(variant="rnn")


def _input(cfg, rng, batch=None):
    shape = (cfg.T + cfg.L, cfg.F) if batch is None else (batch, cfg.T + cfg.L, cfg.F)
    return rng.uniform(0.0, 1.0, shape)


# -- counting ----------------------------------------------------------------
def test_rnn_masker_closed_form():
    N, F = 744, 2049
    assert 36 * N * N + 24 * N + 2 * N * F + F == RNN_MASKER_PARAMS
    counts = count_params(MaskerConfig(variant="rnn"))
    assert counts["masker"] == 22_996_113
    assert counts["denoiser"] == 4_199_425 == DENOISER_PARAMS


def test_denoiser_closed_form():
    F, H = 2049, 1024
    assert F * H + H + H * F + F == count_params(MaskerConfig())["denoiser"]


@pytest.mark.parametrize("C", C_O_GRID)
@pytest.mark.parametrize("L_enc", L_ENC_GRID[:-1])
def test_delta_law_on_grid(L_enc, C):
    lo = count_params(MaskerConfig(variant="dws-cnn", L_enc=L_enc, C_o=C))["total"]
    hi = count_params(MaskerConfig(variant="dws-cnn", L_enc=L_enc + 2, C_o=C))["total"]
    assert hi - lo == delta_law(C) == 2 * (C * C + 31 * C)
    assert hi - lo == REFERENCE_TOTALS[(L_enc + 2, C)] - REFERENCE_TOTALS[(L_enc, C)]


def test_delta_law_examples():
    assert delta_law(64) == 12_160 and delta_law(128) == 40_704 and delta_law(256) == 146_944


@pytest.mark.parametrize("key", sorted(REFERENCE_TOTALS))
def test_table_totals_reproduced(key):
    L_enc, C = key
    assert count_params(MaskerConfig(variant="dws-cnn", L_enc=L_enc, C_o=C))["total"] == REFERENCE_TOTALS[key]


def test_best_grid_point_identity():
    c = count_params(MaskerConfig(variant="dws-cnn", L_enc=7, C_o=256))
    assert c["masker"] == 1_394_689
    assert c["masker"] + c["denoiser"] == 5_594_114


@pytest.mark.parametrize("variant", ["rnn", "dws-cnn"])
def test_materialised_params_match_count(variant):
    cfg = TINY.replace(variant=variant)
    model = init_params(cfg)
    counts = count_params(cfg)
    assert model.n_trainable() == counts["total"]
    assert sum(p.size for p in model.masker.values()) == counts["masker"]
    assert sum(p.size for p in model.denoiser.values()) == counts["denoiser"]


def test_materialised_rnn_at_paper_size():
    model = init_params(MaskerConfig(variant="rnn"))
    assert sum(p.size for p in model.masker.values()) == RNN_MASKER_PARAMS


# -- config ----------------------------------------------------------------
@pytest.mark.parametrize("kw", [
    dict(variant="lstm"), dict(N_tr=3000), dict(N_tr=0), dict(L=3), dict(L=-2), dict(T=0),
    dict(variant="dws-cnn", L_enc=0), dict(variant="dws-cnn", p_enc=1.0),
    dict(variant="dws-cnn", pool_dec=(2, 8)), dict(variant="dws-cnn", pool_dec=(1, 7)),
    dict(variant="dws-cnn", kernel=4), dict(precision="f16"),
])
def test_invalid_configs_rejected_at_build(kw):
    with pytest.raises(ConfigError):
        MaskerConfig(**kw)


def test_config_round_trip():
    cfg = TINY.replace(p_enc=0.1)
    assert MaskerConfig.from_dict(cfg.to_dict()) == cfg


# -- forward shapes & values ---------------------------------------------------
@pytest.mark.parametrize("variant", ["rnn", "dws-cnn"])
def test_output_shapes_and_nonnegativity(variant, rng):
    cfg = TINY.replace(variant=variant)
    model = init_params(cfg, 3)
    out = masker_forward(_input(cfg, rng, 3), model, "train", rng)
    assert out.mask.shape == out.estimate.shape == out.mixture.shape == (3, cfg.T, cfg.F)
    assert out.mask.data.min() >= 0
    np.testing.assert_array_equal(out.estimate.data, out.mixture.data * out.mask.data)
    v1, v2 = mad_forward(_input(cfg, rng), model, "eval")
    assert v1.shape == v2.shape == (1, cfg.T, cfg.F)
    assert v2.data.min() >= 0


@pytest.mark.parametrize("L_enc", L_ENC_GRID)
def test_cnn_paper_geometry_gives_T_by_F(L_enc, rng):
    # spatial geometry does not depend on C_o; a narrow net keeps this fast
    cfg = MaskerConfig(variant="dws-cnn", L_enc=L_enc, C_o=2)
    with tn.no_grad():
        v1, v2 = mad_forward(_input(cfg, rng), init_params(cfg), "eval")
    assert v1.shape == v2.shape == (1, 60, 2049)


@pytest.mark.parametrize("variant", ["rnn", "dws-cnn"])
def test_zero_mixture_gives_zero_estimates(variant):
    cfg = TINY.replace(variant=variant)
    v1, v2 = mad_forward(np.zeros((cfg.T + cfg.L, cfg.F)), init_params(cfg), "eval")
    assert not np.any(v1.data) and not np.any(v2.data)


@pytest.mark.parametrize("variant", ["rnn", "dws-cnn"])
def test_estimate_zero_wherever_mixture_is_zero(variant, rng):
    cfg = TINY.replace(variant=variant)
    V = _input(cfg, rng)
    V[:, ::3] = 0.0
    v1, v2 = mad_forward(V, init_params(cfg), "eval")
    trimmed = V[cfg.half:cfg.half + cfg.T]
    assert not np.any(v1.data[0][trimmed == 0]) and not np.any(v2.data[0][trimmed == 0])


def test_unit_mask_passes_mixture_through(rng):
    cfg = TINY_RNN
    model = init_params(cfg)
    params = dict(model.params)
    params["masker.fnn_m.weight"] = Tensor(np.zeros((cfg.F, cfg.fnn_in)))
    params["masker.fnn_m.bias"] = Tensor(np.ones(cfg.F))
    V = _input(cfg, rng)
    out = masker_forward(V, model.with_params(params), "eval")
    np.testing.assert_array_equal(out.estimate.data[0], V[cfg.half:cfg.half + cfg.T])


def test_denoiser_zero_in_zero_out_and_negative_rejected(rng):
    model = init_params(TINY_RNN)
    assert not np.any(denoiser_forward(Tensor(np.zeros((1, 4, 16))), model.params).data)
    with pytest.raises(ValueError):
        denoiser_forward(Tensor(-np.ones((1, 4, 16))), model.params)


def test_input_validation(rng):
    model = init_params(TINY_RNN)
    with pytest.raises(ShapeError):
        mad_forward(np.ones((5, 16)), model, "eval")
    with pytest.raises(ValueError):
        mad_forward(-np.ones((6, 16)), model, "eval")


def test_cnn_train_mode_with_dropout_needs_rng(rng):
    with pytest.raises(ValueError, match="rng"):
        mad_forward(_input(TINY, rng), init_params(TINY), "train", None)


# -- structural probes -------------------------------------------------------
def test_residual_with_zero_gru_weights(rng):
    cfg = TINY_RNN
    model = init_params(cfg)
    zeroed = {k: (Tensor(np.zeros(v.shape)) if ".enc_" in k else v) for k, v in model.params.items()}
    V = _input(cfg, rng, 2)
    H = rnn_encode(Tensor(V), cfg, zeroed).data
    v_tr = V[..., :cfg.N_tr]
    np.testing.assert_array_equal(H, np.concatenate([v_tr, v_tr[:, ::-1]], axis=-1))


@pytest.mark.parametrize("t", range(4))
def test_temporal_trim_impulse_probe(t):
    cfg = TINY_RNN  # T=4, L=2
    H = np.zeros((1, cfg.T + cfg.L, 3))
    H[0, t + cfg.half, 1] = 1.0
    out = temporal_trim(Tensor(H), cfg).data
    assert out.shape == (1, cfg.T, 3)
    assert out[0, t, 1] == 1.0 and out.sum() == 1.0


def test_context_frames_outside_trim_reach_output_only_through_encoder(rng):
    # the time-trimmed mixture V' excludes the context rows
    cfg = TINY_RNN
    V = _input(cfg, rng)
    out = masker_forward(V, init_params(cfg), "eval")
    np.testing.assert_array_equal(out.mixture.data[0], V[1:5])


def test_eval_forward_is_deterministic(rng):
    V = _input(TINY, rng)
    m = init_params(TINY, 5)
    a = mad_forward(V, m, "eval")[1].data
    b = mad_forward(V, m, "eval")[1].data
    np.testing.assert_array_equal(a, b)


def test_init_is_seeded():
    a, b, c = init_params(TINY, 1), init_params(TINY, 1), init_params(TINY, 2)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)


def test_f32_precision_runs(rng):
    cfg = TINY.replace(precision="f32")
    m = init_params(cfg)
    assert all(p.dtype == np.float32 for p in m.params.values())
    v1, v2 = mad_forward(_input(cfg, rng).astype(np.float32), m, "eval")
    assert v2.dtype == np.float32


def test_model_params_views():
    m = init_params(TINY_RNN)
    assert isinstance(m, ModelParams)
    assert m.fnn_m_weight.shape == (16, 16) and m.fnn_d2_weight.shape == (16, 8)
    assert set(m.masker) | set(m.denoiser) == set(m.params)
