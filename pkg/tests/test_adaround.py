"""Learned-rounding calibration: gradients, gates, schedules, safeguards."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fpqkit.adaround import (
    CalibConfig,
    RoundingMask,
    _beta_at,
    calibrate_layer,
    finalize_mask,
    init_mask,
    loss_gradient,
    reconstruction_loss,
    rectified_sigmoid,
    regularizer,
    scale_aware_gate,
    soft_quantized_weight,
)
from fpqkit.errors import ConfigError, NumericError
from fpqkit.formats import enumerate_grid, parse_format
from fpqkit.quantize import dequantize, group_quantize
from fpqkit.tensor import matmul_fast

E2M1 = parse_format("E2M1")


def _f32(w):
    return np.asarray(w, np.float32).astype(np.float64)


def test_rectified_sigmoid_shape_and_saturation():
    v = np.linspace(-10, 10, 1001)
    h = rectified_sigmoid(v)
    assert h.min() == 0.0 and h.max() == 1.0
    assert np.all(np.diff(h) >= 0)
    # stretched sigmoid crosses 1/2 at v = 0
    assert rectified_sigmoid(np.array([0.0]))[0] == pytest.approx(0.5)
    # saturates strictly inside the logit range, giving exact 0/1 gates
    assert rectified_sigmoid(np.array([3.0]))[0] == 1.0
    assert rectified_sigmoid(np.array([-3.0]))[0] == 0.0


def test_gate_reparameterization_identity():
    rng = np.random.default_rng(7)
    v = rng.standard_normal((8, 32)) * 3
    s = np.exp2(rng.uniform(-6, 3, (8, 32)))
    assert np.allclose(scale_aware_gate(v * s, s), rectified_sigmoid(v),
                       rtol=1e-12, atol=1e-15)


def test_scale_aware_gate_rejects_bad_scale():
    with pytest.raises(NumericError):
        scale_aware_gate(np.ones(3), np.array([1.0, 0.0, 1.0]))


def test_mask_validation():
    with pytest.raises(ConfigError):
        RoundingMask(v=np.ones((2, 2)), scale=np.ones((2, 2)), variant="bogus")


def test_warm_start_reproduces_clipped_weight():
    rng = np.random.default_rng(7)
    w = rng.standard_normal((8, 32)) * 2
    q = group_quantize(w, E2M1, 16)
    for variant in ("original", "scale-aware"):
        mask = init_mask(w, q, variant)
        ws = soft_quantized_weight(_f32(w), q, mask.gate())
        wc = np.clip(_f32(w), -q.elem_maxvals(), q.elem_maxvals())
        assert np.allclose(ws, wc, rtol=0, atol=1e-9), variant


def test_warm_start_hard_mask_is_round_to_nearest():
    rng = np.random.default_rng(8)
    w = rng.standard_normal((16, 64))
    q = group_quantize(w, E2M1, 32)
    wf = _f32(w)
    hard = init_mask(w, q, "scale-aware").hard()
    rtn_gate = np.rint(wf / q.elem_scale) - np.floor(wf / q.elem_scale)
    # rint rounds half to even while the gate threshold rounds half up;
    # they agree everywhere off the exact midpoints
    frac = wf / q.elem_scale - np.floor(wf / q.elem_scale)
    off_tie = np.abs(frac - 0.5) > 1e-12
    assert np.array_equal(hard[off_tie], rtn_gate[off_tie])


def test_regularizer_poles_and_peak():
    assert regularizer(np.array([0.0, 1.0]), beta=4.0) == pytest.approx(0.0)
    assert regularizer(np.array([0.5]), beta=4.0) == pytest.approx(1.0)
    mid = regularizer(np.array([0.25]), beta=2.0)
    assert 0.0 < mid < 1.0


def test_beta_schedule_holds_then_anneals():
    cfg = CalibConfig(iters=100, warmup=0.2, beta_start=20.0, beta_end=2.0)
    assert _beta_at(cfg, 0) == 20.0
    assert _beta_at(cfg, 19) == 20.0
    assert _beta_at(cfg, 99) == pytest.approx(2.0)
    mids = [_beta_at(cfg, i) for i in range(20, 100)]
    assert all(a >= b for a, b in zip(mids, mids[1:]))


def test_config_validation():
    with pytest.raises(ConfigError):
        CalibConfig(variant="fancy")
    with pytest.raises(ConfigError):
        CalibConfig(iters=0)
    with pytest.raises(ConfigError):
        CalibConfig(warmup=1.0)
    with pytest.raises(ConfigError):
        CalibConfig(lr=0.0)


@pytest.mark.parametrize("variant", ["original", "scale-aware"])
def test_gradient_matches_finite_difference(variant):
    rng = np.random.default_rng(200)
    w = rng.standard_normal((4, 4))
    x = rng.standard_normal((8, 4))
    q = group_quantize(w, E2M1, 4)
    wf = _f32(w)
    y = matmul_fast(x, wf.T)
    s = q.elem_scale
    mask = init_mask(wf, q, variant)
    jit = rng.uniform(-0.1, 0.1, mask.v.shape)
    mask.v = mask.v + jit * (s if variant == "scale-aware" else 1.0)
    g = loss_gradient(wf, q, x, y, mask, lam=0.01, beta=3.0)
    gate = mask.gate()
    pre = np.floor(wf / s) + gate
    n_lim = np.rint(q.elem_maxvals() / s)
    safe = (gate > 0.05) & (gate < 0.95) & (pre > -n_lim + 0.02) & (pre < n_lim - 0.02)
    checked = 0
    for i in range(4):
        for j in range(4):
            if not safe[i, j]:
                continue
            h = 1e-6 * max(abs(mask.v[i, j]), 1.0)
            vp = mask.v.copy(); vp[i, j] += h
            vm = mask.v.copy(); vm[i, j] -= h
            lp = reconstruction_loss(wf, q, x, y, RoundingMask(vp, s, variant), 0.01, 3.0)
            lm = reconstruction_loss(wf, q, x, y, RoundingMask(vm, s, variant), 0.01, 3.0)
            fd = (lp - lm) / (2 * h)
            rel = abs(fd - g[i, j]) / max(abs(fd), abs(g[i, j]), 1e-12)
            assert rel < 1e-4, (variant, i, j, rel)
            checked += 1
    assert checked >= 4


def twin_group_layer(seed=17, scale_ratio=4.0):
    """Two column groups, identical up to a power-of-two weight scale, fed
    the same inputs: gradient components are comparable group to group."""
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal((8, 16))
    w = np.concatenate([w0, scale_ratio * w0], axis=1)
    x0 = rng.standard_normal((40, 16))
    x = np.concatenate([x0, x0], axis=1)
    q = group_quantize(w, E2M1, 16)
    wf = _f32(w)
    return wf, x, q, matmul_fast(x, wf.T), rng


def test_original_gradient_scales_with_group_scale():
    wf, x, q, y, rng = twin_group_layer()
    jit = rng.uniform(-0.2, 0.2, (8, 16))
    mask = init_mask(wf, q, "original")
    mask.v = mask.v + np.concatenate([jit, jit], axis=1)
    g = loss_gradient(wf, q, x, y, mask, lam=0.0, beta=3.0)
    rel = np.max(np.abs(g[:, 16:] - 4.0 * g[:, :16])
                 / np.maximum(np.abs(4.0 * g[:, :16]), 1e-300))
    assert rel < 1e-10


def test_scale_aware_gradient_is_scale_invariant():
    wf, x, q, y, rng = twin_group_layer()
    jit = rng.uniform(-0.2, 0.2, (8, 16))
    mask = init_mask(wf, q, "scale-aware")
    mask.v = mask.v + np.concatenate([jit, jit], axis=1) * q.elem_scale
    g = loss_gradient(wf, q, x, y, mask, lam=0.0, beta=3.0)
    rel = np.max(np.abs(g[:, 16:] - g[:, :16])
                 / np.maximum(np.abs(g[:, :16]), 1e-300))
    assert rel < 1e-10


@pytest.mark.parametrize("variant", ["original", "scale-aware"])
def test_calibration_never_loses_to_plain_rounding(variant):
    rng = np.random.default_rng(31)
    w = rng.standard_normal((16, 64))
    x = rng.standard_normal((128, 64))
    cfg = CalibConfig(variant=variant, iters=300, group_size=32)
    res = calibrate_layer(w, x, cfg)
    assert res.final_loss <= res.rtn_loss + 1e-12
    assert len(res.loss_history) == 300
    assert not res.diverged
    if res.fallback:
        assert res.final_loss == res.rtn_loss


def test_calibration_improves_heavy_tailed_layer():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((16, 64)) * 0.5
    for i in range(16):
        for g in range(2):
            w[i, g * 32 + rng.integers(32)] = 4.0 * rng.choice([-1.0, 1.0])
    x = rng.standard_normal((96, 64))
    res = calibrate_layer(w, x, CalibConfig(group_size=32))
    assert res.final_loss < res.rtn_loss
    assert not res.fallback


def test_finalized_codes_stay_on_grid():
    rng = np.random.default_rng(12)
    w = rng.standard_normal((8, 32)) * 1.5
    x = rng.standard_normal((40, 32))
    res = calibrate_layer(w, x, CalibConfig(iters=120, group_size=16))
    dq = dequantize(res.quantized)
    for r in range(8):
        for g in range(2):
            M = float(res.quantized.group_maxvals[r, g])
            grid = enumerate_grid(E2M1.with_maxval(M)).values.astype(np.float32)
            seg = dq[r, g * 16:(g + 1) * 16]
            assert np.all(np.isin(seg, grid) | np.isclose(
                seg[:, None], grid[None, :], rtol=1e-6, atol=0).any(axis=1))


def test_finalize_warm_start_equals_quantizer_off_ties():
    rng = np.random.default_rng(14)
    w = rng.standard_normal((16, 64))
    q = group_quantize(w, E2M1, 32)
    wf = _f32(w)
    mask = init_mask(w, q, "scale-aware")
    qh = finalize_mask(q, mask, wf)
    frac = wf / q.elem_scale - np.floor(wf / q.elem_scale)
    off_tie = np.abs(frac - 0.5) > 1e-12
    assert np.array_equal(dequantize(qh)[off_tie], dequantize(q)[off_tie])


@settings(max_examples=30)
@given(hnp.arrays(np.float64, (4, 8), elements=st.floats(0, 1)),
       st.floats(min_value=1.0, max_value=20.0))
def test_regularizer_bounds(gate, beta):
    r = regularizer(gate, beta)
    assert 0.0 <= r <= gate.size + 1e-9


@given(st.floats(-8, 8), st.floats(-8, 8))
def test_gate_monotone(v1, v2):
    lo, hi = sorted([v1, v2])
    assert rectified_sigmoid(np.array([lo]))[0] <= rectified_sigmoid(np.array([hi]))[0]
