"""Toy diffusion-transformer block: forward/backward, calibration, checkpoints."""

import numpy as np
import pytest

from fpqkit.adaround import CalibConfig
from fpqkit.dit import (
    QUANT_MATS,
    BlockCalibReport,
    FormatAssignment,
    ToyDiTConfig,
    backward_block,
    forward_block,
    forward_model,
    load_checkpoint,
    make_toy_model,
    mat_inputs,
    quantize_model,
    resolve_model,
    run_trajectories,
    save_checkpoint,
)
from fpqkit.errors import ConfigError
from fpqkit.quantize import dequantize
from fpqkit.tensor import make_rng

SMALL = ToyDiTConfig(embed=16, heads=2, tokens=4, blocks=1, ff_expansion=2,
                     cond_tokens=2)


def small_batch(model, n=3, seed=5):
    rng = make_rng(seed)
    x = rng.standard_normal((n, model.cfg.tokens, model.cfg.embed))
    cond = rng.standard_normal((n, model.cfg.cond_tokens, model.cfg.embed))
    t = rng.uniform(0, 1, n)
    return x, cond, t


def test_toy_model_is_deterministic():
    m1, m2 = make_toy_model(3), make_toy_model(3)
    for b1, b2 in zip(m1.blocks, m2.blocks):
        for n in QUANT_MATS:
            assert np.array_equal(b1.mats[n], b2.mats[n])
    assert not np.array_equal(make_toy_model(4).blocks[0].mats["wq"],
                              m1.blocks[0].mats["wq"])


def test_toy_model_weights_have_outliers():
    m = make_toy_model(0)
    for bi in range(m.cfg.blocks):
        for n in QUANT_MATS:
            w = m.blocks[bi].mats[n]
            bulk = np.median(np.abs(w))
            assert np.abs(w).max() > 10 * bulk, (bi, n)


def test_forward_shapes_and_cache():
    model = make_toy_model(1, SMALL)
    x, cond, t = small_batch(model)
    out, cache = forward_block(model, 0, x, cond, t)
    assert out.shape == x.shape
    assert cache is None
    out2, cache = forward_block(model, 0, x, cond, t, want_cache=True)
    assert np.array_equal(out, out2)
    for key in ("a1", "ctx", "a2", "ctx2", "a3", "g"):
        assert key in cache


def test_forward_model_composes_blocks():
    cfg = ToyDiTConfig(embed=16, heads=2, tokens=4, blocks=2, ff_expansion=2,
                       cond_tokens=2)
    model = make_toy_model(2, cfg)
    x, cond, t = small_batch(model)
    h, _ = forward_block(model, 0, x, cond, t)
    h, _ = forward_block(model, 1, h, cond, t)
    assert np.allclose(forward_model(model, x, cond, t), h, rtol=0, atol=0)


def test_mat_inputs_match_cache_sites():
    model = make_toy_model(1, SMALL)
    x, cond, t = small_batch(model)
    xs = mat_inputs(model, 0, x, cond, t)
    assert set(xs) == set(QUANT_MATS)
    n_rows = 3 * model.cfg.tokens
    for n in ("wq", "wk", "wv", "ff1", "ff2"):
        assert xs[n].shape == (n_rows, model.blocks[0].mats[n].shape[1])
    # shared attention input feeds q, k and v identically
    assert np.array_equal(xs["wq"], xs["wk"])
    assert np.array_equal(xs["wq"], xs["wv"])
    # cross-attention keys/values read the conditioning tokens
    assert xs["ck"].shape == (3 * model.cfg.cond_tokens, model.cfg.embed)


def test_override_substitutes_weight():
    model = make_toy_model(1, SMALL)
    x, cond, t = small_batch(model)
    base, _ = forward_block(model, 0, x, cond, t)
    zeroed, _ = forward_block(model, 0, x, cond, t,
                              overrides={"ff2": np.zeros_like(model.blocks[0].mats["ff2"])})
    assert not np.array_equal(base, zeroed)
    same, _ = forward_block(model, 0, x, cond, t,
                            overrides={"ff2": model.blocks[0].mats["ff2"]})
    assert np.array_equal(base, same)


def test_activation_quantization_changes_output_boundedly():
    model = make_toy_model(1, SMALL)
    x, cond, t = small_batch(model)
    base, _ = forward_block(model, 0, x, cond, t)
    from fpqkit.formats import parse_format
    qa, _ = forward_block(model, 0, x, cond, t, afmt=parse_format("E3M4"))
    assert not np.array_equal(base, qa)
    rel = np.linalg.norm(qa - base) / np.linalg.norm(base)
    assert rel < 0.1


def test_block_backward_matches_finite_difference():
    model = make_toy_model(6, SMALL)
    x, cond, t = small_batch(model, n=2, seed=9)
    y_ref, _ = forward_block(model, 0, x, cond, t)
    y_ref = y_ref + 0.05  # offset so the residual is non-zero

    def loss(overrides):
        out, _ = forward_block(model, 0, x, cond, t, overrides=overrides)
        err = out - y_ref
        return float(np.sum(err * err))

    out, cache = forward_block(model, 0, x, cond, t, want_cache=True)
    grads = backward_block(model, 0, cache, 2.0 * (out - y_ref))
    assert set(grads) == set(QUANT_MATS)
    rng = make_rng(0)
    h = 1e-5
    for n in QUANT_MATS:
        w = model.blocks[0].mats[n]
        for _ in range(3):
            i = int(rng.integers(w.shape[0]))
            j = int(rng.integers(w.shape[1]))
            wp = w.copy(); wp[i, j] += h
            wm = w.copy(); wm[i, j] -= h
            fd = (loss({n: wp}) - loss({n: wm})) / (2 * h)
            g = grads[n][i, j]
            assert g == pytest.approx(fd, rel=5e-4, abs=1e-6), (n, i, j)


def test_trajectories_layout_and_determinism():
    model = make_toy_model(0, SMALL)
    traj = run_trajectories(model, n_samples=3, steps=4, seed=11)
    tokens, embed = model.cfg.tokens, model.cfg.embed
    assert traj.states.shape == (3, 4, tokens, embed)
    assert traj.block_inputs[0].shape == (12, tokens, embed)
    assert len(traj.timesteps) == 4 and traj.timesteps[0] == 1.0
    # step-major concatenation: slice s holds all samples of step s
    for s in range(4):
        assert np.array_equal(traj.block_inputs[0][s * 3:(s + 1) * 3],
                              traj.states[:, s])
    traj2 = run_trajectories(model, n_samples=3, steps=4, seed=11)
    assert np.array_equal(traj.block_outputs[0], traj2.block_outputs[0])
    # activations stay O(1) across the run
    rms = np.sqrt(np.mean(traj.states ** 2, axis=(0, 2, 3)))
    assert rms.max() < 2.0


def test_quantize_model_plain_and_layer_calibrated():
    model = make_toy_model(0, SMALL)
    assignment = FormatAssignment(weight="E2M1", ff1="E3M0")
    qm = quantize_model(model, assignment, group_size=8)
    assert len(qm.tensors) == 1 and not qm.reports
    assert qm.tensors[0]["ff1"].fmt.name == "E3M0"
    assert qm.tensors[0]["wq"].fmt.name == "E2M1"
    ov = qm.overrides()
    assert ov[0]["wq"].shape == model.blocks[0].mats["wq"].shape

    traj = run_trajectories(model, n_samples=2, steps=2, seed=0)
    qc = quantize_model(model, assignment, group_size=8, calib=traj,
                        cfg=CalibConfig(iters=40, group_size=8))
    rep = qc.reports[0]
    assert set(rep) == set(QUANT_MATS)
    for n in QUANT_MATS:
        assert rep[n].final_loss <= rep[n].rtn_loss + 1e-9


def test_quantize_model_block_granularity():
    model = make_toy_model(0, SMALL)
    traj = run_trajectories(model, n_samples=2, steps=2, seed=0)
    qc = quantize_model(model, FormatAssignment(), group_size=8, calib=traj,
                        cfg=CalibConfig(iters=30, lr=0.05), granularity="block")
    rep = qc.reports[0]
    assert isinstance(rep, BlockCalibReport)
    assert rep.final_loss <= rep.rtn_loss + 1e-9
    assert len(rep.loss_history) == 30
    with pytest.raises(ConfigError):
        quantize_model(model, FormatAssignment(), 8, calib=traj, granularity="tensor")


def test_format_assignment_routing():
    a = FormatAssignment(weight="E2M1", ff1="E3M0")
    assert a.fmt_for("ff1").name == "E3M0"
    assert a.fmt_for("ff2").name == "E2M1"
    assert FormatAssignment().fmt_for("ff1").name == "E2M1"


def test_checkpoint_round_trip(tmp_path):
    model = make_toy_model(5, SMALL)
    save_checkpoint(model, tmp_path / "ckpt")
    loaded = load_checkpoint(tmp_path / "ckpt")
    assert loaded.cfg == model.cfg
    for n in QUANT_MATS:
        # checkpoints store the float32 image of each weight
        assert np.array_equal(
            loaded.blocks[0].mats[n],
            model.blocks[0].mats[n].astype(np.float32).astype(np.float64))
    x, cond, t = small_batch(model)
    o1, _ = forward_block(model, 0, x, cond, t)
    o2, _ = forward_block(loaded, 0, x, cond, t)
    assert np.allclose(o1, o2, rtol=1e-5, atol=1e-6)
    # a second round trip is lossless
    save_checkpoint(loaded, tmp_path / "ckpt2")
    again = load_checkpoint(tmp_path / "ckpt2")
    for n in QUANT_MATS:
        assert np.array_equal(again.blocks[0].mats[n], loaded.blocks[0].mats[n])


def test_resolve_model_specs(tmp_path):
    m = resolve_model("toy:5")
    ref = make_toy_model(5)
    assert np.array_equal(m.blocks[0].mats["ff1"], ref.blocks[0].mats["ff1"])
    with pytest.raises(ConfigError):
        resolve_model("toy:notanumber")
    with pytest.raises(ConfigError):
        resolve_model(str(tmp_path / "nothing_here"))


def test_quantized_model_dequantizes_to_nearby_weights():
    model = make_toy_model(0, SMALL)
    qm = quantize_model(model, FormatAssignment(), group_size=8)
    w = model.blocks[0].mats["wq"]
    dq = dequantize(qm.tensors[0]["wq"])
    assert dq.shape == w.shape
    # per-group clipping keeps the reconstruction within the group range
    assert np.abs(dq).max() <= np.abs(w).max() * (1 + 1e-6)
    assert np.corrcoef(dq.ravel(), w.ravel())[0, 1] > 0.95
