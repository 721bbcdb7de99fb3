"""Composite blocks: pre-processing, local path, global path, gated fusion,
merge downsampler, stem, pooling pyramid."""

import numpy as np
import pytest

from helpers import fd_gradcheck_directional
from mambanext import tensor as T
from mambanext.blocks import (BLOCK_MODES, BlockConfig, MambaNeXtBlock, SPPF,
                              Stem, VisionClueMerge)
from mambanext.scan import scan_sequence
from mambanext.tensor import GradTape, ShapeError, Tensor, backward


def small_cfg(channels=4, mode="resgate_first"):
    return BlockConfig(channels=channels, d_state=4, ssm_ratio=2.0, mlp_ratio=2,
                       conv_dim=3, convnext_kernel=3, convnext_expand=2,
                       layer_scale_init=1e-6, mode=mode, scan_chunk=8)


def test_block_config_validation():
    with pytest.raises(ValueError, match="odd"):
        BlockConfig(channels=4, convnext_kernel=4)
    with pytest.raises(ValueError, match="mode"):
        BlockConfig(channels=4, mode="both_first")
    with pytest.raises(ValueError, match="ssm_ratio"):
        BlockConfig(channels=4, ssm_ratio=0.5)
    assert BlockConfig(channels=8).inner_width == 16


# ---------------------------------------------------------------------------
# preprocess


def test_preprocess_identity_weights_reduce_to_silu(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    blk.pre.conv.w.data[:] = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
    x = Tensor(rng.normal(0, 1, (1, 4, 5, 5)).astype(np.float32))
    got = blk.preprocess(x).data
    assert np.abs(got - T.silu(x).data).max() < 1e-4


def test_preprocess_zero_input_zero_output(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    x = Tensor(np.zeros((1, 4, 3, 3), np.float32))
    assert np.all(blk.preprocess(x).data == 0.0)


def test_preprocess_matches_op_composition(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    x = Tensor(rng.normal(0, 1, (2, 4, 4, 4)).astype(np.float32))
    got = blk.preprocess(x).data
    pre = blk.pre
    ref = T.silu(T.batch_norm(T.conv2d(x, pre.conv.w), pre.bn.gamma, pre.bn.beta,
                              pre.bn.running_mean.copy(), pre.bn.running_var.copy(),
                              training=False)).data
    assert np.array_equal(got, ref)


# ---------------------------------------------------------------------------
# local path


def test_convnext_near_identity_at_init(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    x = Tensor(rng.normal(0, 1, (1, 4, 6, 6)).astype(np.float32))
    y = blk.convnext_local(x).data
    assert np.abs(y - x.data).max() <= 1e-4 * np.abs(x.data).max()


def test_convnext_zero_input_zero_output(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    x = Tensor(np.zeros((1, 4, 5, 5), np.float32))
    assert np.all(blk.convnext_local(x).data == 0.0)


def test_convnext_internal_width_is_expand_times_c(rng):
    cfg = BlockConfig(channels=6, convnext_expand=4)
    blk = MambaNeXtBlock(cfg, rng)
    assert blk.convnext.pw1.w.shape[0] == 24
    assert blk.convnext.pw2.w.shape[1] == 24


# ---------------------------------------------------------------------------
# global path


def test_mamba_global_preserves_shape(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    x = Tensor(rng.normal(0, 1, (2, 4, 3, 5)).astype(np.float32))
    assert blk.mamba_global(x).shape == (2, 4, 3, 5)


def test_mamba_global_single_token(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    x = Tensor(rng.normal(0, 1, (1, 4, 1, 1)).astype(np.float32))
    assert blk.mamba_global(x).shape == (1, 4, 1, 1)


def test_mamba_global_matches_op_composition(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    mg = blk.mamba
    x = Tensor(rng.normal(0, 1, (1, 4, 4, 4)).astype(np.float32))
    got = blk.mamba_global(x).data

    z = T.silu(mg.dw(mg.in_proj(mg.ln_in(x))))
    seq = T.permute(T.flatten_hw(z), (0, 2, 1))
    y = scan_sequence(seq, mg.scan.weights, chunk=mg.chunk)
    z2 = T.unflatten_hw(T.permute(y, (0, 2, 1)), 4, 4)
    ref = mg.out_proj(mg.ln_out(z2)).data
    assert np.array_equal(got, ref)


# ---------------------------------------------------------------------------
# gated fusion


def test_resgate_closed_gate_reduces_to_norm_path(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    blk.resgate.proj_gate.w.data[:] = 0.0
    blk.resgate.proj_gate.b.data[:] = 0.0
    fg = Tensor(rng.normal(0, 1, (1, 4, 3, 3)).astype(np.float32))
    xp = Tensor(rng.normal(0, 1, (1, 4, 3, 3)).astype(np.float32))
    y, f_final = blk.resgate_fuse(fg, xp)
    tilde = fg.data + xp.data
    ln = T.layer_norm(Tensor(tilde), blk.resgate.ln.gamma, blk.resgate.ln.beta).data
    # Closed gate: y collapses to the normalized tensor, final = residual + y.
    assert np.abs(y.data - ln).max() < 1e-6
    assert np.abs(f_final.data - (tilde + ln)).max() < 1e-6


def test_resgate_zero_inputs_zero_output(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    z = Tensor(np.zeros((1, 4, 3, 3), np.float32))
    _, f_final = blk.resgate_fuse(z, z)
    assert np.all(f_final.data == 0.0)


def test_resgate_matches_op_composition(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    rg = blk.resgate
    fg = Tensor(rng.normal(0, 1, (2, 4, 3, 3)).astype(np.float32))
    xp = Tensor(rng.normal(0, 1, (2, 4, 3, 3)).astype(np.float32))
    _, f_final = blk.resgate_fuse(fg, xp)
    t = T.add(fg, xp)
    f = T.layer_norm(t, rg.ln.gamma, rg.ln.beta)
    u = T.conv2d(f, rg.proj_value.w, rg.proj_value.b)
    v = T.conv2d(f, rg.proj_gate.w, rg.proj_gate.b)
    z = T.mul(T.gelu(T.add(T.conv2d(u, rg.dw.w, rg.dw.b, padding=1, groups=8), u)), v)
    y = T.add(f, T.conv2d(z, rg.proj_out.w, rg.proj_out.b))
    ref = T.add(t, y).data
    assert np.array_equal(f_final.data, ref)


# ---------------------------------------------------------------------------
# whole block


@pytest.mark.parametrize("mode", BLOCK_MODES)
def test_block_modes_preserve_shape(mode, rng):
    blk = MambaNeXtBlock(small_cfg(mode=mode), rng).eval()
    x = Tensor(rng.normal(0, 1, (2, 4, 6, 6)).astype(np.float32))
    assert blk(x).shape == (2, 4, 6, 6)


def test_block_mode_weight_scopes(rng):
    only_conv = MambaNeXtBlock(small_cfg(mode="convnext_only"), rng)
    names = [n for n, _ in only_conv.named_params()]
    assert not any(".scan." in n or "resgate" in n or "mamba" in n for n in names)
    only_gate = MambaNeXtBlock(small_cfg(mode="resgate_only"), rng)
    names = [n for n, _ in only_gate.named_params()]
    assert not any("convnext" in n for n in names)
    assert any(".scan." in n for n in names)


def test_block_output_bounded_at_init(rng):
    blk = MambaNeXtBlock(small_cfg(), rng).eval()
    x = Tensor(rng.normal(0, 1, (1, 4, 8, 8)).astype(np.float32))
    y = blk(x).data
    assert np.isfinite(y).all()
    assert np.linalg.norm(y) <= 10.0 * np.linalg.norm(x.data)


def test_block_gradient_fd(rng):
    blk = MambaNeXtBlock(small_cfg(), rng)
    blk.train(True)
    x = rng.normal(0, 1, (1, 4, 6, 6)).astype(np.float32)
    fd_gradcheck(lambda xx: blk(xx), [x], probes=10)


def test_block_gradient_reaches_all_params(rng):
    blk = MambaNeXtBlock(small_cfg(), rng)
    blk.train(True)
    x = Tensor(rng.normal(0, 1, (1, 4, 6, 6)).astype(np.float32))
    with GradTape() as tape:
        y = blk(x)
        loss = T.sum_(T.mul(y, y))
        backward(tape, loss)
    missing = [n for n, p in blk.named_params() if p.grad is None]
    assert missing == []


# ---------------------------------------------------------------------------
# vision clue merge


def test_vcm_shape_contract(rng):
    vcm = VisionClueMerge(32, rng).eval()
    x = Tensor(rng.normal(0, 1, (1, 32, 64, 64)).astype(np.float32))
    assert vcm(x).shape == (1, 64, 32, 32)


def test_vcm_rejects_odd_dims(rng):
    vcm = VisionClueMerge(4, rng)
    with pytest.raises(ShapeError, match="even"):
        vcm(Tensor(np.zeros((1, 4, 5, 6), np.float32)))


def test_vcm_constant_input_constant_output(rng):
    vcm = VisionClueMerge(3, rng).eval()
    x = Tensor(np.full((1, 3, 8, 8), 2.5, np.float32))
    y = vcm(x).data
    for c in range(y.shape[1]):
        assert np.allclose(y[0, c], y[0, c, 0, 0], atol=1e-6)


def test_vcm_impulse_hits_even_even_phase_only(rng):
    vcm = VisionClueMerge(2, rng).eval()
    zero = Tensor(np.zeros((1, 2, 6, 6), np.float32))
    bump = np.zeros((1, 2, 6, 6), np.float32)
    bump[0, :, 0, 0] = 1.0
    diff = vcm(Tensor(bump)).data - vcm(zero).data
    nz = np.nonzero(np.abs(diff).sum(axis=(0, 1)))
    assert set(zip(*nz)) == {(0, 0)}
    # Phase-split oracle: the impulse lives only in the (even, even) phase.
    assert np.abs(T.phase_slice(Tensor(bump), 0, 0).data).sum() > 0
    for off in ((0, 1), (1, 0), (1, 1)):
        assert np.abs(T.phase_slice(Tensor(bump), *off).data).sum() == 0


def test_vcm_has_no_normalization_params(rng):
    vcm = VisionClueMerge(4, rng)
    names = [n for n, _ in vcm.named_params()] + [n for n, _ in vcm.named_buffers()]
    assert names, "merge unit has no parameters?"
    for n in names:
        assert not n.endswith(("gamma", "beta", "running_mean", "running_var")), n


# ---------------------------------------------------------------------------
# stem


def test_stem_stride_contract(rng):
    stem = Stem(16, rng).eval()
    assert stem(Tensor(np.zeros((1, 3, 640, 640), np.float32))).shape == (1, 16, 160, 160)
    assert stem(Tensor(np.zeros((1, 3, 160, 160), np.float32))).shape == (1, 16, 40, 40)


def test_stem_zero_image_zero_features(rng):
    stem = Stem(8, rng).eval()
    y = stem(Tensor(np.zeros((1, 3, 32, 32), np.float32))).data
    assert np.all(y == 0.0)


def test_stem_rejects_indivisible(rng):
    stem = Stem(8, rng)
    with pytest.raises(ShapeError, match="divisible by 4"):
        stem(Tensor(np.zeros((1, 3, 30, 32), np.float32)))


# ---------------------------------------------------------------------------
# pooling pyramid


def test_sppf_constant_and_shape(rng):
    sppf = SPPF(8, rng).eval()
    x = Tensor(np.full((1, 8, 12, 12), 1.5, np.float32))
    y = sppf(x)
    assert y.shape == (1, 8, 12, 12)
    for c in range(8):
        assert np.allclose(y.data[0, c], y.data[0, c, 0, 0], atol=1e-5)


def test_chained_pools_spread_peak_to_13sq():
    # Pooling-geometry oracle: three chained k=5 stride-1 pools turn one
    # peak into a (3*(k-1)+1)^2 = 13x13 plateau.
    x = np.zeros((1, 1, 32, 32), np.float32)
    x[0, 0, 16, 16] = 1.0
    y = Tensor(x)
    for _ in range(3):
        y = T.maxpool2d(y, 5, stride=1, padding=2)
    plateau = y.data[0, 0] == 1.0
    assert plateau.sum() == 13 * 13
    assert plateau[16 - 6:16 + 7, 16 - 6:16 + 7].all()


def test_sppf_peak_influence_region(rng):
    sppf = SPPF(4, rng).eval()
    flat = np.zeros((1, 4, 32, 32), np.float32)
    peak = flat.copy()
    peak[0, :, 16, 16] = 3.0
    diff = np.abs(sppf(Tensor(peak)).data - sppf(Tensor(flat)).data).sum(axis=(0, 1))
    nz = diff > 1e-7
    assert nz.sum() == 13 * 13
    assert nz[16 - 6:16 + 7, 16 - 6:16 + 7].all()
