"""Composite building blocks: the hybrid local/global block, the
normalization-free downsampler, the stem, and the pooling pyramid.

The hybrid block runs a pre-processing pointwise stage, a large-kernel
depthwise ConvNeXt-style local path, a selective-scan global path over the
flattened spatial sequence, and a gated fusion stage, joined by residual
connections. Four wirings are selectable (see MambaNeXtBlock.forward).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ConvBNAct, LayerNorm2d, Module
from .scan import make_scan_weights, scan_sequence
from .tensor import ShapeError, Tensor

BLOCK_MODES = ("resgate_first", "convnext_first", "convnext_only", "resgate_only")


@dataclass
class BlockConfig:
    """Hyperparameters of one hybrid block at a given channel width."""

    channels: int
    d_state: int = 16               # per-channel hidden-state width of the scan
    ssm_ratio: float = 2.0          # scan inner width = ssm_ratio * channels
    mlp_ratio: int = 4              # gate hidden width = mlp_ratio * channels
    conv_dim: int = 3               # depthwise kernel ahead of the scan
    convnext_kernel: int = 7        # depthwise kernel of the local path
    convnext_expand: int = 4        # pointwise expansion inside the local path
    layer_scale_init: float = 1e-6  # residual scaling of the local path
    mode: str = "resgate_first"
    scan_chunk: int = 64

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.d_state < 1:
            raise ValueError(f"d_state must be >= 1, got {self.d_state}")
        for name in ("ssm_ratio", "mlp_ratio", "convnext_expand"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("conv_dim", "convnext_kernel"):
            if getattr(self, name) % 2 != 1:
                raise ValueError(f"{name} must be odd, got {getattr(self, name)}")
        if self.mode not in BLOCK_MODES:
            raise ValueError(f"mode must be one of {BLOCK_MODES}, got {self.mode!r}")

    @property
    def inner_width(self) -> int:
        return int(self.ssm_ratio * self.channels)


class ConvNeXtLocal(Module):
    """Large-kernel depthwise conv -> BN -> expand/GELU/contract, added back
    through a per-channel layer-scale that starts near zero."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        c = cfg.channels
        e = cfg.convnext_expand * c
        self.dw = Conv2d(c, c, cfg.convnext_kernel, rng, groups=c, bias=False)
        self.bn = BatchNorm2d(c)
        self.pw1 = Conv2d(c, e, 1, rng)
        self.pw2 = Conv2d(e, c, 1, rng)
        self.gamma = self.param(
            "gamma", np.full(c, cfg.layer_scale_init, np.float32))

    def forward(self, x):
        f = self.pw2(T.gelu(self.pw1(self.bn(self.dw(x)))))
        return T.add(x, T.mul(f, T.reshape(self.gamma, (1, -1, 1, 1))))


class MambaGlobal(Module):
    """LN -> pointwise widen -> depthwise -> SiLU -> flatten to tokens ->
    selective scan -> contract -> LN -> pointwise back to block width."""

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        c, d = cfg.channels, cfg.inner_width
        self.chunk = cfg.scan_chunk
        self.ln_in = LayerNorm2d(c)
        self.in_proj = Conv2d(c, d, 1, rng)
        self.dw = Conv2d(d, d, cfg.conv_dim, rng, groups=d)
        self.scan = ScanWeightsHolder(d, cfg.d_state, rng)
        self.ln_out = LayerNorm2d(d)
        self.out_proj = Conv2d(d, c, 1, rng)

    def forward(self, x):
        n, _, h, w = x.shape
        z = T.silu(self.dw(self.in_proj(self.ln_in(x))))
        seq = T.permute(T.flatten_hw(z), (0, 2, 1))          # [N, L, width]
        y = scan_sequence(seq, self.scan.weights, chunk=self.chunk)
        z = T.unflatten_hw(T.permute(y, (0, 2, 1)), h, w)
        return self.out_proj(self.ln_out(z))


class ScanWeightsHolder(Module):
    """Registers the scan projections under a 'scan.*' name scope."""

    def __init__(self, width, state_dim, rng):
        super().__init__()
        w = make_scan_weights(width, state_dim, rng)
        for name in ("w_drive", "b_drive", "w_gain", "b_gain",
                     "w_decay", "b_decay", "out_mix"):
            self.param(name, getattr(w, name))
        self.weights = w


class ResGate(Module):
    """Gated MLP fusion with two residuals.

    Given t: f = LN(t); u, v are parallel pointwise expansions of f;
    z = GELU(DWConv(u) + u) * v; y = f + proj_back(z); output t + y.
    """

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        c = cfg.channels
        m = cfg.mlp_ratio * c
        self.ln = LayerNorm2d(c)
        self.proj_gate = Conv2d(c, m, 1, rng)    # produces v, the gate
        self.proj_value = Conv2d(c, m, 1, rng)   # produces u, the value path
        self.dw = Conv2d(m, m, 3, rng, groups=m)
        self.proj_out = Conv2d(m, c, 1, rng)

    def forward(self, t):
        f = self.ln(t)
        u = self.proj_value(f)
        v = self.proj_gate(f)
        z = T.mul(T.gelu(T.add(self.dw(u), u)), v)
        y = T.add(f, self.proj_out(z))
        return T.add(t, y)


class MambaNeXtBlock(Module):
    """The hybrid block. Channel count and spatial size are preserved.

    Wirings (x' is the pre-processed input):
      resgate_first  (default): gate(scan(local(x')) + x')
      convnext_first:           local(gate(scan(x') + x'))
      convnext_only:            local(x')           -- no scan, no gate
      resgate_only:             gate(scan(x') + x') -- no local path
    The default is the fully-wired order; the names distinguish which side
    of the scan the two refinement stages sit on.
    """

    def __init__(self, cfg: BlockConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.pre = ConvBNAct(cfg.channels, cfg.channels, 1, rng)
        if cfg.mode != "resgate_only":
            self.convnext = ConvNeXtLocal(cfg, rng)
        if cfg.mode != "convnext_only":
            self.mamba = MambaGlobal(cfg, rng)
            self.resgate = ResGate(cfg, rng)

    def preprocess(self, x):
        """SiLU(BN(pointwise(x))); channel count preserved."""
        return self.pre(x)

    def convnext_local(self, xp):
        return self.convnext(xp)

    def mamba_global(self, f_local):
        return self.mamba(f_local)

    def resgate_fuse(self, f_global, xp):
        """Residual join with the pre-processed input, then the gate unit.

        Returns (y, f_final) where f_final = (f_global + xp) + y.
        """
        t = T.add(f_global, xp)
        f = self.resgate.ln(t)
        u = self.resgate.proj_value(f)
        v = self.resgate.proj_gate(f)
        z = T.mul(T.gelu(T.add(self.resgate.dw(u), u)), v)
        y = T.add(f, self.resgate.proj_out(z))
        return y, T.add(t, y)

    def forward(self, x):
        xp = self.pre(x)
        mode = self.cfg.mode
        if mode == "convnext_only":
            return self.convnext(xp)
        if mode == "resgate_only":
            return self.resgate(T.add(self.mamba(xp), xp))
        if mode == "convnext_first":
            return self.convnext(self.resgate(T.add(self.mamba(xp), xp)))
        f_global = self.mamba(self.convnext(xp))
        _, f_final = self.resgate_fuse(f_global, xp)
        return f_final


class VisionClueMerge(Module):
    """Downsample by splitting into the four stride-2 spatial phases.

    Each phase is compressed by its own pointwise conv (C -> C), the four
    results are concatenated (4C) and reduced to 2C by a final pointwise
    conv. Deliberately free of any normalization. Phase order is fixed as
    (even/even, even/odd, odd/even, odd/odd) so saved weights stay portable.
    """

    def __init__(self, cin, rng):
        super().__init__()
        self.pw_ee = Conv2d(cin, cin, 1, rng)
        self.pw_eo = Conv2d(cin, cin, 1, rng)
        self.pw_oe = Conv2d(cin, cin, 1, rng)
        self.pw_oo = Conv2d(cin, cin, 1, rng)
        self.reduce = Conv2d(4 * cin, 2 * cin, 1, rng)

    def forward(self, x):
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"vision clue merge needs even spatial dims, got {h}x{w}")
        parts = [
            self.pw_ee(T.phase_slice(x, 0, 0)),
            self.pw_eo(T.phase_slice(x, 0, 1)),
            self.pw_oe(T.phase_slice(x, 1, 0)),
            self.pw_oo(T.phase_slice(x, 1, 1)),
        ]
        return self.reduce(T.concat_channels(parts))


class Stem(Module):
    """Two stride-2 3x3 conv+BN+SiLU layers: 3 -> cout/2 -> cout, net stride 4."""

    def __init__(self, cout, rng):
        super().__init__()
        self.conv1 = ConvBNAct(3, cout // 2, 3, rng, stride=2)
        self.conv2 = ConvBNAct(cout // 2, cout, 3, rng, stride=2)

    def forward(self, x):
        _, _, h, w = x.shape
        if h % 4 or w % 4:
            raise ShapeError(f"stem needs input divisible by 4, got {h}x{w}")
        return self.conv2(self.conv1(x))


class SPPF(Module):
    """Chained same-kernel max pools: pointwise to C/2, three k x k stride-1
    pools, concat of the four maps (2C total), pointwise back to C."""

    def __init__(self, c, rng, kernel: int = 5):
        super().__init__()
        self.kernel = kernel
        self.cv1 = ConvBNAct(c, c // 2, 1, rng)
        self.cv2 = ConvBNAct(2 * c, c, 1, rng)

    def forward(self, x):
        k = self.kernel
        y0 = self.cv1(x)
        y1 = T.maxpool2d(y0, k, stride=1, padding=k // 2)
        y2 = T.maxpool2d(y1, k, stride=1, padding=k // 2)
        y3 = T.maxpool2d(y2, k, stride=1, padding=k // 2)
        return self.cv2(T.concat_channels([y0, y1, y2, y3]))
