"""Bidirectional multi-scale fusion pyramid.

Top-down pass first: the deepest level is upsampled into the middle level
(T4), which is upsampled again into the shallow level (P3). A bottom-up
pass then rebuilds the deeper levels: P4 fuses three branches (downsampled
P3, the same-level lateral, and T4 carrying deep context) and P5 fuses
downsampled P4 with the deepest lateral. Every fusion node is a pointwise
width adapter followed by hybrid block(s).

Downsampling is a 3x3 stride-2 conv+BN+SiLU by default; a 2x2 stride-2
max-pool variant sits behind ``mode="pool"`` for the ablation axis. Both
preserve channel count, so switching modes changes only the conv+BN
parameters.
"""

from __future__ import annotations

from dataclasses import replace

from . import tensor as T
from .blocks import BlockConfig, MambaNeXtBlock
from .nn import ConvBNAct, Module, ModuleList
from .tensor import ShapeError, Tensor


class Downsample(Module):
    """Halve spatial dims, keep channels: stride-2 conv (+BN+SiLU) or max-pool."""

    def __init__(self, c, rng, mode: str = "conv"):
        super().__init__()
        if mode not in ("conv", "pool"):
            raise ValueError(f"downsample mode must be 'conv' or 'pool', got {mode!r}")
        self.mode = mode
        if mode == "conv":
            self.conv = ConvBNAct(c, c, 3, rng, stride=2)

    def forward(self, x):
        _, _, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"downsample needs even spatial dims, got {h}x{w}")
        if self.mode == "conv":
            return self.conv(x)
        return T.maxpool2d(x, 2, stride=2)


def _node(block_cfg: BlockConfig, channels: int, depth: int, rng) -> ModuleList:
    cfg = replace(block_cfg, channels=channels)
    return ModuleList([MambaNeXtBlock(cfg, rng) for _ in range(depth)])


class MAFPN(Module):
    """Fusion neck over backbone taps (C3, C4, C5) at strides 8/16/32.

    in_channels / out_channels are (c3, c4, c5) / (p3, p4, p5) widths.
    """

    def __init__(self, in_channels, out_channels, block_cfg: BlockConfig, rng,
                 depth: int = 1, downsample_mode: str = "conv"):
        super().__init__()
        c3, c4, c5 = in_channels
        w3, w4, w5 = out_channels
        self.out_channels = tuple(out_channels)
        self.lat3 = ConvBNAct(c3, w3, 1, rng)
        self.lat4 = ConvBNAct(c4, w4, 1, rng)
        self.lat5 = ConvBNAct(c5, w5, 1, rng)

        self.fuse_t4 = ConvBNAct(w5 + w4, w4, 1, rng)
        self.node_t4 = _node(block_cfg, w4, depth, rng)
        self.fuse_p3 = ConvBNAct(w4 + w3, w3, 1, rng)
        self.node_p3 = _node(block_cfg, w3, depth, rng)

        self.down3 = Downsample(w3, rng, downsample_mode)
        self.fuse_p4 = ConvBNAct(w3 + w4 + w4, w4, 1, rng)
        self.node_p4 = _node(block_cfg, w4, depth, rng)
        self.down4 = Downsample(w4, rng, downsample_mode)
        self.fuse_p5 = ConvBNAct(w4 + w5, w5, 1, rng)
        self.node_p5 = _node(block_cfg, w5, depth, rng)

    def forward(self, c3, c4, c5, disable_bottom_up: bool = False):
        """Fuse the pyramid; returns (p3, p4, p5).

        disable_bottom_up zeroes the downsampling branches (debug aid for
        verifying the bottom-up pathway carries gradient).
        """
        for hi, lo in ((c3, c4), (c4, c5)):
            if hi.shape[2] != 2 * lo.shape[2] or hi.shape[3] != 2 * lo.shape[3]:
                raise ShapeError(
                    f"pyramid levels must halve: got {hi.shape[2:]} above {lo.shape[2:]}"
                )
        l3, l4, l5 = self.lat3(c3), self.lat4(c4), self.lat5(c5)

        t4 = self.node_t4(self.fuse_t4(T.concat_channels(
            [T.upsample_nearest2x(l5), l4])))
        p3 = self.node_p3(self.fuse_p3(T.concat_channels(
            [T.upsample_nearest2x(t4), l3])))

        d3 = self.down3(p3)
        d4_in = Tensor(0.0 * d3.data) if disable_bottom_up else d3
        p4 = self.node_p4(self.fuse_p4(T.concat_channels([d4_in, t4, l4])))
        d4 = self.down4(p4)
        d5_in = Tensor(0.0 * d4.data) if disable_bottom_up else d4
        p5 = self.node_p5(self.fuse_p5(T.concat_channels([d5_in, l5])))
        return p3, p4, p5
