"""Full detector assembly: stem -> staged backbone with merge downsampling
-> SPPF -> fusion neck -> decoupled head.

Backbone stages run at strides 4/8/16/32; the taps C3/C4/C5 are the outputs
of stages 2, 3, and 4 (strides 8/16/32). Initialization is fully determined
by the config seed, so identical (seed, config) pairs build bit-identical
models.
"""

from __future__ import annotations

import numpy as np

from .blocks import MambaNeXtBlock, SPPF, Stem, VisionClueMerge
from .config import ModelConfig
from .head import DetectHead
from .neck import MAFPN
from .nn import Module, ModuleList


class Detector(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        widths = cfg.effective_widths()
        self.stem = Stem(widths[0], rng)
        stages = []
        merges = []
        for i, (w, depth) in enumerate(zip(widths, cfg.stage_depths)):
            stages.append(ModuleList(
                [MambaNeXtBlock(cfg.block_config(w), rng) for _ in range(depth)]))
            if i < 3:
                merges.append(VisionClueMerge(w, rng))
        self.stages = ModuleList(stages)
        self.merges = ModuleList(merges)
        self.sppf = SPPF(widths[3], rng)
        self.neck = MAFPN(widths[1:], cfg.neck_widths(), cfg.block_config(widths[1]),
                          rng, depth=cfg.neck_depth,
                          downsample_mode=cfg.downsample_mode)
        self.head = DetectHead(cfg.neck_widths(), cfg.num_classes, rng)

    def backbone(self, x):
        """Image [N,3,H,W] -> (C3, C4, C5) taps at strides 8/16/32."""
        x = self.stem(x)
        taps = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                taps.append(x)
            if i < 3:
                x = self.merges[i](x)
        taps[-1] = self.sppf(taps[-1])
        return tuple(taps)

    def pyramid(self, x):
        """Image -> fused (P3, P4, P5)."""
        c3, c4, c5 = self.backbone(x)
        return self.neck(c3, c4, c5)

    def forward(self, x):
        """Image -> per-level (cls_logits, box_reg) head outputs."""
        return self.head(self.pyramid(x))


def build_model(cfg: ModelConfig, rng_seed=None) -> Detector:
    """Deterministically construct and initialize a detector.

    The seed (cfg.seed unless overridden) drives a PCG64 stream consumed in
    a fixed construction order, so equal seeds give bit-identical weights.
    """
    seed = cfg.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    return Detector(cfg, rng)
