"""Parameter and FLOP accounting, plus the inference benchmark.

Parameter counts are exact learnable-scalar counts (batch-norm running
statistics are state, not parameters). FLOPs use the 2*MACs convention for
convolutions and linear maps (bias adds ignored) plus 6*L*width*state_dim
per scan invocation, measured by metering one real forward pass at the
configured input size, so the count reflects exactly what runs.

The published full-size configuration reports 7.1M parameters / 22.4G
FLOPs at 640x640; counts here are reported alongside that reference, not
asserted against it, since the published per-stage widths are not public
and the scan projections dominate the total.
"""

from __future__ import annotations

import time

import numpy as np

from .config import ModelConfig
from .model import Detector, build_model
from .tensor import Tensor, flop_meter
from .weights import store_from_model

REFERENCE_PARAMS = "7.1M"
REFERENCE_FLOPS = "22.4G"

BENCH_CSV_HEADER = "config,input,mean_ms,p95_ms,fps"


def count_model_params(model: Detector) -> int:
    return store_from_model(model).num_learnable()


def count_params_flops(cfg: ModelConfig, model: Detector | None = None):
    """(learnable parameter count, forward FLOPs at cfg.input_size)."""
    if model is None:
        model = build_model(cfg)
    model.eval()
    params = count_model_params(model)
    x = Tensor(np.zeros((1, 3, cfg.input_size, cfg.input_size), np.float32))
    with flop_meter() as meter:
        model(x)
    return params, meter.total


def format_count(n: float, unit: str = "") -> str:
    """1-decimal M/G formatting: 7.1M, 22.4G."""
    if n >= 1e9:
        return f"{n / 1e9:.1f}G{unit}"
    if n >= 1e6:
        return f"{n / 1e6:.1f}M{unit}"
    if n >= 1e3:
        return f"{n / 1e3:.1f}K{unit}"
    return f"{n:.0f}{unit}"


def bench(cfg: ModelConfig, model: Detector | None = None, n_warmup: int = 20,
          n_iter: int = 100, input_size=None, config_name: str = "default"):
    """Batch-1 eval-mode forward latency.

    Returns a dict with mean/median/p95 latency (ms) and FPS (1000/mean),
    plus a preformatted CSV line. Absolute numbers are machine-specific.
    """
    if model is None:
        model = build_model(cfg)
    model.eval()
    size = input_size or cfg.input_size
    x = Tensor(np.zeros((1, 3, size, size), np.float32))
    for _ in range(n_warmup):
        model(x)
    samples = []
    for _ in range(max(n_iter, 1)):
        t0 = time.perf_counter()
        model(x)
        samples.append((time.perf_counter() - t0) * 1000.0)
    samples = np.array(samples)
    mean_ms = float(samples.mean())
    stats = {
        "config": config_name,
        "input": size,
        "mean_ms": mean_ms,
        "median_ms": float(np.median(samples)),
        "p95_ms": float(np.percentile(samples, 95)),
        "fps": 1000.0 / mean_ms,
        "n_iter": len(samples),
    }
    stats["csv"] = (f"{config_name},{size},{stats['mean_ms']:.2f},"
                    f"{stats['p95_ms']:.2f},{stats['fps']:.2f}")
    return stats
