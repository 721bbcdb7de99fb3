"""mambanext: a CNN/state-space hybrid object detector, self-contained on a
numpy tensor engine with taped reverse-mode differentiation.

Layers of the package, bottom up:

    tensor    float32 tensors, ops, GradTape / backward
    scan      the selective-scan recurrence (reference + chunked evaluators)
    nn        Module/layer containers (conv, batch/layer norm)
    blocks    the hybrid block, merge downsampler, stem, pooling pyramid
    neck      bidirectional multi-scale fusion pyramid
    head      detection head, decoding, NMS, assignment, loss
    metrics   101-point interpolated average precision
    config    ModelConfig (JSON round-trip, strict validation)
    model     full detector assembly
    weights   .mnxw named-tensor checkpoint format
    imageio   PPM/PNG loading, letterboxing, drawing
    data      synthetic shape datasets + annotation sidecars
    train     SGD loop, prediction, dataset evaluation
    analysis  parameter/FLOP accounting, latency benchmark
    selftest  built-in verification suites
    cli       the `mnx` command
"""

from .config import ModelConfig
from .head import Detection, GroundTruthBox
from .model import Detector, build_model
from .scan import (ScanParams, ScanWeights, contract_state, project_params,
                   selective_scan, selective_scan_reference)
from .tensor import GradTape, NumericError, ShapeError, Tensor, backward
from .weights import WeightStore, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Detection", "GroundTruthBox", "Detector", "build_model",
    "ScanParams", "ScanWeights", "contract_state", "project_params",
    "selective_scan", "selective_scan_reference",
    "GradTape", "NumericError", "ShapeError", "Tensor", "backward",
    "WeightStore", "load_weights", "save_weights", "__version__",
]
