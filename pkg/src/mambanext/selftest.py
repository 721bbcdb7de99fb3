"""Built-in verification suites behind the `mnx selftest` command.

Five suites: the scan-vs-oracle sweep, finite-difference gradient checks,
NMS against a brute-force reference, shape contracts of a small model, and
the audit that the merge downsampler carries no normalization parameters.
Each returns (name, cases, failures); any failure flips the process exit
code. A deliberate perturbation hook in the scan module lets tests confirm
the oracle suite actually detects corruption.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .head import Detection, iou_matrix, nms
from .model import build_model
from .scan import ScanParams, selective_scan, selective_scan_reference
from .tensor import GradTape, Tensor, backward
from .weights import store_from_model


class SuiteResult:
    def __init__(self, name):
        self.name = name
        self.cases = 0
        self.failures = []

    def check(self, ok: bool, what: str):
        self.cases += 1
        if not ok:
            self.failures.append(what)

    @property
    def passed(self):
        return not self.failures


def _random_params(rng, L, width, state_dim):
    return ScanParams(
        drive=Tensor(rng.normal(0, 1, (L, width, state_dim)).astype(np.float32)),
        gain=Tensor(rng.normal(0, 0.1, (L, width, state_dim)).astype(np.float32)),
        decay=Tensor(rng.uniform(0.0, 1.5, (L, width)).astype(np.float32)),
        h_init=Tensor(rng.normal(0, 1, (width, state_dim)).astype(np.float32)),
    )


def scan_oracle_suite(n_cases: int = 30, seed: int = 0) -> SuiteResult:
    res = SuiteResult("scan-oracle")
    rng = np.random.default_rng(seed)
    for k in range(n_cases):
        L = int(rng.integers(1, 257))
        width = int(rng.integers(1, 9))
        state_dim = int(rng.choice([8, 16, 32]))
        p = _random_params(rng, L, width, state_dim)
        ref = selective_scan_reference(p).data
        opt = selective_scan(p, chunk=int(rng.choice([1, 7, 64]))).data
        rel = np.abs(opt - ref) / np.maximum(np.abs(ref), 1.0)
        res.check(float(rel.max()) < 1e-5,
                  f"case {k}: rel dev {rel.max():.2e} (L={L}, w={width}, s={state_dim})")
    # Pinned hand case: decay 0, gain 0.5, drive 1 -> states 1, 2.5, 4.75.
    p = ScanParams(drive=Tensor(np.ones((3, 1, 1), np.float32)),
                   gain=Tensor(np.full((3, 1, 1), 0.5, np.float32)),
                   decay=Tensor(np.zeros((3, 1), np.float32)),
                   h_init=Tensor(np.zeros((1, 1), np.float32)))
    out = selective_scan(p, chunk=2).data.reshape(-1)
    res.check(np.array_equal(out, np.array([1.0, 2.5, 4.75], np.float32)),
              f"hand case gave {out.tolist()}")
    return res


def gradient_suite(seed: int = 0) -> SuiteResult:
    res = SuiteResult("fd-gradient")
    rng = np.random.default_rng(seed)

    def fd_check(fn, x_data, what, h=1e-3, tol=1e-3, n_probe=8):
        x = Tensor(x_data, requires_grad=True)
        with GradTape() as tape:
            out = fn(x)
            w = Tensor(rng.normal(0, 1, out.shape).astype(np.float32))
            loss = T.sum_(T.mul(out, w))
            backward(tape, loss)
        flat = x.data.reshape(-1)
        grad = x.grad.reshape(-1)
        probes = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        worst = 0.0
        for i in probes:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(np.sum(fn(Tensor(x.data)).data.astype(np.float64) * w.data))
            flat[i] = orig - h
            f_minus = float(np.sum(fn(Tensor(x.data)).data.astype(np.float64) * w.data))
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1.0)
            worst = max(worst, err)
        res.check(worst < tol, f"{what}: fd rel err {worst:.2e}")

    fd_check(T.silu, rng.normal(0, 1, (3, 5)).astype(np.float32), "silu")
    fd_check(T.gelu, rng.normal(0, 1, (4, 4)).astype(np.float32), "gelu")
    fd_check(lambda x: T.conv2d(x, _CONV_W), _CONV_X.copy(), "conv2d")
    fd_check(lambda x: T.layer_norm(x, _LN_G, _LN_B),
             rng.normal(0, 1, (2, 6, 3, 3)).astype(np.float32), "layer_norm")
    fd_check(lambda x: selective_scan(ScanParams(
        drive=x, gain=Tensor(np.zeros_like(x.data)),
        decay=Tensor(np.zeros(x.shape[:-1], np.float32)),
        h_init=Tensor(np.zeros(x.shape[-2:], np.float32)))),
        rng.normal(0, 1, (12, 3, 4)).astype(np.float32), "scan-drive")
    return res


_CONV_RNG = np.random.default_rng(7)
_CONV_X = _CONV_RNG.normal(0, 1, (1, 3, 6, 6)).astype(np.float32)
_CONV_W = Tensor(_CONV_RNG.normal(0, 0.5, (4, 3, 3, 3)).astype(np.float32))
_LN_G = Tensor(np.ones(6, np.float32))
_LN_B = Tensor(np.zeros(6, np.float32))


def nms_brute_force(dets, iou_thresh=0.65, class_aware=True):
    """O(n^2) reference: independent ordering logic, pairwise suppression."""
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].class_id, i))
    keep = []
    for i in order:
        ok = True
        for j in keep:
            if class_aware and dets[i].class_id != dets[j].class_id:
                continue
            if iou_matrix(np.array(dets[i].box), np.array(dets[j].box))[0, 0] > iou_thresh:
                ok = False
                break
        if ok:
            keep.append(i)
    return [dets[i] for i in keep]


def random_detections(rng, n, n_classes=4, span=100.0):
    dets = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, span, 2)
        w, h = rng.uniform(2, span / 2, 2)
        dets.append(Detection(int(rng.integers(n_classes)),
                              float(rng.uniform(0.01, 1.0)),
                              (x1, y1, x1 + w, y1 + h)))
    return dets


def nms_suite(n_cases: int = 100, seed: int = 3) -> SuiteResult:
    res = SuiteResult("nms-oracle")
    rng = np.random.default_rng(seed)
    for k in range(n_cases):
        dets = random_detections(rng, int(rng.integers(0, 60)))
        got = nms(dets)
        ref = nms_brute_force(dets)
        same = len(got) == len(ref) and all(a is b for a, b in zip(got, ref))
        res.check(same, f"case {k}: {len(got)} kept vs oracle {len(ref)}")
    return res


def shape_suite() -> SuiteResult:
    res = SuiteResult("shape")
    cfg = ModelConfig(input_size=96, width_mult=0.125, num_classes=4,
                      stage_depths=(1, 1, 1, 1))
    model = build_model(cfg).eval()
    x = Tensor(np.zeros((1, 3, 96, 96), np.float32))
    p3, p4, p5 = model.pyramid(x)
    res.check(p3.shape[2:] == (12, 12), f"P3 grid {p3.shape[2:]}")
    res.check(p4.shape[2:] == (6, 6), f"P4 grid {p4.shape[2:]}")
    res.check(p5.shape[2:] == (3, 3), f"P5 grid {p5.shape[2:]}")
    preds = model.head((p3, p4, p5))
    for lvl, (cls, reg) in enumerate(preds):
        res.check(cls.shape[1] == 4, f"level {lvl} classes {cls.shape[1]}")
        res.check(reg.shape[1] == 4, f"level {lvl} reg channels {reg.shape[1]}")
        res.check(bool((reg.data > 0).all()), f"level {lvl} reg positivity")
    return res


def vcm_audit_suite() -> SuiteResult:
    """No normalization parameter may live under any merge-unit scope."""
    res = SuiteResult("vcm-audit")
    cfg = ModelConfig(input_size=64, width_mult=0.125, num_classes=2,
                      stage_depths=(1, 1, 1, 1))
    model = build_model(cfg)
    store = store_from_model(model)
    norm_markers = ("gamma", "beta", "running_mean", "running_var")
    merge_names = [n for n in store.names() if ".merges." in n or n.startswith("merges.")]
    res.check(len(merge_names) > 0, "no merge-unit parameters found at all")
    for n in merge_names:
        res.check(not n.endswith(norm_markers), f"normalization parameter {n}")
    return res


ALL_SUITES = (scan_oracle_suite, gradient_suite, nms_suite, shape_suite,
              vcm_audit_suite)


def run_selftest(verbose: bool = True) -> bool:
    """Run every suite; prints one line per suite; True when all pass."""
    all_ok = True
    for suite_fn in ALL_SUITES:
        res = suite_fn()
        status = "PASS" if res.passed else "FAIL"
        if verbose:
            print(f"[{status}] {res.name}: {res.cases} cases, "
                  f"{len(res.failures)} failures")
            for f in res.failures[:5]:
                print(f"    {f}")
        all_ok = all_ok and res.passed
    return all_ok
