"""Input-conditioned affine recurrence: the global-context scan kernel.

Every token of a flattened feature map conditions three per-channel
parameters (an additive drive, a multiplicative state gain, and a decay
rate), and a hidden state of shape [width, state_dim] is advanced once per
token:

    h_t = exp(-decay_t) * h_{t-1} + drive_t + gain_t * h_{t-1}

which is the affine map h_t = g_t * h_{t-1} + drive_t with
g_t = exp(-decay_t) + gain_t. Output row t is the state after consuming
token t.

Two evaluators are provided. ``selective_scan_reference`` walks the
recurrence strictly sequentially in float64 and is the correctness oracle.
``selective_scan`` composes the affine maps in fixed-size chunks (compose
(g, a) after (g', a') into (g*g', g*a' + a)): within-chunk prefixes are
built with the chunk lanes vectorized, a short sequential pass carries the
state across chunks, and a final vectorized step expands every position.
Work stays linear in sequence length; the sequential Python loop shrinks to
chunk + ceil(L/chunk) iterations.

The recurrence is evaluated exactly as written; nothing bounds |g_t| below
one, so the scan is not a priori stable. Decay values are clamped to
[-20, 20] before exponentiation, and debug mode warns when |g| > 1.05 on
most elements.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DEBUG, NumericError, ShapeError, Tensor, _check, _flops_add,
    _recording, _trace, add, as_tensor, matmul, mul, reshape, sum_,
)

DECAY_CLAMP = 20.0

# Test hook: selftest's oracle suite must be able to detect a deliberately
# broken scan. Nonzero values are added to selective_scan output.
_TEST_PERTURBATION = 0.0


@dataclass
class ScanParams:
    """Per-token recurrence parameters.

    drive:  [L, width, state_dim]  (additive term)
    gain:   [L, width, state_dim]  (multiplicative feedback on the state)
    decay:  [L, width]             (exponent; broadcast over state_dim)
    h_init: [width, state_dim]     (state before the first token)

    A leading batch axis is accepted on all three sequences (and on h_init)
    for the in-model path.
    """

    drive: Tensor
    gain: Tensor
    decay: Tensor
    h_init: Tensor

    def __post_init__(self):
        d, g, dc = self.drive.shape, self.gain.shape, self.decay.shape
        if d != g or d[:-1] != dc:
            raise ShapeError(
                f"scan params disagree: drive {d}, gain {g}, decay {dc}"
            )
        if d[-3] < 1:
            raise ShapeError("scan needs at least one token")


@dataclass
class ScanWeights:
    """Projections producing ScanParams from a token sequence.

    w_drive, w_gain: [width, width*state_dim]; w_decay: [width, width];
    biases sized to each output; out_mix: [state_dim] contraction vector
    collapsing the state axis back to a per-channel feature.
    """

    w_drive: Tensor
    b_drive: Tensor
    w_gain: Tensor
    b_gain: Tensor
    w_decay: Tensor
    b_decay: Tensor
    out_mix: Tensor

    @property
    def width(self) -> int:
        return self.w_drive.shape[0]

    @property
    def state_dim(self) -> int:
        return self.out_mix.shape[0]

    def check(self):
        d, s = self.width, self.state_dim
        expect = {
            "w_drive": (d, d * s), "b_drive": (d * s,),
            "w_gain": (d, d * s), "b_gain": (d * s,),
            "w_decay": (d, d), "b_decay": (d,),
            "out_mix": (s,),
        }
        for name, shape in expect.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ShapeError(f"scan weight {name}: shape {got}, expected {shape}")


def make_scan_weights(width: int, state_dim: int, rng: np.random.Generator,
                      decay_bias: float = 1.0) -> ScanWeights:
    """Initialize scan projections.

    The recurrence multiplies the state by exp(-decay) + gain every step and
    nothing bounds that factor below one, so initialization must keep it
    there: the decay bias starts at 1.0 (exp(-1) ~ 0.37, geometric
    forgetting) and the gain/decay projections start ~25x below Kaiming
    scale so fresh weights keep the per-step factor well under 1. The drive
    projection is additive and safe at Kaiming-uniform fan-in. out_mix
    starts uniform at 1/state_dim.
    """
    bound = float(np.sqrt(6.0 / width))
    small = 0.1 / float(np.sqrt(width))

    def u(b, *shape):
        return Tensor(rng.uniform(-b, b, shape).astype(np.float32),
                      requires_grad=True)
    return ScanWeights(
        w_drive=u(bound, width, width * state_dim),
        b_drive=Tensor(np.zeros(width * state_dim, np.float32), requires_grad=True),
        w_gain=u(small, width, width * state_dim),
        b_gain=Tensor(np.zeros(width * state_dim, np.float32), requires_grad=True),
        w_decay=u(small, width, width),
        b_decay=Tensor(np.full(width, decay_bias, np.float32), requires_grad=True),
        out_mix=Tensor(np.full(state_dim, 1.0 / state_dim, np.float32), requires_grad=True),
    )


def project_params(x_seq: Tensor, w: ScanWeights) -> ScanParams:
    """Token sequence [*, L, width] -> per-token recurrence parameters.

    Plain linear maps: drive/gain project width -> width*state_dim (then
    reshape), decay projects width -> width. The initial state is zero.
    """
    x_seq = as_tensor(x_seq)
    d, s = w.width, w.state_dim
    if x_seq.shape[-1] != d:
        raise ShapeError(f"project_params: sequence width {x_seq.shape[-1]} != {d}")
    lead = x_seq.shape[:-1]
    drive = reshape(add(matmul(x_seq, w.w_drive), w.b_drive), lead + (d, s))
    gain = reshape(add(matmul(x_seq, w.w_gain), w.b_gain), lead + (d, s))
    decay = add(matmul(x_seq, w.w_decay), w.b_decay)
    h_init = Tensor(np.zeros(lead[:-1] + (d, s), np.float32))
    return ScanParams(drive=drive, gain=gain, decay=decay, h_init=h_init)


def selective_scan_reference(p: ScanParams) -> Tensor:
    """Strictly sequential float64 evaluation of the recurrence (the oracle).

    Returns the full state trajectory [L, width, state_dim] (batch axis
    passed through). Not differentiable; raises NumericError naming the
    first step whose state goes non-finite.
    """
    drive = p.drive.data.astype(np.float64)
    gain = p.gain.data.astype(np.float64)
    decay = np.clip(p.decay.data.astype(np.float64), -DECAY_CLAMP, DECAY_CLAMP)
    h = p.h_init.data.astype(np.float64)
    L = drive.shape[-3]
    out = np.empty_like(drive)
    ax = drive.ndim - 3
    for t in range(L):
        dr = drive[..., t, :, :] if ax else drive[t]
        gn = gain[..., t, :, :] if ax else gain[t]
        dc = decay[..., t, :] if ax else decay[t]
        h = np.exp(-dc)[..., None] * h + dr + gn * h
        if not np.isfinite(h).all():
            raise NumericError(f"selective_scan_reference: non-finite state at step {t}")
        if ax:
            out[..., t, :, :] = h
        else:
            out[t] = h
    with np.errstate(over="ignore"):
        out32 = out.astype(np.float32)
    if not np.isfinite(out32).all():
        bad = np.isfinite(out32).all(axis=tuple(range(ax + 1, out32.ndim)))
        t = int(np.argmin(bad.reshape(-1, L).all(axis=0)) if ax else np.argmin(bad))
        raise NumericError(
            f"selective_scan_reference: state exceeds float32 range at step {t}")
    return Tensor(out32)


def _affine_scan_chunked(g, a, h0, chunk):
    """All prefix states of h = g*h + a, arrays shaped [B, L, D, S].

    Returns (states [B, L, D, S], carries [B, nchunks, D, S]) where
    carries[c] is the state entering chunk c (saved for the backward pass).
    """
    b, L, d, s = a.shape
    nc = -(-L // chunk)
    pad = nc * chunk - L
    if pad:
        g = np.concatenate([g, np.ones((b, pad, d, s), np.float32)], axis=1)
        a = np.concatenate([a, np.zeros((b, pad, d, s), np.float32)], axis=1)
    gc = g.reshape(b, nc, chunk, d, s)
    ac = a.reshape(b, nc, chunk, d, s)

    with np.errstate(over="ignore", invalid="ignore"):
        # Within-chunk prefix composition, vectorized across chunks.
        gp = np.empty_like(gc)
        ap = np.empty_like(ac)
        gp[:, :, 0] = gc[:, :, 0]
        ap[:, :, 0] = ac[:, :, 0]
        for k in range(1, chunk):
            gp[:, :, k] = gc[:, :, k] * gp[:, :, k - 1]
            ap[:, :, k] = gc[:, :, k] * ap[:, :, k - 1] + ac[:, :, k]

        # Carry the state across chunks sequentially.
        carries = np.empty((b, nc, d, s), np.float32)
        h = h0.astype(np.float32, copy=True)
        for c in range(nc):
            carries[:, c] = h
            h = gp[:, c, -1] * h + ap[:, c, -1]
            if not np.isfinite(h).all():
                raise NumericError(
                    f"selective_scan: non-finite state near step {min((c + 1) * chunk, L) - 1}"
                )

        states = gp * carries[:, :, None] + ap
    return states.reshape(b, nc * chunk, d, s)[:, :L], carries


def selective_scan(p: ScanParams, chunk: int = 64) -> Tensor:
    """Chunked evaluation of the recurrence; differentiable.

    Matches selective_scan_reference to ~1e-5 relative (float32 vs the
    float64 oracle). chunk=1 degenerates to the plain sequential affine
    update and is bit-identical to it.
    """
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    drive, gain, decay, h_init = p.drive, p.gain, p.decay, p.h_init
    batched = drive.ndim == 4
    dr = drive.data if batched else drive.data[None]
    gn = gain.data if batched else gain.data[None]
    dc = decay.data if batched else decay.data[None]
    h0 = h_init.data if batched else h_init.data[None]
    if h0.ndim == 2:
        h0 = np.broadcast_to(h0, dr.shape[:1] + h0.shape)

    dc_cl = np.clip(dc, -DECAY_CLAMP, DECAY_CLAMP)
    edc = np.exp(-dc_cl).astype(np.float32)
    g = edc[..., None] + gn
    if not np.isfinite(g).all():
        raise NumericError("selective_scan: non-finite per-token gain")
    if DEBUG and np.mean(np.abs(g) > 1.05) > 0.5:
        warnings.warn("selective_scan: |gain| > 1.05 on most elements; "
                      "recurrence may be unstable", RuntimeWarning)

    states, carries = _affine_scan_chunked(g, dr, h0, chunk)
    bsz, L, d, s = states.shape
    _flops_add(6 * bsz * L * d * s)
    if _TEST_PERTURBATION:
        states = states + np.float32(_TEST_PERTURBATION)
    out = Tensor(states if batched else states[0])
    _check("selective_scan", out.data)

    if _recording(drive, gain, decay, h_init):
        def bw(gy):
            gyb = gy if batched else gy[None]
            # Adjoints satisfy lam_t = gy_t + g_{t+1} * lam_{t+1}: the same
            # affine scan run right-to-left with the gains shifted by one.
            g_sh = np.concatenate(
                [np.ones((bsz, 1, d, s), np.float32), g[:, :0:-1]], axis=1)
            lam_rev, _ = _affine_scan_chunked(
                g_sh, gyb[:, ::-1].copy(), np.zeros((bsz, d, s), np.float32), chunk)
            lam = lam_rev[:, ::-1]
            prev = np.concatenate([h0[:, None], states[:, :-1]], axis=1)
            dgain_full = lam * prev
            d_drive = lam if drive.requires_grad else None
            d_gain = dgain_full if gain.requires_grad else None
            d_decay = None
            if decay.requires_grad:
                mask = (np.abs(dc) < DECAY_CLAMP)
                d_decay = -(dgain_full.sum(axis=-1) * edc) * mask
            d_h0 = None
            if h_init.requires_grad:
                d_h0 = g[:, 0] * lam[:, 0]
                if h_init.ndim == 2:
                    d_h0 = d_h0.sum(axis=0)
            if not batched:
                d_drive = None if d_drive is None else d_drive[0]
                d_gain = None if d_gain is None else d_gain[0]
                d_decay = None if d_decay is None else d_decay[0]
            return d_drive, d_gain, d_decay, d_h0
        _trace("selective_scan", (drive, gain, decay, h_init), out, bw)
    return out


def contract_state(h_seq: Tensor, out_mix: Tensor) -> Tensor:
    """Collapse the state axis: y[..., d] = sum_s out_mix[s] * h[..., d, s]."""
    h_seq, out_mix = as_tensor(h_seq), as_tensor(out_mix)
    if h_seq.shape[-1] != out_mix.shape[0]:
        raise ShapeError(
            f"contract_state: state axis {h_seq.shape[-1]} != {out_mix.shape[0]}"
        )
    return sum_(mul(h_seq, out_mix), axis=-1)


def scan_sequence(x_seq: Tensor, w: ScanWeights, chunk: int = 64) -> Tensor:
    """project -> scan -> contract: [*, L, width] in, [*, L, width] out."""
    p = project_params(x_seq, w)
    h = selective_scan(p, chunk=chunk)
    return contract_state(h, w.out_mix)
