"""Shared test utilities: finite-difference gradient checking and the
independent nested-loop convolution oracle."""

import numpy as np

from mambanext import tensor as T
from mambanext.tensor import GradTape, Tensor, backward


def fd_gradcheck(fn, inputs, probes=10, h=1e-3, tol=1e-3, seed=0):
    """Central finite differences vs taped gradients.

    fn maps Tensors to one output Tensor; the scalar objective is
    sum(out * R) for a fixed random R. Checks up to ``probes`` coordinates
    of every input; the difference quotient is accumulated in float64.
    Returns the worst relative error (floored denominator at 1.0).
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(np.array(x, dtype=np.float32), requires_grad=True)
               for x in inputs]
    with GradTape() as tape:
        out = fn(*tensors)
        r = Tensor(rng.normal(0, 1, out.shape).astype(np.float32))
        loss = T.sum_(T.mul(out, r))
        backward(tape, loss)

    def objective():
        fresh = [Tensor(t.data) for t in tensors]
        return float(np.sum(fn(*fresh).data.astype(np.float64) * r.data))

    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "input received no gradient"
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = objective()
            flat[i] = orig - h
            f_minus = objective()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1.0)
            worst = max(worst, err)
    assert worst < tol, f"fd mismatch: worst rel err {worst:.3e} >= {tol}"
    return worst


def fd_gradcheck_directional(fn, inputs, n_dirs=8, h=1e-3, tol=1e-3, seed=0):
    """Directional central differences for deep composites.

    Per-coordinate FD on a float32 forward is noise-floored around 1e-3
    absolute for many-op graphs, so composites are checked along whole
    directions instead: for random unit directions v (plus the gradient
    direction itself), (f(x+hv) - f(x-hv))/2h must match g.v to
    tol * max(||g||, 1). A miswired backward distorts g.v by O(||g||).
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(np.array(x, dtype=np.float32), requires_grad=True)
               for x in inputs]
    with GradTape() as tape:
        out = fn(*tensors)
        r = Tensor(rng.normal(0, 1, out.shape).astype(np.float32))
        loss = T.sum_(T.mul(out, r))
        backward(tape, loss)
    grads = [t.grad.astype(np.float64) for t in tensors]
    gnorm = float(np.sqrt(sum((g ** 2).sum() for g in grads)))

    def objective():
        fresh = [Tensor(t.data) for t in tensors]
        return float(np.sum(fn(*fresh).data.astype(np.float64) * r.data))

    originals = [t.data.copy() for t in tensors]
    worst = 0.0
    for k in range(n_dirs):
        vs = [rng.normal(0, 1, t.shape) for t in tensors]
        if k % 2 == 0 and gnorm > 0:
            vs = [v * 0.25 + g / gnorm for v, g in zip(vs, grads)]
        norm = np.sqrt(sum((v ** 2).sum() for v in vs))
        vs = [(v / norm).astype(np.float64) for v in vs]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        for t, orig, v in zip(tensors, originals, vs):
            t.data[...] = (orig.astype(np.float64) + h * v).astype(np.float32)
        f_plus = objective()
        for t, orig, v in zip(tensors, originals, vs):
            t.data[...] = (orig.astype(np.float64) - h * v).astype(np.float32)
        f_minus = objective()
        for t, orig in zip(tensors, originals):
            t.data[...] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        err = abs(fd - analytic) / max(gnorm, 1.0)
        worst = max(worst, err)
    assert worst < tol, f"directional fd mismatch: worst {worst:.3e} >= {tol}"
    return worst


def conv2d_loop_oracle(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct nested-loop convolution in float64; deliberately naive."""
    n_, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x.astype(np.float64),
                ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    og = cout // groups
    y = np.zeros((n_, cout, ho, wo))
    for n in range(n_):
        for o in range(cout):
            gi = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (xp[n, gi * cg + c, i * stride + u, j * stride + v]
                                        * w[o, c, u, v])
                    y[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return y
