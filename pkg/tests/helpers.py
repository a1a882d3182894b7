"""Shared test utilities: finite-difference gradient checks and nested-loop
convolution oracles kept deliberately independent of the library's fast paths."""

from __future__ import annotations

import numpy as np

from civet.tensor import Tape, Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def fd_gradcheck(fn, arrays, rng=None, max_coords=6, h=FD_STEP, rtol=FD_RTOL):
    """Compare tape gradients of ``fn(*tensors) -> scalar Tensor`` against
    central finite differences on a sample of coordinates of every input.

    Relative error is measured against max(1, |analytic|). Returns the worst
    relative error seen (and asserts it is below ``rtol``).
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    grads = tape.backward(out)
    analytic = [grads[leaf] for leaf in leaves]

    def value_at(k, flat_idx, delta):
        bumped = [a.copy() for a in arrays]
        bumped[k].flat[flat_idx] += delta
        return float(fn(*[Tensor(a) for a in bumped]))

    worst = 0.0
    for k, a in enumerate(arrays):
        n = a.size
        coords = range(n) if n <= max_coords else \
            sorted(rng.choice(n, size=max_coords, replace=False))
        for idx in coords:
            fd = (value_at(k, idx, h) - value_at(k, idx, -h)) / (2 * h)
            an = analytic[k].flat[idx]
            err = abs(fd - an) / max(1.0, abs(an))
            worst = max(worst, err)
    assert worst < rtol, f"finite-difference mismatch: worst rel err {worst:.3e}"
    return worst


def conv2d_oracle(x, kernel, bias=None, stride=1, padding=0):
    """Direct nested-loop cross-correlation for one unbatched image [C,H,W]."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    c, h, w = x.shape
    oc, ic, k, _ = kernel.shape
    assert c == ic
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((oc, ho, wo))
    for o in range(oc):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for cc in range(c):
                    for a in range(k):
                        for b in range(k):
                            acc += xp[cc, i * stride + a, j * stride + b] * kernel[o, cc, a, b]
                out[o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def conv2d_transpose_oracle(x, kernel, bias=None, stride=1, padding=0):
    """Direct scatter-style transposed convolution for one image [C,H,W];
    kernel layout [C, OC, k, k]."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    c, h, w = x.shape
    ic, oc, k, _ = kernel.shape
    assert c == ic
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    padded = np.zeros((oc, ho + 2 * padding, wo + 2 * padding))
    for cc in range(c):
        for i in range(h):
            for j in range(w):
                for o in range(oc):
                    for a in range(k):
                        for b in range(k):
                            padded[o, i * stride + a, j * stride + b] += \
                                x[cc, i, j] * kernel[cc, o, a, b]
    out = padded[:, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + np.asarray(bias)[:, None, None]
    return out
