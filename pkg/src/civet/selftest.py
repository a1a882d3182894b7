"""Built-in sanity suite behind ``civet selftest``.

Covers the worked support-selection example, the coverage-minimization
endpoint identities, gradient checks against central finite differences, and
bound-propagation sampling soundness. Runs in well under 30 seconds.
"""

from __future__ import annotations

import time

import numpy as np

from . import gaussian
from .gaussian import coverage, find_support, std_normal_cdf, verify_support
from .intervals import InputRegion, LatentBounds, propagate_encoder, region_to_interval
from .model import make_architecture, init_parameters, encode
from .tensor import Tape, Tensor


def _check_worked_example() -> tuple[bool, str]:
    l, u, _ = gaussian.find_support_1d(0.0, 1.0, 2.0, 0.95)
    ok = abs(l - (-3.54)) <= 0.01 and abs(u - 4.54) <= 0.01
    return ok, f"l={l:.4f}, u={u:.4f} (want -3.54, 4.54 within 0.01)"


def _check_endpoint_identities(n: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        mu_lb = rng.uniform(-2, 2)
        mu_ub = mu_lb + rng.uniform(0, 2)
        sg_ub = rng.uniform(0.1, 2)
        sg = rng.uniform(0.05, 1.0) * sg_ub
        zeta = rng.uniform(0.01, 4)
        mu = rng.uniform(mu_lb, mu_ub)
        u, l = mu_ub + zeta, mu_lb - zeta
        c_any = coverage(mu, sg, u, l)
        c_hi = coverage(mu_ub, sg_ub, u, l)
        c_lo = coverage(mu_lb, sg_ub, u, l)
        worst = max(worst, c_hi - c_any, abs(c_hi - c_lo))
    return worst <= 1e-12, f"worst endpoint slack {worst:.3e} (limit 1e-12)"


def _check_gradients(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    w0 = rng.standard_normal((3, 4))
    x0 = rng.standard_normal((2, 4))
    tape = Tape()
    w = tape.leaf(w0)
    from .tensor import affine, sigmoid, tmean, square
    loss = tmean(square(sigmoid(affine(Tensor(x0), w))))
    g = tape.backward(loss)[w]
    worst = 0.0
    h = 1e-5
    for idx in [(0, 0), (1, 2), (2, 3)]:
        wp, wm = w0.copy(), w0.copy()
        wp[idx] += h
        wm[idx] -= h

        def f(wv):
            return float(tmean(square(sigmoid(affine(Tensor(x0), Tensor(wv))))))

        fd = (f(wp) - f(wm)) / (2 * h)
        worst = max(worst, abs(fd - g[idx]) / max(1.0, abs(g[idx])))
    return worst < 1e-4, f"worst relative gradient error {worst:.3e} (limit 1e-4)"


def _check_ibp_soundness(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    arch = make_architecture("synth")
    violations = 0
    for trial in range(3):
        params = init_parameters(arch, rng)
        center = rng.random(arch.d_in)
        region = InputRegion(center=center, epsilon=0.05)
        bounds = propagate_encoder(params, region)
        iv = region_to_interval(region)
        xs = iv.lower.data + rng.random((2000, arch.d_in)) * (iv.upper.data - iv.lower.data)
        dist = encode(params, Tensor(xs))
        for arr, lo, hi in ((dist.mu.data, bounds.mu_lb.data, bounds.mu_ub.data),
                            (dist.sigma.data, bounds.sigma_lb.data, bounds.sigma_ub.data)):
            violations += int(np.sum(arr < lo)) + int(np.sum(arr > hi))
    return violations == 0, f"{violations} sampled points escaped the bounds (limit 0)"


def _check_support_coverage(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 1.0
    for _ in range(50):
        d = int(rng.integers(1, 6))
        mu_lb = rng.uniform(-1, 1, d)
        mu_ub = mu_lb + rng.uniform(0, 1, d)
        sg_lb = rng.uniform(0.05, 0.5, d)
        sg_ub = sg_lb + rng.uniform(0, 1, d)
        delta = float(rng.uniform(0.01, 0.45))
        bounds = LatentBounds(Tensor(mu_lb), Tensor(mu_ub), Tensor(sg_lb), Tensor(sg_ub))
        support = find_support(bounds, delta)
        worst = min(worst, verify_support(bounds, support) - (1.0 - delta))
    return worst >= -1e-9, f"worst coverage slack {worst:.3e} (limit -1e-9)"


def _check_quantile_roundtrip() -> tuple[bool, str]:
    xs = np.linspace(-6, 6, 241)
    back = gaussian.std_normal_icdf(std_normal_cdf(xs))
    worst = float(np.max(np.abs(back - xs)))
    return worst < 1e-8, f"worst round-trip error {worst:.3e} (limit 1e-8)"


CHECKS = (
    ("support worked example", _check_worked_example),
    ("coverage endpoint identities", _check_endpoint_identities),
    ("gradient finite differences", _check_gradients),
    ("bound propagation soundness", _check_ibp_soundness),
    ("support coverage", _check_support_coverage),
    ("quantile round-trip", _check_quantile_roundtrip),
)


def run_selftest(corrupt_quantile: bool = False, out=None) -> bool:
    """Run every check, print one status line each, return overall pass.

    ``corrupt_quantile`` biases the quantile function for the duration (a
    negative-control hook: the worked example must then fail).
    """
    import sys

    out = out or sys.stdout
    original = gaussian.std_normal_icdf
    if corrupt_quantile:
        gaussian.std_normal_icdf = lambda p: original(p) * 1.05
    try:
        all_ok = True
        for name, fn in CHECKS:
            t0 = time.perf_counter()
            try:
                ok, detail = fn()
                ok = bool(ok)
            except Exception as exc:  # a crashed check is a failed check
                ok, detail = False, f"raised {type(exc).__name__}: {exc}"
            ms = (time.perf_counter() - t0) * 1e3
            all_ok &= ok
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({ms:.0f} ms)", file=out)
        return all_ok
    finally:
        gaussian.std_normal_icdf = original
