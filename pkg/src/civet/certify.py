"""Post-training certification: sound worst-case error bounds, Monte-Carlo
validation, and the evaluation harness behind the report commands.

The certificate for one (input region, failure mass) pair is the worst
decoder error over the latent support box selected for the region's latent
bounds; by construction every reachable output distribution puts at least
the target mass below it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .gaussian import ProbabilityThreshold, find_support
from .intervals import InputRegion, propagate_decoder, propagate_encoder
from .model import decode, encode
from .tensor import ParameterSet, Tensor
from .training import ErrorMetric

SNR_CAP_DB = 300.0


class MetricError(ValueError):
    """Invalid metric input (e.g. all-zero ground truth for SNR)."""


def snr(h, h_gt) -> float:
    """Signal-to-noise ratio in dB: -10 * log10(|h - h_gt|^2 / |h_gt|^2).

    A perfect match is capped at 300 dB so tabulated cells stay finite.
    """
    h = np.asarray(h.data if isinstance(h, Tensor) else h, dtype=np.float64)
    h_gt = np.asarray(h_gt.data if isinstance(h_gt, Tensor) else h_gt, dtype=np.float64)
    denom = float(np.sum(h_gt * h_gt))
    if denom == 0.0:
        raise MetricError("SNR is undefined for an all-zero ground truth")
    num = float(np.sum((h - h_gt) ** 2))
    if num == 0.0:
        return SNR_CAP_DB
    return min(-10.0 * math.log10(num / denom), SNR_CAP_DB) + 0.0  # drop -0.0


def _rse_to_db(rse: float) -> float:
    if rse <= 0.0:
        return SNR_CAP_DB
    return min(-10.0 * math.log10(rse), SNR_CAP_DB)


@dataclass
class CertifiedBound:
    """Sound upper bound on the worst-case error for one certified query.

    ``t_ub`` is in the metric's native error scale: mean squared error for
    'mse', relative squared error for 'snr' (report paths convert to dB).
    """

    t_ub: float
    delta: float
    epsilon: float
    metric: str
    support_widths: np.ndarray = field(repr=False)
    model_checksum: str = ""
    timestamp: float = 0.0

    @property
    def as_db(self) -> float:
        if self.metric != "snr":
            raise MetricError("dB conversion only applies to the snr metric")
        return _rse_to_db(self.t_ub)


def _worst_square_error(params: ParameterSet, region: InputRegion, delta,
                        target: np.ndarray, max_depth: int):
    bounds = propagate_encoder(params, region)
    threshold = delta if isinstance(delta, ProbabilityThreshold) else ProbabilityThreshold(delta)
    support = find_support(bounds, threshold, max_depth=max_depth)
    out_iv = propagate_decoder(params, support)
    worst = np.maximum((out_iv.lower.data - target) ** 2, (out_iv.upper.data - target) ** 2)
    return worst, support, threshold


def certify_point(params: ParameterSet, region: InputRegion, delta,
                  metric: str | ErrorMetric = "mse", target=None,
                  max_depth: int = 60) -> CertifiedBound:
    """Certify one input region; deterministic (no sampling involved).

    ``target`` defaults to the region center (self-reconstruction error).
    """
    kind = metric.kind if isinstance(metric, ErrorMetric) else metric
    ErrorMetric(kind)  # validates
    target_arr = np.asarray(region.center if target is None else
                            (target.data if isinstance(target, Tensor) else target),
                            dtype=np.float64)
    worst, support, threshold = _worst_square_error(params, region, delta,
                                                    target_arr, max_depth)
    if kind == "mse":
        t_ub = float(np.mean(worst))
    else:
        denom = float(np.sum(target_arr * target_arr))
        if denom == 0.0:
            raise MetricError("SNR is undefined for an all-zero target")
        t_ub = float(np.sum(worst)) / denom
    return CertifiedBound(t_ub=t_ub, delta=threshold.delta, epsilon=region.epsilon,
                          metric=kind, support_widths=support.widths(),
                          model_checksum=params.checksum(), timestamp=time.time())


def _metric_values(y: np.ndarray, target: np.ndarray, kind: str) -> np.ndarray:
    """Per-row error values M(y) against a fixed target."""
    sq = (y - target) ** 2
    if kind == "mse":
        return sq.mean(axis=-1)
    denom = float(np.sum(target * target))
    if denom == 0.0:
        raise MetricError("SNR is undefined for an all-zero target")
    return sq.sum(axis=-1) / denom


def _region_samples(region: InputRegion, n: int, rng: np.random.Generator) -> np.ndarray:
    """Corner points (random sign patterns) plus uniform interior samples."""
    lo = np.clip(region.center - region.epsilon, *(region.clamp or (-np.inf, np.inf)))
    hi = np.clip(region.center + region.epsilon, *(region.clamp or (-np.inf, np.inf)))
    d = lo.shape[-1]
    n_corners = min(n // 2, 2 ** min(d, 20))
    picks = rng.integers(0, 2, size=(n_corners, d))
    corners = np.where(picks.astype(bool), hi, lo)
    uniform = lo + rng.random((n - n_corners, d)) * (hi - lo)
    return np.concatenate([corners, uniform], axis=0)


def monte_carlo_validate(params: ParameterSet, region: InputRegion, delta,
                         metric: str | ErrorMetric = "mse", target=None,
                         n_region_samples: int = 16, n_latent_samples: int = 10_000,
                         rng=None, t_ub: float | None = None) -> float:
    """Empirical check of a certificate: the minimum, over sampled region
    inputs, of the fraction of latent draws whose error stays below the bound.

    ``t_ub`` may be injected (e.g. 0 as a negative control); otherwise the
    certificate is computed first.
    """
    if n_latent_samples < 1000:
        raise ValueError("need at least 1000 latent samples for a meaningful fraction")
    kind = metric.kind if isinstance(metric, ErrorMetric) else metric
    ErrorMetric(kind)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng or 0)
    target_arr = np.asarray(region.center if target is None else
                            (target.data if isinstance(target, Tensor) else target),
                            dtype=np.float64)
    if t_ub is None:
        t_ub = certify_point(params, region, delta, kind, target_arr).t_ub

    if region.center.ndim != 1:
        raise ValueError("monte_carlo_validate expects a single-example region")
    xs = _region_samples(region, n_region_samples, rng)
    dists = encode(params, Tensor(xs))
    mu = dists.mu.data
    sigma = dists.sigma.data
    min_fraction = 1.0
    for i in range(xs.shape[0]):
        eta = rng.standard_normal((n_latent_samples, mu.shape[-1]))
        z = mu[i] + sigma[i] * eta
        y = decode(params, Tensor(z)).data
        errs = _metric_values(y, target_arr, kind)
        min_fraction = min(min_fraction, float(np.mean(errs <= t_ub)))
    return min_fraction


# ---------------------------------------------------------------------------
# evaluation harness


@dataclass
class SuiteReport:
    """Per-example metrics plus aggregate means; the payload behind the
    certify/attack/eval report files."""

    metric: str
    epsilon: float
    delta: float
    attack_names: tuple[str, ...]
    rows: list[dict]
    config_echo: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        return ["example_id", "baseline", "certified", *self.attack_names]

    def means(self) -> dict[str, float]:
        out = {}
        for col in self.columns[1:]:
            vals = [r[col] for r in self.rows if r.get(col) is not None]
            out[col] = float(np.mean(vals)) if vals else float("nan")
        return out

    def summary(self) -> dict:
        return {
            "metric": self.metric,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "count": len(self.rows),
            "means": self.means(),
            "config": self.config_echo,
        }


def _point_metric(params: ParameterSet, x: np.ndarray, target: np.ndarray,
                  kind: str) -> float:
    """Deterministic reconstruction metric through the latent mean."""
    dist = encode(params, Tensor(x))
    y = decode(params, dist.mu).data
    if kind == "mse":
        return float(np.mean((y - target) ** 2))
    return snr(y, target)


def evaluate_suite(params: ParameterSet, dataset, epsilon: float, delta: float,
                   attacks: tuple[str, ...] = (), metric: str | ErrorMetric = "mse",
                   clamp: tuple[float, float] | None = (0.0, 1.0),
                   pgd_steps: int = 10, pgd_step_frac: float = 0.1,
                   certified: bool = True, seed: int = 0,
                   config_echo: dict | None = None) -> SuiteReport:
    """Baseline, certified, and attacked metrics per example, averaged.

    Attack and certification radii equal ``epsilon``. Each example's attack
    noise is seeded by (seed, example index), so reports are reproducible.
    """
    from . import training as TR

    kind = metric.kind if isinstance(metric, ErrorMetric) else metric
    ErrorMetric(kind)
    attack_fns = {"pgd": TR.pgd_attack, "lsa": TR.lsa_attack, "mda": TR.mda_attack}
    for name in attacks:
        if name not in attack_fns:
            raise ValueError(f"unknown attack {name!r}; expected one of "
                             f"{sorted(attack_fns)}")
    examples = np.asarray(dataset.examples if hasattr(dataset, "examples") else dataset,
                          dtype=np.float64)
    if examples.shape[0] == 0:
        raise ValueError("dataset is empty")

    rows = []
    for idx in range(examples.shape[0]):
        x = examples[idx]
        row: dict = {"example_id": idx, "baseline": _point_metric(params, x, x, kind)}
        if certified:
            region = InputRegion(center=x, epsilon=epsilon, clamp=clamp)
            bound = certify_point(params, region, delta, kind, x)
            row["certified"] = bound.as_db if kind == "snr" else bound.t_ub
        else:
            row["certified"] = None
        for name in attacks:
            rng = np.random.default_rng((seed, idx))
            if name == "lsa":
                x_adv = TR.lsa_attack(params, x, epsilon, pgd_steps, pgd_step_frac, clamp)
            elif name == "pgd":
                x_adv = TR.pgd_attack(params, x, epsilon, pgd_steps, pgd_step_frac,
                                      rng=rng, clamp=clamp)
            else:
                x_adv = TR.mda_attack(params, x, epsilon, pgd_steps, pgd_step_frac,
                                      rng=rng, clamp=clamp)
            row[name] = _point_metric(params, x_adv, x, kind)
        rows.append(row)

    return SuiteReport(metric=kind, epsilon=epsilon, delta=float(
        delta.delta if isinstance(delta, ProbabilityThreshold) else delta),
        attack_names=tuple(attacks), rows=rows, config_echo=config_echo or {})
