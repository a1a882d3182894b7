"""Differentiable interval bound propagation through encoder/decoder layers.

Affine and convolutional layers use the center-radius transformer:
center = W @ mid + b, radius = |W| @ rad, output = [center - radius,
center + radius]. All endpoint computations are ordinary tape operations, so
d(bound)/d(parameter) is available wherever the concrete network is
differentiable. Monotone activations map an interval to the interval of its
endpoint images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ArchitectureSpec, LayerSpec
from .tensor import ParameterSet, Tensor

# Floating-point rounding may invert endpoints by ulps; anything worse than
# this is a logic error and raises.
ORDER_TOLERANCE = 1e-12


class IntervalOrderError(RuntimeError):
    """lower > upper beyond rounding tolerance."""


@dataclass
class IntervalTensor:
    """Elementwise [lower, upper] pair; both endpoints gradient-tracked."""

    lower: Tensor
    upper: Tensor

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise T.ShapeError(f"interval endpoints differ in shape: "
                               f"{self.lower.shape} vs {self.upper.shape}")
        gap = np.max(self.lower.data - self.upper.data, initial=-np.inf)
        if gap > ORDER_TOLERANCE:
            raise IntervalOrderError(f"lower exceeds upper by {gap:.3e}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.lower.shape

    def mid(self) -> Tensor:
        return T.scale(T.add(self.lower, self.upper), 0.5)

    def rad(self) -> Tensor:
        return T.scale(T.sub(self.upper, self.lower), 0.5)

    def width(self) -> Tensor:
        return T.sub(self.upper, self.lower)

    @staticmethod
    def point(x: Tensor) -> "IntervalTensor":
        return IntervalTensor(lower=x, upper=x)

    def contains(self, value: np.ndarray, slack: float = 0.0) -> bool:
        v = np.asarray(value)
        return bool(np.all(v >= self.lower.data - slack) and
                    np.all(v <= self.upper.data + slack))


@dataclass(frozen=True)
class InputRegion:
    """L-infinity ball of radius epsilon around a center, optionally clamped."""

    center: np.ndarray
    epsilon: float
    clamp: tuple[float, float] | None = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.clamp is not None:
            lo, hi = self.clamp
            if lo > hi:
                raise ValueError(f"clamp range is inverted: {self.clamp}")
            if np.any(self.center < lo) or np.any(self.center > hi):
                raise ValueError("region center lies outside the clamp range")


def region_to_interval(region: InputRegion) -> IntervalTensor:
    """[clamp(center - eps), clamp(center + eps)] as constant tensors."""
    lo = region.center - region.epsilon
    hi = region.center + region.epsilon
    if region.clamp is not None:
        lo = np.clip(lo, region.clamp[0], region.clamp[1])
        hi = np.clip(hi, region.clamp[0], region.clamp[1])
    return IntervalTensor(lower=Tensor(lo), upper=Tensor(hi))


@dataclass
class LatentBounds:
    """Per-dimension mean and stddev ranges reachable over an input region."""

    mu_lb: Tensor
    mu_ub: Tensor
    sigma_lb: Tensor
    sigma_ub: Tensor

    def __post_init__(self):
        if np.max(self.mu_lb.data - self.mu_ub.data, initial=-np.inf) > ORDER_TOLERANCE:
            raise IntervalOrderError("mu_lb exceeds mu_ub")
        if np.max(self.sigma_lb.data - self.sigma_ub.data, initial=-np.inf) > ORDER_TOLERANCE:
            raise IntervalOrderError("sigma_lb exceeds sigma_ub")
        if np.any(self.sigma_lb.data <= 0.0):
            raise ValueError("sigma_lb must be strictly positive")


# ---------------------------------------------------------------------------
# per-operation transformers


def interval_affine(x: IntervalTensor, weight: Tensor, bias: Tensor | None = None) -> IntervalTensor:
    center = T.affine(x.mid(), weight, bias)
    radius = T.affine(x.rad(), T.absolute(weight))
    return IntervalTensor(lower=T.sub(center, radius), upper=T.add(center, radius))


def interval_conv2d(x: IntervalTensor, kernel: Tensor, bias: Tensor | None = None,
                    stride: int = 1, padding: int = 0) -> IntervalTensor:
    center = T.conv2d(x.mid(), kernel, bias, stride=stride, padding=padding)
    radius = T.conv2d(x.rad(), T.absolute(kernel), stride=stride, padding=padding)
    return IntervalTensor(lower=T.sub(center, radius), upper=T.add(center, radius))


def interval_conv2d_transpose(x: IntervalTensor, kernel: Tensor, bias: Tensor | None = None,
                              stride: int = 1, padding: int = 0) -> IntervalTensor:
    center = T.conv2d_transpose(x.mid(), kernel, bias, stride=stride, padding=padding)
    radius = T.conv2d_transpose(x.rad(), T.absolute(kernel), stride=stride, padding=padding)
    return IntervalTensor(lower=T.sub(center, radius), upper=T.add(center, radius))


def interval_activation(x: IntervalTensor, kind: str, slope: float = 0.01) -> IntervalTensor:
    # every supported activation is monotone nondecreasing
    return IntervalTensor(lower=T.activation(x.lower, kind, slope),
                          upper=T.activation(x.upper, kind, slope))


def interval_reshape(x: IntervalTensor, shape: tuple[int, ...]) -> IntervalTensor:
    return IntervalTensor(lower=T.reshape(x.lower, shape), upper=T.reshape(x.upper, shape))


def interval_slice_last(x: IntervalTensor, start: int, stop: int) -> IntervalTensor:
    return IntervalTensor(lower=T.slice_last(x.lower, start, stop),
                          upper=T.slice_last(x.upper, start, stop))


def interval_forward_layers(params: ParameterSet, prefix: str,
                            layers: tuple[LayerSpec, ...], x: IntervalTensor,
                            batched: bool) -> IntervalTensor:
    h = x
    for i, layer in enumerate(layers):
        if layer.kind == "affine":
            h = interval_affine(h, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        elif layer.kind == "conv2d":
            h = interval_conv2d(h, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"],
                                stride=layer.stride, padding=layer.padding)
        elif layer.kind == "conv2d_transpose":
            h = interval_conv2d_transpose(h, params[f"{prefix}.{i}.weight"],
                                          params[f"{prefix}.{i}.bias"],
                                          stride=layer.stride, padding=layer.padding)
        elif layer.kind == "activation":
            h = interval_activation(h, layer.activation, layer.slope)
        elif layer.kind == "reshape":
            shape = (h.shape[0],) + tuple(layer.shape) if batched else tuple(layer.shape)
            h = interval_reshape(h, shape)
    return h


# ---------------------------------------------------------------------------
# encoder / decoder propagation


def propagate_encoder(params: ParameterSet, region: InputRegion) -> LatentBounds:
    """Sound ranges of (mu, sigma) over the region, gradient-tracked.

    sigma bounds come from the log-variance head through the monotone map
    sigma = exp(0.5 * logvar), so they are elementwise exact given the
    logvar interval.
    """
    arch: ArchitectureSpec = params.arch
    iv = region_to_interval(region)
    batched = region.center.ndim > 1
    heads = interval_forward_layers(params, "enc", arch.encoder, iv, batched)
    mu_iv = interval_slice_last(heads, 0, arch.d_l)
    logvar_iv = interval_slice_last(heads, arch.d_l, 2 * arch.d_l)
    sigma_iv = interval_activation(
        IntervalTensor(T.scale(logvar_iv.lower, 0.5), T.scale(logvar_iv.upper, 0.5)), "exp")
    return LatentBounds(mu_lb=mu_iv.lower, mu_ub=mu_iv.upper,
                        sigma_lb=sigma_iv.lower, sigma_ub=sigma_iv.upper)


def propagate_decoder(params: ParameterSet, support) -> IntervalTensor:
    """Sound output interval of the decoder over a latent support box."""
    arch: ArchitectureSpec = params.arch
    lower, upper = support.lower, support.upper
    if lower.shape[-1] != arch.d_l:
        raise T.ShapeError(f"support has {lower.shape[-1]} latent dims, "
                           f"decoder expects {arch.d_l}")
    iv = IntervalTensor(lower=lower, upper=upper)
    batched = lower.data.ndim > 1
    return interval_forward_layers(params, "dec", arch.decoder, iv, batched)
