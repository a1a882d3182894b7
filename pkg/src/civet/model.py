"""VAE architecture definitions, concrete forward passes, and checkpoints.

The encoder ends in a single affine layer of width 2 * d_l whose halves are
the mean and log-variance heads; sigma = exp(0.5 * logvar), which keeps the
stddev strictly positive and makes its interval propagation exact (exp is
monotone). The decoder maps a latent vector deterministically to d_out
values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import (Tensor, ParameterSet, activation, add, affine, conv2d,
                     conv2d_transpose, exp, mul, reshape, scale, slice_last)

CHECKPOINT_MAGIC = b"CVCK"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load/save failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncated payload, or unreadable header."""


class CheckpointVersionError(CheckpointError):
    """Format version is not supported by this build."""


class CheckpointShapeError(CheckpointError):
    """Stored tensors do not match the requested architecture."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an encoder or decoder stack."""

    kind: str  # affine | conv2d | conv2d_transpose | activation | reshape
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int = 1
    padding: int = 0
    activation: str | None = None
    slope: float = 0.01
    shape: tuple[int, ...] | None = None  # target shape excluding the batch axis

    def __post_init__(self):
        kinds = ("affine", "conv2d", "conv2d_transpose", "activation", "reshape")
        if self.kind not in kinds:
            raise ValueError(f"unknown layer kind {self.kind!r}; expected one of {kinds}")


@dataclass(frozen=True)
class ArchitectureSpec:
    """Encoder/decoder layer stacks plus the three interface widths."""

    name: str
    d_in: int
    d_l: int
    d_out: int
    encoder: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]

    def __post_init__(self):
        enc_affines = [l for l in self.encoder if l.kind == "affine"]
        if not enc_affines or enc_affines[-1].out_features != 2 * self.d_l:
            raise ValueError("encoder must terminate in an affine layer of width 2 * d_l "
                             "(mean and log-variance heads)")

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for prefix, layers in (("enc", self.encoder), ("dec", self.decoder)):
            for i, layer in enumerate(layers):
                if layer.kind == "affine":
                    shapes[f"{prefix}.{i}.weight"] = (layer.out_features, layer.in_features)
                    shapes[f"{prefix}.{i}.bias"] = (layer.out_features,)
                elif layer.kind == "conv2d":
                    shapes[f"{prefix}.{i}.weight"] = (layer.out_channels, layer.in_channels,
                                                      layer.kernel_size, layer.kernel_size)
                    shapes[f"{prefix}.{i}.bias"] = (layer.out_channels,)
                elif layer.kind == "conv2d_transpose":
                    shapes[f"{prefix}.{i}.weight"] = (layer.in_channels, layer.out_channels,
                                                      layer.kernel_size, layer.kernel_size)
                    shapes[f"{prefix}.{i}.bias"] = (layer.out_channels,)
        return shapes

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = [asdict(l) for l in self.encoder]
        d["decoder"] = [asdict(l) for l in self.decoder]
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "ArchitectureSpec":
        def mk(layers):
            out = []
            for ld in layers:
                ld = dict(ld)
                if ld.get("shape") is not None:
                    ld["shape"] = tuple(ld["shape"])
                out.append(LayerSpec(**ld))
            return tuple(out)

        return ArchitectureSpec(name=d["name"], d_in=int(d["d_in"]), d_l=int(d["d_l"]),
                                d_out=int(d["d_out"]), encoder=mk(d["encoder"]),
                                decoder=mk(d["decoder"]))


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over the latent layer; sigma is strictly positive.

    ``logvar`` is the raw log-variance head output (kept for the closed-form
    KL term).
    """

    mu: Tensor
    sigma: Tensor
    logvar: Tensor


def _fc_stack(dims: list[int], hidden_act: str, final_act: str | None) -> tuple[LayerSpec, ...]:
    layers: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(LayerSpec(kind="affine", in_features=a, out_features=b))
        last = i == len(dims) - 2
        act = final_act if last else hidden_act
        if act is not None:
            layers.append(LayerSpec(kind="activation", activation=act))
    return tuple(layers)


def make_architecture(name: str) -> ArchitectureSpec:
    """Named desk-scale architectures.

    * ``synth``:     affine 8 -> 32 -> (2 x 4), mirrored decoder, sigmoid output.
    * ``mnist_fc``:  affine 784 -> 256 -> 64 -> (2 x 16), mirrored, sigmoid output.
    * ``tiny_conv``: one 5x5/stride-2 conv block on 9x9 single-channel inputs.
    """
    if name == "synth":
        d_in, d_l = 8, 4
        encoder = _fc_stack([d_in, 32, 2 * d_l], "relu", None)
        decoder = _fc_stack([d_l, 32, d_in], "relu", "sigmoid")
        return ArchitectureSpec(name, d_in, d_l, d_in, encoder, decoder)
    if name == "mnist_fc":
        d_in, d_l = 784, 16
        encoder = _fc_stack([d_in, 256, 64, 2 * d_l], "relu", None)
        decoder = _fc_stack([d_l, 64, 256, d_in], "relu", "sigmoid")
        return ArchitectureSpec(name, d_in, d_l, d_in, encoder, decoder)
    if name == "tiny_conv":
        # 9x9 side mirrors exactly under kernel 5 / stride 2 / padding 1
        d_l, side, ch = 4, 9, 4
        d_in = side * side
        conv_side = (side + 2 * 1 - 5) // 2 + 1  # 4
        flat = ch * conv_side * conv_side
        encoder = (
            LayerSpec(kind="reshape", shape=(1, side, side)),
            LayerSpec(kind="conv2d", in_channels=1, out_channels=ch, kernel_size=5,
                      stride=2, padding=1),
            LayerSpec(kind="activation", activation="relu"),
            LayerSpec(kind="reshape", shape=(flat,)),
            LayerSpec(kind="affine", in_features=flat, out_features=2 * d_l),
        )
        decoder = (
            LayerSpec(kind="affine", in_features=d_l, out_features=flat),
            LayerSpec(kind="activation", activation="relu"),
            LayerSpec(kind="reshape", shape=(ch, conv_side, conv_side)),
            LayerSpec(kind="conv2d_transpose", in_channels=ch, out_channels=1,
                      kernel_size=5, stride=2, padding=1),
            LayerSpec(kind="activation", activation="sigmoid"),
            LayerSpec(kind="reshape", shape=(d_in,)),
        )
        return ArchitectureSpec(name, d_in, d_l, d_in, encoder, decoder)
    raise ValueError(f"unknown architecture {name!r}; expected synth, mnist_fc or tiny_conv")


def init_parameters(arch: ArchitectureSpec, rng: np.random.Generator) -> ParameterSet:
    """Glorot-uniform weights, zero biases, in manifest order."""
    tensors: dict[str, Tensor] = {}
    for name, shape in arch.parameter_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = Tensor(np.zeros(shape))
        else:
            if len(shape) == 2:
                fan_in, fan_out = shape[1], shape[0]
            else:
                receptive = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = Tensor(rng.uniform(-limit, limit, size=shape))
    return ParameterSet(tensors, arch=arch)


def forward_layers(params: ParameterSet, prefix: str, layers: tuple[LayerSpec, ...],
                   x: Tensor) -> Tensor:
    """Run a layer stack concretely; batch axis is preserved throughout."""
    h = x
    batched = x.data.ndim > 1
    for i, layer in enumerate(layers):
        if layer.kind == "affine":
            h = affine(h, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        elif layer.kind == "conv2d":
            h = conv2d(h, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"],
                       stride=layer.stride, padding=layer.padding)
        elif layer.kind == "conv2d_transpose":
            h = conv2d_transpose(h, params[f"{prefix}.{i}.weight"],
                                 params[f"{prefix}.{i}.bias"],
                                 stride=layer.stride, padding=layer.padding)
        elif layer.kind == "activation":
            h = activation(h, layer.activation, layer.slope)
        elif layer.kind == "reshape":
            if batched:
                h = reshape(h, (h.shape[0],) + tuple(layer.shape))
            else:
                h = reshape(h, tuple(layer.shape))
    return h


def encode(params: ParameterSet, x: Tensor) -> LatentDistribution:
    """Forward the encoder; split the final affine into mean/log-variance heads."""
    arch: ArchitectureSpec = params.arch
    heads = forward_layers(params, "enc", arch.encoder, x)
    mu = slice_last(heads, 0, arch.d_l)
    logvar = slice_last(heads, arch.d_l, 2 * arch.d_l)
    sigma = exp(scale(logvar, 0.5))
    return LatentDistribution(mu=mu, sigma=sigma, logvar=logvar)


def reparameterize(dist: LatentDistribution, rng) -> Tensor:
    """z = mu + sigma * eta with eta ~ N(0, I) from a seeded generator.

    ``rng`` may be an int seed or a numpy Generator. The noise is a constant
    in the recorded graph; gradients flow through mu and sigma.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    eta = Tensor(rng.standard_normal(dist.mu.shape))
    return add(dist.mu, mul(dist.sigma, eta))


def decode(params: ParameterSet, z: Tensor) -> Tensor:
    """Deterministic decoder forward."""
    arch: ArchitectureSpec = params.arch
    return forward_layers(params, "dec", arch.decoder, z)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: b"CVCK" | u32 LE version | u32 LE header length | UTF-8 JSON header
# {"architecture": ..., "manifest": [[name, shape], ...]} | raw little-endian
# float64 buffers in manifest order.


def save_checkpoint(params: ParameterSet, arch: ArchitectureSpec, path) -> None:
    manifest = [[name, list(t.shape)] for name, t in params.items()]
    header = json.dumps({"architecture": arch.to_json_dict(), "manifest": manifest},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, t in params.items():
            buf = np.ascontiguousarray(t.data, dtype="<f8")
            fh.write(buf.tobytes())


def load_checkpoint(path, expected_arch: ArchitectureSpec | None = None):
    """Read a checkpoint; returns (params, arch). Round-trips bit-exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path}: missing checkpoint magic")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version} is not supported "
                                     f"(expected {CHECKPOINT_VERSION})")
    header_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
        arch = ArchitectureSpec.from_json_dict(header["architecture"])
        manifest = header["manifest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    expected_shapes = arch.parameter_shapes()
    tensors: dict[str, Tensor] = {}
    offset = 12 + header_len
    for name, shape in manifest:
        shape = tuple(int(s) for s in shape)
        if expected_shapes.get(name) != shape:
            raise CheckpointShapeError(f"{path}: stored {name} has shape {shape}, "
                                       f"architecture expects {expected_shapes.get(name)}")
        nbytes = 8 * int(np.prod(shape))
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(f"{path}: truncated tensor payload for {name} "
                                         f"at byte {offset}")
        tensors[name] = Tensor(np.frombuffer(chunk, dtype="<f8").reshape(shape).copy())
        offset += nbytes
    if set(tensors) != set(expected_shapes):
        missing = sorted(set(expected_shapes) - set(tensors))
        raise CheckpointShapeError(f"{path}: manifest is missing parameters {missing}")

    if expected_arch is not None and arch != expected_arch:
        if (arch.d_in, arch.d_l, arch.d_out) != \
                (expected_arch.d_in, expected_arch.d_l, expected_arch.d_out):
            raise CheckpointShapeError(
                f"{path}: checkpoint dims (d_in={arch.d_in}, d_l={arch.d_l}, "
                f"d_out={arch.d_out}) do not match requested architecture "
                f"(d_in={expected_arch.d_in}, d_l={expected_arch.d_l}, "
                f"d_out={expected_arch.d_out})")
        raise CheckpointShapeError(f"{path}: checkpoint architecture {arch.name!r} does not "
                                   f"match requested {expected_arch.name!r}")
    return ParameterSet(tensors, arch=arch), arch
