"""Dataset loading (IDX images, synthetic manifold) and run configuration.

Config files are plain ``key = value`` lines with ``#`` comments. Unknown or
duplicate keys are rejected with the offending line number; missing keys take
the documented protocol defaults.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .gaussian import DeltaSchedule
from .training import TrainConfig

IDX_IMAGE_MAGIC = 0x00000803


class IdxParseError(ValueError):
    """IDX payload is malformed; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """Config file problem; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class Dataset:
    """Examples as one [n, d_in] float64 array with values in [0, 1]."""

    examples: np.ndarray
    split: str = "train"
    source: str = ""
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.float64)
        if self.examples.ndim != 2 or self.examples.shape[0] == 0:
            raise ValueError("dataset must be a nonempty [n, d_in] array")
        if self.examples.min() < 0.0 or self.examples.max() > 1.0:
            raise ValueError("dataset values must lie in [0, 1]")

    def __len__(self) -> int:
        return self.examples.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.examples[i]

    @property
    def d_in(self) -> int:
        return self.examples.shape[1]


def load_idx(images_path, limit: int | None = None) -> Dataset:
    """Parse a big-endian IDX unsigned-byte image file, scaling to [0, 1]."""
    with open(images_path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxParseError("file too short for magic number", 0)
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != IDX_IMAGE_MAGIC:
        raise IdxParseError(f"bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}", 0)
    if len(blob) < 16:
        raise IdxParseError("file too short for dimension header", 4)
    n, rows, cols = struct.unpack(">III", blob[4:16])
    need = 16 + n * rows * cols
    if len(blob) < need:
        raise IdxParseError(f"payload truncated: expected {need} bytes, got {len(blob)}",
                            len(blob))
    count = n if limit is None else min(limit, n)
    raw = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16)
    examples = raw.astype(np.float64).reshape(count, rows * cols) / 255.0
    return Dataset(examples=examples, split="train", source=str(images_path),
                   image_shape=(rows, cols))


def write_idx(path, images: np.ndarray) -> None:
    """Write uint8 images [n, rows, cols] in IDX layout (round-trip helper)."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("expected images of shape [n, rows, cols]")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def synthetic_dataset(n: int, d_in: int, seed: int) -> Dataset:
    """Smooth one-parameter manifold: x_j(t) = 0.5 + 0.4 sin(2 pi t + phase_j),
    with t uniform per example and per-dimension phases drawn from the seed."""
    if n < 1 or d_in < 1:
        raise ValueError("n and d_in must be positive")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=d_in)
    t = rng.random(n)
    x = 0.5 + 0.4 * np.sin(2.0 * np.pi * t[:, None] + phases[None, :])
    return Dataset(examples=np.clip(x, 0.0, 1.0), split="train",
                   source=f"synthetic:n={n},d={d_in},seed={seed}")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything one CLI invocation needs: training protocol plus dataset
    source, architecture name, output directory, and certification delta."""

    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str = "synthetic"
    architecture: str = "synth"
    output_dir: str = "out"
    delta: float = 0.05

    @property
    def seed(self) -> int:
        return self.train.rng_seed


_TRAIN_KEYS = {
    "method": str,
    "epsilon": float,
    "learning_rate": float,
    "weight_decay": float,
    "epochs": int,
    "batch_size": int,
    "warmup_standard_iters": int,
    "warmup_ramp_iters": int,
    "pgd_steps": int,
    "pgd_step_frac": float,
    "sabr_tau": float,
    "kl_beta": float,
    "civet_weight": float,
    "optimizer": str,
    "momentum": float,
}

_RUN_KEYS = {
    "dataset": str,
    "architecture": str,
    "output_dir": str,
    "delta": float,
}

KNOWN_KEYS = sorted(_TRAIN_KEYS) + ["delta_schedule", "seed"] + sorted(_RUN_KEYS)


def _parse_value(key: str, raw: str, line: int):
    if key == "seed":
        caster = int
    elif key in _TRAIN_KEYS:
        caster = _TRAIN_KEYS[key]
    elif key in _RUN_KEYS:
        caster = _RUN_KEYS[key]
    elif key == "delta_schedule":
        try:
            return DeltaSchedule(tuple(float(v) for v in raw.split(",") if v.strip()))
        except ValueError as exc:
            raise ConfigError(f"bad delta_schedule {raw!r}: {exc}", line) from exc
    else:
        raise ConfigError(f"unknown key {key!r} (known keys: {', '.join(KNOWN_KEYS)})", line)
    if caster is str:
        return raw
    try:
        return caster(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key} value {raw!r} as {caster.__name__}",
                          line) from exc


def apply_assignments(cfg: RunConfig, pairs: list[tuple[str, str, int]]) -> RunConfig:
    """Apply (key, raw value, line) triples onto a RunConfig, last one wins."""
    for key, raw, line in pairs:
        value = _parse_value(key, raw, line)
        if key == "seed":
            cfg.train.rng_seed = value
        elif key == "delta_schedule":
            cfg.train.delta_schedule = value
        elif key in _TRAIN_KEYS:
            setattr(cfg.train, key, value)
        else:
            setattr(cfg, key, value)
    return cfg


def parse_config(path) -> RunConfig:
    """Parse a config file; duplicate and unknown keys are hard errors."""
    pairs: list[tuple[str, str, int]] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, rawline in enumerate(fh, start=1):
            text = rawline.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"expected 'key = value', got {rawline.strip()!r}", lineno)
            key, raw = (part.strip() for part in text.split("=", 1))
            if key in seen:
                raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", lineno)
            seen[key] = lineno
            pairs.append((key, raw, lineno))
    cfg = RunConfig()
    apply_assignments(cfg, pairs)
    cfg.train.validate()
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Emit a config text that parses back to an identical RunConfig."""
    lines = []
    t = cfg.train
    lines.append(f"method = {t.method}")
    lines.append(f"epsilon = {t.epsilon!r}")
    lines.append("delta_schedule = " + ",".join(repr(d) for d in t.delta_schedule.deltas))
    lines.append(f"learning_rate = {t.learning_rate!r}")
    lines.append(f"weight_decay = {t.weight_decay!r}")
    lines.append(f"epochs = {t.epochs}")
    lines.append(f"batch_size = {t.batch_size}")
    lines.append(f"warmup_standard_iters = {t.warmup_standard_iters}")
    lines.append(f"warmup_ramp_iters = {t.warmup_ramp_iters}")
    lines.append(f"pgd_steps = {t.pgd_steps}")
    lines.append(f"pgd_step_frac = {t.pgd_step_frac!r}")
    lines.append(f"sabr_tau = {t.sabr_tau!r}")
    lines.append(f"kl_beta = {t.kl_beta!r}")
    lines.append(f"civet_weight = {t.civet_weight!r}")
    lines.append(f"optimizer = {t.optimizer}")
    lines.append(f"momentum = {t.momentum!r}")
    lines.append(f"seed = {t.rng_seed}")
    lines.append(f"dataset = {cfg.dataset}")
    lines.append(f"architecture = {cfg.architecture}")
    lines.append(f"output_dir = {cfg.output_dir}")
    lines.append(f"delta = {cfg.delta!r}")
    return "\n".join(lines) + "\n"


def config_echo(cfg: RunConfig) -> dict:
    """JSON-friendly snapshot of a RunConfig for report summaries.

    Deliberately excludes output_dir so reports written to different places
    by otherwise identical runs stay byte-identical.
    """
    t = cfg.train
    echo = {f.name: getattr(t, f.name) for f in dc_fields(t)
            if f.name != "delta_schedule"}
    echo["delta_schedule"] = list(t.delta_schedule.deltas)
    echo.update({"dataset": cfg.dataset, "architecture": cfg.architecture,
                 "delta": cfg.delta})
    return echo


def _parse_source_args(source: str) -> tuple[str, dict]:
    if ":" not in source:
        return source, {}
    head, _, tail = source.partition(":")
    args: dict = {}
    for item in tail.split(","):
        if not item:
            continue
        if "=" not in item:
            args["path"] = item if "path" not in args else args["path"] + "," + item
            continue
        k, _, v = item.partition("=")
        args[k.strip()] = v.strip()
    return head, args


def load_run_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets for a run.

    * ``synthetic[:n=...,d=...,seed=...]`` draws one pool of n + n/5 points on
      the same manifold and slices it into train/test (desk-scale 1000/200).
    * ``idx:PATH[,limit=...]`` takes the first ``limit`` images for training
      and the following limit/5 for testing.
    """
    head, args = _parse_source_args(cfg.dataset)
    if head == "synthetic":
        n = int(args.get("n", 1000))
        d = int(args.get("d", 8))
        seed = int(args.get("seed", 0))
        n_test = max(n // 5, 1)
        pool = synthetic_dataset(n + n_test, d, seed)
        train = Dataset(pool.examples[:n], split="train", source=pool.source)
        test = Dataset(pool.examples[n:], split="test", source=pool.source)
        return train, test
    if head == "idx":
        path = args.get("path")
        if not path:
            raise ConfigError("idx dataset needs a path: dataset = idx:FILE[,limit=N]")
        limit = int(args.get("limit", 1000))
        n_test = max(limit // 5, 1)
        full = load_idx(path, limit=limit + n_test)
        train = Dataset(full.examples[:limit], split="train", source=full.source,
                        image_shape=full.image_shape)
        if full.examples.shape[0] > limit:
            test = Dataset(full.examples[limit:], split="test", source=full.source,
                           image_shape=full.image_shape)
        else:
            test = Dataset(full.examples[-n_test:], split="test", source=full.source,
                           image_shape=full.image_shape)
        return train, test
    raise ConfigError(f"unknown dataset source {cfg.dataset!r}; "
                      f"expected 'synthetic[:...]' or 'idx:PATH'")
