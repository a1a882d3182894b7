"""Loss functions, adversarial attacks, and the certified training loop.

The robust objective propagates the input region through the encoder, picks
one latent support box per scheduled failure mass, bounds the decoder output
over each box, and sums the per-box worst-case reconstruction errors with
telescoping probability weights. Training warms up on the standard VAE loss,
then linearly ramps the perturbation radius while the robust term is mixed
in.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gaussian import DeltaSchedule, SupportSet, find_support
from .intervals import InputRegion, IntervalTensor, propagate_decoder, propagate_encoder
from .model import ArchitectureSpec, decode, encode, init_parameters, reparameterize
from .tensor import ParameterSet, Tape, Tensor


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message names the offending batch."""


@dataclass(frozen=True)
class ErrorMetric:
    """Error function over decoder outputs: mean squared error or SNR-style
    relative squared error (reported in dB).

    ``reduction`` fixes how per-output errors aggregate: 'mean' over output
    dims for mse, the ground-truth-normalized 'sum' ratio for snr.
    """

    kind: str = "mse"
    reduction: str = "mean"

    def __post_init__(self):
        if self.kind not in ("mse", "snr"):
            raise ValueError(f"unknown metric kind {self.kind!r}; expected 'mse' or 'snr'")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


TRAIN_METHODS = ("standard", "pgd", "civet", "civet-sabr")


@dataclass
class TrainConfig:
    """Training protocol constants; defaults follow the reference protocol
    (lr 1e-4, weight decay 1e-5, 250 + 250 warmup iterations, 10 PGD steps at
    0.1 * epsilon, tau 0.1)."""

    method: str = "standard"
    epsilon: float = 0.1
    delta_schedule: DeltaSchedule = field(
        default_factory=lambda: DeltaSchedule((0.35, 0.2, 0.05)))
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 1
    batch_size: int = 32
    warmup_standard_iters: int = 250
    warmup_ramp_iters: int = 250
    pgd_steps: int = 10
    pgd_step_frac: float = 0.1
    sabr_tau: float = 0.1
    rng_seed: int = 0
    kl_beta: float = 1e-3
    civet_weight: float = 1.0
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.9

    def validate(self) -> None:
        if self.method not in TRAIN_METHODS:
            raise ValueError(f"unknown training method {self.method!r}; "
                             f"expected one of {TRAIN_METHODS}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if not 0 < self.sabr_tau <= 1:
            raise ValueError("sabr_tau must lie in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.method in ("civet", "civet-sabr") and len(self.delta_schedule) < 1:
            raise ValueError("civet methods need a delta schedule")


def _as_batch(x: Tensor) -> Tensor:
    if x.data.ndim == 1:
        return T.reshape(x, (1, x.shape[0]))
    return x


# ---------------------------------------------------------------------------
# losses


def kl_divergence(dist) -> Tensor:
    """Closed-form KL(q || N(0, I)) for a diagonal Gaussian, batch mean.

    Per example: -0.5 * sum_i (1 + logvar_i - mu_i^2 - sigma_i^2); zero
    exactly when mu = 0 and sigma = 1.
    """
    terms = T.sub(T.sub(T.shift(dist.logvar, 1.0), T.square(dist.mu)), T.exp(dist.logvar))
    per_example = T.tsum(terms, axis=terms.data.ndim - 1)
    return T.scale(T.tmean(per_example), -0.5)


def reconstruction_mse(y: Tensor, target: Tensor) -> Tensor:
    return T.tmean(T.square(T.sub(y, target)))


def standard_loss(params: ParameterSet, x: Tensor, rng, kl_beta: float = 1e-3) -> Tensor:
    """Reconstruction MSE plus kl_beta * KL, the plain VAE objective."""
    x = _as_batch(x)
    dist = encode(params, x)
    z = reparameterize(dist, rng)
    y = decode(params, z)
    return T.add(reconstruction_mse(y, x), T.scale(kl_divergence(dist), kl_beta))


def interval_worst_mse(out_iv: IntervalTensor, target: Tensor) -> Tensor:
    """Tight worst case of squared error over an output box, averaged.

    max over y in [lower, upper] of (y - t)^2 is attained at an endpoint.
    """
    low_err = T.square(T.sub(out_iv.lower, target))
    high_err = T.square(T.sub(out_iv.upper, target))
    return T.tmean(T.maximum(low_err, high_err))


@dataclass
class CivetLossDetail:
    loss: Tensor
    per_delta: list[float]
    supports: list[SupportSet]
    weights: list[float]


def civet_loss(params: ParameterSet, x: Tensor, epsilon: float, schedule: DeltaSchedule,
               clamp: tuple[float, float] | None = (0.0, 1.0), max_depth: int = 60,
               region: InputRegion | None = None,
               frozen_quantiles: list[np.ndarray] | None = None,
               detail: bool = False):
    """Weighted sum of decoder worst-case bounds over nested support boxes.

    Weights are [1 - d1, d1 - d2, ...]: the largest failure mass gets its
    covered probability, each tighter level the extra mass it adds.
    ``frozen_quantiles`` bypasses the per-level search with fixed icdf values
    (used by finite-difference checks, which must hold the stop-gradient
    constants fixed while parameters are perturbed).
    """
    x = _as_batch(x)
    if region is None:
        region = InputRegion(center=x.data, epsilon=epsilon, clamp=clamp)
    bounds = propagate_encoder(params, region)
    weights = schedule.weights()
    total = None
    per_delta: list[float] = []
    supports: list[SupportSet] = []
    for j, (delta_j, w) in enumerate(zip(schedule.deltas, weights)):
        if frozen_quantiles is not None:
            support = _support_from_quantiles(bounds, frozen_quantiles[j], delta_j)
        else:
            support = find_support(bounds, delta_j, max_depth=max_depth)
        out_iv = propagate_decoder(params, support)
        ldec = interval_worst_mse(out_iv, x)
        per_delta.append(float(ldec))
        supports.append(support)
        term = T.scale(ldec, w)
        total = term if total is None else T.add(total, term)
    if detail:
        return CivetLossDetail(loss=total, per_delta=per_delta, supports=supports,
                               weights=weights)
    return total


def _support_from_quantiles(bounds, quantiles: np.ndarray, delta: float) -> SupportSet:
    from .gaussian import ProbabilityThreshold
    c = Tensor(quantiles)
    half = T.mul(bounds.sigma_ub, c)
    return SupportSet(lower=T.sub(bounds.mu_lb, half), upper=T.add(bounds.mu_ub, half),
                      threshold=ProbabilityThreshold(delta), per_dim_p0=np.full_like(quantiles, np.nan),
                      quantiles=quantiles)


# ---------------------------------------------------------------------------
# attacks (projected signed-gradient ascent in the L-inf ball)


def _project(x_adv: np.ndarray, x0: np.ndarray, epsilon: float,
             clamp: tuple[float, float] | None) -> np.ndarray:
    out = np.clip(x_adv, x0 - epsilon, x0 + epsilon)
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


def _attack_input(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    single = arr.ndim == 1
    return np.atleast_2d(arr), single


def _ascend(x0: np.ndarray, single: bool, epsilon: float, steps: int, step_frac: float,
            objective, clamp: tuple[float, float] | None) -> np.ndarray:
    """Maximize ``objective`` over the ball; projects after every step."""
    x_adv = x0.copy()
    if epsilon > 0.0 and steps > 0:
        alpha = step_frac * epsilon
        for _ in range(steps):
            tape = Tape()
            xv = tape.leaf(x_adv)
            loss = objective(xv)
            grad = tape.backward(loss)[xv]
            x_adv = _project(x_adv + alpha * np.sign(grad), x0, epsilon, clamp)
    return x_adv[0] if single else x_adv


def pgd_attack(params: ParameterSet, x, epsilon: float, steps: int = 10,
               step_frac: float = 0.1, loss_kind: str = "standard",
               rng=None, kl_beta: float = 1e-3,
               clamp: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """Ascent on the training loss; the reconstruction noise draw is frozen
    for the whole attack so the objective is deterministic."""
    if loss_kind != "standard":
        raise ValueError(f"unsupported pgd loss kind {loss_kind!r}")
    x0, single = _attack_input(x)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng or 0)
    arch: ArchitectureSpec = params.arch
    eta = rng.standard_normal((x0.shape[0], arch.d_l))

    def objective(xv: Tensor) -> Tensor:
        dist = encode(params, xv)
        z = T.add(dist.mu, T.mul(dist.sigma, Tensor(eta)))
        y = decode(params, z)
        return T.add(reconstruction_mse(y, xv), T.scale(kl_divergence(dist), kl_beta))

    return _ascend(x0, single, epsilon, steps, step_frac, objective, clamp)


def lsa_attack(params: ParameterSet, x, epsilon: float, steps: int = 10,
               step_frac: float = 0.1,
               clamp: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """Latent-space attack: maximize KL(q(z|x') || q(z|x)) between the
    perturbed and clean diagonal Gaussians."""
    x0, single = _attack_input(x)
    ref = encode(params, Tensor(x0))
    mu0 = ref.mu.data
    logvar0 = ref.logvar.data
    inv_var0 = Tensor(np.exp(-logvar0))

    def objective(xv: Tensor) -> Tensor:
        dist = encode(params, xv)
        dmu = T.sub(dist.mu, Tensor(mu0))
        quad = T.mul(T.add(T.exp(dist.logvar), T.square(dmu)), inv_var0)
        terms = T.shift(T.add(T.sub(Tensor(logvar0), dist.logvar), quad), -1.0)
        per_example = T.tsum(terms, axis=terms.data.ndim - 1)
        return T.scale(T.tmean(per_example), 0.5)

    return _ascend(x0, single, epsilon, steps, step_frac, objective, clamp)


def mda_attack(params: ParameterSet, x, epsilon: float, steps: int = 10,
               step_frac: float = 0.1, rng=None,
               clamp: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    """Maximum-damage attack: maximize the reconstruction distance to the
    clean input, with one frozen latent noise draw per attack."""
    x0, single = _attack_input(x)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng or 0)
    arch: ArchitectureSpec = params.arch
    eta = rng.standard_normal((x0.shape[0], arch.d_l))
    target = Tensor(x0)

    def objective(xv: Tensor) -> Tensor:
        dist = encode(params, xv)
        z = T.add(dist.mu, T.mul(dist.sigma, Tensor(eta)))
        y = decode(params, z)
        return reconstruction_mse(y, target)

    return _ascend(x0, single, epsilon, steps, step_frac, objective, clamp)


def sabr_region(params: ParameterSet, x, epsilon: float, tau: float, rng,
                steps: int = 10, step_frac: float = 0.1,
                clamp: tuple[float, float] | None = (0.0, 1.0)) -> InputRegion:
    """Small-box region: run a maximum-damage attack at radius (1 - tau) * eps
    and center a tau * eps box there; the box stays inside the original ball
    and the data range."""
    if not 0 < tau <= 1:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    x0, _ = _attack_input(x)
    center = mda_attack(params, x0, (1.0 - tau) * epsilon, steps, step_frac, rng, clamp)
    return InputRegion(center=center, epsilon=tau * epsilon, clamp=clamp)


# ---------------------------------------------------------------------------
# optimizers (decoupled weight decay in both)


class _Sgd:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.momentum = cfg.momentum
        self.wd = cfg.weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v - self.lr * self.wd * p.data


class _Adam:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.wd = cfg.weight_decay
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.b1 ** self.t)
            v_hat = v / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps) \
                - self.lr * self.wd * p.data


def _make_optimizer(cfg: TrainConfig):
    return _Adam(cfg) if cfg.optimizer == "adam" else _Sgd(cfg)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class LogRow:
    epoch: int
    iteration: int
    std_loss: float
    civet_loss: float
    epsilon_current: float
    wall_ms: float


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)

    def epoch_summary(self) -> list[dict]:
        out = []
        epochs = sorted({r.epoch for r in self.rows})
        for e in epochs:
            rs = [r for r in self.rows if r.epoch == e]
            out.append({
                "epoch": e,
                "std_loss": float(np.mean([r.std_loss for r in rs])),
                "civet_loss": float(np.mean([r.civet_loss for r in rs])),
                "wall_ms": float(np.sum([r.wall_ms for r in rs])),
            })
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,iter,std_loss,civet_loss,epsilon_current,wall_ms\n")
            for r in self.rows:
                fh.write(f"{r.epoch},{r.iteration},{r.std_loss!r},{r.civet_loss!r},"
                         f"{r.epsilon_current!r},{r.wall_ms:.3f}\n")


def current_epsilon(cfg: TrainConfig, iteration: int) -> float:
    """0 during standard warmup, linear 0 -> epsilon over the ramp window,
    then the full radius."""
    if cfg.method == "standard":
        return 0.0
    if iteration < cfg.warmup_standard_iters:
        return 0.0
    ramped = iteration - cfg.warmup_standard_iters + 1
    if cfg.warmup_ramp_iters > 0 and ramped < cfg.warmup_ramp_iters:
        return cfg.epsilon * ramped / cfg.warmup_ramp_iters
    return cfg.epsilon


def train(cfg: TrainConfig, dataset, arch: ArchitectureSpec,
          clamp: tuple[float, float] | None = (0.0, 1.0)) -> tuple[ParameterSet, TrainingLog]:
    """Run the per-batch protocol and return final parameters plus the log.

    The single seeded generator drives parameter init, batch order, latent
    draws, and attack noise in a fixed sequence, so identical configs produce
    bit-identical parameters.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    params = init_parameters(arch, rng)
    opt = _make_optimizer(cfg)
    log = TrainingLog()
    data = np.asarray(dataset.examples if hasattr(dataset, "examples") else dataset,
                      dtype=np.float64)
    n = data.shape[0]
    iteration = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            t0 = time.perf_counter()
            xb = data[order[start:start + cfg.batch_size]]
            eps_cur = current_epsilon(cfg, iteration)

            tape = Tape()
            tracked = params.tracked(tape)
            xt = Tensor(xb)
            std = standard_loss(tracked, xt, rng, cfg.kl_beta)
            total = std
            robust_value = 0.0
            if cfg.method != "standard" and eps_cur > 0.0:
                if cfg.method == "pgd":
                    x_adv = pgd_attack(params, xb, eps_cur, cfg.pgd_steps,
                                       cfg.pgd_step_frac, rng=rng, kl_beta=cfg.kl_beta,
                                       clamp=clamp)
                    robust = standard_loss(tracked, Tensor(x_adv), rng, cfg.kl_beta)
                elif cfg.method == "civet-sabr":
                    region = sabr_region(params, xb, eps_cur, cfg.sabr_tau, rng,
                                         cfg.pgd_steps, cfg.pgd_step_frac, clamp)
                    robust = civet_loss(tracked, xt, eps_cur, cfg.delta_schedule,
                                        clamp=clamp, region=region)
                else:
                    robust = civet_loss(tracked, xt, eps_cur, cfg.delta_schedule,
                                        clamp=clamp)
                robust_value = float(robust)
                total = T.add(std, T.scale(robust, cfg.civet_weight))

            total_value = float(total)
            if not np.isfinite(total_value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, iteration {iteration} "
                    f"(batch starting at index {start})")

            grads = tape.backward(total)
            grad_by_name = {name: grads[t] for name, t in tracked.items()}
            opt.step(params, grad_by_name)

            log.rows.append(LogRow(epoch=epoch, iteration=iteration,
                                   std_loss=float(std), civet_loss=robust_value,
                                   epsilon_current=eps_cur,
                                   wall_ms=(time.perf_counter() - t0) * 1e3))
            iteration += 1
    return params, log
