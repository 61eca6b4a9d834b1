"""Seeded SGD and DP-SGD training loops.

Non-private runs use shuffled epochs; DP runs use Poisson subsampling at
rate q = batch_size/n so the accountant's amplification assumption matches
the sampler. Noise is drawn coordinate-major from a counter-based Philox
generator, one standard_normal(p) call per step, so runs are bitwise
reproducible given the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .data import Dataset
from .models import Arch, Model, init_theta

DIVERGENCE_LIMIT = 1e12


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence limit."""


@dataclass(frozen=True)
class TrainConfig:
    step_size: float
    batch_size: int
    epochs: int
    seed: int = 0

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class DPConfig:
    clip_norm: float
    noise_multiplier: float
    delta: float = 1e-5
    target_epsilon: Optional[float] = None

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")


def clip(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """min(1, clip_norm/||g||) * g. The zero vector maps to itself; an
    infinite clip_norm is the no-clipping sentinel."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    if np.isinf(clip_norm):
        return np.array(g, dtype=np.float64, copy=True)
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return (clip_norm / norm) * g


def _guard(loss: float) -> None:
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise DivergenceError(f"training diverged: batch loss {loss}")


def sgd_step(model: Model, batch: Dataset, cfg: TrainConfig) -> Model:
    if len(batch) == 0:
        raise ValueError("empty batch")
    loss, g = model.batch_loss_grad(batch.x, batch.y)
    _guard(loss)
    return model.copy_with(model.theta - cfg.step_size * g)


def dp_sgd_step(
    model: Model,
    batch: Dataset,
    cfg: TrainConfig,
    dp: DPConfig,
    rng: np.random.Generator,
    instrument=None,
) -> Model:
    """One DP-SGD update: mean of per-example clipped gradients plus Gaussian
    noise N(0, clip_norm^2 sigma^2 I), scaled by the step size. The rng is
    consumed deterministically: one standard_normal(p) draw per call.

    ``instrument``, if given, is called with (per_example_grads, clipped_mean)
    before the update is applied.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    losses, G = model.per_example_grads(batch.x, batch.y)
    _guard(float(losses.mean()))
    clipped_mean = kernels.clip_rows_mean(G, dp.clip_norm)
    if instrument is not None:
        instrument(G, clipped_mean)
    noise = dp.clip_norm * dp.noise_multiplier * rng.standard_normal(model.num_params)
    return model.copy_with(model.theta - cfg.step_size * (clipped_mean + noise))


def poisson_batches(n: int, q: float, steps: int, rng: np.random.Generator):
    """Deterministic sequence of Poisson-subsampled index arrays."""
    for _ in range(steps):
        yield np.flatnonzero(rng.random(n) < q)


def shuffled_batches(n: int, batch_size: int, epochs: int, rng: np.random.Generator):
    """Deterministic shuffled-epoch index arrays."""
    steps_per_epoch = math.ceil(n / batch_size)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for b in range(steps_per_epoch):
            yield perm[b * batch_size:(b + 1) * batch_size]


def train(
    dataset: Dataset,
    arch: Arch,
    cfg: TrainConfig,
    dp: Optional[DPConfig] = None,
) -> Model:
    """Run epochs * ceil(n/batch_size) steps of (DP-)SGD. Deterministic given
    the seed; epochs = 0 returns the initialization."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, sample_ss, noise_ss = ss.spawn(3)
    model = Model(arch, init_theta(arch, init_ss.generate_state(1)[0]), cfg.seed)
    steps = cfg.epochs * math.ceil(n / cfg.batch_size)
    if steps == 0 or cfg.step_size == 0.0:
        return model
    if dp is None:
        rng = np.random.default_rng(sample_ss)
        for idx in shuffled_batches(n, cfg.batch_size, cfg.epochs, rng):
            model = sgd_step(model, dataset.subset(idx), cfg)
        return model
    q = cfg.batch_size / n
    rng_sel = np.random.default_rng(sample_ss)
    rng_noise = np.random.Generator(np.random.Philox(noise_ss))
    for idx in poisson_batches(n, q, steps, rng_sel):
        if idx.size == 0:
            # Poisson can draw an empty batch; the gradient sum is zero but
            # the noise is still applied, keeping the mechanism well-defined.
            noise = dp.clip_norm * dp.noise_multiplier * rng_noise.standard_normal(model.num_params)
            model = model.copy_with(model.theta - cfg.step_size * noise)
            continue
        model = dp_sgd_step(model, dataset.subset(idx), cfg, dp, rng_noise)
    return model
