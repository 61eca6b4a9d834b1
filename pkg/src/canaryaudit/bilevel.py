"""Bilevel canary refinement with coupled single-loop updates.

The outer objective over the canary features C_x is

    Phi(C) = sum_{z in C} [ s(theta_ref, z) - s(theta_C, z) ] + R(C),
    R(C)   = reg_strength * sum_{i != j} <phi_ref(z_i), phi_ref(z_j)>^2,

where theta_ref is the model trained on the dataset alone (frozen), theta_C
the model trained with the canaries included, s = -loss, and phi_ref the
embedding under theta_ref. R counts ordered pairs: both (i, j) and (j, i).

Three coupled variables are maintained: theta tracks theta_C, v tracks the
solution of  H(theta_C) v = sum_z grad_theta s(theta_C, z),  and the canary
features take approximate hypergradient steps. Each step computes all three
right-hand sides from pre-step values, then commits:

    theta <- theta - eta * grad L(theta, batch)
    v     <- v - eta * [ H(theta, batch) v - sum_z grad_theta s(theta, z) ]
    C_x   <- C_x - rho * [ mixed(theta, z) v / n - grad_x l(theta_ref, z)
                           + grad_x l(theta, z) + grad R ]        (per canary)

The sign of the score term in the v update is chosen so that the v
equilibrium is exactly the linear system above; at theta = theta_C, v = v*
the feature update then coincides with the exact hypergradient (this is
pinned by the finite-difference and coincidence tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .data import Dataset
from .influence import InfluenceConfig, SolveError, _cg, is_strongly_convex
from .models import Arch, MlpArch, Model, fit_erm
from .training import DivergenceError, TrainConfig, train


@dataclass
class CanarySet:
    """m canary records: mutable feature rows, frozen labels, and the dataset
    indices they were selected from. Optional per-feature box bounds are
    applied after every feature update."""

    features: np.ndarray
    labels: np.ndarray
    origin_indices: np.ndarray
    box_bounds: Optional[tuple] = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        labels.flags.writeable = False
        self.labels = labels
        self.origin_indices = np.asarray(self.origin_indices, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("inconsistent canary shapes")
        if self.origin_indices.shape != (self.features.shape[0],):
            raise ValueError("origin_indices must have one entry per canary")

    @property
    def m(self) -> int:
        return self.features.shape[0]

    def copy(self) -> "CanarySet":
        return CanarySet(
            self.features.copy(), self.labels.copy(), self.origin_indices.copy(),
            self.box_bounds,
        )

    def project(self) -> None:
        if self.box_bounds is not None:
            lo, hi = self.box_bounds
            np.clip(self.features, lo, hi, out=self.features)


@dataclass(frozen=True)
class BilevelConfig:
    outer_step: float
    batch_size: int
    inner_step: float = 0.05
    reg_strength: float = 0.1
    epochs: int = 100
    seed: int = 0
    v_refresh_epochs: int = 10
    box_project: bool = True
    trace_every: int = 50
    damping: float = 0.0
    cg_tol: float = 1e-8
    cg_max_iters: int = 2000
    warm_tol: float = 1e-8

    def __post_init__(self):
        if self.inner_step < 0 or self.outer_step < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be nonnegative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("bad epochs/batch_size")


@dataclass
class BilevelState:
    model: Model
    v: np.ndarray
    canaries: CanarySet
    ref_model: Model
    inner_step: float
    outer_step: float
    reg_strength: float
    n_total: int
    t: int = 0


class TraceRecord(NamedTuple):
    t: int
    phi: float
    reg: float
    displacement: float


# ---------------------------------------------------------------------------
# regularizer
# ---------------------------------------------------------------------------


def regularizer(canaries: CanarySet, ref_model: Model, reg_strength: float) -> float:
    """reg_strength * sum over ordered pairs i != j of the squared embedding
    inner products under the reference model."""
    if canaries.m <= 1 or reg_strength == 0.0:
        return 0.0
    emb = ref_model.embed_batch(canaries.features)
    gram = emb @ emb.T
    np.fill_diagonal(gram, 0.0)
    return reg_strength * float((gram * gram).sum())


def regularizer_grad(canaries: CanarySet, ref_model: Model, reg_strength: float) -> np.ndarray:
    """d regularizer / d features, one row per canary. For canary i the
    ordered double sum contributes 4 * reg_strength * sum_{j != i}
    <phi_i, phi_j> J_phi(x_i)^T phi_j."""
    out = np.zeros_like(canaries.features)
    if canaries.m <= 1 or reg_strength == 0.0:
        return out
    emb = ref_model.embed_batch(canaries.features)
    gram = emb @ emb.T
    np.fill_diagonal(gram, 0.0)
    cotangents = 4.0 * reg_strength * (gram @ emb)
    return ref_model.embed_vjp_batch(canaries.features, cotangents)


# ---------------------------------------------------------------------------
# objective, exact hypergradient
# ---------------------------------------------------------------------------


def phi_objective(state: BilevelState) -> float:
    """Distinguishability sum plus regularizer, evaluated with the tracked
    model standing in for theta_C."""
    return phi_value(state.model, state.ref_model, state.canaries, state.reg_strength)


def phi_value(model: Model, ref_model: Model, canaries: CanarySet, reg_strength: float) -> float:
    feats, labs = canaries.features, canaries.labels
    # s(ref) - s(model) = loss(model) - loss(ref)
    gap = model.losses_batch(feats, labs) - ref_model.losses_batch(feats, labs)
    return float(gap.sum()) + regularizer(canaries, ref_model, reg_strength)


def _solve_v(model: Model, aug: Dataset, canaries: CanarySet, damping, cg_tol, cg_max_iters):
    """v solving (H + damping I) v = sum_z grad_theta s(theta, z) over the
    canaries, with H the Hessian of the mean loss on the augmented dataset."""
    _, G = model.per_example_grads(canaries.features, canaries.labels)
    rhs = -G.sum(axis=0)

    def matvec(w):
        hv = model.hvp_theta((aug.x, aug.y), w)
        return hv + damping * w if damping > 0 else hv

    v, rel = _cg(matvec, rhs, cg_tol, cg_max_iters)
    if rel > cg_tol:
        raise SolveError(f"v-solve residual {rel:.3e} > {cg_tol:g}")
    return v


def hypergradient_exact(
    dataset: Dataset,
    canaries: CanarySet,
    arch: Arch,
    reg_strength: float,
    cg_tol: float = 1e-10,
    cg_max_iters: int = 5000,
    inner_tol: float = 1e-9,
) -> np.ndarray:
    """Exact hypergradient rows of Phi, one per canary, via implicit
    differentiation with exactly re-solved inner problems. Restricted to the
    strongly convex architectures."""
    if not is_strongly_convex(arch):
        raise ValueError("exact hypergradients need a strongly convex architecture")
    ref = fit_erm(dataset, arch, tol=inner_tol)
    aug = dataset.with_rows(canaries.features, canaries.labels)
    inner = fit_erm(aug, arch, tol=inner_tol)
    n = len(aug)
    v = _solve_v(inner, aug, canaries, 0.0, cg_tol, cg_max_iters)
    feats, labs = canaries.features, canaries.labels
    gx_ref = ref.grad_x_batch(feats, labs)
    gx_in = inner.grad_x_batch(feats, labs)
    mixed = inner.mixed_hvp_batch(feats, labs, v)
    rows = mixed / n - gx_ref + gx_in
    return rows + regularizer_grad(canaries, ref, reg_strength)


# ---------------------------------------------------------------------------
# coupled updates
# ---------------------------------------------------------------------------


def soba_step(state: BilevelState, batch: Dataset) -> BilevelState:
    """One coupled update. All right-hand sides are evaluated at the pre-step
    (theta, v, C_x), then committed together; the canary features are box-
    projected afterwards and t is incremented."""
    model, v, canaries = state.model, state.v, state.canaries
    feats, labs = canaries.features, canaries.labels

    _, g_batch = model.batch_loss_grad(batch.x, batch.y)
    hv = model.hvp_theta((batch.x, batch.y), v)
    _, G_can = model.per_example_grads(feats, labs)
    # sum_z grad_theta s = -sum of per-canary loss gradients
    v_rhs = hv + G_can.sum(axis=0)

    gx_t = model.grad_x_batch(feats, labs)
    gx_ref = state.ref_model.grad_x_batch(feats, labs)
    mixed = model.mixed_hvp_batch(feats, labs, v)
    outer_rows = mixed / state.n_total - gx_ref + gx_t
    outer_rows = outer_rows + regularizer_grad(canaries, state.ref_model, state.reg_strength)

    new_theta = model.theta - state.inner_step * g_batch
    new_v = v - state.inner_step * v_rhs
    new_feats = feats - state.outer_step * outer_rows
    if not (
        np.all(np.isfinite(new_theta))
        and np.all(np.isfinite(new_v))
        and np.all(np.isfinite(new_feats))
    ):
        raise DivergenceError(
            f"non-finite coupled update at t={state.t}; reduce the step sizes"
        )
    state.model = model.copy_with(new_theta)
    state.v = new_v
    canaries.features[...] = new_feats
    canaries.project()
    state.t += 1
    return state


def warm_start(
    dataset: Dataset,
    canaries: CanarySet,
    arch: Arch,
    cfg: BilevelConfig,
    trainer_cfg: Optional[TrainConfig] = None,
):
    """(theta0, v0) near the augmented optimum: an exact solve for the
    strongly convex architectures, the SGD trainer otherwise."""
    if canaries.m == 0:
        raise ValueError("empty canary set")
    aug = dataset.with_rows(canaries.features, canaries.labels)
    if is_strongly_convex(arch):
        model = fit_erm(aug, arch, tol=cfg.warm_tol)
    else:
        if trainer_cfg is None:
            raise ValueError("non-convex warm start needs a trainer config")
        model = train(aug, arch, trainer_cfg)
    v = _solve_v(model, aug, canaries, cfg.damping, cfg.cg_tol, cfg.cg_max_iters)
    return model, v


def ibis_run(
    dataset: Dataset,
    arch: Arch,
    influence_cfg: InfluenceConfig,
    bilevel_cfg: BilevelConfig,
    trainer_cfg: Optional[TrainConfig] = None,
):
    """Full crafting pipeline: greedy influence selection, removal of the
    selected rows from the dataset, reference/warm-start training, then
    ``epochs`` passes of coupled updates over the reduced dataset plus the
    evolving canaries. Returns (CanarySet, trace records).

    The per-epoch batch pool materializes the canary features at epoch start;
    the score/hypergradient sums always use the current features.
    """
    from .influence import InfluenceEngine, greedy_select

    if influence_cfg.preselect_p > len(dataset):
        raise ValueError("preselect_p exceeds dataset size")

    # selection model is trained on the full pool: candidates are dataset
    # members at selection time
    if is_strongly_convex(arch):
        select_model = fit_erm(dataset, arch)
    else:
        if trainer_cfg is None:
            raise ValueError("non-convex selection needs a trainer config")
        select_model = train(dataset, arch, trainer_cfg)
    engine = InfluenceEngine(select_model, dataset, influence_cfg)
    pool = engine.preselect()
    matrix = engine.build_matrix(pool)
    positions = greedy_select(matrix, influence_cfg.num_canaries_m, influence_cfg.denom_floor)
    origin = matrix.indices[positions]

    box = None
    if bilevel_cfg.box_project:
        box = (dataset.x.min(axis=0).copy(), dataset.x.max(axis=0).copy())
    canaries = CanarySet(
        dataset.x[origin].copy(), dataset.y[origin].copy(), origin, box_bounds=box
    )
    reduced = dataset.without(origin)

    if is_strongly_convex(arch):
        ref_model = fit_erm(reduced, arch)
    else:
        ref_model = train(reduced, arch, trainer_cfg)

    trace: list[TraceRecord] = []
    if bilevel_cfg.epochs == 0:
        return canaries, trace

    theta0, v0 = warm_start(reduced, canaries, arch, bilevel_cfg, trainer_cfg)
    state = BilevelState(
        model=theta0,
        v=v0,
        canaries=canaries,
        ref_model=ref_model,
        inner_step=bilevel_cfg.inner_step,
        outer_step=bilevel_cfg.outer_step,
        reg_strength=bilevel_cfg.reg_strength,
        n_total=len(reduced) + canaries.m,
    )
    start_feats = canaries.features.copy()
    rng = np.random.default_rng(np.random.SeedSequence(bilevel_cfg.seed))

    def record():
        disp = float(np.sqrt(((canaries.features - start_feats) ** 2).sum(axis=1)).mean())
        trace.append(
            TraceRecord(
                state.t,
                phi_objective(state),
                regularizer(canaries, ref_model, state.reg_strength),
                disp,
            )
        )

    record()
    n_aug = len(reduced) + canaries.m
    for epoch in range(bilevel_cfg.epochs):
        if epoch > 0 and bilevel_cfg.v_refresh_epochs > 0 and epoch % bilevel_cfg.v_refresh_epochs == 0:
            aug_now = reduced.with_rows(canaries.features, canaries.labels)
            state.v = _solve_v(
                state.model, aug_now, canaries,
                bilevel_cfg.damping, bilevel_cfg.cg_tol, bilevel_cfg.cg_max_iters,
            )
        epoch_pool = reduced.with_rows(canaries.features, canaries.labels)
        perm = rng.permutation(n_aug)
        for b in range(math.ceil(n_aug / bilevel_cfg.batch_size)):
            idx = perm[b * bilevel_cfg.batch_size:(b + 1) * bilevel_cfg.batch_size]
            soba_step(state, epoch_pool.subset(idx))
            if bilevel_cfg.trace_every > 0 and state.t % bilevel_cfg.trace_every == 0:
                record()
    if not trace or trace[-1].t != state.t:
        record()
    return canaries, trace


# ---------------------------------------------------------------------------
# canary CSV
# ---------------------------------------------------------------------------


def save_canaries_csv(path, canaries: CanarySet, comment: str = "") -> None:
    """One row per canary: origin_index, label, then the feature floats. An
    optional comment (e.g. provenance) is written first as a '#' line."""
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        d = canaries.features.shape[1]
        fh.write("origin_index,label," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for i in range(canaries.m):
            row = [str(int(canaries.origin_indices[i])), repr(float(canaries.labels[i]))]
            row.extend(repr(float(v)) for v in canaries.features[i])
            fh.write(",".join(row) + "\n")


def load_canaries_csv(path) -> CanarySet:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip() and not ln.startswith("#")]
    origins, labels, feats = [], [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        origins.append(int(parts[0]))
        labels.append(float(parts[1]))
        feats.append([float(v) for v in parts[2:]])
    return CanarySet(np.array(feats), np.array(labels), np.array(origins))
