"""Self/cross influence scores and greedy canary selection.

The influence of z' on the loss-based score of z is
I(z, z') = grad_l(z)^T H^{-1} grad_l(z'), with H the (damped) Hessian of the
mean training loss at the trained model. Matrix convention, pinned here and
relied on by the selection objective: ``scores[i, j] = I(z_i, z_j)`` is the
influence of z_j on the score of z_i. The selection objective for a set C is

    f(C) = sum_{a in C} scores[a, a] / max(denom_floor, max_{b in C, b != a} scores[b, a])

i.e. the denominator for canary a reads column a over the other selected
rows: how strongly a perturbs the scores of the already-selected canaries.
Cross terms can be <= 0, so the denominator is clamped to a positive floor;
with an all-floored denominator the ordering degrades to self-influence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .data import Dataset, Sample
from .models import Arch, LinearArch, LogisticArch, MlpArch, Model


class SolveError(RuntimeError):
    """An inverse-Hessian solve failed to reach the requested residual."""


@dataclass(frozen=True)
class InfluenceConfig:
    preselect_p: int
    num_canaries_m: int
    damping: float = 0.0
    cg_tol: float = 1e-10
    cg_max_iters: int = 2000
    denom_floor: float = 1e-8

    def __post_init__(self):
        if self.preselect_p < self.num_canaries_m:
            raise ValueError(
                f"preselect_p ({self.preselect_p}) must be >= num_canaries_m "
                f"({self.num_canaries_m})"
            )
        if self.cg_tol <= 0 or self.denom_floor <= 0:
            raise ValueError("cg_tol and denom_floor must be positive")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")


def default_damping(arch: Arch) -> float:
    """1e-3 for MLPs (indefinite Hessians need damping for CG), 0 for the
    strongly convex architectures."""
    return 1e-3 if isinstance(arch, MlpArch) else 0.0


def is_strongly_convex(arch: Arch) -> bool:
    if isinstance(arch, LinearArch):
        return True
    if isinstance(arch, LogisticArch):
        return arch.l2 > 0
    return False


def score(model: Model, z: Sample) -> float:
    """Loss-based membership score: minus the loss."""
    return -model.loss(z)


def scores_batch(model: Model, X, Y) -> np.ndarray:
    return -model.losses_batch(X, Y)


def _cg(matvec, b: np.ndarray, tol: float, max_iters: int):
    """Plain conjugate gradients on an SPD operator; returns (x, rel_residual)."""
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0.0
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for _ in range(max_iters):
        hp = matvec(p)
        alpha = rs / float(p @ hp)
        x += alpha * p
        r -= alpha * hp
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * bnorm:
            return x, np.sqrt(rs_new) / bnorm
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, np.sqrt(rs) / bnorm


def inverse_hvp(model: Model, dataset: Dataset, b: np.ndarray, cfg: InfluenceConfig) -> np.ndarray:
    """Conjugate-gradient solve of (H + damping I) u = b with matrix-free
    Hessian-vector products over the dataset."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != model.theta.shape:
        raise ValueError(f"b has length {b.size}, expected {model.theta.size}")

    def matvec(v):
        hv = model.hvp_theta((dataset.x, dataset.y), v)
        return hv + cfg.damping * v if cfg.damping > 0 else hv

    u, rel = _cg(matvec, b, cfg.cg_tol, cfg.cg_max_iters)
    if rel > cfg.cg_tol:
        raise SolveError(
            f"CG did not converge in {cfg.cg_max_iters} iterations: "
            f"relative residual {rel:.3e} > {cfg.cg_tol:g}"
        )
    return u


def influence_pair(
    model: Model, dataset: Dataset, z: Sample, z_prime: Sample, cfg: InfluenceConfig
) -> float:
    """I(z, z') via one CG solve. The two sign flips of the loss-based score
    cancel, leaving grad_l(z)^T H^{-1} grad_l(z')."""
    u = inverse_hvp(model, dataset, model.grad_theta(z_prime), cfg)
    return float(model.grad_theta(z) @ u)


@dataclass
class InfluenceMatrix:
    """Pairwise influence scores over a preselected pool.

    ``indices[i]`` is the dataset index of pool position i;
    ``scores[i, j]`` is the influence of pool member j on the score of pool
    member i (see the module docstring for how the selection objective reads
    this matrix).
    """

    indices: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        p = self.indices.size
        if self.scores.shape != (p, p):
            raise ValueError(f"scores shape {self.scores.shape} != ({p}, {p})")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite influence scores")

    @property
    def p(self) -> int:
        return self.indices.size


class InfluenceEngine:
    """Batch influence computations at a fixed (model, dataset).

    Single solves go through CG (`inverse_hvp`); batch solves build the
    damped Hessian once (p HVP columns), factorize it, and validate every
    solution against the CG residual contract, falling back to CG polish for
    any column that misses it. The model's optimality gap (gradient norm on
    the dataset) is recorded for reporting, not enforced.
    """

    def __init__(self, model: Model, dataset: Dataset, cfg: InfluenceConfig):
        self.model = model
        self.dataset = dataset
        self.cfg = cfg
        _, g = model.batch_loss_grad(dataset.x, dataset.y)
        self.optimality_gap = float(np.linalg.norm(g))
        self._hess = None
        self._chol = None

    def _dense_hessian(self) -> np.ndarray:
        if self._hess is None:
            p = self.model.num_params
            H = np.empty((p, p))
            e = np.zeros(p)
            for i in range(p):
                e[i] = 1.0
                H[:, i] = self.model.hvp_theta((self.dataset.x, self.dataset.y), e)
                e[i] = 0.0
            if self.cfg.damping > 0:
                H[np.diag_indices_from(H)] += self.cfg.damping
            self._hess = H
        return self._hess

    def solve_many(self, B: np.ndarray) -> np.ndarray:
        """Rows of (H + damping I)^{-1} b for each row b of B."""
        H = self._dense_hessian()
        if self._chol is None:
            try:
                self._chol = sla.cho_factor(H)
            except np.linalg.LinAlgError as exc:
                raise SolveError(f"damped Hessian is not positive definite: {exc}") from exc
        U = sla.cho_solve(self._chol, B.T).T
        resid = U @ H.T - B
        rel = np.linalg.norm(resid, axis=1) / np.maximum(np.linalg.norm(B, axis=1), 1e-300)
        bad = np.flatnonzero(rel > self.cfg.cg_tol)
        for i in bad:
            U[i] = inverse_hvp(self.model, self.dataset, B[i], self.cfg)
        return U

    def self_influences(self, indices=None) -> np.ndarray:
        idx = np.arange(len(self.dataset)) if indices is None else np.asarray(indices)
        _, G = self.model.per_example_grads(self.dataset.x[idx], self.dataset.y[idx])
        U = self.solve_many(G)
        return np.einsum("ij,ij->i", G, U)

    def preselect(self) -> np.ndarray:
        """Dataset indices of the preselect_p samples with highest
        self-influence, in descending order, ties broken by lowest index."""
        p = self.cfg.preselect_p
        if p > len(self.dataset):
            raise ValueError(f"preselect_p {p} exceeds dataset size {len(self.dataset)}")
        s = self.self_influences()
        order = np.lexsort((np.arange(s.size), -s))
        return order[:p].astype(np.int64)

    def build_matrix(self, pool_indices) -> InfluenceMatrix:
        pool = np.asarray(pool_indices, dtype=np.int64)
        if np.unique(pool).size != pool.size:
            raise ValueError("pool indices must be distinct")
        if pool.size and (pool.min() < 0 or pool.max() >= len(self.dataset)):
            raise ValueError("pool indices out of range")
        _, G = self.model.per_example_grads(self.dataset.x[pool], self.dataset.y[pool])
        U = self.solve_many(G)
        M = G @ U.T
        matrix = InfluenceMatrix(pool, M)
        if is_strongly_convex(self.model.arch):
            diag = np.diag(M)
            slack = 1e-8 * max(1.0, float(np.abs(diag).max(initial=0.0)))
            if diag.min(initial=0.0) < -slack:
                raise SolveError(
                    f"negative self-influence {diag.min():.3e} on a strongly convex "
                    "architecture: inverse-Hessian solves are unreliable"
                )
        return matrix


def objective_f(selected, matrix: InfluenceMatrix, denom_floor: float = 1e-8) -> float:
    """Selection objective f over pool positions ``selected``."""
    sel = np.asarray(selected, dtype=np.int64)
    if sel.size < 2:
        raise ValueError("objective needs at least 2 selected canaries")
    sub = matrix.scores[np.ix_(sel, sel)]
    cross = sub.copy()
    np.fill_diagonal(cross, -np.inf)
    denom = np.maximum(cross.max(axis=0), denom_floor)
    return float((np.diag(sub) / denom).sum())


def _argmax_tiebreak(values: np.ndarray, keys: np.ndarray, candidates: np.ndarray) -> int:
    """Position (within candidates) maximizing values, ties by lowest key."""
    vals = values[candidates]
    best = vals.max()
    tied = candidates[vals == best]
    return int(tied[np.argmin(keys[tied])])


def greedy_select(matrix: InfluenceMatrix, m: int, denom_floor: float = 1e-8) -> np.ndarray:
    """Greedy selection over the pool: seed with the highest self-influence,
    then repeatedly add the position maximizing
    self / max(denom_floor, max cross-influence from the selected set).
    Ties break toward the lowest dataset index. Returns pool positions in
    selection order; map through ``matrix.indices`` for dataset indices.
    """
    p = matrix.p
    if m > p:
        raise ValueError(f"m={m} exceeds pool size {p}")
    if m < 1:
        raise ValueError("m must be >= 1")
    scores = matrix.scores
    self_inf = np.diag(scores).copy()
    keys = matrix.indices
    remaining = np.arange(p)
    first = _argmax_tiebreak(self_inf, keys, remaining)
    selected = [first]
    remaining = remaining[remaining != first]
    # columnwise max of the selected rows: cross[a] = max_{b selected} scores[b, a]
    cross = scores[first].copy()
    for _ in range(m - 1):
        ratio = self_inf / np.maximum(cross, denom_floor)
        nxt = _argmax_tiebreak(ratio, keys, remaining)
        selected.append(nxt)
        remaining = remaining[remaining != nxt]
        cross = np.maximum(cross, scores[nxt])
    return np.array(selected, dtype=np.int64)


def save_matrix_csv(path, matrix: InfluenceMatrix, comment: str = "") -> None:
    """Header row of dataset indices, then p rows of p floats. An optional
    comment (e.g. provenance) is written first as a '#' line."""
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(",".join(str(int(i)) for i in matrix.indices) + "\n")
        for row in matrix.scores:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_matrix_csv(path) -> InfluenceMatrix:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip() and not ln.startswith("#")]
    indices = np.array([int(v) for v in lines[0].split(",")], dtype=np.int64)
    scores = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    return InfluenceMatrix(indices, scores)
