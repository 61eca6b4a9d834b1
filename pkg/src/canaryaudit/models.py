"""Desk-scale differentiable models: least squares, L2 logistic regression,
and tanh MLPs, with hand-derived gradients, Hessian-vector products, mixed
second derivatives, and embeddings.

All arithmetic is float64. Parameters are flat vectors, laid out layer by
layer, weights row-major then biases. Linear and logistic ops are plain
vectorized numpy (BLAS-bound, nothing to gain from numba); the MLP dispatches
to the compiled kernels in :mod:`canaryaudit.kernels`.

The logistic and MLP losses include an optional L2 term 0.5*l2*||theta||^2
per sample, so the mean training loss carries exactly one copy of it. With
l2 > 0 the logistic ERM is strongly convex; the MLP is not, and influence or
hypergradient numbers computed on it are approximations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from . import kernels
from .data import CLASSIFICATION, REGRESSION, Dataset, Sample


class ArchError(ValueError):
    """Raised when an operation is asked of an incompatible architecture."""


@dataclass(frozen=True)
class LinearArch:
    """Least squares regression y ~ <theta, x>, optional ridge term l2."""

    dim: int
    l2: float = 0.0


@dataclass(frozen=True)
class LogisticArch:
    """Softmax regression with weights (K x d) and bias (K), L2-regularized.

    l2 > 0 keeps the ERM strongly convex (it also removes the softmax
    shift degeneracy), which the influence and hypergradient machinery
    relies on.
    """

    dim: int
    num_classes: int
    l2: float = 1e-3


@dataclass(frozen=True)
class MlpArch:
    """Fully-connected tanh network. num_classes = 0 means scalar regression
    output with squared loss; otherwise softmax cross-entropy.

    tanh is fixed as the activation: the second-order machinery requires a
    twice-differentiable network.
    """

    dim: int
    hidden: tuple
    num_classes: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if len(self.hidden) < 1:
            raise ArchError("MLP needs at least one hidden layer")


Arch = Union[LinearArch, LogisticArch, MlpArch]


class EmbeddingSpec(NamedTuple):
    kind: str  # "input-features" | "last-hidden-activation"
    dim: int


def mlp_widths(arch: MlpArch) -> np.ndarray:
    out = arch.num_classes if arch.num_classes > 0 else 1
    return np.array([arch.dim, *arch.hidden, out], dtype=np.int64)


def _mlp_offsets(widths: np.ndarray):
    """(woff, boff, aoff) flat offsets for the layer-by-layer layout."""
    L = len(widths) - 1
    woff = np.zeros(L, dtype=np.int64)
    boff = np.zeros(L, dtype=np.int64)
    pos = 0
    for l in range(L):
        woff[l] = pos
        pos += widths[l + 1] * widths[l]
        boff[l] = pos
        pos += widths[l + 1]
    aoff = np.zeros(L + 1, dtype=np.int64)
    for l in range(L):
        aoff[l + 1] = aoff[l] + widths[l]
    return woff, boff, aoff, pos


def param_count(arch: Arch) -> int:
    if isinstance(arch, LinearArch):
        return arch.dim
    if isinstance(arch, LogisticArch):
        return arch.num_classes * (arch.dim + 1)
    widths = mlp_widths(arch)
    return int(sum(widths[l + 1] * (widths[l] + 1) for l in range(len(widths) - 1)))


def default_embedding_spec(arch: Arch) -> EmbeddingSpec:
    if isinstance(arch, MlpArch):
        return EmbeddingSpec("last-hidden-activation", int(arch.hidden[-1]))
    return EmbeddingSpec("input-features", arch.dim)


def task_of(arch: Arch) -> str:
    if isinstance(arch, LinearArch):
        return REGRESSION
    if isinstance(arch, LogisticArch):
        return CLASSIFICATION
    return CLASSIFICATION if arch.num_classes > 0 else REGRESSION


def init_theta(arch: Arch, seed: int) -> np.ndarray:
    """Initial parameters: zeros for the convex architectures, scaled
    Gaussian weights (1/sqrt(fan_in)) and zero biases for the MLP."""
    if isinstance(arch, (LinearArch, LogisticArch)):
        return np.zeros(param_count(arch))
    widths = mlp_widths(arch)
    woff, boff, _, total = _mlp_offsets(widths)
    rng = np.random.default_rng(seed)
    theta = np.zeros(total)
    for l in range(len(widths) - 1):
        nin, nout = int(widths[l]), int(widths[l + 1])
        theta[woff[l]:woff[l] + nout * nin] = rng.standard_normal(nout * nin) / np.sqrt(nin)
    return theta


def _softmax_rows(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Model:
    """Architecture descriptor plus a flat parameter vector.

    All operations are pure functions of (theta, inputs); a model can be
    shared read-only across threads. Single-sample ops take a
    :class:`Sample`; ``*_batch`` variants take (X, Y) arrays.
    """

    arch: Arch
    theta: np.ndarray
    rng_seed: int = 0

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (param_count(self.arch),):
            raise ArchError(
                f"theta has length {self.theta.size}, arch expects {param_count(self.arch)}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ArchError("non-finite parameters")
        if isinstance(self.arch, MlpArch):
            widths = mlp_widths(self.arch)
            woff, boff, aoff, _ = _mlp_offsets(widths)
            self._mlp = (widths, woff, boff, aoff)
        else:
            self._mlp = None

    # -- helpers ----------------------------------------------------------

    def copy_with(self, theta: np.ndarray) -> "Model":
        return Model(self.arch, theta, self.rng_seed)

    @property
    def num_params(self) -> int:
        return self.theta.size

    def _check_x(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.arch.dim:
            raise ArchError(f"feature dimension {X.shape[1]}, arch expects {self.arch.dim}")
        return np.ascontiguousarray(X)

    def _split_logistic(self, vec):
        K, d = self.arch.num_classes, self.arch.dim
        return vec[:K * d].reshape(K, d), vec[K * d:]

    # -- losses and gradients ---------------------------------------------

    def losses_batch(self, X, Y) -> np.ndarray:
        X = self._check_x(X)
        Y = np.asarray(Y, dtype=np.float64)
        arch = self.arch
        if isinstance(arch, LinearArch):
            r = X @ self.theta - Y
            out = 0.5 * r * r
            if arch.l2 > 0.0:
                out = out + 0.5 * arch.l2 * float(self.theta @ self.theta)
            return out
        if isinstance(arch, LogisticArch):
            W, b = self._split_logistic(self.theta)
            Z = X @ W.T + b
            m = Z.max(axis=1)
            lse = m + np.log(np.exp(Z - m[:, None]).sum(axis=1))
            yi = Y.astype(np.int64)
            out = lse - Z[np.arange(X.shape[0]), yi]
            if arch.l2 > 0.0:
                out = out + 0.5 * arch.l2 * float(self.theta @ self.theta)
            return out
        widths, woff, boff, aoff = self._mlp
        task = 1 if arch.num_classes > 0 else 0
        return kernels.mlp_losses(self.theta, widths, woff, boff, aoff, X, Y, arch.l2, task)

    def loss(self, z: Sample) -> float:
        return float(self.losses_batch(z.x[None, :], np.array([z.y]))[0])

    def batch_loss_grad(self, X, Y):
        """(mean loss, mean gradient) over the rows of (X, Y)."""
        X = self._check_x(X)
        Y = np.asarray(Y, dtype=np.float64)
        n = X.shape[0]
        arch = self.arch
        if isinstance(arch, LinearArch):
            r = X @ self.theta - Y
            g = X.T @ r / n
            loss = 0.5 * float(r @ r) / n
            if arch.l2 > 0.0:
                g = g + arch.l2 * self.theta
                loss += 0.5 * arch.l2 * float(self.theta @ self.theta)
            return loss, g
        if isinstance(arch, LogisticArch):
            W, b = self._split_logistic(self.theta)
            Z = X @ W.T + b
            m = Z.max(axis=1)
            lse = m + np.log(np.exp(Z - m[:, None]).sum(axis=1))
            yi = Y.astype(np.int64)
            loss = float((lse - Z[np.arange(n), yi]).mean())
            delta = np.exp(Z - lse[:, None])
            delta[np.arange(n), yi] -= 1.0
            g = np.concatenate([(delta.T @ X).ravel(), delta.sum(axis=0)]) / n
            if arch.l2 > 0.0:
                g = g + arch.l2 * self.theta
                loss += 0.5 * arch.l2 * float(self.theta @ self.theta)
            return loss, g
        widths, woff, boff, aoff = self._mlp
        task = 1 if arch.num_classes > 0 else 0
        loss, g = kernels.mlp_loss_grad(self.theta, widths, woff, boff, aoff, X, Y, arch.l2, task)
        return float(loss), g

    def per_example_grads(self, X, Y):
        """(losses, G) with one gradient row per sample."""
        X = self._check_x(X)
        Y = np.asarray(Y, dtype=np.float64)
        n = X.shape[0]
        arch = self.arch
        if isinstance(arch, LinearArch):
            r = X @ self.theta - Y
            G = r[:, None] * X
            losses = 0.5 * r * r
            if arch.l2 > 0.0:
                G = G + arch.l2 * self.theta
                losses = losses + 0.5 * arch.l2 * float(self.theta @ self.theta)
            return losses, G
        if isinstance(arch, LogisticArch):
            W, b = self._split_logistic(self.theta)
            Z = X @ W.T + b
            m = Z.max(axis=1)
            lse = m + np.log(np.exp(Z - m[:, None]).sum(axis=1))
            yi = Y.astype(np.int64)
            losses = lse - Z[np.arange(n), yi]
            delta = np.exp(Z - lse[:, None])
            delta[np.arange(n), yi] -= 1.0
            G = np.concatenate(
                [np.einsum("nk,nd->nkd", delta, X).reshape(n, -1), delta], axis=1
            )
            if arch.l2 > 0.0:
                G = G + arch.l2 * self.theta
                losses = losses + 0.5 * arch.l2 * float(self.theta @ self.theta)
            return losses, G
        widths, woff, boff, aoff = self._mlp
        task = 1 if arch.num_classes > 0 else 0
        return kernels.mlp_per_example_grads(
            self.theta, widths, woff, boff, aoff, X, Y, arch.l2, task
        )

    def grad_theta(self, z: Sample) -> np.ndarray:
        _, G = self.per_example_grads(z.x[None, :], np.array([z.y]))
        return G[0]

    # -- input-space derivatives -------------------------------------------

    def grad_x_batch(self, X, Y) -> np.ndarray:
        X = self._check_x(X)
        Y = np.asarray(Y, dtype=np.float64)
        arch = self.arch
        if isinstance(arch, LinearArch):
            r = X @ self.theta - Y
            return r[:, None] * self.theta[None, :]
        if isinstance(arch, LogisticArch):
            W, b = self._split_logistic(self.theta)
            P = _softmax_rows(X @ W.T + b)
            delta = P.copy()
            delta[np.arange(X.shape[0]), Y.astype(np.int64)] -= 1.0
            return delta @ W
        widths, woff, boff, aoff = self._mlp
        task = 1 if arch.num_classes > 0 else 0
        return kernels.mlp_grad_x(self.theta, widths, woff, boff, aoff, X, Y, task)

    def grad_x(self, z: Sample) -> np.ndarray:
        return self.grad_x_batch(z.x[None, :], np.array([z.y]))[0]

    # -- second-order products ----------------------------------------------

    def hvp_theta(self, batch, v: np.ndarray) -> np.ndarray:
        """Hessian-vector product of the mean loss over ``batch`` (a Dataset
        or an (X, Y) pair), computed without materializing the Hessian."""
        if isinstance(batch, Dataset):
            X, Y = batch.x, batch.y
        else:
            X, Y = batch
        X = self._check_x(X)
        Y = np.asarray(Y, dtype=np.float64)
        v = np.ascontiguousarray(v, dtype=np.float64)
        if v.shape != self.theta.shape:
            raise ArchError(f"v has length {v.size}, expected {self.theta.size}")
        n = X.shape[0]
        arch = self.arch
        if isinstance(arch, LinearArch):
            return X.T @ (X @ v) / n + arch.l2 * v
        if isinstance(arch, LogisticArch):
            W, b = self._split_logistic(self.theta)
            V, c = self._split_logistic(v)
            P = _softmax_rows(X @ W.T + b)
            RZ = X @ V.T + c
            rdelta = P * RZ - P * (P * RZ).sum(axis=1, keepdims=True)
            hv = np.concatenate([(rdelta.T @ X).ravel(), rdelta.sum(axis=0)]) / n
            return hv + arch.l2 * v
        widths, woff, boff, aoff = self._mlp
        task = 1 if arch.num_classes > 0 else 0
        return kernels.mlp_hvp(self.theta, v, widths, woff, boff, aoff, X, Y, arch.l2, task)

    def mixed_hvp_batch(self, X, Y, v: np.ndarray) -> np.ndarray:
        """Rows of d/dx <dloss/dtheta, v> (one per sample)."""
        X = self._check_x(X)
        Y = np.asarray(Y, dtype=np.float64)
        v = np.ascontiguousarray(v, dtype=np.float64)
        if v.shape != self.theta.shape:
            raise ArchError(f"v has length {v.size}, expected {self.theta.size}")
        arch = self.arch
        if isinstance(arch, LinearArch):
            r = X @ self.theta - Y
            return (X @ v)[:, None] * self.theta[None, :] + r[:, None] * v[None, :]
        if isinstance(arch, LogisticArch):
            W, b = self._split_logistic(self.theta)
            V, c = self._split_logistic(v)
            P = _softmax_rows(X @ W.T + b)
            delta = P.copy()
            delta[np.arange(X.shape[0]), Y.astype(np.int64)] -= 1.0
            wvec = X @ V.T + c
            sw = P * wvec - P * (P * wvec).sum(axis=1, keepdims=True)
            return sw @ W + delta @ V
        widths, woff, boff, aoff = self._mlp
        task = 1 if arch.num_classes > 0 else 0
        return kernels.mlp_mixed_hvp(self.theta, v, widths, woff, boff, aoff, X, Y, task)

    def mixed_hvp(self, z: Sample, v: np.ndarray) -> np.ndarray:
        return self.mixed_hvp_batch(z.x[None, :], np.array([z.y]), v)[0]

    # -- embeddings -----------------------------------------------------------

    def embedding_spec(self) -> EmbeddingSpec:
        return default_embedding_spec(self.arch)

    def embed_batch(self, X, spec: EmbeddingSpec | None = None) -> np.ndarray:
        X = self._check_x(X)
        expected = self.embedding_spec()
        if spec is not None and spec != expected:
            raise ArchError(f"embedding spec {spec} inconsistent with arch (expects {expected})")
        if not isinstance(self.arch, MlpArch):
            return X.copy()
        widths, woff, boff, aoff = self._mlp
        return kernels.mlp_embed(self.theta, widths, woff, boff, aoff, X)

    def embed(self, z: Sample, spec: EmbeddingSpec | None = None) -> np.ndarray:
        return self.embed_batch(z.x[None, :], spec)[0]

    def embed_vjp_batch(self, X, U) -> np.ndarray:
        """Rows of J_embed(x_i)^T u_i, the adjoint of the embedding map."""
        X = self._check_x(X)
        U = np.ascontiguousarray(np.atleast_2d(U), dtype=np.float64)
        if U.shape != (X.shape[0], self.embedding_spec().dim):
            raise ArchError(f"cotangent shape {U.shape} inconsistent with embedding")
        if not isinstance(self.arch, MlpArch):
            return U.copy()
        widths, woff, boff, aoff = self._mlp
        return kernels.mlp_embed_vjp(self.theta, widths, woff, boff, aoff, X, U)


# ---------------------------------------------------------------------------
# exact ERM for the strongly convex architectures
# ---------------------------------------------------------------------------


def dense_hessian(model: Model, X, Y) -> np.ndarray:
    """Materialize the Hessian of the mean loss column by column via HVPs."""
    p = model.num_params
    H = np.empty((p, p))
    e = np.zeros(p)
    for i in range(p):
        e[i] = 1.0
        H[:, i] = model.hvp_theta((X, Y), e)
        e[i] = 0.0
    return H


def fit_erm(dataset: Dataset, arch: Arch, tol: float = 1e-10, max_iter: int = 100,
            seed: int = 0) -> Model:
    """Solve the (strongly convex) ERM to gradient norm <= tol.

    Linear/ridge least squares is a direct solve; logistic regression uses
    damped Newton with an Armijo backtracking line search. MLPs are rejected:
    they are non-convex, use the SGD trainer instead.
    """
    if isinstance(arch, MlpArch):
        raise ArchError("fit_erm handles strongly convex architectures only; train MLPs with SGD")
    X, Y = dataset.x, dataset.y
    n = dataset.n
    if isinstance(arch, LinearArch):
        H = X.T @ X / n + arch.l2 * np.eye(arch.dim)
        theta = np.linalg.solve(H, X.T @ Y / n)
        return Model(arch, theta, seed)
    model = Model(arch, init_theta(arch, seed), seed)
    loss, g = model.batch_loss_grad(X, Y)
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            return model
        H = dense_hessian(model, X, Y)
        try:
            import scipy.linalg as sla

            step = sla.cho_solve(sla.cho_factor(H), g)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + 1e-10 * np.eye(H.shape[0]), g)
        t = 1.0
        gs = float(g @ step)
        while t > 1e-12:
            cand = model.copy_with(model.theta - t * step)
            new_loss, new_g = cand.batch_loss_grad(X, Y)
            if new_loss <= loss - 1e-4 * t * gs:
                model, loss, g = cand, new_loss, new_g
                break
            t *= 0.5
        else:
            break
    gnorm = float(np.linalg.norm(g))
    if gnorm > tol:
        raise RuntimeError(f"Newton did not reach tol={tol:g}: gradient norm {gnorm:.3e}")
    return model


# ---------------------------------------------------------------------------
# checkpoint serialization: text header + one base-10 float per line
# ---------------------------------------------------------------------------


def _arch_header(arch: Arch):
    if isinstance(arch, LinearArch):
        return [f"arch = linear", f"dim = {arch.dim}", f"l2 = {arch.l2!r}"]
    if isinstance(arch, LogisticArch):
        return [
            "arch = logistic",
            f"dim = {arch.dim}",
            f"num_classes = {arch.num_classes}",
            f"l2 = {arch.l2!r}",
        ]
    hidden = ",".join(str(h) for h in arch.hidden)
    return [
        "arch = mlp",
        f"dim = {arch.dim}",
        f"hidden = {hidden}",
        f"num_classes = {arch.num_classes}",
        f"l2 = {arch.l2!r}",
    ]


def save_model(path, model: Model) -> None:
    lines = _arch_header(model.arch)
    lines.append(f"rng_seed = {model.rng_seed}")
    lines.append(f"params = {model.num_params}")
    lines.append("---")
    lines.extend(repr(float(v)) for v in model.theta)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> Model:
    with open(path) as fh:
        raw = fh.read().splitlines()
    split = raw.index("---")
    fields = {}
    for line in raw[:split]:
        key, _, value = line.partition(" = ")
        fields[key.strip()] = value.strip()
    kind = fields["arch"]
    if kind == "linear":
        arch = LinearArch(int(fields["dim"]), float(fields["l2"]))
    elif kind == "logistic":
        arch = LogisticArch(int(fields["dim"]), int(fields["num_classes"]), float(fields["l2"]))
    elif kind == "mlp":
        hidden = tuple(int(h) for h in fields["hidden"].split(",") if h)
        arch = MlpArch(int(fields["dim"]), hidden, int(fields["num_classes"]), float(fields["l2"]))
    else:
        raise ArchError(f"unknown arch kind {kind!r} in {path}")
    theta = np.array([float(v) for v in raw[split + 1:] if v.strip()])
    if theta.size != int(fields["params"]):
        raise ArchError(f"{path}: expected {fields['params']} parameters, found {theta.size}")
    return Model(arch, theta, int(fields.get("rng_seed", 0)))
