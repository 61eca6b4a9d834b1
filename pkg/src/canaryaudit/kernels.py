"""Hot numeric kernels for the tanh MLP and per-example gradient clipping.

Every kernel exists in two forms: a vectorized numpy implementation
(``*_np``) and a per-sample loop implementation compiled with numba
(``*_nb``). The active set is chosen at import time from the
``CANARYAUDIT_BACKEND`` environment variable:

  auto   (default) per-kernel best as measured by benchmarks/bench_kernels.py:
         numba for the per-example-gradient and clipped-mean kernels (the
         DP-SGD inner loop, where numpy materializes an (n x p) intermediate
         and makes two passes), vectorized numpy/BLAS for the matmul-shaped
         forward/HVP/embedding kernels, which BLAS wins at desk sizes.
  numba  force the loop kernels everywhere (requires numba)
  numpy  force the pure-numpy fallback everywhere

Both backends compute the same quantities; they may differ in the last few
ulps because the reduction order differs.

Parameter layout for an MLP with layer widths ``w0 -> w1 -> ... -> wL``:
weights layer by layer, each W_l (w_{l+1} x w_l) flattened row-major,
followed by its bias b_l. ``woff``/``boff`` give the flat offsets of W_l and
b_l; ``aoff`` gives activation offsets (cumulative widths) used as scratch
layout by the loop kernels. ``task`` is 0 for scalar regression (squared
loss) and 1 for classification (softmax cross-entropy); labels are passed
as float64 and must be exact integers for classification. ``l2`` adds
0.5 * l2 * ||theta||^2 to each per-sample loss.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in normal installs
    numba = None
    HAS_NUMBA = False

_requested = os.environ.get("CANARYAUDIT_BACKEND", "auto").strip().lower()
if _requested in ("", "auto"):
    BACKEND = "auto" if HAS_NUMBA else "numpy"
elif _requested == "numba":
    if not HAS_NUMBA:
        raise ImportError("CANARYAUDIT_BACKEND=numba but numba is not importable")
    BACKEND = "numba"
elif _requested == "numpy":
    BACKEND = "numpy"
else:
    raise ValueError(f"CANARYAUDIT_BACKEND must be auto|numba|numpy, got {_requested!r}")


# ---------------------------------------------------------------------------
# vectorized numpy backend
# ---------------------------------------------------------------------------


def _forward_np(theta, widths, woff, boff, X):
    """Forward pass over a batch. Returns the list of activation matrices
    A[0..L] where A[0] = X, hidden layers are tanh, and A[L] is linear."""
    L = len(widths) - 1
    acts = [X]
    a = X
    for l in range(L):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        b = theta[boff[l]:boff[l] + nout]
        z = a @ W.T + b
        a = np.tanh(z) if l < L - 1 else z
        acts.append(a)
    return acts


def _softmax_rows(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _out_losses_delta_np(out, Y, task):
    """Per-sample losses (without l2) and the output adjoint dloss/dz_L."""
    if task == 0:
        r = out[:, 0] - Y
        return 0.5 * r * r, r[:, None].copy()
    m = out.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(out - m).sum(axis=1))
    yi = Y.astype(np.int64)
    losses = lse - out[np.arange(out.shape[0]), yi]
    delta = np.exp(out - lse[:, None])
    delta[np.arange(out.shape[0]), yi] -= 1.0
    return losses, delta


def mlp_losses_np(theta, widths, woff, boff, aoff, X, Y, l2, task):
    acts = _forward_np(theta, widths, woff, boff, X)
    losses, _ = _out_losses_delta_np(acts[-1], Y, task)
    if l2 > 0.0:
        losses = losses + 0.5 * l2 * float(theta @ theta)
    return losses


def mlp_loss_grad_np(theta, widths, woff, boff, aoff, X, Y, l2, task):
    n = X.shape[0]
    L = len(widths) - 1
    acts = _forward_np(theta, widths, woff, boff, X)
    losses, delta = _out_losses_delta_np(acts[-1], Y, task)
    g = np.zeros_like(theta)
    for l in range(L - 1, -1, -1):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        g[woff[l]:woff[l] + nout * nin] = (delta.T @ acts[l]).ravel()
        g[boff[l]:boff[l] + nout] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ W) * (1.0 - acts[l] * acts[l])
    g /= n
    mean_loss = losses.mean()
    if l2 > 0.0:
        g += l2 * theta
        mean_loss += 0.5 * l2 * float(theta @ theta)
    return mean_loss, g


def mlp_per_example_grads_np(theta, widths, woff, boff, aoff, X, Y, l2, task):
    n = X.shape[0]
    L = len(widths) - 1
    acts = _forward_np(theta, widths, woff, boff, X)
    losses, delta = _out_losses_delta_np(acts[-1], Y, task)
    G = np.zeros((n, theta.shape[0]))
    for l in range(L - 1, -1, -1):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        G[:, woff[l]:woff[l] + nout * nin] = np.einsum("no,ni->noi", delta, acts[l]).reshape(n, -1)
        G[:, boff[l]:boff[l] + nout] = delta
        if l > 0:
            delta = (delta @ W) * (1.0 - acts[l] * acts[l])
    if l2 > 0.0:
        G += l2 * theta
        losses = losses + 0.5 * l2 * float(theta @ theta)
    return losses, G


def mlp_grad_x_np(theta, widths, woff, boff, aoff, X, Y, task):
    L = len(widths) - 1
    acts = _forward_np(theta, widths, woff, boff, X)
    _, delta = _out_losses_delta_np(acts[-1], Y, task)
    for l in range(L - 1, 0, -1):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        delta = (delta @ W) * (1.0 - acts[l] * acts[l])
    W0 = theta[woff[0]:woff[0] + widths[1] * widths[0]].reshape(widths[1], widths[0])
    return delta @ W0


def _forward_r_np(theta, v, widths, woff, boff, X, acts):
    """Directional (theta-direction v) forward derivatives of all activations."""
    L = len(widths) - 1
    racts = [np.zeros_like(X)]
    ra = racts[0]
    for l in range(L):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        V = v[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        c = v[boff[l]:boff[l] + nout]
        rz = acts[l] @ V.T + ra @ W.T + c
        ra = (1.0 - acts[l + 1] * acts[l + 1]) * rz if l < L - 1 else rz
        racts.append(ra)
    return racts


def _out_rdelta_np(out, rout, Y, task):
    if task == 0:
        return rout.copy()
    p = _softmax_rows(out)
    return p * rout - p * (p * rout).sum(axis=1, keepdims=True)


def mlp_hvp_np(theta, v, widths, woff, boff, aoff, X, Y, l2, task):
    n = X.shape[0]
    L = len(widths) - 1
    acts = _forward_np(theta, widths, woff, boff, X)
    racts = _forward_r_np(theta, v, widths, woff, boff, X, acts)
    _, delta = _out_losses_delta_np(acts[-1], Y, task)
    rdelta = _out_rdelta_np(acts[-1], racts[-1], Y, task)
    hv = np.zeros_like(theta)
    for l in range(L - 1, -1, -1):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        V = v[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        hv[woff[l]:woff[l] + nout * nin] = (rdelta.T @ acts[l] + delta.T @ racts[l]).ravel()
        hv[boff[l]:boff[l] + nout] = rdelta.sum(axis=0)
        if l > 0:
            om = 1.0 - acts[l] * acts[l]
            back = delta @ W
            rback = delta @ V + rdelta @ W
            rdelta = rback * om + back * (-2.0 * acts[l] * racts[l])
            delta = back * om
    hv /= n
    if l2 > 0.0:
        hv += l2 * v
    return hv


def mlp_mixed_hvp_np(theta, v, widths, woff, boff, aoff, X, Y, task):
    """d/dx of <dloss/dtheta, v> for every row: the cross second derivative
    applied to a theta-direction v (Pearlmutter pass of the x-gradient)."""
    L = len(widths) - 1
    acts = _forward_np(theta, widths, woff, boff, X)
    racts = _forward_r_np(theta, v, widths, woff, boff, X, acts)
    _, delta = _out_losses_delta_np(acts[-1], Y, task)
    rdelta = _out_rdelta_np(acts[-1], racts[-1], Y, task)
    for l in range(L - 1, 0, -1):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        V = v[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        om = 1.0 - acts[l] * acts[l]
        back = delta @ W
        rback = delta @ V + rdelta @ W
        rdelta = rback * om + back * (-2.0 * acts[l] * racts[l])
        delta = back * om
    W0 = theta[woff[0]:woff[0] + widths[1] * widths[0]].reshape(widths[1], widths[0])
    V0 = v[woff[0]:woff[0] + widths[1] * widths[0]].reshape(widths[1], widths[0])
    return delta @ V0 + rdelta @ W0


def mlp_embed_np(theta, widths, woff, boff, aoff, X):
    """Last hidden activation for every row."""
    acts = _forward_np(theta, widths, woff, boff, X)
    return acts[-2].copy()


def mlp_embed_vjp_np(theta, widths, woff, boff, aoff, X, U):
    """Backpropagate cotangents U (one per row, in embedding space) from the
    last hidden layer to the inputs: rows of J_embed(x)^T u."""
    L = len(widths) - 1
    acts = _forward_np(theta, widths, woff, boff, X)
    delta = U * (1.0 - acts[L - 1] * acts[L - 1])
    for l in range(L - 2, 0, -1):
        nin, nout = widths[l], widths[l + 1]
        W = theta[woff[l]:woff[l] + nout * nin].reshape(nout, nin)
        delta = (delta @ W) * (1.0 - acts[l] * acts[l])
    W0 = theta[woff[0]:woff[0] + widths[1] * widths[0]].reshape(widths[1], widths[0])
    return delta @ W0


def clip_rows_mean_np(G, clip_norm):
    """Mean of the rows of G after clipping each row to norm <= clip_norm."""
    if np.isinf(clip_norm):
        return G.mean(axis=0)
    norms = np.sqrt((G * G).sum(axis=1))
    scale = np.ones_like(norms)
    mask = norms > clip_norm
    scale[mask] = clip_norm / norms[mask]
    return (G * scale[:, None]).mean(axis=0)


# ---------------------------------------------------------------------------
# loop backend (numba-compiled)
# ---------------------------------------------------------------------------


def _jit(fn):
    if not HAS_NUMBA:
        return fn
    return numba.njit(cache=True, fastmath=False)(fn)


# The loop kernels avoid np.dot and per-layer allocations entirely: at these
# layer sizes the BLAS dispatch overhead dominates the arithmetic. All state
# lives in flat scratch buffers laid out by aoff; the adjoint of z[l] is
# stored at aoff[l] in the delta buffer.


@_jit
def _forward_loop(theta, widths, woff, boff, aoff, X, s, acts):
    L = widths.shape[0] - 1
    for i in range(widths[0]):
        acts[aoff[0] + i] = X[s, i]
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        wbase = woff[l]
        bbase = boff[l]
        abase = aoff[l]
        zbase = aoff[l + 1]
        last = l == L - 1
        for j in range(nout):
            acc = theta[bbase + j]
            row = wbase + j * nin
            for i in range(nin):
                acc += theta[row + i] * acts[abase + i]
            acts[zbase + j] = acc if last else np.tanh(acc)


@_jit
def _out_loss_delta_loop(widths, aoff, acts, y, task, dbuf):
    """Loss of one sample; writes dloss/dz_L into dbuf at the output slot."""
    L = widths.shape[0] - 1
    obase = aoff[L]
    nout = widths[L]
    if task == 0:
        r = acts[obase] - y
        dbuf[obase] = r
        return 0.5 * r * r
    m = acts[obase]
    for i in range(1, nout):
        if acts[obase + i] > m:
            m = acts[obase + i]
    s = 0.0
    for i in range(nout):
        s += np.exp(acts[obase + i] - m)
    lse = m + np.log(s)
    yi = int(y)
    for i in range(nout):
        dbuf[obase + i] = np.exp(acts[obase + i] - lse)
    dbuf[obase + yi] -= 1.0
    return lse - acts[obase + yi]


@_jit
def _backward_loop(theta, widths, woff, boff, aoff, acts, dbuf, g, gx, s, want_gx):
    """Accumulate dloss/dtheta of one sample into g; optionally write
    dloss/dx into row s of gx."""
    L = widths.shape[0] - 1
    for l in range(L - 1, -1, -1):
        nin = widths[l]
        nout = widths[l + 1]
        wbase = woff[l]
        bbase = boff[l]
        abase = aoff[l]
        zbase = aoff[l + 1]
        for j in range(nout):
            dj = dbuf[zbase + j]
            row = wbase + j * nin
            for i in range(nin):
                g[row + i] += dj * acts[abase + i]
            g[bbase + j] += dj
        if l > 0:
            for i in range(nin):
                acc = 0.0
                for j in range(nout):
                    acc += theta[wbase + j * nin + i] * dbuf[zbase + j]
                a = acts[abase + i]
                dbuf[abase + i] = acc * (1.0 - a * a)
        elif want_gx:
            for i in range(nin):
                acc = 0.0
                for j in range(nout):
                    acc += theta[wbase + j * nin + i] * dbuf[zbase + j]
                gx[s, i] = acc


@_jit
def _forward_r_loop(theta, v, widths, woff, boff, aoff, X, s, acts, racts):
    L = widths.shape[0] - 1
    for i in range(widths[0]):
        acts[aoff[0] + i] = X[s, i]
        racts[aoff[0] + i] = 0.0
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        wbase = woff[l]
        bbase = boff[l]
        abase = aoff[l]
        zbase = aoff[l + 1]
        last = l == L - 1
        for j in range(nout):
            acc = theta[bbase + j]
            racc = v[bbase + j]
            row = wbase + j * nin
            for i in range(nin):
                acc += theta[row + i] * acts[abase + i]
                racc += v[row + i] * acts[abase + i] + theta[row + i] * racts[abase + i]
            if last:
                acts[zbase + j] = acc
                racts[zbase + j] = racc
            else:
                a = np.tanh(acc)
                acts[zbase + j] = a
                racts[zbase + j] = (1.0 - a * a) * racc


@_jit
def _out_rdelta_loop(widths, aoff, acts, racts, y, task, rdbuf):
    """Directional derivative of the output delta; written into rdbuf."""
    L = widths.shape[0] - 1
    obase = aoff[L]
    nout = widths[L]
    if task == 0:
        rdbuf[obase] = racts[obase]
        return
    m = acts[obase]
    for i in range(1, nout):
        if acts[obase + i] > m:
            m = acts[obase + i]
    s = 0.0
    for i in range(nout):
        s += np.exp(acts[obase + i] - m)
    lse = m + np.log(s)
    dot = 0.0
    for i in range(nout):
        p = np.exp(acts[obase + i] - lse)
        rdbuf[obase + i] = p  # stash p, finish below
        dot += p * racts[obase + i]
    for i in range(nout):
        p = rdbuf[obase + i]
        rdbuf[obase + i] = p * racts[obase + i] - p * dot


@_jit
def _backward_r_loop(theta, v, widths, woff, boff, aoff, acts, racts, dbuf, rdbuf,
                     rg, rgx, s, want_rgx):
    """Accumulate the Pearlmutter theta-contribution of one sample into rg;
    optionally write the directional derivative of dloss/dx into row s of rgx."""
    L = widths.shape[0] - 1
    for l in range(L - 1, -1, -1):
        nin = widths[l]
        nout = widths[l + 1]
        wbase = woff[l]
        bbase = boff[l]
        abase = aoff[l]
        zbase = aoff[l + 1]
        for j in range(nout):
            dj = dbuf[zbase + j]
            rdj = rdbuf[zbase + j]
            row = wbase + j * nin
            for i in range(nin):
                rg[row + i] += rdj * acts[abase + i] + dj * racts[abase + i]
            rg[bbase + j] += rdj
        if l > 0:
            for i in range(nin):
                back = 0.0
                rback = 0.0
                for j in range(nout):
                    dj = dbuf[zbase + j]
                    back += theta[wbase + j * nin + i] * dj
                    rback += v[wbase + j * nin + i] * dj + theta[wbase + j * nin + i] * rdbuf[zbase + j]
                a = acts[abase + i]
                om = 1.0 - a * a
                rdbuf[abase + i] = rback * om + back * (-2.0 * a * racts[abase + i])
                dbuf[abase + i] = back * om
        elif want_rgx:
            for i in range(nin):
                rback = 0.0
                for j in range(nout):
                    rback += (
                        v[wbase + j * nin + i] * dbuf[zbase + j]
                        + theta[wbase + j * nin + i] * rdbuf[zbase + j]
                    )
                rgx[s, i] = rback


@_jit
def mlp_losses_nb(theta, widths, woff, boff, aoff, X, Y, l2, task):
    n = X.shape[0]
    L = widths.shape[0] - 1
    acts = np.empty(aoff[L] + widths[L])
    dbuf = np.empty(aoff[L] + widths[L])
    losses = np.empty(n)
    reg = 0.5 * l2 * np.dot(theta, theta) if l2 > 0.0 else 0.0
    for s in range(n):
        _forward_loop(theta, widths, woff, boff, aoff, X, s, acts)
        losses[s] = _out_loss_delta_loop(widths, aoff, acts, Y[s], task, dbuf) + reg
    return losses


@_jit
def mlp_loss_grad_nb(theta, widths, woff, boff, aoff, X, Y, l2, task):
    n = X.shape[0]
    L = widths.shape[0] - 1
    acts = np.empty(aoff[L] + widths[L])
    dbuf = np.empty(aoff[L] + widths[L])
    gx = np.empty((1, 1))
    g = np.zeros_like(theta)
    total = 0.0
    for s in range(n):
        _forward_loop(theta, widths, woff, boff, aoff, X, s, acts)
        total += _out_loss_delta_loop(widths, aoff, acts, Y[s], task, dbuf)
        _backward_loop(theta, widths, woff, boff, aoff, acts, dbuf, g, gx, 0, False)
    g /= n
    mean_loss = total / n
    if l2 > 0.0:
        g += l2 * theta
        mean_loss += 0.5 * l2 * np.dot(theta, theta)
    return mean_loss, g


@_jit
def mlp_per_example_grads_nb(theta, widths, woff, boff, aoff, X, Y, l2, task):
    n = X.shape[0]
    L = widths.shape[0] - 1
    acts = np.empty(aoff[L] + widths[L])
    dbuf = np.empty(aoff[L] + widths[L])
    gx = np.empty((1, 1))
    losses = np.empty(n)
    G = np.zeros((n, theta.shape[0]))
    reg = 0.5 * l2 * np.dot(theta, theta) if l2 > 0.0 else 0.0
    for s in range(n):
        _forward_loop(theta, widths, woff, boff, aoff, X, s, acts)
        losses[s] = _out_loss_delta_loop(widths, aoff, acts, Y[s], task, dbuf) + reg
        _backward_loop(theta, widths, woff, boff, aoff, acts, dbuf, G[s], gx, 0, False)
        if l2 > 0.0:
            G[s] += l2 * theta
    return losses, G


@_jit
def mlp_grad_x_nb(theta, widths, woff, boff, aoff, X, Y, task):
    n = X.shape[0]
    L = widths.shape[0] - 1
    acts = np.empty(aoff[L] + widths[L])
    dbuf = np.empty(aoff[L] + widths[L])
    out_gx = np.empty((n, widths[0]))
    scratch = np.zeros_like(theta)
    for s in range(n):
        _forward_loop(theta, widths, woff, boff, aoff, X, s, acts)
        _out_loss_delta_loop(widths, aoff, acts, Y[s], task, dbuf)
        _backward_loop(theta, widths, woff, boff, aoff, acts, dbuf, scratch, out_gx, s, True)
    return out_gx


@_jit
def mlp_hvp_nb(theta, v, widths, woff, boff, aoff, X, Y, l2, task):
    n = X.shape[0]
    L = widths.shape[0] - 1
    size = aoff[L] + widths[L]
    acts = np.empty(size)
    racts = np.empty(size)
    dbuf = np.empty(size)
    rdbuf = np.empty(size)
    rgx = np.empty((1, 1))
    hv = np.zeros_like(theta)
    for s in range(n):
        _forward_r_loop(theta, v, widths, woff, boff, aoff, X, s, acts, racts)
        _out_loss_delta_loop(widths, aoff, acts, Y[s], task, dbuf)
        _out_rdelta_loop(widths, aoff, acts, racts, Y[s], task, rdbuf)
        _backward_r_loop(theta, v, widths, woff, boff, aoff, acts, racts, dbuf, rdbuf,
                         hv, rgx, 0, False)
    hv /= n
    if l2 > 0.0:
        hv += l2 * v
    return hv


@_jit
def mlp_mixed_hvp_nb(theta, v, widths, woff, boff, aoff, X, Y, task):
    n = X.shape[0]
    L = widths.shape[0] - 1
    size = aoff[L] + widths[L]
    acts = np.empty(size)
    racts = np.empty(size)
    dbuf = np.empty(size)
    rdbuf = np.empty(size)
    out_mx = np.empty((n, widths[0]))
    scratch = np.zeros_like(theta)
    for s in range(n):
        _forward_r_loop(theta, v, widths, woff, boff, aoff, X, s, acts, racts)
        _out_loss_delta_loop(widths, aoff, acts, Y[s], task, dbuf)
        _out_rdelta_loop(widths, aoff, acts, racts, Y[s], task, rdbuf)
        _backward_r_loop(theta, v, widths, woff, boff, aoff, acts, racts, dbuf, rdbuf,
                         scratch, out_mx, s, True)
    return out_mx


@_jit
def mlp_embed_nb(theta, widths, woff, boff, aoff, X):
    n = X.shape[0]
    L = widths.shape[0] - 1
    acts = np.empty(aoff[L] + widths[L])
    hbase = aoff[L - 1]
    h = widths[L - 1]
    out = np.empty((n, h))
    for s in range(n):
        _forward_loop(theta, widths, woff, boff, aoff, X, s, acts)
        for i in range(h):
            out[s, i] = acts[hbase + i]
    return out


@_jit
def mlp_embed_vjp_nb(theta, widths, woff, boff, aoff, X, U):
    n = X.shape[0]
    L = widths.shape[0] - 1
    acts = np.empty(aoff[L] + widths[L])
    dbuf = np.empty(aoff[L] + widths[L])
    out = np.empty((n, widths[0]))
    hbase = aoff[L - 1]
    h = widths[L - 1]
    for s in range(n):
        _forward_loop(theta, widths, woff, boff, aoff, X, s, acts)
        for i in range(h):
            a = acts[hbase + i]
            dbuf[hbase + i] = U[s, i] * (1.0 - a * a)
        for l in range(L - 2, -1, -1):
            nin = widths[l]
            nout = widths[l + 1]
            wbase = woff[l]
            abase = aoff[l]
            zbase = aoff[l + 1]
            for i in range(nin):
                acc = 0.0
                for j in range(nout):
                    acc += theta[wbase + j * nin + i] * dbuf[zbase + j]
                if l > 0:
                    a = acts[abase + i]
                    dbuf[abase + i] = acc * (1.0 - a * a)
                else:
                    out[s, i] = acc
    return out


@_jit
def clip_rows_mean_nb(G, clip_norm):
    n, p = G.shape
    acc = np.zeros(p)
    for i in range(n):
        sq = 0.0
        for j in range(p):
            sq += G[i, j] * G[i, j]
        norm = np.sqrt(sq)
        scale = 1.0
        if np.isfinite(clip_norm) and norm > clip_norm:
            scale = clip_norm / norm
        for j in range(p):
            acc[j] += scale * G[i, j]
    return acc / n


_NUMPY_KERNELS = {
    "mlp_losses": mlp_losses_np,
    "mlp_loss_grad": mlp_loss_grad_np,
    "mlp_per_example_grads": mlp_per_example_grads_np,
    "mlp_grad_x": mlp_grad_x_np,
    "mlp_hvp": mlp_hvp_np,
    "mlp_mixed_hvp": mlp_mixed_hvp_np,
    "mlp_embed": mlp_embed_np,
    "mlp_embed_vjp": mlp_embed_vjp_np,
    "clip_rows_mean": clip_rows_mean_np,
}

_NUMBA_KERNELS = {
    "mlp_losses": mlp_losses_nb,
    "mlp_loss_grad": mlp_loss_grad_nb,
    "mlp_per_example_grads": mlp_per_example_grads_nb,
    "mlp_grad_x": mlp_grad_x_nb,
    "mlp_hvp": mlp_hvp_nb,
    "mlp_mixed_hvp": mlp_mixed_hvp_nb,
    "mlp_embed": mlp_embed_nb,
    "mlp_embed_vjp": mlp_embed_vjp_nb,
    "clip_rows_mean": clip_rows_mean_nb,
}

# kernels where the compiled loops beat vectorized numpy (see module docstring)
_AUTO_NUMBA = ("mlp_per_example_grads", "clip_rows_mean")

if BACKEND == "numba":
    ACTIVE_KERNELS = _NUMBA_KERNELS
elif BACKEND == "auto":
    ACTIVE_KERNELS = dict(_NUMPY_KERNELS)
    for _name in _AUTO_NUMBA:
        ACTIVE_KERNELS[_name] = _NUMBA_KERNELS[_name]
else:
    ACTIVE_KERNELS = _NUMPY_KERNELS

mlp_losses = ACTIVE_KERNELS["mlp_losses"]
mlp_loss_grad = ACTIVE_KERNELS["mlp_loss_grad"]
mlp_per_example_grads = ACTIVE_KERNELS["mlp_per_example_grads"]
mlp_grad_x = ACTIVE_KERNELS["mlp_grad_x"]
mlp_hvp = ACTIVE_KERNELS["mlp_hvp"]
mlp_mixed_hvp = ACTIVE_KERNELS["mlp_mixed_hvp"]
mlp_embed = ACTIVE_KERNELS["mlp_embed"]
mlp_embed_vjp = ACTIVE_KERNELS["mlp_embed_vjp"]
clip_rows_mean = ACTIVE_KERNELS["clip_rows_mean"]
