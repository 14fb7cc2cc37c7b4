"""Hot loops with a numba implementation and a vectorised numpy twin.

Both paths compute identical results; the active one is chosen by
:mod:`hopgraph._accel`. Kernel kinds and query roles are passed as small
integer codes so the compiled functions stay in nopython mode.
"""
from __future__ import annotations

import numpy as np

from hopgraph import _accel
from hopgraph._accel import njit

# kernel kinds
RATIONAL_QUADRATIC = 0
GAUSSIAN = 1
LINEAR_IDENTITY = 2
OFF = 3

# query roles
ROLE_ENTITY = 0
ROLE_PREDICATE = 1
ROLE_OTHER = 2

UNREACHED = -1


# ---------------------------------------------------------------------------
# all-pairs BFS on an unweighted undirected graph given in CSR form
# ---------------------------------------------------------------------------


@njit
def _bfs_all_pairs_nb(indptr, indices, n):
    dist = np.full((n, n), -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    for src in range(n):
        dist[src, src] = 0
        head = 0
        tail = 1
        queue[0] = src
        while head < tail:
            u = queue[head]
            head += 1
            du = dist[src, u]
            for k in range(indptr[u], indptr[u + 1]):
                v = indices[k]
                if dist[src, v] < 0:
                    dist[src, v] = du + 1
                    queue[tail] = v
                    tail += 1
    return dist


def _bfs_all_pairs_np(indptr, indices, n):
    adj = np.zeros((n, n), dtype=np.int64)
    rows = np.repeat(np.arange(n), np.diff(indptr))
    adj[rows, indices] = 1
    dist = np.full((n, n), UNREACHED, dtype=np.int64)
    reached = np.eye(n, dtype=bool)
    dist[reached] = 0
    frontier = reached.astype(np.int64)
    hop = 0
    while True:
        hop += 1
        nxt = (frontier @ adj > 0) & ~reached
        if not nxt.any():
            break
        dist[nxt] = hop
        reached |= nxt
        frontier = nxt.astype(np.int64)
    return dist


def bfs_all_pairs(indptr: np.ndarray, indices: np.ndarray, n: int) -> np.ndarray:
    """Hop counts between every node pair; ``-1`` marks unreachable pairs."""
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    if n == 0:
        return np.zeros((0, 0), dtype=np.int64)
    if _accel.backend() == "numba":
        return _bfs_all_pairs_nb(indptr, indices, n)
    return _bfs_all_pairs_np(indptr, indices, n)


# ---------------------------------------------------------------------------
# distance kernel F(D) and its gradient w.r.t. the raw kernel parameters
# raw[h] = (log alpha_o, log l_o, log alpha_p, log l_p)
# ---------------------------------------------------------------------------


@njit
def _kernel_forward_nb(dist, roles, raw, kind):
    nb, n, _ = dist.shape
    nh = raw.shape[0]
    out = np.ones((nb, nh, n, n))
    if kind == OFF:
        return out
    for b in range(nb):
        for h in range(nh):
            for i in range(n):
                r = roles[b, i]
                if kind == LINEAR_IDENTITY:
                    for j in range(n):
                        out[b, h, i, j] = dist[b, i, j]
                    continue
                if r == ROLE_OTHER:
                    continue
                alpha = np.exp(raw[h, 2 * r])
                scale = np.exp(raw[h, 2 * r + 1])
                for j in range(n):
                    u = (dist[b, i, j] - 1.0) ** 2
                    if kind == RATIONAL_QUADRATIC:
                        out[b, h, i, j] = (1.0 + u / (2.0 * alpha * scale * scale)) ** (-alpha)
                    else:
                        out[b, h, i, j] = np.exp(-u / (2.0 * scale * scale))
    return out


@njit
def _kernel_backward_nb(dist, roles, raw, kind, grad_out):
    nb, n, _ = dist.shape
    nh = raw.shape[0]
    grad = np.zeros((nh, 4))
    if kind == OFF or kind == LINEAR_IDENTITY:
        return grad
    for b in range(nb):
        for h in range(nh):
            for i in range(n):
                r = roles[b, i]
                if r == ROLE_OTHER:
                    continue
                alpha = np.exp(raw[h, 2 * r])
                scale = np.exp(raw[h, 2 * r + 1])
                ga = 0.0
                gl = 0.0
                for j in range(n):
                    g = grad_out[b, h, i, j]
                    if g == 0.0:
                        continue
                    u = (dist[b, i, j] - 1.0) ** 2
                    if u == 0.0:
                        continue
                    if kind == RATIONAL_QUADRATIC:
                        t = 1.0 + u / (2.0 * alpha * scale * scale)
                        f = t ** (-alpha)
                        ga += g * f * alpha * (-np.log(t) + u / (2.0 * alpha * scale * scale * t))
                        gl += g * f * u / (scale * scale * t)
                    else:
                        f = np.exp(-u / (2.0 * scale * scale))
                        gl += g * f * u / (scale * scale)
                grad[h, 2 * r] += ga
                grad[h, 2 * r + 1] += gl
    return grad


def _role_params(roles, raw):
    # per (b, h, i) alpha and length scale picked by the query role
    params = np.exp(raw)
    is_pred = (roles == ROLE_PREDICATE)[:, None, :]
    alpha = np.where(is_pred, params[None, :, 2, None], params[None, :, 0, None])
    scale = np.where(is_pred, params[None, :, 3, None], params[None, :, 1, None])
    return alpha[..., None], scale[..., None]


def _kernel_forward_np(dist, roles, raw, kind):
    nb, n, _ = dist.shape
    nh = raw.shape[0]
    if kind == OFF:
        return np.ones((nb, nh, n, n))
    d = dist[:, None, :, :].astype(np.float64)
    if kind == LINEAR_IDENTITY:
        return np.broadcast_to(d, (nb, nh, n, n)).copy()
    alpha, scale = _role_params(roles, raw)
    u = (d - 1.0) ** 2
    if kind == RATIONAL_QUADRATIC:
        out = (1.0 + u / (2.0 * alpha * scale**2)) ** (-alpha)
    else:
        out = np.exp(-u / (2.0 * scale**2)) * np.ones_like(alpha)
    other = (roles == ROLE_OTHER)[:, None, :, None]
    return np.where(other, 1.0, out)


def _kernel_backward_np(dist, roles, raw, kind, grad_out):
    nh = raw.shape[0]
    grad = np.zeros((nh, 4))
    if kind in (OFF, LINEAR_IDENTITY):
        return grad
    alpha, scale = _role_params(roles, raw)
    u = (dist[:, None, :, :].astype(np.float64) - 1.0) ** 2
    if kind == RATIONAL_QUADRATIC:
        t = 1.0 + u / (2.0 * alpha * scale**2)
        f = t ** (-alpha)
        d_alpha = f * alpha * (-np.log(t) + u / (2.0 * alpha * scale**2 * t))
        d_scale = f * u / (scale**2 * t)
    else:
        f = np.exp(-u / (2.0 * scale**2))
        d_alpha = np.zeros_like(f * alpha)
        d_scale = f * u / scale**2
    # rows of each role, summed over keys -> [B, H, n]
    ga = (grad_out * d_alpha).sum(axis=-1)
    gl = (grad_out * d_scale).sum(axis=-1)
    for code in (ROLE_ENTITY, ROLE_PREDICATE):
        sel = (roles == code)[:, None, :]
        grad[:, 2 * code] = np.where(sel, ga, 0.0).sum(axis=(0, 2))
        grad[:, 2 * code + 1] = np.where(sel, gl, 0.0).sum(axis=(0, 2))
    return grad


def kernel_forward(dist, roles, raw, kind: int) -> np.ndarray:
    """F(D) per head: ``dist`` [B,n,n], ``roles`` [B,n], ``raw`` [H,4] -> [B,H,n,n]."""
    dist = np.ascontiguousarray(dist, dtype=np.int64)
    roles = np.ascontiguousarray(roles, dtype=np.int64)
    raw = np.ascontiguousarray(raw, dtype=np.float64)
    if _accel.backend() == "numba":
        return _kernel_forward_nb(dist, roles, raw, kind)
    return _kernel_forward_np(dist, roles, raw, kind)


def kernel_backward(dist, roles, raw, kind: int, grad_out) -> np.ndarray:
    """Gradient of ``sum(grad_out * F(D))`` with respect to ``raw``."""
    dist = np.ascontiguousarray(dist, dtype=np.int64)
    roles = np.ascontiguousarray(roles, dtype=np.int64)
    raw = np.ascontiguousarray(raw, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if _accel.backend() == "numba":
        return _kernel_backward_nb(dist, roles, raw, kind, grad_out)
    return _kernel_backward_np(dist, roles, raw, kind, grad_out)
