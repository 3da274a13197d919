"""Compiled relaxation and MTTKRP kernels.

The numpy implementations in :mod:`mgcp.tensor_core`, :mod:`mgcp.als` and
:mod:`mgcp.fas` are the reference path.  On small and sparse tensors they
spend most of their time in per-call interpreter overhead, which would make
the cost of a sweep independent of the level it runs on; these numba
kernels run a whole relaxation sweep in one call so that cost follows the
arithmetic.  Results agree with the reference path to rounding.

Factor matrices are passed stacked into one ``(sum I_n) x R`` array with
row offsets ``offs``.  Reductions run in a fixed loop order, so results are
deterministic.

Set ``MGCP_BACKEND=numpy`` to disable the kernels.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    import numba as nb
except ImportError:  # pragma: no cover
    nb = None

__all__ = ["enabled", "set_backend", "warmup", "relax", "mttkrp", "OK",
           "ZERO_DIAGONAL", "ZERO_FACTOR", "ZERO_COLUMN"]

OK = 0
ZERO_DIAGONAL = 1
ZERO_FACTOR = 2
ZERO_COLUMN = 3

#: Dense tensors larger than this are left to the BLAS-backed reference path.
DENSE_LIMIT = 1 << 16

_backend = os.environ.get("MGCP_BACKEND", "numba" if nb is not None else "numpy")


def enabled() -> bool:
    return nb is not None and _backend == "numba"


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and nb is None:
        raise RuntimeError("numba is not installed")
    old, _backend = _backend, name
    return old


if nb is not None:
    _jit = nb.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def _jit(f):
        return f


@_jit
def _mttkrp_sparse(subs, vals, F, offs, skip, out):
    nnz, N = subs.shape
    R = F.shape[1]
    out[:, :] = 0.0
    for e in range(nnz):
        row = subs[e, skip]
        for r in range(R):
            p = vals[e]
            for k in range(N):
                if k != skip:
                    p *= F[offs[k] + subs[e, k], r]
            out[row, r] += p


@_jit
def _mttkrp_dense(data, shape, F, offs, skip, out):
    # data is C ordered: the last mode is contiguous and handled in the
    # inner loop; products over the outer modes are kept as prefixes and
    # refreshed only from the first index that changed.
    N = shape.size
    R = F.shape[1]
    out[:, :] = 0.0
    last = N - 1
    nlast = shape[last]
    nouter = data.size // nlast
    idx = np.zeros(N, np.int64)
    pre = np.ones((N, R))
    for k in range(1, N):
        m = k - 1
        for r in range(R):
            v = pre[k - 1, r]
            if m != skip:
                v *= F[offs[m], r]
            pre[k, r] = v
    acc = np.empty(R)
    flast = offs[last]
    for o in range(nouter):
        base = o * nlast
        if skip == last:
            for j in range(nlast):
                z = data[base + j]
                for r in range(R):
                    out[j, r] += z * pre[last, r]
        else:
            for r in range(R):
                acc[r] = 0.0
            for j in range(nlast):
                z = data[base + j]
                for r in range(R):
                    acc[r] += z * F[flast + j, r]
            row = idx[skip]
            for r in range(R):
                out[row, r] += acc[r] * pre[last, r]
        k = N - 2
        while k >= 0:
            idx[k] += 1
            if idx[k] < shape[k]:
                break
            idx[k] = 0
            k -= 1
        if k < 0:
            break
        for kk in range(k + 1, N):
            m = kk - 1
            for r in range(R):
                v = pre[kk - 1, r]
                if m != skip:
                    v *= F[offs[m] + idx[m], r]
                pre[kk, r] = v


@_jit
def _gauss_seidel(A, gam, M, iters):
    I, R = A.shape
    for i in range(I):
        for _ in range(iters):
            for j in range(R):
                s = M[i, j]
                for k in range(R):
                    if k != j:
                        s -= gam[j, k] * A[i, k]
                A[i, j] = s / gam[j, j]


@_jit
def _sym_pinv(g, threshold):
    w, v = np.linalg.eigh(g)
    R = g.shape[0]
    out = np.zeros((R, R))
    top = w[R - 1]
    if top <= 0.0:
        return out
    for q in range(R):
        if w[q] > threshold * top:
            for a in range(R):
                s = v[a, q] / w[q]
                for b in range(R):
                    out[a, b] += s * v[b, q]
    return out


@_jit
def _relax(is_sparse, data, shape, subs, vals, F, offs, rhs, has_rhs,
           use_gs, gs_iters, pinv_threshold, diag_guard, sweeps, normalize, lam):
    N = offs.size - 1
    R = F.shape[1]
    grams = np.zeros((N, R, R))
    maxrows = 0
    for n in range(N):
        maxrows = max(maxrows, offs[n + 1] - offs[n])
    mbuf = np.zeros((maxrows, R))
    gam = np.empty((R, R))
    for _ in range(sweeps):
        for n in range(N):
            a = F[offs[n]:offs[n + 1]]
            grams[n] = a.T @ a
        for n in range(N):
            rows = offs[n + 1] - offs[n]
            m = mbuf[:rows]
            if is_sparse:
                _mttkrp_sparse(subs, vals, F, offs, n, m)
            else:
                _mttkrp_dense(data, shape, F, offs, n, m)
            if has_rhs:
                m += rhs[offs[n]:offs[n + 1]]
            gam[:, :] = 1.0
            for k in range(N):
                if k != n:
                    gam *= grams[k]
            a = F[offs[n]:offs[n + 1]]
            if use_gs:
                top = 0.0
                for j in range(R):
                    top = max(top, gam[j, j])
                if top <= 0.0:
                    return ZERO_DIAGONAL
                for j in range(R):
                    if gam[j, j] <= diag_guard * top:
                        return ZERO_DIAGONAL
                _gauss_seidel(a, gam, m, gs_iters)
            else:
                a[:, :] = m @ _sym_pinv(gam, pinv_threshold)
                nonzero = False
                for i in range(rows):
                    for r in range(R):
                        if a[i, r] != 0.0:
                            nonzero = True
                if not nonzero:
                    return ZERO_FACTOR
            grams[n] = a.T @ a
        if normalize:
            norms = np.empty((N, R))
            for n in range(N):
                for r in range(R):
                    norms[n, r] = np.sqrt(grams[n, r, r])
                    if norms[n, r] == 0.0:
                        return ZERO_COLUMN
            for r in range(R):
                s = 0.0
                for n in range(N):
                    s += np.log(norms[n, r])
                lam[r] = np.exp(s / N)
            order = np.argsort(-lam, kind="mergesort")
            tmp = F.copy()
            lam_sorted = lam[order]
            for n in range(N):
                for i in range(offs[n], offs[n + 1]):
                    for q in range(R):
                        r = order[q]
                        F[i, q] = tmp[i, r] * (lam[r] / norms[n, r])
            lam[:] = lam_sorted
    return OK


def _frozen(a: np.ndarray) -> np.ndarray:
    # One compiled specialization serves every tensor only if the
    # read-only flag of the arguments is always the same.
    v = np.ascontiguousarray(a).view()
    v.flags.writeable = False
    return v


_EMPTY_I = _frozen(np.zeros((0, 1), dtype=np.int64))
_EMPTY_F = _frozen(np.zeros(0))
_EMPTY_2 = np.zeros((0, 1))


def eligible(z) -> bool:
    """Whether the compiled path is used for tensor ``z``."""
    from .tensor_core import SparseTensor

    if not enabled():
        return False
    return isinstance(z, SparseTensor) or z.size <= DENSE_LIMIT


def _tensor_args(z):
    from .tensor_core import SparseTensor

    if isinstance(z, SparseTensor):
        shape = np.array(z.shape, dtype=np.int64)
        return True, _EMPTY_F, shape, _frozen(z.subs.astype(np.int64, copy=False)), _frozen(z.vals)
    data = _frozen(np.ascontiguousarray(z.data).ravel())
    return False, data, np.array(z.shape, dtype=np.int64), _EMPTY_I, _EMPTY_F


def _offsets(factors) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([a.shape[0] for a in factors])]).astype(np.int64)


def mttkrp(z, factors, skip: int) -> np.ndarray:
    is_sparse, data, shape, subs, vals = _tensor_args(z)
    F = np.ascontiguousarray(np.concatenate(factors))
    out = np.zeros((factors[skip].shape[0], F.shape[1]))
    if is_sparse:
        _mttkrp_sparse(subs, vals, F, _offsets(factors), skip, out)
    else:
        _mttkrp_dense(data, shape, F, _offsets(factors), skip, out)
    return out


def relax(z, factors, rhs=None, *, sweeps: int = 1, use_gs: bool = False,
          gs_iters: int = 10, pinv_threshold: float = 1e-12,
          diag_guard: float = 1e-14, normalize: bool = False):
    """Run ``sweeps`` ALS (``use_gs=False``) or BNGS sweeps in compiled code.

    Returns ``(status, factors, lambdas)``; ``status`` is one of the module's
    status codes and ``lambdas`` is ``None`` unless ``normalize`` is set.
    """
    is_sparse, data, shape, subs, vals = _tensor_args(z)
    offs = _offsets(factors)
    F = np.ascontiguousarray(np.concatenate(factors), dtype=np.float64)
    if rhs is not None and any(f is not None for f in rhs):
        stacked = np.concatenate([
            np.zeros_like(a) if f is None else f for a, f in zip(factors, rhs)
        ])
        has_rhs = True
    else:
        stacked, has_rhs = _EMPTY_2, False
    lam = np.zeros(F.shape[1])
    status = _relax(is_sparse, data, shape, subs, vals, F, offs,
                    np.ascontiguousarray(stacked), has_rhs, use_gs, int(gs_iters),
                    float(pinv_threshold), float(diag_guard), int(sweeps),
                    bool(normalize), lam)
    out = [F[offs[n]:offs[n + 1]] for n in range(len(factors))]
    return status, out, (lam if normalize else None)


def warmup() -> None:
    """Compile (or load from cache) every kernel signature used at run time."""
    if not enabled():
        return
    from .tensor_core import DenseTensor, SparseTensor

    rng = np.random.default_rng(0)
    dense = DenseTensor(rng.random((3, 3, 3)))
    sparse = SparseTensor.from_dense(dense)
    factors = [rng.random((3, 2)) for _ in range(3)]
    for z in (dense, sparse):
        mttkrp(z, factors, 1)
        relax(z, factors, None, sweeps=1)
        relax(z, factors, [np.zeros((3, 2))] * 3, use_gs=True, normalize=True)
