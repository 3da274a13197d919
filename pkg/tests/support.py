"""Shared builders and brute-force oracles for the test suite."""
from __future__ import annotations

import itertools

import numpy as np

from mgcp.cp_model import FactorSet, reconstruct


def smooth_factors(shape, rank, phase=0.0) -> FactorSet:
    """Positive, smoothly varying factors: easy for interpolation to represent."""
    fs = []
    for n, size in enumerate(shape):
        x = np.linspace(0.0, 1.0, size)
        fs.append(np.stack(
            [1.0 + 0.5 * np.cos(np.pi * (r + 1) * x + n + phase) for r in range(rank)], axis=1))
    return FactorSet(fs)


def exact_tensor(shape, rank, phase=0.0):
    f = smooth_factors(shape, rank, phase)
    return reconstruct(f), f


def kron_all(mats):
    out = np.ones((1, 1))
    for m in mats:
        out = np.kron(out, m)
    return out


def unfold_oracle(arr: np.ndarray, mode: int) -> np.ndarray:
    """Element loop: entry (i_0..i_{N-1}) goes to row i_mode, column
    sum_{k != mode} i_k J_k with J_k the product of the earlier other sizes."""
    shape = arr.shape
    others = [k for k in range(arr.ndim) if k != mode]
    strides, acc = {}, 1
    for k in others:
        strides[k] = acc
        acc *= shape[k]
    out = np.zeros((shape[mode], acc))
    for idx in itertools.product(*map(range, shape)):
        out[idx[mode], sum(idx[k] * strides[k] for k in others)] = arr[idx]
    return out


def khatri_rao_oracle(mats):
    cols = [kron_all([m[:, [r]] for m in mats]) for r in range(mats[0].shape[1])]
    return np.hstack(cols)


def reconstruct_oracle(factors) -> np.ndarray:
    shape = tuple(a.shape[0] for a in factors)
    out = np.zeros(shape)
    for idx in itertools.product(*map(range, shape)):
        out[idx] = sum(np.prod([a[i, r] for a, i in zip(factors, idx)])
                       for r in range(factors[0].shape[1]))
    return out


def fd_gradient(obj, factors, h=1e-6):
    """Central finite differences of ``obj(list_of_factors)``."""
    grads = []
    for n, a in enumerate(factors):
        g = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            plus = [b.copy() for b in factors]
            minus = [b.copy() for b in factors]
            plus[n][idx] += h
            minus[n][idx] -= h
            g[idx] = (obj(plus) - obj(minus)) / (2 * h)
        grads.append(g)
    return grads


def random_orthonormal_transfer(size, coarse, rng):
    """A random full-rank interpolation with unit C-rows, orthonormalized."""
    from mgcp.mg_setup import coarsen_mode, orthonormalize
    import scipy.sparse as sp

    c = coarsen_mode(size)
    P = np.zeros((size, c.coarse_size))
    P[c.coarse, c.coarse // 2] = 1.0
    for i, s in c.interp_sets.items():
        P[i, list(s)] = rng.uniform(0.2, 0.8, len(s))
    return orthonormalize(sp.csr_matrix(P))
