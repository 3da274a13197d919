"""CP model: objective, gradient system and factor-set bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor_core import (
    DenseTensor,
    SparseTensor,
    Tensor,
    frobenius_norm,
    hadamard,
    khatri_rao,
    mttkrp,
)

__all__ = [
    "DegenerateIterateError",
    "FactorSet",
    "GradientSet",
    "random_factors",
    "gram_matrices",
    "gamma",
    "reconstruct",
    "objective",
    "gradient",
    "grad_norm",
    "evaluate",
    "normalize_and_sort",
]


class DegenerateIterateError(ArithmeticError):
    """Raised when an iterate has a zero factor column or factor matrix."""


@dataclass
class FactorSet:
    """The ``N`` factor matrices of a rank-``R`` CP model.

    ``lambdas`` is a derived report attached by :func:`normalize_and_sort`;
    the factor columns always carry the full magnitude.
    """

    factors: list[np.ndarray]
    lambdas: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.factors = [np.array(a, dtype=np.float64) for a in self.factors]
        if not self.factors:
            raise ValueError("a factor set needs at least one factor matrix")
        rank = self.factors[0].shape[1]
        for k, a in enumerate(self.factors):
            if a.ndim != 2 or a.shape[1] != rank:
                raise ValueError(f"factor {k} has shape {a.shape}; expected R={rank}")

    @property
    def rank(self) -> int:
        return self.factors[0].shape[1]

    @property
    def ndim(self) -> int:
        return len(self.factors)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a in self.factors)

    def copy(self) -> "FactorSet":
        lam = None if self.lambdas is None else self.lambdas.copy()
        return FactorSet([a.copy() for a in self.factors], lam)

    def __len__(self) -> int:
        return len(self.factors)

    def __getitem__(self, n: int) -> np.ndarray:
        return self.factors[n]


@dataclass
class GradientSet:
    """Per-mode gradient blocks ``G^(n)``, each ``I_n x R``."""

    grads: list[np.ndarray]

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.grads)))


def random_factors(shape: Sequence[int], rank: int,
                   rng: np.random.Generator) -> FactorSet:
    """Factors drawn from the standard uniform distribution, mode by mode."""
    return FactorSet([rng.uniform(0.0, 1.0, size=(int(s), rank)) for s in shape])


def _as_factors(f) -> list[np.ndarray]:
    return f.factors if isinstance(f, FactorSet) else list(f)


def _check_conformal(z: Tensor, factors: Sequence[np.ndarray]) -> None:
    if tuple(a.shape[0] for a in factors) != tuple(z.shape):
        raise ValueError(
            f"factor sizes {tuple(a.shape[0] for a in factors)} do not match "
            f"tensor shape {tuple(z.shape)}"
        )


def gram_matrices(factors: Sequence[np.ndarray]) -> list[np.ndarray]:
    """``A^(n)^T A^(n)`` for every mode."""
    return [a.T @ a for a in factors]


def gamma(grams: Sequence[np.ndarray], skip: int) -> np.ndarray:
    """Hadamard product of all Gram matrices except mode ``skip``."""
    others = [g for k, g in enumerate(grams) if k != skip]
    if not others:
        return np.ones_like(grams[skip])
    return hadamard(others)


def reconstruct(f) -> DenseTensor:
    """Dense tensor ``sum_r a_r^(1) o ... o a_r^(N)``."""
    factors = _as_factors(f)
    shape = tuple(a.shape[0] for a in factors)
    # khatri_rao rows run last-mode-fastest, which is numpy's C order
    full = khatri_rao(factors).sum(axis=1)
    return DenseTensor(full.reshape(shape))


def _model_norm_sq(factors: Sequence[np.ndarray]) -> float:
    return float(np.sum(hadamard(gram_matrices(factors))))


def objective(z: Tensor, f) -> float:
    """``0.5 * ||Z - [[A]]||^2``.

    Dense tensors are compared directly.  Sparse tensors use the expansion
    ``0.5||Z||^2 - <Z, [[A]]> + 0.5||[[A]]||^2`` so the model is never
    densified; the cross term reuses the MTTKRP.
    """
    factors = _as_factors(f)
    _check_conformal(z, factors)
    if isinstance(z, SparseTensor):
        last = z.ndim - 1
        cross = float(np.sum(mttkrp(z, factors, last) * factors[last]))
        znorm = frobenius_norm(z)
        val = 0.5 * znorm**2 - cross + 0.5 * _model_norm_sq(factors)
        return max(val, 0.0)
    diff = z.data - reconstruct(factors).data
    return 0.5 * float(np.sum(diff * diff))


def gradient(z: Tensor, f) -> GradientSet:
    """``G^(n) = -Z_(n) Phi^(n) + A^(n) Gamma^(n)`` for every mode."""
    factors = _as_factors(f)
    _check_conformal(z, factors)
    grams = gram_matrices(factors)
    return GradientSet([
        factors[n] @ gamma(grams, n) - mttkrp(z, factors, n)
        for n in range(len(factors))
    ])


def grad_norm(z: Tensor, f) -> float:
    """Scale-free stopping measure ``(sum_n ||G^(n)||^2)^(1/2) / ||Z||``."""
    znorm = frobenius_norm(z)
    if znorm == 0.0:
        raise ValueError("gradient norm is undefined for the zero tensor")
    return gradient(z, f).norm() / znorm


def evaluate(z: Tensor, f, znorm: float | None = None) -> tuple[float, float]:
    """Return ``(grad_norm, objective)`` from a single gradient pass.

    The objective uses the inner-product expansion for every tensor type,
    so it is accurate to roughly ``1e-16 * ||Z||^2``; use :func:`objective`
    when a residual below that level matters.
    """
    factors = _as_factors(f)
    _check_conformal(z, factors)
    if znorm is None:
        znorm = frobenius_norm(z)
    if znorm == 0.0:
        raise ValueError("gradient norm is undefined for the zero tensor")
    grams = gram_matrices(factors)
    total = 0.0
    for n, a in enumerate(factors):
        gam = gamma(grams, n)
        m = mttkrp(z, factors, n)
        g = a @ gam - m
        total += float(np.sum(g * g))
    # the last mode's pieces give the objective expansion
    cross = float(np.sum(m * a))
    model_sq = float(np.sum(gam * grams[-1]))
    fval = max(0.5 * znorm**2 - cross + 0.5 * model_sq, 0.0)
    return float(np.sqrt(total)) / znorm, fval


def normalize_and_sort(f: FactorSet) -> FactorSet:
    """Equilibrate column norms across modes and sort by decreasing weight.

    For each component ``r`` the weight is the geometric mean
    ``lambda_r = (prod_n ||a_r^(n)||)^(1/N)`` and every column is rescaled to
    norm ``lambda_r``, which leaves the reconstruction unchanged.  Ties are
    kept in original component order.
    """
    factors = f.factors
    norms = np.array([np.linalg.norm(a, axis=0) for a in factors])
    if np.any(norms == 0.0):
        bad = sorted(set(np.nonzero(norms == 0.0)[1].tolist()))
        raise DegenerateIterateError(f"zero factor column(s) in component(s) {bad}")
    lam = np.exp(np.mean(np.log(norms), axis=0))
    order = np.argsort(-lam, kind="stable")
    scaled = [(a * (lam / nrm))[:, order] for a, nrm in zip(factors, norms)]
    return FactorSet(scaled, lam[order])
