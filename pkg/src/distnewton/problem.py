"""Regularized GLM objective over partitioned data.

The objective is an average of per-worker averages of scalar losses applied
to inner products, plus an L2 term:

    P(x) = (1/n) sum_i (1/m) sum_j loss(a_ij . x, b_ij) + (lam/2) ||x||^2

The second derivative of the scalar loss at each sample (the "h coefficient")
is the central quantity: together with the rank-one matrices a a^T it
assembles the full Hessian, and the Newton-type methods in this package
learn or reuse these coefficients instead of shipping matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, Partition
from .errors import InputError
from .linalg import SymMatrix, weighted_gram

Array = np.ndarray


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: Array) -> Array:
    # log(1 + exp(z)) without overflow for large positive z
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass(frozen=True)
class LossModel:
    """Scalar loss phi(t, b) with first/second derivatives in t.

    ``gamma`` bounds |phi''| everywhere; ``nu`` is a Lipschitz constant of
    phi''. Both are closed-form per loss kind, not estimated from data.
    """

    kind: str
    phi: Callable[[Array, Array], Array]
    dphi: Callable[[Array, Array], Array]
    ddphi: Callable[[Array, Array], Array]
    gamma: float
    nu: float


# max |d^3/dt^3 log(1+exp(-t))| = max |s(1-s)(1-2s)| over s in (0,1)
LOGISTIC_NU = 1.0 / (6.0 * math.sqrt(3.0))

_LOGISTIC = LossModel(
    kind="logistic",
    phi=lambda t, b: _softplus(-b * t),
    dphi=lambda t, b: -b * _sigmoid(-b * t),
    ddphi=lambda t, b: (b * b) * _sigmoid(b * t) * _sigmoid(-b * t),
    gamma=0.25,
    nu=LOGISTIC_NU,
)

_SQUARED = LossModel(
    kind="squared",
    phi=lambda t, b: 0.5 * (t - b) ** 2,
    dphi=lambda t, b: t - b,
    ddphi=lambda t, b: np.ones_like(t),
    gamma=1.0,
    nu=0.0,
)


def loss_model(kind: str) -> LossModel:
    try:
        return {"logistic": _LOGISTIC, "squared": _SQUARED}[kind]
    except KeyError:
        raise InputError(f"unknown loss kind {kind!r}") from None


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness data of a concrete problem instance."""

    gamma: float
    nu: float
    max_row_norm: float          # largest feature-row norm over assigned points
    hessian_lipschitz: float     # nu * max_row_norm**3


@dataclass
class Problem:
    """Dataset + partition + loss + regularizer, with cached worker views."""

    dataset: Dataset
    part: Partition
    loss: LossModel
    lam: float

    # worker-major stacked copies, built once
    _rows: Array = field(init=False, repr=False)
    _labels: Array = field(init=False, repr=False)

    def __post_init__(self):
        if self.lam < 0:
            raise InputError("regularization parameter must be nonnegative")
        count = len(self.dataset)
        for shard in self.part.shards:
            if np.max(shard) >= count:
                raise InputError("partition references rows outside the dataset")
        order = np.concatenate(self.part.shards)
        self._rows = self.dataset.features[order]
        self._labels = self.dataset.labels[order]

    @property
    def n(self) -> int:
        return self.part.n

    @property
    def m(self) -> int:
        return self.part.m

    @property
    def d(self) -> int:
        return self.dataset.d

    @property
    def stacked_rows(self) -> Array:
        """All assigned feature rows, worker-major: row i*m+j belongs to worker i."""
        return self._rows

    @property
    def stacked_labels(self) -> Array:
        return self._labels

    def worker_rows(self, i: int) -> Array:
        return self._rows[i * self.m:(i + 1) * self.m]

    def worker_labels(self, i: int) -> Array:
        return self._labels[i * self.m:(i + 1) * self.m]

    # -- values and derivatives -------------------------------------------

    def value(self, x: Array) -> float:
        t = self._rows @ x
        data_term = float(np.mean(self.loss.phi(t, self._labels)))
        return data_term + 0.5 * self.lam * float(x @ x)

    def grad(self, x: Array) -> Array:
        t = self._rows @ x
        w = self.loss.dphi(t, self._labels)
        return self._rows.T @ w / (self.n * self.m) + self.lam * x

    def local_grad(self, i: int, x: Array) -> Array:
        rows = self.worker_rows(i)
        w = self.loss.dphi(rows @ x, self.worker_labels(i))
        return rows.T @ w / self.m

    def h_coeffs(self, i: int, x: Array) -> Array:
        """Per-sample second derivatives of worker i at x."""
        rows = self.worker_rows(i)
        return self.loss.ddphi(rows @ x, self.worker_labels(i))

    def h_all(self, x: Array) -> Array:
        """All h coefficients at x as an (n, m) array."""
        t = self._rows @ x
        return self.loss.ddphi(t, self._labels).reshape(self.n, self.m)

    def hessian(self, x: Array) -> SymMatrix:
        """Full second derivative of P at x (regularizer included)."""
        h = self.loss.ddphi(self._rows @ x, self._labels)
        gram = weighted_gram(self._rows, h, scale=1.0 / (self.n * self.m))
        return gram.add_diagonal(self.lam)

    def data_gram(self, weights: Array) -> SymMatrix:
        """(1/nm) sum_ij weights_ij a_ij a_ij^T for an (n, m) weight array."""
        return weighted_gram(self._rows, np.asarray(weights).reshape(-1),
                             scale=1.0 / (self.n * self.m))

    def mean_gram(self) -> SymMatrix:
        """(1/nm) sum_ij a_ij a_ij^T (unit weights)."""
        return self.data_gram(np.ones(self.n * self.m))

    def constants(self) -> ProblemConstants:
        radius = float(np.max(np.linalg.norm(self._rows, axis=1)))
        return ProblemConstants(
            gamma=self.loss.gamma,
            nu=self.loss.nu,
            max_row_norm=radius,
            hessian_lipschitz=self.loss.nu * radius ** 3,
        )

    def grad_lipschitz_bound(self) -> float:
        """Upper bound gamma * max_row_norm^2 + lam on the gradient Lipschitz constant."""
        c = self.constants()
        return c.gamma * c.max_row_norm ** 2 + self.lam


def make_problem(dataset: Dataset, n: int, shuffle_seed: int,
                 loss_kind: str = "logistic", lam: float = 0.0) -> Problem:
    """Convenience constructor: partition the dataset and wrap everything up."""
    from .data import partition as _partition

    part = _partition(dataset, n, shuffle_seed)
    return Problem(dataset=dataset, part=part, loss=loss_model(loss_kind), lam=lam)
