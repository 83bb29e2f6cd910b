"""Truncated-Fock-space linear algebra for the photon-number-diagonal sector.

A phase-insensitive device maps dephased states to dephased states, so its
action is fully described by three real-matrix objects on a truncated Fock
space of dimension N:

* ``DephasedState``      -- probability vector p_n over photon numbers,
* ``GreenMatrix``        -- finite-time map G[k, m] (output k, input m),
* ``LiouvillianMatrix``  -- generator L[n, m] with dp/dt = L p.

Generator and map are connected by the matrix exponential / principal
logarithm, G = exp(L tau).  Truncation makes the most-excited columns leak
probability; every validity claim therefore carries a configurable tail
tolerance, and callers exclude a guard band of high Fock indices from
quantitative statements.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import BranchFailureError, InvalidInputError

DEFAULT_TAIL_TOL = 1e-6
ENTRY_ATOL = 1e-12
COLUMN_SUM_ATOL = 1e-9


def _as_square(mat, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InvalidInputError(f"{name} must be a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return mat


@dataclass(frozen=True)
class DephasedState:
    """Photon-number-diagonal density matrix, stored as its diagonal.

    Entries must be nonnegative and sum to at most 1; truncation may only
    remove probability, so the sum must stay within ``tail_tol`` of 1.
    Statistical estimates, which fluctuate negative, use
    ``EstimatedDistribution`` instead.
    """

    probs: np.ndarray
    tail_tol: float = DEFAULT_TAIL_TOL

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise InvalidInputError("probs must be a nonempty 1-d vector")
        if not np.all(np.isfinite(probs)):
            raise InvalidInputError("probs has non-finite entries")
        if probs.min() < -ENTRY_ATOL:
            raise InvalidInputError(f"negative probability {probs.min():.3e}")
        total = probs.sum()
        if total > 1.0 + 1e-12 or total < 1.0 - self.tail_tol:
            raise InvalidInputError(
                f"probabilities sum to {total:.12g}, outside [1 - {self.tail_tol:g}, 1]"
            )
        probs = probs.copy()
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def dim(self) -> int:
        return self.probs.size

    def mean_photon(self) -> float:
        return float(np.arange(self.dim) @ self.probs)

    @classmethod
    def fock(cls, n: int, dim: int) -> "DephasedState":
        """|n><n| in an N-dimensional truncation."""
        if not 0 <= n < dim:
            raise InvalidInputError(f"Fock index {n} outside [0, {dim})")
        probs = np.zeros(dim)
        probs[n] = 1.0
        return cls(probs)


@dataclass(frozen=True)
class EstimatedDistribution:
    """Number distribution estimated from data: entries may go negative and
    the sum is unconstrained.  ``sigma`` holds per-entry standard errors
    when available."""

    values: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise InvalidInputError("values must be a 1-d vector")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("values has non-finite entries")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.sigma is not None:
            sigma = np.asarray(self.sigma, dtype=float)
            if sigma.shape != values.shape or not np.all(np.isfinite(sigma)) or sigma.min() < 0:
                raise InvalidInputError("sigma must be finite, nonnegative, same shape as values")
            sigma = sigma.copy()
            sigma.flags.writeable = False
            object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class GreenMatrix:
    """Finite-time propagation map on the diagonal sector.

    ``mat[k, m]`` is the probability of finding k output photons given the
    input Fock state |m><m|; ``tau`` is the propagation time.  Columns are
    sub-stochastic: truncation leakage only lowers their sums.  When
    ``tail_tol`` is given, columns below the guard band are additionally
    required to sum to at least ``1 - tail_tol``.
    """

    mat: np.ndarray
    tau: float
    tail_tol: float | None = None
    guard: int = 0
    _validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        mat = _as_square(self.mat, "GreenMatrix")
        if not np.isfinite(self.tau) or self.tau < 0:
            raise InvalidInputError(f"tau must be finite and >= 0, got {self.tau}")
        if self._validate:
            if mat.min() < -ENTRY_ATOL:
                raise InvalidInputError(f"negative Green entry {mat.min():.3e}")
            sums = mat.sum(axis=0)
            if sums.max() > 1.0 + COLUMN_SUM_ATOL:
                raise InvalidInputError(f"column sum {sums.max():.12g} exceeds 1")
            if self.tail_tol is not None:
                stop = mat.shape[1] - self.guard
                low = sums[:stop].min() if stop > 0 else 1.0
                if low < 1.0 - self.tail_tol:
                    raise InvalidInputError(
                        f"column sum {low:.12g} below 1 - {self.tail_tol:g} inside guard band"
                    )
        mat = mat.copy()
        mat.flags.writeable = False
        object.__setattr__(self, "mat", mat)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def from_estimate(cls, mat, tau: float) -> "GreenMatrix":
        """Wrap an estimated map: finiteness checked, positivity not."""
        return cls(mat, tau, _validate=False)


@dataclass(frozen=True)
class LiouvillianMatrix:
    """Generator of the diagonal-sector dynamics, dp/dt = L p.

    Off-diagonal entries are transition rates and must be nonnegative;
    column sums vanish for probability conservation, except that truncated
    top columns may leak (sum down to ``-rate_tail_tol``).
    """

    mat: np.ndarray
    rate_tail_tol: float | None = None
    guard: int = 0
    _validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        mat = _as_square(self.mat, "LiouvillianMatrix")
        if self._validate:
            off = mat.copy()
            np.fill_diagonal(off, 0.0)
            if off.min() < -ENTRY_ATOL:
                raise InvalidInputError(f"negative off-diagonal rate {off.min():.3e}")
            sums = mat.sum(axis=0)
            scale = max(1.0, np.abs(mat).max())
            if sums.max() > COLUMN_SUM_ATOL * scale:
                raise InvalidInputError(f"column sum {sums.max():.12g} above 0")
            if self.rate_tail_tol is not None:
                stop = mat.shape[1] - self.guard
                low = sums[:stop].min() if stop > 0 else 0.0
                if low < -self.rate_tail_tol:
                    raise InvalidInputError(
                        f"column sum {low:.12g} below -{self.rate_tail_tol:g} inside guard band"
                    )
        mat = mat.copy()
        mat.flags.writeable = False
        object.__setattr__(self, "mat", mat)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def from_estimate(cls, mat) -> "LiouvillianMatrix":
        """Wrap an extracted generator: finiteness checked, sign structure not."""
        return cls(mat, _validate=False)


def matrix_exp(lv: LiouvillianMatrix, tau: float) -> GreenMatrix:
    """Green matrix G = exp(L tau) of a constant generator.

    Uses scaling-and-squaring with Pade approximants (scipy.linalg.expm).
    For a valid generator the result is entrywise nonnegative with column
    sums at most 1 up to roundoff.
    """
    if not np.isfinite(tau) or tau < 0:
        raise InvalidInputError(f"tau must be finite and >= 0, got {tau}")
    g = scipy.linalg.expm(lv.mat * tau)
    # expm of a generator can undershoot zero by roundoff; clip fuzz only.
    g[(g < 0) & (g > -ENTRY_ATOL)] = 0.0
    return GreenMatrix(g, tau)


def matrix_log(g: GreenMatrix) -> LiouvillianMatrix:
    """Generator extracted as the principal matrix logarithm, L = log(G)/tau.

    Raises ``BranchFailureError`` when G has an eigenvalue on the closed
    negative real axis, where the principal branch is undefined; callers
    then fall back to a finite-difference extraction.
    """
    if g.tau <= 0:
        raise InvalidInputError("matrix_log needs tau > 0")
    eig = scipy.linalg.eigvals(g.mat)
    scale = max(1.0, np.abs(eig).max())
    on_axis = (eig.real <= 0.0) & (np.abs(eig.imag) <= 1e-12 * scale)
    if np.any(on_axis):
        bad = eig[on_axis]
        raise BranchFailureError(
            f"eigenvalue(s) on the closed negative real axis: {bad}"
        )
    log = scipy.linalg.logm(g.mat)
    if np.iscomplexobj(log):
        imag = np.abs(log.imag).max()
        if imag > 1e-8 * max(1.0, np.abs(log.real).max()):
            raise BranchFailureError(
                f"principal logarithm came out complex (max imag {imag:.3e})"
            )
        log = log.real
    return LiouvillianMatrix.from_estimate(log / g.tau)


def apply_green(g: GreenMatrix, s: DephasedState) -> DephasedState:
    """Propagate a dephased state: p_out = G p_in."""
    if g.dim != s.dim:
        raise InvalidInputError(f"dimension mismatch: G is {g.dim}, state is {s.dim}")
    out = g.mat @ s.probs
    out[(out < 0) & (out > -ENTRY_ATOL)] = 0.0
    if out.sum() > s.probs.sum() + 1e-12:
        raise InvalidInputError("propagation increased total probability")
    return DephasedState(out, tail_tol=1.0)


def write_matrix_csv(path, mat, sigma=None) -> None:
    """Shared matrix CSV format: header row,col,value,sigma; row-major;
    sigma column empty for theoretical matrices; 17 significant digits."""
    mat = np.asarray(mat, dtype=float)
    if sigma is not None:
        sigma = np.asarray(sigma, dtype=float)
        if sigma.shape != mat.shape:
            raise InvalidInputError("sigma shape must match matrix shape")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "value", "sigma"])
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                s = "" if sigma is None else format(sigma[i, j], ".17g")
                writer.writerow([i, j, format(mat[i, j], ".17g"), s])


def read_matrix_csv(path):
    """Read the shared matrix CSV format; returns (matrix, sigma or None)."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "value", "sigma"]:
            raise InvalidInputError(f"unexpected CSV header {header!r} in {path}")
        for rec in reader:
            if not rec:
                continue
            rows.append(rec)
    if not rows:
        raise InvalidInputError(f"empty matrix CSV {path}")
    ri = np.array([int(r[0]) for r in rows])
    ci = np.array([int(r[1]) for r in rows])
    nrow, ncol = ri.max() + 1, ci.max() + 1
    mat = np.full((nrow, ncol), np.nan)
    mat[ri, ci] = [float(r[2]) for r in rows]
    if np.isnan(mat).any():
        raise InvalidInputError(f"matrix CSV {path} does not cover every (row, col)")
    has_sigma = [r[3] != "" for r in rows]
    if all(has_sigma):
        sig = np.full((nrow, ncol), np.nan)
        sig[ri, ci] = [float(r[3]) for r in rows]
        return mat, sig
    if any(has_sigma):
        raise InvalidInputError(f"matrix CSV {path} mixes empty and filled sigma")
    return mat, None
