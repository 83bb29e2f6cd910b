"""Homodyne simulation and number-distribution estimation for dephased states.

Quadrature convention: x = (a + a^dag)/sqrt(2), vacuum variance 1/2, so the
Fock wavefunctions are the textbook Hermite functions psi_n.  Detection with
quantum efficiency eta_H is modelled as x -> sqrt(eta_H) x + vacuum noise of
variance (1 - eta_H)/2, which on dephased states is exactly equivalent to a
Bernoulli photon-loss channel applied before an ideal measurement.

Estimation uses the eta = 1 diagonal pattern functions f_nn and compensates
the efficiency afterwards by inverting the Bernoulli channel on the estimated
distribution; on the diagonal sector the two compensation routes coincide.
The inversion is only stable for eta_H > 1/2.

The diagonal pattern function is f_nn = d/dx (psi_n phi_n), with phi_n the
irregular (non-normalizable) second oscillator solution fixed by the
Wronskian psi_n phi_n' - psi_n' phi_n = 2.  A naive upward recurrence for
phi_n is numerically unstable beyond the classical turning point (the
regular solution dominates there), so phi_n is generated by integrating its
differential equation outward from the origin -- the outward direction
follows the growing solution and is stable for every order and argument.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.special import comb, dawsn

from .errors import EfficiencyThresholdError, InvalidInputError
from .fock import DephasedState, EstimatedDistribution

SQRT2 = np.sqrt(2.0)

# ---------------------------------------------------------------------------
# Fock wavefunctions


def wavefunctions_upto(n_max: int, x) -> np.ndarray:
    """psi_n(x) for n = 0..n_max, by the stable upward recurrence."""
    x = np.asarray(x, dtype=float)
    psi = np.empty((n_max + 1,) + x.shape)
    psi[0] = np.pi ** -0.25 * np.exp(-0.5 * x * x)
    if n_max >= 1:
        psi[1] = SQRT2 * x * psi[0]
    for n in range(1, n_max):
        psi[n + 1] = np.sqrt(2.0 / (n + 1)) * x * psi[n] - np.sqrt(n / (n + 1.0)) * psi[n - 1]
    return psi


def wavefunction(n: int, x):
    """Harmonic-oscillator eigenfunction psi_n(x), unit normalized."""
    if n < 0:
        raise InvalidInputError("Fock index must be >= 0")
    scalar = np.isscalar(x)
    out = wavefunctions_upto(n, np.atleast_1d(np.asarray(x, dtype=float)))[n]
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# Irregular solutions and pattern functions


def _phi_origin(n_max: int):
    """phi_n(0) and phi_n'(0).

    Seeds phi_0 = 2 pi^(1/4) e^(x^2/2) dawsn(x) and its raising-operator
    partner phi_1; higher orders from the three-term recurrence evaluated at
    x = 0, where every level is oscillatory and the recurrence is benign.
    """
    val = np.zeros(n_max + 1)
    der = np.zeros(n_max + 1)
    der[0] = 2.0 * np.pi ** 0.25
    if n_max >= 1:
        val[1] = -SQRT2 * np.pi ** 0.25
    for n in range(1, n_max):
        a = np.sqrt(2.0 / (n + 1))
        b = np.sqrt(n / (n + 1.0))
        val[n + 1] = -b * val[n - 1]
        der[n + 1] = a * val[n] - b * der[n - 1]
    return val, der


def _phi_on_halfgrid(n_max: int, xgrid: np.ndarray) -> np.ndarray:
    """phi_n on an increasing grid of x >= 0, all orders in one integration.

    u_n'' = (x^2 - 2n - 1) u_n integrated outward from the origin; the
    irregular solution grows like e^(x^2/2), so it is the dominant mode and
    the integration keeps full relative accuracy.
    """
    ns = np.arange(n_max + 1)
    v0, d0 = _phi_origin(n_max)
    y0 = np.concatenate([v0, d0])

    def rhs(x, y):
        u, up = y[: n_max + 1], y[n_max + 1 :]
        return np.concatenate([up, (x * x - (2.0 * ns + 1.0)) * u])

    # Absolute tolerance only matters at oscillation zero crossings; an early
    # absolute error grows with the same dominant mode as phi itself, so the
    # relative accuracy of the table is unaffected.
    sol = solve_ivp(rhs, (0.0, float(xgrid[-1])), y0, method="DOP853",
                    rtol=1e-12, atol=1e-30, dense_output=True)
    if not sol.success:
        raise InvalidInputError(f"irregular-solution integration failed: {sol.message}")
    return sol.sol(xgrid)[: n_max + 1]


class PatternBasis:
    """Tabulated diagonal pattern functions f_00..f_nn with spline lookup.

    f_nn is even, so tables cover x >= 0 and queries use |x|.  Beyond the
    table (|x| > turning point + 10) the algebraic tail
    -x (x^2 - 2n - 1)^(-3/2) is used; data essentially never reach it.
    """

    GRID_STEP = 2.5e-3
    MARGIN = 10.0

    def __init__(self, n_max: int):
        self.n_max = n_max
        self.x_max = float(np.sqrt(2.0 * n_max + 1.0) + self.MARGIN)
        npts = int(np.ceil(self.x_max / self.GRID_STEP)) + 1
        grid = np.linspace(0.0, self.x_max, npts)
        psi = wavefunctions_upto(n_max, grid)
        phi = _phi_on_halfgrid(n_max, grid)
        f = np.empty_like(psi)
        f[0] = 2.0 - 4.0 * grid * dawsn(grid)
        for n in range(1, n_max + 1):
            f[n] = (np.sqrt(2.0 * n) * (psi[n - 1] * phi[n] + psi[n] * phi[n - 1])
                    - 2.0 * grid * psi[n] * phi[n])
        self._splines = []
        for n in range(n_max + 1):
            end_slope = (f[n, -1] - f[n, -2]) / (grid[-1] - grid[-2])
            self._splines.append(
                CubicSpline(grid, f[n], bc_type=((1, 0.0), (1, float(end_slope))))
            )

    def _tail(self, n: int, ax: np.ndarray) -> np.ndarray:
        return -ax / (ax * ax - (2.0 * n + 1.0)) ** 1.5

    def evaluate(self, n: int, x) -> np.ndarray:
        if not 0 <= n <= self.n_max:
            raise InvalidInputError(f"order {n} outside tabulated range 0..{self.n_max}")
        ax = np.abs(np.asarray(x, dtype=float))
        out = self._splines[n](np.minimum(ax, self.x_max))
        far = ax > self.x_max
        if np.any(far):
            out = np.where(far, self._tail(n, ax), out)
        return out

    def evaluate_all(self, x) -> np.ndarray:
        """f_nn(x) for all tabulated n; shape (n_max + 1, len(x))."""
        x = np.asarray(x, dtype=float)
        return np.stack([self.evaluate(n, x) for n in range(self.n_max + 1)])


_BASIS_CACHE: dict[int, PatternBasis] = {}
_BASIS_LOCK = threading.Lock()


def pattern_basis(n_max: int) -> PatternBasis:
    """Shared immutable pattern-function tables (built once per order cap)."""
    cap = max(8, int(np.ceil((n_max + 1) / 8.0)) * 8)
    with _BASIS_LOCK:
        basis = _BASIS_CACHE.get(cap)
        if basis is None:
            basis = PatternBasis(cap)
            _BASIS_CACHE[cap] = basis
    return basis


def pattern_function(n: int, x):
    """Diagonal pattern kernel f_nn(x): averaging it over quadrature samples
    of a dephased state estimates <n|rho|n> at unit efficiency."""
    if n < 0:
        raise InvalidInputError("Fock index must be >= 0")
    scalar = np.isscalar(x)
    out = pattern_basis(n).evaluate(n, np.atleast_1d(np.asarray(x, dtype=float)))
    return float(out[0]) if scalar else out


class DualPatternKernels:
    """Independent construction of the diagonal kernels.

    Solves the biorthogonality conditions directly: the kernel for level n
    is the linear combination sum_j c_nj psi_j^2 with S c_n = e_n, where
    S_ij = integral psi_i^2 psi_j^2 dx (computed exactly by Gauss-Hermite).
    Agrees with ``pattern_function`` on every state supported at or below
    n_max; used as a cross-check of the recurrence/ODE route.
    """

    def __init__(self, n_max: int, quad_points: int = 200):
        self.n_max = n_max
        nodes, weights = hermgauss(quad_points)
        psi2 = wavefunctions_upto(n_max, nodes) ** 2
        gram = np.einsum("i,ni,mi->nm", weights * np.exp(nodes * nodes), psi2, psi2)
        self.coeff = np.linalg.solve(gram, np.eye(n_max + 1))

    def evaluate(self, n: int, x) -> np.ndarray:
        if not 0 <= n <= self.n_max:
            raise InvalidInputError(f"order {n} outside 0..{self.n_max}")
        psi2 = wavefunctions_upto(self.n_max, np.asarray(x, dtype=float)) ** 2
        return np.tensordot(self.coeff[n], psi2, axes=1)


# ---------------------------------------------------------------------------
# Quadrature sampling


class _FockCdfTable:
    """Inverse-CDF table for |psi_n(x)|^2 on x in [-x_max, x_max]."""

    NODES = 4096

    def __init__(self, n: int):
        x_max = np.sqrt(2.0 * n + 1.0) + 6.0
        self.x = np.linspace(-x_max, x_max, self.NODES)
        pdf = wavefunctions_upto(n, self.x)[n] ** 2
        cdf = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) * 0.5 * np.diff(self.x))])
        self.cdf = cdf / cdf[-1]

    def draw(self, u: np.ndarray) -> np.ndarray:
        return np.interp(u, self.cdf, self.x)


_CDF_CACHE: dict[int, _FockCdfTable] = {}
_CDF_LOCK = threading.Lock()


def _cdf_table(n: int) -> _FockCdfTable:
    with _CDF_LOCK:
        table = _CDF_CACHE.get(n)
        if table is None:
            table = _FockCdfTable(n)
            _CDF_CACHE[n] = table
    return table


def sample_quadrature(state: DephasedState, eta_h: float, rng: np.random.Generator,
                      size: int | None = None):
    """Homodyne samples from a dephased state at efficiency eta_h.

    Draw n from the number distribution, x from psi_n^2 (tabulated inverse
    CDF), then smear: sqrt(eta_H) x + sqrt((1 - eta_H)/2) N(0, 1).  The
    vacuum keeps variance 1/2 for every eta_h.
    """
    if not 0.0 < eta_h <= 1.0:
        raise InvalidInputError(f"eta_h must be in (0, 1], got {eta_h}")
    count = 1 if size is None else int(size)
    if count < 0:
        raise InvalidInputError("size must be >= 0")
    p = state.probs / state.probs.sum()
    ks = rng.choice(state.dim, size=count, p=p)
    u = rng.random(count)
    xs = np.empty(count)
    for k in np.unique(ks):
        mask = ks == k
        xs[mask] = _cdf_table(int(k)).draw(u[mask])
    if eta_h < 1.0:
        xs = np.sqrt(eta_h) * xs + np.sqrt((1.0 - eta_h) / 2.0) * rng.standard_normal(count)
    return float(xs[0]) if size is None else xs


# ---------------------------------------------------------------------------
# Bernoulli loss channel and its inverse


def bernoulli_matrix(eta: float, size: int) -> np.ndarray:
    """Loss-channel matrix B[m, n] = C(n, m) eta^m (1 - eta)^(n - m), n >= m."""
    n = np.arange(size)
    m = n[:, None]
    with np.errstate(invalid="ignore"):
        mat = comb(n[None, :], m) * eta ** m * (1.0 - eta) ** np.maximum(n[None, :] - m, 0)
    return np.triu(mat)


def bernoulli(r, eta: float):
    """Push a number distribution through photon loss with survival eta."""
    if not 0.0 < eta <= 1.0:
        raise InvalidInputError(f"eta must be in (0, 1], got {eta}")
    r = np.asarray(r, dtype=float)
    return bernoulli_matrix(eta, r.size) @ r


def inverse_bernoulli(r_prime, eta: float, k_max: int | None = None):
    """Undo photon loss: r_n = sum_m C(m, n) eta^(-n) (1 - 1/eta)^(m - n) r'_m.

    The alternating series is the Bernoulli matrix at
    "efficiency" 1/eta; it diverges under truncation noise for eta <= 1/2,
    which is rejected.
    """
    if eta <= 0.5:
        raise EfficiencyThresholdError(
            f"loss inversion requires eta > 1/2, got {eta}")
    if eta > 1.0:
        raise InvalidInputError(f"eta must be <= 1, got {eta}")
    r_prime = np.asarray(r_prime, dtype=float)
    size = r_prime.size if k_max is None else k_max + 1
    if size < r_prime.size:
        r_prime = r_prime[:size]
    elif size > r_prime.size:
        r_prime = np.concatenate([r_prime, np.zeros(size - r_prime.size)])
    return bernoulli_matrix(1.0 / eta, size) @ r_prime


# ---------------------------------------------------------------------------
# Block estimator


@dataclass(frozen=True)
class HomodyneConfig:
    """Homodyne leg of an experiment: efficiency, estimation range, data volume."""

    eta_h: float
    k_max: int
    samples_per_state: int
    blocks: int

    def __post_init__(self):
        if not np.isfinite(self.eta_h) or self.eta_h <= 0.5 or self.eta_h > 1.0:
            raise EfficiencyThresholdError(
                f"eta_h must be in (1/2, 1], got {self.eta_h}")
        if self.k_max < 0:
            raise InvalidInputError("k_max must be >= 0")
        if self.samples_per_state < 0:
            raise InvalidInputError("samples_per_state must be >= 0")
        if self.blocks < 2:
            raise InvalidInputError("need at least 2 statistical blocks")


@dataclass(frozen=True)
class QuadratureBatch:
    """One statistical block of quadrature samples for one conditioning outcome."""

    samples: np.ndarray
    block_id: int
    outcome_n: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise InvalidInputError("samples must be a 1-d vector")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("samples contain non-finite values")
        samples = samples.copy()
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)


def block_estimates(batches, cfg: HomodyneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-block compensated estimates of the number distribution.

    Returns (block_ids, values) where values[b, k] is the block-b pattern
    average of f_kk, already pushed through the inverse Bernoulli channel at
    eta_h.  Blocks with no samples are dropped.
    """
    groups: dict[int, list[np.ndarray]] = {}
    for batch in batches:
        if batch.samples.size:
            groups.setdefault(batch.block_id, []).append(batch.samples)
    if len(groups) < 2:
        raise InvalidInputError(
            f"need >= 2 non-empty blocks for error estimation, got {len(groups)}")
    basis = pattern_basis(cfg.k_max)
    comp = bernoulli_matrix(1.0 / cfg.eta_h, cfg.k_max + 1)
    block_ids = np.array(sorted(groups))
    values = np.empty((block_ids.size, cfg.k_max + 1))
    for i, bid in enumerate(block_ids):
        xs = np.concatenate(groups[bid])
        raw = np.array([basis.evaluate(n, xs).mean() for n in range(cfg.k_max + 1)])
        values[i] = comp @ raw
    return block_ids, values


def estimate_diagonal(batches, cfg: HomodyneConfig) -> EstimatedDistribution:
    """Number distribution of one outcome's output state, with errors.

    Block averages of the diagonal pattern functions give per-block
    estimates; their mean is the point estimate and their scatter divided by
    sqrt(blocks) the standard error.  Efficiency compensation (inverse
    Bernoulli at eta_h) is applied per block, so the quoted errors include
    the compensation-induced correlations.
    """
    _, values = block_estimates(batches, cfg)
    nblocks = values.shape[0]
    r_hat = values.mean(axis=0)
    sigma = values.std(axis=0, ddof=1) / np.sqrt(nblocks)
    return EstimatedDistribution(r_hat, sigma)
