"""Theoretical device models producing diagonal-sector Green matrices.

Two devices are built in:

* Phase-insensitive linear amplifier: generator 2{A D[a+] + B D[a]}, whose
  number-diagonal matrix is exactly tridiagonal (one-photon emission below
  the diagonal, one-photon absorption above it).

* One-atom traveling-wave laser amplifier: a two-level atom pumped at rates
  set by the unsaturated inversion, coupled to the cavity mode by an
  exchange term g [s+ a - s- a+, rho], with cavity decay gamma.  The joint
  master equation is propagated to a trace-out time t*, after which the
  atom is discarded and the photon-number diagonal of the field remains.
  Both a deterministic ODE solve and a Monte Carlo wave-function (quantum
  jump) unraveling are provided; they estimate the same truncated-space
  Green matrix, which makes the ODE an exact oracle for the jump code.

Joint-space convention: basis index = atom * N + photon with atom 0 = ground
and 1 = excited; sz = diag(-1, +1) on the atom.
"""

from __future__ import annotations

import enum
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

from ._streams import TRAJECTORY_STREAM, substream
from .errors import IntegrationError, InvalidInputError
from .fock import GreenMatrix, LiouvillianMatrix, matrix_log


@dataclass(frozen=True)
class PiaParams:
    """Phase-insensitive amplifier: gain A, loss B, propagation time tau."""

    a_gain: float
    b_loss: float
    tau: float

    def __post_init__(self):
        for name in ("a_gain", "b_loss"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and >= 0, got {v}")
        if not np.isfinite(self.tau) or self.tau <= 0:
            raise InvalidInputError(f"tau must be finite and > 0, got {self.tau}")


def build_pia(p: PiaParams, dim: int) -> LiouvillianMatrix:
    """Tridiagonal amplifier generator on an N-dimensional truncation.

    L[n, m] = 2 A (m+1) (delta_{n,m+1} - delta_{nm})
            + 2 B m     (delta_{n,m-1} - delta_{nm}).
    Columns below the top sum to zero exactly (integer-weighted cancellation);
    the last column leaks its upward rate out of the truncation.
    """
    if dim < 2:
        raise InvalidInputError("dimension must be >= 2")
    mat = np.zeros((dim, dim))
    m = np.arange(dim)
    mat[m, m] = -2.0 * (p.a_gain * (m + 1) + p.b_loss * m)
    mat[m[1:], m[:-1]] = 2.0 * p.a_gain * (m[:-1] + 1)   # emission, n = m + 1
    mat[m[:-1], m[1:]] = 2.0 * p.b_loss * m[1:]          # absorption, n = m - 1
    return LiouvillianMatrix(mat)


class AtomInit(enum.Enum):
    """Atom state fed to the laser at t = 0."""

    EXCITED = "excited"
    GROUND = "ground"
    INVERSION_STEADY_STATE = "inversion_steady_state"


@dataclass(frozen=True)
class LaserParams:
    """One-atom laser in dimensionless form.

    c_coop = g^2 / (gamma gamma_perp), n_sat = gamma_par gamma_perp / (4 g^2),
    f_ratio = gamma_par / (2 gamma_perp), with cavity decay gamma_cav and
    trace-out time t_star.  sigma0 is the unsaturated inversion.
    """

    c_coop: float
    n_sat: float
    sigma0: float
    f_ratio: float
    gamma_cav: float
    t_star: float

    def __post_init__(self):
        for name in ("c_coop", "n_sat", "f_ratio", "gamma_cav"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidInputError(f"{name} must be finite and > 0, got {v}")
        if not -1.0 <= self.sigma0 <= 1.0:
            raise InvalidInputError(f"sigma0 must be in [-1, 1], got {self.sigma0}")
        if not np.isfinite(self.t_star) or self.t_star <= 0:
            raise InvalidInputError(f"t_star must be finite and > 0, got {self.t_star}")
        g, gperp, gpar = laser_rates(self)
        if self.t_star * max(gpar, gperp) < 3.0:
            warnings.warn(
                "t_star is not large against the atomic relaxation times; "
                "the traced-out map retains atom-field correlations",
                stacklevel=2)


def laser_rates(p: LaserParams) -> tuple[float, float, float]:
    """Solve the three dimensionless definitions for (g, gamma_perp, gamma_par).

    gamma_perp = 2 n_sat c_coop gamma / f, gamma_par = 2 f gamma_perp,
    g = sqrt(c_coop gamma gamma_perp); unique positive solution.
    """
    gperp = 2.0 * p.n_sat * p.c_coop * p.gamma_cav / p.f_ratio
    gpar = 2.0 * p.f_ratio * gperp
    g = np.sqrt(p.c_coop * p.gamma_cav * gperp)
    return float(g), float(gperp), float(gpar)


def _joint_operators(dim: int):
    """Operators on the 2N joint space (atom index slow, photon index fast)."""
    a = np.diag(np.sqrt(np.arange(1, dim)), k=1)
    id_ph = np.eye(dim)
    sp = np.zeros((2, 2)); sp[1, 0] = 1.0          # |e><g|
    sm = sp.T                                       # |g><e|
    sz = np.diag([-1.0, 1.0])
    id_at = np.eye(2)
    return {
        "a": np.kron(id_at, a),
        "ad": np.kron(id_at, a.T),
        "sp": np.kron(sp, id_ph),
        "sm": np.kron(sm, id_ph),
        "sz": np.kron(sz, id_ph),
    }


class LaserGenerator:
    """Joint atom-field generator: pump/decay dissipators plus the exchange
    commutator g [s+ a - s- a+, rho].  All matrices real, so the generator
    maps real density matrices to real ones."""

    def __init__(self, params: LaserParams, dim: int):
        if dim < 2:
            raise InvalidInputError("dimension must be >= 2")
        self.params = params
        self.dim = dim
        g, gperp, gpar = laser_rates(params)
        self.g = g
        ops = _joint_operators(dim)
        self.exchange = ops["sp"] @ ops["a"] - ops["sm"] @ ops["ad"]   # antisymmetric
        self.channels = []
        for rate, op in (
            (0.5 * gpar * (1.0 + params.sigma0), ops["sp"]),
            (0.5 * gpar * (1.0 - params.sigma0), ops["sm"]),
            (0.25 * (gperp - 0.5 * gpar), ops["sz"]),
            (params.gamma_cav, ops["a"]),
        ):
            if rate > 0.0:
                self.channels.append((float(rate), op))

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """Action of the generator on a (2N x 2N) density matrix."""
        rho = np.asarray(rho)
        out = self.g * (self.exchange @ rho - rho @ self.exchange)
        for rate, c in self.channels:
            cc = c.T @ c
            out = out + rate * (c @ rho @ c.T - 0.5 * (cc @ rho + rho @ cc))
        return out

    def as_matrix(self) -> np.ndarray:
        """Dense (2N)^2 x (2N)^2 map acting on column-stacked rho."""
        d = 2 * self.dim
        eye = np.eye(d)
        k = self.exchange
        sup = self.g * (np.kron(eye, k) - np.kron(k.T, eye))
        for rate, c in self.channels:
            cc = c.T @ c
            sup += rate * (np.kron(c, c) - 0.5 * (np.kron(eye, cc) + np.kron(cc.T, eye)))
        return sup

    def effective_hamiltonian_flow(self) -> np.ndarray:
        """Real matrix M with dpsi/dt = M psi between jumps,
        M = g (s+ a - s- a+) - (1/2) sum_c rate_c c^T c."""
        m = self.g * self.exchange.copy()
        for rate, c in self.channels:
            m -= 0.5 * rate * (c.T @ c)
        return m


def build_laser_generator(p: LaserParams, dim: int) -> LaserGenerator:
    """Joint generator for the one-atom laser on a 2N-dimensional space."""
    return LaserGenerator(p, dim)


def atom_initial_density(atom_init: AtomInit, sigma0: float) -> np.ndarray:
    """2x2 atomic density at t = 0; the inversion steady state is the fixed
    point of the pump/decay terms alone, diag((1-sigma0)/2, (1+sigma0)/2)."""
    if atom_init is AtomInit.EXCITED:
        w_exc = 1.0
    elif atom_init is AtomInit.GROUND:
        w_exc = 0.0
    else:
        w_exc = 0.5 * (1.0 + sigma0)
    return np.diag([1.0 - w_exc, w_exc])


def laser_green_ode(p: LaserParams, dim: int,
                    atom_init: AtomInit = AtomInit.INVERSION_STEADY_STATE,
                    rtol: float = 1e-8, atol: float = 1e-10) -> GreenMatrix:
    """Green matrix by direct integration of the joint master equation.

    Column m: evolve rho_atom x |m><m| to t_star with an adaptive explicit
    Runge-Kutta scheme, trace out the atom, keep the photon-number diagonal.
    """
    gen = build_laser_generator(p, dim)
    sup = gen.as_matrix()
    rho_at = atom_initial_density(atom_init, p.sigma0)
    cols = np.empty((dim, dim))
    for m in range(dim):
        rho_ph = np.zeros((dim, dim))
        rho_ph[m, m] = 1.0
        rho0 = np.kron(rho_at, rho_ph)
        sol = solve_ivp(lambda t, y: sup @ y, (0.0, p.t_star),
                        rho0.reshape(-1, order="F"),
                        method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise IntegrationError(
                f"master-equation solve failed for input column {m}: {sol.message}")
        rho_t = sol.y[:, -1].reshape(2 * dim, 2 * dim, order="F")
        diag = np.diag(rho_t)
        cols[:, m] = diag[:dim] + diag[dim:]
    return GreenMatrix.from_estimate(cols, tau=p.t_star)


# ---------------------------------------------------------------------------
# Monte Carlo wave-function (quantum jump) engine


class _FlowPropagator:
    """Eigen-decomposed non-unitary flow: exp(M t) evaluated at any t."""

    def __init__(self, m: np.ndarray):
        w, v = np.linalg.eig(m)
        vinv = np.linalg.inv(v)
        resid = np.abs(v @ np.diag(w) @ vinv - m).max()
        scale = max(1.0, np.abs(m).max())
        if resid > 1e-9 * scale:
            raise IntegrationError(
                f"effective Hamiltonian too non-normal to diagonalize "
                f"(residual {resid:.3e}); reduce coupling or dimension")
        self.w = w
        self.v = v
        self.vinv = vinv

    def step_matrix(self, dt: float) -> np.ndarray:
        u = (self.v * np.exp(self.w * dt)) @ self.vinv
        return np.ascontiguousarray(u.real)

    def coeffs(self, psi: np.ndarray) -> np.ndarray:
        return psi @ self.vinv.T


def _norm2_at(prop: _FlowPropagator, c: np.ndarray, dts: np.ndarray) -> np.ndarray:
    psi = (c * np.exp(dts[:, None] * prop.w[None, :])) @ prop.v.T
    return np.einsum("ij,ij->i", psi.real, psi.real) + np.einsum("ij,ij->i", psi.imag, psi.imag)


def laser_green_qjump(p: LaserParams, dim: int,
                      atom_init: AtomInit = AtomInit.INVERSION_STEADY_STATE,
                      n_traj: int = 10_000, seed: int = 0,
                      n_steps: int | None = None,
                      workers: int = 1) -> tuple[GreenMatrix, np.ndarray]:
    """Green matrix estimated by Monte Carlo wave-function trajectories.

    Each trajectory evolves a pure joint state under the non-Hermitian flow
    exp(M t); a jump fires when the squared norm decays through a uniform
    threshold (waiting times found by bisection on the integrated flow), the
    channel is selected proportionally to its rate-weighted overlap, and the
    state restarts normalized.  At t_star the atom is traced out and the
    photon-number distribution of the normalized state accumulated.

    Trajectory i of column m draws from substream (seed, column m, i), so
    results are bit-identical for any worker count; workers parallelize
    over input columns only.  Returns the Green estimate and the per-entry
    standard error of the trajectory mean.
    """
    if n_traj < 1:
        raise InvalidInputError("n_traj must be >= 1")
    gen = build_laser_generator(p, dim)
    prop = _FlowPropagator(gen.effective_hamiltonian_flow())
    if n_steps is None:
        rate_scale = sum(rate * np.abs(c.T @ c).max() for rate, c in gen.channels)
        n_steps = int(max(64, min(4096, np.ceil(5.0 * rate_scale * p.t_star))))
    dt = p.t_star / n_steps
    u_dt = prop.step_matrix(dt)
    mixed_atom = (atom_init is AtomInit.INVERSION_STEADY_STATE and abs(p.sigma0) < 1.0)
    w_exc = float(np.diag(atom_initial_density(atom_init, p.sigma0))[1])
    jump_ops = [(rate, np.ascontiguousarray(c)) for rate, c in gen.channels]

    def run_column(m: int) -> tuple[np.ndarray, np.ndarray]:
        rngs = [substream(seed, TRAJECTORY_STREAM, m, i) for i in range(n_traj)]
        psi = np.zeros((n_traj, 2 * dim))
        thresholds = np.empty(n_traj)
        for i, rng in enumerate(rngs):
            if mixed_atom:
                excited = rng.random() < w_exc
            else:
                excited = w_exc == 1.0
            psi[i, (dim if excited else 0) + m] = 1.0
            thresholds[i] = rng.random()

        for _ in range(n_steps):
            psi_prev = psi
            psi = psi_prev @ u_dt.T
            norm2 = np.einsum("ij,ij->i", psi, psi)
            crossing = np.flatnonzero(norm2 < thresholds)
            if crossing.size == 0:
                continue
            seg = psi_prev[crossing]
            remaining = np.full(crossing.size, dt)
            active = np.arange(crossing.size)
            while active.size:
                idx = crossing[active]
                c = prop.coeffs(seg[active].astype(complex))
                lo = np.zeros(active.size)
                hi = remaining[active].copy()
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    above = _norm2_at(prop, c, mid) >= thresholds[idx]
                    lo = np.where(above, mid, lo)
                    hi = np.where(above, hi, mid)
                t_jump = 0.5 * (lo + hi)
                psi_minus = ((c * np.exp(t_jump[:, None] * prop.w[None, :])) @ prop.v.T).real
                weights = np.stack([
                    rate * np.einsum("ij,ij->i", psi_minus @ op.T, psi_minus @ op.T)
                    for rate, op in jump_ops
                ], axis=1)
                cum = np.cumsum(weights, axis=1)
                total = cum[:, -1]
                picks = np.array([rngs[i].random() for i in idx])
                choice = (picks[:, None] * total[:, None] > cum).sum(axis=1)
                psi_plus = np.empty_like(psi_minus)
                for ch, (_, op) in enumerate(jump_ops):
                    sel = choice == ch
                    if np.any(sel):
                        jumped = psi_minus[sel] @ op.T
                        jumped /= np.linalg.norm(jumped, axis=1, keepdims=True)
                        psi_plus[sel] = jumped
                thresholds[idx] = [rngs[i].random() for i in idx]
                remaining[active] = remaining[active] - t_jump
                rem = remaining[active]
                cp = prop.coeffs(psi_plus.astype(complex))
                psi_end = ((cp * np.exp(rem[:, None] * prop.w[None, :])) @ prop.v.T).real
                psi[idx] = psi_end
                seg[active] = psi_plus
                end_norm2 = np.einsum("ij,ij->i", psi_end, psi_end)
                still = end_norm2 < thresholds[idx]
                active = active[still]

        weights = psi ** 2
        totals = weights.sum(axis=1, keepdims=True)
        pk = (weights[:, :dim] + weights[:, dim:]) / totals
        mean = pk.mean(axis=0)
        if n_traj > 1:
            stderr = pk.std(axis=0, ddof=1) / np.sqrt(n_traj)
        else:
            stderr = np.zeros(dim)
        return mean, stderr

    columns = range(dim)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_column, columns))
    else:
        results = [run_column(m) for m in columns]
    green = np.column_stack([r[0] for r in results])
    stderr = np.column_stack([r[1] for r in results])
    return GreenMatrix(green, tau=p.t_star), stderr


class ExtractionMethod(enum.Enum):
    """How the generator is pulled back out of a Green matrix."""

    MATRIX_LOG = "matrix_log"
    FINITE_DIFFERENCE = "finite_difference"


def effective_liouvillian(g: GreenMatrix, method: ExtractionMethod) -> LiouvillianMatrix:
    """Generator pulled out of a Green matrix.

    MATRIX_LOG is exact for a true semigroup; FINITE_DIFFERENCE, (G - 1)/tau,
    is first-order in tau but immune to branch failures, so callers fall back
    to it when the principal logarithm does not exist.
    """
    if g.tau <= 0:
        raise InvalidInputError("effective Liouvillian extraction needs tau > 0")
    if method is ExtractionMethod.MATRIX_LOG:
        return matrix_log(g)
    return LiouvillianMatrix.from_estimate((g.mat - np.eye(g.dim)) / g.tau)
