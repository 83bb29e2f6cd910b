"""End-to-end simulated tomography runs.

Pipeline: a theoretical device Green matrix feeds the twin-beam conditioning
model; for every retained detector outcome n the heralded output state is
computed exactly and homodyne quadratures are drawn from it (this is
statistically identical to per-photon simulation and far cheaper).  Pattern
averaging per statistical block estimates the output number distributions,
the alternating series inverts them to a Green-matrix block, and the
principal matrix logarithm extracts the Liouvillian estimate, which is then
compared element by element against the device theory.

Determinism contract: every stochastic task draws from a substream keyed by
(seed, outcome, block), and reductions run in fixed order, so reports are
byte-identical for any worker count.  Wall-clock timing is therefore kept
out of the report payload.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._streams import QUADRATURE_STREAM, substream
from .devices import (AtomInit, ExtractionMethod, LaserParams, PiaParams,
                      build_pia, effective_liouvillian, laser_green_ode,
                      laser_green_qjump)
from .errors import (BranchFailureError, ConfigError, IncompleteDataError,
                     InvalidInputError)
from .fock import (DephasedState, EstimatedDistribution, GreenMatrix,
                   apply_green, matrix_exp, read_matrix_csv)
from .homodyne import HomodyneConfig, QuadratureBatch, block_estimates
from .twinbeam import (OutcomeRecord, OutcomeTable, TwinBeamConfig,
                       conditional_state, invert_green_matrix,
                       outcome_distribution)

# ---------------------------------------------------------------------------
# Device specifications


@dataclass(frozen=True)
class PiaDeviceSpec:
    params: PiaParams
    dim: int

    @property
    def tau(self) -> float:
        return self.params.tau

    def green(self, seed: int = 0, workers: int = 1) -> GreenMatrix:
        return matrix_exp(build_pia(self.params, self.dim), self.params.tau)

    def theory_liouvillian(self, size: int) -> np.ndarray:
        return build_pia(self.params, size).mat

    def describe(self) -> dict:
        return {"type": "pia", "a_gain": self.params.a_gain,
                "b_loss": self.params.b_loss, "tau": self.params.tau,
                "dim": self.dim}


@dataclass(frozen=True)
class LaserDeviceSpec:
    params: LaserParams
    dim: int
    atom_init: AtomInit = AtomInit.INVERSION_STEADY_STATE
    solver: str = "ode"              # "ode" | "qjump"
    n_traj: int = 10_000
    ode_rtol: float = 1e-8
    ode_atol: float = 1e-10

    def __post_init__(self):
        if self.solver not in ("ode", "qjump"):
            raise ConfigError(f"unknown laser solver {self.solver!r}")

    @property
    def tau(self) -> float:
        return self.params.t_star

    def green(self, seed: int = 0, workers: int = 1) -> GreenMatrix:
        if self.solver == "qjump":
            g, _ = laser_green_qjump(self.params, self.dim, self.atom_init,
                                     n_traj=self.n_traj, seed=seed, workers=workers)
            return g
        return laser_green_ode(self.params, self.dim, self.atom_init,
                               rtol=self.ode_rtol, atol=self.ode_atol)

    def theory_liouvillian(self, size: int) -> np.ndarray:
        """Effective generator of the traced-out map: log of the ODE Green
        block divided by t*; falls back to finite differences on a branch
        failure."""
        g = laser_green_ode(self.params, self.dim, self.atom_init,
                            rtol=self.ode_rtol, atol=self.ode_atol)
        block = GreenMatrix.from_estimate(g.mat[:size, :size], g.tau)
        try:
            return effective_liouvillian(block, ExtractionMethod.MATRIX_LOG).mat
        except BranchFailureError:
            return effective_liouvillian(block, ExtractionMethod.FINITE_DIFFERENCE).mat

    def describe(self) -> dict:
        p = self.params
        return {"type": "laser", "c_coop": p.c_coop, "n_sat": p.n_sat,
                "sigma0": p.sigma0, "f_ratio": p.f_ratio,
                "gamma_cav": p.gamma_cav, "t_star": p.t_star,
                "dim": self.dim, "atom_init": self.atom_init.value,
                "solver": self.solver, "n_traj": self.n_traj}


@dataclass(frozen=True)
class GreenCsvDeviceSpec:
    """Externally supplied Green matrix (shared CSV format)."""

    path: str
    tau: float

    def green(self, seed: int = 0, workers: int = 1) -> GreenMatrix:
        mat, _ = read_matrix_csv(self.path)
        return GreenMatrix.from_estimate(mat, self.tau)

    @property
    def dim(self) -> int:
        mat, _ = read_matrix_csv(self.path)
        return mat.shape[0]

    def theory_liouvillian(self, size: int) -> np.ndarray:
        g = self.green()
        block = GreenMatrix.from_estimate(g.mat[:size, :size], self.tau)
        try:
            return effective_liouvillian(block, ExtractionMethod.MATRIX_LOG).mat
        except BranchFailureError:
            return effective_liouvillian(block, ExtractionMethod.FINITE_DIFFERENCE).mat

    def describe(self) -> dict:
        return {"type": "green_csv", "path": self.path, "tau": self.tau}


# ---------------------------------------------------------------------------
# Experiment configuration


@dataclass(frozen=True)
class ReconstructionParams:
    """Inversion and extraction knobs."""

    n_max: int
    tail_epsilon: float = 1e-9
    guard: int = 4
    log_method: str = "matrix_log"            # "matrix_log" | "finite_difference"
    allow_fd_fallback: bool = True
    outcome_p_floor: float = 1e-4
    weighted_allocation: bool = False

    def __post_init__(self):
        if self.n_max < 0:
            raise ConfigError("n_max must be >= 0")
        if self.tail_epsilon <= 0:
            raise ConfigError("tail_epsilon must be > 0")
        if self.guard < 0:
            raise ConfigError("guard must be >= 0")
        if self.log_method not in ("matrix_log", "finite_difference"):
            raise ConfigError(f"unknown log method {self.log_method!r}")
        if not 0.0 <= self.outcome_p_floor < 1.0:
            raise ConfigError("outcome_p_floor must be in [0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    device: object
    twin_beam: TwinBeamConfig
    homodyne: HomodyneConfig
    recon: ReconstructionParams
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        total = self.homodyne.k_max + self.twin_beam.n_outcome_max + self.recon.guard
        if total > self.device.dim:
            raise ConfigError(
                f"k_max + n_outcome_max + guard = {total} exceeds device "
                f"dimension {self.device.dim}")
        if self.report_dim < 1:
            raise ConfigError("guard leaves no reportable block "
                              f"(k_max={self.homodyne.k_max}, guard={self.recon.guard})")

    @property
    def green_dim(self) -> int:
        """Side of the reconstructed Green block (the guarded block).

        The guard band between this block and k_max is still estimated: it
        feeds the efficiency compensation, whose inverse-Bernoulli weights
        amplify high-index noise, but it is excluded from the inverted block
        and from every quantitative claim.
        """
        return self.homodyne.k_max + 1 - self.recon.guard

    @property
    def report_dim(self) -> int:
        return self.green_dim

    def describe(self) -> dict:
        return {
            "device": self.device.describe(),
            "twin_beam": {"kappa2": self.twin_beam.kappa2,
                          "eta_d": self.twin_beam.eta_d,
                          "n_outcome_max": self.twin_beam.n_outcome_max},
            "homodyne": {"eta_h": self.homodyne.eta_h,
                         "k_max": self.homodyne.k_max,
                         "samples_per_state": self.homodyne.samples_per_state,
                         "blocks": self.homodyne.blocks},
            "reconstruction": {"n_max": self.recon.n_max,
                               "tail_epsilon": self.recon.tail_epsilon,
                               "guard": self.recon.guard,
                               "log_method": self.recon.log_method,
                               "allow_fd_fallback": self.recon.allow_fd_fallback,
                               "outcome_p_floor": self.recon.outcome_p_floor,
                               "weighted_allocation": self.recon.weighted_allocation},
            "seed": self.seed,
            "workers": self.workers,
        }


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_sha256(cfg: ExperimentConfig) -> str:
    echo = cfg.describe()
    echo.pop("workers")  # worker count must not change any output
    return hashlib.sha256(canonical_json(echo).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Data generation


def retained_outcomes(cfg: ExperimentConfig) -> list[int]:
    """Outcomes kept for data taking: everything up to n_outcome_max plus any
    further n whose heralding probability stays above the floor.  p_n is
    strictly decreasing, so the scan stops at the first failure."""
    outcomes = []
    n = 0
    while n < cfg.device.dim:
        p = outcome_distribution(cfg.twin_beam, n)
        if n <= cfg.twin_beam.n_outcome_max or p >= cfg.recon.outcome_p_floor:
            outcomes.append(n)
            n += 1
        else:
            break
    return outcomes


def _allocate(cfg: ExperimentConfig, outcomes) -> dict[int, int]:
    per_state = cfg.homodyne.samples_per_state
    if not cfg.recon.weighted_allocation:
        return {n: per_state for n in outcomes}
    p = np.array([outcome_distribution(cfg.twin_beam, n) for n in outcomes])
    total = per_state * len(outcomes)
    counts = np.floor(total * p / p.sum()).astype(int)
    return {n: int(c) for n, c in zip(outcomes, counts)}


def _block_sizes(total: int, blocks: int) -> list[int]:
    base, extra = divmod(total, blocks)
    return [base + (1 if b < extra else 0) for b in range(blocks)]


@dataclass(frozen=True)
class SimulatedDataset:
    """Raw product of a simulated run: quadrature blocks per outcome."""

    config: ExperimentConfig
    config_hash: str
    g_theory: GreenMatrix
    batches: dict[int, list[QuadratureBatch]]
    p_outcomes: dict[int, float]
    truncation: dict[int, float] = field(default_factory=dict)

    def outcomes(self) -> list[int]:
        return sorted(self.batches)


def run_experiment(cfg: ExperimentConfig) -> SimulatedDataset:
    """Generate conditioned homodyne datasets for every retained outcome.

    The output state for outcome n is apply_green(G_theory, rho_n); its
    truncation deficit (probability that leaked past the Fock cutoff) is
    recorded.  Sampling tasks are scheduled per (outcome, block) with fixed
    substreams, so any worker count produces identical data.
    """
    from .homodyne import sample_quadrature  # local import to keep cycles out

    dim = cfg.device.dim
    g_theory = cfg.device.green(seed=cfg.seed, workers=cfg.workers)
    outcomes = retained_outcomes(cfg)
    alloc = _allocate(cfg, outcomes)
    states: dict[int, DephasedState] = {}
    deficits: dict[int, float] = {}
    for n in outcomes:
        out_state = apply_green(g_theory, conditional_state(cfg.twin_beam, n, dim,
                                                            tail_tol=1.0))
        states[n] = out_state
        deficits[n] = float(1.0 - out_state.probs.sum())

    tasks = [(n, b, size)
             for n in outcomes
             for b, size in enumerate(_block_sizes(alloc[n], cfg.homodyne.blocks))]

    def sample_task(task):
        n, b, size = task
        rng = substream(cfg.seed, QUADRATURE_STREAM, n, b)
        xs = sample_quadrature(states[n], cfg.homodyne.eta_h, rng, size=size)
        return n, QuadratureBatch(xs, block_id=b, outcome_n=n)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(sample_task, tasks))
    else:
        results = [sample_task(t) for t in tasks]

    batches: dict[int, list[QuadratureBatch]] = {n: [] for n in outcomes}
    for n, batch in results:
        batches[n].append(batch)
    for n in outcomes:
        batches[n].sort(key=lambda b: b.block_id)

    return SimulatedDataset(cfg, config_sha256(cfg), g_theory, batches,
                            {n: outcome_distribution(cfg.twin_beam, n) for n in outcomes},
                            deficits)


def estimate_tables(data: SimulatedDataset, cfg: ExperimentConfig) -> OutcomeTable:
    """Pattern-average every outcome's blocks into an OutcomeTable."""
    table = OutcomeTable()
    for n in data.outcomes():
        blocks = data.batches[n]
        counts = int(sum(b.samples.size for b in blocks))
        if counts == 0:
            continue
        ids, values = block_estimates(blocks, cfg.homodyne)
        r_hat = values.mean(axis=0)
        sigma = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
        table.add(n, OutcomeRecord(EstimatedDistribution(r_hat, sigma), counts,
                                   blocks=values))
    return table


# ---------------------------------------------------------------------------
# Reconstruction


def _contiguous_cap(table: OutcomeTable, l: int, n_max: int) -> int:
    """Largest i such that outcomes l..l+i are all present, capped at n_max."""
    i = 0
    while i < n_max and (l + i + 1) in table:
        i += 1
    return i


def _logm_sigma_propagation(gmat: np.ndarray, gsigma: np.ndarray, tau: float) -> np.ndarray:
    """First-order error propagation through the principal matrix logarithm.

    d log(G)[E] = int_0^1 (I + s(G-I))^-1 E (I + s(G-I))^-1 ds, evaluated by
    Gauss-Legendre; entries of E are treated as independent."""
    nodes, weights = np.polynomial.legendre.leggauss(24)
    s = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    size = gmat.shape[0]
    eye = np.eye(size)
    t4 = np.zeros((size, size, size, size))
    for si, wi in zip(s, w):
        b = np.linalg.inv(eye + si * (gmat - eye))
        t4 += wi * np.einsum("ik,lj->ijkl", b, b)
    var = np.einsum("ijkl,kl->ij", t4 ** 2, gsigma ** 2)
    return np.sqrt(var) / tau


def _extract_liouvillian(gmat, tau, method: str, allow_fallback: bool):
    """Returns (l_hat, method_used, fallback_reason)."""
    green = GreenMatrix.from_estimate(gmat, tau)
    if method == "finite_difference":
        l = effective_liouvillian(green, ExtractionMethod.FINITE_DIFFERENCE)
        return l.mat, "finite_difference", None
    try:
        l = effective_liouvillian(green, ExtractionMethod.MATRIX_LOG)
        return l.mat, "matrix_log", None
    except BranchFailureError as exc:
        if not allow_fallback:
            raise
        l = effective_liouvillian(green, ExtractionMethod.FINITE_DIFFERENCE)
        return l.mat, "finite_difference", str(exc)


def compare_block(l_hat: np.ndarray, sigma: np.ndarray, l_theory: np.ndarray,
                  sigma_dof: int | None = None) -> dict:
    """Element-wise consistency of an estimated generator with theory.

    z = (l_hat - l_theory) / sigma; elements with zero sigma and nonzero
    residual are flagged and excluded from z statistics but counted as
    exceedances.  The off-tridiagonal block is jointly tested against zero
    residual by Fisher-combining per-element p-values (t-based when the
    sigma degrees of freedom are given, normal otherwise) into a chi-squared
    statistic on 2K degrees of freedom; a plain sum-of-z^2 chi-squared is
    reported alongside.
    """
    l_hat = np.asarray(l_hat, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    l_theory = np.asarray(l_theory, dtype=float)
    if l_hat.shape != sigma.shape or l_hat.shape != l_theory.shape:
        raise InvalidInputError("compare_block shapes must match")
    resid = l_hat - l_theory
    flagged = [(int(i), int(j)) for i, j in zip(*np.nonzero((sigma == 0) & (resid != 0)))]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, resid / np.where(sigma > 0, sigma, 1.0), 0.0)
    for i, j in flagged:
        z[i, j] = np.nan

    valid = ~np.isnan(z)
    abs_z = np.abs(z[valid])
    n_elem = z.size
    within = int((abs_z <= 3.0).sum())
    frac_within = within / n_elem if n_elem else 1.0

    size = l_hat.shape[0]
    ii, jj = np.indices(l_hat.shape)
    offtri = np.abs(ii - jj) >= 2
    off_z = z[offtri & valid]
    k_off = off_z.size
    if k_off:
        if sigma_dof is not None:
            pvals = 2.0 * stats.t.sf(np.abs(off_z), df=sigma_dof)
        else:
            pvals = 2.0 * stats.norm.sf(np.abs(off_z))
        pvals = np.clip(pvals, 1e-300, 1.0)
        fisher_stat = float(-2.0 * np.log(pvals).sum())
        fisher_p = float(stats.chi2.sf(fisher_stat, 2 * k_off))
        naive_stat = float((off_z ** 2).sum())
        naive_p = float(stats.chi2.sf(naive_stat, k_off))
    else:
        fisher_stat = fisher_p = naive_stat = naive_p = float("nan")

    return {
        "z": z,
        "rmse": float(np.sqrt(np.mean(resid ** 2))),
        "max_abs_z": float(abs_z.max()) if abs_z.size else 0.0,
        "frac_abs_z_le_3": frac_within,
        "flagged_zero_sigma": flagged,
        "off_tridiagonal": {
            "count": int(k_off),
            "fisher_stat": fisher_stat,
            "fisher_p": fisher_p,
            "chi2_stat": naive_stat,
            "chi2_p": naive_p,
            "sigma_dof": sigma_dof,
        },
    }


@dataclass(frozen=True)
class ReconstructionReport:
    config_echo: dict
    config_hash: str
    tau: float
    geometry: dict
    outcome_docs: list[dict]
    g_hat: np.ndarray
    g_sigma: np.ndarray
    g_terms: np.ndarray
    l_hat: np.ndarray
    l_sigma: np.ndarray
    l_method: str
    l_sigma_method: str
    l_fallback_reason: str | None
    l_theory: np.ndarray
    z: np.ndarray
    summary: dict

    def to_json_dict(self) -> dict:
        def grid(mat):
            return [[float(v) for v in row] for row in np.asarray(mat)]

        z_rows = []
        for row in self.z:
            z_rows.append([None if np.isnan(v) else float(v) for v in row])
        return {
            "schema": "liouvtomo.report.v1",
            "config": self.config_echo,
            "config_sha256": self.config_hash,
            "tau": float(self.tau),
            "geometry": self.geometry,
            "outcomes": self.outcome_docs,
            "g_hat": {"values": grid(self.g_hat), "sigma": grid(self.g_sigma),
                      "n_terms": [[int(v) for v in row] for row in self.g_terms]},
            "l_hat": {"values": grid(self.l_hat), "sigma": grid(self.l_sigma),
                      "method": self.l_method,
                      "sigma_method": self.l_sigma_method,
                      "fallback_reason": self.l_fallback_reason},
            "l_theory": grid(self.l_theory),
            "z": z_rows,
            "summary": self.summary,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def reconstruct(data, cfg: ExperimentConfig) -> ReconstructionReport:
    """Full estimator pipeline: pattern averages -> Green block -> generator.

    ``data`` is either a SimulatedDataset (raw quadratures; block-resolved
    errors for the generator come from per-block pipelines) or an
    OutcomeTable (only propagated errors available).  The generator is
    extracted by the configured method; a branch failure of the principal
    logarithm falls back to finite differences when allowed, and the method
    actually used is recorded.
    """
    if isinstance(data, SimulatedDataset):
        table = estimate_tables(data, cfg)
        truncation_diag = data.truncation
    elif isinstance(data, OutcomeTable):
        table = data
        truncation_diag = {}
    else:
        raise InvalidInputError("reconstruct expects a SimulatedDataset or OutcomeTable")

    size = cfg.green_dim
    n_max = cfg.recon.n_max
    missing: set[int] = set()
    caps = []
    for l in range(size):
        if l not in table:
            missing.add(l)
            caps.append(0)
            continue
        caps.append(_contiguous_cap(table, l, n_max))
    if missing:
        raise IncompleteDataError(missing)

    g_hat, g_sigma, g_terms, g_converged = invert_green_matrix(
        table, cfg.twin_beam, size, caps, tail_epsilon=cfg.recon.tail_epsilon)

    tau = cfg.device.tau
    l_hat, method, fallback = _extract_liouvillian(
        g_hat, tau, cfg.recon.log_method, cfg.recon.allow_fd_fallback)

    # Per-block generator estimates give the honest sigma when raw blocks
    # are available; serialized tables fall back to linear propagation.
    have_blocks = all(table[n].blocks is not None for n in table.outcomes())
    nblocks = cfg.homodyne.blocks
    sigma_dof: int | None = None
    if have_blocks and method == "matrix_log":
        try:
            block_l = []
            for b in range(nblocks):
                btab = OutcomeTable()
                for n in table.outcomes():
                    rec = table[n]
                    btab.add(n, OutcomeRecord(
                        EstimatedDistribution(rec.blocks[b]), rec.counts))
                bg, _, _, _ = invert_green_matrix(btab, cfg.twin_beam, size, caps,
                                                  tail_epsilon=cfg.recon.tail_epsilon)
                bl, _, _ = _extract_liouvillian(bg, tau, method,
                                                allow_fallback=False)
                block_l.append(bl)
            stack = np.stack(block_l)
            l_sigma = stack.std(axis=0, ddof=1) / np.sqrt(nblocks)
            l_sigma_method = "blocks"
            sigma_dof = nblocks - 1
        except BranchFailureError as exc:
            if not cfg.recon.allow_fd_fallback:
                raise
            l_hat, method, fallback = _extract_liouvillian(
                g_hat, tau, "finite_difference", True)
            fallback = f"block-level branch failure: {exc}"
            l_sigma = g_sigma / tau
            l_sigma_method = "propagation"
    elif have_blocks and method == "finite_difference":
        block_l = []
        for b in range(nblocks):
            btab = OutcomeTable()
            for n in table.outcomes():
                rec = table[n]
                btab.add(n, OutcomeRecord(EstimatedDistribution(rec.blocks[b]),
                                          rec.counts))
            bg, _, _, _ = invert_green_matrix(btab, cfg.twin_beam, size, caps,
                                              tail_epsilon=cfg.recon.tail_epsilon)
            block_l.append((bg - np.eye(size)) / tau)
        stack = np.stack(block_l)
        l_sigma = stack.std(axis=0, ddof=1) / np.sqrt(nblocks)
        l_sigma_method = "blocks"
        sigma_dof = nblocks - 1
    else:
        if method == "matrix_log":
            l_sigma = _logm_sigma_propagation(g_hat, g_sigma, tau)
        else:
            l_sigma = g_sigma / tau
        l_sigma_method = "propagation"

    l_theory = cfg.device.theory_liouvillian(size)
    comparison = compare_block(l_hat, l_sigma, l_theory, sigma_dof=sigma_dof)
    z_full = comparison["z"]

    summary = {
        "rmse_guarded": comparison["rmse"],
        "max_abs_z": comparison["max_abs_z"],
        "frac_abs_z_le_3": comparison["frac_abs_z_le_3"],
        "off_tridiagonal": comparison["off_tridiagonal"],
        "flagged_zero_sigma": comparison["flagged_zero_sigma"],
        "truncation": {
            "columns_not_converged": [int(l) for l in range(size)
                                      if not g_converged[:, l].all()],
            "series_caps": [int(c) for c in caps],
            "output_state_deficit": {str(n): float(v)
                                     for n, v in sorted(truncation_diag.items())},
        },
    }

    outcome_docs = [table.to_json_dict(n) for n in table.outcomes()]
    return ReconstructionReport(
        config_echo=cfg.describe(),
        config_hash=config_sha256(cfg),
        tau=tau,
        geometry={"device_dim": cfg.device.dim, "k_max": cfg.homodyne.k_max,
                  "green_dim": size, "report_dim": cfg.report_dim,
                  "guard": cfg.recon.guard, "blocks": nblocks},
        outcome_docs=outcome_docs,
        g_hat=g_hat, g_sigma=g_sigma, g_terms=g_terms,
        l_hat=l_hat, l_sigma=l_sigma, l_method=method,
        l_sigma_method=l_sigma_method, l_fallback_reason=fallback,
        l_theory=l_theory, z=z_full, summary=summary)
