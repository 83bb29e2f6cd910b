"""Twin-beam conditional state preparation and the Green-matrix transforms.

A nondegenerate parametric amplifier seeded by vacuum emits twin beams
|TB> ~ sum_n kappa^n |n, n>.  Counting n photons on one beam (detector
efficiency eta_D) prepares the other beam in a known mixed state rho_n that
is fed to the device under study.  The measured output number distributions
r_k(n), collected for consecutive outcomes, determine the device Green
matrix column by column through an alternating series; detector D needs no
efficiency threshold, unlike the homodyne leg.

Only |kappa|^2 enters the diagonal sector, so kappa is treated as real
nonnegative throughout.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .errors import IncompleteDataError, InvalidInputError, TruncationWarning
from .fock import DephasedState, EstimatedDistribution, GreenMatrix, apply_green


@dataclass(frozen=True)
class TwinBeamConfig:
    """Source gain |kappa|^2, conditioning-detector efficiency eta_D, and the
    largest outcome retained for reconstruction."""

    kappa2: float
    eta_d: float
    n_outcome_max: int

    def __post_init__(self):
        if not 0.0 <= self.kappa2 < 1.0:
            raise InvalidInputError(f"kappa2 must be in [0, 1), got {self.kappa2}")
        if not 0.0 < self.eta_d <= 1.0:
            raise InvalidInputError(f"eta_d must be in (0, 1], got {self.eta_d}")
        if self.n_outcome_max < 0:
            raise InvalidInputError("n_outcome_max must be >= 0")

    @property
    def z(self) -> float:
        """Reduced-state tail parameter |kappa|^2 (1 - eta_D)."""
        return self.kappa2 * (1.0 - self.eta_d)

    @property
    def series_ratio(self) -> float:
        """Ratio of the reconstruction series, (eta_D - 1)|kappa|^2 / (1 - z).

        Negative for eta_D < 1, magnitude strictly below 1 for any valid
        configuration, so the series always converges.
        """
        return -self.z / (1.0 - self.z)


def outcome_distribution(cfg: TwinBeamConfig, n: int) -> float:
    """Probability of counting n photons at detector D."""
    if n < 0:
        raise InvalidInputError("outcome must be >= 0")
    num = (1.0 - cfg.kappa2) * (cfg.eta_d * cfg.kappa2) ** n
    return num / (1.0 - cfg.z) ** (n + 1)


def conditional_state(cfg: TwinBeamConfig, n: int, dim: int,
                      tail_tol: float = 1e-6) -> DephasedState:
    """Device input state heralded by outcome n.

    <m+n| rho_n |m+n> = (1 - z)^(n+1) C(m+n, n) z^m with z = kappa2 (1-eta_D):
    a negative-binomial tail above exact zeros below photon number n.  At
    eta_D = 1 this collapses to the Fock state |n><n|.  The analytic
    normalization exceeds the truncated sum by the reported tail tolerance
    at most.
    """
    if n >= dim:
        raise InvalidInputError(f"outcome {n} does not fit in dimension {dim}")
    z = cfg.z
    probs = np.zeros(dim)
    m = np.arange(dim - n)
    probs[n:] = (1.0 - z) ** (n + 1) * comb(m + n, n) * z ** m
    return DephasedState(probs, tail_tol=tail_tol)


def predict_outputs(g: GreenMatrix, cfg: TwinBeamConfig, n: int,
                    tail_epsilon: float = 1e-12, guard: int = 0) -> EstimatedDistribution:
    """Output number distribution r_k(n) predicted from a known Green matrix.

    r_k(n) = (1 - z)^(n+1) sum_m C(m+n, n) z^m G[k, m+n], summed until the
    coefficient falls below tail_epsilon or the column index reaches the
    guard band.  Equals apply_green(g, conditional_state(...)) when the
    guard is 0 and the tail converged.
    """
    if n < 0:
        raise InvalidInputError("outcome must be >= 0")
    dim = g.dim
    if n >= dim - guard:
        raise InvalidInputError(f"outcome {n} outside the guarded block of size {dim - guard}")
    z = cfg.z
    gmax = max(g.mat.max(), 1e-300)
    out = np.zeros(dim)
    coef_last = 0.0
    for m in range(dim - guard - n):
        coef = (1.0 - z) ** (n + 1) * comb(m + n, n) * z ** m
        out += coef * g.mat[:, m + n]
        coef_last = coef * gmax
        if coef_last < tail_epsilon:
            break
    if coef_last >= tail_epsilon:
        warnings.warn(
            f"output prediction for outcome {n} truncated with last term "
            f"{coef_last:.3e} >= {tail_epsilon:.3e}",
            TruncationWarning, stacklevel=2)
    return EstimatedDistribution(out)


@dataclass(frozen=True)
class OutcomeRecord:
    """Estimated output distribution for one conditioning outcome."""

    dist: EstimatedDistribution
    counts: int
    blocks: np.ndarray | None = None  # per-block values, shape (B, k_max + 1)

    def __post_init__(self):
        if self.counts < 0:
            raise InvalidInputError("counts must be >= 0")
        if self.blocks is not None:
            blocks = np.asarray(self.blocks, dtype=float)
            if blocks.ndim != 2 or blocks.shape[1] != self.dist.dim:
                raise InvalidInputError("blocks must have shape (B, len(values))")
            blocks = blocks.copy()
            blocks.flags.writeable = False
            object.__setattr__(self, "blocks", blocks)


class OutcomeTable:
    """Map from conditioning outcome n to its estimated output distribution."""

    def __init__(self, records: dict[int, OutcomeRecord] | None = None):
        self._records: dict[int, OutcomeRecord] = dict(records or {})

    def __contains__(self, n: int) -> bool:
        return n in self._records

    def __getitem__(self, n: int) -> OutcomeRecord:
        return self._records[n]

    def __len__(self) -> int:
        return len(self._records)

    def add(self, n: int, record: OutcomeRecord) -> None:
        if n < 0:
            raise InvalidInputError("outcome must be >= 0")
        self._records[n] = record

    def outcomes(self) -> list[int]:
        return sorted(self._records)

    def to_json_dict(self, n: int) -> dict:
        rec = self._records[n]
        doc = {
            "n": int(n),
            "counts": int(rec.counts),
            "r": [float(v) for v in rec.dist.values],
            "sigma": [float(s) for s in (rec.dist.sigma if rec.dist.sigma is not None
                                         else np.zeros(rec.dist.dim))],
        }
        if rec.blocks is not None:
            doc["blocks"] = [[float(v) for v in row] for row in rec.blocks]
        return doc

    @classmethod
    def from_json_docs(cls, docs) -> "OutcomeTable":
        table = cls()
        for doc in docs:
            values = np.asarray(doc["r"], dtype=float)
            sigma = np.asarray(doc["sigma"], dtype=float)
            blocks = np.asarray(doc["blocks"], dtype=float) if "blocks" in doc else None
            table.add(int(doc["n"]), OutcomeRecord(
                EstimatedDistribution(values, sigma), int(doc["counts"]), blocks))
        return table

    def save(self, path, n: int) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_json_dict(n), fh, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class InversionResult:
    value: float
    sigma: float
    n_terms: int
    converged: bool
    last_coeff: float


def _invert_series(table: OutcomeTable, cfg: TwinBeamConfig, l: int, k: int,
                   n_max: int, tail_epsilon: float) -> InversionResult:
    if l < 0 or k < 0:
        raise InvalidInputError("matrix indices must be >= 0")
    if n_max < 0:
        raise InvalidInputError("n_max must be >= 0")
    ratio = cfg.series_ratio
    assert abs(ratio) < 1.0, "series ratio must stay inside the unit interval"
    prefactor = (1.0 - cfg.z) ** -(l + 1)

    terms: list[float] = []
    variances: list[float] = []
    missing: list[int] = []
    coeff_abs = 0.0
    n_used = 0
    converged = False
    for i in range(n_max + 1):
        outcome = l + i
        coeff = prefactor * comb(i + l, l) * ratio ** i
        coeff_abs = abs(coeff)
        if outcome not in table:
            missing.append(outcome)
            if len(missing) > 8:
                break
            continue
        rec = table[outcome]
        if k >= rec.dist.dim:
            raise InvalidInputError(
                f"row {k} not covered by outcome {outcome} (length {rec.dist.dim})")
        r_val = rec.dist.values[k]
        sig = rec.dist.sigma[k] if rec.dist.sigma is not None else 0.0
        terms.append(coeff * r_val)
        variances.append((coeff * sig) ** 2)
        n_used = i + 1
        if coeff_abs * (abs(r_val) + sig) < tail_epsilon:
            converged = True
            break
    if missing:
        raise IncompleteDataError(missing)
    # Alternating series: sum largest magnitudes first with exact accumulation.
    terms.sort(key=abs, reverse=True)
    value = math.fsum(terms)
    sigma = math.sqrt(math.fsum(sorted(variances, reverse=True)))
    return InversionResult(value, sigma, n_used, converged, coeff_abs)


def invert_green(table: OutcomeTable, cfg: TwinBeamConfig, l: int, k: int,
                 n_max: int, tail_epsilon: float = 1e-9) -> tuple[float, float]:
    """One Green-matrix element from measured output distributions.

    G[k, l] = (1 - z)^(-(l+1)) sum_n C(n+l, l) ratio^n r_k(n+l), truncated
    adaptively: the sum stops once the coefficient times the sigma-weighted
    magnitude of r drops below tail_epsilon, or at the hard cap n_max.
    Errors propagate as independent between outcomes (each outcome is a
    separate dataset): sigma^2 = sum_n coeff_n^2 sigma_r^2.
    """
    res = _invert_series(table, cfg, l, k, n_max, tail_epsilon)
    return res.value, res.sigma


def invert_green_matrix(table: OutcomeTable, cfg: TwinBeamConfig, size: int,
                        n_max, tail_epsilon: float = 1e-9):
    """Invert a square block of Green elements.

    ``n_max`` is the series hard cap, either one integer for every column or
    a per-column sequence.  Returns (values, sigma, n_terms, converged).
    """
    caps = np.broadcast_to(np.asarray(n_max, dtype=int), (size,))
    values = np.empty((size, size))
    sigma = np.empty((size, size))
    n_terms = np.empty((size, size), dtype=int)
    converged = np.empty((size, size), dtype=bool)
    for l in range(size):
        for k in range(size):
            res = _invert_series(table, cfg, l, k, int(caps[l]), tail_epsilon)
            values[k, l] = res.value
            sigma[k, l] = res.sigma
            n_terms[k, l] = res.n_terms
            converged[k, l] = res.converged
    return values, sigma, n_terms, converged


def table_from_green(g: GreenMatrix, cfg: TwinBeamConfig, outcomes,
                     sigma: float | np.ndarray | None = None,
                     tail_epsilon: float = 1e-12) -> OutcomeTable:
    """Noise-free outcome table predicted from a known Green matrix.

    Convenience for round-trip tests and noiseless pipeline checks; sigma,
    when given, is attached to every outcome without adding noise.
    """
    table = OutcomeTable()
    for n in outcomes:
        dist = predict_outputs(g, cfg, n, tail_epsilon=tail_epsilon)
        sig = None
        if sigma is not None:
            sig = np.broadcast_to(np.asarray(sigma, dtype=float), dist.values.shape).copy()
        table.add(n, OutcomeRecord(EstimatedDistribution(dist.values, sig), 0))
    return table


def heralded_consistency(g: GreenMatrix, cfg: TwinBeamConfig, n: int) -> float:
    """Max deviation between the series prediction and the direct route
    apply_green(G, rho_n); both must agree to numerical precision."""
    direct = apply_green(g, conditional_state(cfg, n, g.dim, tail_tol=1.0))
    series = predict_outputs(g, cfg, n)
    return float(np.abs(direct.probs - series.values).max())
