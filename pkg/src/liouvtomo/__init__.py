"""Liouvillian tomography of phase-insensitive optical devices.

Simulates the twin-beam conditioning / homodyne tomography scheme for
measuring the photon-number-diagonal sector of a device's Liouvillian, and
reconstructs the generator from the synthetic data with full per-element
error propagation.
"""

from .devices import (AtomInit, ExtractionMethod, LaserParams, PiaParams,
                      build_laser_generator, build_pia, effective_liouvillian,
                      laser_green_ode, laser_green_qjump, laser_rates)
from .errors import (BranchFailureError, ConfigError, EfficiencyThresholdError,
                     IncompleteDataError, IntegrationError, InvalidInputError,
                     LiouvTomoError, TruncationWarning)
from .experiment import (ExperimentConfig, GreenCsvDeviceSpec, LaserDeviceSpec,
                         PiaDeviceSpec, ReconstructionParams,
                         ReconstructionReport, SimulatedDataset, compare_block,
                         config_sha256, estimate_tables, reconstruct,
                         retained_outcomes, run_experiment)
from .fock import (DephasedState, EstimatedDistribution, GreenMatrix,
                   LiouvillianMatrix, apply_green, matrix_exp, matrix_log,
                   read_matrix_csv, write_matrix_csv)
from .homodyne import (DualPatternKernels, HomodyneConfig, QuadratureBatch,
                       bernoulli, estimate_diagonal, inverse_bernoulli,
                       pattern_function, sample_quadrature, wavefunction)
from .twinbeam import (OutcomeRecord, OutcomeTable, TwinBeamConfig,
                       conditional_state, invert_green, outcome_distribution,
                       predict_outputs)

__version__ = "0.1.0"
