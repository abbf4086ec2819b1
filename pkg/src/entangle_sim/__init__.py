"""entangle_sim: simulation and analysis of multiplexed entangled photon-pair sources.

The package models a pulsed fiber pair source whose output is wavelength
multiplexed onto the ITU grid, detected with gated and free-running APDs,
and analyzed either in polarization or in time bin.  It provides

* exact quantum-state predictions (``quantum_core``, ``source_model``),
* a Monte Carlo counting simulator with noise, loss, dark counts and
  detector dead time (``measurement_sim``),
* estimators for visibility, coincidence-to-accidental ratio, Bell
  parameters and density-matrix tomography (``analysis``),
* a command line front end for reproducible runs (``cli``).
"""

from .quantum_core import (
    DensityMatrix,
    Projector,
    PureState2Q,
    born_probability,
    density_from_pure,
    fidelity,
    is_physical,
    polarization_projector,
    timebin_projector,
)
from .measurement_sim import (
    AnalyzerSetting,
    CountRecord,
    DetectorModel,
    analytic_coincidence_prob,
    analytic_count_expectation,
    merge_records,
    open_setting,
    polarization_setting,
    simulate_counts,
    timebin_setting,
    timebin_slot_histogram,
)
from .source_model import (
    ChannelPair,
    PumpConfig,
    SfwmConfig,
    SourceConfig,
    channel_pair_for,
    dephased,
    itu_frequency,
    itu_wavelength_nm,
    noise_rate,
    pair_rate,
    polarization_state,
    pump_itu_channel,
    timebin_state,
)
from .analysis import (
    BootstrapResult,
    CarResult,
    ChshResult,
    MleResult,
    VisibilityResult,
    analytic_car,
    bootstrap_fidelity,
    calibrate_noise,
    chsh_from_records,
    chsh_settings,
    coincidence_operator,
    compute_car,
    fit_visibility,
    linear_inversion,
    mle_reconstruct,
    project_to_physical,
    read_records,
    tomography_settings,
    visibility_from_records,
    write_records,
)
from .cli import (
    ConfigError,
    ExperimentConfig,
    load_config_data,
    load_config_file,
    load_preset,
    paper_defaults,
)

__version__ = "0.1.0"

__all__ = [
    "DensityMatrix",
    "Projector",
    "PureState2Q",
    "born_probability",
    "density_from_pure",
    "fidelity",
    "is_physical",
    "polarization_projector",
    "timebin_projector",
    "AnalyzerSetting",
    "CountRecord",
    "DetectorModel",
    "analytic_coincidence_prob",
    "analytic_count_expectation",
    "merge_records",
    "open_setting",
    "polarization_setting",
    "simulate_counts",
    "timebin_setting",
    "timebin_slot_histogram",
    "ChannelPair",
    "PumpConfig",
    "SfwmConfig",
    "SourceConfig",
    "channel_pair_for",
    "dephased",
    "itu_frequency",
    "itu_wavelength_nm",
    "noise_rate",
    "pair_rate",
    "polarization_state",
    "pump_itu_channel",
    "timebin_state",
    "BootstrapResult",
    "CarResult",
    "ChshResult",
    "MleResult",
    "VisibilityResult",
    "analytic_car",
    "bootstrap_fidelity",
    "calibrate_noise",
    "chsh_from_records",
    "chsh_settings",
    "coincidence_operator",
    "compute_car",
    "fit_visibility",
    "linear_inversion",
    "mle_reconstruct",
    "project_to_physical",
    "read_records",
    "tomography_settings",
    "visibility_from_records",
    "write_records",
    "ConfigError",
    "ExperimentConfig",
    "load_config_data",
    "load_config_file",
    "load_preset",
    "paper_defaults",
    "__version__",
]
