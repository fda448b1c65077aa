"""Joint beamforming, power control and user association for full-duplex NOMA cells."""
from .algorithms import (
    RunResult,
    TraceRow,
    default_schedule,
    ica_bfs,
    ica_cr,
    ica_cr_pf,
    initialize,
    monotonicity_violations,
    post_process,
    run_baseline,
    run_scheme,
)
from .association import (
    AssociationTensor,
    DecodingOrder,
    PairingMatrix,
    beta_from_order,
    enumerate_associations,
    round_and_project,
    ua_matrix,
    validate_association,
)
from .channel import ChannelSet, SystemConfig, load_config, make_instance
from .experiments import ExperimentSpec, emit_summary, load_spec, run_experiment, trace_convergence
from .rates import dl_rate, ul_rate, ul_sum_rate_oracle, total_se_and_qos

__all__ = [
    "AssociationTensor", "ChannelSet", "DecodingOrder", "ExperimentSpec", "PairingMatrix", "RunResult",
    "SystemConfig", "TraceRow", "beta_from_order", "default_schedule", "dl_rate", "emit_summary",
    "enumerate_associations", "ica_bfs", "ica_cr", "ica_cr_pf", "initialize", "load_config", "load_spec",
    "make_instance", "monotonicity_violations", "post_process", "round_and_project", "run_baseline",
    "run_experiment", "run_scheme", "total_se_and_qos", "trace_convergence", "ua_matrix", "ul_rate",
    "ul_sum_rate_oracle", "validate_association",
]
