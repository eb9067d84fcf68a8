"""Sum-rate vs fairness trade-off beamforming for downlink MISO-NOMA."""

from .channel import ChannelConfig, ChannelSet, default_config, generate_channels, order_users
from .metrics import (
    BeamformerSet,
    MetricsReport,
    check_sic_ordering,
    compute_metrics,
    effective_sinr,
    fairness_index,
    sinr_of_signal_at_user,
    sum_rate,
    transmit_power,
    user_rate,
)
from .sca import (
    RunReport,
    SCAIterate,
    SCAOptions,
    TradeoffWeights,
    initialize_feasible,
    sca_solve,
    utopia_sum_rate,
)

__all__ = [
    "ChannelConfig",
    "ChannelSet",
    "default_config",
    "generate_channels",
    "order_users",
    "BeamformerSet",
    "MetricsReport",
    "check_sic_ordering",
    "compute_metrics",
    "effective_sinr",
    "fairness_index",
    "sinr_of_signal_at_user",
    "sum_rate",
    "transmit_power",
    "user_rate",
    "RunReport",
    "SCAIterate",
    "SCAOptions",
    "TradeoffWeights",
    "initialize_feasible",
    "sca_solve",
    "utopia_sum_rate",
]
