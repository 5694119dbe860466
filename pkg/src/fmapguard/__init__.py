"""Per-fmap transient-fault vulnerability estimation and selective duplication for small CNNs."""

__version__ = "0.1.0"

from .analysis import (CoveragePlan, SplitSpec, VulnCurve, build_curve, convergence_study, coverage_curve,  # noqa: E402
                       greedy_select, manhattan_distance, split_dataset, validate_coverage)
from .injector import CampaignConfig, ErrorModel, InjectionRecords, run_campaign  # noqa: E402
from .metrics import (HEURISTICS, compose_vulnerability, delta_loss, heuristic_profile,  # noqa: E402
                      injection_propp, mismatch_propp)
from .nn import FmapId, Network, backward, count_macs, forward  # noqa: E402
from .protection import HardenedNetwork, detect_forward, harden, measure_protection_efficacy  # noqa: E402
from .quant import QuantScheme, RangeProfile, calibrate, fake_quant_forward  # noqa: E402

__all__ = [
    "CampaignConfig", "CoveragePlan", "ErrorModel", "FmapId", "HEURISTICS", "HardenedNetwork", "InjectionRecords",
    "Network", "QuantScheme", "RangeProfile", "SplitSpec", "VulnCurve", "backward", "build_curve", "calibrate",
    "compose_vulnerability", "convergence_study", "count_macs", "coverage_curve", "delta_loss", "detect_forward",
    "fake_quant_forward", "forward", "greedy_select", "harden", "heuristic_profile", "injection_propp",
    "manhattan_distance", "measure_protection_efficacy", "mismatch_propp", "run_campaign", "split_dataset",
    "validate_coverage",
]
