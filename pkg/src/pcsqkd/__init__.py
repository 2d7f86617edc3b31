"""Shaped-QAM continuous-variable QKD: constellations, key rates and a waveform-level link simulator."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .constellation import ConstellationSpec, build_pcs_qam, modulation_stats, optimize_nu, trace_distance
from .errors import QKDError
from .security import LinkBudget, SecurityConfig, holevo_bound, rate_report, secret_fraction, skr, worst_case_xi

__all__ = [
    "ConstellationSpec",
    "LinkBudget",
    "QKDError",
    "SecurityConfig",
    "build_pcs_qam",
    "holevo_bound",
    "modulation_stats",
    "optimize_nu",
    "rate_report",
    "secret_fraction",
    "skr",
    "trace_distance",
    "worst_case_xi",
    "__version__",
]
