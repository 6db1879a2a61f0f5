"""Monte Carlo simulator for joint activity detection, channel estimation
and multi-target localization in an uplink cell-free network.

Subpackages group the moving parts: circular-statistics primitives,
scene generation, the two message-passing engines and their turbo
orchestrator, Bayesian bounds and state evolution, sequential baselines,
and the sweep harness with its CLI.
"""

__version__ = "0.1.0"

from .scene import SceneConfig, Scene, sample_scene, synthesize  # noqa: E402
from .turbo import TurboConfig, Estimates, run_turbo_hymp  # noqa: E402
from .harness import (  # noqa: E402
    SweepSpec, ConfigError, load_config, serialize_config, run_sweep,
    summarize, equal_error_point,
)

__all__ = [
    "SceneConfig", "Scene", "sample_scene", "synthesize",
    "TurboConfig", "Estimates", "run_turbo_hymp",
    "SweepSpec", "ConfigError", "load_config", "serialize_config",
    "run_sweep", "summarize", "equal_error_point",
    "__version__",
]
