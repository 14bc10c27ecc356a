from .bandwidth import BandwidthEstimate, estimate_bandwidth
from .engine import (
    Alt2Result,
    Simulation,
    SimulationReport,
    TrafficComparison,
    check_alt2_equivalence,
    compare_replication_modes,
    measure_replication_traffic,
    run_scenario,
)
from .scenario import InvalidScenario, Scenario, load_scenario, random_scenario

__all__ = [
    "Alt2Result", "BandwidthEstimate", "InvalidScenario", "Scenario", "Simulation",
    "SimulationReport", "TrafficComparison", "check_alt2_equivalence", "compare_replication_modes",
    "estimate_bandwidth", "load_scenario", "measure_replication_traffic", "random_scenario",
    "run_scenario",
]
