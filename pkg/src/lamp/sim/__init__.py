"""Synthetic tunnel-world simulator: procedural corridor networks, a
ray-cast spinning-lidar model, trajectory generation, scenario datasets with
ground truth and labeled outlier injections, plus the evaluation metrics."""

from lamp.sim.world import Corridor, PoseOutsideWorld, WorldModel  # noqa: F401
from lamp.sim.sensor import simulate_scan  # noqa: F401
from lamp.sim.scenario import (  # noqa: F401
    Dataset,
    InjectedOutlier,
    InvalidSpec,
    ScenarioSpec,
    load_dataset,
    run_scenario,
    write_dataset,
)
from lamp.sim import metrics  # noqa: F401
