"""Multi-robot lidar SLAM: GICP front-end, pose-graph back-end with
consistency-based loop-closure rejection, centralized map fusion, and a
synthetic tunnel-world simulator for ground-truth evaluation."""

__version__ = "0.1.0"

from lamp.geometry import Pose3  # noqa: F401
