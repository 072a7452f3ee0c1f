"""Trajectory and map accuracy metrics: relative-pose-error drift, absolute
trajectory error, end-to-end loop error, artifact localization error."""

from __future__ import annotations

import numpy as np

from lamp.geometry import Pose3, rotation_angle


def _positions(poses: list[Pose3]) -> np.ndarray:
    return np.array([p.translation for p in poses])


def rpe_drift(est: list[Pose3], gt: list[Pose3], delta: float = 1.0) -> dict:
    """Relative pose error over ground-truth path deltas of `delta` meters.

    Returns mean translation error per segment, the equivalent drift
    percentage (error per distance traveled), and the mean rotation error."""
    if len(est) != len(gt) or len(est) < 2:
        raise ValueError("need two aligned trajectories with >= 2 poses")
    gt_pos = _positions(gt)
    steps = np.linalg.norm(np.diff(gt_pos, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    trans_errors, rot_errors, spans = [], [], []
    j = 0
    for i in range(len(gt)):
        target = arc[i] + delta
        while j < len(gt) and arc[j] < target:
            j += 1
        if j >= len(gt):
            break
        rel_est = est[i].inverse().compose(est[j])
        rel_gt = gt[i].inverse().compose(gt[j])
        err = rel_gt.inverse().compose(rel_est)
        trans_errors.append(np.linalg.norm(err.translation))
        rot_errors.append(rotation_angle(err.rotation))
        spans.append(arc[j] - arc[i])
    if not trans_errors:
        raise ValueError(f"trajectory shorter than one {delta} m delta")
    mean_trans = float(np.mean(trans_errors))
    mean_span = float(np.mean(spans))
    return {
        "mean_translation_error": mean_trans,
        "mean_rotation_error": float(np.mean(rot_errors)),
        "drift_pct": 100.0 * mean_trans / mean_span,
        "segments": len(trans_errors),
    }


def ate(est: list[Pose3], gt: list[Pose3]) -> float:
    """Mean absolute position error in the shared (anchored) frame."""
    if len(est) != len(gt):
        raise ValueError("trajectories must be aligned")
    return float(np.mean(np.linalg.norm(_positions(est) - _positions(gt), axis=1)))


def end_to_end_error(est: list[Pose3], gt: list[Pose3]) -> float:
    """Error of the estimated start-to-end displacement against truth; for a
    loop closed at the start this is the residual loop gap."""
    est_disp = est[-1].translation - est[0].translation
    gt_disp = gt[-1].translation - gt[0].translation
    return float(np.linalg.norm(est_disp - gt_disp))


def artifact_errors(
    estimates: dict[str, np.ndarray], truth: dict[str, np.ndarray]
) -> dict[str, float]:
    out = {}
    for label, est in estimates.items():
        if label in truth:
            out[label] = float(np.linalg.norm(np.asarray(est) - np.asarray(truth[label])))
    return out


def inter_trajectory_error(
    est_a: list[Pose3], gt_a: list[Pose3], est_b: list[Pose3], gt_b: list[Pose3],
    stride: int = 5,
) -> float:
    """Mean error of the estimated displacement between the two robots'
    trajectories against ground truth, sampled over index pairs; measures how
    well the robots agree on their shared frame."""
    errs = []
    for i in range(0, len(est_a), stride):
        for j in range(0, len(est_b), stride):
            rel_est = est_b[j].translation - est_a[i].translation
            rel_gt = gt_b[j].translation - gt_a[i].translation
            errs.append(np.linalg.norm(rel_est - rel_gt))
    return float(np.mean(errs))
