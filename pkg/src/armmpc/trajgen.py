"""Task-trajectory generation: clamped cubic splines + quaternion slerp.

Trajectories are sampled on the controller's time grid so the controllers
never resample. The bundled scenarios reproduce the evaluation setups: a
pick-and-place style payload move, a wrist-singularity crossing, and a small
planar circle for benchmarks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .kinematics import Pose, canonical_quat, forward_kinematics
from .nominal import TaskSpec, default_task_hierarchy
from .robot_model import RobotModel

SCENARIOS = ("payload_pick_place", "singularity_pass", "circle_2dof")


@dataclass(frozen=True, eq=False)
class TaskTrajectory:
    """Evenly sampled sequence of pose targets with optional desired twists."""

    dt: float
    poses: tuple[Pose, ...]
    twists: np.ndarray | None = None  # (count, 6): [linear; angular]
    tasks: tuple[TaskSpec, ...] = field(default_factory=default_task_hierarchy)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 1:
            raise ValueError("trajectory needs at least one sample")
        if self.twists is not None:
            tw = np.asarray(self.twists, dtype=float)
            if tw.shape != (len(self.poses), 6):
                raise ValueError(f"twists must be ({len(self.poses)}, 6), got {tw.shape}")
            object.__setattr__(self, "twists", tw)

    @property
    def n_samples(self) -> int:
        return len(self.poses)

    @property
    def duration(self) -> float:
        return (self.n_samples - 1) * self.dt

    def window(self, start: int, horizon: int):
        """Targets for steps start..start+horizon, padded with the final sample.

        Returns (window items, includes_end); items are (Pose, twist) pairs.
        """
        last = self.n_samples - 1
        items = []
        for k in range(start, start + horizon + 1):
            idx = min(k, last)
            twist = None if self.twists is None else self.twists[idx]
            items.append((self.poses[idx], twist))
        return items, (start + horizon) >= last


def cubic_spline_position(waypoints, dt: float):
    """Clamped C2 cubic through (t, xyz) waypoints, sampled every dt.

    Endpoint velocities are zero (moves start and end at rest). Returns
    (times, positions (k, 3), velocities (k, 3)).
    """
    times = np.asarray([w[0] for w in waypoints], dtype=float)
    points = np.asarray([w[1] for w in waypoints], dtype=float).reshape(len(waypoints), 3)
    if len(waypoints) < 2:
        raise ValueError("need at least two waypoints")
    if np.any(np.diff(times) <= 0):
        raise ValueError("waypoint times must be strictly increasing")
    spline = CubicSpline(times, points, axis=0, bc_type="clamped")
    count = int(round((times[-1] - times[0]) / dt))
    ts = times[0] + dt * np.arange(count + 1)
    ts[-1] = min(ts[-1], times[-1])
    return ts, spline(ts), spline(ts, 1)


def quaternion_interp(q_start, q_end, s: float) -> np.ndarray:
    """Shortest-path slerp between unit quaternions at fraction s in [0, 1]."""
    qa = np.asarray(q_start, dtype=float)
    qb = np.asarray(q_end, dtype=float)
    dot = float(qa @ qb)
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        out = qa + s * (qb - qa)
        return canonical_quat(out / np.linalg.norm(out))
    theta = math.acos(min(1.0, dot))
    sin_theta = math.sin(theta)
    wa = math.sin((1.0 - s) * theta) / sin_theta
    wb = math.sin(s * theta) / sin_theta
    out = wa * qa + wb * qb
    return canonical_quat(out / np.linalg.norm(out))


def _slerp_axis_angle(q_start, q_end):
    """Rotation vector taking q_start to q_end along the slerp path."""
    from .kinematics import quat_to_matrix, rotvec_from_matrix

    qa = np.asarray(q_start, dtype=float)
    qb = np.asarray(q_end, dtype=float)
    if qa @ qb < 0:
        qb = -qb
    rel = quat_to_matrix(qb) @ quat_to_matrix(qa).T
    return rotvec_from_matrix(rel)


def _smooth_profile(duration: float, dt: float):
    """Scalar 0 -> 1 ease with zero endpoint rates, on the dt grid."""
    ts, pos, vel = cubic_spline_position([(0.0, (0.0, 0.0, 0.0)), (duration, (1.0, 0.0, 0.0))], dt)
    return ts, pos[:, 0], vel[:, 0]


def pose_trajectory_between(start: Pose, end: Pose, duration: float, dt: float,
                            tasks=None) -> TaskTrajectory:
    """Spline position + slerp orientation from start to end, at rest at both ends."""
    ts, s_prof, sd_prof = _smooth_profile(duration, dt)
    rotvec = _slerp_axis_angle(start.quaternion, end.quaternion)
    delta = end.translation - start.translation
    poses = []
    twists = np.zeros((len(ts), 6))
    for i, (s, sd) in enumerate(zip(s_prof, sd_prof)):
        pos = start.translation + s * delta
        quat = quaternion_interp(start.quaternion, end.quaternion, float(s))
        poses.append(Pose(quat, pos))
        twists[i, :3] = sd * delta
        twists[i, 3:] = sd * rotvec
    return TaskTrajectory(dt=dt, poses=tuple(poses), twists=twists,
                          tasks=tuple(tasks) if tasks is not None else default_task_hierarchy())


def waypoint_trajectory(waypoints, quats, dt: float, tasks=None) -> TaskTrajectory:
    """Spline through timed position waypoints with piecewise slerp orientation.

    waypoints: list of (t, xyz); quats: list of (t, quaternion) keyframes
    covering the same span.
    """
    ts, pos, vel = cubic_spline_position(waypoints, dt)
    q_times = np.asarray([t for t, _ in quats], dtype=float)
    q_vals = [np.asarray(q, dtype=float) for _, q in quats]
    poses = []
    twists = np.zeros((len(ts), 6))
    for i, t in enumerate(ts):
        seg = int(np.clip(np.searchsorted(q_times, t, side="right") - 1, 0, len(q_vals) - 2))
        span = q_times[seg + 1] - q_times[seg]
        s = float(np.clip((t - q_times[seg]) / span, 0.0, 1.0))
        quat = quaternion_interp(q_vals[seg], q_vals[seg + 1], s)
        poses.append(Pose(quat, pos[i]))
        twists[i, :3] = vel[i]
        twists[i, 3:] = _slerp_axis_angle(q_vals[seg], q_vals[seg + 1]) / span
    # angular feedforward is the constant segment rate; zero it at the rest ends
    twists[0, 3:] = 0.0
    twists[-1, 3:] = 0.0
    return TaskTrajectory(dt=dt, poses=tuple(poses), twists=twists,
                          tasks=tuple(tasks) if tasks is not None else default_task_hierarchy())


SINGULARITY_START_CONFIG = np.array([0.0, 0.0, -math.pi / 2, 0.0, -math.pi / 2, math.pi / 2])
SINGULARITY_END_CONFIG = np.array([math.pi / 2, 0.0, -math.pi / 2, 0.0, math.pi / 4, math.pi / 2])
PAYLOAD_HOME_CONFIG = np.array([0.0, 0.5, -1.8, 0.0, -0.8, 0.0])


def scenario_initial_config(name: str, model: RobotModel) -> np.ndarray:
    if name == "singularity_pass":
        return SINGULARITY_START_CONFIG.copy()
    if name == "payload_pick_place":
        return PAYLOAD_HOME_CONFIG.copy()
    if name == "circle_2dof":
        base = np.array([0.4, 0.7, -1.2, 0.0, -0.6, 0.0])
        out = np.zeros(model.n)
        take = min(model.n, base.shape[0])
        out[:take] = base[:take]
        return out
    raise KeyError(f"unknown scenario {name!r}")


def scenario_trajectory(name: str, model: RobotModel, dt: float,
                        duration: float | None = None) -> TaskTrajectory:
    """Build one of the bundled scenario trajectories on the given model."""
    if name == "singularity_pass":
        start = forward_kinematics(model, SINGULARITY_START_CONFIG)
        end = forward_kinematics(model, SINGULARITY_END_CONFIG)
        return pose_trajectory_between(start, end, duration or 4.0, dt)
    if name == "payload_pick_place":
        total = duration or 3.0
        seg = total / 3.0
        home = forward_kinematics(model, PAYLOAD_HOME_CONFIG)
        p0 = home.translation
        lift = p0 + np.array([0.0, 0.0, 0.2])
        across = lift + np.array([0.0, 0.35, 0.0])
        place = across + np.array([0.0, 0.0, -0.2])
        waypoints = [(0.0, p0), (seg, lift), (2 * seg, across), (total, place)]
        quats = [(0.0, home.quaternion), (total, home.quaternion)]
        return waypoint_trajectory(waypoints, quats, dt)
    if name == "circle_2dof":
        total = duration or 2.0
        q0 = scenario_initial_config(name, model)
        center_pose = forward_kinematics(model, q0)
        radius = 0.08
        count = int(round(total / dt))
        poses = []
        twists = np.zeros((count + 1, 6))
        omega = 2 * math.pi / total
        for k in range(count + 1):
            ang = omega * k * dt
            offset = radius * np.array([math.cos(ang) - 1.0, math.sin(ang), 0.0])
            poses.append(Pose(center_pose.quaternion, center_pose.translation + offset))
            twists[k, :3] = radius * omega * np.array([-math.sin(ang), math.cos(ang), 0.0])
        from .nominal import POSITION

        tasks = (TaskSpec(priority=1, selector=POSITION, gain=20.0,
                          kp=np.full(3, 100.0), kd=np.full(3, 10.0)),)
        return TaskTrajectory(dt=dt, poses=tuple(poses), twists=twists, tasks=tasks)
    raise KeyError(f"unknown scenario {name!r}; choose from {SCENARIOS}")


def export_trajectory_csv(traj: TaskTrajectory, path) -> None:
    """Write t, px, py, pz, qw, qx, qy, qz rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "px", "py", "pz", "qw", "qx", "qy", "qz"])
        for k, pose in enumerate(traj.poses):
            row = [k * traj.dt, *pose.translation, *pose.quaternion]
            writer.writerow([f"{x:.17g}" for x in row])


def import_trajectory_csv(path, tasks=None) -> TaskTrajectory:
    """Read a trajectory written by export_trajectory_csv (twists not stored)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["t", "px", "py", "pz"]:
            raise ValueError(f"unexpected trajectory header {header!r}")
        times = []
        poses = []
        for row in reader:
            vals = [float(x) for x in row]
            times.append(vals[0])
            poses.append(Pose(np.asarray(vals[4:8]), np.asarray(vals[1:4])))
    if len(times) < 2:
        dt = 1.0
    else:
        dt = times[1] - times[0]
    return TaskTrajectory(dt=dt, poses=tuple(poses),
                          tasks=tuple(tasks) if tasks is not None else default_task_hierarchy())
