"""Receding-horizon planning over a budgeted trajectory library.

Trajectories are constant-curvature arcs with a vertical slope and an initial
heading offset, expressed in the vehicle frame (x right, y down, z forward).
A dense grid is thinned once, offline, by greedy maximum dispersion; at run
time the budgeted set is scored against the perceived point cloud and a goal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, look_pose
from .world import ForestWorld, obstacle_clearance


@dataclass(frozen=True)
class Trajectory:
    curvature: float
    slope: float
    heading: float
    waypoints: np.ndarray  # (n, 3) vehicle frame

    def __post_init__(self):
        object.__setattr__(self, "waypoints", np.asarray(self.waypoints, dtype=float))


def arc_waypoints(
    curvature: float,
    slope: float,
    heading: float,
    arc_length: float = 5.0,
    n_waypoints: int = 33,
) -> np.ndarray:
    """Waypoints of one library arc, polyline length exactly arc_length.

    The horizontal projection is a circular arc (heading offset applied at
    the start); y grows linearly with horizontal arc length (y is down, so
    positive slope descends). The sampled polyline is rescaled so its summed
    segment length equals arc_length to float precision, which keeps segment
    spacing uniform.
    """
    if n_waypoints < 2:
        raise ValueError("need at least two waypoints")
    s_h = arc_length / np.sqrt(1.0 + slope * slope)
    s = np.linspace(0.0, s_h, n_waypoints)
    if abs(curvature) < 1e-12:
        x = np.sin(heading) * s
        z = np.cos(heading) * s
    else:
        phi = heading + curvature * s
        x = (np.cos(heading) - np.cos(phi)) / curvature
        z = (np.sin(phi) - np.sin(heading)) / curvature
    y = slope * s
    wp = np.stack([x, y, z], axis=1)
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    total = float(seg.sum())
    if total > 0.0:
        wp = wp * (arc_length / total)
    return wp


@dataclass
class TrajectoryLibrary:
    trajectories: list[Trajectory]
    budgeted: np.ndarray  # indices into trajectories
    straight_index: int
    excluded: int = 0
    _stack: np.ndarray | None = field(default=None, repr=False)

    @property
    def waypoint_stack(self) -> np.ndarray:
        """(T, n, 3) array of all dense waypoint sets."""
        if self._stack is None:
            self._stack = np.stack([t.waypoints for t in self.trajectories])
        return self._stack

    def budgeted_waypoints(self) -> np.ndarray:
        return self.waypoint_stack[self.budgeted]


def generate_dense_library(
    curvatures: np.ndarray,
    slopes: np.ndarray,
    headings: np.ndarray,
    arc_length: float = 5.0,
    n_waypoints: int = 33,
    min_turn_radius: float = 0.5,
) -> tuple[list[Trajectory], int]:
    """Cartesian-product trajectory grid; infeasibly tight arcs are dropped.

    Returns (trajectories, excluded_count).
    """
    out = []
    excluded = 0
    for c in np.asarray(curvatures, dtype=float):
        if abs(c) > 1e-12 and 1.0 / abs(c) < min_turn_radius:
            excluded += len(slopes) * len(headings)
            continue
        for sl in np.asarray(slopes, dtype=float):
            for h in np.asarray(headings, dtype=float):
                wp = arc_waypoints(c, sl, h, arc_length, n_waypoints)
                out.append(Trajectory(float(c), float(sl), float(h), wp))
    return out, excluded


def trajectory_distance(wa: np.ndarray, wb: np.ndarray) -> float:
    """Library metric: max over corresponding waypoints of Euclidean distance."""
    return float(np.linalg.norm(wa - wb, axis=1).max())


def budget_by_dispersion(waypoint_stack: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point thinning of a trajectory set to k members.

    Seeded at seed_index; each step adds the trajectory maximizing the
    minimum metric distance to the selected set, ties broken by lowest
    index. Guarantees min pairwise dispersion >= half the exhaustive optimum.
    """
    W = np.asarray(waypoint_stack, dtype=float)
    T = W.shape[0]
    if not 1 <= k <= T:
        raise ValueError(f"budget k={k} out of range 1..{T}")
    if k == T:
        return np.arange(T)
    sel = [int(seed_index)]
    dmin = np.linalg.norm(W - W[seed_index], axis=2).max(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dmin))
        sel.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(W - W[nxt], axis=2).max(axis=1))
    return np.array(sel, dtype=int)


def build_library(
    n_curvatures: int = 7,
    n_slopes: int = 7,
    n_headings: int = 49,
    curvature_max: float = 0.3,
    slope_max: float = 0.15,
    heading_max: float = 1.2,
    budget: int = 78,
    arc_length: float = 5.0,
    n_waypoints: int = 33,
    min_turn_radius: float = 0.5,
) -> TrajectoryLibrary:
    """Default dense grid (7 x 7 x 49 = 2401) thinned to the runtime budget."""
    curvatures = np.linspace(-curvature_max, curvature_max, n_curvatures)
    slopes = np.linspace(-slope_max, slope_max, n_slopes)
    headings = np.linspace(-heading_max, heading_max, n_headings)
    trajs, excluded = generate_dense_library(
        curvatures, slopes, headings, arc_length, n_waypoints, min_turn_radius
    )
    params = np.array([(t.curvature, t.slope, t.heading) for t in trajs])
    scale = np.array([max(curvature_max, 1e-9), max(slope_max, 1e-9), max(heading_max, 1e-9)])
    straight = int(np.argmin(((params / scale) ** 2).sum(axis=1)))
    lib = TrajectoryLibrary(trajs, np.arange(len(trajs)), straight, excluded)
    lib.budgeted = budget_by_dispersion(lib.waypoint_stack, min(budget, len(trajs)), straight)
    return lib


# ---------- scoring and labeling ----------


@dataclass(frozen=True)
class ScoreWeights:
    goal: float = 1.0
    collision: float = 1.0
    scale: float = 0.5  # meters; Gaussian width of the collision field
    truncation: float = 3.0  # in units of scale


def point_polyline_distance(points: np.ndarray, waypoints: np.ndarray) -> np.ndarray:
    """Exact distance from each point to the waypoint polyline."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    a = waypoints[:-1]
    b = waypoints[1:]
    ab = b - a
    ab2 = np.maximum((ab * ab).sum(axis=1), 1e-18)
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / ab2[None, :], 0.0, 1.0)
    closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(p[:, None, :] - closest, axis=2)
    return d.min(axis=1)


def score_trajectory(
    waypoints_world: np.ndarray,
    cloud: np.ndarray,
    goal: np.ndarray,
    weights: ScoreWeights = ScoreWeights(),
) -> float:
    """Goal-distance plus truncated-Gaussian collision cost, lower is better."""
    wp = np.asarray(waypoints_world, dtype=float)
    cost = weights.goal * float(np.linalg.norm(wp[-1] - np.asarray(goal, dtype=float)))
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(cloud):
        d = point_polyline_distance(cloud, wp)
        cutoff = weights.truncation * weights.scale
        near = d <= cutoff
        if np.any(near):
            cost += weights.collision * float(
                np.exp(-(d[near] ** 2) / (2.0 * weights.scale**2)).sum()
            )
    return cost


def select_trajectory(
    library: TrajectoryLibrary,
    pose: Pose,
    cloud: np.ndarray,
    goal: np.ndarray,
    weights: ScoreWeights = ScoreWeights(),
) -> tuple[int, float]:
    """Best budgeted trajectory by score; returns (dense index, cost).

    Ties break toward the lowest budgeted position. The cloud prefilter uses
    a KD-tree radius query that provably covers every point inside the
    truncation distance of any segment, so scores match score_trajectory
    exactly.
    """
    wp_all = library.budgeted_waypoints()
    R, t = pose.rotation, pose.translation
    wp_world = wp_all @ R.T + t
    goal = np.asarray(goal, dtype=float)
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    tree = cKDTree(cloud) if len(cloud) else None
    cutoff = weights.truncation * weights.scale
    best_i, best_c = -1, np.inf
    for i, wp in enumerate(wp_world):
        cost = weights.goal * float(np.linalg.norm(wp[-1] - goal))
        if tree is not None:
            spacing = float(np.linalg.norm(wp[1] - wp[0]))
            idx = tree.query_ball_point(wp, r=cutoff + 0.5 * spacing + 1e-9)
            cand = np.unique(np.concatenate([np.asarray(j, dtype=int) for j in idx]))
            if len(cand):
                d = point_polyline_distance(cloud[cand], wp)
                near = d <= cutoff
                if np.any(near):
                    cost += weights.collision * float(
                        np.exp(-(d[near] ** 2) / (2.0 * weights.scale**2)).sum()
                    )
        if cost < best_c:
            best_c, best_i = cost, i
    return int(library.budgeted[best_i]), float(best_c)


def label_collisions(
    trajectories: np.ndarray,
    geometry,
    pose: Pose,
    clearance: float = 0.5,
) -> np.ndarray:
    """Collision-prone flags: any waypoint within clearance of geometry.

    trajectories: (T, n, 3) vehicle-frame waypoints. geometry is either a
    world-frame point cloud (N, 3) or a ForestWorld; both use exact
    distances. pose places the trajectories in the world.
    """
    W = np.asarray(trajectories, dtype=float)
    if W.ndim == 2:
        W = W[None]
    R, t = pose.rotation, pose.translation
    T, n, _ = W.shape
    wp_world = (W.reshape(-1, 3) @ R.T + t).reshape(T, n, 3)
    flat = wp_world.reshape(-1, 3)
    if isinstance(geometry, ForestWorld):
        dist = obstacle_clearance(geometry, flat)
    else:
        cloud = np.asarray(geometry, dtype=float).reshape(-1, 3)
        if len(cloud) == 0:
            return np.zeros(T, dtype=bool)
        tree = cKDTree(cloud)
        dist, _ = tree.query(flat)
    return (dist.reshape(T, n) < clearance).any(axis=1)


# ---------- vehicle and control ----------


@dataclass(frozen=True)
class ControlGains:
    kp: float = 1.2
    kd: float = 0.4
    kyaw: float = 1.5
    speed_limit: float = 1.5
    yaw_rate_limit: float = 1.5


@dataclass(frozen=True)
class ControlCommand:
    velocity: np.ndarray  # world frame, m/s
    yaw_rate: float

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))


@dataclass(frozen=True)
class VehicleState:
    position: np.ndarray
    velocity: np.ndarray
    yaw: float
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))

    @property
    def pose(self) -> Pose:
        """World-from-camera pose of the forward-looking level camera."""
        return look_pose(self.position, self.yaw)


def pure_pursuit(waypoints_world: np.ndarray, position: np.ndarray, lookahead: float) -> np.ndarray:
    """Point one lookahead of arc length past the projection of position.

    Projects the vehicle onto the polyline, advances `lookahead` meters of
    arc, and returns the interpolated polyline point (the final waypoint when
    the request runs off the end).
    """
    wp = np.asarray(waypoints_world, dtype=float)
    p = np.asarray(position, dtype=float)
    a, b = wp[:-1], wp[1:]
    ab = b - a
    ab2 = np.maximum((ab * ab).sum(axis=1), 1e-18)
    t = np.clip(((p - a) * ab).sum(axis=1) / ab2, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.linalg.norm(proj - p, axis=1)
    seg = int(np.argmin(d))
    seg_len = np.linalg.norm(ab, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s_proj = cum[seg] + t[seg] * seg_len[seg]
    s_tgt = s_proj + lookahead
    if s_tgt >= cum[-1]:
        return wp[-1].copy()
    j = int(np.searchsorted(cum, s_tgt, side="right") - 1)
    j = min(j, len(seg_len) - 1)
    frac = (s_tgt - cum[j]) / max(seg_len[j], 1e-18)
    return wp[j] + frac * (wp[j + 1] - wp[j])


def _wrap_angle(a: float) -> float:
    return float((a + np.pi) % (2.0 * np.pi) - np.pi)


def pd_control(target: np.ndarray, state: VehicleState, gains: ControlGains = ControlGains()) -> ControlCommand:
    """PD velocity command toward target, norm-saturated at the speed limit.

    Yaw rate turns the heading toward the commanded horizontal velocity.
    """
    err = np.asarray(target, dtype=float) - state.position
    v = gains.kp * err - gains.kd * state.velocity
    n = float(np.linalg.norm(v))
    if n > gains.speed_limit:
        v = v * (gains.speed_limit / n)
    vx, vy = v[0], v[1]
    if np.hypot(vx, vy) > 1e-9:
        desired = float(np.arctan2(vy, vx))
        yr = gains.kyaw * _wrap_angle(desired - state.yaw)
        yr = float(np.clip(yr, -gains.yaw_rate_limit, gains.yaw_rate_limit))
    else:
        yr = 0.0
    return ControlCommand(v, yr)


def step_vehicle(state: VehicleState, cmd: ControlCommand, dt: float, tau: float = 0.5) -> VehicleState:
    """First-order velocity response (time constant tau), Euler position.

    The velocity relaxation uses the exact exponential, so a zero command
    decays with half-life tau*ln 2; position integration is first order.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    alpha = np.exp(-dt / tau)
    v_new = cmd.velocity + (state.velocity - cmd.velocity) * alpha
    p_new = state.position + state.velocity * dt
    yaw_new = _wrap_angle(state.yaw + cmd.yaw_rate * dt)
    return VehicleState(p_new, v_new, yaw_new, state.time + dt)
