"""Closed-loop missions: perception, gating, planning, and data collection.

The vehicle flies toward a fixed goal behind the forest. Obstacle knowledge
comes exclusively from the forward camera's depth map; the executed commands
use the true pose (standing in for an independent pose source), so tracking
error displaces perceived obstacles relative to the vehicle rather than
teleporting the vehicle itself. A failure alert switches the mission into a
fixed-duration emergency mode of pure image-plane translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .features import FLOW_HISTORY, FlowConfig, compute_flow, extract_features
from .geometry import CameraIntrinsics, Pose
from .introspection import FailurePredictor, label_agreement, should_alert
from .planning import (
    ControlCommand,
    ControlGains,
    ScoreWeights,
    TrajectoryLibrary,
    VehicleState,
    build_library,
    label_collisions,
    pd_control,
    pure_pursuit,
    select_trajectory,
    step_vehicle,
)
from .vo import (
    InverseDepthMap,
    StereoConfig,
    TrackerConfig,
    fill_holes,
    regularize,
    make_keyframe,
    mean_depth_variance,
    propagate,
    stereo_update,
    track,
)
from .evalharness import true_error
from .world import (
    DegradationProfile,
    ForestWorld,
    active_degradation,
    degrade,
    obstacle_clearance,
    render,
)

DEFAULT_CAMERA = CameraIntrinsics(fx=60.0, fy=60.0, cx=47.5, cy=35.5, width=96, height=72)

_EMERGENCY_DIRECTIONS = (
    np.array([-1.0, 0.0, 0.0]),  # image-plane left
    np.array([1.0, 0.0, 0.0]),  # right
    np.array([0.0, -1.0, 0.0]),  # up (camera y points down)
)


@dataclass(frozen=True)
class PerceptionPolicy:
    grad_percentile: float = 75.0
    keyframe_px: float = 20.0  # median valid-pixel displacement trigger
    keyframe_overlap: float = 0.6
    keyframe_baseline: float = 0.9  # m; forward motion barely moves pixels near
    # the focus of expansion, so displacement alone switches too late
    stereo_interval: int = 2
    fail_limit: int = 5  # consecutive failed frames before re-init
    min_select: int = 50  # residual pixels below which a new keyframe is unusable
    var_limit: float = 0.05  # mean inverse-depth variance beyond which the map is junk
    bootstrap_sigma: float = 0.02  # relative inverse-depth noise at (re)init
    bootstrap_var_factor: float = 4.0
    process_noise: float = 1e-4
    policy_pixels: int = 400  # subsample cap for keyframe-policy metrics


@dataclass
class PerceptionFrame:
    cloud_camera: np.ndarray  # (N, 3) in the current camera frame
    mean_variance: float
    map_error: float
    tracking_ok: bool
    reinit: bool
    new_keyframe: bool


class PerceptionPipeline:
    """Keyframe bookkeeping around the VO primitives.

    The first keyframe (and any re-initialization after repeated tracking
    failure) seeds depth from ground truth plus seeded noise; every later
    keyframe inherits depth purely by propagation and stereo refinement.
    """

    def __init__(
        self,
        cam: CameraIntrinsics,
        tracker: TrackerConfig = TrackerConfig(),
        stereo: StereoConfig = StereoConfig(),
        policy: PerceptionPolicy = PerceptionPolicy(),
        seed: int = 0,
    ):
        self.cam = cam
        self.tracker = tracker
        self.stereo = stereo
        self.policy = policy
        self.rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x5EED])
        self.kf = None
        self.kf_true_depth = None
        self.rel = Pose.identity()  # keyframe-from-current-frame
        self.fail_count = 0
        self.frame_index = 0
        self.reinit_count = 0

    def _bootstrap(self, img, pose: Pose, true_depth: np.ndarray) -> None:
        # Sky rays carry inverse depth exactly 0 (valid, known-infinite):
        # silhouettes against sky then mask like any other depth edge.
        finite = np.isfinite(true_depth)
        d = np.where(finite, 1.0 / np.maximum(true_depth, 1e-6), 0.0)
        noise = self.policy.bootstrap_sigma * d * self.rng.standard_normal(d.shape)
        dd = np.where(finite, np.maximum(d + noise, 1e-4), 0.0)
        var = np.where(finite, (self.policy.bootstrap_sigma * np.maximum(d, 1e-3)) ** 2, 2.5e-7)
        var = np.maximum(var * self.policy.bootstrap_var_factor, 1e-8)
        dm = InverseDepthMap(dd, var, np.ones_like(finite))
        self.kf = make_keyframe(img, dm, pose, self.policy.grad_percentile)
        self.kf_true_depth = np.asarray(true_depth, dtype=float).copy()
        self.rel = Pose.identity()
        self.fail_count = 0

    def _keyframe_metrics(self) -> tuple[float, float]:
        """(median pixel displacement, in-view fraction) of the residual set."""
        vv, uu = np.nonzero(self.kf.select)
        if len(uu) == 0:
            return np.inf, 0.0
        if len(uu) > self.policy.policy_pixels:
            stride = len(uu) // self.policy.policy_pixels + 1
            vv, uu = vv[::stride], uu[::stride]
        d = self.kf.depth.d[vv, uu]
        T = self.rel.inverse()
        ray = np.stack(
            [(uu - self.cam.cx) / self.cam.fx, (vv - self.cam.cy) / self.cam.fy, np.ones(len(uu))],
            axis=1,
        )
        p = (ray / d[:, None]) @ T.rotation.T + T.translation
        z = p[:, 2]
        front = z > 1e-6
        safe = np.where(front, z, 1.0)
        u2 = self.cam.cx + self.cam.fx * p[:, 0] / safe
        v2 = self.cam.cy + self.cam.fy * p[:, 1] / safe
        inview = front & (u2 >= 0) & (u2 <= self.cam.width - 1) & (v2 >= 0) & (v2 <= self.cam.height - 1)
        overlap = float(inview.mean())
        if not np.any(inview):
            return np.inf, 0.0
        disp = np.hypot(u2[inview] - uu[inview], v2[inview] - vv[inview])
        return float(np.median(disp)), overlap

    @property
    def estimated_pose(self) -> Pose:
        return self.kf.pose.compose(self.rel)

    def cloud_in_camera(self) -> np.ndarray:
        vv, uu = np.nonzero(self.kf.select)
        if len(uu) == 0:
            return np.zeros((0, 3))
        z = 1.0 / self.kf.depth.d[vv, uu]
        pts_kf = np.stack(
            [(uu - self.cam.cx) / self.cam.fx * z, (vv - self.cam.cy) / self.cam.fy * z, z], axis=1
        )
        return self.rel.inverse().apply(pts_kf)

    def process(self, img: np.ndarray, true_pose: Pose, true_depth: np.ndarray) -> PerceptionFrame:
        reinit = False
        new_kf = False
        if self.kf is None:
            self._bootstrap(img, true_pose, true_depth)
            tracking_ok = True
            new_kf = True
        else:
            tr = track(self.kf, img, self.rel, self.cam, self.tracker)
            if tr.converged:
                self.rel = tr.pose
                self.fail_count = 0
                tracking_ok = True
                if self.frame_index % max(self.policy.stereo_interval, 1) == 0:
                    res = stereo_update(self.kf, img, self.rel, self.cam, self.stereo)
                    if res.updated:
                        self.kf = replace(self.kf, depth=res.depth)
                disp, overlap = self._keyframe_metrics()
                baseline = float(np.linalg.norm(self.rel.translation))
                if (
                    disp > self.policy.keyframe_px
                    or overlap < self.policy.keyframe_overlap
                    or baseline > self.policy.keyframe_baseline
                ):
                    depth_new = regularize(
                        fill_holes(
                            propagate(
                                self.kf.depth,
                                self.rel.inverse(),
                                self.cam,
                                self.policy.process_noise,
                            )
                        )
                    )
                    pose_new = self.kf.pose.compose(self.rel).renormalized()
                    kf_new = make_keyframe(img, depth_new, pose_new, self.policy.grad_percentile)
                    if int(kf_new.select.sum()) < self.policy.min_select:
                        # The propagated map collapsed (near-plane pass,
                        # occlusion, divergence): nothing left to track on.
                        self._bootstrap(img, true_pose, true_depth)
                        self.reinit_count += 1
                        reinit = True
                    else:
                        self.kf = kf_new
                        self.kf_true_depth = np.asarray(true_depth, dtype=float).copy()
                        self.rel = Pose.identity()
                    new_kf = True
            else:
                self.fail_count += 1
                tracking_ok = False
                if self.fail_count >= self.policy.fail_limit:
                    self._bootstrap(img, true_pose, true_depth)
                    self.reinit_count += 1
                    reinit = True
                    new_kf = True
        if not reinit and mean_depth_variance(self.kf.depth) > self.policy.var_limit:
            # The map is too uncertain to navigate on; start over rather
            # than limp along with garbage geometry.
            self._bootstrap(img, true_pose, true_depth)
            self.reinit_count += 1
            reinit = True
            new_kf = True
        self.frame_index += 1
        return PerceptionFrame(
            cloud_camera=self.cloud_in_camera(),
            mean_variance=mean_depth_variance(self.kf.depth),
            map_error=true_error(self.kf.depth, self.kf_true_depth),
            tracking_ok=tracking_ok,
            reinit=reinit,
            new_keyframe=new_kf,
        )


@dataclass(frozen=True)
class MissionSetup:
    """Everything an episode needs besides the world and the model."""

    cam: CameraIntrinsics = DEFAULT_CAMERA
    tracker: TrackerConfig = TrackerConfig()
    stereo: StereoConfig = StereoConfig()
    policy: PerceptionPolicy = PerceptionPolicy()
    gains: ControlGains = ControlGains()
    weights: ScoreWeights = ScoreWeights()
    flow: FlowConfig = FlowConfig()
    library: TrajectoryLibrary | None = None

    def get_library(self) -> TrajectoryLibrary:
        if self.library is None:
            object.__setattr__(self, "library", build_library())
        return self.library


@dataclass(frozen=True)
class MissionConfig:
    dt: float = 0.05
    max_duration: float = 16.0
    altitude: float = 2.0
    goal_distance: float = 22.0
    goal_radius: float = 1.5
    lookahead: float = 1.2
    tau: float = 0.5
    crash_radius: float = 0.3
    reset_clearance: float = 0.9
    max_interventions: int = 10
    threshold: float = 0.5
    emergency_duration: float = 3.0
    emergency_speed: float = 0.6
    emergency_score_exit: bool = False
    introspection: bool = True
    label_clearance: float = 0.5
    log_labels: bool = False
    start_margin: float = 3.0


@dataclass
class FrameRecord:
    time: float
    position: np.ndarray
    score: float | None
    mode: str
    traj_id: int | None
    y_agreement: float | None
    intervention: bool


@dataclass
class EpisodeLog:
    seed: int
    records: list = field(default_factory=list)
    interventions: list = field(default_factory=list)
    distance: float = 0.0
    reinits: int = 0
    goal_reached: bool = False
    alerts: int = 0


def emergency_step(direction_index: int, pose: Pose, speed: float) -> ControlCommand:
    """Pure image-plane translation: no forward component, no yaw."""
    dir_cam = _EMERGENCY_DIRECTIONS[direction_index % len(_EMERGENCY_DIRECTIONS)]
    v_world = pose.rotation @ (dir_cam * speed)
    return ControlCommand(v_world, 0.0)


def run_episode(
    world: ForestWorld,
    profile: DegradationProfile,
    model: FailurePredictor | None,
    setup: MissionSetup,
    cfg: MissionConfig,
    seed: int,
    frame_sink: list | None = None,
) -> EpisodeLog:
    """Fly one gated (or ungated) episode; deterministic in all arguments.

    frame_sink, when given, receives every degraded camera frame in order.
    """
    lib = setup.get_library()
    budgeted_wp = lib.budgeted_waypoints()
    cam = setup.cam
    xmin, ymin, xmax, ymax = world.extent
    start = np.array([xmin - cfg.start_margin, 0.5 * (ymin + ymax), cfg.altitude])
    goal = start + np.array([cfg.goal_distance, 0.0, 0.0])
    state = VehicleState(start, np.zeros(3), yaw=0.0, time=0.0)
    percep = PerceptionPipeline(cam, setup.tracker, setup.stereo, setup.policy, seed)

    log = EpisodeLog(seed=seed)
    frames: list[np.ndarray] = []
    flows: list = []
    mode = "deliberative"
    emergency_left = 0.0
    emergency_dir = -1
    safe_ring: list[tuple[np.ndarray, float]] = []
    n_steps = int(round(cfg.max_duration / cfg.dt))

    for _ in range(n_steps):
        true_pose = state.pose
        img_clean, depth_true = render(world, true_pose, cam)
        img = degrade(img_clean, profile, state.time, seed)
        if frame_sink is not None:
            frame_sink.append(img)
        p = percep.process(img, true_pose, depth_true)

        frames.append(img)
        if len(frames) > FLOW_HISTORY + 1:
            frames.pop(0)
        if len(frames) >= 2:
            flows.append(compute_flow(frames[-2], frames[-1], setup.flow))
            if len(flows) > FLOW_HISTORY:
                flows.pop(0)

        score = None
        if model is not None and len(flows) == FLOW_HISTORY:
            feat = extract_features(frames, flows)
            score = float(model.predict(feat))

        if cfg.introspection and score is not None:
            if mode == "deliberative" and should_alert(score, cfg.threshold):
                mode = "emergency"
                emergency_left = cfg.emergency_duration
                emergency_dir += 1
                log.alerts += 1
            elif (
                mode == "emergency"
                and cfg.emergency_score_exit
                and not should_alert(score, cfg.threshold)
            ):
                emergency_left = 0.0

        traj_id = None
        y_agree = None
        if mode == "emergency":
            cmd = emergency_step(emergency_dir, true_pose, cfg.emergency_speed)
        else:
            cloud_world = true_pose.apply(p.cloud_camera) if len(p.cloud_camera) else p.cloud_camera
            traj_id, _cost = select_trajectory(lib, true_pose, cloud_world, goal, setup.weights)
            wp_world = lib.trajectories[traj_id].waypoints @ true_pose.rotation.T + true_pose.translation
            target = pure_pursuit(wp_world, state.position, cfg.lookahead)
            cmd = pd_control(target, state, setup.gains)
            if cfg.log_labels:
                pred = label_collisions(budgeted_wp, cloud_world, true_pose, cfg.label_clearance)
                truth = label_collisions(budgeted_wp, world, true_pose, cfg.label_clearance)
                y_agree = label_agreement(pred, truth)

        if active_degradation(profile, state.time) == "rotation":
            cmd = ControlCommand(cmd.velocity, cmd.yaw_rate + profile.rotation_spike)

        clearance_now = obstacle_clearance(world, state.position[None])[0]
        if clearance_now >= cfg.reset_clearance:
            safe_ring.append((state.position.copy(), state.yaw))
            if len(safe_ring) > 400:
                safe_ring.pop(0)

        rec = FrameRecord(
            time=state.time,
            position=state.position.copy(),
            score=score,
            mode=mode,
            traj_id=traj_id,
            y_agreement=y_agree,
            intervention=False,
        )
        log.records.append(rec)

        if mode == "emergency":
            emergency_left -= cfg.dt
            if emergency_left <= 1e-9:
                mode = "deliberative"

        new_state = step_vehicle(state, cmd, cfg.dt, cfg.tau)
        log.distance += float(np.linalg.norm(new_state.position - state.position))
        state = new_state

        if obstacle_clearance(world, state.position[None])[0] < cfg.crash_radius:
            rec.intervention = True
            log.interventions.append((state.time, state.position.copy()))
            if safe_ring:
                pos, yaw = safe_ring[-1]
            else:
                pos, yaw = start, 0.0
            state = VehicleState(np.asarray(pos, dtype=float).copy(), np.zeros(3), yaw, state.time)
            percep = PerceptionPipeline(cam, setup.tracker, setup.stereo, setup.policy, seed + 7919 * len(log.interventions))
            frames.clear()
            flows.clear()
            mode = "deliberative"
            emergency_left = 0.0
            if len(log.interventions) >= cfg.max_interventions:
                break

        if np.linalg.norm(state.position - goal) < cfg.goal_radius:
            log.goal_reached = True
            break

    log.reinits = percep.reinit_count
    return log


def intervention_metric(logs: list[EpisodeLog]) -> float:
    """Total distance flown per intervention (denominator floored at 1)."""
    dist = sum(l.distance for l in logs)
    n = sum(len(l.interventions) for l in logs)
    return dist / max(1, n)


# ---------- scripted data collection ----------


@dataclass(frozen=True)
class CollectConfig:
    frames: int = 320
    dt: float = 0.05
    speed: float = 1.5
    yaw_amplitude: float = 0.45
    yaw_period: float = 7.0
    altitude: float = 2.0
    label_clearance: float = 0.5
    val_fraction: float = 0.25
    avoid_radius: float = 1.5  # trees this close push the sweep sideways
    avoid_gain: float = 2.5


def _tree_repulsion(world: ForestWorld, pos: np.ndarray, radius: float, gain: float) -> np.ndarray:
    """Horizontal push away from nearby trunks (deterministic slide).

    The scripted collection sweep is not perception-gated, but the pilot
    still does not fly through solids: within `radius` of a trunk surface the
    commanded velocity gains an outward component ramping up to `gain` m/s.
    """
    push = np.zeros(3)
    if not len(world.trees):
        return push
    rel = pos[:2] - world.trees[:, :2]
    dist = np.hypot(rel[:, 0], rel[:, 1]) - world.trees[:, 2]
    for j in np.nonzero(dist < radius)[0]:
        d = max(dist[j], 1e-3)
        push[:2] += rel[j] / np.hypot(*rel[j]) * gain * (1.0 - d / radius)
    return push


def collect_episode(
    world: ForestWorld,
    profile: DegradationProfile,
    setup: MissionSetup,
    cfg: CollectConfig,
    seed: int,
) -> tuple[list[dict], list[np.ndarray]]:
    """One scripted (ungated) sweep through the world.

    The vehicle follows a fixed serpentine velocity program; every
    feature-warm frame contributes a record with the feature vector, the
    label-agreement target, the true map error, and the mean depth variance.
    Returns (records, degraded frames for the archive).
    """
    lib = setup.get_library()
    budgeted_wp = lib.budgeted_waypoints()
    cam = setup.cam
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0xC0117EC7])
    xmin, ymin, xmax, ymax = world.extent
    y0 = rng.uniform(ymin + 0.25 * (ymax - ymin), ymax - 0.25 * (ymax - ymin))
    start = np.array([xmin - 2.0, y0, cfg.altitude])
    state = VehicleState(start, np.array([cfg.speed, 0.0, 0.0]), yaw=0.0, time=0.0)
    percep = PerceptionPipeline(cam, setup.tracker, setup.stereo, setup.policy, seed)

    omega = 2.0 * np.pi / cfg.yaw_period
    records: list[dict] = []
    archive: list[np.ndarray] = []
    frames: list[np.ndarray] = []
    flows: list = []

    for k in range(cfg.frames):
        true_pose = state.pose
        img_clean, depth_true = render(world, true_pose, cam)
        img = degrade(img_clean, profile, state.time, seed)
        archive.append(img)
        p = percep.process(img, true_pose, depth_true)

        frames.append(img)
        if len(frames) > FLOW_HISTORY + 1:
            frames.pop(0)
        if len(frames) >= 2:
            flows.append(compute_flow(frames[-2], frames[-1], setup.flow))
            if len(flows) > FLOW_HISTORY:
                flows.pop(0)

        if len(flows) == FLOW_HISTORY:
            feat = extract_features(frames, flows)
            cloud_world = true_pose.apply(p.cloud_camera) if len(p.cloud_camera) else p.cloud_camera
            pred = label_collisions(budgeted_wp, cloud_world, true_pose, cfg.label_clearance)
            truth = label_collisions(budgeted_wp, world, true_pose, cfg.label_clearance)
            records.append(
                {
                    "frame": k,
                    "features": feat,
                    "target": 1.0 - label_agreement(pred, truth),
                    "true_error": p.map_error,
                    "mean_depth_variance": p.mean_variance,
                }
            )

        yaw_rate = cfg.yaw_amplitude * omega * np.cos(omega * state.time)
        if active_degradation(profile, state.time) == "rotation":
            yaw_rate += profile.rotation_spike
        v_cmd = cfg.speed * np.array([np.cos(state.yaw), np.sin(state.yaw), 0.0])
        v_cmd += _tree_repulsion(world, state.position, cfg.avoid_radius, cfg.avoid_gain)
        state = step_vehicle(state, ControlCommand(v_cmd, yaw_rate), cfg.dt, tau=0.5)

    return records, archive


def generate_dataset(
    worlds: list[ForestWorld],
    profiles: list[DegradationProfile],
    setup: MissionSetup,
    cfg: CollectConfig,
    seed: int,
) -> tuple[list[dict], list[list[np.ndarray]]]:
    """Scripted sweeps over (world, profile) pairs, split by whole episodes.

    The last ceil(val_fraction * n) episodes are tagged "val", the rest
    "train"; frames never cross the split.
    """
    if len(worlds) != len(profiles):
        raise ValueError("worlds and profiles must pair up")
    n_ep = len(worlds)
    if n_ep == 0:
        raise ValueError("no episodes requested")
    n_val = max(1, int(np.ceil(cfg.val_fraction * n_ep))) if n_ep > 1 else 0
    records: list[dict] = []
    archives: list[list[np.ndarray]] = []
    for ep, (w, prof) in enumerate(zip(worlds, profiles)):
        recs, arch = collect_episode(w, prof, setup, cfg, seed + 1013 * ep)
        split = "val" if ep >= n_ep - n_val else "train"
        for r in recs:
            r["episode"] = ep
            r["split"] = split
        records.extend(recs)
        archives.append(arch)
    return records, archives
