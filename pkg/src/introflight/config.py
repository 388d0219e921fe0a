"""Flat key = value run configuration.

One option per line, `#` starts a comment, unknown keys are rejected. Every
key has a typed default below; the canonical serialization (sorted keys,
repr-formatted values) feeds a sha256 hash recorded by the CLI manifest so
identical configs are recognizable across runs.
"""

from __future__ import annotations

import hashlib

from .features import FlowConfig
from .geometry import CameraIntrinsics
from .introspection import FailurePredictor
from .mission import CollectConfig, MissionConfig, MissionSetup, PerceptionPolicy
from .planning import ControlGains, ScoreWeights, build_library
from .vo import StereoConfig, TrackerConfig

# key: (default, documentation)
DEFAULTS: dict[str, tuple[object, str]] = {
    "world.size": (36.0, "side length of the square forest extent, meters"),
    "world.density": (1.0 / 144.0, "trees per square meter (1/144 is sparse, 1/36 dense)"),
    "world.radius_min": (0.15, "minimum trunk radius, meters"),
    "world.radius_max": (0.45, "maximum trunk radius, meters"),
    "world.height_min": (6.0, "minimum trunk height, meters"),
    "world.height_max": (12.0, "maximum trunk height, meters"),
    "world.min_gap": (0.3, "minimum surface gap between trunks, meters"),
    "camera.width": (96, "image width, pixels"),
    "camera.height": (72, "image height, pixels"),
    "camera.fx": (60.0, "focal length, pixels"),
    "camera.fy": (60.0, "focal length, pixels"),
    "camera.cx": (47.5, "principal point x, pixels"),
    "camera.cy": (35.5, "principal point y, pixels"),
    "vo.huber_delta": (0.1, "robust-loss transition point on intensity residuals"),
    "vo.pyramid_levels": (3, "coarse-to-fine levels"),
    "vo.max_iterations": (50, "damped Gauss-Newton iteration cap per level"),
    "vo.step_tol": (1e-6, "twist-step convergence threshold"),
    "vo.grad_percentile": (75.0, "gradient-magnitude percentile for pixel selection"),
    "vo.min_pixels": (12, "minimum usable pixels before tracking gives up"),
    "stereo.min_baseline": (0.25, "minimum translation before epipolar updates, meters"),
    "stereo.num_samples": (32, "inverse-depth hypotheses per pixel"),
    "stereo.ssd_max": (0.02, "mean per-tap SSD acceptance gate"),
    "stereo.d_max": (2.0, "largest searchable inverse depth, 1/meters"),
    "stereo.interval": (2, "run the epipolar update every n-th frame"),
    "perception.keyframe_px": (20.0, "median pixel displacement that forces a new keyframe"),
    "perception.keyframe_overlap": (0.6, "in-view fraction below which a new keyframe is forced"),
    "perception.fail_limit": (5, "consecutive tracking failures before re-initialization"),
    "planner.n_curvatures": (7, "dense library grid size, curvature axis"),
    "planner.n_slopes": (7, "dense library grid size, slope axis"),
    "planner.n_headings": (49, "dense library grid size, heading axis"),
    "planner.curvature_max": (0.3, "curvature magnitude bound, 1/meters"),
    "planner.slope_max": (0.15, "vertical slope magnitude bound"),
    "planner.heading_max": (1.2, "initial heading magnitude bound, radians"),
    "planner.budget": (78, "trajectories kept after dispersion thinning"),
    "planner.arc_length": (5.0, "trajectory length, meters"),
    "planner.n_waypoints": (33, "waypoints per trajectory"),
    "planner.goal_weight": (1.0, "weight on endpoint-to-goal distance"),
    "planner.collision_weight": (1.0, "weight on the obstacle proximity penalty"),
    "planner.collision_scale": (0.5, "Gaussian width of the obstacle penalty, meters"),
    "planner.collision_truncation": (3.0, "penalty cutoff in units of collision_scale"),
    "control.kp": (1.2, "position gain"),
    "control.kd": (0.4, "velocity damping gain"),
    "control.kyaw": (1.5, "heading gain"),
    "control.speed_limit": (1.5, "commanded speed cap, m/s"),
    "control.yaw_rate_limit": (1.5, "commanded yaw rate cap, rad/s"),
    "control.tau": (0.5, "velocity response time constant, seconds"),
    "control.lookahead": (1.2, "pure-pursuit arc lookahead, meters"),
    "introspection.threshold": (0.5, "alert when the failure score strictly exceeds this"),
    "introspection.epsilon": (0.05, "regression insensitivity tube half-width"),
    "introspection.ridge": (1e-4, "weight decay strength"),
    "introspection.epochs": (300, "training passes over the data"),
    "introspection.lr": (0.1, "initial learning rate"),
    "introspection.lr_decay": (1e-4, "per-update learning rate decay"),
    "introspection.shuffle": (True, "reshuffle sample order each epoch"),
    "mission.dt": (0.05, "control period, seconds"),
    "mission.max_duration": (16.0, "episode time budget, seconds"),
    "mission.altitude": (2.0, "flight altitude, meters"),
    "mission.goal_distance": (22.0, "goal offset along the initial heading, meters"),
    "mission.goal_radius": (1.5, "goal capture radius, meters"),
    "mission.crash_radius": (0.3, "clearance below which an intervention fires, meters"),
    "mission.reset_clearance": (0.9, "minimum clearance of the pose restored after intervention"),
    "mission.max_interventions": (10, "episode aborts after this many interventions"),
    "mission.emergency_duration": (3.0, "length of one emergency maneuver, seconds"),
    "mission.emergency_speed": (0.6, "emergency translation speed, m/s"),
    "mission.emergency_score_exit": (False, "end an emergency early once the score drops"),
    "mission.label_clearance": (0.5, "waypoint clearance used for collision labels, meters"),
    "collect.episodes": (12, "scripted sweeps per data collection run"),
    "collect.frames": (320, "frames per scripted sweep"),
    "collect.speed": (1.5, "scripted sweep speed, m/s"),
    "collect.yaw_amplitude": (0.45, "serpentine yaw amplitude, radians"),
    "collect.yaw_period": (7.0, "serpentine yaw period, seconds"),
    "collect.val_fraction": (0.25, "trailing fraction of episodes held out as val"),
    "collect.avoid_radius": (1.5, "sweep obstacle-slide onset distance from trunk surface, meters"),
    "collect.avoid_gain": (2.5, "sweep obstacle-slide max push, m/s"),
}

_POSITIVE = (
    "world.size",
    "camera.width",
    "camera.height",
    "camera.fx",
    "camera.fy",
    "vo.pyramid_levels",
    "vo.max_iterations",
    "stereo.num_samples",
    "stereo.interval",
    "planner.budget",
    "planner.arc_length",
    "planner.n_waypoints",
    "mission.dt",
    "mission.max_duration",
    "mission.emergency_duration",
    "collect.episodes",
    "collect.frames",
    "introspection.epochs",
)


def default_config() -> dict:
    return {k: v for k, (v, _) in DEFAULTS.items()}


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ValueError(f"unknown config key: {key!r}")
    default = DEFAULTS[key][0]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from e
    return raw


def validate(cfg: dict) -> dict:
    for k in cfg:
        if k not in DEFAULTS:
            raise ValueError(f"unknown config key: {k!r}")
    for k in _POSITIVE:
        if cfg[k] <= 0:
            raise ValueError(f"{k} must be positive, got {cfg[k]}")
    if cfg["world.density"] < 0:
        raise ValueError("world.density must be nonnegative")
    if not 0.0 < cfg["world.radius_min"] <= cfg["world.radius_max"]:
        raise ValueError("need 0 < world.radius_min <= world.radius_max")
    if not 0.0 < cfg["world.height_min"] <= cfg["world.height_max"]:
        raise ValueError("need 0 < world.height_min <= world.height_max")
    if not 0.0 <= cfg["collect.val_fraction"] < 1.0:
        raise ValueError("collect.val_fraction must lie in [0, 1)")
    if not 0.0 <= cfg["introspection.threshold"] <= 1.0:
        raise ValueError("introspection.threshold must lie in [0, 1]")
    grid = cfg["planner.n_curvatures"] * cfg["planner.n_slopes"] * cfg["planner.n_headings"]
    if cfg["planner.budget"] > grid:
        raise ValueError("planner.budget exceeds the dense library size")
    return cfg


def parse_config(text: str) -> dict:
    """Parse flat `key = value` text over the defaults; rejects unknown keys."""
    cfg = default_config()
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {ln}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        cfg[key.strip()] = _coerce(key.strip(), raw)
    return validate(cfg)


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply CLI `key=value` pairs on top of a parsed config."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw)
    return validate(out)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def canonical_text(cfg: dict) -> str:
    lines = [f"{k} = {_fmt_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()


# ---------- builders ----------


def world_extent(cfg: dict) -> tuple[float, float, float, float]:
    h = 0.5 * cfg["world.size"]
    return (-h, -h, h, h)


def make_camera(cfg: dict) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=cfg["camera.fx"],
        fy=cfg["camera.fy"],
        cx=cfg["camera.cx"],
        cy=cfg["camera.cy"],
        width=cfg["camera.width"],
        height=cfg["camera.height"],
    )


def make_setup(cfg: dict, build_lib: bool = True) -> MissionSetup:
    tracker = TrackerConfig(
        huber_delta=cfg["vo.huber_delta"],
        pyramid_levels=cfg["vo.pyramid_levels"],
        max_iterations=cfg["vo.max_iterations"],
        step_tol=cfg["vo.step_tol"],
        min_pixels=cfg["vo.min_pixels"],
        grad_percentile=cfg["vo.grad_percentile"],
    )
    stereo = StereoConfig(
        min_baseline=cfg["stereo.min_baseline"],
        num_samples=cfg["stereo.num_samples"],
        ssd_max=cfg["stereo.ssd_max"],
        d_max=cfg["stereo.d_max"],
    )
    policy = PerceptionPolicy(
        grad_percentile=cfg["vo.grad_percentile"],
        keyframe_px=cfg["perception.keyframe_px"],
        keyframe_overlap=cfg["perception.keyframe_overlap"],
        stereo_interval=cfg["stereo.interval"],
        fail_limit=cfg["perception.fail_limit"],
    )
    gains = ControlGains(
        kp=cfg["control.kp"],
        kd=cfg["control.kd"],
        kyaw=cfg["control.kyaw"],
        speed_limit=cfg["control.speed_limit"],
        yaw_rate_limit=cfg["control.yaw_rate_limit"],
    )
    weights = ScoreWeights(
        goal=cfg["planner.goal_weight"],
        collision=cfg["planner.collision_weight"],
        scale=cfg["planner.collision_scale"],
        truncation=cfg["planner.collision_truncation"],
    )
    library = None
    if build_lib:
        library = build_library(
            n_curvatures=cfg["planner.n_curvatures"],
            n_slopes=cfg["planner.n_slopes"],
            n_headings=cfg["planner.n_headings"],
            curvature_max=cfg["planner.curvature_max"],
            slope_max=cfg["planner.slope_max"],
            heading_max=cfg["planner.heading_max"],
            budget=cfg["planner.budget"],
            arc_length=cfg["planner.arc_length"],
            n_waypoints=cfg["planner.n_waypoints"],
        )
    return MissionSetup(
        cam=make_camera(cfg),
        tracker=tracker,
        stereo=stereo,
        policy=policy,
        gains=gains,
        weights=weights,
        flow=FlowConfig(),
        library=library,
    )


def make_mission_config(cfg: dict, introspection: bool = True) -> MissionConfig:
    return MissionConfig(
        dt=cfg["mission.dt"],
        max_duration=cfg["mission.max_duration"],
        altitude=cfg["mission.altitude"],
        goal_distance=cfg["mission.goal_distance"],
        goal_radius=cfg["mission.goal_radius"],
        lookahead=cfg["control.lookahead"],
        tau=cfg["control.tau"],
        crash_radius=cfg["mission.crash_radius"],
        reset_clearance=cfg["mission.reset_clearance"],
        max_interventions=cfg["mission.max_interventions"],
        threshold=cfg["introspection.threshold"],
        emergency_duration=cfg["mission.emergency_duration"],
        emergency_speed=cfg["mission.emergency_speed"],
        emergency_score_exit=cfg["mission.emergency_score_exit"],
        introspection=introspection,
        label_clearance=cfg["mission.label_clearance"],
    )


def make_collect_config(cfg: dict) -> CollectConfig:
    return CollectConfig(
        frames=cfg["collect.frames"],
        dt=cfg["mission.dt"],
        speed=cfg["collect.speed"],
        yaw_amplitude=cfg["collect.yaw_amplitude"],
        yaw_period=cfg["collect.yaw_period"],
        altitude=cfg["mission.altitude"],
        label_clearance=cfg["mission.label_clearance"],
        val_fraction=cfg["collect.val_fraction"],
        avoid_radius=cfg["collect.avoid_radius"],
        avoid_gain=cfg["collect.avoid_gain"],
    )


def make_predictor(cfg: dict, seed: int = 0) -> FailurePredictor:
    return FailurePredictor(
        epsilon=cfg["introspection.epsilon"],
        ridge=cfg["introspection.ridge"],
        epochs=cfg["introspection.epochs"],
        lr=cfg["introspection.lr"],
        lr_decay=cfg["introspection.lr_decay"],
        shuffle=cfg["introspection.shuffle"],
        seed=seed,
    )
