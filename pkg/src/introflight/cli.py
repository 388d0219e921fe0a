"""Command-line entry point.

Subcommands: collect | train | eval | fly | compare. Global flags --config,
--seed, --out. Every run directory receives a config snapshot (config.txt)
and a manifest (manifest.json) holding the config hash; the manifest is the
only output containing a timestamp, so reruns with the same config and seed
reproduce everything else byte for byte.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

Degradation profiles are either the built-in names "clean" and "heavy" or a
flat text file:

    exposure_gain = 3.0
    blur_length = 9
    noise_sigma = 0.08
    rotation_spike = 1.2
    window = 1.5 2.0 blur
    window = 4.5 2.0 noise

Each window line is `start_seconds duration_seconds kind` with kinds
exposure | blur | noise | rotation.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .evalharness import (
    ScoredInstance,
    baseline_curve,
    chance_curve,
    compare as compare_curves,
    oracle_curve,
    ram_curve,
)
from .io import (
    load_dataset,
    load_model,
    save_aucs,
    save_curves,
    save_dataset,
    save_episode_csv,
    save_library,
    save_model,
    save_world,
    write_pgm,
)
from .mission import EpisodeLog, generate_dataset, intervention_metric, run_episode
from .world import DegradationProfile, generate_forest

DENSITY_LOW = 1.0 / 144.0  # one tree per 12 m x 12 m
DENSITY_HIGH = 1.0 / 36.0  # one tree per 6 m x 6 m

BUILTIN_PROFILES = {
    "clean": DegradationProfile(),
    "heavy": DegradationProfile(
        exposure_gain=3.0,
        blur_length=9,
        noise_sigma=0.08,
        rotation_spike=1.2,
        schedule=(
            (1.5, 2.0, "blur"),
            (4.5, 2.0, "noise"),
            (7.5, 1.5, "exposure"),
            (10.0, 1.2, "rotation"),
        ),
    ),
}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors by default; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_profile_text(text: str) -> DegradationProfile:
    params = {"exposure_gain": 1.0, "blur_length": 1, "noise_sigma": 0.0, "rotation_spike": 0.0}
    windows = []
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"profile line {ln}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key == "window":
            parts = raw.split()
            if len(parts) != 3:
                raise ValueError(f"profile line {ln}: window needs 'start duration kind'")
            windows.append((float(parts[0]), float(parts[1]), parts[2]))
        elif key in params:
            params[key] = int(raw) if key == "blur_length" else float(raw)
        else:
            raise ValueError(f"profile line {ln}: unknown key {key!r}")
    return DegradationProfile(schedule=tuple(windows), **params)


def load_profile(arg: str) -> DegradationProfile:
    if arg in BUILTIN_PROFILES:
        return BUILTIN_PROFILES[arg]
    p = Path(arg)
    if not p.exists():
        raise ValueError(f"profile {arg!r} is neither a built-in name nor a file")
    return parse_profile_text(p.read_text())


def parse_density(arg: str) -> float:
    if arg == "low":
        return DENSITY_LOW
    if arg == "high":
        return DENSITY_HIGH
    try:
        value = float(arg)
    except ValueError as e:
        raise ValueError(f"density must be 'low', 'high', or a number, got {arg!r}") from e
    if value < 0:
        raise ValueError("density must be nonnegative")
    return value


def _resolve_config(args) -> dict:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "density", None) is not None:
        overrides.append(f"world.density={parse_density(args.density)!r}")
    if getattr(args, "budget", None) is not None:
        overrides.append(f"planner.budget={args.budget}")
    if getattr(args, "library_size", None) is not None:
        parts = args.library_size.lower().split("x")
        if len(parts) != 3:
            raise ValueError("--library-size must look like 7x7x49")
        overrides.append(f"planner.n_curvatures={int(parts[0])}")
        overrides.append(f"planner.n_slopes={int(parts[1])}")
        overrides.append(f"planner.n_headings={int(parts[2])}")
    return cfgmod.apply_overrides(cfg, overrides)


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_metadata(out: Path, command: str, cfg: dict, args, extra: dict) -> None:
    (out / "config.txt").write_text(cfgmod.canonical_text(cfg))
    manifest = {
        "command": command,
        "config_hash": cfgmod.config_hash(cfg),
        "seed": int(args.seed),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _make_worlds(cfg: dict, n: int, seed: int):
    extent = cfgmod.world_extent(cfg)
    return [
        generate_forest(
            cfg["world.density"],
            extent,
            seed + 17 * i,
            (cfg["world.radius_min"], cfg["world.radius_max"]),
            (cfg["world.height_min"], cfg["world.height_max"]),
            cfg["world.min_gap"],
        )
        for i in range(n)
    ]


def _archive_frames(ep_dir: Path, frames: list[np.ndarray], dt: float) -> None:
    ep_dir.mkdir(parents=True, exist_ok=True)
    index = ["frame,time,file"]
    for k, img in enumerate(frames):
        name = f"frame_{k:04d}.pgm"
        write_pgm(ep_dir / name, img)
        index.append(f"{k},{repr(float(k * dt))},{name}")
    (ep_dir / "index.csv").write_text("\n".join(index) + "\n")


# ---------- subcommands ----------


def cmd_collect(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    profile = load_profile(args.profile)
    episodes = args.episodes if args.episodes is not None else cfg["collect.episodes"]
    if episodes < 1:
        raise ValueError("--episodes must be at least 1")
    setup = cfgmod.make_setup(cfg)
    ccfg = cfgmod.make_collect_config(cfg)
    worlds = _make_worlds(cfg, episodes, args.seed)
    records, archives = generate_dataset(worlds, [profile] * episodes, setup, ccfg, args.seed)
    from .features import FEATURE_DIM

    save_dataset(out / "dataset.csv", records, FEATURE_DIM)
    for ep, (world, frames) in enumerate(zip(worlds, archives)):
        ep_dir = out / f"episode_{ep:03d}"
        _archive_frames(ep_dir, frames, ccfg.dt)
        save_world(ep_dir / "world.txt", world)
    if args.dump_library:
        save_library(out / "library.txt", setup.get_library())
    _write_run_metadata(out, "collect", cfg, args, {"episodes": episodes, "records": len(records)})
    print(f"collect: {episodes} episodes, {len(records)} records -> {out / 'dataset.csv'}")
    return 0


def _split_arrays(records, split: str):
    rows = [r for r in records if split == "all" or r["split"] == split]
    if not rows:
        raise ValueError(f"no rows in split {split!r}")
    X = np.stack([r["features"] for r in rows])
    y = np.array([r["target"] for r in rows])
    return rows, X, y


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    records = load_dataset(args.data)
    _, X_tr, y_tr = _split_arrays(records, "train")
    model = cfgmod.make_predictor(cfg, args.seed)
    model.fit(X_tr, y_tr)
    save_model(out / "model.bin", model)
    lines = [f"train rows: {len(y_tr)}"]
    rmse_tr = float(np.sqrt(np.mean((model.predict(X_tr) - y_tr) ** 2)))
    lines.append(f"train rmse: {rmse_tr:.4f}")
    try:
        _, X_va, y_va = _split_arrays(records, "val")
        rmse_va = float(np.sqrt(np.mean((model.predict(X_va) - y_va) ** 2)))
        lines.append(f"val rows: {len(y_va)}")
        lines.append(f"val rmse: {rmse_va:.4f}")
    except ValueError:
        pass
    (out / "train_report.txt").write_text("\n".join(lines) + "\n")
    _write_run_metadata(out, "train", cfg, args, {"data": str(args.data), "rows": len(y_tr)})
    print("\n".join(lines))
    print(f"train: model -> {out / 'model.bin'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    records = load_dataset(args.data)
    model = load_model(args.model)
    rows, X, _y = _split_arrays(records, args.split)
    scores = model.predict(X)
    scores = np.atleast_1d(scores)
    instances = [
        ScoredInstance(
            uid=i,
            reliability=1.0 - float(scores[i]),
            true_error=float(r["true_error"]),
            uncertainty=float(r["mean_depth_variance"]),
        )
        for i, r in enumerate(rows)
    ]
    curves = [
        ram_curve(instances, label="model"),
        baseline_curve(instances),
        oracle_curve(instances),
        chance_curve(instances),
    ]
    report = compare_curves(curves)
    save_curves(out / "curves.csv", curves)
    save_aucs(out / "aucs.csv", report.aucs, report.auc_ratio_vs_chance)
    _write_run_metadata(
        out, "eval", cfg, args, {"data": str(args.data), "model": str(args.model), "rows": len(rows)}
    )
    for label, auc in report.aucs.items():
        ratio = report.auc_ratio_vs_chance.get(label)
        extra = f"  ({ratio:.3f} x chance)" if ratio is not None else ""
        print(f"auc[{label}] = {auc:.6f}{extra}")
    print(f"eval: curves -> {out / 'curves.csv'}")
    return 0


def _fly_once(cfg, setup, profile, model, introspection, seed, frame_sink=None) -> EpisodeLog:
    world = _make_worlds(cfg, 1, seed)[0]
    mcfg = cfgmod.make_mission_config(cfg, introspection=introspection)
    return run_episode(world, profile, model, setup, mcfg, seed, frame_sink)


def cmd_fly(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    profile = load_profile(args.profile)
    introspection = args.introspection == "on"
    model = None
    if introspection:
        if args.model is None:
            raise ValueError("fly --introspection on requires --model")
        model = load_model(args.model)
    episodes = args.episodes if args.episodes is not None else 1
    if episodes < 1:
        raise ValueError("--episodes must be at least 1")
    setup = cfgmod.make_setup(cfg)
    if args.dump_library:
        save_library(out / "library.txt", setup.get_library())
    summary = ["episode,seed,distance,interventions,alerts,goal_reached,frames"]
    for ep in range(episodes):
        seed = args.seed + 1013 * ep
        sink: list | None = [] if args.save_frames else None
        log = _fly_once(cfg, setup, profile, model, introspection, seed, sink)
        save_episode_csv(out / f"episode_{ep:03d}.csv", log)
        if sink is not None:
            _archive_frames(out / f"episode_{ep:03d}", sink, cfg["mission.dt"])
        summary.append(
            f"{ep},{seed},{repr(log.distance)},{len(log.interventions)},"
            f"{log.alerts},{int(log.goal_reached)},{len(log.records)}"
        )
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
    _write_run_metadata(
        out, "fly", cfg, args, {"episodes": episodes, "introspection": args.introspection}
    )
    print("\n".join(summary))
    print(f"fly: logs -> {out}")
    return 0


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(args)
    profile = load_profile(args.profile)
    model = load_model(args.model)
    episodes = args.episodes if args.episodes is not None else 6
    if episodes < 1:
        raise ValueError("--episodes must be at least 1")
    setup = cfgmod.make_setup(cfg)
    rows = ["seed,distance_on,interventions_on,distance_off,interventions_off"]
    logs_on: list[EpisodeLog] = []
    logs_off: list[EpisodeLog] = []
    for ep in range(episodes):
        seed = args.seed + 1013 * ep
        lon = _fly_once(cfg, setup, profile, model, True, seed)
        loff = _fly_once(cfg, setup, profile, None, False, seed)
        logs_on.append(lon)
        logs_off.append(loff)
        rows.append(
            f"{seed},{repr(lon.distance)},{len(lon.interventions)},"
            f"{repr(loff.distance)},{len(loff.interventions)}"
        )
    m_on = intervention_metric(logs_on)
    m_off = intervention_metric(logs_off)
    ratio = m_on / m_off if m_off > 0 else float("inf")
    rows.append(f"aggregate,{repr(m_on)},,{repr(m_off)},")
    (out / "compare.csv").write_text("\n".join(rows) + "\n")
    report = [
        f"paired seeds: {episodes}",
        f"distance per intervention, introspection on: {m_on:.2f} m",
        f"distance per intervention, introspection off: {m_off:.2f} m",
        f"ratio: {ratio:.3f}",
    ]
    (out / "compare_report.txt").write_text("\n".join(report) + "\n")
    _write_run_metadata(out, "compare", cfg, args, {"episodes": episodes})
    print("\n".join(report))
    return 0


# ---------- parser wiring ----------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _add_world_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--density", default=None, help="trees per square meter, or 'low'/'high'")
    p.add_argument("--profile", default="clean", help="degradation profile: built-in name or file")
    p.add_argument("--budget", type=int, default=None, help="trajectory budget override")
    p.add_argument(
        "--library-size",
        dest="library_size",
        default=None,
        metavar="CxSxH",
        help="dense library grid override, e.g. 7x7x49",
    )
    p.add_argument("--dump-library", action="store_true", help="also write library.txt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="introflight", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[], help="scripted sweeps -> training dataset")
    _add_common(p)
    _add_world_opts(p)
    p.add_argument("--episodes", type=int, default=None, help="number of scripted sweeps")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="fit the failure predictor on a dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset.csv from collect")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retained-error curves for a trained model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset.csv from collect")
    p.add_argument("--model", required=True, help="model.bin from train")
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fly", help="closed-loop goal-directed episodes")
    _add_common(p)
    _add_world_opts(p)
    p.add_argument("--episodes", type=int, default=None, help="number of episodes")
    p.add_argument("--model", default=None, help="model.bin from train")
    p.add_argument("--introspection", choices=("on", "off"), default="on")
    p.add_argument("--save-frames", action="store_true", help="archive every frame as PGM")
    p.set_defaults(func=cmd_fly)

    p = sub.add_parser("compare", help="paired-seed flights with and without gating")
    _add_common(p)
    _add_world_opts(p)
    p.add_argument("--episodes", type=int, default=None, help="number of seed pairs")
    p.add_argument("--model", required=True, help="model.bin from train")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"introflight: validation error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - the contract maps everything else to 3
        print(f"introflight: runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
