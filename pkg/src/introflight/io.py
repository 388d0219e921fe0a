"""On-disk formats: PGM frames, world text, depth/model binaries, CSVs.

Everything here is byte-deterministic for fixed inputs: floats are written
with repr-style shortest round-trip formatting and binary formats are
little-endian with fixed headers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .introspection import FailurePredictor, make_fitted_predictor
from .vo import InverseDepthMap
from .world import ForestWorld

MODEL_MAGIC = b"IFPM"
MODEL_VERSION = 1
DEPTH_VERSION = 1


def _fmt(x: float) -> str:
    """Shortest round-trip decimal for a float64."""
    return repr(float(x))


# ---------- PGM (P5, 8-bit) ----------


def write_pgm(path, img: np.ndarray) -> None:
    """Intensity in [0, 1] quantized to 8 bits; inspection format only."""
    arr = np.asarray(img, dtype=float)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    H, W = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Returns intensities scaled back to [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    # Header: magic, width, height, maxval, separated by whitespace.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    W, H, maxval = fields
    img = np.frombuffer(data[pos : pos + W * H], dtype=np.uint8).reshape(H, W)
    return img.astype(float) / float(maxval)


# ---------- world ----------


def save_world(path, world: ForestWorld) -> None:
    """One tree per line: x y radius height. Extent and seed in comments."""
    lines = [f"# extent {' '.join(_fmt(e) for e in world.extent)}", f"# texture_seed {world.texture_seed}"]
    for x, y, r, h in world.trees:
        lines.append(f"{_fmt(x)} {_fmt(y)} {_fmt(r)} {_fmt(h)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_world(path) -> ForestWorld:
    extent = (0.0, 0.0, 0.0, 0.0)
    seed = 0
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "extent":
                extent = tuple(float(p) for p in parts[1:5])
            elif parts and parts[0] == "texture_seed":
                seed = int(parts[1])
            continue
        vals = [float(p) for p in line.split()]
        if len(vals) != 4:
            raise ValueError(f"bad world line: {line!r}")
        rows.append(vals)
    return ForestWorld(np.array(rows, dtype=float).reshape(-1, 4), extent, seed)


# ---------- depth map dump ----------


def save_depth(path, depth: InverseDepthMap, flags: int = 0) -> None:
    """16-byte header (width, height, version, flags as uint32 LE), then
    per-pixel records (d float64, var float64, valid uint8), row-major."""
    H, W = depth.d.shape
    rec = np.zeros(H * W, dtype=np.dtype([("d", "<f8"), ("var", "<f8"), ("valid", "u1")]))
    rec["d"] = depth.d.ravel()
    rec["var"] = depth.var.ravel()
    rec["valid"] = depth.valid.ravel().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack("<IIII", W, H, DEPTH_VERSION, flags))
        f.write(rec.tobytes())


def load_depth(path) -> InverseDepthMap:
    data = Path(path).read_bytes()
    W, H, version, _flags = struct.unpack("<IIII", data[:16])
    if version != DEPTH_VERSION:
        raise ValueError(f"unsupported depth dump version {version}")
    rec = np.frombuffer(data[16:], dtype=np.dtype([("d", "<f8"), ("var", "<f8"), ("valid", "u1")]))
    if len(rec) != W * H:
        raise ValueError("truncated depth dump")
    return InverseDepthMap(
        rec["d"].reshape(H, W).copy(),
        rec["var"].reshape(H, W).copy(),
        rec["valid"].reshape(H, W).astype(bool),
    )


# ---------- model file ----------


def save_model(path, model: FailurePredictor, flow_history: int = 4) -> None:
    """Flat little-endian float64 payload after a (magic, version, d, L) header."""
    d = int(model.n_features_in_)
    payload = np.concatenate(
        [
            model.feature_mean_,
            model.feature_scale_,
            model.weights_,
            [model.bias_, model.calib_gain_, model.calib_offset_],
        ]
    ).astype("<f8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<III", MODEL_VERSION, d, flow_history))
        f.write(payload.tobytes())


def load_model(path) -> FailurePredictor:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError("not a model file (bad magic)")
    version, d, _L = struct.unpack("<III", data[4:16])
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    vals = np.frombuffer(data[16:], dtype="<f8")
    if len(vals) != 3 * d + 3:
        raise ValueError("model payload size mismatch")
    mean, scale, w = vals[:d], vals[d : 2 * d], vals[2 * d : 3 * d]
    b, a, c = vals[3 * d : 3 * d + 3]
    return make_fitted_predictor(mean.copy(), scale.copy(), w.copy(), b, a, c)


# ---------- dataset ----------

DATASET_META = ["episode", "frame", "split", "target", "true_error", "mean_depth_variance"]


def save_dataset(path, records: list[dict], feature_dim: int) -> None:
    """CSV-style text: episode, frame, split, target, true_error,
    mean_depth_variance, then the feature floats."""
    cols = DATASET_META + [f"f{i:02d}" for i in range(feature_dim)]
    lines = [",".join(cols)]
    for r in records:
        feats = r["features"]
        vals = [
            str(int(r["episode"])),
            str(int(r["frame"])),
            r["split"],
            _fmt(r["target"]),
            _fmt(r["true_error"]),
            _fmt(r["mean_depth_variance"]),
        ] + [_fmt(v) for v in feats]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError("empty dataset file")
    header = lines[0].split(",")
    n_meta = len(DATASET_META)
    if header[:n_meta] != DATASET_META:
        raise ValueError("unrecognized dataset header")
    out = []
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split(",")
        out.append(
            {
                "episode": int(parts[0]),
                "frame": int(parts[1]),
                "split": parts[2],
                "target": float(parts[3]),
                "true_error": float(parts[4]),
                "mean_depth_variance": float(parts[5]),
                "features": np.array([float(v) for v in parts[n_meta:]]),
            }
        )
    return out


def save_library(path, library) -> None:
    """Budgeted trajectory dump: one per line, parameters then waypoints.

    Each line holds curvature, slope, heading, then the 3n flattened
    waypoint coordinates, space separated.
    """
    lines = []
    for i in library.budgeted:
        t = library.trajectories[int(i)]
        vals = [t.curvature, t.slope, t.heading] + [float(v) for v in t.waypoints.reshape(-1)]
        lines.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------- curves and episode logs ----------


def save_curves(path, curves) -> None:
    """Long-form CSV: fr,error,label — one row per curve point."""
    lines = ["fr,error,label"]
    for c in curves:
        for f, e in zip(c.fr, c.error):
            lines.append(f"{_fmt(f)},{_fmt(e)},{c.label}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_aucs(path, aucs: dict, ratios: dict) -> None:
    lines = ["label,auc,ratio_vs_chance"]
    for label in aucs:
        ratio = ratios.get(label, float("nan"))
        lines.append(f"{label},{_fmt(aucs[label])},{_fmt(ratio)}")
    Path(path).write_text("\n".join(lines) + "\n")


EPISODE_HEADER = "time,x,y,z,score,mode,traj_id,y_i,intervention"


def save_episode_csv(path, log) -> None:
    """Per-frame flight record; empty fields where a value was not computed."""
    lines = [EPISODE_HEADER]
    for r in log.records:
        score = _fmt(r.score) if r.score is not None else ""
        traj = str(r.traj_id) if r.traj_id is not None else ""
        y = _fmt(r.y_agreement) if r.y_agreement is not None else ""
        lines.append(
            f"{_fmt(r.time)},{_fmt(r.position[0])},{_fmt(r.position[1])},{_fmt(r.position[2])},"
            f"{score},{r.mode},{traj},{y},{int(r.intervention)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
