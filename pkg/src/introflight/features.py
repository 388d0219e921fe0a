"""Raw-image failure cues: block-matching flow and hand-crafted features.

The feature vector summarizes the newest frame (exposure, texture, blur,
contrast) and the recent motion field (stats over the last L flow fields).
Everything is deterministic; no learning happens here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEATURE_DIM = 64
FLOW_HISTORY = 4  # L flow fields -> L+1 frames per feature vector


@dataclass(frozen=True)
class FlowConfig:
    cell: int = 8  # px, fine-level cell edge
    search: int = 6  # px, +- full-resolution search radius
    coarse_stride: int = 2  # stage-1 offset stride
    flat_std: float = 0.01  # cells flatter than this are invalid
    max_cells: int = 4096


@dataclass
class FlowField:
    """Cell-grid displacement field in full-resolution pixels."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray
    cell: int


def _cell_sums(sq: np.ndarray, gh: int, gw: int, cell: int) -> np.ndarray:
    return sq[: gh * cell, : gw * cell].reshape(gh, cell, gw, cell).sum(axis=(1, 3))


def _shift_ssd(prev: np.ndarray, cur: np.ndarray, dy: int, dx: int, gh: int, gw: int, cell: int) -> np.ndarray:
    """Per-cell SSD of prev against cur shifted by (dy, dx); inf off-image."""
    H, W = prev.shape
    sq = np.full((H, W), np.inf)
    y0p, y1p = max(0, -dy), min(H, H - dy)
    x0p, x1p = max(0, -dx), min(W, W - dx)
    if y1p > y0p and x1p > x0p:
        a = prev[y0p:y1p, x0p:x1p]
        b = cur[y0p + dy : y1p + dy, x0p + dx : x1p + dx]
        sq[y0p:y1p, x0p:x1p] = (a - b) ** 2
    return _cell_sums(sq, gh, gw, cell)


def compute_flow(prev: np.ndarray, cur: np.ndarray, cfg: FlowConfig = FlowConfig()) -> FlowField:
    """Integer block-matching flow with parabolic subpixel refinement.

    Stage 1 scans a strided offset grid; stage 2 revisits the 3x3
    neighborhoods of the per-cell winners. Cells with too little texture or
    no fully-on-image match are invalid.
    """
    prev = np.asarray(prev, dtype=float)
    cur = np.asarray(cur, dtype=float)
    if prev.shape != cur.shape:
        raise ValueError("frame shapes differ")
    H, W = prev.shape
    cell = cfg.cell
    gh, gw = H // cell, W // cell
    if gh == 0 or gw == 0:
        raise ValueError("image smaller than one flow cell")

    r = cfg.search
    stride = max(1, cfg.coarse_stride)
    stage1 = [
        (dy, dx)
        for dy in range(-r, r + 1, stride)
        for dx in range(-r, r + 1, stride)
    ]
    if (0, 0) not in stage1:
        stage1.append((0, 0))
    ssd = {off: _shift_ssd(prev, cur, off[0], off[1], gh, gw, cell) for off in stage1}

    stack = np.stack([ssd[o] for o in stage1])
    best1 = np.argmin(stack, axis=0)
    wanted = set()
    for o_idx in np.unique(best1):
        oy, ox = stage1[o_idx]
        for ddy in (-1, 0, 1):
            for ddx in (-1, 0, 1):
                ny, nx = oy + ddy, ox + ddx
                if abs(ny) <= r + 1 and abs(nx) <= r + 1:
                    wanted.add((ny, nx))
    for off in wanted:
        if off not in ssd:
            ssd[off] = _shift_ssd(prev, cur, off[0], off[1], gh, gw, cell)

    offsets = sorted(ssd.keys())
    cube = np.stack([ssd[o] for o in offsets])  # (K, gh, gw)
    k_best = np.argmin(cube, axis=0)
    best_ssd = np.take_along_axis(cube, k_best[None], axis=0)[0]
    off_arr = np.array(offsets, dtype=float)
    flow_v = off_arr[k_best, 0]
    flow_u = off_arr[k_best, 1]

    # Parabolic refinement along each axis where the +-1 neighbors exist.
    key_to_idx = {o: i for i, o in enumerate(offsets)}
    for axis in (0, 1):
        lo = np.full((gh, gw), np.nan)
        hi = np.full((gh, gw), np.nan)
        for (oy, ox), i in key_to_idx.items():
            dn = (oy - 1, ox) if axis == 0 else (oy, ox - 1)
            up = (oy + 1, ox) if axis == 0 else (oy, ox + 1)
            mask = k_best == i
            if dn in key_to_idx:
                lo[mask] = cube[key_to_idx[dn]][mask]
            if up in key_to_idx:
                hi[mask] = cube[key_to_idx[up]][mask]
        denom = lo - 2.0 * best_ssd + hi
        ok = np.isfinite(lo) & np.isfinite(hi) & (denom > 1e-12)
        frac = np.zeros((gh, gw))
        frac[ok] = np.clip(0.5 * (lo[ok] - hi[ok]) / denom[ok], -0.5, 0.5)
        if axis == 0:
            flow_v = flow_v + frac
        else:
            flow_u = flow_u + frac

    block_std = prev[: gh * cell, : gw * cell].reshape(gh, cell, gw, cell).std(axis=(1, 3))
    valid = (block_std >= cfg.flat_std) & np.isfinite(best_ssd)
    return FlowField(flow_u, flow_v, valid, cell)


def _divergence_curl(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Finite-difference div and curl of the cell grid, px per cell."""
    du_dy, du_dx = np.gradient(flow.u)
    dv_dy, dv_dx = np.gradient(flow.v)
    return du_dx + dv_dy, dv_dx - du_dy


def _flow_stats(flow: FlowField) -> np.ndarray:
    """8 stats: mean u, mean v, std |f|, max |f|, mean div, mean curl,
    rotational fraction, valid fraction."""
    ok = flow.valid
    frac_valid = float(ok.mean()) if ok.size else 0.0
    if not np.any(ok):
        return np.array([0.0] * 7 + [frac_valid])
    u = flow.u[ok]
    v = flow.v[ok]
    mag = np.hypot(u, v)
    div, curl = _divergence_curl(flow)
    mean_div = float(div[ok].mean())
    mean_curl = float(curl[ok].mean())
    m_curl = float(np.abs(curl[ok]).mean())
    m_div = float(np.abs(div[ok]).mean())
    mean_vec = np.array([u.mean(), v.mean()])
    m_trans = float(np.linalg.norm(mean_vec))
    rot_frac = m_curl / (m_curl + m_div + m_trans + 1e-9)
    return np.array(
        [
            float(u.mean()),
            float(v.mean()),
            float(mag.std()),
            float(mag.max()),
            mean_div,
            mean_curl,
            rot_frac,
            frac_valid,
        ]
    )


def _pyramid_contrast(img: np.ndarray, levels: int = 5) -> np.ndarray:
    out = []
    cur = img
    for _ in range(levels):
        out.append(float(cur.std()))
        H, W = cur.shape
        if H < 2 or W < 2:
            out.extend([out[-1]] * (levels - len(out)))
            break
        cur = cur[: H // 2 * 2, : W // 2 * 2].reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3))
    return np.array(out[:levels])


def extract_features(frames: list[np.ndarray], flows: list[FlowField]) -> np.ndarray:
    """64-dim feature vector for the newest frame given its flow history.

    Layout: [0:16] intensity histogram (16 bins over [0,1], fractions);
    [16:24] gradient-magnitude histogram (8 bins over [0,0.5], overflow in
    the last bin); [24:26] saturation fractions at black/white; [26] mean
    absolute Laplacian (blur proxy, lower = blurrier); [27:32] intensity std
    at 5 pyramid levels; [32:64] = 8 flow stats per field for the L=4 most
    recent flow fields, oldest first.
    """
    if len(flows) != FLOW_HISTORY or len(frames) != FLOW_HISTORY + 1:
        raise ValueError(f"need {FLOW_HISTORY + 1} frames and {FLOW_HISTORY} flow fields")
    img = np.asarray(frames[-1], dtype=float)

    hist, _ = np.histogram(img, bins=16, range=(0.0, 1.0))
    hist = hist / img.size

    gy, gx = np.gradient(img)
    gmag = np.clip(np.hypot(gx, gy), 0.0, 0.5 - 1e-12)
    ghist, _ = np.histogram(gmag, bins=8, range=(0.0, 0.5))
    ghist = ghist / img.size

    sat_lo = float((img <= 1.0 / 255.0).mean())
    sat_hi = float((img >= 1.0 - 1.0 / 255.0).mean())

    lap = (
        -4.0 * img[1:-1, 1:-1]
        + img[:-2, 1:-1]
        + img[2:, 1:-1]
        + img[1:-1, :-2]
        + img[1:-1, 2:]
    )
    blur_proxy = float(np.abs(lap).mean()) if lap.size else 0.0

    spatial = np.concatenate([hist, ghist, [sat_lo, sat_hi, blur_proxy], _pyramid_contrast(img)])
    temporal = np.concatenate([_flow_stats(f) for f in flows])
    feat = np.concatenate([spatial, temporal])
    if feat.shape != (FEATURE_DIM,):
        raise AssertionError(f"feature layout produced {feat.shape}")
    return feat
