"""Procedural forest world: generation, ray-cast rendering, degradations.

The world is a ground plane at z=0 plus vertical cylinders (trees). Rendering
is exact ray casting per pixel; surface intensity comes from seeded 3-D value
noise evaluated at the hit point, so identical inputs always produce identical
images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter1d

from .geometry import CameraIntrinsics, Pose

SKY_INTENSITY = 0.85
_RAY_EPS = 1e-9

# splitmix64-style mixing constants for the lattice hash.
_H1 = np.uint64(0x9E3779B97F4A7C15)
_H2 = np.uint64(0xBF58476D1CE4E5B9)
_H3 = np.uint64(0x94D049BB133111EB)
_PX = np.uint64(0x8DA6B343EC53F6FD)
_PY = np.uint64(0xD8163841E869A8C1)
_PZ = np.uint64(0xCB1AB31F68D2F317)


@dataclass(frozen=True)
class ForestWorld:
    """Trees as rows (x, y, radius, height); extent (xmin, ymin, xmax, ymax)."""

    trees: np.ndarray
    extent: tuple[float, float, float, float]
    texture_seed: int = 0

    def __post_init__(self):
        t = np.asarray(self.trees, dtype=float).reshape(-1, 4)
        object.__setattr__(self, "trees", t)
        if len(self.extent) != 4:
            raise ValueError("extent must be (xmin, ymin, xmax, ymax)")
        if t.size and (np.any(t[:, 2] <= 0.0) or np.any(t[:, 3] <= 0.0)):
            raise ValueError("tree radii and heights must be positive")


def generate_forest(
    density: float,
    extent: tuple[float, float, float, float],
    seed: int,
    radius_range: tuple[float, float] = (0.15, 0.45),
    height_range: tuple[float, float] = (6.0, 12.0),
    min_gap: float = 0.3,
) -> ForestWorld:
    """Seeded forest with expected tree count density * area.

    The count is Poisson-distributed; placement is uniform with rejection of
    overlapping footprints (circle-circle, padded by min_gap). Raises if the
    requested density cannot be placed.
    """
    xmin, ymin, xmax, ymax = extent
    area = (xmax - xmin) * (ymax - ymin)
    if area <= 0.0:
        raise ValueError("extent has non-positive area")
    if density < 0.0:
        raise ValueError("density must be non-negative")
    rng = np.random.default_rng(seed)
    count = int(rng.poisson(density * area))
    rows = []
    attempts = 0
    max_attempts = 200 * max(count, 1)
    while len(rows) < count:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError("density infeasible: could not place trees without overlap")
        x = rng.uniform(xmin, xmax)
        y = rng.uniform(ymin, ymax)
        r = rng.uniform(*radius_range)
        h = rng.uniform(*height_range)
        ok = True
        for tx, ty, tr, _ in rows:
            if (x - tx) ** 2 + (y - ty) ** 2 < (r + tr + min_gap) ** 2:
                ok = False
                break
        if ok:
            rows.append((x, y, r, h))
    trees = np.array(rows, dtype=float).reshape(-1, 4)
    return ForestWorld(trees=trees, extent=tuple(float(e) for e in extent), texture_seed=seed)


def _mix64(h: np.ndarray) -> np.ndarray:
    h = (h ^ (h >> np.uint64(30))) * _H2
    h = (h ^ (h >> np.uint64(27))) * _H3
    return h ^ (h >> np.uint64(31))


def _lattice01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: np.uint64) -> np.ndarray:
    """Hash integer lattice coordinates to floats in [0, 1).

    seed must already be mixed (see value_noise); array arithmetic wraps
    modulo 2^64 by construction.
    """
    h = ix.astype(np.int64).view(np.uint64) * _PX
    h = h ^ (iy.astype(np.int64).view(np.uint64) * _PY)
    h = h ^ (iz.astype(np.int64).view(np.uint64) * _PZ)
    h = _mix64(h + seed)
    return h.astype(np.float64) * (1.0 / 2.0**64)


def value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Single-octave 3-D value noise in [0, 1): trilinear lattice blend."""
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    sd = np.uint64((int(seed) % (2**64)) * 0x9E3779B97F4A7C15 % (2**64))
    base = np.floor(p)
    f = p - base
    # Smoothstep fade for C1 continuity across cells.
    t = f * f * (3.0 - 2.0 * f)
    ix, iy, iz = base[:, 0].astype(np.int64), base[:, 1].astype(np.int64), base[:, 2].astype(np.int64)
    out = np.zeros(len(p))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1.0 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1.0 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1.0 - t[:, 2]
                corner = _lattice01(ix + dx, iy + dy, iz + dz, sd)
                out += wx * wy * wz * corner
    return out[0] if single else out


def fractal_noise(
    points: np.ndarray,
    seed: int,
    octaves: int = 3,
    lacunarity: float = 2.0,
    gain: float = 0.5,
    base_frequency: float = 1.0,
    footprint: np.ndarray | None = None,
    band: tuple[float, float] = (2.0, 4.0),
) -> np.ndarray:
    """Multi-octave value noise normalized to [0, 1).

    footprint, when given, is the per-point sample spacing in the same units
    as points: octaves fade linearly toward their mean between band[1] and
    band[0] samples per wavelength and vanish below band[0]. The band sits
    just above Nyquist: because the fade weight depends on viewing distance,
    a wide fade region would make surface appearance drift as the camera
    approaches, so only content the pixel grid genuinely cannot carry is
    faded and everything else passes at full, distance-independent weight.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    total = np.zeros(len(p))
    amp, freq, norm = 1.0, base_frequency, 0.0
    fp = None if footprint is None else np.broadcast_to(np.asarray(footprint, dtype=float), (len(p),))
    for k in range(octaves):
        n = value_noise(p * freq, seed + 101 * k)
        if fp is not None:
            samples_per_wavelength = 1.0 / np.maximum(freq * fp, 1e-12)
            lo, hi = band
            w = np.clip((samples_per_wavelength - lo) / (hi - lo), 0.0, 1.0)
            n = w * n + (1.0 - w) * 0.5
        total += amp * n
        norm += amp
        amp *= gain
        freq *= lacunarity
    out = total / norm
    return out[0] if np.asarray(points).ndim == 1 else out


def _surface_intensity(
    points: np.ndarray,
    seed: int,
    scale: float = 0.5,
    footprint: np.ndarray | None = None,
    band: tuple[float, float] = (2.0, 4.0),
) -> np.ndarray:
    """Deterministic texture for hit points on any non-sky surface.

    footprint is the per-point sample spacing in meters (pixel size projected
    onto the surface); detail finer than the band limit fades toward the
    texture mean, exactly like area sampling would.
    """
    fp = None if footprint is None else np.asarray(footprint, dtype=float) * scale
    n = fractal_noise(np.asarray(points, dtype=float) * scale, seed, footprint=fp, band=band)
    return np.clip(0.2 + 0.6 * n, 0.0, 1.0)


def _ray_depths(
    world: ForestWorld, o: np.ndarray, dirs: np.ndarray, max_distance: float
) -> np.ndarray:
    """Depth along each ray (z component 1), np.inf where the ray escapes."""
    n = dirs.shape[0]
    depth = np.full(n, np.inf)

    # Ground plane z = 0: o_z + t*d_z = 0.
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = -o[2] / dz
    hit_g = (dz < -_RAY_EPS) & (t_ground > _RAY_EPS) & (t_ground <= max_distance)
    depth[hit_g] = t_ground[hit_g]

    # Trees: solve the xy quadratic per pruned cylinder.
    if len(world.trees):
        centers = world.trees[:, :2]
        radii = world.trees[:, 2]
        heights = world.trees[:, 3]
        rel = centers - o[:2]
        horiz = np.hypot(rel[:, 0], rel[:, 1])
        # Forward direction in the horizontal plane (mean ray direction).
        fwd = dirs.mean(axis=0)[:2]
        nf = np.linalg.norm(fwd)
        if nf > 0.0:
            fwd = fwd / nf
            ahead = rel @ fwd > -(radii + 1.0)
        else:
            ahead = np.ones(len(radii), dtype=bool)
        near = horiz <= max_distance + radii
        for cx_, cy_, r_, h_ in world.trees[near & ahead]:
            ox, oy = o[0] - cx_, o[1] - cy_
            dx, dy = dirs[:, 0], dirs[:, 1]
            a = dx * dx + dy * dy
            b = 2.0 * (ox * dx + oy * dy)
            c = ox * ox + oy * oy - r_ * r_
            disc = b * b - 4.0 * a * c
            valid = (disc >= 0.0) & (a > _RAY_EPS)
            if not np.any(valid):
                continue
            sq = np.sqrt(np.where(valid, disc, 0.0))
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-b - sq) / (2.0 * a)
                t2 = (-b + sq) / (2.0 * a)
            for t in (t1, t2):
                z_hit = o[2] + t * dirs[:, 2]
                ok = valid & (t > _RAY_EPS) & (t < depth) & (z_hit >= 0.0) & (z_hit <= h_)
                depth[ok] = t[ok]
    return depth


def _shade(
    world: ForestWorld, o: np.ndarray, dirs: np.ndarray, depth: np.ndarray, fx: float
) -> np.ndarray:
    """Texture lookup for ray hits. fx sets the footprint for band-limiting:
    pass the FINAL image's focal length even when shading a supersampled
    grid, so the averaged-down image carries only content the final pixel
    pitch can represent."""
    intensity = np.full(dirs.shape[0], SKY_INTENSITY)
    hit = np.isfinite(depth)
    if np.any(hit):
        pts = o + depth[hit, None] * dirs[hit]
        # One final-image pixel spans roughly depth/fx meters on the surface.
        footprint = depth[hit] / fx
        intensity[hit] = _surface_intensity(pts, world.texture_seed, footprint=footprint)
    return intensity


def render(
    world: ForestWorld,
    pose: Pose,
    cam: CameraIntrinsics,
    max_distance: float = 60.0,
    supersample: int = 2,
    psf_sigma: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast the world from a camera pose.

    Returns (intensity, depth): intensity in [0, 1], depth measured along the
    optical axis with np.inf where the ray escapes to the sky. Exact
    ray/cylinder and ray/plane intersection; no approximation beyond float64.
    Intensity is area-sampled: rendered on a supersample-times finer grid and
    box-averaged, so the image a subpixel warp interpolates stays consistent
    between nearby views. psf_sigma > 0 adds a Gaussian point-spread blur
    (in final-pixel units) on the fine grid before averaging; blur applied
    identically to every view suppresses near-Nyquist content that spline
    interpolation reconstructs poorly, without breaking brightness constancy.
    Depth stays a single exact center-ray cast.
    """
    H, W = cam.height, cam.width
    o = pose.translation
    dirs = cam.ray_directions().reshape(-1, 3) @ pose.rotation.T
    depth = _ray_depths(world, o, dirs, max_distance)
    s = max(1, int(supersample))
    if s == 1:
        intensity = _shade(world, o, dirs, depth, cam.fx)
        img = intensity.reshape(H, W)
        if psf_sigma > 0.0:
            img = gaussian_filter(img, psf_sigma, mode="nearest")
        return img, depth.reshape(H, W)
    cam_hi = CameraIntrinsics(
        cam.fx * s,
        cam.fy * s,
        cam.cx * s + (s - 1) / 2.0,
        cam.cy * s + (s - 1) / 2.0,
        W * s,
        H * s,
    )
    dirs_hi = cam_hi.ray_directions().reshape(-1, 3) @ pose.rotation.T
    depth_hi = _ray_depths(world, o, dirs_hi, max_distance)
    intensity_hi = _shade(world, o, dirs_hi, depth_hi, cam.fx).reshape(H * s, W * s)
    if psf_sigma > 0.0:
        intensity_hi = gaussian_filter(intensity_hi, psf_sigma * s, mode="nearest")
    intensity = intensity_hi.reshape(H, s, W, s).mean(axis=(1, 3))
    return intensity, depth.reshape(H, W)


def obstacle_clearance(world: ForestWorld, points: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest solid (trees or ground).

    Zero inside a tree or below ground. Trees are solid capped cylinders.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.maximum(p[:, 2], 0.0)  # ground plane
    if len(world.trees):
        dxy = np.hypot(
            p[:, 0, None] - world.trees[None, :, 0],
            p[:, 1, None] - world.trees[None, :, 1],
        )
        radial = np.maximum(dxy - world.trees[None, :, 2], 0.0)
        above = np.maximum(p[:, 2, None] - world.trees[None, :, 3], 0.0)
        tree_d = np.hypot(radial, above).min(axis=1)
        d = np.minimum(d, tree_d)
    out = np.maximum(d, 0.0)
    return out if np.asarray(points).ndim > 1 else float(out[0])


@dataclass(frozen=True)
class DegradationProfile:
    """Scheduled post-render degradations.

    schedule entries are (start_s, duration_s, kind); kinds: "exposure",
    "blur", "noise", "rotation". Windows must not overlap. "rotation" leaves
    the image untouched; the mission layer reads it as a yaw-rate disturbance.
    """

    exposure_gain: float = 1.0
    blur_length: int = 1
    noise_sigma: float = 0.0
    rotation_spike: float = 0.0
    schedule: tuple = field(default_factory=tuple)

    def __post_init__(self):
        sched = tuple((float(s), float(d), str(k)) for s, d, k in self.schedule)
        object.__setattr__(self, "schedule", sched)
        kinds = {"exposure", "blur", "noise", "rotation"}
        for s, d, k in sched:
            if k not in kinds:
                raise ValueError(f"unknown degradation kind: {k}")
            if d <= 0.0:
                raise ValueError("window duration must be positive")
        spans = sorted((s, s + d) for s, d, _ in sched)
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 < a1 - 1e-12:
                raise ValueError("degradation windows overlap")


def active_degradation(profile: DegradationProfile, t: float) -> str | None:
    """Kind active at time t, or None. Windows are [start, start+duration)."""
    for s, d, k in profile.schedule:
        if s <= t < s + d:
            return k
    return None


def degrade(img: np.ndarray, profile: DegradationProfile, t: float, seed: int = 0) -> np.ndarray:
    """Apply the degradation scheduled at time t; identity outside windows.

    Deterministic: the noise RNG is derived from (seed, t).
    """
    kind = active_degradation(profile, t)
    if kind is None or kind == "rotation":
        return img.copy()
    if kind == "exposure":
        return np.clip(img * profile.exposure_gain, 0.0, 1.0)
    if kind == "blur":
        # 1-D box along the (horizontal) motion direction; odd length keeps
        # the kernel centered. Length 1 is the identity.
        size = max(1, int(round(profile.blur_length)))
        if size % 2 == 0:
            size += 1
        if size == 1:
            return img.copy()
        return uniform_filter1d(img, size=size, axis=1, mode="nearest")
    if kind == "noise":
        rng = np.random.default_rng([seed & 0x7FFFFFFF, int(round(t * 1e6)) & 0x7FFFFFFFFFFF])
        return np.clip(img + profile.noise_sigma * rng.standard_normal(img.shape), 0.0, 1.0)
    raise AssertionError(kind)
