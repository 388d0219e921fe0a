"""Semi-dense direct visual odometry on inverse-depth maps.

Tracking minimizes the robustified photometric error between a keyframe and
the current image over an SE(3) twist, coarse to fine, with iteratively
reweighted Levenberg-Marquardt. Depth comes from adaptive-baseline epipolar
matching against tracked frames, fused as inverse-depth Gaussians.

Pose conventions: the photometric warp (and therefore `warp` and
`photometric_error`) takes the frame-from-keyframe transform, because it maps
keyframe pixels into the new image. `track` accepts and returns the
keyframe-from-frame transform (the new camera's pose in keyframe
coordinates), which is what odometry composes; it inverts internally.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .geometry import CameraIntrinsics, Pose

_D_FLOOR = 1e-4  # inverse depth clamp, keeps 1/d finite


@dataclass
class InverseDepthMap:
    """Per-pixel inverse depth d (1/m), variance, and validity mask.

    A valid pixel with d exactly 0 is known sky (a surface at infinity);
    negative inverse depths are never valid.
    """

    d: np.ndarray
    var: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.d.shape == self.var.shape == self.valid.shape):
            raise ValueError("depth map channels must share one shape")
        if np.any(self.d[self.valid] < 0.0):
            raise ValueError("valid inverse depths must be non-negative")
        if np.any(self.var[self.valid] <= 0.0):
            raise ValueError("valid variances must be positive")

    @staticmethod
    def empty(shape: tuple[int, int]) -> "InverseDepthMap":
        return InverseDepthMap(np.zeros(shape), np.ones(shape), np.zeros(shape, dtype=bool))

    def copy(self) -> "InverseDepthMap":
        return InverseDepthMap(self.d.copy(), self.var.copy(), self.valid.copy())


@dataclass
class Keyframe:
    """Reference image with its inverse-depth map and world pose.

    depth is the full estimate map (valid = an estimate exists; sky is a
    valid estimate with inverse depth exactly 0). select marks the
    semi-dense subset actually used for photometric residuals: valid,
    finite-depth, high-gradient, and off depth discontinuities.
    """

    image: np.ndarray
    depth: InverseDepthMap
    pose: Pose
    grad_x: np.ndarray
    grad_y: np.ndarray
    grad_mag: np.ndarray
    grad_threshold: float
    select: np.ndarray


def depth_edge_mask(depth: InverseDepthMap, rel_jump: float = 0.25) -> np.ndarray:
    """Pixels sitting on a depth discontinuity.

    A pixel is an edge when a 4-neighbor's inverse depth differs by more than
    rel_jump relatively. Sky is encoded as valid with inverse depth exactly 0,
    so surface/sky silhouettes trip the same rule (relative jump 1): those are
    exactly the pixels whose appearance mixes foreground and background and
    poisons photometric residuals. Unestimated (invalid) neighbors don't count
    — in sparse maps they are usually the same surface, not a silhouette.
    """
    d, ok = depth.d, depth.valid
    edge = np.zeros(d.shape, dtype=bool)

    def mark(sl_a, sl_b):
        da, db = d[sl_a], d[sl_b]
        rel = np.abs(da - db) / np.maximum(np.maximum(da, db), 1e-9)
        bad = ok[sl_a] & ok[sl_b] & (rel > rel_jump)
        edge[sl_a] |= bad
        edge[sl_b] |= bad

    mark((slice(None), slice(1, None)), (slice(None), slice(None, -1)))
    mark((slice(1, None), slice(None)), (slice(None, -1), slice(None)))
    return edge


def make_keyframe(
    image: np.ndarray,
    depth: InverseDepthMap,
    pose: Pose,
    grad_percentile: float = 75.0,
) -> Keyframe:
    """Build a keyframe, restricting validity to high-gradient pixels.

    Pixels on depth discontinuities are dropped: their appearance mixes
    foreground and background, which poisons the photometric objective.
    """
    img = np.asarray(image, dtype=float)
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    thr = float(np.percentile(mag, grad_percentile))
    select = depth.valid & (mag >= thr) & (depth.d > 0.0) & ~depth_edge_mask(depth)
    return Keyframe(img, depth.copy(), pose, gx, gy, mag, thr, select)


def huber(r: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Huber cost and IRLS weight: 0.5 r^2 inside the knee, linear outside."""
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    inside = a <= delta
    cost = np.where(inside, 0.5 * r * r, delta * (a - 0.5 * delta))
    with np.errstate(divide="ignore"):
        weight = np.where(inside, 1.0, delta / np.where(a > 0.0, a, 1.0))
    return cost, weight


def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear lookup at (u, v); caller guarantees in-bounds coordinates."""
    H, W = img.shape
    u = np.clip(u, 0.0, W - 1.000001)
    v = np.clip(v, 0.0, H - 1.000001)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    fu = u - u0
    fv = v - v0
    top = img[v0, u0] * (1.0 - fu) + img[v0, u0 + 1] * fu
    bot = img[v0 + 1, u0] * (1.0 - fu) + img[v0 + 1, u0 + 1] * fu
    return top * (1.0 - fv) + bot * fv


def warp(
    x: np.ndarray,
    d: np.ndarray,
    xi: Pose,
    cam: CameraIntrinsics,
    margin: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Map keyframe pixels x (u, v) with inverse depth d into the new frame.

    xi is frame-from-keyframe. Returns (pixels, valid); pixels that land
    behind the camera or outside the image are flagged invalid, not clamped.
    """
    pix = np.atleast_2d(np.asarray(x, dtype=float))
    dd = np.broadcast_to(np.asarray(d, dtype=float), pix.shape[0])
    z = 1.0 / np.maximum(dd, _D_FLOOR)
    p = cam.unproject(pix, z)
    q = xi.apply(p)
    zq = q[:, 2]
    front = zq > 1e-9
    uv = np.full_like(pix, np.nan)
    safe_z = np.where(front, zq, 1.0)
    uv[:, 0] = cam.cx + cam.fx * q[:, 0] / safe_z
    uv[:, 1] = cam.cy + cam.fy * q[:, 1] / safe_z
    inside = (
        front
        & (uv[:, 0] >= margin)
        & (uv[:, 0] <= cam.width - 1 - margin)
        & (uv[:, 1] >= margin)
        & (uv[:, 1] <= cam.height - 1 - margin)
    )
    if np.asarray(x).ndim == 1:
        return uv[0], bool(inside[0])
    return uv, inside


@dataclass(frozen=True)
class TrackerConfig:
    huber_delta: float = 0.1
    pyramid_levels: int = 3
    max_iterations: int = 50
    step_tol: float = 1e-6
    lm_lambda_init: float = 1e-4
    lm_up: float = 10.0
    lm_down: float = 0.5
    lm_lambda_max: float = 1e10
    min_pixels: int = 12
    margin: float = 1.0
    z_min: float = 0.05
    grad_percentile: float = 75.0


@dataclass
class TrackingResult:
    pose: Pose  # keyframe-from-frame
    final_error: float  # mean Huber cost per contributing pixel
    iterations: int
    converged: bool
    diagnostic: str = ""


def _image_spline(img: np.ndarray) -> RectBivariateSpline:
    H, W = img.shape
    return RectBivariateSpline(np.arange(H), np.arange(W), img, kx=3, ky=3, s=0)


def _downsample_image(img: np.ndarray) -> np.ndarray:
    H, W = img.shape
    H2, W2 = H // 2, W // 2
    return img[: H2 * 2, : W2 * 2].reshape(H2, 2, W2, 2).mean(axis=(1, 3))


def _downsample_depth(dm: InverseDepthMap) -> InverseDepthMap:
    H, W = dm.d.shape
    H2, W2 = H // 2, W // 2
    v = dm.valid[: H2 * 2, : W2 * 2].reshape(H2, 2, W2, 2)
    d = dm.d[: H2 * 2, : W2 * 2].reshape(H2, 2, W2, 2)
    var = dm.var[: H2 * 2, : W2 * 2].reshape(H2, 2, W2, 2)
    count = v.sum(axis=(1, 3))
    any_valid = count > 0
    safe = np.maximum(count, 1)
    d2 = (d * v).sum(axis=(1, 3)) / safe
    var2 = (var * v).sum(axis=(1, 3)) / (safe * safe)
    d2[~any_valid] = 0.0
    var2[~any_valid] = 1.0
    return InverseDepthMap(d2, var2, any_valid)


class _LevelData:
    """Per-pyramid-level view of a keyframe used by the tracker."""

    def __init__(self, image, depth, cam):
        self.cam = cam
        vv, uu = np.nonzero(depth.valid)
        self.ref = image[vv, uu]
        self.d = depth.d[vv, uu]
        # Unit rays scaled so the camera-frame point is ray / d.
        self.ray = np.stack(
            [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones(len(uu))], axis=1
        )


def _selected_map(kf: Keyframe) -> InverseDepthMap:
    """The keyframe's depth restricted to its residual pixel set."""
    return InverseDepthMap(kf.depth.d, kf.depth.var, kf.select)


def _keyframe_pyramid(kf: Keyframe, cam: CameraIntrinsics, levels: int) -> list[_LevelData]:
    depth = _selected_map(kf)
    out = [_LevelData(kf.image, depth, cam)]
    img = kf.image
    for lvl in range(1, levels):
        img = _downsample_image(img)
        depth = _downsample_depth(depth)
        out.append(_LevelData(img, depth, cam.scaled(lvl)))
    return out


def _residuals_full(level: _LevelData, spline, xi: Pose, delta: float, cfg: TrackerConfig, want_jac: bool):
    """Residuals (and optionally Jacobian rows) of the warp at pose xi."""
    cam = level.cam
    p = (level.ray / level.d[:, None]) @ xi.rotation.T + xi.translation
    z = p[:, 2]
    ok = z > cfg.z_min
    safe_z = np.where(ok, z, 1.0)
    u = cam.cx + cam.fx * p[:, 0] / safe_z
    v = cam.cy + cam.fy * p[:, 1] / safe_z
    m = cfg.margin
    ok &= (u >= m) & (u <= cam.width - 1 - m) & (v >= m) & (v <= cam.height - 1 - m)
    idx = np.nonzero(ok)[0]
    if len(idx) == 0:
        return np.zeros(0), None, idx, 0.0
    uu, vv = u[idx], v[idx]
    val = spline.ev(vv, uu)
    r = level.ref[idx] - val
    cost, w = huber(r, delta)
    E = float(cost.sum())
    if not want_jac:
        return r, None, idx, E
    gx = spline.ev(vv, uu, dx=0, dy=1)
    gy = spline.ev(vv, uu, dx=1, dy=0)
    x, y, zz = p[idx, 0], p[idx, 1], p[idx, 2]
    A = cam.fx / zz
    B = cam.fy / zz
    J = np.empty((len(idx), 6))
    # du/dtwist and dv/dtwist rows, twist ordered (v, w), left perturbation.
    J[:, 0] = gx * A
    J[:, 1] = gy * B
    J[:, 2] = -(gx * A * x + gy * B * y) / zz
    J[:, 3] = -(gx * A * x * y / zz) - gy * B * (zz + y * y / zz)
    J[:, 4] = gx * A * (zz + x * x / zz) + gy * B * x * y / zz
    J[:, 5] = -(gx * A * y) + gy * B * x
    J *= -1.0  # r = ref - sampled
    return r, (J, w), idx, E


def photometric_error(
    kf: Keyframe,
    img: np.ndarray,
    xi: Pose,
    delta: float = 0.1,
    cfg: TrackerConfig | None = None,
    cam: CameraIntrinsics | None = None,
) -> float:
    """Sum of Huber photometric residuals of kf warped into img by xi.

    xi is frame-from-keyframe. Pixels leaving the image are excluded.
    """
    cfg = cfg or TrackerConfig(huber_delta=delta)
    cam = cam or _default_cam_for(kf.image)
    level = _LevelData(kf.image, _selected_map(kf), cam)
    spline = _image_spline(np.asarray(img, dtype=float))
    _, _, _, E = _residuals_full(level, spline, xi, delta, cfg, want_jac=False)
    return E


def photometric_error_and_gradient(
    kf: Keyframe,
    img: np.ndarray,
    xi: Pose,
    delta: float = 0.1,
    cfg: TrackerConfig | None = None,
    cam: CameraIntrinsics | None = None,
) -> tuple[float, np.ndarray, int]:
    """(E, dE/dtwist, contributing pixel count) at xi (frame-from-keyframe).

    The gradient is with respect to a left-multiplied twist perturbation:
    E(exp(eps) o xi).
    """
    cfg = cfg or TrackerConfig(huber_delta=delta)
    cam = cam or _default_cam_for(kf.image)
    level = _LevelData(kf.image, _selected_map(kf), cam)
    spline = _image_spline(np.asarray(img, dtype=float))
    r, jac, idx, E = _residuals_full(level, spline, xi, delta, cfg, want_jac=True)
    if jac is None:
        return E, np.zeros(6), 0
    J, w = jac
    grad = J.T @ (w * r)
    return E, grad, len(idx)


def _default_cam_for(image: np.ndarray) -> CameraIntrinsics:
    """Fallback intrinsics when none are supplied (tests, toy images)."""
    H, W = image.shape
    f = 0.625 * W
    return CameraIntrinsics(f, f, (W - 1) / 2.0, (H - 1) / 2.0, W, H)


def track(
    kf: Keyframe,
    img: np.ndarray,
    xi_init: Pose,
    cam: CameraIntrinsics,
    cfg: TrackerConfig = TrackerConfig(),
) -> TrackingResult:
    """Coarse-to-fine IRLS Levenberg-Marquardt alignment of img against kf.

    xi_init and the returned pose are keyframe-from-frame. converged implies
    the finest-level photometric error did not increase over xi_init.
    """
    img = np.asarray(img, dtype=float)
    levels = _keyframe_pyramid(kf, cam, cfg.pyramid_levels)
    pyr_imgs = [img]
    for _ in range(1, cfg.pyramid_levels):
        pyr_imgs.append(_downsample_image(pyr_imgs[-1]))
    splines = [_image_spline(im) for im in pyr_imgs]

    xi = xi_init.inverse()  # optimize frame-from-keyframe
    xi_init_inv = xi
    total_iters = 0
    diagnostic = ""
    failed = False
    finest_step_converged = False

    for lvl in range(cfg.pyramid_levels - 1, -1, -1):
        level = levels[lvl]
        spline = splines[lvl]
        delta = cfg.huber_delta

        if lvl == 0:
            # Descent guard: never start the finest level above xi_init.
            _, _, _, e_cur = _residuals_full(level, spline, xi, delta, cfg, False)
            _, _, _, e_init = _residuals_full(level, spline, xi_init_inv, delta, cfg, False)
            if e_init < e_cur:
                xi = xi_init_inv

        r, jac, idx, E = _residuals_full(level, spline, xi, delta, cfg, True)
        if jac is None or len(idx) < cfg.min_pixels:
            diagnostic = f"insufficient overlap at level {lvl}"
            failed = True
            break
        lam = cfg.lm_lambda_init
        for _ in range(cfg.max_iterations):
            J, w = jac
            H = (J * w[:, None]).T @ J
            g = J.T @ (w * r)
            damp = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                step = np.linalg.solve(damp, -g)
            except np.linalg.LinAlgError:
                diagnostic = f"singular normal equations at level {lvl}"
                failed = True
                break
            if not np.all(np.isfinite(step)):
                diagnostic = f"non-finite step at level {lvl}"
                failed = True
                break
            total_iters += 1
            cand = Pose.exp(step).compose(xi)
            r2, jac2, idx2, E2 = _residuals_full(level, spline, cand, delta, cfg, True)
            if jac2 is not None and len(idx2) >= cfg.min_pixels and E2 < E:
                xi = cand
                r, jac, idx, E = r2, jac2, idx2, E2
                lam = max(lam * cfg.lm_down, 1e-12)
                if float(np.linalg.norm(step)) < cfg.step_tol:
                    if lvl == 0:
                        finest_step_converged = True
                    break
            else:
                lam *= cfg.lm_up
                if float(np.linalg.norm(step)) < cfg.step_tol:
                    # The proposal is already sub-tolerance; nothing to gain.
                    if lvl == 0:
                        finest_step_converged = True
                    break
                if lam > cfg.lm_lambda_max:
                    break
        if failed:
            break

    level0 = levels[0]
    spline0 = splines[0]
    _, _, idx_f, E_final = _residuals_full(level0, spline0, xi, cfg.huber_delta, cfg, False)
    _, _, _, E_init0 = _residuals_full(level0, spline0, xi_init_inv, cfg.huber_delta, cfg, False)
    if E_init0 < E_final:
        xi = xi_init_inv
        E_final = E_init0
        _, _, idx_f, _ = _residuals_full(level0, spline0, xi, cfg.huber_delta, cfg, False)
        finest_step_converged = False
    count = max(len(idx_f), 1)
    converged = finest_step_converged and not failed and len(idx_f) >= cfg.min_pixels
    return TrackingResult(
        pose=xi.inverse(),
        final_error=E_final / count,
        iterations=total_iters,
        converged=converged,
        diagnostic=diagnostic,
    )


# ---------- depth estimation ----------


@dataclass(frozen=True)
class StereoConfig:
    min_baseline: float = 0.25
    num_samples: int = 32
    patch_half: int = 2
    d_min: float = 0.02
    d_max: float = 2.0
    prior_sigmas: float = 3.0
    photometric_sigma: float = 0.01
    match_sigma_px: float = 0.3
    min_epi_grad: float = 0.02
    ssd_max: float = 0.02
    gate_sigmas: float = 3.0
    init_var_inflation: float = 4.0
    var_min: float = 1e-8
    var_max: float = 4.0
    z_min: float = 0.05


@dataclass
class StereoResult:
    depth: InverseDepthMap
    updated: bool
    observations: int


def fuse_gaussian(d0, v0, d1, v1):
    """Product of two inverse-depth Gaussians: precision-weighted mean."""
    w0 = 1.0 / v0
    w1 = 1.0 / v1
    v = 1.0 / (w0 + w1)
    return (d0 * w0 + d1 * w1) * v, v


def stereo_update(
    kf: Keyframe,
    img: np.ndarray,
    xi: Pose,
    cam: CameraIntrinsics,
    cfg: StereoConfig = StereoConfig(),
) -> StereoResult:
    """Refine the keyframe depth map by epipolar search in img.

    xi is keyframe-from-frame (the new camera's pose in keyframe
    coordinates). Observation variance scales with photometric noise over
    (baseline x epipolar gradient); observations fuse with priors as
    inverse-variance Gaussians, gated for compatibility. Too-short baselines
    return the map unchanged with updated=False.
    """
    img = np.asarray(img, dtype=float)
    baseline = float(np.linalg.norm(xi.translation))
    if baseline < cfg.min_baseline:
        return StereoResult(kf.depth.copy(), False, 0)

    T = xi.inverse()  # frame-from-keyframe
    H, W = kf.image.shape
    vv, uu = np.nonzero(kf.grad_mag >= kf.grad_threshold)
    if len(uu) == 0:
        return StereoResult(kf.depth.copy(), True, 0)

    prior_d = kf.depth.d[vv, uu]
    prior_var = kf.depth.var[vv, uu]
    prior_ok = kf.depth.valid[vv, uu]
    # Inverse depth exactly 0 means known sky: nothing to triangulate there.
    known_sky = prior_ok & (prior_d <= 0.0)

    sig = np.sqrt(prior_var)
    lo = np.where(prior_ok, np.maximum(prior_d - cfg.prior_sigmas * sig, cfg.d_min), cfg.d_min)
    hi = np.where(prior_ok, np.minimum(prior_d + cfg.prior_sigmas * sig, cfg.d_max), cfg.d_max)
    bad_iv = lo >= hi
    lo[bad_iv] = cfg.d_min
    hi[bad_iv] = cfg.d_max

    S = cfg.num_samples
    frac = np.linspace(0.0, 1.0, S)
    D = lo[:, None] + (hi - lo)[:, None] * frac[None, :]

    ray = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones(len(uu))], axis=1)
    Rq = ray @ T.rotation.T
    P = Rq[:, None, :] / D[:, :, None] + T.translation[None, None, :]
    Z = P[:, :, 2]
    front = Z > cfg.z_min
    safe_z = np.where(front, Z, 1.0)
    U = cam.cx + cam.fx * P[:, :, 0] / safe_z
    V = cam.cy + cam.fy * P[:, :, 1] / safe_z

    # Epipolar direction and pixels-per-inverse-depth from the interval ends.
    eu = U[:, -1] - U[:, 0]
    ev = V[:, -1] - V[:, 0]
    span = np.hypot(eu, ev)
    has_parallax = span > 0.5
    with np.errstate(divide="ignore", invalid="ignore"):
        ex = np.where(has_parallax, eu / span, 1.0)
        ey = np.where(has_parallax, ev / span, 0.0)
        J_u = span / np.maximum(hi - lo, 1e-12)

    ph = cfg.patch_half
    offs = np.arange(-ph, ph + 1, dtype=float)
    m = ph + 1.0
    ref_u = uu[:, None] + offs[None, :] * ex[:, None]
    ref_v = vv[:, None] + offs[None, :] * ey[:, None]
    ref_in = (
        (ref_u >= 0) & (ref_u <= W - 1) & (ref_v >= 0) & (ref_v <= H - 1)
    ).all(axis=1)
    ref_patch = bilinear_sample(kf.image, ref_u, ref_v)

    cu = U[:, :, None] + offs[None, None, :] * ex[:, None, None]
    cv = V[:, :, None] + offs[None, None, :] * ey[:, None, None]
    cand_in = front & (
        (cu >= 0) & (cu <= W - 1) & (cv >= 0) & (cv <= H - 1)
    ).all(axis=2)
    patch = bilinear_sample(img, cu, cv)
    ssd = ((patch - ref_patch[:, None, :]) ** 2).sum(axis=2)
    ssd[~cand_in] = np.inf

    best = np.argmin(ssd, axis=1)
    rows = np.arange(len(uu))
    best_ssd = ssd[rows, best]
    n_valid_samples = cand_in.sum(axis=1)

    g_epi = np.abs(kf.grad_x[vv, uu] * ex + kf.grad_y[vv, uu] * ey)
    npatch = 2 * ph + 1
    accept = (
        has_parallax
        & ref_in
        & ~known_sky
        & (n_valid_samples >= 3)
        & np.isfinite(best_ssd)
        & (best_ssd / npatch <= cfg.ssd_max)
        & (g_epi >= cfg.min_epi_grad)
    )

    # Parabolic sub-step refinement where the minimum is interior.
    step_d = (hi - lo) / (S - 1)
    d_obs = D[rows, best]
    interior = accept & (best > 0) & (best < S - 1)
    if np.any(interior):
        i = np.nonzero(interior)[0]
        s0 = ssd[i, best[i] - 1]
        s1 = ssd[i, best[i]]
        s2 = ssd[i, best[i] + 1]
        denom = s0 - 2.0 * s1 + s2
        good = np.isfinite(s0) & np.isfinite(s2) & (denom > 1e-12)
        off = np.zeros(len(i))
        off[good] = np.clip(0.5 * (s0[good] - s2[good]) / denom[good], -0.5, 0.5)
        d_obs[i] = d_obs[i] + off * step_d[i]

    sigma_u2 = (cfg.photometric_sigma / np.maximum(g_epi, 1e-6)) ** 2 + cfg.match_sigma_px**2
    with np.errstate(divide="ignore"):
        var_obs = sigma_u2 / np.maximum(J_u, 1e-12) ** 2
    var_obs = np.clip(var_obs, cfg.var_min, cfg.var_max)
    d_obs = np.clip(d_obs, _D_FLOOR, cfg.d_max)

    new = kf.depth.copy()
    nd, nv, nok = new.d, new.var, new.valid

    compat = np.abs(d_obs - prior_d) <= cfg.gate_sigmas * np.sqrt(prior_var + var_obs)
    fuse_mask = accept & prior_ok & compat
    if np.any(fuse_mask):
        fd, fv = fuse_gaussian(
            prior_d[fuse_mask], prior_var[fuse_mask], d_obs[fuse_mask], var_obs[fuse_mask]
        )
        nd[vv[fuse_mask], uu[fuse_mask]] = np.maximum(fd, _D_FLOOR)
        nv[vv[fuse_mask], uu[fuse_mask]] = fv

    init_mask = accept & ~prior_ok
    if np.any(init_mask):
        nd[vv[init_mask], uu[init_mask]] = d_obs[init_mask]
        nv[vv[init_mask], uu[init_mask]] = np.clip(
            var_obs[init_mask] * cfg.init_var_inflation, cfg.var_min, cfg.var_max
        )
        nok[vv[init_mask], uu[init_mask]] = True

    n_obs = int(np.count_nonzero(fuse_mask) + np.count_nonzero(init_mask))
    return StereoResult(InverseDepthMap(nd, nv, nok), True, n_obs)


def propagate(
    depth: InverseDepthMap,
    xi: Pose,
    cam: CameraIntrinsics,
    process_noise: float = 1e-4,
    z_near: float = 0.25,
) -> InverseDepthMap:
    """Reproject an inverse-depth map into a new camera.

    xi is new-from-old. Each valid pixel's 3-D point is transformed and
    re-projected to the nearest integer pixel; collisions keep the nearer
    point. Variance follows the first-order inverse-depth transform plus a
    process-noise inflation. Points leaving the view, landing behind the
    camera, or passing inside the z_near plane are dropped — surfaces the
    vehicle is about to brush past would otherwise re-amplify through each
    reprojection into absurd inverse depths. Sky pixels (inverse depth
    exactly 0) live at infinity: they move by rotation alone and stay at 0.
    """
    H, W = depth.d.shape
    out_d = np.zeros((H, W))
    out_var = np.ones((H, W))
    out_ok = np.zeros((H, W), dtype=bool)
    vv, uu = np.nonzero(depth.valid)
    if len(uu) == 0:
        return InverseDepthMap(out_d, out_var, out_ok)
    d0 = depth.d[vv, uu]
    var0 = depth.var[vv, uu]
    ray = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones(len(uu))], axis=1)
    sky = d0 <= 0.0
    # Finite points: full rigid transform. Sky: direction-only (translation
    # vanishes against infinite depth), new inverse depth stays exactly 0.
    z = 1.0 / np.where(sky, 1.0, d0)
    q = np.where(sky[:, None], ray @ xi.rotation.T, xi.apply(ray * z[:, None]))
    zq = q[:, 2]
    keep = np.where(sky, zq > 1e-6, zq > z_near)
    if not np.any(keep):
        return InverseDepthMap(out_d, out_var, out_ok)
    q, d0, var0, zq, sky = q[keep], d0[keep], var0[keep], zq[keep], sky[keep]
    d1 = np.where(sky, 0.0, 1.0 / zq)
    u1 = np.rint(cam.cx + cam.fx * q[:, 0] / zq).astype(int)
    v1 = np.rint(cam.cy + cam.fy * q[:, 1] / zq).astype(int)
    inb = (u1 >= 0) & (u1 < W) & (v1 >= 0) & (v1 < H)
    u1, v1, d1, d0, var0, sky = u1[inb], v1[inb], d1[inb], d0[inb], var0[inb], sky[inb]
    ratio = np.where(sky, 1.0, d1 / np.maximum(d0, _D_FLOOR))
    var1 = var0 * ratio**4 + process_noise
    # Nearer surfaces (larger inverse depth) must win collisions: write in
    # ascending d so the last write is the nearest; sky (d=0) sorts first.
    order = np.argsort(d1, kind="stable")
    u1, v1, d1, var1 = u1[order], v1[order], d1[order], var1[order]
    out_d[v1, u1] = np.where(d1 > 0.0, np.maximum(d1, _D_FLOOR), 0.0)
    out_var[v1, u1] = np.maximum(var1, 1e-12)
    out_ok[v1, u1] = True
    return InverseDepthMap(out_d, out_var, out_ok)


def fill_holes(
    depth: InverseDepthMap, rel_jump: float = 0.25, passes: int = 2
) -> InverseDepthMap:
    """Fill invalid pixels whose valid 4-neighbors agree on one surface.

    Reprojection scatters points onto integer pixels and leaves holes; each
    pass fills a pixel when at least 3 of its 4 neighbors are valid and
    their inverse depths all lie within rel_jump relatively (an all-sky
    neighborhood fills as sky). Filled values are precision-weighted means
    with doubled variance so invented pixels never outweigh measured ones.
    """
    d = depth.d.copy()
    var = depth.var.copy()
    ok = depth.valid.copy()
    for _ in range(max(1, passes)):
        nb_d, nb_w, nb_ok = [], [], []
        for dv, du in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            sd = np.roll(d, (dv, du), axis=(0, 1))
            sv = np.roll(var, (dv, du), axis=(0, 1))
            so = np.roll(ok, (dv, du), axis=(0, 1))
            # Rolled-in borders are not real neighbors.
            if dv == -1:
                so[-1, :] = False
            elif dv == 1:
                so[0, :] = False
            elif du == -1:
                so[:, -1] = False
            else:
                so[:, 0] = False
            nb_d.append(np.where(so, sd, 0.0))
            nb_w.append(np.where(so, 1.0 / np.maximum(sv, 1e-12), 0.0))
            nb_ok.append(so)
        count = np.sum(nb_ok, axis=0)
        dmax = np.max(np.where(nb_ok, nb_d, -np.inf), axis=0)
        dmin = np.min(np.where(nb_ok, nb_d, np.inf), axis=0)
        with np.errstate(invalid="ignore"):
            agree = (dmax - dmin) <= rel_jump * np.maximum(dmax, 1e-9)
        fill = ~ok & (count >= 3) & agree
        if not np.any(fill):
            break
        wsum = np.sum(nb_w, axis=0)
        dsum = np.sum([w * x for w, x in zip(nb_w, nb_d)], axis=0)
        d[fill] = dsum[fill] / wsum[fill]
        var[fill] = 2.0 / wsum[fill]
        ok[fill] = True
    return InverseDepthMap(d, var, ok)


def regularize(depth: InverseDepthMap, rel_jump: float = 0.25) -> InverseDepthMap:
    """Smooth each valid pixel toward 4-neighbors on the same surface.

    Reprojection rounds every point to the nearest pixel, which leaves
    half-pixel scatter noise on smooth surfaces. Each valid pixel is replaced
    by the precision-weighted mean of itself and those valid neighbors whose
    inverse depth lies within rel_jump of its own, so depth edges and sky
    boundaries never mix. Variances are kept (neighboring estimates share
    history, so averaging them does not earn the independence discount).
    """
    d = depth.d
    var = depth.var
    ok = depth.valid
    w0 = np.where(ok, 1.0 / np.maximum(var, 1e-12), 0.0)
    dsum = np.where(ok, d * w0, 0.0)
    wsum = w0.copy()
    for dv, du in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        sd = np.roll(d, (dv, du), axis=(0, 1))
        sv = np.roll(var, (dv, du), axis=(0, 1))
        so = np.roll(ok, (dv, du), axis=(0, 1))
        if dv == -1:
            so[-1, :] = False
        elif dv == 1:
            so[0, :] = False
        elif du == -1:
            so[:, -1] = False
        else:
            so[:, 0] = False
        same = so & ok & (np.abs(sd - d) <= rel_jump * np.maximum(np.maximum(sd, d), 1e-9))
        w = np.where(same, 1.0 / np.maximum(sv, 1e-12), 0.0)
        dsum += w * sd
        wsum += w
    out_d = np.where(ok, dsum / np.maximum(wsum, 1e-12), 0.0)
    return InverseDepthMap(out_d, var.copy(), ok.copy())


def mean_depth_variance(depth: InverseDepthMap) -> float:
    """Mean variance over finite-depth valid pixels; NaN when none exist.

    Sky estimates (inverse depth 0) are excluded: the statistic measures
    uncertainty about structure, and the sky fraction varies with the view.
    """
    mask = depth.valid & (depth.d > 0.0)
    if not np.any(mask):
        return float("nan")
    return float(depth.var[mask].mean())


def point_cloud(kf: Keyframe, cam: CameraIntrinsics) -> np.ndarray:
    """World-frame 3-D points of the keyframe's residual pixel set, (N, 3)."""
    vv, uu = np.nonzero(kf.select)
    if len(uu) == 0:
        return np.zeros((0, 3))
    z = 1.0 / kf.depth.d[vv, uu]
    p = np.stack([(uu - cam.cx) / cam.fx * z, (vv - cam.cy) / cam.fy * z, z], axis=1)
    return kf.pose.apply(p)
