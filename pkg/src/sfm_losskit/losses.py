"""Objective-function terms over depth/pose parameters, with exact gradients.

The objective combines a per-pixel minimum photometric term gated by a
static-pixel mask, an edge-aware smoothness regularizer on mean-normalized
disparity, and a supervised reprojected-distance term over sparse labels:

    total = photo + lambda_smooth * smooth + lambda_rep * rep

Gradients are derived by hand as exact adjoints of the forward computation
(masks and argmin selections are treated as constants), so they match
central finite differences away from the measure-zero switching sets.
Images are (H, W, C) float arrays in [0, 1]; depth maps are (H, W) with
0 or negative marking invalid; per-pixel loss maps carry +inf at invalid
pixels, which every reduction here excludes by mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import geometry, warp
from .errors import (
    DegenerateMaskError,
    DimensionError,
    EmptyContextError,
    InvalidDepthError,
    NoSupervisionError,
)
from .geometry import CameraIntrinsics, PoseSE3

# SSIM stabilizers for unit data range, and the uniform window radius.
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_RADIUS = 1


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights of the objective (defaults follow the reference setup)."""

    alpha: float = 0.85
    lambda_smooth: float = 1e-3
    lambda_rep: float = 1e4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda_smooth < 0 or self.lambda_rep < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    photo: float
    smooth: float
    rep: float
    total: float
    masked_pixel_count: int
    rep_pixel_count: int = 0
    rep_dropped_behind: int = 0


class RepLoss(NamedTuple):
    """Mean reprojected distance, the label count used, and how many labels
    were dropped because a projection fell behind the camera."""

    value: float
    count: int
    dropped: int


# A context set is an ordered list of (source image, pose target->source).
ContextSet = Sequence[tuple[np.ndarray, PoseSE3]]


def _box_sum(x: np.ndarray, radius: int = SSIM_RADIUS) -> np.ndarray:
    """Windowed sum over (2r+1)^2 boxes; windows shrink at the borders.

    Self-adjoint (symmetric window), which the SSIM backward pass relies on.
    Computed by summing shifted copies, not integral images: the output at a
    pixel then depends only on its window, so a local input change leaves
    every other output bit-identical (finite-difference checks rely on that).
    """
    h, w = x.shape
    padded = np.zeros((h + 2 * radius, w + 2 * radius))
    padded[radius : radius + h, radius : radius + w] = x
    out = np.zeros((h, w))
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out += padded[dy : dy + h, dx : dx + w]
    return out


def _stable_sum(values: np.ndarray) -> float:
    """Exactly rounded sum (math.fsum); keeps scalar reductions reproducible
    to the last bit so central differences of the loss stay meaningful."""
    return math.fsum(values.ravel().tolist())


class _SsimChannelCache(NamedTuple):
    mu_x: np.ndarray
    mu_y: np.ndarray
    var_x: np.ndarray
    var_y: np.ndarray
    cov: np.ndarray
    n: np.ndarray
    ssim: np.ndarray


def _ssim_channel(a, b, m, c1, c2, radius) -> _SsimChannelCache:
    """SSIM map of one channel; window statistics use valid pixels only."""
    n = np.maximum(_box_sum(m, radius), 1.0)
    mu_x = _box_sum(a * m, radius) / n
    mu_y = _box_sum(b * m, radius) / n
    var_x = _box_sum(a * a * m, radius) / n - mu_x * mu_x
    var_y = _box_sum(b * b * m, radius) / n - mu_y * mu_y
    cov = _box_sum(a * b * m, radius) / n - mu_x * mu_y
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return _SsimChannelCache(mu_x, mu_y, var_x, var_y, cov, n, s)


def _ssim_channel_grad_b(cache: _SsimChannelCache, a, b, m, g, c1, c2, radius):
    """d(sum g * ssim)/db, the exact adjoint of _ssim_channel in its second arg."""
    mu_x, mu_y, var_x, var_y, cov, n, s = cache
    num_l = 2 * mu_x * mu_y + c1
    num_c = 2 * cov + c2
    den_l = mu_x * mu_x + mu_y * mu_y + c1
    den_c = var_x + var_y + c2

    d_num = g / (den_l * den_c)
    d_num_l = d_num * num_c
    d_num_c = d_num * num_l
    d_den_l = -g * s / den_l
    d_den_c = -g * s / den_c

    d_mu_y = 2 * mu_x * d_num_l + 2 * mu_y * d_den_l
    d_cov = 2 * d_num_c
    d_var_y = d_den_c

    # var_y = box(b*b*m)/n - mu_y^2 ; cov = box(a*b*m)/n - mu_x*mu_y
    d_mu_y += -2 * mu_y * d_var_y - mu_x * d_cov
    db = m * (
        _box_sum(d_mu_y / n, radius)
        + _box_sum(d_cov / n, radius) * a
        + _box_sum(d_var_y / n, radius) * 2 * b
    )
    return db


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    mask: np.ndarray | None = None,
    c1: float = SSIM_C1,
    c2: float = SSIM_C2,
    radius: int = SSIM_RADIUS,
) -> np.ndarray:
    """Per-pixel SSIM map in [-1, 1], per channel then channel-averaged.

    Window statistics are uniform over the (2r+1)^2 box, restricted to valid
    pixels when a mask is given (windows shrink at image borders the same way).
    """
    a = warp.validate_image(a)
    b = warp.validate_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape[:2]:
        raise DimensionError(f"mask shape {m.shape} does not match image {a.shape}")
    out = np.zeros(a.shape[:2])
    for c in range(a.shape[2]):
        out += _ssim_channel(a[..., c], b[..., c], m, c1, c2, radius).ssim
    return out / a.shape[2]


class _PhotoCache(NamedTuple):
    target: np.ndarray
    synth: np.ndarray
    mask_f: np.ndarray
    alpha: float
    ssim_caches: tuple


def _photometric_forward(target, synth, mask, alpha) -> tuple[np.ndarray, _PhotoCache]:
    m = mask.astype(np.float64)
    channels = target.shape[2]
    loss = np.zeros(target.shape[:2])
    caches = []
    for c in range(channels):
        cache = _ssim_channel(target[..., c], synth[..., c], m, SSIM_C1, SSIM_C2, SSIM_RADIUS)
        caches.append(cache)
        # clip guards float dust pushing SSIM past 1 on identical windows
        loss += alpha * np.clip((1.0 - cache.ssim) / 2.0, 0.0, 1.0)
        loss += (1.0 - alpha) * np.abs(target[..., c] - synth[..., c])
    loss /= channels
    loss[~mask] = np.inf
    return loss, _PhotoCache(target, synth, m, alpha, tuple(caches))


def _photometric_backward(cache: _PhotoCache, upstream: np.ndarray) -> np.ndarray:
    """d(sum upstream * loss_map)/d(synth); upstream must be 0 at invalid pixels."""
    target, synth, m, alpha, caches = cache
    channels = target.shape[2]
    u = upstream / channels
    d_synth = np.empty_like(synth)
    for c in range(channels):
        diff = synth[..., c] - target[..., c]
        db = (1.0 - alpha) * np.sign(diff) * u
        active = (caches[c].ssim > -1.0) & (caches[c].ssim < 1.0)
        db += _ssim_channel_grad_b(
            caches[c], target[..., c], synth[..., c], m, -0.5 * alpha * u * active,
            SSIM_C1, SSIM_C2, SSIM_RADIUS,
        )
        d_synth[..., c] = db
    return d_synth


def photometric(
    target: np.ndarray, synth: np.ndarray, mask: np.ndarray, alpha: float
) -> np.ndarray:
    """Appearance-matching loss map: alpha*(1-SSIM)/2 + (1-alpha)*L1.

    Channel-averaged; invalid pixels are set to +inf and must be excluded
    from any reduction by the caller.
    """
    target = warp.validate_image(target)
    synth = warp.validate_image(synth)
    if target.shape != synth.shape:
        raise DimensionError(f"image shapes differ: {target.shape} vs {synth.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != target.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match {target.shape}")
    loss, _ = _photometric_forward(target, synth, mask, float(alpha))
    return loss


def _validate_context(target: np.ndarray, context: ContextSet) -> None:
    if len(context) == 0:
        raise EmptyContextError("context set is empty")
    for i, (img, pose) in enumerate(context):
        if np.asarray(img).shape != target.shape:
            raise DimensionError(
                f"context image {i} shape {np.asarray(img).shape} != target {target.shape}"
            )
        if not isinstance(pose, PoseSE3):
            raise TypeError(f"context {i} pose must be PoseSE3, got {type(pose)!r}")


def min_photometric(
    target: np.ndarray,
    context: ContextSet,
    depth: np.ndarray,
    k: CameraIntrinsics,
    alpha: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel minimum photometric loss over warped context images.

    Returns the min-reduced loss map (+inf where no source is valid) and the
    argmin source index map (-1 where no source is valid).
    """
    target = warp.validate_image(target)
    _validate_context(target, context)
    stack = []
    for src, pose in context:
        coords, valid = geometry.warp_coords(depth, pose, k)
        synth, mask = warp.sample_bilinear(src, coords, valid)
        stack.append(photometric(target, synth, mask, alpha))
    stacked = np.stack(stack, axis=0)
    min_map = stacked.min(axis=0)
    argmin = np.where(np.isfinite(min_map), stacked.argmin(axis=0), -1)
    return min_map, argmin


def automask(
    target: np.ndarray,
    context: ContextSet,
    warped_losses: Sequence[np.ndarray],
    unwarped_losses: Sequence[np.ndarray],
) -> np.ndarray:
    """Static-pixel mask: keep pixels whose unwarped loss strictly exceeds
    the warped one (both min-reduced over sources)."""
    target = warp.validate_image(target)
    _validate_context(target, context)
    if len(warped_losses) != len(context) or len(unwarped_losses) != len(context):
        raise DimensionError("loss stacks must have one map per context source")
    shape = target.shape[:2]
    for m in list(warped_losses) + list(unwarped_losses):
        if np.asarray(m).shape != shape:
            raise DimensionError(f"loss map shape {np.asarray(m).shape} != {shape}")
    min_warped = np.stack(warped_losses, axis=0).min(axis=0)
    min_unwarped = np.stack(unwarped_losses, axis=0).min(axis=0)
    with np.errstate(invalid="ignore"):
        return min_unwarped > min_warped


def unwarped_min_photometric(
    target: np.ndarray, context: ContextSet, alpha: float
) -> np.ndarray:
    """Min over sources of the photometric loss against the raw (unwarped)
    source images; constant during optimization, so callers may cache it."""
    target = warp.validate_image(target)
    _validate_context(target, context)
    ones = np.ones(target.shape[:2], dtype=bool)
    maps = [photometric(target, src, ones, alpha) for src, _ in context]
    return np.stack(maps, axis=0).min(axis=0)


class _SmoothCache(NamedTuple):
    valid: np.ndarray
    disp: np.ndarray
    mean_disp: float
    n_valid: int
    sign_dx: np.ndarray
    sign_dy: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    contrib: np.ndarray
    n_contrib: int


def _image_gradient_weights(target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.abs(target[:, 1:, :] - target[:, :-1, :]).mean(axis=2)
    gy = np.abs(target[1:, :, :] - target[:-1, :, :]).mean(axis=2)
    return np.exp(-gx), np.exp(-gy)


def _smoothness_forward(depth, target) -> tuple[float, _SmoothCache]:
    h, w = depth.shape
    valid = depth > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise InvalidDepthError("smoothness needs at least one valid depth")
    disp = np.where(valid, 1.0 / np.where(valid, depth, 1.0), 0.0)
    mean_disp = _stable_sum(disp) / n_valid
    dhat = disp / mean_disp

    wx_full, wy_full = _image_gradient_weights(target)
    dx = dhat[:, 1:] - dhat[:, :-1]
    dy = dhat[1:, :] - dhat[:-1, :]

    # A pixel contributes when itself and both forward neighbors are valid.
    contrib = valid[:-1, :-1] & valid[:-1, 1:] & valid[1:, :-1]
    n_contrib = int(contrib.sum())
    if n_contrib == 0:
        raise InvalidDepthError("no interior pixel with valid forward differences")

    dx_in = dx[:-1, :]
    dy_in = dy[:, :-1]
    wx = wx_full[:-1, :]
    wy = wy_full[:, :-1]
    value = _stable_sum((np.abs(dx_in) * wx + np.abs(dy_in) * wy) * contrib) / n_contrib
    cache = _SmoothCache(
        valid, disp, float(mean_disp), n_valid,
        np.sign(dx_in), np.sign(dy_in), wx, wy, contrib, n_contrib,
    )
    return value, cache


def _smoothness_backward(cache: _SmoothCache, depth: np.ndarray) -> np.ndarray:
    """d(smoothness)/d(depth); zero at invalid pixels."""
    valid, disp, mean_disp, n_valid, sign_dx, sign_dy, wx, wy, contrib, n_contrib = cache
    h, w = depth.shape
    gx = sign_dx * wx * contrib / n_contrib
    gy = sign_dy * wy * contrib / n_contrib

    d_dhat = np.zeros((h, w))
    d_dhat[:-1, 1:] += gx
    d_dhat[:-1, :-1] -= gx
    d_dhat[1:, :-1] += gy
    d_dhat[:-1, :-1] -= gy

    # dhat = disp / mean(disp over valid)
    dot = (d_dhat * disp).sum()
    d_disp = d_dhat / mean_disp - dot / (mean_disp * mean_disp * n_valid)
    d_disp[~valid] = 0.0
    return np.where(valid, -d_disp * disp * disp, 0.0)


def smoothness(depth: np.ndarray, target: np.ndarray) -> float:
    """Edge-aware smoothness of mean-normalized disparity (forward differences).

    Mean over interior pixels whose forward differences exist and are valid of
    |dx dhat| * exp(-|dx I|) + |dy dhat| * exp(-|dy I|).
    """
    depth = np.asarray(depth, dtype=np.float64)
    target = warp.validate_image(target)
    if depth.shape != target.shape[:2]:
        raise DimensionError(f"depth {depth.shape} does not match image {target.shape}")
    value, _ = _smoothness_forward(depth, target)
    return value


def reprojected_distance(
    pred: np.ndarray,
    gt_sparse: np.ndarray,
    pose: PoseSE3,
    k: CameraIntrinsics,
) -> RepLoss:
    """Mean image-space distance between projections of predicted and true
    3-D points of each labeled pixel, as seen through the given pose."""
    value, count, dropped, _, _ = _rep_forward(pred, gt_sparse, pose, k, want_grad=False)
    return RepLoss(value, count, dropped)


def _rep_forward(pred, gt_sparse, pose, k, want_grad):
    """Shared forward (and optional backward) pass of the reprojected loss.

    Returns (value, count, dropped, d_pred or None, d_pose6 or None).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt_sparse, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} does not match labels {gt.shape}")
    if pred.shape != (k.height, k.width):
        raise DimensionError(f"depth {pred.shape} does not match intrinsics")
    shared = (gt > 0) & (pred > 0)
    if not shared.any():
        raise NoSupervisionError("no pixel with both a label and a valid prediction")

    rows, cols = np.nonzero(shared)
    rays = k.pixel_rays()[rows, cols]
    rot = pose.rotation_matrix()
    t = pose.translation_vector()
    d_hat = pred[rows, cols]
    d_true = gt[rows, cols]
    x_hat = (d_hat[:, None] * rays) @ rot.T + t
    x_true = (d_true[:, None] * rays) @ rot.T + t

    front = (x_hat[:, 2] > geometry.EPS_Z) & (x_true[:, 2] > geometry.EPS_Z)
    dropped = int((~front).sum())
    count = int(front.sum())
    if count == 0:
        raise NoSupervisionError("every label projects behind the camera")

    rows, cols, rays = rows[front], cols[front], rays[front]
    d_hat, d_true = d_hat[front], d_true[front]
    x_hat, x_true = x_hat[front], x_true[front]

    def _proj(p):
        return np.stack(
            [k.fx * p[:, 0] / p[:, 2] + k.cx, k.fy * p[:, 1] / p[:, 2] + k.cy], axis=1
        )

    e = _proj(x_hat) - _proj(x_true)
    norms = np.sqrt((e * e).sum(axis=1))
    value = _stable_sum(norms) / count
    if not want_grad:
        return value, count, dropped, None, None

    # beta = e / |e| with the zero subgradient at |e| = 0
    safe = np.where(norms > 0, norms, 1.0)
    beta = np.where(norms[:, None] > 0, e / safe[:, None], 0.0)

    jac_hat = geometry.projection_jacobian(x_hat, k)
    jac_true = geometry.projection_jacobian(x_true, k)
    g_hat = np.einsum("ni,nij->nj", beta, jac_hat) / count
    g_true = np.einsum("ni,nij->nj", beta, jac_true) / count

    d_pred = np.zeros_like(pred)
    # dX_hat/dd = R @ ray; only the predicted branch depends on pred
    np.add.at(d_pred, (rows, cols), np.einsum("nj,nj->n", g_hat, rays @ rot.T))

    d_pose = np.zeros(6)
    p_hat = d_hat[:, None] * rays
    p_true = d_true[:, None] * rays
    for i, drot in enumerate(pose.rotation_jacobians()):
        d_pose[i] = np.einsum("nj,nj->", g_hat, p_hat @ drot.T) - np.einsum(
            "nj,nj->", g_true, p_true @ drot.T
        )
    d_pose[3:] = (g_hat - g_true).sum(axis=0)
    return value, count, dropped, d_pred, d_pose


def baseline_l1(pred: np.ndarray, gt_sparse: np.ndarray) -> float:
    """Mean absolute depth error over labeled pixels."""
    err, _ = _shared_errors(pred, gt_sparse)
    return float(np.abs(err).mean())


def baseline_berhu(pred: np.ndarray, gt_sparse: np.ndarray, c: float | None = None) -> float:
    """Reverse Huber: |e| up to c, (e^2 + c^2) / (2c) beyond.

    When c is omitted it is set to 0.2 * max|e| over the valid set.
    """
    err, _ = _shared_errors(pred, gt_sparse)
    abs_err = np.abs(err)
    if c is None:
        c = 0.2 * float(abs_err.max())
    if c <= 0:
        return float(abs_err.mean())
    quad = (err * err + c * c) / (2.0 * c)
    return float(np.where(abs_err <= c, abs_err, quad).mean())


def _shared_errors(pred, gt_sparse):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt_sparse, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} does not match labels {gt.shape}")
    shared = (gt > 0) & (pred > 0)
    if not shared.any():
        raise NoSupervisionError("no shared valid pixel")
    return (pred - gt)[shared], shared


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Dense 1-D linear-interpolation matrix (corner-aligned)."""
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
        return a
    s = np.arange(n_out) * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
    j0 = np.minimum(s.astype(np.intp), n_in - 2)
    frac = s - j0
    a[np.arange(n_out), j0] = 1.0 - frac
    a[np.arange(n_out), j0 + 1] = frac
    return a


def _pool_matrix(n_in: int) -> np.ndarray:
    """Dense 1-D average-pooling matrix halving the size (n_in must be even)."""
    n_out = n_in // 2
    a = np.zeros((n_out, n_in))
    idx = np.arange(n_out)
    a[idx, 2 * idx] = 0.5
    a[idx, 2 * idx + 1] = 0.5
    return a


class _PyramidLevel(NamedTuple):
    depth: np.ndarray
    # Row/column operators mapping the full-resolution depth to this level's
    # pooled-then-upsampled depth; level 0 has identity operators (None).
    row_op: np.ndarray | None
    col_op: np.ndarray | None


def _build_pyramid(depth: np.ndarray, num_scales: int) -> list[_PyramidLevel]:
    h, w = depth.shape
    levels = [_PyramidLevel(depth, None, None)]
    for s in range(1, num_scales):
        f = 2**s
        if h % f or w % f:
            raise DimensionError(
                f"image {h}x{w} is not divisible by {f}; cannot build {num_scales} scales"
            )
        # pooled-then-upsampled operator: up(h, h/f) @ pool^s, per axis
        pool_r = np.eye(h)
        pool_c = np.eye(w)
        for _ in range(s):
            pool_r = _pool_matrix(pool_r.shape[0]) @ pool_r
            pool_c = _pool_matrix(pool_c.shape[0]) @ pool_c
        row_op = _interp_matrix(h, h // f) @ pool_r
        col_op = _interp_matrix(w, w // f) @ pool_c
        levels.append(_PyramidLevel(row_op @ depth @ col_op.T, row_op, col_op))
    return levels


def _objective(
    target: np.ndarray,
    context: ContextSet,
    depth: np.ndarray,
    k: CameraIntrinsics,
    weights: LossWeights,
    labels: np.ndarray | None,
    num_scales: int = 1,
    supervised: str = "rep",
    want_grad: bool = True,
    unwarped_min: np.ndarray | None = None,
    photo_weight: float = 1.0,
):
    """Forward (and optional backward) pass of the full objective.

    Returns (breakdown, d_depth, d_poses) where d_poses is (S, 6); the
    gradient outputs are None when want_grad is False. photo_weight scales
    the photometric term (its default 1.0 is the published objective); it
    exists so verification can exercise the other terms in isolation.
    """
    target = warp.validate_image(target)
    _validate_context(target, context)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (k.height, k.width) or target.shape[:2] != depth.shape:
        raise DimensionError("target, depth and intrinsics dimensions disagree")
    if supervised not in ("rep", "l1", "berhu"):
        raise ValueError(f"unknown supervised term {supervised!r}")
    if num_scales < 1:
        raise ValueError("num_scales must be >= 1")

    n_ctx = len(context)
    if unwarped_min is None and photo_weight != 0.0:
        unwarped_min = unwarped_min_photometric(target, context, weights.alpha)

    levels = _build_pyramid(depth, num_scales)
    photo_total = 0.0
    smooth_total = 0.0
    masked_count = 0
    d_depth = np.zeros_like(depth) if want_grad else None
    d_poses = np.zeros((n_ctx, 6)) if want_grad else None

    for li, level in enumerate(levels):
        d_level = np.zeros_like(level.depth) if want_grad else None

        if photo_weight != 0.0:
            chains = []
            caches = []
            maps = []
            for src, pose in context:
                chain = geometry.warp_chain(level.depth, pose, k)
                synth, mask = warp.sample_bilinear(src, chain.coords, chain.valid)
                loss_map, cache = _photometric_forward(target, synth, mask, weights.alpha)
                chains.append(chain)
                caches.append(cache)
                maps.append(loss_map)

            stacked = np.stack(maps, axis=0)
            min_map = stacked.min(axis=0)
            any_valid = np.isfinite(min_map)
            argmin = stacked.argmin(axis=0)
            with np.errstate(invalid="ignore"):
                static_mask = unwarped_min > min_map
            photo_mask = static_mask & any_valid
            m_count = int(photo_mask.sum())
            if m_count == 0:
                raise DegenerateMaskError(
                    "static-pixel mask and warp validity removed every pixel"
                )
            photo_total += _stable_sum(np.where(photo_mask, min_map, 0.0)) / m_count
            if li == 0:
                masked_count = m_count

        smooth_val, smooth_cache = _smoothness_forward(level.depth, target)
        level_w = 2.0**-li
        smooth_total += level_w * smooth_val

        if want_grad:
            if photo_weight != 0.0:
                upstream0 = photo_weight * photo_mask / (m_count * len(levels))
                for s, (src, pose) in enumerate(context):
                    u_s = np.where(argmin == s, upstream0, 0.0)
                    if not u_s.any():
                        continue
                    d_synth = _photometric_backward(caches[s], u_s)
                    d_coords = warp.sample_bilinear_grad(
                        src, chains[s].coords, chains[s].valid, d_synth
                    )
                    g3 = np.einsum(
                        "hwij,hwi->hwj",
                        geometry.projection_jacobian(chains[s].points, k),
                        d_coords,
                    )
                    rot = pose.rotation_matrix()
                    d_level += np.einsum("hwj,hwj->hw", g3, chains[s].rays @ rot.T)
                    p_target = level.depth[..., None] * chains[s].rays
                    for i, drot in enumerate(pose.rotation_jacobians()):
                        d_poses[s, i] += np.einsum("hwj,hwj->", g3, p_target @ drot.T)
                    d_poses[s, 3:] += g3.sum(axis=(0, 1))

            smooth_up = weights.lambda_smooth * level_w / len(levels)
            if smooth_up != 0.0:
                d_level += smooth_up * _smoothness_backward(smooth_cache, level.depth)

            if level.row_op is None:
                d_depth += d_level
            else:
                d_depth += level.row_op.T @ d_level @ level.col_op

    photo = photo_total / len(levels)
    smooth = smooth_total / len(levels)

    rep_val = 0.0
    rep_count = 0
    rep_dropped = 0
    if labels is not None and weights.lambda_rep > 0:
        if supervised == "rep":
            scale = weights.lambda_rep / n_ctx
            for s, (_, pose) in enumerate(context):
                val, cnt, drp, d_pred, d_pose6 = _rep_forward(
                    depth, labels, pose, k, want_grad
                )
                rep_val += val / n_ctx
                rep_count = max(rep_count, cnt)
                rep_dropped += drp
                if want_grad:
                    d_depth += scale * d_pred
                    d_poses[s] += scale * d_pose6
        else:
            err, shared = _shared_errors(depth, labels)
            rep_count = int(shared.sum())
            if supervised == "l1":
                rep_val = float(np.abs(err).mean())
                d_err = np.sign(err) / rep_count
            else:
                abs_err = np.abs(err)
                c = 0.2 * float(abs_err.max())
                if c <= 0:
                    rep_val = 0.0
                    d_err = np.zeros_like(err)
                else:
                    quad = (err * err + c * c) / (2.0 * c)
                    rep_val = float(np.where(abs_err <= c, abs_err, quad).mean())
                    d_err = np.where(abs_err <= c, np.sign(err), err / c) / rep_count
            if want_grad:
                d_sup = np.zeros_like(depth)
                d_sup[shared] = d_err
                d_depth += weights.lambda_rep * d_sup

    total = photo_weight * photo + weights.lambda_smooth * smooth + weights.lambda_rep * rep_val
    breakdown = LossBreakdown(
        photo=photo,
        smooth=smooth,
        rep=rep_val,
        total=total,
        masked_pixel_count=masked_count,
        rep_pixel_count=rep_count,
        rep_dropped_behind=rep_dropped,
    )
    return breakdown, d_depth, d_poses


def total_loss(
    target: np.ndarray,
    context: ContextSet,
    depth: np.ndarray,
    k: CameraIntrinsics,
    weights: LossWeights,
    labels: np.ndarray | None = None,
    num_scales: int = 1,
    supervised: str = "rep",
    unwarped_min: np.ndarray | None = None,
    photo_weight: float = 1.0,
) -> LossBreakdown:
    """Evaluate the full objective; see the module docstring for the terms.

    The photometric term averages the per-pixel minimum over sources, over
    pixels kept by both the static-pixel mask and warp validity. The
    supervised term is averaged over context poses. labels is a sparse depth
    raster (0 = unlabeled); it may be omitted when lambda_rep is 0.
    unwarped_min can carry a precomputed unwarped_min_photometric map (it is
    constant while depth and poses change).
    """
    breakdown, _, _ = _objective(
        target, context, depth, k, weights, labels,
        num_scales=num_scales, supervised=supervised, want_grad=False,
        unwarped_min=unwarped_min, photo_weight=photo_weight,
    )
    return breakdown


def total_loss_grad(
    target: np.ndarray,
    context: ContextSet,
    depth: np.ndarray,
    k: CameraIntrinsics,
    weights: LossWeights,
    labels: np.ndarray | None = None,
    num_scales: int = 1,
    supervised: str = "rep",
    unwarped_min: np.ndarray | None = None,
    photo_weight: float = 1.0,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Objective value plus exact gradients w.r.t. every depth pixel and the
    6 pose parameters (alpha, beta, gamma, tx, ty, tz) of every context.

    Masks, argmin source selections and validity flags are held constant, so
    these are the piecewise gradients away from switching boundaries.
    """
    breakdown, d_depth, d_poses = _objective(
        target, context, depth, k, weights, labels,
        num_scales=num_scales, supervised=supervised, want_grad=True,
        unwarped_min=unwarped_min, photo_weight=photo_weight,
    )
    return breakdown, d_depth, d_poses
