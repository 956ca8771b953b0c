"""Aggregated feature channels and the scale-approximated channel pyramid.

Ten channels per image: 3 LUV color planes, normalized gradient magnitude,
and 6 soft-binned gradient-orientation planes. Full-resolution planes are
summed over non-overlapping 4x4 blocks, so a w x h detection window reads
w*h*10/16 values by pure lookup.

A pyramid computes channels exactly at one scale per octave and fills the
intermediate scales by resampling the nearest exact level and applying a
per-channel power law in the scale ratio.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .annotations import BBox2D
from .validation import check_image

CELL = 4  # aggregation block edge, pixels
N_CHANNELS = 10
N_ORIENT_BINS = 6

# Gradient-magnitude normalization: M / (M * triangle_11x11 + EPS_NORM),
# tuned for inputs scaled to [0, 1].
EPS_NORM = 0.005
NORM_RADIUS = 5
SMOOTH_RADIUS = 1

# Power-law exponents used when none are estimated from data: color channels
# are scale-covariant (0), gradient-derived channels gain energy as
# resolution drops.
DEFAULT_LAMBDAS = np.array([0.0, 0.0, 0.0] + [0.11] * 7)

# Linear-RGB -> XYZ (D65) and LUV rescale constants. Each LUV plane is
# affinely mapped to [0, 1]: L/100, (u + 134)/354, (v + 140)/262.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_U = 0.19783982  # 4*Xn / (Xn + 15*Yn + 3*Zn), D65
_WHITE_V = 0.46833631  # 9*Yn / (Xn + 15*Yn + 3*Zn), D65
_LUV_OFFSET = np.array([0.0, 134.0, 140.0])
_LUV_SCALE = np.array([100.0, 354.0, 262.0])


@dataclass(frozen=True)
class ChannelStack:
    """Aggregated channels of one image at one scale: (10, Ha, Wa) cells."""

    planes: np.ndarray
    scale: float
    shrink: int = CELL

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != N_CHANNELS:
            raise ValueError(
                f"planes must be ({N_CHANNELS}, Ha, Wa), got {self.planes.shape}"
            )

    @property
    def height_a(self) -> int:
        return self.planes.shape[1]

    @property
    def width_a(self) -> int:
        return self.planes.shape[2]


@dataclass(frozen=True)
class ChannelPyramid:
    """Ordered channel stacks at a strictly decreasing geometric scale ladder."""

    levels: list[ChannelStack]
    scales: np.ndarray
    lambdas: np.ndarray = field(default_factory=lambda: DEFAULT_LAMBDAS.copy())

    def __len__(self) -> int:
        return len(self.levels)


def _triangle_kernel(radius: int) -> np.ndarray:
    k = np.concatenate([np.arange(1, radius + 2), np.arange(radius, 0, -1)])
    return k / k.sum()


def _conv1d_replicate(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    out = np.zeros_like(arr)
    idx = [slice(None)] * arr.ndim
    n = arr.shape[axis]
    for k, w in enumerate(kernel):
        idx[axis] = slice(k, k + n)
        out += w * padded[tuple(idx)]
    return out


def triangle_smooth(plane: np.ndarray, radius: int) -> np.ndarray:
    """Separable triangle filter with replicated borders."""
    if radius < 1:
        return plane.copy()
    k = _triangle_kernel(radius)
    return _conv1d_replicate(_conv1d_replicate(plane, k, 0), k, 1)


def rgb_to_luv(image: np.ndarray) -> np.ndarray:
    """CIE LUV planes of an RGB image, each rescaled to [0, 1].

    Input is treated as linear RGB; the conversion uses the D65 white
    point and the rescale constants documented at the top of this module.
    """
    image = check_image(image)
    xyz = image @ _RGB_TO_XYZ.T
    x, y, z = xyz[..., 0], xyz[..., 1], xyz[..., 2]

    # CIE 1976 lightness with the linear toe below (6/29)^3
    thresh = (6.0 / 29.0) ** 3
    lum = np.where(
        y > thresh, 116.0 * np.cbrt(y) - 16.0, ((29.0 / 3.0) ** 3) * y
    )

    denom = x + 15.0 * y + 3.0 * z
    safe = denom > 1e-12
    up = np.where(safe, 4.0 * x / np.where(safe, denom, 1.0), _WHITE_U)
    vp = np.where(safe, 9.0 * y / np.where(safe, denom, 1.0), _WHITE_V)
    u = 13.0 * lum * (up - _WHITE_U)
    v = 13.0 * lum * (vp - _WHITE_V)

    luv = np.stack([lum, u, v])
    luv = (luv + _LUV_OFFSET[:, None, None]) / _LUV_SCALE[:, None, None]
    return np.clip(luv, 0.0, 1.0)


def gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized gradient magnitude and orientation in [0, pi).

    Per pixel: centered differences (replicated borders) on each color
    channel of the lightly smoothed image; magnitude is the largest of the
    three per-channel magnitudes and orientation comes from that channel.
    The magnitude is then normalized by its own 11x11 triangle-smoothed
    version plus ``EPS_NORM``.
    """
    image = check_image(image)
    smoothed = np.stack(
        [triangle_smooth(image[..., c], SMOOTH_RADIUS) for c in range(3)], axis=-1
    )
    padded_x = np.pad(smoothed, ((0, 0), (1, 1), (0, 0)), mode="edge")
    padded_y = np.pad(smoothed, ((1, 1), (0, 0), (0, 0)), mode="edge")
    gx = 0.5 * (padded_x[:, 2:, :] - padded_x[:, :-2, :])
    gy = 0.5 * (padded_y[2:, :, :] - padded_y[:-2, :, :])

    mag_c = np.sqrt(gx * gx + gy * gy)
    best = np.argmax(mag_c, axis=-1)
    take = best[..., None]
    mag = np.take_along_axis(mag_c, take, axis=-1)[..., 0]
    bx = np.take_along_axis(gx, take, axis=-1)[..., 0]
    by = np.take_along_axis(gy, take, axis=-1)[..., 0]

    orient = np.mod(np.arctan2(by, bx), math.pi)
    orient[orient >= math.pi] = 0.0  # mod can return pi through rounding

    mag_smooth = triangle_smooth(mag, NORM_RADIUS)
    mag = mag / (mag_smooth + EPS_NORM)
    return mag, orient


def orientation_histogram(
    magnitude: np.ndarray, orientation: np.ndarray, bins: int = N_ORIENT_BINS
) -> np.ndarray:
    """Soft-bin magnitude into ``bins`` orientation planes over [0, pi).

    Bin centers sit at (b + 1/2) * pi/bins; each pixel's magnitude is
    linearly split between the two nearest centers (wrapping pi -> 0), so
    the planes sum back to the magnitude plane exactly.
    """
    if magnitude.shape != orientation.shape:
        raise ValueError("magnitude and orientation must have the same shape")
    width = math.pi / bins
    t = orientation / width - 0.5
    b0 = np.floor(t)
    frac = t - b0
    b0 = b0.astype(np.int64) % bins
    b1 = (b0 + 1) % bins

    planes = np.zeros((bins,) + magnitude.shape)
    for b in range(bins):
        planes[b] = magnitude * (
            (b0 == b) * (1.0 - frac) + (b1 == b) * frac
        )
    return planes


def aggregate(planes: np.ndarray, block: int = CELL) -> np.ndarray:
    """Sum planes over non-overlapping block x block cells.

    Partial border blocks are summed as-is, so a (C, H, W) input becomes
    (C, ceil(H/block), ceil(W/block)).
    """
    if block < 1:
        raise ValueError("block must be >= 1")
    if block == 1:
        return planes.copy()
    single = planes.ndim == 2
    if single:
        planes = planes[None]
    c, h, w = planes.shape
    ha, wa = -(-h // block), -(-w // block)
    padded = np.zeros((c, ha * block, wa * block), dtype=planes.dtype)
    padded[:, :h, :w] = planes
    out = padded.reshape(c, ha, block, wa, block).sum(axis=(2, 4))
    return out[0] if single else out


def compute_channels(image: np.ndarray) -> np.ndarray:
    """Full-resolution (10, H, W) channel planes of an image."""
    luv = rgb_to_luv(image)
    mag, orient = gradients(image)
    hist = orientation_histogram(mag, orient)
    return np.concatenate([luv, mag[None], hist])


def aggregate_and_smooth(planes: np.ndarray, block: int = CELL) -> np.ndarray:
    """Cell aggregation followed by a radius-1 triangle smoothing of cells.

    The post-aggregation smoothing stabilizes cell values against grid
    misalignment and makes power-law level approximation usable per cell.
    """
    cells = aggregate(planes, block=block)
    return np.stack([triangle_smooth(p, 1) for p in cells])


def compute_stack(image: np.ndarray, scale: float = 1.0) -> ChannelStack:
    """Channels of an image, aggregated into smoothed cells."""
    return ChannelStack(planes=aggregate_and_smooth(compute_channels(image)), scale=scale)


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable resample: linear interpolation up, exact area averaging down.

    Area averaging on the shrinking axes antialiases, so one call matches a
    progressive downscale. 2-D arrays are resized directly; 3-D arrays are
    treated as (H, W, C) images. Use :func:`resize_planes` for (C, H, W)
    channel stacks.
    """
    if arr.ndim == 2:
        return _resize2d(arr, out_h, out_w)
    if arr.ndim == 3:
        return np.stack(
            [_resize2d(arr[..., c], out_h, out_w) for c in range(arr.shape[2])],
            axis=-1,
        )
    raise ValueError(f"cannot resize array of shape {arr.shape}")


def resize_planes(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a (C, H, W) plane stack."""
    return np.stack([_resize2d(p, out_h, out_w) for p in planes])


def _resize2d(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    out = _resample_axis(plane, out_h, 0)
    return np.ascontiguousarray(_resample_axis(out, out_w, 1))


def _resample_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_out == n_in:
        return arr
    moved = np.moveaxis(arr, axis, 0)
    if n_out < n_in:
        out = _area_downsample(moved, n_out)
    else:
        out = _linear_upsample(moved, n_out)
    return np.moveaxis(out, 0, axis)


def _area_downsample(arr: np.ndarray, n_out: int) -> np.ndarray:
    n_in = arr.shape[0]
    f = n_in / n_out
    cum = np.concatenate(
        [np.zeros((1,) + arr.shape[1:]), np.cumsum(arr, axis=0)], axis=0
    )
    bounds = np.arange(n_out + 1) * f
    lo = np.minimum(np.floor(bounds).astype(np.int64), n_in)
    frac = (bounds - lo).reshape((-1,) + (1,) * (arr.ndim - 1))
    vals = cum[lo] + frac * arr[np.minimum(lo, n_in - 1)]
    return (vals[1:] - vals[:-1]) / f


def _linear_upsample(arr: np.ndarray, n_out: int) -> np.ndarray:
    n_in = arr.shape[0]
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(centers)
    frac = (centers - lo).reshape((-1,) + (1,) * (arr.ndim - 1))
    i0 = np.clip(lo, 0, n_in - 1).astype(np.int64)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.int64)
    return arr[i0] * (1.0 - frac) + arr[i1] * frac


def scaled_size(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


def build_pyramid(
    image: np.ndarray,
    scales_per_octave: int = 8,
    n_approx_per_real: int = 7,
    lambdas: np.ndarray | None = None,
    min_size_px: tuple[int, int] = (CELL, CELL),
) -> ChannelPyramid:
    """Channel pyramid with one exact octave level and power-law fill-in.

    ``min_size_px`` is the (width, height) in pixels of the smallest window
    any model will slide (including its padding); levels smaller than that
    are not built. An image already smaller than ``min_size_px`` yields an
    empty pyramid.
    """
    if scales_per_octave < 1:
        raise ValueError("scales_per_octave must be >= 1")
    if n_approx_per_real < 0:
        raise ValueError("n_approx_per_real must be >= 0")
    image = check_image(image)
    lambdas = DEFAULT_LAMBDAS.copy() if lambdas is None else np.asarray(lambdas, float)
    if lambdas.shape != (N_CHANNELS,):
        raise ValueError(f"lambdas must have shape ({N_CHANNELS},)")

    h, w = image.shape[:2]
    min_w, min_h = min_size_px
    scales = []
    i = 0
    while True:
        s = 2.0 ** (-i / scales_per_octave)
        if scaled_size(w, s) < min_w or scaled_size(h, s) < min_h:
            break
        scales.append(s)
        i += 1
    if not scales:
        return ChannelPyramid(levels=[], scales=np.empty(0), lambdas=lambdas)

    period = n_approx_per_real + 1
    real_idx = [i for i in range(len(scales)) if i % period == 0]
    real_stacks: dict[int, ChannelStack] = {}
    for i in real_idx:
        s = scales[i]
        resized = image if s == 1.0 else np.clip(
            resize_bilinear(image, scaled_size(h, s), scaled_size(w, s)), 0.0, 1.0
        )
        real_stacks[i] = compute_stack(resized, scale=s)

    levels = []
    for i, s in enumerate(scales):
        if i in real_stacks:
            levels.append(real_stacks[i])
            continue
        nearest = min(real_idx, key=lambda j: (abs(j - i), j))
        src = real_stacks[nearest]
        out_h = -(-scaled_size(h, s) // CELL)
        out_w = -(-scaled_size(w, s) // CELL)
        planes = resize_planes(src.planes, out_h, out_w)
        ratio = s / scales[nearest]
        planes = planes * (ratio ** (-lambdas))[:, None, None]
        levels.append(ChannelStack(planes=planes, scale=s))

    return ChannelPyramid(levels=levels, scales=np.array(scales), lambdas=lambdas)


def estimate_lambdas(images, scales_per_octave: int = 4) -> np.ndarray:
    """Fit per-channel power-law exponents from sample images.

    For each image and each scale s in one octave below 1, the log ratio of
    mean channel energy to the unscaled level is regressed (through the
    origin) against log s; the fitted slope m gives lambda = -m. A channel
    with no usable samples falls back to 0 with a warning.
    """
    xs: list[float] = []
    ys: list[list[float]] = [[] for _ in range(N_CHANNELS)]
    test_scales = [
        2.0 ** (-k / scales_per_octave) for k in range(1, scales_per_octave + 1)
    ]
    n_images = 0
    for image in images:
        image = check_image(image)
        n_images += 1
        h, w = image.shape[:2]
        base = compute_stack(image).planes.mean(axis=(1, 2))
        for s in test_scales:
            resized = np.clip(
                resize_bilinear(image, scaled_size(h, s), scaled_size(w, s)), 0, 1
            )
            mean_s = compute_stack(resized, scale=s).planes.mean(axis=(1, 2))
            xs.append(math.log(s))
            for c in range(N_CHANNELS):
                if base[c] > 1e-12 and mean_s[c] > 1e-12:
                    ys[c].append(math.log(mean_s[c] / base[c]))
                else:
                    ys[c].append(math.nan)
    if n_images == 0:
        raise ValueError("estimate_lambdas needs at least one image")

    x = np.asarray(xs)
    lambdas = np.zeros(N_CHANNELS)
    for c in range(N_CHANNELS):
        y = np.asarray(ys[c])
        ok = np.isfinite(y)
        denom = float(np.sum(x[ok] * x[ok]))
        if not np.any(ok) or denom < 1e-12:
            warnings.warn(
                f"channel {c}: degenerate power-law fit, falling back to lambda=0"
            )
            continue
        lambdas[c] = -float(np.sum(x[ok] * y[ok]) / denom)
    return lambdas


def extract_window(stack: ChannelStack, window: BBox2D) -> np.ndarray:
    """Concatenate the window's cells from all 10 planes.

    ``window`` is in cell units with integer corners. Ordering is fixed:
    channel-major, then row-major within each plane.
    """
    x1, y1, x2, y2 = (int(window.x1), int(window.y1), int(window.x2), int(window.y2))
    if (x1, y1, x2, y2) != (window.x1, window.y1, window.x2, window.y2):
        raise ValueError("window must have integer cell coordinates")
    if x1 < 0 or y1 < 0 or x2 > stack.width_a or y2 > stack.height_a:
        raise ValueError(
            f"window {window} out of bounds for stack "
            f"{stack.width_a}x{stack.height_a}"
        )
    return stack.planes[:, y1:y2, x1:x2].ravel()


def sample_rect_bilinear(
    image: np.ndarray, x1: float, y1: float, x2: float, y2: float,
    out_h: int, out_w: int,
) -> np.ndarray:
    """Resample an arbitrary image rectangle to a fixed size.

    The rectangle snaps to whole pixels (sub-pixel edges are dropped) and
    may extend beyond the image; out-of-bounds rows/columns replicate the
    border. Downscaling axes are area-averaged like :func:`resize_bilinear`.
    """
    h, w = image.shape[:2]
    ix1, iy1 = int(math.floor(x1)), int(math.floor(y1))
    ix2, iy2 = max(int(math.ceil(x2)), ix1 + 1), max(int(math.ceil(y2)), iy1 + 1)
    if ix2 <= 0 or ix1 >= w or iy2 <= 0 or iy1 >= h:
        raise ValueError("rectangle does not intersect the image")
    crop = image[max(iy1, 0) : min(iy2, h), max(ix1, 0) : min(ix2, w)]
    pads = (
        (max(-iy1, 0), max(iy2 - h, 0)),
        (max(-ix1, 0), max(ix2 - w, 0)),
        (0, 0),
    )
    if any(p for pair in pads for p in pair):
        crop = np.pad(crop, pads, mode="edge")
    return resize_bilinear(crop, out_h, out_w)


def crop_channel_descriptor(
    image: np.ndarray, bbox: BBox2D, out_w: int, out_h: int
) -> np.ndarray:
    """Aggregated-channel vector of a crop resized to a common size.

    Used for visual clustering: positives are resampled to the mean
    training size before channel extraction so descriptors align.
    """
    image = check_image(image)
    h, w = image.shape[:2]
    x1 = int(np.clip(math.floor(bbox.x1), 0, w - 1))
    x2 = int(np.clip(math.ceil(bbox.x2), x1 + 1, w))
    y1 = int(np.clip(math.floor(bbox.y1), 0, h - 1))
    y2 = int(np.clip(math.ceil(bbox.y2), y1 + 1, h))
    crop = image[y1:y2, x1:x2]
    resized = np.clip(resize_bilinear(crop, out_h, out_w), 0.0, 1.0)
    return aggregate_and_smooth(compute_channels(resized)).ravel()
