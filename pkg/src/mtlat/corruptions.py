"""Common corruptions at desk resolution.

Every kind is driven by one scalar strength (0 is the identity) so that the
severity calibration can treat all kinds alike. ``SEVERITY_TABLE`` maps each
kind to its five default strengths. Random draws depend only on the seed and
the kind, not on the strength, so one image sees the same noise pattern,
occluder position or rotation direction at every severity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CalibrationError
from .jpeg import jpeg_roundtrip
from .seeding import derive_seed

KINDS = (
    "gaussian_noise", "shot_noise", "impulse_noise",
    "defocus_blur", "glass_blur", "motion_blur", "zoom_blur",
    "snow", "frost", "fog", "brightness",
    "contrast", "elastic", "pixelate", "jpeg",
    "occlusion", "color_distortion", "translation", "rotation",
)
IMAGENET_C_KINDS = KINDS[:15]
GEOMETRIC_KINDS = ("translation", "rotation")

# Calibrated on the desk standard model (configs/desk.yaml, seed 0): severity 1
# costs about 5 accuracy points and severity 5 about 30, linear in between.
# jpeg tops out near 20 points at quality 1, so its upper target is 19.5.
SEVERITY_TABLE = {
    "gaussian_noise": (0.1094, 0.1445, 0.1797, 0.2148, 0.25),
    "shot_noise": (0.0312, 0.0566, 0.082, 0.1074, 0.1328),  # 1 / Poisson rate
    "impulse_noise": (0.0312, 0.0664, 0.1016, 0.1367, 0.1719),
    "defocus_blur": (1.5, 2.375, 3.25, 4.125, 5),  # disk radius, px
    "glass_blur": (0.75, 2.0508, 3.3516, 4.6523, 5.9531),
    "motion_blur": (4.375, 7.6562, 10.9375, 14.2188, 17.5),  # line length, px
    "zoom_blur": (0.25, 0.625, 1, 1.375, 1.75),  # max zoom - 1
    "snow": (0.5469, 0.6641, 0.7812, 0.8984, 1.0156),
    "frost": (0.7812, 0.9668, 1.1523, 1.3379, 1.5234),
    "fog": (0.75, 1.0781, 1.4062, 1.7344, 2.0625),
    "brightness": (0.25, 0.2969, 0.3438, 0.3906, 0.4375),
    "contrast": (0.5, 0.5645, 0.6289, 0.6934, 0.7578),  # 1 - contrast factor
    "elastic": (4, 6.9688, 9.9375, 12.9062, 15.875),  # max displacement, px
    "pixelate": (0.6062, 0.6745, 0.7427, 0.8109, 0.8791),  # 1 - relative resolution
    "jpeg": (89.7188, 91.6523, 93.5859, 95.5195, 97.4531),  # 100 - quality
    "occlusion": (9, 11, 13, 15, 17),  # square side, px
    "color_distortion": (0.125, 0.1562, 0.1875, 0.2188, 0.25),  # added to one channel
    "translation": (2, 3.5, 5, 6.5, 8),  # px
    "rotation": (11.25, 17.8125, 24.375, 30.9375, 37.5),  # degrees
}

# search interval of the severity calibration; rotation stops at 60 degrees
# because near-symmetric shapes make larger angles hurt less, not more
STRENGTH_MAX = {
    "gaussian_noise": 1.0, "shot_noise": 1.0, "impulse_noise": 1.0,
    "defocus_blur": 8.0, "glass_blur": 6.0, "motion_blur": 20.0, "zoom_blur": 2.0,
    "snow": 2.5, "frost": 2.5, "fog": 6.0, "brightness": 1.0,
    "contrast": 1.0, "elastic": 16.0, "pixelate": 0.97, "jpeg": 99.0,
    "occlusion": 32.0, "color_distortion": 1.0, "translation": 32.0, "rotation": 60.0,
}

OCCLUSION_GREY = 0.5


def severity_strength(kind, severity, table=None):
    if kind not in KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    if not isinstance(severity, (int, np.integer)) or not 1 <= severity <= 5:
        raise ValueError(f"severity must be an integer in 1..5, got {severity!r}")
    return float((table or SEVERITY_TABLE)[kind][severity - 1])


# --------------------------------------------------------------------------
# helpers

def _per_channel(fn, x):
    return np.stack([fn(x[..., c]) for c in range(x.shape[-1])], axis=-1)


def disk_kernel(radius):
    """Normalized disk with a one-pixel linear edge ramp; radius 0 is the unit impulse."""
    r = int(np.ceil(radius)) + 1
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = np.clip(radius + 1.0 - np.hypot(yy, xx), 0.0, 1.0)
    return k / k.sum()


def motion_kernel(length, angle_deg):
    """Normalized one-sided line kernel of the given length in pixels."""
    r = int(np.ceil(length)) + 1
    k = np.zeros((2 * r + 1, 2 * r + 1))
    n = max(2, int(np.ceil(length * 4)) + 1)
    t = np.linspace(0.0, length, n)
    a = np.deg2rad(angle_deg)
    ys, xs = r - t * np.sin(a), r + t * np.cos(a)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            np.add.at(k, (y0 + dy, x0 + dx), wy * wx)
    return k / k.sum()


def value_noise(rng, shape, octaves, base_cells=2, persistence=0.5):
    """Fractal value noise in [0, 1]: bilinearly upsampled random grids summed over octaves."""
    H, W = shape
    out = np.zeros(shape)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        grid = rng.random((cells + 1, cells + 1))
        yy = np.linspace(0, cells, H)
        xx = np.linspace(0, cells, W)
        Y, X = np.meshgrid(yy, xx, indexing="ij")
        out += amp * ndimage.map_coordinates(grid, [Y, X], order=1)
        total += amp
        amp *= persistence
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros(shape)


@lru_cache(maxsize=None)
def _area_matrix(n_out, n_in):
    """Row-stochastic matrix averaging input cells over each output cell's footprint."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        a, b = i * scale, (i + 1) * scale
        for j in range(int(np.floor(a)), min(n_in, int(np.ceil(b)))):
            m[i, j] = min(b, j + 1) - max(a, j)
    return m / m.sum(axis=1, keepdims=True)


def _warp(x, src_y, src_x):
    """Bilinear resample at source coordinates; sources outside the frame become exactly 0."""
    H, W, _ = x.shape
    inside = (src_y >= 0) & (src_y <= H - 1) & (src_x >= 0) & (src_x <= W - 1)
    out = _per_channel(lambda ch: ndimage.map_coordinates(ch, [src_y, src_x], order=1, mode="nearest"), x)
    out[~inside] = 0.0
    return out


def _grid(shape):
    H, W = shape[:2]
    return np.mgrid[0:H, 0:W].astype(np.float64)


# --------------------------------------------------------------------------
# kinds: fn(x, strength, rng) -> image (clipped by the caller)

def _gaussian_noise(x, s, rng):
    return x + s * rng.standard_normal(x.shape)


def _shot_noise(x, s, rng):
    rate = 1.0 / s
    return rng.poisson(x * rate) / rate


def _impulse_noise(x, s, rng):
    u = rng.random(x.shape)
    return np.where(u < s / 2, 0.0, np.where(u > 1 - s / 2, 1.0, x))


def _defocus_blur(x, s, rng):
    k = disk_kernel(s)
    return _per_channel(lambda ch: ndimage.convolve(ch, k, mode="mirror"), x)


def _glass_blur(x, s, rng):
    sigma = 0.3 * s
    delta = 1 + int(s >= 2.0)
    iters = 1 + int(s >= 1.5)
    H, W, _ = x.shape
    y = _per_channel(lambda ch: ndimage.gaussian_filter(ch, sigma, mode="mirror"), x)
    offsets = rng.integers(-2, 2, size=(2, H, W, 2))  # drawn once, cropped to delta
    offsets = np.clip(offsets, -delta, delta - 1)
    for it in range(iters):
        for h in range(H - delta, delta, -1):
            for w in range(W - delta, delta, -1):
                dy, dx = offsets[it, h, w]
                hp, wp = h + dy, w + dx
                tmp = y[h, w].copy()
                y[h, w] = y[hp, wp]
                y[hp, wp] = tmp
    return _per_channel(lambda ch: ndimage.gaussian_filter(ch, sigma, mode="mirror"), y)


def _motion_blur(x, s, rng):
    k = motion_kernel(s, rng.uniform(-45.0, 45.0))
    return _per_channel(lambda ch: ndimage.convolve(ch, k, mode="nearest"), x)


def _zoom_blur(x, s, rng):
    H, W, _ = x.shape
    n = max(1, int(np.ceil(s / 0.01)))
    yy, xx = _grid(x.shape)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    acc = x.copy()
    for k in range(1, n + 1):
        z = 1.0 + s * k / n
        acc += _per_channel(lambda ch: ndimage.map_coordinates(
            ch, [cy + (yy - cy) / z, cx + (xx - cx) / z], order=1, mode="nearest"), x)
    return acc / (n + 1)


def _snow(x, s, rng):
    H, W, _ = x.shape
    field = ndimage.gaussian_filter(rng.standard_normal((H, W)), 0.7)
    field = field / field.std()
    flakes = np.clip((field - 1.5) / 1.0, 0.0, 1.0)
    flakes = ndimage.convolve(flakes, motion_kernel(2.0, rng.uniform(-135, -45)), mode="wrap")
    gray = x.mean(axis=-1, keepdims=True)
    washed = (1 - 0.4 * s) * x + 0.4 * s * np.maximum(x, gray * 1.5 + 0.5)
    return washed + s * flakes[..., None]


def _frost(x, s, rng):
    tex = value_noise(rng, x.shape[:2], octaves=4, base_cells=4)
    tint = np.array([0.85, 0.9, 1.0])
    return (1 - 0.3 * s) * x + 0.7 * s * tex[..., None] * tint


def _fog(x, s, rng):
    fog = value_noise(rng, x.shape[:2], octaves=3, base_cells=2, persistence=0.6)
    m = x.max()
    return (x + s * fog[..., None]) * m / (m + s)


def _brightness(x, s, rng):
    return x + s


def _contrast(x, s, rng):
    mean = x.mean(axis=(0, 1), keepdims=True)
    return (x - mean) * (1 - s) + mean


def _elastic(x, s, rng):
    H, W, _ = x.shape
    d = [ndimage.gaussian_filter(rng.uniform(-1, 1, (H, W)), 3.0, mode="reflect") for _ in range(2)]
    peak = max(np.abs(d[0]).max(), np.abs(d[1]).max(), 1e-12)
    yy, xx = _grid(x.shape)
    sy, sx = yy + s * d[0] / peak, xx + s * d[1] / peak
    return _per_channel(lambda ch: ndimage.map_coordinates(ch, [sy, sx], order=1, mode="reflect"), x)


def _pixelate(x, s, rng):
    H, W, _ = x.shape
    h, w = max(1, int(round(H * (1 - s)))), max(1, int(round(W * (1 - s))))
    dy, dx = _area_matrix(h, H), _area_matrix(w, W)
    uy, ux = _area_matrix(H, h), _area_matrix(W, w)
    small = np.tensordot(np.tensordot(dy, x, axes=(1, 0)), dx, axes=(1, 1))  # h, C, w
    return np.tensordot(np.tensordot(uy, small, axes=(1, 0)), ux, axes=(2, 1)).transpose(0, 2, 1)


def _jpeg(x, s, rng):
    return jpeg_roundtrip(x, quality=int(round(100 - s)))


def _occlusion(x, s, rng):
    H, W, _ = x.shape
    side = int(min(max(1, round(s)), min(H, W)))
    u = rng.random(2)
    top = int(u[0] * (H - side + 1))
    left = int(u[1] * (W - side + 1))
    out = x.copy()
    out[top:top + side, left:left + side] = OCCLUSION_GREY
    return out


def _color_distortion(x, s, rng):
    c = int(rng.integers(0, x.shape[-1]))
    out = x.copy()
    out[..., c] += s
    return out


def _translation(x, s, rng):
    a = rng.uniform(0, 2 * np.pi)
    yy, xx = _grid(x.shape)
    return _warp(x, yy - s * np.sin(a), xx - s * np.cos(a))


def _rotation(x, s, rng):
    H, W, _ = x.shape
    a = np.deg2rad(s if rng.random() < 0.5 else -s)
    yy, xx = _grid(x.shape)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    ry, rx = yy - cy, xx - cx
    # inverse map: output pixel samples the source rotated back by -a
    src_y = cy + np.cos(a) * ry - np.sin(a) * rx
    src_x = cx + np.sin(a) * ry + np.cos(a) * rx
    return _warp(x, src_y, src_x)


_FUNCS = {
    "gaussian_noise": _gaussian_noise, "shot_noise": _shot_noise, "impulse_noise": _impulse_noise,
    "defocus_blur": _defocus_blur, "glass_blur": _glass_blur, "motion_blur": _motion_blur,
    "zoom_blur": _zoom_blur, "snow": _snow, "frost": _frost, "fog": _fog, "brightness": _brightness,
    "contrast": _contrast, "elastic": _elastic, "pixelate": _pixelate, "jpeg": _jpeg,
    "occlusion": _occlusion, "color_distortion": _color_distortion, "translation": _translation,
    "rotation": _rotation,
}


# --------------------------------------------------------------------------

def corrupt_strength(kind, strength, image, seed):
    """Apply ``kind`` at a raw strength; strength 0 returns an exact copy."""
    if kind not in _FUNCS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    if strength < 0:
        raise ValueError("strength must be >= 0")
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected an HxWxC image, got shape {x.shape}")
    if strength == 0:
        return x.copy()
    rng = np.random.default_rng(derive_seed(seed, kind))
    return np.clip(_FUNCS[kind](x, float(strength), rng), 0.0, 1.0)


def apply_corruption(kind, severity, image, seed, table=None):
    """Corrupt one HxWxC image at severity 1..5."""
    return corrupt_strength(kind, severity_strength(kind, severity, table), image, seed)


def corrupt_batch(kind, strength, images, seed):
    """Corrupt a batch; image i uses the sub-seed ``derive_seed(seed, i)``."""
    return np.stack([corrupt_strength(kind, strength, img, derive_seed(seed, i))
                     for i, img in enumerate(images)]) if len(images) else np.asarray(images)


# --------------------------------------------------------------------------
# calibration

@dataclass
class Calibration:
    kind: str
    low: float
    high: float
    clean_accuracy: float
    drop_low: float
    drop_high: float
    table: tuple


def calibrate_severity(kind, model, split, seed=0, low_drop=5.0, high_drop=30.0, tol=1.0,
                       max_iter=25, accuracy_fn=None):
    """Find strengths that cost the reference model ``low_drop`` and ``high_drop`` accuracy points.

    Bisection over [0, STRENGTH_MAX[kind]] assuming accuracy falls with
    strength; severities 1..5 interpolate linearly between the two strengths.
    Raises CalibrationError when even the largest strength cannot reach
    ``high_drop``.
    """
    from .models import accuracy

    if accuracy_fn is None:
        def accuracy_fn(images):
            c, t = accuracy(model, images, split.labels)
            return 100.0 * c / t

    clean = accuracy_fn(split.images)
    cache = {}

    def drop(s):
        if s not in cache:
            cache[s] = clean - accuracy_fn(corrupt_batch(kind, s, split.images, seed))
        return cache[s]

    s_max = STRENGTH_MAX[kind]
    if drop(s_max) < high_drop - tol:
        raise CalibrationError(
            f"{kind}: strength range [0, {s_max}] reaches at most a {drop(s_max):.1f}-point drop, "
            f"{high_drop} needed")

    def search(target):
        lo, hi = 0.0, s_max
        best = s_max
        for _ in range(max_iter):
            mid = (lo + hi) / 2
            d = drop(mid)
            if abs(d - target) < abs(drop(best) - target):
                best = mid
            if abs(d - target) <= tol:
                return mid
            if d < target:
                lo = mid
            else:
                hi = mid
        return best

    low, high = search(low_drop), search(high_drop)
    table = tuple(float(v) for v in np.linspace(low, high, 5))
    return Calibration(kind, low, high, clean, drop(low), drop(high), table)


# --------------------------------------------------------------------------
# export

def to_uint8(image):
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_corrupted(images, names, kind, severity, seed, out_dir, table=None):
    """Write corrupted PNGs plus ``manifest.json`` (kind, severity, seed per image)."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for img, name in zip(images, names):
        img_seed = derive_seed(seed, "corrupt", name)
        out = apply_corruption(kind, severity, img, img_seed, table)
        stem = Path(name).stem
        fname = f"{stem}.png"
        arr = to_uint8(out)
        Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(out_dir / fname, format="PNG")
        rows.append({"source": name, "output": fname, "kind": kind, "severity": severity, "seed": img_seed})
    (out_dir / "manifest.json").write_text(json.dumps({"images": rows}, indent=2, sort_keys=True) + "\n")
    return rows
