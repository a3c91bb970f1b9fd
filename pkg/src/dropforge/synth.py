"""Procedural waterdrop video synthesis.

A sequence starts from a seeded field of elliptical drops on the virtual
windshield.  Every following frame shifts each drop one step along its
drift direction and grows its blur kernel, imitating wind-driven motion
and evaporation.  Rendering produces (clean, degraded, mask) triplets:
inside each drop the background is warped (vertically flipped and
contracted toward the drop center), blended with the original by the
drop's refraction strength, then box-blurred; pixels outside every drop
are left untouched.

All randomness flows through a seeded PCG64 generator, so a (frames,
seed, config) triple always produces byte-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

WARP_CONTRACTION = 0.5  # offset scale factor is WARP_CONTRACTION * d^2


@dataclass
class SynthConfig:
    """Knobs of the synthesis algorithm; defaults follow the drop model."""

    seq_len: int = 5
    min_drops: int = 150
    max_drops: int = 400
    radius_min: float = 2.0
    radius_max: float = 8.0
    blur_min: int = 3
    blur_init_max: int = 9
    blur_step: int = 4
    blur_max: int = 21
    shift_px: float = 1.0
    refraction_min: float = 0.3
    refraction_max: float = 1.0
    # dataset-level knobs used by the CLI synth path
    num_sequences: int = 4
    width: int = 64
    height: int = 64

    def validate(self) -> "SynthConfig":
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")
        if not 1 <= self.min_drops <= self.max_drops:
            raise ConfigError(
                f"drop count range [{self.min_drops}, {self.max_drops}] is "
                "degenerate")
        if not 2.0 <= self.radius_min <= self.radius_max:
            raise ConfigError(
                f"radius range [{self.radius_min}, {self.radius_max}] is "
                "degenerate (radii must be >= 2)")
        if self.blur_min % 2 == 0 or self.blur_init_max % 2 == 0:
            raise ConfigError("initial blur kernel bounds must be odd")
        if not 3 <= self.blur_min <= self.blur_init_max <= self.blur_max <= 21:
            raise ConfigError(
                f"blur kernel range [{self.blur_min}, {self.blur_init_max}, "
                f"{self.blur_max}] must satisfy 3 <= min <= init_max <= max <= 21")
        if self.blur_step < 0:
            raise ConfigError(f"blur_step must be >= 0, got {self.blur_step}")
        if not 0.3 <= self.refraction_min <= self.refraction_max <= 1.0:
            raise ConfigError(
                f"refraction range [{self.refraction_min}, "
                f"{self.refraction_max}] must lie within [0.3, 1.0]")
        return self


@dataclass
class Drop:
    """One waterdrop: subpixel center, ellipse radii, blur state, drift."""

    center: tuple[float, float]
    radii: tuple[float, float]
    blur_kernel: int
    drift_dir: tuple[float, float]
    refraction_strength: float


@dataclass
class DropField:
    """All drops on the windshield for one frame of one sequence."""

    drops: list[Drop]
    rng_state: dict = field(repr=False, default_factory=dict)


@dataclass
class Triplet:
    """Supervision unit: clean frame, degraded frame, binary drop mask."""

    clean: np.ndarray      # (H, W, 3) float64 in [0, 1]
    degraded: np.ndarray   # (H, W, 3) float64 in [0, 1]
    mask: np.ndarray       # (H, W) uint8 in {0, 1}


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide generator: PCG64 under numpy's Generator API."""
    return np.random.Generator(np.random.PCG64(seed))


def seed_drops(rng: np.random.Generator, width: int, height: int,
               cfg: SynthConfig) -> DropField:
    """Sample a first-frame drop field; fully determined by the rng state."""
    cfg.validate()
    if width < 64 or height < 64:
        raise ConfigError(f"frame extents must be >= 64, got {width}x{height}")
    count = int(rng.integers(cfg.min_drops, cfg.max_drops + 1))
    xs = rng.uniform(0.0, width, size=count)
    ys = rng.uniform(0.0, height, size=count)
    rx = rng.uniform(cfg.radius_min, cfg.radius_max, size=count)
    ry = rng.uniform(cfg.radius_min, cfg.radius_max, size=count)
    odd_choices = np.arange(cfg.blur_min, cfg.blur_init_max + 1, 2)
    blur = rng.choice(odd_choices, size=count)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=count)
    refr = rng.uniform(cfg.refraction_min, cfg.refraction_max, size=count)
    drops = [
        Drop(center=(float(xs[i]), float(ys[i])),
             radii=(float(rx[i]), float(ry[i])),
             blur_kernel=int(blur[i]),
             drift_dir=(float(np.cos(angle[i])), float(np.sin(angle[i]))),
             refraction_strength=float(refr[i]))
        for i in range(count)
    ]
    return DropField(drops=drops, rng_state=rng.bit_generator.state)


def advance(field_: DropField, cfg: SynthConfig) -> DropField:
    """One frame step: drift each drop and grow its blur kernel."""
    moved = []
    for d in field_.drops:
        cx = d.center[0] + cfg.shift_px * d.drift_dir[0]
        cy = d.center[1] + cfg.shift_px * d.drift_dir[1]
        k = min(d.blur_kernel + cfg.blur_step, cfg.blur_max)
        if k % 2 == 0:
            k += 1
        moved.append(replace(d, center=(cx, cy), blur_kernel=k))
    return DropField(drops=moved, rng_state=field_.rng_state)


def _drop_mask_patch(d: Drop, width: int, height: int):
    """Interior test of one drop over its clipped bounding box.

    Returns (x0, y0, interior) with interior a bool (h, w) patch, or None
    when the drop lies entirely off-frame.
    """
    cx, cy = d.center
    rx, ry = d.radii
    x0 = max(0, int(np.ceil(cx - rx)))
    x1 = min(width - 1, int(np.floor(cx + rx)))
    y0 = max(0, int(np.ceil(cy - ry)))
    y1 = min(height - 1, int(np.floor(cy + ry)))
    if x0 > x1 or y0 > y1:
        return None
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    u = (xs[None, :] - cx) / rx
    v = (ys[:, None] - cy) / ry
    interior = u * u + v * v <= 1.0
    if not interior.any():
        return None
    return x0, y0, interior


def rasterize_mask(field_: DropField, width: int, height: int) -> np.ndarray:
    """Binary union of all drop ellipses (pixel-center-in-ellipse test)."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for d in field_.drops:
        patch = _drop_mask_patch(d, width, height)
        if patch is None:
            continue
        x0, y0, interior = patch
        h, w = interior.shape
        region = mask[y0:y0 + h, x0:x0 + w]
        region[interior] = 1
    return mask


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Clamp-to-edge bilinear sampling of (H, W, 3) at float coordinates."""
    h, w = img.shape[:2]
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _sliding_sum(a: np.ndarray, k: int, axis: int) -> np.ndarray:
    c = np.cumsum(a, axis=axis)
    pad_shape = list(a.shape)
    pad_shape[axis] = 1
    c = np.concatenate([np.zeros(pad_shape), c], axis=axis)
    n = a.shape[axis]
    lead = [slice(None)] * axis
    hi = c[tuple(lead + [slice(k, n + 1)])]
    lo = c[tuple(lead + [slice(0, n - k + 1)])]
    return hi - lo


def _box_blur_valid(padded: np.ndarray, k: int) -> np.ndarray:
    """k x k box mean of an already-padded (H+k-1, W+k-1, 3) patch."""
    return _sliding_sum(_sliding_sum(padded, k, axis=0), k, axis=1) / (k * k)


def _apply_drop(work: np.ndarray, d: Drop) -> None:
    """Warp + blend + blur one drop's interior, in place."""
    height, width = work.shape[:2]
    patch = _drop_mask_patch(d, width, height)
    if patch is None:
        return
    x0, y0, interior = patch
    ph, pw = interior.shape
    cx, cy = d.center
    rx, ry = d.radii

    xs = np.arange(x0, x0 + pw, dtype=np.float64)
    ys = np.arange(y0, y0 + ph, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    dx = gx - cx
    dy = gy - cy
    d2 = (dx / rx) ** 2 + (dy / ry) ** 2
    f = WARP_CONTRACTION * d2
    warped = _bilinear(work, cx + dx * f, cy - dy * f)

    s = d.refraction_strength
    blended = work[y0:y0 + ph, x0:x0 + pw].copy()
    blended[interior] = (s * warped + (1.0 - s)
                         * work[y0:y0 + ph, x0:x0 + pw])[interior]

    r = (d.blur_kernel - 1) // 2
    # expand the working window so the blur reads true frame content where
    # it exists, replicating only at actual frame borders
    ex0, ey0 = max(0, x0 - r), max(0, y0 - r)
    ex1, ey1 = min(width, x0 + pw + r), min(height, y0 + ph + r)
    window = work[ey0:ey1, ex0:ex1].copy()
    window[y0 - ey0:y0 - ey0 + ph, x0 - ex0:x0 - ex0 + pw] = blended
    pads = ((r - (y0 - ey0), r - (ey1 - (y0 + ph))),
            (r - (x0 - ex0), r - (ex1 - (x0 + pw))),
            (0, 0))
    padded = np.pad(window, pads, mode="edge")
    # padded covers the interior bbox with exactly r extra pixels per side
    blurred = _box_blur_valid(padded, d.blur_kernel)
    target = work[y0:y0 + ph, x0:x0 + pw]
    target[interior] = blurred[interior]


def render(clean: np.ndarray, field_: DropField) -> tuple[np.ndarray, np.ndarray]:
    """Degrade a clean frame with the drop field.

    Drops are composited in list order, each reading the result of the
    previous ones.  Pixels outside every drop keep their exact input value.
    """
    clean64 = np.ascontiguousarray(clean, dtype=np.float64)
    height, width = clean64.shape[:2]
    mask = rasterize_mask(field_, width, height)
    work = clean64.copy()
    for d in field_.drops:
        _apply_drop(work, d)
    np.clip(work, 0.0, 1.0, out=work)
    outside = mask == 0
    work[outside] = clean64[outside]
    return work, mask


def synthesize_sequence(clean_frames, seed: int,
                        cfg: SynthConfig) -> list[Triplet]:
    """Degrade a clean frame sequence into triplets, deterministically."""
    cfg.validate()
    frames = [np.ascontiguousarray(f, dtype=np.float64) for f in clean_frames]
    if len(frames) != cfg.seq_len:
        raise ConfigError(
            f"expected {cfg.seq_len} frames per sequence, got {len(frames)}")
    height, width = frames[0].shape[:2]
    rng = make_rng(seed)
    field_ = seed_drops(rng, width, height, cfg)
    triplets = []
    for i, frame in enumerate(frames):
        if i > 0:
            field_ = advance(field_, cfg)
        degraded, mask = render(frame, field_)
        triplets.append(Triplet(clean=frame, degraded=degraded, mask=mask))
    return triplets
