"""Built-in procedural clean-frame sequences.

Stand-ins for real driving footage: a drifting diagonal gradient sky
with moving filled shapes, deterministic for a given seed so the whole
pipeline can run without any external data.
"""

from __future__ import annotations

import numpy as np

from .synth import make_rng


def _shape_layer(frame: np.ndarray, cx: float, cy: float, size: float,
                 color: np.ndarray, kind: int) -> None:
    h, w = frame.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == 0:                                   # filled circle
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= size * size
    else:                                           # axis-aligned square
        inside = (np.abs(xs - cx) <= size) & (np.abs(ys - cy) <= size)
    frame[inside] = color


def generate_scene(seed: int, num_frames: int, height: int,
                   width: int, num_shapes: int = 5) -> np.ndarray:
    """(T, H, W, 3) float frames in [0, 1]: moving gradient plus shapes."""
    rng = make_rng(seed)
    phase = rng.uniform(0.0, 1.0)
    drift = rng.uniform(0.002, 0.01)
    kinds = rng.integers(0, 2, size=num_shapes)
    colors = rng.uniform(0.1, 0.9, size=(num_shapes, 3))
    sizes = rng.uniform(0.06, 0.18, size=num_shapes) * min(height, width)
    pos = rng.uniform(0.1, 0.9, size=(num_shapes, 2)) * (width, height)
    vel = rng.uniform(-2.5, 2.5, size=(num_shapes, 2))

    ys, xs = np.mgrid[0:height, 0:width]
    diag = (xs / width + ys / height) / 2.0

    frames = np.empty((num_frames, height, width, 3))
    for t in range(num_frames):
        g = (diag + phase + t * drift) % 1.0
        frame = np.stack([g, 1.0 - 0.5 * g, 0.3 + 0.7 * g], axis=-1)
        for s in range(num_shapes):
            px = pos[s, 0] + t * vel[s, 0]
            py = pos[s, 1] + t * vel[s, 1]
            _shape_layer(frame, px, py, sizes[s], colors[s], int(kinds[s]))
        frames[t] = frame
    return np.clip(frames, 0.0, 1.0)
