"""Procedural handwritten-style digits, a stand-in for a 10-class grayscale set.

Each digit is a set of strokes (arcs and line segments) in a unit box.  A
sample applies a random affine map (rotation, slant, scale, translation), a
smooth elastic displacement of the stroke points, a random stroke width and
ink level, then clipped Gaussian pixel noise.  Output is uint8 so it can be
written to IDX files and read back bit-exactly.
"""

import numpy as np


def _arc(cx, cy, rx, ry, t0, t1, n=24):
    # angles in degrees, y axis pointing down (-90 is the top of the circle)
    t = np.radians(np.linspace(t0, t1, n))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(x0, y0, x1, y1, n=8):
    s = np.linspace(0.0, 1.0, n)[:, None]
    return np.array([x0, y0]) * (1 - s) + np.array([x1, y1]) * s


STROKES = (
    (_arc(0.5, 0.5, 0.42, 0.5, 0, 360, 40),),
    (_line(0.55, 0.0, 0.55, 1.0), _line(0.3, 0.22, 0.55, 0.0, 5)),
    (_arc(0.5, 0.3, 0.38, 0.3, 190, 380), _line(0.86, 0.41, 0.05, 1.0), _line(0.05, 1.0, 0.95, 1.0)),
    (_arc(0.45, 0.26, 0.36, 0.26, -160, 90), _arc(0.45, 0.74, 0.4, 0.26, -90, 160)),
    (_line(0.68, 0.0, 0.05, 0.68), _line(0.05, 0.68, 0.95, 0.68), _line(0.68, 0.0, 0.68, 1.0)),
    (_line(0.9, 0.0, 0.2, 0.0), _line(0.2, 0.0, 0.15, 0.45), _arc(0.45, 0.7, 0.4, 0.3, -125, 150)),
    (_arc(0.5, 0.72, 0.36, 0.28, 0, 360, 32), _arc(0.9, 0.72, 0.75, 0.72, 180, 270, 16)),
    (_line(0.05, 0.0, 0.95, 0.0), _line(0.95, 0.0, 0.35, 1.0)),
    (_arc(0.5, 0.24, 0.3, 0.24, 0, 360, 28), _arc(0.5, 0.73, 0.38, 0.27, 0, 360, 32)),
    (_arc(0.5, 0.3, 0.36, 0.3, 0, 360, 32), _line(0.86, 0.3, 0.6, 1.0)),
)


def _distance_to_polyline(px, py, pts):
    a, b = pts[:-1], pts[1:]
    d = b - a
    denom = np.maximum((d**2).sum(axis=1), 1e-12)
    rx = px[..., None] - a[:, 0]
    ry = py[..., None] - a[:, 1]
    t = np.clip((rx * d[:, 0] + ry * d[:, 1]) / denom, 0.0, 1.0)
    return np.hypot(rx - t * d[:, 0], ry - t * d[:, 1]).min(axis=-1)


def render_digit(digit, size, rng, noise=0.08):
    """One ``size`` x ``size`` float image in [0, 1] of ``digit``."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    height = size * rng.uniform(0.64, 0.76)
    width = height * rng.uniform(0.5, 0.65)
    angle = np.radians(rng.uniform(-12, 12))
    slant = rng.uniform(-0.2, 0.2)
    center = size / 2 + rng.uniform(-1.0, 1.0, 2)
    half_width = rng.uniform(0.5, 0.75)
    ink = rng.uniform(0.85, 1.0)
    # smooth elastic jitter: random displacement field of low order
    coef = rng.normal(0.0, 0.05, (2, 3))

    cos, sin = np.cos(angle), np.sin(angle)
    dist = np.full((size, size), np.inf)
    for stroke in STROKES[digit]:
        u, v = stroke[:, 0], stroke[:, 1]
        u = u + coef[0, 0] + coef[0, 1] * v + coef[0, 2] * np.sin(np.pi * v)
        v = v + coef[1, 0] + coef[1, 1] * u + coef[1, 2] * np.sin(np.pi * u)
        x = (u - 0.5) * width - slant * (v - 0.5) * height
        y = (v - 0.5) * height
        pts = np.stack([center[0] + cos * x - sin * y, center[1] + sin * x + cos * y], axis=1)
        dist = np.minimum(dist, _distance_to_polyline(xs, ys, pts))
    img = ink * np.clip(1.0 - (dist - half_width), 0.0, 1.0)
    return np.clip(img + rng.normal(0.0, noise, img.shape), 0.0, 1.0)


def make_glyphs(samples_per_class, size=12, seed=0, noise=0.08):
    """Balanced dataset: returns ``(images uint8 (N, size, size), labels uint8 (N,))``.

    Samples are interleaved by class (0, 1, ..., 9, 0, 1, ...).
    """
    rng = np.random.default_rng(seed)
    n = samples_per_class * 10
    images = np.empty((n, size, size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        digit = i % 10
        images[i] = np.round(render_digit(digit, size, rng, noise) * 255).astype(np.uint8)
        labels[i] = digit
    return images, labels
