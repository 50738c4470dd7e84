"""Analytic ellipse phantoms used as ground-truth attenuation maps.

Images live on a square pixel grid centred on the scanner isocenter, with
values in normalized attenuation units clipped to [0, 1].  The full-scale
reference grid is 512 pixels of 1.3282 mm; smaller grids keep the same
field of view, so the pixel pitch grows as the resolution shrinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FULL_SCALE_N = 512
FULL_SCALE_PIXEL_MM = 1.3282


@dataclass(frozen=True)
class Ellipse:
    """One additive ellipse: center/semi-axes in mm, rotation in radians."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float
    mu: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"semi-axes must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple[Ellipse, ...]

    def mirrored_x(self) -> "PhantomSpec":
        """The phantom reflected about the vertical axis (x -> -x)."""
        return PhantomSpec(
            tuple(Ellipse(-e.cx, e.cy, e.a, e.b, -e.theta, e.mu) for e in self.ellipses)
        )


@dataclass(frozen=True)
class ImageGrid:
    n: int
    pixel_mm: float

    def __post_init__(self):
        if self.n < 8:
            raise ValueError(f"grid must be at least 8 pixels, got {self.n}")
        if self.pixel_mm <= 0:
            raise ValueError("pixel pitch must be positive")

    @property
    def fov_mm(self) -> float:
        return self.n * self.pixel_mm

    def centers(self) -> np.ndarray:
        """Pixel-center coordinates along one axis, origin at grid center."""
        return (np.arange(self.n) - (self.n - 1) / 2.0) * self.pixel_mm


def default_grid(n: int = 128) -> ImageGrid:
    """Grid of n pixels spanning the fixed full-scale field of view."""
    return ImageGrid(n, FULL_SCALE_PIXEL_MM * FULL_SCALE_N / n)


def rasterize(spec: PhantomSpec, grid: ImageGrid, supersample: int = 1) -> np.ndarray:
    """Render a phantom onto the grid; values are clipped to [0, 1].

    Each pixel is averaged over supersample^2 sub-pixel sample points; a
    point inside several ellipses accumulates their mu values.  Row index
    increases with +y so the array is in mathematical orientation.
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    n, s = grid.n, supersample
    fine = (np.arange(n * s) - (n * s - 1) / 2.0) * (grid.pixel_mm / s)
    xs = fine[None, :]
    ys = fine[:, None]
    acc = np.zeros((n * s, n * s))
    for e in spec.ellipses:
        ct, st = np.cos(e.theta), np.sin(e.theta)
        dx = xs - e.cx
        dy = ys - e.cy
        u = (dx * ct + dy * st) / e.a
        v = (-dx * st + dy * ct) / e.b
        acc[u * u + v * v <= 1.0] += e.mu
    img = acc.reshape(n, s, n, s).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0)


def random_phantom(seed: int, k_range: tuple[int, int] = (4, 9), fov_mm: float | None = None) -> PhantomSpec:
    """A random body ellipse with k-1 interior structures, deterministic per seed.

    Sizes are drawn relative to the field of view (default full-scale FOV)
    and kept inside the scanner's covered radius (~0.35 FOV).  Interior
    structures add between -0.4 and +0.4 to the body attenuation.
    """
    lo, hi = k_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad ellipse-count range {k_range}")
    fov = FULL_SCALE_N * FULL_SCALE_PIXEL_MM if fov_mm is None else fov_mm
    rng = np.random.Generator(np.random.Philox(seed))
    k = int(rng.integers(lo, hi + 1))

    body_a = rng.uniform(0.20, 0.30) * fov
    body_b = rng.uniform(0.20, 0.30) * fov
    body_cx = rng.uniform(-0.02, 0.02) * fov
    body_cy = rng.uniform(-0.02, 0.02) * fov
    body_theta = rng.uniform(0.0, np.pi)
    body_mu = rng.uniform(0.4, 0.6)
    ellipses = [Ellipse(body_cx, body_cy, body_a, body_b, body_theta, body_mu)]

    for _ in range(k - 1):
        # center drawn in the body's own frame so structures stay interior
        phi = rng.uniform(0.0, 2.0 * np.pi)
        r = 0.7 * np.sqrt(rng.uniform(0.0, 1.0))
        ub, vb = r * np.cos(phi) * body_a, r * np.sin(phi) * body_b
        ct, st = np.cos(body_theta), np.sin(body_theta)
        cx = body_cx + ub * ct - vb * st
        cy = body_cy + ub * st + vb * ct
        a = rng.uniform(0.03, 0.30) * min(body_a, body_b)
        b = rng.uniform(0.03, 0.30) * min(body_a, body_b)
        theta = rng.uniform(0.0, np.pi)
        mu = rng.uniform(-0.4, 0.4)
        ellipses.append(Ellipse(cx, cy, a, b, theta, mu))
    return PhantomSpec(tuple(ellipses))


# Kak & Slaney head phantom geometry with the Toft grey levels;
# (cx, cy, a, b, theta_deg, mu) in units of the phantom radius.
_SHEPP_LOGAN = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 1.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.2),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.2),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.1),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.1),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.1),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.1),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.1),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.1),
)


def shepp_logan_spec(fov_mm: float) -> PhantomSpec:
    """The ten-ellipse head phantom scaled to sit inside the covered FOV."""
    scale = 0.33 * fov_mm
    return PhantomSpec(
        tuple(
            Ellipse(cx * scale, cy * scale, a * scale, b * scale, np.deg2rad(th), mu)
            for cx, cy, a, b, th, mu in _SHEPP_LOGAN
        )
    )


def shepp_logan(grid: ImageGrid, supersample: int = 2) -> np.ndarray:
    return rasterize(shepp_logan_spec(grid.fov_mm), grid, supersample)
