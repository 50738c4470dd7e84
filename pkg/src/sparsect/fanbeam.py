"""Fan-beam projection, matched-adjoint backprojection, and FBP.

Geometry: the source rotates on a circle of radius ``dso`` around the
isocenter; a flat equispaced detector sits ``dsd`` from the source,
centred on and perpendicular to the ray through the isocenter.  View
angles give the source position ``dso * (cos a, sin a)``.

The projector is ray driven: every source-to-detector ray is traversed
along its dominant axis with linear interpolation across the other axis
(Joseph's method).  Backprojection applies the transposed interpolation
weights, so ``<forward(x), y> == <x, back(y)>`` holds to rounding error.
Images are indexed ``img[iy, ix]`` with both coordinates increasing, the
grid centred on the isocenter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .phantoms import ImageGrid

# full-scale scanner constants; desk-scale grids shrink the detector count
# proportionally while keeping distances and total detector length fixed
DSO_MM = 595.0
DSD_MM = 1085.6
FULL_SCALE_N_DET = 368
FULL_SCALE_DET_SPACING_MM = 2.5716


@dataclass(frozen=True)
class FanBeamGeometry:
    dso: float
    dsd: float
    n_det: int
    det_spacing_mm: float
    angles: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (self.dsd > self.dso > 0):
            raise ValueError(f"need dsd > dso > 0, got dso={self.dso}, dsd={self.dsd}")
        if self.n_det < 1:
            raise ValueError("need at least one detector element")
        a = np.asarray(self.angles, dtype=np.float64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("angles must be a non-empty 1-d array")
        if np.any(a < 0.0) or np.any(a >= 2.0 * np.pi):
            raise ValueError("angles must lie in [0, 2*pi)")
        if a.size > 1 and np.any(np.diff(a) <= 0.0):
            raise ValueError("angles must be strictly increasing")
        object.__setattr__(self, "angles", a)

    @property
    def n_views(self) -> int:
        return int(self.angles.size)

    def det_offsets(self) -> np.ndarray:
        """Signed detector-element offsets from the central ray, in mm."""
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_spacing_mm


def uniform_angles(n_views: int) -> np.ndarray:
    if n_views < 1:
        raise ValueError("need at least one view")
    return 2.0 * np.pi * np.arange(n_views) / n_views


def scaled_geometry(grid_n: int, n_views: int = 360) -> FanBeamGeometry:
    """Scanner geometry shrunk to match a grid of ``grid_n`` pixels.

    The detector count scales with the grid while the total detector
    length (368 elements of 2.5716 mm) and the source distances stay at
    their full-scale values, preserving the fan geometry proportions.
    """
    n_det = max(1, round(FULL_SCALE_N_DET * grid_n / 512))
    total_mm = FULL_SCALE_N_DET * FULL_SCALE_DET_SPACING_MM
    return FanBeamGeometry(DSO_MM, DSD_MM, n_det, total_mm / n_det, uniform_angles(n_views))


def sparse_geometry(geom: FanBeamGeometry, n_views: int) -> FanBeamGeometry:
    """Same scanner with n_views angles uniformly covering the full circle."""
    return FanBeamGeometry(geom.dso, geom.dsd, geom.n_det, geom.det_spacing_mm, uniform_angles(n_views))


def _view_rays(geom: FanBeamGeometry, angle: float):
    """Source position and per-detector ray directions for one view."""
    ca, sa = np.cos(angle), np.sin(angle)
    src = np.array([geom.dso * ca, geom.dso * sa])
    det_center = np.array([(geom.dso - geom.dsd) * ca, (geom.dso - geom.dsd) * sa])
    u = np.array([-sa, ca])
    offs = geom.det_offsets()
    dirs = det_center[None, :] + offs[:, None] * u[None, :] - src[None, :]
    return src, dirs


def _driven_terms(src, dirs, grid: ImageGrid, axis: int):
    """Interpolation indices and path-length weights for rays driven along ``axis``.

    Returns (i0, i1, w0, w1), all [n_rays, grid.n]: at every pixel line of
    the driving axis the ray samples the two neighbouring pixels i0/i1 of
    the other axis with weights w0/w1 (already scaled by the per-step path
    length).  Out-of-grid samples carry weight 0 and a clamped index.
    """
    n = grid.n
    c = grid.centers()
    d_main = dirs[:, axis]
    d_other = dirs[:, 1 - axis]
    slope = d_other / d_main
    # position of the ray in the other coordinate at every main-axis pixel line
    other = src[1 - axis] + (c[None, :] - src[axis]) * slope[:, None]
    f = (other - c[0]) / grid.pixel_mm
    i0 = np.floor(f).astype(np.int64)
    w1 = f - i0
    w0 = 1.0 - w1
    valid0 = (i0 >= 0) & (i0 <= n - 1)
    valid1 = (i0 + 1 >= 0) & (i0 + 1 <= n - 1)
    w0 = np.where(valid0, w0, 0.0)
    w1 = np.where(valid1, w1, 0.0)
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    seglen = grid.pixel_mm * np.sqrt(1.0 + slope * slope)
    return i0c, i1c, w0 * seglen[:, None], w1 * seglen[:, None]


def _split_by_axis(dirs):
    ax_x = np.abs(dirs[:, 0]) >= np.abs(dirs[:, 1])
    return np.nonzero(ax_x)[0], np.nonzero(~ax_x)[0]


def forward_project(img: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Line integrals of ``img`` (values per mm of normalized units).

    Output is [n_views, n_det]; rays missing the grid integrate to zero.
    The operator is linear in the image.
    """
    if img.shape != (grid.n, grid.n):
        raise ValueError(f"image shape {img.shape} does not match grid {grid.n}")
    sino = np.zeros((geom.n_views, geom.n_det))
    steps = np.arange(grid.n)
    for v, ang in enumerate(geom.angles):
        src, dirs = _view_rays(geom, ang)
        for axis, idx in zip((0, 1), _split_by_axis(dirs)):
            if idx.size == 0:
                continue
            i0, i1, w0, w1 = _driven_terms(src, dirs[idx], grid, axis)
            if axis == 0:  # driven along x: iterate columns, interpolate rows
                vals = img[i0, steps[None, :]] * w0 + img[i1, steps[None, :]] * w1
            else:  # driven along y: iterate rows, interpolate columns
                vals = img[steps[None, :], i0] * w0 + img[steps[None, :], i1] * w1
            sino[v, idx] = vals.sum(axis=1)
    return sino


def back_project(sino: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Exact adjoint of :func:`forward_project` (same rays, same weights)."""
    if sino.shape != (geom.n_views, geom.n_det):
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry "
                         f"({geom.n_views}, {geom.n_det})")
    img = np.zeros((grid.n, grid.n))
    steps = np.arange(grid.n)
    for v, ang in enumerate(geom.angles):
        src, dirs = _view_rays(geom, ang)
        for axis, idx in zip((0, 1), _split_by_axis(dirs)):
            if idx.size == 0:
                continue
            i0, i1, w0, w1 = _driven_terms(src, dirs[idx], grid, axis)
            ray_vals = sino[v, idx][:, None]
            cols = np.broadcast_to(steps[None, :], i0.shape)
            if axis == 0:
                np.add.at(img, (i0, cols), ray_vals * w0)
                np.add.at(img, (i1, cols), ray_vals * w1)
            else:
                np.add.at(img, (cols, i0), ray_vals * w0)
                np.add.at(img, (cols, i1), ray_vals * w1)
    return img


def fbp(sino: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Filtered backprojection for the flat equispaced fan geometry.

    Cosine pre-weighting, frequency-domain Ram-Lak filtering along the
    detector axis (zero-padded to the next power of two at or above twice
    the detector count), then pixel-driven backprojection with the
    inverse-square distance weight and the angular step / 2 scale.
    """
    if sino.shape != (geom.n_views, geom.n_det):
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry "
                         f"({geom.n_views}, {geom.n_det})")
    # detector coordinates rescaled to the isocenter line
    a = geom.det_spacing_mm * geom.dso / geom.dsd
    s = geom.det_offsets() * geom.dso / geom.dsd
    weighted = sino * (geom.dso / np.sqrt(geom.dso**2 + s**2))[None, :]

    npad = 1
    while npad < 2 * geom.n_det:
        npad *= 2
    ramp = np.abs(np.fft.rfftfreq(npad, d=a))
    filtered = np.fft.irfft(np.fft.rfft(weighted, n=npad, axis=1) * ramp[None, :], n=npad, axis=1)
    filtered = filtered[:, : geom.n_det]

    c = grid.centers()
    xs = c[None, :]
    ys = c[:, None]
    out = np.zeros((grid.n, grid.n))
    for v, ang in enumerate(geom.angles):
        ca, sa = np.cos(ang), np.sin(ang)
        dist = geom.dso - xs * ca - ys * sa  # source-to-pixel distance along the central ray
        t = -xs * sa + ys * ca
        s_star = t * geom.dso / dist
        f = (s_star - s[0]) / a
        i0 = np.floor(f).astype(np.int64)
        w1 = f - i0
        v0 = (i0 >= 0) & (i0 <= geom.n_det - 1)
        v1 = (i0 + 1 >= 0) & (i0 + 1 <= geom.n_det - 1)
        q = np.zeros_like(dist)
        row = filtered[v]
        q += np.where(v0, row[np.clip(i0, 0, geom.n_det - 1)] * (1.0 - w1), 0.0)
        q += np.where(v1, row[np.clip(i0 + 1, 0, geom.n_det - 1)] * w1, 0.0)
        out += q * (geom.dso / dist) ** 2
    dbeta = 2.0 * np.pi / geom.n_views
    return out * (dbeta / 2.0)
