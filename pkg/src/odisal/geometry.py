"""Sphere <-> plane geometry for equirectangular omnidirectional images.

Conventions used throughout:

* ``theta`` is longitude in radians, ``phi`` latitude in radians.
  ``theta`` lives on [-pi/2, 3*pi/2) so that the pixel mapping
  ``x = s_w * (theta + pi/2) / (2*pi)`` covers x in [0, s_w);
  ``phi`` lives on [-pi/2, pi/2] with +pi/2 at the zenith.
* A continuous pixel coordinate (x, y) addresses the top-left corner of
  pixel (floor(x), floor(y)); pixel centers sit at half-integers.
* World frame: y is up; a view with yaw=0, pitch=0 looks along +z, which
  corresponds to theta = pi/2 (the horizontal center of the image).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AllHoles, FovTooSmall, OutOfRange

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi


class SphericalCoord(NamedTuple):
    """Longitude/latitude pair in radians."""

    theta: float
    phi: float


@dataclass(frozen=True)
class ViewFrustum:
    """A pinhole view of the sphere: orientation, square FOV, resolution."""

    yaw: float
    pitch: float
    fov: float
    out_w: int
    out_h: int

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise ValueError(f"fov must be in (0, pi), got {self.fov}")
        if self.out_w < 2 or self.out_h < 2:
            raise ValueError("patch resolution must be at least 2x2")


@dataclass(frozen=True)
class Patch:
    """A resampled view tile plus its per-pixel spherical coordinates.

    ``coords`` has shape (out_h, out_w, 2) holding (theta, phi).
    """

    image: np.ndarray
    coords: np.ndarray
    frustum: ViewFrustum

    def __post_init__(self):
        if self.image.shape[:2] != self.coords.shape[:2]:
            raise ValueError("image and coords must share spatial dimensions")


def validate_equirect(img: np.ndarray) -> np.ndarray:
    """Check an equirectangular raster: finite samples, (h, w[, c]) layout.

    Emits a warning when the aspect ratio is not 2:1 (any aspect is
    accepted); raises on non-finite samples.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"expected (h, w) or (h, w, 1|3) raster, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("equirectangular raster contains non-finite samples")
    h, w = img.shape[:2]
    if w != 2 * h:
        warnings.warn(
            f"equirectangular raster is {w}x{h}; expected a 2:1 aspect",
            stacklevel=2,
        )
    return img


def wrap_theta(theta):
    """Wrap longitude into [-pi/2, 3*pi/2)."""
    return np.mod(np.asarray(theta, dtype=np.float64) + HALF_PI, TWO_PI) - HALF_PI


def sphere_to_equirect(theta, phi, s_w, s_h):
    """Map spherical coordinates to continuous pixel coordinates.

    x = s_w * (theta + pi/2) / (2*pi), y = s_h * (1 - (phi + pi/2) / pi).
    Accepts scalars or arrays.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    x = s_w * (theta + HALF_PI) / TWO_PI
    y = s_h * (1.0 - (phi + HALF_PI) / math.pi)
    return x, y


def equirect_to_sphere(x, y, s_w, s_h) -> SphericalCoord:
    """Invert the pixel mapping; accepts scalars or arrays.

    Raises OutOfRange unless 0 <= x < s_w and 0 <= y <= s_h.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(x < 0) or np.any(x >= s_w) or np.any(y < 0) or np.any(y > s_h):
        raise OutOfRange(f"pixel coordinate outside [0,{s_w}) x [0,{s_h}]")
    theta = TWO_PI * x / s_w - HALF_PI
    phi = HALF_PI - math.pi * y / s_h
    if theta.ndim == 0:
        return SphericalCoord(float(theta), float(phi))
    return SphericalCoord(theta, phi)


def spherical_to_dirs(theta, phi) -> np.ndarray:
    """Unit direction vectors (..., 3) for (theta, phi); y is up."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    azim = theta - HALF_PI
    cos_phi = np.cos(phi)
    return np.stack(
        [cos_phi * np.sin(azim), np.sin(phi), cos_phi * np.cos(azim)], axis=-1
    )


def dirs_to_spherical(dirs: np.ndarray):
    """Inverse of spherical_to_dirs for unit vectors of shape (..., 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = wrap_theta(HALF_PI + np.arctan2(dirs[..., 0], dirs[..., 2]))
    phi = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    return theta, phi


def frustum_rotation(f: ViewFrustum) -> np.ndarray:
    """Camera-to-world rotation: pitch about x, then yaw about y."""
    cp, sp = math.cos(f.pitch), math.sin(f.pitch)
    cy, sy = math.cos(f.yaw), math.sin(f.yaw)
    pitch_m = np.array([[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]])
    yaw_m = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return yaw_m @ pitch_m


def frustum_focal(f: ViewFrustum) -> float:
    """Focal length in pixels for the square FOV."""
    return (f.out_w / 2.0) / math.tan(f.fov / 2.0)


def frustum_ray(f: ViewFrustum, cx, cy) -> np.ndarray:
    """World-space unit rays for continuous patch coordinates (cx, cy).

    (0, 0) is the patch's top-left plane corner; pixel (u, v) is sampled
    at (u + 0.5, v + 0.5).
    """
    cx = np.asarray(cx, dtype=np.float64)
    cy = np.asarray(cy, dtype=np.float64)
    focal = frustum_focal(f)
    dx = (cx - f.out_w / 2.0) / focal
    dy = -(cy - f.out_h / 2.0) / focal
    dz = np.ones_like(dx)
    d = np.stack([dx, dy, dz], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ frustum_rotation(f).T


def frustum_project(f: ViewFrustum, dirs: np.ndarray):
    """Project world directions onto the patch plane.

    Returns continuous patch coordinates (cx, cy); directions behind the
    camera yield non-finite values.
    """
    cam = np.asarray(dirs, dtype=np.float64) @ frustum_rotation(f)
    focal = frustum_focal(f)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(cam[..., 2] > 0, cam[..., 2], np.nan)
        cx = cam[..., 0] / z * focal + f.out_w / 2.0
        cy = -cam[..., 1] / z * focal + f.out_h / 2.0
    return cx, cy


def direction_in_frustum(f: ViewFrustum, dirs: np.ndarray, tol: float = 1e-12):
    """Boolean mask: does each direction fall inside the frustum?

    Boundary ties count as inside (tol absorbs rounding).
    """
    cam = np.asarray(dirs, dtype=np.float64) @ frustum_rotation(f)
    half_tan = math.tan(f.fov / 2.0) + tol
    z = cam[..., 2]
    return (z > 0) & (np.abs(cam[..., 0]) <= z * half_tan) & (
        np.abs(cam[..., 1]) <= z * half_tan
    )


def patch_pixel_directions(f: ViewFrustum) -> np.ndarray:
    """Per-pixel (theta, phi) raster of shape (out_h, out_w, 2)."""
    u = np.arange(f.out_w, dtype=np.float64) + 0.5
    v = np.arange(f.out_h, dtype=np.float64) + 0.5
    cx, cy = np.meshgrid(u, v)
    theta, phi = dirs_to_spherical(frustum_ray(f, cx, cy))
    return np.stack([theta, phi], axis=-1)


def coord_channels(coords: np.ndarray) -> np.ndarray:
    """Rescale a (h, w, 2) coordinate raster to a (2, h, w) [-1, 1] tensor.

    theta in [-pi/2, 3*pi/2) maps affinely onto [-1, 1); phi in
    [-pi/2, pi/2] onto [-1, 1].
    """
    theta = (coords[..., 0] + HALF_PI) / math.pi - 1.0
    phi = coords[..., 1] * (2.0 / math.pi)
    return np.stack([theta, phi], axis=0)


def _sample_nearest(odi: np.ndarray, x, y) -> np.ndarray:
    s_h, s_w = odi.shape[:2]
    xi = np.mod(np.floor(x).astype(np.int64), s_w)
    yi = np.clip(np.floor(y).astype(np.int64), 0, s_h - 1)
    return odi[yi, xi]

def _sample_bilinear(odi: np.ndarray, x, y) -> np.ndarray:
    s_h, s_w = odi.shape[:2]
    xf = x - 0.5
    yf = np.clip(y - 0.5, 0.0, s_h - 1.0)
    x0 = np.floor(xf).astype(np.int64)
    y0 = np.floor(yf).astype(np.int64)
    tx = xf - x0
    ty = yf - y0
    x0 = np.mod(x0, s_w)
    x1 = np.mod(x0 + 1, s_w)
    y0 = np.clip(y0, 0, s_h - 1)
    y1 = np.clip(y0 + 1, 0, s_h - 1)
    if odi.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
    top = odi[y0, x0] * (1.0 - tx) + odi[y0, x1] * tx
    bot = odi[y1, x0] * (1.0 - tx) + odi[y1, x1] * tx
    return top * (1.0 - ty) + bot * ty


def extract_patch(odi: np.ndarray, f: ViewFrustum, interp: str = "bilinear") -> Patch:
    """Resample an undistorted view tile out of an equirectangular image.

    Horizontal sampling wraps around the x = 0 seam; vertical sampling
    clamps at the poles.
    """
    odi = validate_equirect(odi)
    coords = patch_pixel_directions(f)
    x, y = sphere_to_equirect(coords[..., 0], coords[..., 1], *odi.shape[1::-1])
    if interp == "nearest":
        image = _sample_nearest(odi, x, y)
    elif interp == "bilinear":
        image = _sample_bilinear(odi, x, y)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    return Patch(image=image, coords=coords, frustum=f)


def six_fixed_frustums(fov: float, out_w: int, out_h: int) -> list[ViewFrustum]:
    """The inference views: four around the horizon, zenith, nadir.

    Requires fov >= pi/2 so the six views cover the whole sphere.
    """
    if fov < HALF_PI:
        raise FovTooSmall(f"need fov >= pi/2 for full coverage, got {fov}")
    orientations = [
        (0.0, 0.0),
        (HALF_PI, 0.0),
        (math.pi, 0.0),
        (3 * HALF_PI, 0.0),
        (0.0, HALF_PI),
        (0.0, -HALF_PI),
    ]
    return [ViewFrustum(yaw, pitch, fov, out_w, out_h) for yaw, pitch in orientations]


def random_frustums(
    n: int, fov: float, out_w: int, out_h: int, seed: int
) -> list[ViewFrustum]:
    """n frustums with view centers uniform on the sphere.

    yaw ~ U[0, 2*pi); pitch = asin(U[-1, 1]) so centers are area-uniform.
    """
    if n < 1:
        raise ValueError("need at least one frustum")
    rng = np.random.default_rng(seed)
    yaws = rng.uniform(0.0, TWO_PI, size=n)
    pitches = np.arcsin(rng.uniform(-1.0, 1.0, size=n))
    return [
        ViewFrustum(float(yaw), float(pitch), fov, out_w, out_h)
        for yaw, pitch in zip(yaws, pitches)
    ]


def splat_patch(canvas: np.ndarray, counts: np.ndarray, patch: Patch) -> None:
    """Forward-project a saliency patch onto an equirect accumulator.

    Each patch pixel lands on the nearest equirect pixel center (wrapped
    in x, clamped in y); values accumulate into ``canvas`` and hit counts
    into ``counts``, both updated in place.

    Near the poles the equirect grid is azimuthally denser than any
    patch raster, so pure scattering strands covered pixels without a
    sample. Pixels inside the patch's frustum that the scatter missed
    are therefore backfilled with the nearest patch pixel under the
    inverse projection, which leaves holes only outside the frustum.
    """
    if canvas.shape != counts.shape:
        raise ValueError("canvas and counts must have identical dimensions")
    s_h, s_w = canvas.shape
    values = patch.image
    if values.ndim != 2:
        raise ValueError("splat expects a single-channel saliency patch")
    x, y = sphere_to_equirect(patch.coords[..., 0], patch.coords[..., 1], s_w, s_h)
    xi = np.mod(np.floor(x).astype(np.int64), s_w)
    yi = np.clip(np.floor(y).astype(np.int64), 0, s_h - 1)
    flat = yi.ravel() * s_w + xi.ravel()
    np.add.at(canvas.ravel(), flat, values.ravel())
    np.add.at(counts.ravel(), flat, 1.0)

    hit = np.zeros(canvas.size, dtype=bool)
    hit[flat] = True
    gx = np.arange(s_w, dtype=np.float64) + 0.5
    gy = np.arange(s_h, dtype=np.float64) + 0.5
    theta, phi = equirect_to_sphere(*np.meshgrid(gx, gy), s_w, s_h)
    dirs = spherical_to_dirs(theta, phi)
    missed = direction_in_frustum(patch.frustum, dirs) & ~hit.reshape(canvas.shape)
    if missed.any():
        cx, cy = frustum_project(patch.frustum, dirs[missed])
        u = np.clip(np.floor(cx).astype(np.int64), 0, patch.frustum.out_w - 1)
        v = np.clip(np.floor(cy).astype(np.int64), 0, patch.frustum.out_h - 1)
        canvas[missed] += values[v, u]
        counts[missed] += 1.0


def finalize_splat(canvas: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Average accumulated values; uncovered pixels become NaN holes."""
    with np.errstate(invalid="ignore", divide="ignore"):
        out = canvas / counts
    out[counts == 0] = np.nan
    return out


def gaussian_kernel(kernel_px: int) -> np.ndarray:
    """Truncated 1D Gaussian: sigma = kernel_px / 6, kernel_px + 1 taps."""
    if kernel_px < 1:
        raise ValueError("kernel size must be positive")
    radius = kernel_px // 2
    sigma = kernel_px / 6.0
    t = np.arange(-radius, kernel_px - radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur_axis(a: np.ndarray, kernel: np.ndarray, axis: int, wrap: bool) -> np.ndarray:
    """Correlate one axis with the kernel; wrap or symmetric-reflect ends.

    Both boundary modes conserve total mass exactly.
    """
    n = a.shape[axis]
    radius = len(kernel) // 2
    offsets = np.arange(len(kernel)) - radius
    out = np.zeros_like(a)
    base = np.arange(n)
    for off, k in zip(offsets, kernel):
        idx = base + off
        if wrap:
            idx = np.mod(idx, n)
        else:
            idx = np.mod(idx, 2 * n)
            idx = np.where(idx >= n, 2 * n - 1 - idx, idx)
        out += k * np.take(a, idx, axis=axis)
    return out


def gaussian_blur_equirect(a: np.ndarray, kernel_px: int) -> np.ndarray:
    """Separable Gaussian blur: wrapped horizontally, reflected vertically."""
    kernel = gaussian_kernel(kernel_px)
    out = _blur_axis(a, kernel, axis=1, wrap=True)
    return _blur_axis(out, kernel, axis=0, wrap=False)


def gaussian_fill_and_smooth(m: np.ndarray, kernel_px: int) -> np.ndarray:
    """Fill NaN holes and smooth via normalized convolution.

    Computes blur(value * mask) / blur(mask); pixels left without any
    support (holes wider than the kernel) are filled by repeating the
    pass on the partial result until none remain.
    """
    m = np.asarray(m, dtype=np.float64)
    mask = np.isfinite(m)
    if not mask.any():
        raise AllHoles("every pixel of the map is a hole")
    values = np.where(mask, m, 0.0)
    out = None
    while True:
        num = gaussian_blur_equirect(values * mask, kernel_px)
        den = gaussian_blur_equirect(mask.astype(np.float64), kernel_px)
        supported = den > 1e-12
        if out is None:
            out = np.where(supported, num / np.where(supported, den, 1.0), np.nan)
        else:
            # only the still-unsupported pixels take values from later passes
            fill = num / np.where(supported, den, 1.0)
            out = np.where(np.isnan(out) & supported, fill, out)
        if not np.isnan(out).any():
            return out
        mask = supported
        values = np.where(mask, np.where(np.isnan(out), 0.0, out), 0.0)
