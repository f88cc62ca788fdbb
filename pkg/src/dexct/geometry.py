"""Parallel-beam pencil projector and its exact adjoint.

The image is an ``N x N`` grid of unit pixels covering ``[0, N]^2``.  A
projection at angle ``theta`` (degrees) integrates along lines
perpendicular to the unit vector ``(cos theta, sin theta)``; detector bins
are laid out along that vector, centred on the image centre.  Every ray is
traced through the pixel grid with exact per-pixel intersection lengths,
so the forward map is a sparse linear operator applied matrix-free and the
adjoint is its exact transpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numba import njit, prange

# Rays closer than this to axis-parallel are treated as exactly parallel;
# boundary-riding parallel rays count as misses (they have ambiguous pixels
# and zero-measure weight).
_PARALLEL_EPS = 1e-12

# Parallel kernels only pay off with enough rays AND enough threads; the
# per-call fork/wake overhead otherwise dominates.  Either variant produces
# bit-identical output (same per-angle partial sums, same reduction order).
_PARALLEL_RAY_THRESHOLD = 4096
_PARALLEL_MIN_THREADS = 4


def _use_parallel(n_rays: int) -> bool:
    from numba import get_num_threads

    return n_rays >= _PARALLEL_RAY_THRESHOLD and get_num_threads() >= _PARALLEL_MIN_THREADS


@njit(cache=True, inline="always")
def _ray_window(n, ox, oy, dx, dy):
    """Entry/exit parameters of the ray ``(ox,oy) + t(dx,dy)`` in [0,n]^2.

    Returns (t_lo, t_hi); empty intersection iff t_hi <= t_lo.
    """
    t_lo = -1e300
    t_hi = 1e300
    if abs(dx) > _PARALLEL_EPS:
        ta = (0.0 - ox) / dx
        tb = (n - ox) / dx
        if ta < tb:
            lo, hi = ta, tb
        else:
            lo, hi = tb, ta
        if lo > t_lo:
            t_lo = lo
        if hi < t_hi:
            t_hi = hi
    elif ox <= 0.0 or ox >= n:
        return 0.0, 0.0
    if abs(dy) > _PARALLEL_EPS:
        ta = (0.0 - oy) / dy
        tb = (n - oy) / dy
        if ta < tb:
            lo, hi = ta, tb
        else:
            lo, hi = tb, ta
        if lo > t_lo:
            t_lo = lo
        if hi < t_hi:
            t_hi = hi
    elif oy <= 0.0 or oy >= n:
        return 0.0, 0.0
    return t_lo, t_hi


@njit(cache=True, inline="always")
def _ray_gather(img, n, ox, oy, dx, dy):
    """Sum of pixel value times intersection length along one ray."""
    t_lo, t_hi = _ray_window(n, ox, oy, dx, dy)
    if t_hi <= t_lo:
        return 0.0
    if abs(dx) > _PARALLEL_EPS:
        tdx = abs(1.0 / dx)
        x0 = ox + t_lo * dx
        ix = math.floor(x0)
        if dx > 0.0:
            tnx = t_lo + ((ix + 1.0) - x0) / dx
        else:
            tnx = t_lo + (ix - x0) / dx
    else:
        tdx = 1e300
        tnx = 1e300
    if abs(dy) > _PARALLEL_EPS:
        tdy = abs(1.0 / dy)
        y0 = oy + t_lo * dy
        iy = math.floor(y0)
        if dy > 0.0:
            tny = t_lo + ((iy + 1.0) - y0) / dy
        else:
            tny = t_lo + (iy - y0) / dy
    else:
        tdy = 1e300
        tny = 1e300

    acc = 0.0
    t = t_lo
    while t < t_hi - 1e-12:
        if tnx < tny:
            tn = tnx
            tnx += tdx
        else:
            tn = tny
            tny += tdy
        if tn > t_hi:
            tn = t_hi
        seg = tn - t
        if seg > 0.0:
            tm = t + 0.5 * seg
            jx = int(math.floor(ox + tm * dx))
            jy = int(math.floor(oy + tm * dy))
            if 0 <= jx < n and 0 <= jy < n:
                acc += seg * img[n - 1 - jy, jx]
        t = tn
    return acc


@njit(cache=True, inline="always")
def _ray_gather2(img_a, img_b, n, ox, oy, dx, dy):
    """Gather two images along one traversal; bit-identical to two separate
    gathers because each accumulator sees the same additions in order."""
    t_lo, t_hi = _ray_window(n, ox, oy, dx, dy)
    if t_hi <= t_lo:
        return 0.0, 0.0
    if abs(dx) > _PARALLEL_EPS:
        tdx = abs(1.0 / dx)
        x0 = ox + t_lo * dx
        ix = math.floor(x0)
        if dx > 0.0:
            tnx = t_lo + ((ix + 1.0) - x0) / dx
        else:
            tnx = t_lo + (ix - x0) / dx
    else:
        tdx = 1e300
        tnx = 1e300
    if abs(dy) > _PARALLEL_EPS:
        tdy = abs(1.0 / dy)
        y0 = oy + t_lo * dy
        iy = math.floor(y0)
        if dy > 0.0:
            tny = t_lo + ((iy + 1.0) - y0) / dy
        else:
            tny = t_lo + (iy - y0) / dy
    else:
        tdy = 1e300
        tny = 1e300

    acc_a = 0.0
    acc_b = 0.0
    t = t_lo
    while t < t_hi - 1e-12:
        if tnx < tny:
            tn = tnx
            tnx += tdx
        else:
            tn = tny
            tny += tdy
        if tn > t_hi:
            tn = t_hi
        seg = tn - t
        if seg > 0.0:
            tm = t + 0.5 * seg
            jx = int(math.floor(ox + tm * dx))
            jy = int(math.floor(oy + tm * dy))
            if 0 <= jx < n and 0 <= jy < n:
                acc_a += seg * img_a[n - 1 - jy, jx]
                acc_b += seg * img_b[n - 1 - jy, jx]
        t = tn
    return acc_a, acc_b


@njit(cache=True, inline="always")
def _ray_scatter2(img_a, img_b, val_a, val_b, n, ox, oy, dx, dy):
    t_lo, t_hi = _ray_window(n, ox, oy, dx, dy)
    if t_hi <= t_lo:
        return
    if abs(dx) > _PARALLEL_EPS:
        tdx = abs(1.0 / dx)
        x0 = ox + t_lo * dx
        ix = math.floor(x0)
        if dx > 0.0:
            tnx = t_lo + ((ix + 1.0) - x0) / dx
        else:
            tnx = t_lo + (ix - x0) / dx
    else:
        tdx = 1e300
        tnx = 1e300
    if abs(dy) > _PARALLEL_EPS:
        tdy = abs(1.0 / dy)
        y0 = oy + t_lo * dy
        iy = math.floor(y0)
        if dy > 0.0:
            tny = t_lo + ((iy + 1.0) - y0) / dy
        else:
            tny = t_lo + (iy - y0) / dy
    else:
        tdy = 1e300
        tny = 1e300

    t = t_lo
    while t < t_hi - 1e-12:
        if tnx < tny:
            tn = tnx
            tnx += tdx
        else:
            tn = tny
            tny += tdy
        if tn > t_hi:
            tn = t_hi
        seg = tn - t
        if seg > 0.0:
            tm = t + 0.5 * seg
            jx = int(math.floor(ox + tm * dx))
            jy = int(math.floor(oy + tm * dy))
            if 0 <= jx < n and 0 <= jy < n:
                img_a[n - 1 - jy, jx] += seg * val_a
                img_b[n - 1 - jy, jx] += seg * val_b
        t = tn


@njit(cache=True, inline="always")
def _ray_scatter(img, val, n, ox, oy, dx, dy):
    """Add ``val`` times the intersection length into every crossed pixel."""
    t_lo, t_hi = _ray_window(n, ox, oy, dx, dy)
    if t_hi <= t_lo:
        return
    if abs(dx) > _PARALLEL_EPS:
        tdx = abs(1.0 / dx)
        x0 = ox + t_lo * dx
        ix = math.floor(x0)
        if dx > 0.0:
            tnx = t_lo + ((ix + 1.0) - x0) / dx
        else:
            tnx = t_lo + (ix - x0) / dx
    else:
        tdx = 1e300
        tnx = 1e300
    if abs(dy) > _PARALLEL_EPS:
        tdy = abs(1.0 / dy)
        y0 = oy + t_lo * dy
        iy = math.floor(y0)
        if dy > 0.0:
            tny = t_lo + ((iy + 1.0) - y0) / dy
        else:
            tny = t_lo + (iy - y0) / dy
    else:
        tdy = 1e300
        tny = 1e300

    t = t_lo
    while t < t_hi - 1e-12:
        if tnx < tny:
            tn = tnx
            tnx += tdx
        else:
            tn = tny
            tny += tdy
        if tn > t_hi:
            tn = t_hi
        seg = tn - t
        if seg > 0.0:
            tm = t + 0.5 * seg
            jx = int(math.floor(ox + tm * dx))
            jy = int(math.floor(oy + tm * dy))
            if 0 <= jx < n and 0 <= jy < n:
                img[n - 1 - jy, jx] += seg * val
        t = tn


@njit(cache=True)
def _forward_serial(img, cos_t, sin_t, offsets, out):
    n = img.shape[0]
    half = 0.5 * n
    for p in range(cos_t.shape[0]):
        c = cos_t[p]
        s = sin_t[p]
        for d in range(offsets.shape[0]):
            u = offsets[d]
            out[p, d] = _ray_gather(img, n, half + u * c, half + u * s, -s, c)


@njit(cache=True, parallel=True)
def _forward_parallel(img, cos_t, sin_t, offsets, out):
    n = img.shape[0]
    half = 0.5 * n
    for p in prange(cos_t.shape[0]):
        c = cos_t[p]
        s = sin_t[p]
        for d in range(offsets.shape[0]):
            u = offsets[d]
            out[p, d] = _ray_gather(img, n, half + u * c, half + u * s, -s, c)


@njit(cache=True)
def _adjoint_serial(sino, cos_t, sin_t, offsets, out):
    # per-angle partial images added in angle order: identical association
    # (and therefore identical bits) as the parallel variant
    n = out.shape[0]
    half = 0.5 * n
    tmp = np.zeros((n, n))
    for p in range(cos_t.shape[0]):
        c = cos_t[p]
        s = sin_t[p]
        for i in range(n):
            for j in range(n):
                tmp[i, j] = 0.0
        for d in range(offsets.shape[0]):
            u = offsets[d]
            _ray_scatter(tmp, sino[p, d], n, half + u * c, half + u * s, -s, c)
        for i in range(n):
            for j in range(n):
                out[i, j] += tmp[i, j]


@njit(cache=True, parallel=True)
def _adjoint_parallel(sino, cos_t, sin_t, offsets, out):
    n = out.shape[0]
    half = 0.5 * n
    n_angles = cos_t.shape[0]
    buf = np.zeros((n_angles, n, n))
    for p in prange(n_angles):
        c = cos_t[p]
        s = sin_t[p]
        for d in range(offsets.shape[0]):
            u = offsets[d]
            _ray_scatter(buf[p], sino[p, d], n, half + u * c, half + u * s, -s, c)
    for p in range(n_angles):
        for i in range(n):
            for j in range(n):
                out[i, j] += buf[p, i, j]


@njit(cache=True)
def _forward2_serial(img_a, img_b, cos_t, sin_t, offsets, out_a, out_b):
    n = img_a.shape[0]
    half = 0.5 * n
    for p in range(cos_t.shape[0]):
        c = cos_t[p]
        s = sin_t[p]
        for d in range(offsets.shape[0]):
            u = offsets[d]
            va, vb = _ray_gather2(img_a, img_b, n, half + u * c, half + u * s, -s, c)
            out_a[p, d] = va
            out_b[p, d] = vb


@njit(cache=True, parallel=True)
def _forward2_parallel(img_a, img_b, cos_t, sin_t, offsets, out_a, out_b):
    n = img_a.shape[0]
    half = 0.5 * n
    for p in prange(cos_t.shape[0]):
        c = cos_t[p]
        s = sin_t[p]
        for d in range(offsets.shape[0]):
            u = offsets[d]
            va, vb = _ray_gather2(img_a, img_b, n, half + u * c, half + u * s, -s, c)
            out_a[p, d] = va
            out_b[p, d] = vb


@njit(cache=True)
def _adjoint2_serial(sino_a, sino_b, cos_t, sin_t, offsets, out_a, out_b):
    n = out_a.shape[0]
    half = 0.5 * n
    tmp_a = np.zeros((n, n))
    tmp_b = np.zeros((n, n))
    for p in range(cos_t.shape[0]):
        c = cos_t[p]
        s = sin_t[p]
        for i in range(n):
            for j in range(n):
                tmp_a[i, j] = 0.0
                tmp_b[i, j] = 0.0
        for d in range(offsets.shape[0]):
            u = offsets[d]
            _ray_scatter2(
                tmp_a, tmp_b, sino_a[p, d], sino_b[p, d], n, half + u * c, half + u * s, -s, c
            )
        for i in range(n):
            for j in range(n):
                out_a[i, j] += tmp_a[i, j]
                out_b[i, j] += tmp_b[i, j]


@njit(cache=True, parallel=True)
def _adjoint2_parallel(sino_a, sino_b, cos_t, sin_t, offsets, out_a, out_b):
    n = out_a.shape[0]
    half = 0.5 * n
    n_angles = cos_t.shape[0]
    buf_a = np.zeros((n_angles, n, n))
    buf_b = np.zeros((n_angles, n, n))
    for p in prange(n_angles):
        c = cos_t[p]
        s = sin_t[p]
        for d in range(offsets.shape[0]):
            u = offsets[d]
            _ray_scatter2(
                buf_a[p], buf_b[p], sino_a[p, d], sino_b[p, d], n,
                half + u * c, half + u * s, -s, c,
            )
    for p in range(n_angles):
        for i in range(n):
            for j in range(n):
                out_a[i, j] += buf_a[p, i, j]
                out_b[i, j] += buf_b[p, i, j]


@njit(cache=True)
def _gram_diagonal_kernel(cos_t, sin_t, offsets, out):
    """diag(A^T A): per pixel, the sum of squared intersection lengths."""
    n = out.shape[0]
    half = 0.5 * n
    for p in range(cos_t.shape[0]):
        c = cos_t[p]
        s = sin_t[p]
        for d in range(offsets.shape[0]):
            u = offsets[d]
            ox = half + u * c
            oy = half + u * s
            dx = -s
            dy = c
            t_lo, t_hi = _ray_window(n, ox, oy, dx, dy)
            if t_hi <= t_lo:
                continue
            if abs(dx) > _PARALLEL_EPS:
                tdx = abs(1.0 / dx)
                x0 = ox + t_lo * dx
                ix = math.floor(x0)
                if dx > 0.0:
                    tnx = t_lo + ((ix + 1.0) - x0) / dx
                else:
                    tnx = t_lo + (ix - x0) / dx
            else:
                tdx = 1e300
                tnx = 1e300
            if abs(dy) > _PARALLEL_EPS:
                tdy = abs(1.0 / dy)
                y0 = oy + t_lo * dy
                iy = math.floor(y0)
                if dy > 0.0:
                    tny = t_lo + ((iy + 1.0) - y0) / dy
                else:
                    tny = t_lo + (iy - y0) / dy
            else:
                tdy = 1e300
                tny = 1e300
            t = t_lo
            while t < t_hi - 1e-12:
                if tnx < tny:
                    tn = tnx
                    tnx += tdx
                else:
                    tn = tny
                    tny += tdy
                if tn > t_hi:
                    tn = t_hi
                seg = tn - t
                if seg > 0.0:
                    tm = t + 0.5 * seg
                    jx = int(math.floor(ox + tm * dx))
                    jy = int(math.floor(oy + tm * dy))
                    if 0 <= jx < n and 0 <= jy < n:
                        out[n - 1 - jy, jx] += seg * seg
                t = tn


@dataclass(frozen=True)
class Geometry:
    """Parallel-beam measurement layout.

    ``n_pixels`` is the image side N (unit pixels over ``[0, N]^2``),
    ``angles_deg`` the projection angles in degrees within [0, 180) at
    constant spacing, ``n_detectors`` the number of detector bins and
    ``detector_spacing`` the bin pitch in pixel units.  The detector array
    must cover the projected footprint of the image at every angle.
    """

    n_pixels: int
    angles_deg: tuple[float, ...]
    n_detectors: int
    detector_spacing: float = 1.0

    def __post_init__(self):
        if self.n_pixels < 1:
            raise ValueError("n_pixels must be >= 1")
        if self.n_detectors < 1:
            raise ValueError("n_detectors must be >= 1")
        if len(self.angles_deg) < 1:
            raise ValueError("at least one projection angle is required")
        if self.detector_spacing <= 0:
            raise ValueError("detector_spacing must be positive")
        ang = np.asarray(self.angles_deg, dtype=np.float64)
        if np.any(ang < 0.0) or np.any(ang >= 180.0):
            raise ValueError("angles must lie in [0, 180) degrees")
        if len(ang) > 1:
            steps = np.diff(ang)
            if np.any(steps <= 0):
                raise ValueError("angles must be strictly increasing")
            if np.ptp(steps) > 1e-9 * max(1.0, steps[0]):
                raise ValueError("angles must be equally spaced")
        # no-truncation requirement: bins span the widest footprint
        rad = np.deg2rad(ang)
        width = self.n_pixels * float(np.max(np.abs(np.cos(rad)) + np.abs(np.sin(rad))))
        span = self.n_detectors * self.detector_spacing
        if span + 1e-9 < width:
            raise ValueError(
                f"detector array (span {span:.3f}) does not cover the image "
                f"footprint (width {width:.3f}); increase n_detectors"
            )

    @classmethod
    def parallel_beam(
        cls,
        n_pixels: int,
        n_angles: int = 65,
        n_detectors: int | None = None,
        detector_spacing: float = 1.0,
        angles_deg=None,
    ) -> "Geometry":
        """Equally spaced angles over [0, 180); detectors cover the diagonal."""
        if angles_deg is None:
            if n_angles < 1:
                raise ValueError("n_angles must be >= 1")
            angles_deg = tuple(180.0 * k / n_angles for k in range(n_angles))
        else:
            angles_deg = tuple(float(a) for a in angles_deg)
        if n_detectors is None:
            n_detectors = math.ceil(math.sqrt(2.0) * n_pixels / detector_spacing)
        return cls(
            n_pixels=n_pixels,
            angles_deg=angles_deg,
            n_detectors=n_detectors,
            detector_spacing=detector_spacing,
        )

    @property
    def n_angles(self) -> int:
        return len(self.angles_deg)

    @property
    def n_rays(self) -> int:
        return self.n_angles * self.n_detectors

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.n_pixels, self.n_pixels)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_detectors)

    @cached_property
    def _trig(self) -> tuple[np.ndarray, np.ndarray]:
        rad = np.deg2rad(np.asarray(self.angles_deg, dtype=np.float64))
        return np.cos(rad), np.sin(rad)

    @cached_property
    def _offsets(self) -> np.ndarray:
        r0 = self.n_detectors
        return (np.arange(r0, dtype=np.float64) - 0.5 * (r0 - 1)) * self.detector_spacing


def _check_image(img, geo: Geometry) -> np.ndarray:
    arr = np.ascontiguousarray(img, dtype=np.float64)
    if arr.shape != geo.image_shape:
        raise ValueError(f"image shape {arr.shape} does not match geometry {geo.image_shape}")
    return arr


def _check_sinogram(sino, geo: Geometry) -> np.ndarray:
    arr = np.ascontiguousarray(sino, dtype=np.float64)
    if arr.shape != geo.sinogram_shape:
        raise ValueError(
            f"sinogram shape {arr.shape} does not match geometry {geo.sinogram_shape}"
        )
    return arr


def radon_forward(img: np.ndarray, geo: Geometry) -> np.ndarray:
    """Project an (N, N) image to an (P, r0) sinogram, angle-major."""
    arr = _check_image(img, geo)
    cos_t, sin_t = geo._trig
    out = np.empty(geo.sinogram_shape, dtype=np.float64)
    if _use_parallel(geo.n_rays):
        _forward_parallel(arr, cos_t, sin_t, geo._offsets, out)
    else:
        _forward_serial(arr, cos_t, sin_t, geo._offsets, out)
    return out


def radon_adjoint(sino: np.ndarray, geo: Geometry) -> np.ndarray:
    """Exact transpose of :func:`radon_forward`."""
    arr = _check_sinogram(sino, geo)
    cos_t, sin_t = geo._trig
    n = geo.n_pixels
    out = np.zeros((n, n), dtype=np.float64)
    if _use_parallel(geo.n_rays):
        _adjoint_parallel(arr, cos_t, sin_t, geo._offsets, out)
    else:
        _adjoint_serial(arr, cos_t, sin_t, geo._offsets, out)
    return out


def radon_forward_pair(
    img_a: np.ndarray, img_b: np.ndarray, geo: Geometry
) -> tuple[np.ndarray, np.ndarray]:
    """Project two images in one ray sweep; bit-identical to two separate
    :func:`radon_forward` calls but roughly halves the traversal cost."""
    arr_a = _check_image(img_a, geo)
    arr_b = _check_image(img_b, geo)
    cos_t, sin_t = geo._trig
    out_a = np.empty(geo.sinogram_shape, dtype=np.float64)
    out_b = np.empty(geo.sinogram_shape, dtype=np.float64)
    if _use_parallel(geo.n_rays):
        _forward2_parallel(arr_a, arr_b, cos_t, sin_t, geo._offsets, out_a, out_b)
    else:
        _forward2_serial(arr_a, arr_b, cos_t, sin_t, geo._offsets, out_a, out_b)
    return out_a, out_b


def radon_adjoint_pair(
    sino_a: np.ndarray, sino_b: np.ndarray, geo: Geometry
) -> tuple[np.ndarray, np.ndarray]:
    """Backproject two sinograms in one ray sweep (exact transpose pair)."""
    arr_a = _check_sinogram(sino_a, geo)
    arr_b = _check_sinogram(sino_b, geo)
    cos_t, sin_t = geo._trig
    n = geo.n_pixels
    out_a = np.zeros((n, n), dtype=np.float64)
    out_b = np.zeros((n, n), dtype=np.float64)
    if _use_parallel(geo.n_rays):
        _adjoint2_parallel(arr_a, arr_b, cos_t, sin_t, geo._offsets, out_a, out_b)
    else:
        _adjoint2_serial(arr_a, arr_b, cos_t, sin_t, geo._offsets, out_a, out_b)
    return out_a, out_b


def gram_diagonal(geo: Geometry) -> np.ndarray:
    """Exact diagonal of A^T A as an (N, N) image of squared path lengths."""
    cos_t, sin_t = geo._trig
    out = np.zeros(geo.image_shape, dtype=np.float64)
    _gram_diagonal_kernel(cos_t, sin_t, geo._offsets, out)
    return out


def estimate_rho(geo: Geometry, n_samples: int, seed: int = 0) -> float:
    """Mean of diag(A^T A) over randomly sampled pixels.

    Sampling is without replacement whenever ``n_samples <= N^2`` (lower
    variance, and ``n_samples == N^2`` reproduces the exact mean).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    diag = gram_diagonal(geo).ravel()
    rng = np.random.Generator(np.random.Philox(seed))
    if n_samples <= diag.size:
        idx = rng.choice(diag.size, size=n_samples, replace=False)
    else:
        idx = rng.choice(diag.size, size=n_samples, replace=True)
    return float(np.mean(diag[idx]))


def estimate_sigma_max(geo: Geometry, tol: float = 1e-8, max_iters: int = 10000, seed: int = 0) -> float:
    """Largest singular value of A by power iteration on A^T A."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    v = rng.standard_normal(geo.image_shape)
    v = np.abs(v) + 0.1  # positive start: never orthogonal to a Perron-like top mode
    v /= np.linalg.norm(v)
    lam_old = 0.0
    for _ in range(max_iters):
        w = radon_adjoint(radon_forward(v, geo), geo)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
        if abs(lam - lam_old) <= tol * lam:
            break
        lam_old = lam
    return math.sqrt(lam)
