"""Procedural two-material test targets.

Every generated pair is binary with disjoint supports (no pixel contains
both materials) and fits inside the inscribed disc of the image square, so
raster rotations used for data simulation never clip the object.  The four
kinds step up in difficulty: plate with letter-shaped inclusions, bone
cross-section, dense glyph tablet, and a thin-trace circuit board.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ImagePair

KINDS = ("hy", "bone", "egypt", "circuit", "from-files")


@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    size: int
    seed: int = 0
    material1_path: str | None = None
    material2_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown phantom kind {self.kind!r}; choose from {KINDS}")
        if self.kind != "from-files" and self.size < 8:
            raise ValueError("procedural phantoms need size >= 8")
        if self.kind == "from-files" and not (self.material1_path and self.material2_path):
            raise ValueError("from-files phantoms need both material paths")


def _grid(n):
    rows, cols = np.mgrid[0:n, 0:n]
    return rows.astype(np.float64), cols.astype(np.float64)


def _rect(n, r0, r1, c0, c1):
    """Axis-aligned rectangle mask, bounds as fractions of N."""
    rows, cols = _grid(n)
    return (rows >= r0 * n) & (rows < r1 * n) & (cols >= c0 * n) & (cols < c1 * n)


def _disc(n, r_frac, centre_r=None, centre_c=None):
    rows, cols = _grid(n)
    cr = (n - 1) / 2.0 if centre_r is None else centre_r * n
    cc = (n - 1) / 2.0 if centre_c is None else centre_c * n
    return (rows - cr) ** 2 + (cols - cc) ** 2 <= (r_frac * n) ** 2


def _segment(n, p0, p1, halfwidth_frac):
    """Thick line segment; endpoints as (row, col) fractions of N."""
    rows, cols = _grid(n)
    a = np.array([p0[0] * n, p0[1] * n])
    b = np.array([p1[0] * n, p1[1] * n])
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        dist2 = (rows - a[0]) ** 2 + (cols - a[1]) ** 2
    else:
        t = ((rows - a[0]) * ab[0] + (cols - a[1]) * ab[1]) / denom
        t = np.clip(t, 0.0, 1.0)
        dist2 = (rows - (a[0] + t * ab[0])) ** 2 + (cols - (a[1] + t * ab[1])) ** 2
    hw = max(halfwidth_frac * n, 0.51)
    return dist2 <= hw * hw


def _hy(n):
    slab = _rect(n, 0.22, 0.78, 0.17, 0.83)
    h_letter = (
        _rect(n, 0.33, 0.67, 0.24, 0.29)
        | _rect(n, 0.33, 0.67, 0.39, 0.44)
        | _rect(n, 0.475, 0.525, 0.29, 0.39)
    )
    y_letter = (
        _segment(n, (0.33, 0.565), (0.50, 0.66), 0.022)
        | _segment(n, (0.33, 0.755), (0.50, 0.66), 0.022)
        | _rect(n, 0.50, 0.67, 0.635, 0.685)
    )
    holes = (h_letter | y_letter) & slab
    return slab & ~holes, holes


def _bone(n):
    ring = _disc(n, 0.40) & ~_disc(n, 0.30)
    marrow = _disc(n, 0.26)
    return ring, marrow


def _glyph(n, rng, r0, c0, w, h):
    """One random glyph inside the cell [r0, r0+h] x [c0, c0+w] (fractions)."""
    kind = rng.integers(0, 6)
    t = max(0.012, 1.2 / n)  # stroke thickness as a fraction
    if kind == 0:  # horizontal bar
        return _rect(n, r0 + h / 2 - t / 2, r0 + h / 2 + t / 2, c0, c0 + w)
    if kind == 1:  # vertical bar
        return _rect(n, r0, r0 + h, c0 + w / 2 - t / 2, c0 + w / 2 + t / 2)
    if kind == 2:  # open box
        outer = _rect(n, r0, r0 + h, c0, c0 + w)
        inner = _rect(n, r0 + t, r0 + h - t, c0 + t, c0 + w - t)
        return outer & ~inner
    if kind == 3:  # corner
        return _rect(n, r0, r0 + t, c0, c0 + w) | _rect(n, r0, r0 + h, c0, c0 + t)
    if kind == 4:  # diagonal stroke
        return _segment(n, (r0, c0), (r0 + h, c0 + w), t / 2)
    return _rect(n, r0 + h / 2 - t, r0 + h / 2 + t, c0 + w / 2 - t, c0 + w / 2 + t)  # dot


def _egypt(n, rng):
    tablet = _rect(n, 0.22, 0.78, 0.24, 0.76)
    glyphs = np.zeros((n, n), dtype=bool)
    n_cols = 4
    col_w = 0.10
    gap = (0.76 - 0.24 - n_cols * col_w) / (n_cols + 1)
    for c in range(n_cols):
        c0 = 0.24 + gap + c * (col_w + gap)
        r = 0.25
        while r < 0.72:
            h = 0.035 + 0.05 * rng.random()
            glyphs |= _glyph(n, rng, r, c0, col_w, h)
            r += h + 0.02
    glyphs &= _rect(n, 0.24, 0.76, 0.26, 0.74)
    return tablet & ~glyphs, glyphs & tablet


def _circuit(n, rng):
    board = _rect(n, 0.25, 0.75, 0.24, 0.76)
    traces = np.zeros((n, n), dtype=bool)
    pad = max(0.012, 1.6 / n)
    wire = max(0.006, 0.8 / n)
    pads = rng.uniform(0.29, 0.71, size=(10, 2))
    for r, c in pads:
        traces |= _rect(n, r - pad, r + pad, c - pad, c + pad)
    order = rng.permutation(len(pads))
    for k in range(len(order) - 1):
        r0, c0 = pads[order[k]]
        r1, c1 = pads[order[k + 1]]
        # Manhattan route with one bend
        traces |= _segment(n, (r0, c0), (r0, c1), wire)
        traces |= _segment(n, (r0, c1), (r1, c1), wire)
    traces &= _rect(n, 0.27, 0.73, 0.26, 0.74)
    return board & ~traces, traces


def generate(spec: PhantomSpec) -> ImagePair:
    """Render the binary, disjoint material pair described by ``spec``."""
    if spec.kind == "from-files":
        from .io import read_array

        g1 = read_array(spec.material1_path)
        g2 = read_array(spec.material2_path)
        pair = ImagePair(g1, g2)
        values = np.union1d(np.unique(pair.g1), np.unique(pair.g2))
        if not np.all(np.isin(values, (0.0, 1.0))):
            raise ValueError("imported phantom images must be binary (0/1 values)")
        overlap = int(np.count_nonzero(pair.g1 * pair.g2))
        if overlap:
            raise ValueError(
                f"imported materials overlap on {overlap} pixels; supports must be disjoint"
            )
        return pair

    rng = np.random.Generator(np.random.Philox(spec.seed))
    n = spec.size
    if spec.kind == "hy":
        m1, m2 = _hy(n)
    elif spec.kind == "bone":
        m1, m2 = _bone(n)
    elif spec.kind == "egypt":
        m1, m2 = _egypt(n, rng)
    else:
        m1, m2 = _circuit(n, rng)
    return ImagePair(m1.astype(np.float64), m2.astype(np.float64))
