"""Tissue foreground handling: thumbnail masks, traced polygons, overlap tests.

The admission pipeline is: threshold (or load) a low-resolution binary mask,
trace it into closed polygon rings in full-resolution coordinates, then gate
candidate patches on the fraction of their footprint covered by the polygon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import measure

# Rec. 709 relative luminance weights.
_LUMA = np.array([0.2126, 0.7152, 0.0722])

DEFAULT_LUMINANCE_THRESHOLD = 0.9
DEFAULT_MIN_REGION_PX = 64

# Cells per axis for the overlap rasterizer. A cell only counts as covered
# when all four corners and its center lie inside the polygon, which makes
# the estimate one-sided (never above the true fraction) for convex regions;
# admission decisions made on it therefore never admit a patch whose true
# coverage is below the threshold. Worst-case deficit for a region bounded
# by straight edges crossing the rect is ~2*sqrt(2)/OVERLAP_GRID.
OVERLAP_GRID = 128


class EmptyForegroundError(ValueError):
    """No foreground region survived masking / filtering."""


@dataclass
class BinaryMask:
    """Boolean foreground grid at thumbnail scale.

    ``scale`` is the ratio of thumbnail pixels to full-resolution pixels
    (e.g. a 1/32 thumbnail has scale 1/32).
    """

    bits: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2 or self.bits.shape[0] < 1 or self.bits.shape[1] < 1:
            raise ValueError("mask must be a non-empty 2D grid")
        if not (0 < self.scale <= 1):
            raise ValueError(f"scale must be in (0, 1], got {self.scale}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class ForegroundPolygon:
    """Closed rings in full-resolution pixel coordinates.

    Outer rings carry positive shoelace area, holes negative; containment is
    evaluated with the even-odd rule so holes subtract automatically.
    """

    rings: list = field(default_factory=list)
    source_scale: float = 1.0
    slide_id: str = ""

    def __post_init__(self):
        rings = []
        for ring in self.rings:
            arr = np.asarray(ring, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
                raise ValueError("each ring needs >= 3 (x, y) points")
            # Drop an explicit closing point; closure is implicit.
            if np.array_equal(arr[0], arr[-1]) and arr.shape[0] > 3:
                arr = arr[:-1]
            rings.append(arr)
        self.rings = rings
        if not rings:
            raise EmptyForegroundError("polygon has no rings")
        if self.area() <= 0:
            raise ValueError("total signed polygon area must be positive")

    def area(self) -> float:
        """Total signed area (outer rings minus holes)."""
        return float(sum(_shoelace(r) for r in self.rings))

    def bounding_box(self) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) over all rings."""
        pts = np.concatenate(self.rings, axis=0)
        return (
            float(pts[:, 0].min()),
            float(pts[:, 1].min()),
            float(pts[:, 0].max()),
            float(pts[:, 1].max()),
        )

    def translated(self, dx: float, dy: float) -> "ForegroundPolygon":
        return ForegroundPolygon(
            rings=[r + np.array([dx, dy]) for r in self.rings],
            source_scale=self.source_scale,
            slide_id=self.slide_id,
        )

    def to_json_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "source_scale": self.source_scale,
            "rings": [r.tolist() for r in self.rings],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ForegroundPolygon":
        return cls(
            rings=[np.asarray(r, dtype=np.float64) for r in doc["rings"]],
            source_scale=float(doc.get("source_scale", 1.0)),
            slide_id=str(doc.get("slide_id", "")),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ForegroundPolygon":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _shoelace(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def mask_from_rgb(
    thumbnail: np.ndarray,
    luminance_threshold: float = DEFAULT_LUMINANCE_THRESHOLD,
    scale: float = 1.0,
) -> BinaryMask:
    """Threshold an RGB thumbnail into a foreground mask.

    A pixel is foreground when its relative luminance (fraction of full
    white) falls below the threshold: stained tissue is dark on a bright
    scanner background.
    """
    if not (0 < luminance_threshold < 1):
        raise ValueError("luminance_threshold must be in (0, 1)")
    arr = np.asarray(thumbnail)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB (H, W, 3) image, got shape {arr.shape}")
    lum = arr.astype(np.float64) @ _LUMA / 255.0
    return BinaryMask(bits=lum < luminance_threshold, scale=scale)


def load_mask_png(path, scale: float = 1.0) -> BinaryMask:
    """Load an externally supplied mask image; any nonzero pixel is foreground."""
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return BinaryMask(bits=arr != 0, scale=scale)


def polygon_from_mask(
    mask: BinaryMask,
    min_region_px: float = DEFAULT_MIN_REGION_PX,
    slide_id: str = "",
) -> ForegroundPolygon:
    """Trace the mask into closed rings and scale them to full resolution.

    Contours come from marching squares at the 0.5 iso-level; the mask is
    padded with one background pixel so rings touching the border still
    close. Rings enclosing less than ``min_region_px`` thumbnail pixels are
    dropped (both small islands and pinhole-sized holes).
    """
    if not mask.bits.any():
        raise EmptyForegroundError("mask contains no foreground pixels")
    padded = np.pad(mask.bits.astype(np.float64), 1)
    contours = measure.find_contours(padded, 0.5)

    rings = []
    for contour in contours:
        # (row, col) -> (x, y), undo the 1 px pad.
        ring = np.stack([contour[:, 1] - 1.0, contour[:, 0] - 1.0], axis=1)
        if np.array_equal(ring[0], ring[-1]):
            ring = ring[:-1]
        if ring.shape[0] < 3:
            continue
        if abs(_shoelace(ring)) < min_region_px:
            continue
        rings.append(ring)
    if not rings:
        raise EmptyForegroundError(
            f"no region of at least {min_region_px} px^2 in the mask"
        )

    # Orient by nesting depth: a ring inside an even number of other rings
    # is an outer boundary (positive area), odd means hole (negative).
    oriented = []
    for i, ring in enumerate(rings):
        probe = ring.mean(axis=0)
        depth = 0
        for j, other in enumerate(rings):
            if i != j and bool(
                points_in_polygon(probe.reshape(1, 2), [other])[0]
            ):
                depth += 1
        want_positive = depth % 2 == 0
        if (_shoelace(ring) > 0) != want_positive:
            ring = ring[::-1]
        oriented.append(ring / mask.scale)

    return ForegroundPolygon(
        rings=oriented, source_scale=mask.scale, slide_id=slide_id
    )


def points_in_polygon(points: np.ndarray, rings) -> np.ndarray:
    """Even-odd containment test for an array of (x, y) points.

    Vectorized crossing count over every edge of every ring; holes flip the
    parity back to outside.
    """
    pts = np.asarray(points, dtype=np.float64)
    px = pts[:, 0][:, None]
    py = pts[:, 1][:, None]
    inside = np.zeros(pts.shape[0], dtype=bool)
    for ring in rings:
        ring = np.asarray(ring, dtype=np.float64)
        x1, y1 = ring[:, 0][None, :], ring[:, 1][None, :]
        x2 = np.roll(ring[:, 0], -1)[None, :]
        y2 = np.roll(ring[:, 1], -1)[None, :]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        hits = crosses & (px < x_at)
        inside ^= hits.sum(axis=1) % 2 == 1
    return inside


def overlap_fraction(
    poly: ForegroundPolygon,
    rect: tuple[float, float, float, float],
    grid: int = OVERLAP_GRID,
) -> float:
    """Fraction of the rect's area covered by the polygon, in [0, 1].

    Supersampled rasterization on a ``grid`` x ``grid`` cell lattice; a cell
    counts only when its four corners and center all test inside, see
    OVERLAP_GRID for the accuracy consequences.
    """
    x, y, w, h = rect
    if w <= 0 or h <= 0:
        raise ValueError("rect width and height must be positive")
    if grid < 32:
        raise ValueError("grid must be at least 32")

    bx0, by0, bx1, by1 = poly.bounding_box()
    if x >= bx1 or y >= by1 or x + w <= bx0 or y + h <= by0:
        return 0.0

    edges_x = x + np.arange(grid + 1) * (w / grid)
    edges_y = y + np.arange(grid + 1) * (h / grid)
    gx, gy = np.meshgrid(edges_x, edges_y, indexing="xy")
    corner_pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    corners = points_in_polygon(corner_pts, poly.rings).reshape(grid + 1, grid + 1)

    cx = (edges_x[:-1] + edges_x[1:]) / 2.0
    cy = (edges_y[:-1] + edges_y[1:]) / 2.0
    mx, my = np.meshgrid(cx, cy, indexing="xy")
    center_pts = np.stack([mx.ravel(), my.ravel()], axis=1)
    centers = points_in_polygon(center_pts, poly.rings).reshape(grid, grid)

    covered = (
        corners[:-1, :-1]
        & corners[1:, :-1]
        & corners[:-1, 1:]
        & corners[1:, 1:]
        & centers
    )
    return float(covered.sum()) / float(grid * grid)


def rect_polygon(
    x: float, y: float, w: float, h: float, slide_id: str = ""
) -> ForegroundPolygon:
    """Axis-aligned rectangle as a single positively-oriented ring."""
    ring = np.array(
        [[x, y], [x, y + h], [x + w, y + h], [x + w, y]], dtype=np.float64
    )
    if _shoelace(ring) < 0:
        ring = ring[::-1]
    return ForegroundPolygon(rings=[ring], slide_id=slide_id)
