"""Masks, points, rigid 2D transforms and the drag-fraction schedule.

Everything here is pixel-grid geometry: binary region masks, the
target-region / coordinate-map pairs produced by translating or rotating
a handle region, and the monotone fraction schedule that drives
intermediate drag states.

Conventions (fixed project-wide):
  * points are (x, y) with y growing downward, origin at the top-left
    pixel center;
  * arrays are indexed [y, x] (numpy row-major);
  * rounding is half-away-from-zero everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple, Union

import numpy as np

_TIE_EPS = 1e-9


class DegenerateDragError(ValueError):
    """A drag produced an empty target region (moved entirely off-grid)."""


class DegenerateRotationError(ValueError):
    """A rotation whose angle is undefined (handle or target on the center)."""


def round_half_away(values):
    """Round to nearest integer, halves away from zero. Deterministic
    across platforms, unlike numpy's bankers rounding."""
    values = np.asarray(values, dtype=float)
    return np.floor(np.abs(values) + 0.5) * np.sign(values)


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"point coordinates must be finite, got ({self.x}, {self.y})")

    def __sub__(self, other: "Point") -> Tuple[float, float]:
        return (self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class BinaryMask:
    """A per-pixel boolean grid. Immutable after construction."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"mask must be a 2-D grid of size >= 1x1, got shape {bits.shape}")
        bits = bits.copy()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def pixels(self) -> np.ndarray:
        """Set pixels as an [N, 2] array of (x, y), sorted by (y, x)."""
        ys, xs = np.nonzero(self.bits)
        return np.column_stack([xs, ys])

    @classmethod
    def full(cls, height: int, width: int, value: bool = True) -> "BinaryMask":
        return cls(np.full((height, width), value, dtype=bool))

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class CoordinateMap:
    """Total map from target pixels to source pixels, both on the integer
    grid. Stored as parallel [N, 2] (x, y) arrays sorted by target (y, x)."""

    targets: np.ndarray
    sources: np.ndarray

    def __post_init__(self):
        tgt = np.asarray(self.targets, dtype=np.int64).reshape(-1, 2)
        src = np.asarray(self.sources, dtype=np.int64).reshape(-1, 2)
        if tgt.shape != src.shape:
            raise ValueError("targets and sources must pair up")
        order = np.lexsort((tgt[:, 0], tgt[:, 1]))
        tgt = tgt[order].copy()
        src = src[order].copy()
        tgt.flags.writeable = False
        src.flags.writeable = False
        object.__setattr__(self, "targets", tgt)
        object.__setattr__(self, "sources", src)

    def __len__(self) -> int:
        return self.targets.shape[0]

    def as_dict(self) -> dict:
        return {tuple(t): tuple(s) for t, s in zip(self.targets, self.sources)}

    @classmethod
    def identity(cls, mask: BinaryMask) -> "CoordinateMap":
        px = mask.pixels()
        return cls(px, px)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, CoordinateMap)
            and np.array_equal(self.targets, other.targets)
            and np.array_equal(self.sources, other.sources)
        )


@dataclass(frozen=True)
class Schedule:
    """PBSI window bounds and per-timestep iteration count."""

    T: int
    T_prime: int
    K: int

    def __post_init__(self):
        if not (self.T > self.T_prime >= 0):
            raise ValueError(f"need T > T' >= 0, got T={self.T}, T'={self.T_prime}")
        if self.K < 1:
            raise ValueError(f"need K >= 1, got K={self.K}")

    def iteration_order(self) -> Iterable[Tuple[int, int]]:
        """(t, k) pairs in execution order: t descending T..T', k ascending."""
        for t in range(self.T, self.T_prime - 1, -1):
            for k in range(self.K):
                yield t, k

    @property
    def total_iterations(self) -> int:
        return self.K * (self.T - self.T_prime + 1)


def eta(t: int, k: int, s: Schedule) -> float:
    """Drag fraction in [0, 1) for iteration k of timestep t.

    Grows from 0 at (T, 0) to 1 - 1/(K*(T-T'+1)) at (T', K-1), strictly
    increasing along execution order (t descending, k ascending).
    """
    if not (s.T_prime <= t <= s.T):
        raise ValueError(f"timestep {t} outside schedule window [{s.T_prime}, {s.T}]")
    if not (0 <= k < s.K):
        raise ValueError(f"iteration {k} outside [0, {s.K})")
    return (s.K * (s.T - t) + k) / (s.K * (s.T - s.T_prime + 1))


def signed_angle(h: Point, c: Point, g: Point) -> float:
    """Signed angle in (-pi, pi] from vector c->h to vector c->g.

    Positive means counterclockwise in math orientation; with y growing
    downward that is clockwise on screen. The value is stored without
    reinterpretation.
    """
    ux, uy = h - c
    vx, vy = g - c
    if ux == 0.0 and uy == 0.0:
        raise DegenerateRotationError("handle point coincides with rotation center")
    if vx == 0.0 and vy == 0.0:
        raise DegenerateRotationError("target point coincides with rotation center")
    angle = float(np.arctan2(ux * vy - uy * vx, ux * vx + uy * vy))
    if angle <= -np.pi:
        angle += 2.0 * np.pi
    return angle


def _snap_to_mask(bits: np.ndarray, pre_x: int, pre_y: int,
                  cont_x: float, cont_y: float) -> Optional[Tuple[int, int]]:
    """Resolve a rounded preimage that missed the mask.

    Accepts a source within Chebyshev distance 1 of the rounded preimage
    provided the continuous preimage sits on that pixel's closed unit
    square (distance <= 0.5, with a small tolerance for exact rounding
    ties). Returns the snapped (x, y) or None to drop the target pixel.
    """
    h, w = bits.shape
    best = None
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            sx, sy = pre_x + dx, pre_y + dy
            if not (0 <= sx < w and 0 <= sy < h) or not bits[sy, sx]:
                continue
            cheb = max(abs(cont_x - sx), abs(cont_y - sy))
            if cheb > 0.5 + _TIE_EPS:
                continue
            key = (cheb, sy, sx)
            if best is None or key < best[0]:
                best = (key, (sx, sy))
    return None if best is None else best[1]


def _resolve_sources(bits, tx, ty, cont_x, cont_y):
    """Shared inverse-mapping core: rounded preimages, tie snapping, drops.

    tx/ty are candidate target pixels, cont_x/cont_y their continuous
    preimages. Returns (targets [N,2], sources [N,2]).
    """
    h, w = bits.shape
    pre_x = round_half_away(cont_x).astype(np.int64)
    pre_y = round_half_away(cont_y).astype(np.int64)
    in_grid = (pre_x >= 0) & (pre_x < w) & (pre_y >= 0) & (pre_y < h)
    direct = np.zeros(tx.shape, dtype=bool)
    direct[in_grid] = bits[pre_y[in_grid], pre_x[in_grid]]

    targets = [np.column_stack([tx[direct], ty[direct]])]
    sources = [np.column_stack([pre_x[direct], pre_y[direct]])]

    # Rare path: the rounded preimage missed the mask, usually an exact
    # half-pixel tie. Try snapping within the 1-pixel ring.
    for i in np.nonzero(~direct)[0]:
        near = max(abs(cont_x[i] - pre_x[i]), abs(cont_y[i] - pre_y[i]))
        if near < 0.5 - _TIE_EPS:
            continue  # unambiguous miss, not a tie
        snapped = _snap_to_mask(bits, int(pre_x[i]), int(pre_y[i]),
                                float(cont_x[i]), float(cont_y[i]))
        if snapped is not None:
            targets.append(np.array([[tx[i], ty[i]]]))
            sources.append(np.array([[snapped[0], snapped[1]]]))

    return np.concatenate(targets), np.concatenate(sources)


def translate_region(mask: BinaryMask, offset: Tuple[float, float]) -> Tuple[BinaryMask, CoordinateMap]:
    """Translate a region by a real-valued offset, rounding to the grid.

    The target region is the rounded forward image of the mask clipped to
    the grid; each target pixel maps back to the rounded preimage (snapped
    into the mask on exact rounding ties). Raises DegenerateDragError when
    everything lands off-grid.
    """
    if mask.count() == 0:
        raise ValueError("handle region is empty")
    ox, oy = float(offset[0]), float(offset[1])
    if not (np.isfinite(ox) and np.isfinite(oy)):
        raise ValueError("offset must be finite")
    h, w = mask.shape
    px = mask.pixels()
    fx = round_half_away(px[:, 0] + ox).astype(np.int64)
    fy = round_half_away(px[:, 1] + oy).astype(np.int64)
    keep = (fx >= 0) & (fx < w) & (fy >= 0) & (fy < h)
    fwd = np.unique(np.column_stack([fx[keep], fy[keep]]), axis=0)
    if fwd.shape[0] == 0:
        raise DegenerateDragError("region moved entirely off the grid")

    tx, ty = fwd[:, 0], fwd[:, 1]
    targets, sources = _resolve_sources(mask.bits, tx, ty, tx - ox, ty - oy)
    if targets.shape[0] == 0:
        raise DegenerateDragError("region moved entirely off the grid")
    rho = np.zeros((h, w), dtype=bool)
    rho[targets[:, 1], targets[:, 0]] = True
    return BinaryMask(rho), CoordinateMap(targets, sources)


def rotate_region(mask: BinaryMask, center: Point, angle: float) -> Tuple[BinaryMask, CoordinateMap]:
    """Rotate a region around a center point by an angle in radians.

    Rasterized by inverse mapping: a grid pixel belongs to the target
    region when its inverse-rotated center lands on the unit square of a
    mask pixel (nearest-neighbor pullback, with ties snapped to the
    nearest source). Exact for multiples of pi/2 about grid-aligned
    centers; the zero angle is the identity.
    """
    if mask.count() == 0:
        raise ValueError("handle region is empty")
    angle = float(angle)
    if not np.isfinite(angle):
        raise ValueError("angle must be finite")
    h, w = mask.shape

    # Scan the bounding box of the forward-rotated mask bbox, padded one
    # pixel; everything outside cannot pull back into the mask.
    px = mask.pixels()
    ct, st = np.cos(angle), np.sin(angle)
    corners_x = px[:, 0] - center.x
    corners_y = px[:, 1] - center.y
    fwd_x = corners_x * ct - corners_y * st + center.x
    fwd_y = corners_x * st + corners_y * ct + center.y
    x0 = max(0, int(np.floor(fwd_x.min())) - 1)
    x1 = min(w - 1, int(np.ceil(fwd_x.max())) + 1)
    y0 = max(0, int(np.floor(fwd_y.min())) - 1)
    y1 = min(h - 1, int(np.ceil(fwd_y.max())) + 1)
    if x1 < x0 or y1 < y0:
        raise DegenerateDragError("rotated region lies entirely off the grid")

    qx, qy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    qx = qx.ravel()
    qy = qy.ravel()
    ci, si = np.cos(-angle), np.sin(-angle)
    cont_x = (qx - center.x) * ci - (qy - center.y) * si + center.x
    cont_y = (qx - center.x) * si + (qy - center.y) * ci + center.y

    targets, sources = _resolve_sources(mask.bits, qx, qy, cont_x, cont_y)
    if targets.shape[0] == 0:
        raise DegenerateDragError("rotated region lies entirely off the grid")
    rho = np.zeros((h, w), dtype=bool)
    rho[targets[:, 1], targets[:, 0]] = True
    return BinaryMask(rho), CoordinateMap(targets, sources)


def intermediate_state(inst, t: int, k: int, s: Schedule) -> Tuple[BinaryMask, CoordinateMap]:
    """Target region and coordinate map of one instruction at fraction eta(t, k).

    Rotations scale the signed handle/target angle; translations and
    deformations share the same offset mapping (deformation is translation
    of a sub-region).
    """
    fraction = eta(t, k, s)
    kind = getattr(inst.drag_type, "value", inst.drag_type)
    if kind == "rotation":
        angle = signed_angle(inst.handle, inst.center, inst.target)
        return rotate_region(inst.handle_region, inst.center, fraction * angle)
    dx, dy = inst.target - inst.handle
    return translate_region(inst.handle_region, (fraction * dx, fraction * dy))


def feature_dims(image_hw: Tuple[int, int]) -> Tuple[int, int]:
    """Feature-grid dims: half the image resolution, rounded up."""
    return (image_hw[0] + 1) // 2, (image_hw[1] + 1) // 2


def to_feature_grid(obj: Union[BinaryMask, CoordinateMap], image_hw: Tuple[int, int],
                    feature_hw: Optional[Tuple[int, int]] = None):
    """Rescale a mask or coordinate map from image to feature resolution.

    Masks downsample by coverage: a feature pixel is set when any of the
    image pixels it covers is set. Map entries halve with floor (the
    center-of-pixel rule); duplicate targets collapse to the entry whose
    halved continuous source lies nearest its feature pixel center.
    """
    expected = feature_dims(image_hw)
    if feature_hw is None:
        feature_hw = expected
    elif tuple(feature_hw) != expected:
        raise ValueError(f"feature dims must be ceil(image/2) = {expected}, got {tuple(feature_hw)}")
    fh, fw = feature_hw

    if isinstance(obj, BinaryMask):
        if obj.shape != tuple(image_hw):
            raise ValueError(f"mask shape {obj.shape} does not match image dims {tuple(image_hw)}")
        padded = np.zeros((fh * 2, fw * 2), dtype=bool)
        padded[: obj.height, : obj.width] = obj.bits
        coarse = padded.reshape(fh, 2, fw, 2).any(axis=(1, 3))
        return BinaryMask(coarse)

    if isinstance(obj, CoordinateMap):
        if len(obj) == 0:
            return CoordinateMap(np.zeros((0, 2), int), np.zeros((0, 2), int))
        tgt = obj.targets // 2
        src = obj.sources // 2
        # distance of the halved continuous source from its feature pixel center
        cont = (obj.sources + 0.5) / 2.0
        dist = np.hypot(cont[:, 0] - (src[:, 0] + 0.5), cont[:, 1] - (src[:, 1] + 0.5))
        order = np.lexsort((obj.targets[:, 0], obj.targets[:, 1], dist))
        seen = {}
        for i in order:
            key = (int(tgt[i, 0]), int(tgt[i, 1]))
            if key not in seen:
                seen[key] = (int(src[i, 0]), int(src[i, 1]))
        targets = np.array(list(seen.keys()), dtype=np.int64).reshape(-1, 2)
        sources = np.array(list(seen.values()), dtype=np.int64).reshape(-1, 2)
        return CoordinateMap(targets, sources)

    raise TypeError(f"expected BinaryMask or CoordinateMap, got {type(obj).__name__}")
