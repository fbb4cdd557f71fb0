"""Image fidelity metrics over a pluggable region distance.

Three scores, each 1 - mean(distance):
  * editable-region fidelity: original vs edited on the complement of the
    uneditable mask;
  * handle fidelity: original vs edited on each handle region (low after
    a successful drag, high when nothing moved);
  * target fidelity: original handle content vs edited content at the
    fully-dragged target region, compared through the region's coordinate
    map (high when content actually arrived).

The distance is pluggable because the usual perceptual metric needs a
pretrained network; the shipped distances are a masked mean absolute
error and a windowed structural distance.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import scipy.ndimage

from .geometry import BinaryMask, DegenerateDragError, signed_angle, rotate_region, translate_region
from .instruction import DragType, EditSpec

log = logging.getLogger(__name__)


class PatchDistance:
    """Region distance in [0, 1]; 0 for identical content, symmetric."""

    name = "abstract"

    def distance(self, a: np.ndarray, b: np.ndarray, mask: BinaryMask) -> float:
        raise NotImplementedError


class MaeDistance(PatchDistance):
    """Mean absolute error over masked pixels, normalized to [0, 1]."""

    name = "mae"

    def distance(self, a, b, mask):
        sel = mask.bits
        if not sel.any():
            return 0.0
        da = np.asarray(a, dtype=float)[sel] / 255.0
        db = np.asarray(b, dtype=float)[sel] / 255.0
        return float(np.abs(da - db).mean())


class SsimDistance(PatchDistance):
    """(1 - SSIM) / 2 on the grayscale crop of the mask's bounding box."""

    name = "ssim"

    def __init__(self, window: int = 7, k1: float = 0.01, k2: float = 0.03):
        self.window = window
        self.k1 = k1
        self.k2 = k2

    def distance(self, a, b, mask):
        sel = mask.bits
        if not sel.any():
            return 0.0
        ys, xs = np.nonzero(sel)
        y0, y1 = ys.min(), ys.max() + 1
        x0, x1 = xs.min(), xs.max() + 1
        ga = np.asarray(a, dtype=float)[y0:y1, x0:x1].mean(axis=2)
        gb = np.asarray(b, dtype=float)[y0:y1, x0:x1].mean(axis=2)
        win = min(self.window, min(ga.shape))
        if win < 1:
            return 0.0
        mean = lambda img: scipy.ndimage.uniform_filter(img, size=win, mode="reflect")
        mu_a, mu_b = mean(ga), mean(gb)
        var_a = mean(ga * ga) - mu_a**2
        var_b = mean(gb * gb) - mu_b**2
        cov = mean(ga * gb) - mu_a * mu_b
        c1 = (self.k1 * 255) ** 2
        c2 = (self.k2 * 255) ** 2
        ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
            (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        )
        value = float(np.clip(ssim_map.mean(), -1.0, 1.0))
        return (1.0 - value) / 2.0


DISTANCES = {"mae": MaeDistance, "ssim": SsimDistance}


def _check_lists(*lists):
    lengths = {len(l) for l in lists}
    if len(lengths) != 1:
        raise ValueError(f"mismatched list lengths {sorted(len(l) for l in lists)}")
    if not lists[0]:
        raise ValueError("empty image list")


def if_ed(originals: Sequence[np.ndarray], editeds: Sequence[np.ndarray],
          uneditable_masks: Sequence[BinaryMask], d: PatchDistance) -> float:
    """Fidelity of the editable region (complement of the uneditable mask)."""
    _check_lists(originals, editeds, uneditable_masks)
    total = 0.0
    for x, xe, m in zip(originals, editeds, uneditable_masks):
        editable = BinaryMask(~m.bits)
        total += d.distance(x, xe, editable)
    return 1.0 - total / len(originals)


def if_hh(originals: Sequence[np.ndarray], editeds: Sequence[np.ndarray],
          specs: Sequence[EditSpec], d: PatchDistance) -> float:
    """Fidelity of handle regions between original and edited images."""
    _check_lists(originals, editeds, specs)
    total = 0.0
    count = 0
    for x, xe, spec in zip(originals, editeds, specs):
        for inst in spec.instructions:
            total += d.distance(x, xe, inst.handle_region)
            count += 1
    if count == 0:
        raise ValueError("no instructions to score")
    return 1.0 - total / count


def final_state(inst) -> tuple:
    """Target region and map at full drag fraction (exactly 1)."""
    if inst.drag_type is DragType.ROTATION:
        angle = signed_angle(inst.handle, inst.center, inst.target)
        return rotate_region(inst.handle_region, inst.center, angle)
    dx = inst.target.x - inst.handle.x
    dy = inst.target.y - inst.handle.y
    return translate_region(inst.handle_region, (dx, dy))


def if_th(originals: Sequence[np.ndarray], editeds: Sequence[np.ndarray],
          specs: Sequence[EditSpec], d: PatchDistance) -> float:
    """Fidelity between original handle content and edited target content.

    The edited image is read on the final target region and compared
    against the original gathered through the region's coordinate map, so
    differently-shaped pixel sets line up pointwise. Instructions whose
    target region leaves the grid entirely are excluded with a warning.
    """
    _check_lists(originals, editeds, specs)
    total = 0.0
    count = 0
    for j, (x, xe, spec) in enumerate(zip(originals, editeds, specs)):
        for i, inst in enumerate(spec.instructions):
            try:
                rho, pi = final_state(inst)
            except DegenerateDragError:
                log.warning("image %d instruction %d: target region off-grid, excluded", j, i)
                continue
            aligned = np.zeros_like(np.asarray(x))
            tgt = pi.targets
            src = pi.sources
            aligned[tgt[:, 1], tgt[:, 0]] = np.asarray(x)[src[:, 1], src[:, 0]]
            total += d.distance(aligned, xe, rho)
            count += 1
    if count == 0:
        raise ValueError("no instructions with on-grid target regions")
    return 1.0 - total / count


@dataclass
class MetricsReport:
    method: str
    if_ed: float
    if_th: float
    if_hh: float
    latency_ms: float

    def __post_init__(self):
        for name in ("if_ed", "if_th", "if_hh"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of range: {v}")


def report_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", "if_ed", "if_th", "if_hh", "latency_ms"])
    for r in reports:
        writer.writerow([r.method, f"{r.if_ed:.6f}", f"{r.if_th:.6f}",
                         f"{r.if_hh:.6f}", f"{r.latency_ms:.1f}"])
    return buf.getvalue()


def report_table(reports: Sequence[MetricsReport]) -> str:
    header = f"{'method':<12} {'IF_ed':>8} {'IF_th':>8} {'IF_hh':>8} {'latency':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.method:<12} {r.if_ed:>8.4f} {r.if_th:>8.4f} {r.if_hh:>8.4f} "
            f"{r.latency_ms:>8.0f}ms"
        )
    return "\n".join(lines)
