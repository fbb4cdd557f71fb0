"""Point-based baseline: motion supervision alternating with window tracking.

The comparison scheme the region engine replaces. Each iteration nudges
features in a small neighborhood of every tracked point one unit step
toward its target, then re-locates the point by searching a window for
the best match against its original features. Runs at the single deepest
timestep; the region engine's progressive window is the whole point of
the comparison.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .diffusion import Codec, Denoiser, LatentCode, NoiseSchedule, ddim_step, invert, make_schedule
from .features import Extractor, l1_sign
from .geometry import BinaryMask, Point, round_half_away, to_feature_grid
from .instruction import EditSpec
from .lro import RunResult


@dataclass(frozen=True)
class TrackedPoint:
    """A handle point on the feature grid plus its original features."""

    position: Tuple[int, int]  # (x, y), feature-grid integer coordinates
    initial_features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.initial_features, dtype=float)
        feats = feats.copy()
        feats.flags.writeable = False
        object.__setattr__(self, "initial_features", feats)


@dataclass(frozen=True)
class BaselineParams:
    motion_radius: int = 1  # neighborhood half-width for supervision
    track_radius: int = 3  # search half-width for tracking
    iterations: int = 40
    step_size: float = 0.1

    def __post_init__(self):
        if self.motion_radius < 1 or self.track_radius < 1:
            raise ValueError("radii must be >= 1")


def _window(cx: int, cy: int, radius: int, hw: Tuple[int, int]):
    h, w = hw
    xs = range(max(0, cx - radius), min(w, cx + radius + 1))
    ys = range(max(0, cy - radius), min(h, cy + radius + 1))
    return xs, ys


def motion_step(
    z: LatentCode,
    points: Sequence[TrackedPoint],
    targets: Sequence[Tuple[int, int]],
    extractor: Extractor,
    params: BaselineParams,
    m_feat: BinaryMask,
    lambda_m: float,
    ref_features: np.ndarray,
) -> LatentCode:
    """One gradient step of point motion supervision.

    For each point, features one unit step toward the target are pulled to
    the (detached) features at the current neighborhood; fractional sample
    positions use nearest-neighbor. Gradients flow only through the moved
    side. Points already at their targets are skipped. The uneditable
    anchor term compares against the supplied reference features.
    """
    features = extractor.apply(z, 0)
    fh, fw = features.shape[:2]
    cotangent = np.zeros_like(features)

    for point, goal in zip(points, targets):
        px, py = point.position
        dx, dy = goal[0] - px, goal[1] - py
        norm = float(np.hypot(dx, dy))
        if norm == 0.0:
            continue
        ux, uy = dx / norm, dy / norm
        xs, ys = _window(px, py, params.motion_radius, (fh, fw))
        for qy in ys:
            for qx in xs:
                mx = int(round_half_away(qx + ux))
                my = int(round_half_away(qy + uy))
                if not (0 <= mx < fw and 0 <= my < fh):
                    continue
                residual = features[my, mx, :] - features[qy, qx, :]  # second term detached
                cotangent[my, mx, :] += l1_sign(residual)

    if lambda_m > 0 and m_feat.count():
        sel = m_feat.bits
        cotangent[sel] += lambda_m * l1_sign(features[sel] - ref_features[sel])

    grad = extractor.adjoint(cotangent, 0)
    return LatentCode(z.data - params.step_size * grad, timestep=z.timestep)


def motion_loss(
    z: LatentCode,
    points: Sequence[TrackedPoint],
    targets: Sequence[Tuple[int, int]],
    extractor: Extractor,
    params: BaselineParams,
    m_feat: BinaryMask,
    lambda_m: float,
    ref_features: np.ndarray,
    stop_grad_features: Optional[np.ndarray] = None,
) -> float:
    """The scalar the motion step descends; exposed for gradient checks.

    The neighborhood side of each pair is behind a stop-gradient; pass
    `stop_grad_features` captured at a base latent to differentiate this
    scalar the way the step does (only through the moved side).
    """
    features = extractor.apply(z, 0)
    frozen = features if stop_grad_features is None else stop_grad_features
    fh, fw = features.shape[:2]
    total = 0.0
    for point, goal in zip(points, targets):
        px, py = point.position
        dx, dy = goal[0] - px, goal[1] - py
        norm = float(np.hypot(dx, dy))
        if norm == 0.0:
            continue
        ux, uy = dx / norm, dy / norm
        xs, ys = _window(px, py, params.motion_radius, (fh, fw))
        for qy in ys:
            for qx in xs:
                mx = int(round_half_away(qx + ux))
                my = int(round_half_away(qy + uy))
                if not (0 <= mx < fw and 0 <= my < fh):
                    continue
                total += float(np.abs(features[my, mx, :] - frozen[qy, qx, :]).sum())
    if lambda_m > 0 and m_feat.count():
        sel = m_feat.bits
        total += lambda_m * float(np.abs(features[sel] - ref_features[sel]).sum())
    return total


def track_points(
    z_new: LatentCode,
    points: Sequence[TrackedPoint],
    extractor: Extractor,
    params: BaselineParams,
) -> List[TrackedPoint]:
    """Move each point to the best feature match in its search window.

    Exhaustive argmin of the L1 distance to the point's original features;
    ties prefer the smallest offset (zero wins), then lexicographic
    (dy, dx).
    """
    features = extractor.apply(z_new, 0)
    fh, fw = features.shape[:2]
    updated = []
    for point in points:
        px, py = point.position
        xs, ys = _window(px, py, params.track_radius, (fh, fw))
        best = None
        for qy in ys:
            for qx in xs:
                dist = float(np.abs(features[qy, qx, :] - point.initial_features).sum())
                off = (max(abs(qx - px), abs(qy - py)), qy - py, qx - px)
                key = (dist, *off)
                if best is None or key < best[0]:
                    best = (key, (qx, qy))
        updated.append(replace(point, position=best[1]))
    return updated


def baseline_run(
    spec: EditSpec,
    denoiser: Denoiser,
    extractor: Extractor,
    codec: Codec,
    schedule: Optional[NoiseSchedule] = None,
    params: Optional[BaselineParams] = None,
    trajectory_out: Optional[List[List[Tuple[int, int]]]] = None,
) -> RunResult:
    """Alternate motion supervision and tracking at the deepest timestep.

    With zero iterations this is exactly the invert/denoise round trip.
    Pass `trajectory_out` to record tracked positions per iteration (the
    drag-halt diagnostics want them).
    """
    if params is None:
        params = BaselineParams()
    if schedule is None:
        schedule = make_schedule(t_max=spec.params.t_max)
    T = spec.params.t_big

    started = time.perf_counter()
    z0 = codec.encode(spec.image)
    traj = invert(z0, T, denoiser, schedule)
    z = traj[-1] if traj else z0

    ref_features = extractor.apply(z, 0)
    m_feat = to_feature_grid(spec.uneditable_mask, spec.image_hw)

    points = []
    targets = []
    for inst in spec.instructions:
        px = int(inst.handle.x) // 2
        py = int(inst.handle.y) // 2
        gx = int(inst.target.x) // 2
        gy = int(inst.target.y) // 2
        points.append(TrackedPoint((px, py), ref_features[py, px, :]))
        targets.append((gx, gy))

    loss_trace = []
    for it in range(params.iterations):
        loss = motion_loss(z, points, targets, extractor, params, m_feat,
                           spec.params.lambda_m, ref_features)
        z = motion_step(z, points, targets, extractor, params, m_feat,
                        spec.params.lambda_m, ref_features)
        points = track_points(z, points, extractor, params)
        loss_trace.append((T, it, loss))
        if trajectory_out is not None:
            trajectory_out.append([p.position for p in points])

    for t in range(T, 0, -1):
        z = ddim_step(z, t, denoiser, schedule)
    image = codec.decode(z)
    return RunResult(
        image=image,
        final_latent=z,
        loss_trace=loss_trace,
        latency_ms=(time.perf_counter() - started) * 1000.0,
        cancelled=False,
    )


def path_deviation(trajectory: Sequence[Tuple[int, int]], start: Tuple[int, int],
                   goal: Tuple[int, int]) -> float:
    """Greatest distance of any tracked position from the straight segment."""
    sx, sy = start
    gx, gy = goal
    seg = np.array([gx - sx, gy - sy], dtype=float)
    seg_len2 = float(seg @ seg)
    worst = 0.0
    for x, y in trajectory:
        rel = np.array([x - sx, y - sy], dtype=float)
        if seg_len2 == 0.0:
            d = float(np.hypot(*rel))
        else:
            u = np.clip(float(rel @ seg) / seg_len2, 0.0, 1.0)
            d = float(np.hypot(*(rel - u * seg)))
        worst = max(worst, d)
    return worst
