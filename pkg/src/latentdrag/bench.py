"""Synthetic fixtures, an independent pixel-space warp oracle, and the harness.

Fixtures are flat gray scenes with one bright shape and a drag moving or
rotating it. The oracle image comes from a forward pixel-space warp that
shares nothing with the engine's inverse feature-space machinery, so
engine output can be scored against it (thresholded IoU, centroid error).

Handle regions deliberately include trailing background (translations) or
a surrounding disc (rotations): region drags are authored over the area
the content moves through, which is what makes the vacated area paint
over cleanly.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .baseline import BaselineParams, baseline_run
from .diffusion import ZeroDenoiser, invert, make_schedule, sample
from .geometry import BinaryMask, Point, round_half_away, signed_angle
from .instruction import (
    DragInstruction,
    DragType,
    EditSpec,
    HyperParams,
    parse_spec,
    serialize_spec,
)
from .lro import make_components, pbsi_run
from .metrics import MaeDistance, if_ed, if_hh, if_th

BACKGROUND = 51  # 0.2 gray in 8-bit
SHAPE_VALUE = 230  # 0.9
CORRIDOR_MARGIN = 5  # uneditable mask stays this far from the swept area

# engine settings the synthetic suite runs with; fixtures carry them in
# their params so CLI runs reproduce the same numbers
FIXTURE_STEP_SIZE = 0.1
FIXTURE_BIG_K = 20
FIXTURE_T_PRIME_TRANSLATE = 33
FIXTURE_T_PRIME_ROTATE = 28

BASELINE_SUITE_PARAMS = BaselineParams(iterations=60, step_size=0.15,
                                       motion_radius=2, track_radius=3)


@dataclass(frozen=True)
class Fixture:
    name: str
    spec: EditSpec
    oracle_image: np.ndarray
    oracle_meta: dict

    @property
    def image(self) -> np.ndarray:
        return self.spec.image


_SHAPE_WH = {"blob": (8, 8), "bar": (16, 4), "lshape": (16, 16)}

# rotation centers sit at the shape centroid plus this hinge offset; the
# symmetric blob needs an off-center hinge or a quarter turn maps it onto
# itself and nothing visibly moves
_ROTATION_HINGE = {"blob": (-8, 8), "bar": (0, 0), "lshape": (0, 0)}

_ROTATION_POS = {"blob": (26, 20), "bar": (24, 26), "lshape": (24, 22)}
_TRANSLATION_Y0 = {"blob": 26, "bar": 28, "lshape": 22}


def _stencil(kind: str, grid: int, x0: int, y0: int) -> np.ndarray:
    bits = np.zeros((grid, grid), dtype=bool)
    if kind == "blob":
        bits[y0 : y0 + 8, x0 : x0 + 8] = True
    elif kind == "bar":
        bits[y0 : y0 + 4, x0 : x0 + 16] = True
    elif kind == "lshape":
        bits[y0 : y0 + 16, x0 : x0 + 4] = True
        bits[y0 + 12 : y0 + 16, x0 : x0 + 16] = True
    else:
        raise ValueError(f"unknown fixture kind {kind!r}")
    return bits


def _trail_length(kind: str, drag: float) -> int:
    """Trailing strip long enough that the vacated area never leaves the
    sliding target region before background has painted over it."""
    shape_w, _ = _SHAPE_WH[kind]
    return max(12, shape_w + 4, int(drag) + 4)


def _trailing_handle(shape: np.ndarray, trail: int) -> np.ndarray:
    """Shape plus a strip of background on the trailing (left) side."""
    handle = shape.copy()
    for y in range(shape.shape[0]):
        row = np.nonzero(shape[y])[0]
        if len(row):
            handle[y, max(0, int(row.min()) - trail) : int(row.min())] = True
    return handle


def _corridor_mask(handle: np.ndarray, sweep: np.ndarray) -> BinaryMask:
    """Uneditable everywhere except a margin around the swept area."""
    size = 2 * CORRIDOR_MARGIN + 1
    editable = ndi.binary_dilation(sweep, np.ones((size, size), dtype=bool))
    return BinaryMask(~editable)


def gen_fixture(kind: str, op: DragType, magnitude: float, seed: int) -> Fixture:
    """Deterministic synthetic fixture.

    Translation/deformation magnitudes are pixels along +x; rotation
    magnitudes are radians. The oracle image is the forward warp of the
    handle region with vacated pixels filled from the border surround.
    """
    grid = 64
    rng = np.random.default_rng(seed)
    rotation = op is DragType.ROTATION
    shape_w, _ = _SHAPE_WH[kind]
    jitter = 2 * int(rng.integers(0, 2))
    if rotation:
        x0, y0 = _ROTATION_POS[kind]
        shape = _stencil(kind, grid, x0 + jitter, y0 + jitter)
    else:
        trail = _trail_length(kind, magnitude)
        shape = _stencil(kind, grid, trail + jitter, _TRANSLATION_Y0[kind] + jitter)
    ys, xs = np.nonzero(shape)
    cx, cy = xs.mean(), ys.mean()
    nearest = int(np.argmin((xs - cx) ** 2 + (ys - cy) ** 2))
    handle_pt = Point(float(xs[nearest]), float(ys[nearest]))

    image = np.full((grid, grid, 3), BACKGROUND, dtype=np.uint8)
    image[shape] = SHAPE_VALUE

    if rotation:
        # region: a disc around the rotation center covering the shape and
        # its sweep, so background rotates in behind the moving content
        hx, hy = _ROTATION_HINGE[kind]
        center = Point(float(int(cx) + hx), float(int(cy) + hy))
        radius = float(np.sqrt(((xs - center.x) ** 2 + (ys - center.y) ** 2).max())) + 4.0
        yy, xx = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
        handle = (xx - center.x) ** 2 + (yy - center.y) ** 2 <= radius**2
        # handle/target encode the angle about the center
        arm = max(radius - 2.0, 4.0)
        h = Point(center.x + arm, center.y)
        g = Point(center.x + arm * float(np.cos(magnitude)),
                  center.y + arm * float(np.sin(magnitude)))
        inst = DragInstruction(DragType.ROTATION, BinaryMask(handle), h, g, center)
        sweep = handle.copy()  # the disc contains its own rotation sweep
        t_prime = FIXTURE_T_PRIME_ROTATE
        target_desc = {"angle": float(magnitude), "center": [center.x, center.y]}
    else:
        drag = int(magnitude)
        trail = _trail_length(kind, magnitude)
        handle = _trailing_handle(shape, trail)
        g = Point(handle_pt.x + drag, handle_pt.y)
        inst = DragInstruction(op, BinaryMask(handle), handle_pt, g)
        sweep = np.zeros_like(handle)
        for dx in range(0, drag + 1):
            sweep |= np.roll(handle, dx, axis=1)
        t_prime = FIXTURE_T_PRIME_TRANSLATE
        target_desc = {"offset": [float(drag), 0.0]}

    uneditable = _corridor_mask(handle, sweep)
    params = HyperParams(step_size=FIXTURE_STEP_SIZE, big_k=FIXTURE_BIG_K, t_prime=t_prime)
    spec = EditSpec(image, uneditable, (inst,), params,
                    intent_note=f"{kind} {op.value} magnitude {magnitude}")
    oracle = oracle_warp(image, spec)
    meta = {
        "kind": kind,
        "op": op.value,
        "magnitude": float(magnitude),
        "seed": seed,
        "shape_px": int(shape.sum()),
        "shape_centroid": [float(cx), float(cy)],
        "target": target_desc,
    }
    name = f"{kind}_{op.value}_{_magnitude_tag(op, magnitude)}_s{seed}"
    return Fixture(name=name, spec=spec, oracle_image=oracle, oracle_meta=meta)


def _magnitude_tag(op: DragType, magnitude: float) -> str:
    if op is DragType.ROTATION:
        return f"{int(round(np.degrees(magnitude)))}deg"
    return f"{int(magnitude)}px"


def oracle_warp(image: np.ndarray, spec: EditSpec) -> np.ndarray:
    """Forward pixel-space application of each instruction's full transform.

    Handle-region pixels move to their rounded destinations; vacated
    pixels fill with the median color of the region's 2-px surround.
    Independent of the engine: no coordinate maps, no feature grids.
    """
    out = np.asarray(image).copy()
    h, w = out.shape[:2]
    for inst in spec.instructions:
        bits = inst.handle_region.bits
        ys, xs = np.nonzero(bits)
        if inst.drag_type is DragType.ROTATION:
            # splat each source pixel at 2x2 sub-sample offsets so the
            # rotated footprint has no rounding holes
            theta = signed_angle(inst.handle, inst.center, inst.target)
            ct, st = np.cos(theta), np.sin(theta)
            sub = 0.25
            nx_parts, ny_parts, src_parts = [], [], []
            for oy in (-sub, sub):
                for ox in (-sub, sub):
                    rx = (xs + ox - inst.center.x) * ct - (ys + oy - inst.center.y) * st \
                        + inst.center.x
                    ry = (xs + ox - inst.center.x) * st + (ys + oy - inst.center.y) * ct \
                        + inst.center.y
                    nx_parts.append(round_half_away(rx).astype(int))
                    ny_parts.append(round_half_away(ry).astype(int))
                    src_parts.append(np.arange(len(xs)))
            nx = np.concatenate(nx_parts)
            ny = np.concatenate(ny_parts)
            src = np.concatenate(src_parts)
        else:
            dx = inst.target.x - inst.handle.x
            dy = inst.target.y - inst.handle.y
            nx = round_half_away(xs + dx).astype(int)
            ny = round_half_away(ys + dy).astype(int)
            src = np.arange(len(xs))

        surround = ndi.binary_dilation(bits, np.ones((5, 5), dtype=bool)) & ~bits
        if surround.any():
            fill = np.median(np.asarray(image)[surround], axis=0).astype(out.dtype)
        else:
            fill = np.zeros(out.shape[2:], dtype=out.dtype)
        out[ys, xs] = fill
        ok = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
        out[ny[ok], nx[ok]] = np.asarray(image)[ys[src[ok]], xs[src[ok]]]
    return out


# ---------------------------------------------------------------------------
# scoring


def threshold_segment(image: np.ndarray) -> np.ndarray:
    cut = 0.5 * (SHAPE_VALUE + BACKGROUND)
    return image.astype(float).mean(axis=2) > cut


def shape_iou(result: np.ndarray, oracle: np.ndarray) -> float:
    a = threshold_segment(result)
    b = threshold_segment(oracle)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


def centroid_error(result: np.ndarray, oracle: np.ndarray) -> float:
    a = threshold_segment(result)
    b = threshold_segment(oracle)
    if not a.any() or not b.any():
        return float("inf")
    ay, ax = np.nonzero(a)
    by, bx = np.nonzero(b)
    return float(np.hypot(ax.mean() - bx.mean(), ay.mean() - by.mean()))


# ---------------------------------------------------------------------------
# the standard suite and the harness


STANDARD_VARIANTS: List[Tuple[DragType, float]] = [
    (DragType.TRANSLATION, 3.0),
    (DragType.TRANSLATION, 20.0),
    (DragType.ROTATION, float(np.pi / 4)),
    (DragType.ROTATION, float(np.pi / 2)),
]


def standard_suite(seed: int = 0) -> List[Fixture]:
    """{blob, bar, lshape} x {translate 3, translate 20, rotate 45, rotate 90}."""
    fixtures = []
    for kind in ("blob", "bar", "lshape"):
        for op, magnitude in STANDARD_VARIANTS:
            fixtures.append(gen_fixture(kind, op, magnitude, seed))
    return fixtures


@dataclass
class FixtureRow:
    name: str
    ok: bool
    iou: float
    centroid_err: float
    if_ed: float
    if_th: float
    if_hh: float
    latency_ms: float
    error: Optional[str] = None


@dataclass
class BenchReport:
    method: str
    rows: List[FixtureRow]
    if_ed: float
    if_th: float
    if_hh: float
    latency_ms: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["method", "if_ed", "if_th", "if_hh", "latency_ms"])
        writer.writerow([self.method, f"{self.if_ed:.6f}", f"{self.if_th:.6f}",
                         f"{self.if_hh:.6f}", f"{self.latency_ms:.1f}"])
        writer.writerow([])
        writer.writerow(["fixture", "ok", "iou", "centroid_err", "if_ed", "if_th",
                         "if_hh", "latency_ms", "error"])
        for row in self.rows:
            writer.writerow([row.name, int(row.ok), f"{row.iou:.4f}",
                             f"{row.centroid_err:.4f}", f"{row.if_ed:.6f}",
                             f"{row.if_th:.6f}", f"{row.if_hh:.6f}",
                             f"{row.latency_ms:.1f}", row.error or ""])
        return buf.getvalue()


SUCCESS_IOU = 0.5
SUCCESS_CENTROID = 2.0


def run_fixture(fixture: Fixture, method: str = "pbsi",
                denoiser: str = "zero", extractor: str = "pyramid",
                codec: str = "identity") -> FixtureRow:
    spec = fixture.spec
    den, ext, cod, sched = make_components(spec, denoiser, extractor, codec)
    try:
        if method == "pbsi":
            result = pbsi_run(spec, den, ext, cod, sched, include_previews=False)
        elif method == "baseline":
            result = baseline_run(spec, den, ext, cod, sched, params=BASELINE_SUITE_PARAMS)
        elif method == "frozen":
            result = _frozen_run(spec, den, cod, sched)
        else:
            raise ValueError(f"unknown method {method!r}")
    except Exception as exc:  # per-fixture failures recorded, not fatal
        return FixtureRow(fixture.name, False, 0.0, float("inf"),
                          0.0, 0.0, 0.0, 0.0, error=str(exc))

    d = MaeDistance()
    row = FixtureRow(
        name=fixture.name,
        ok=False,
        iou=shape_iou(result.image, fixture.oracle_image),
        centroid_err=centroid_error(result.image, fixture.oracle_image),
        if_ed=if_ed([spec.image], [result.image], [spec.uneditable_mask], d),
        if_th=if_th([spec.image], [result.image], [spec], d),
        if_hh=if_hh([spec.image], [result.image], [spec], d),
        latency_ms=result.latency_ms,
    )
    row.ok = row.iou >= SUCCESS_IOU and row.centroid_err <= SUCCESS_CENTROID
    return row


def _frozen_run(spec, denoiser, codec, schedule):
    """Invert/denoise round trip with zero optimization iterations."""
    from .lro import RunResult

    started = time.perf_counter()
    z0 = codec.encode(spec.image)
    traj = invert(z0, spec.params.t_big, denoiser, schedule)
    z = traj[-1] if traj else z0
    z = sample(z, spec.params.t_big, 0, denoiser, schedule)
    return RunResult(image=codec.decode(z), final_latent=z, loss_trace=[],
                     latency_ms=(time.perf_counter() - started) * 1000.0)


def run_bench(suite: List[Fixture], method: str = "pbsi", workers: int = 1,
              **component_names) -> BenchReport:
    """Score a method over a fixture suite; aggregates are plain means.

    Fixtures are independent, so they may run on a small worker pool; row
    order always follows the suite order.
    """
    if not suite:
        raise ValueError("empty fixture suite")
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda f: run_fixture(f, method, **component_names), suite))
    else:
        rows = [run_fixture(f, method, **component_names) for f in suite]
    scored = [r for r in rows if r.error is None]
    if scored:
        agg = {
            "if_ed": float(np.mean([r.if_ed for r in scored])),
            "if_th": float(np.mean([r.if_th for r in scored])),
            "if_hh": float(np.mean([r.if_hh for r in scored])),
            "latency_ms": float(np.mean([r.latency_ms for r in scored])),
        }
    else:
        agg = {"if_ed": 0.0, "if_th": 0.0, "if_hh": 0.0, "latency_ms": 0.0}
    return BenchReport(method=method, rows=rows, **agg)


# ---------------------------------------------------------------------------
# suite directory layout: fixtures/<name>/{image.png, spec.json, oracle.png}


def write_suite(suite: List[Fixture], root) -> None:
    root = Path(root)
    for fixture in suite:
        folder = root / fixture.name
        folder.mkdir(parents=True, exist_ok=True)
        Image.fromarray(fixture.image, mode="RGB").save(folder / "image.png")
        Image.fromarray(fixture.oracle_image, mode="RGB").save(folder / "oracle.png")
        (folder / "spec.json").write_text(serialize_spec(fixture.spec), encoding="utf-8")
        (folder / "meta.json").write_text(json.dumps(fixture.oracle_meta, indent=2),
                                          encoding="utf-8")


def read_suite(root) -> List[Fixture]:
    root = Path(root)
    fixtures = []
    if not root.is_dir():
        raise FileNotFoundError(f"suite directory {root} does not exist")
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        spec_file = folder / "spec.json"
        oracle_file = folder / "oracle.png"
        if not spec_file.exists() or not oracle_file.exists():
            continue
        spec = parse_spec(spec_file.read_text(encoding="utf-8"), base_dir=folder)
        oracle = np.asarray(Image.open(oracle_file).convert("RGB"))
        meta = {}
        meta_file = folder / "meta.json"
        if meta_file.exists():
            meta = json.loads(meta_file.read_text(encoding="utf-8"))
        fixtures.append(Fixture(folder.name, spec, oracle, meta))
    if not fixtures:
        raise FileNotFoundError(f"no fixtures found under {root}")
    return fixtures


def main(argv=None):
    """Materialize the standard suite: python -m latentdrag.bench --out DIR."""
    import argparse

    parser = argparse.ArgumentParser(description="generate the standard fixture suite")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    suite = standard_suite(args.seed)
    write_suite(suite, args.out)
    print(f"wrote {len(suite)} fixtures to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
