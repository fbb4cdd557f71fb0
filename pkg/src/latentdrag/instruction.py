"""Drag instruction data model, its JSON file format, and validation.

An instruction document bundles the six items of one editing job: the
image, the uneditable-region mask, and per-drag handle regions, points,
centers, and operation types; plus hyperparameters and an optional
free-text intent note.

Mask convention, fixed project-wide: a mask value of 1 marks pixels the
edit must NOT change (the uneditable region).
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from .geometry import BinaryMask, Point, round_half_away

HANDLE_JITTER_PX = 2  # annotation tolerance: handle may sit this far off its region


class SpecParseError(ValueError):
    """Malformed document; `path` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class SpecValidationError(ValueError):
    """Well-formed document violating an invariant; lists every failure."""

    def __init__(self, failures: List[str]):
        self.failures = list(failures)
        super().__init__("; ".join(failures))


class DragType(Enum):
    TRANSLATION = "translation"
    DEFORMATION = "deformation"
    ROTATION = "rotation"


class Optimizer(Enum):
    ADAM = "adam"
    PLAIN_GRADIENT = "plain"


@dataclass(frozen=True)
class DragInstruction:
    drag_type: DragType
    handle_region: BinaryMask
    handle: Point
    target: Point
    center: Optional[Point] = None


@dataclass(frozen=True)
class HyperParams:
    t_max: int = 50
    strength: float = 0.75
    t_prime: int = 33
    big_k: int = 10
    step_size: float = 2e-2
    lambda_m: float = 1.0
    optimizer: Optimizer = Optimizer.ADAM
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    @property
    def t_big(self) -> int:
        """Inversion depth T = round(t_max * strength), half away from zero."""
        return int(round_half_away(self.t_max * self.strength))

    def check(self) -> List[str]:
        problems = []
        if self.t_max < 1:
            problems.append(f"params.t_max: must be >= 1, got {self.t_max}")
        if not (0.0 < self.strength <= 1.0):
            problems.append(f"params.strength: must be in (0, 1], got {self.strength}")
        if self.t_big <= self.t_prime:
            problems.append(
                f"params.t_prime: need round(t_max*strength) > t_prime, "
                f"got T={self.t_big} <= {self.t_prime}"
            )
        if self.t_prime < 0:
            problems.append(f"params.t_prime: must be >= 0, got {self.t_prime}")
        if self.big_k < 1:
            problems.append(f"params.big_k: must be >= 1, got {self.big_k}")
        if not (self.step_size > 0):
            problems.append(f"params.step_size: must be > 0, got {self.step_size}")
        if self.lambda_m < 0:
            problems.append(f"params.lambda_m: must be >= 0, got {self.lambda_m}")
        return problems


@dataclass(frozen=True)
class EditSpec:
    image: np.ndarray  # uint8 [H, W, 3]
    uneditable_mask: BinaryMask  # 1 = uneditable (M)
    instructions: Tuple[DragInstruction, ...]
    params: HyperParams = field(default_factory=HyperParams)
    intent_note: Optional[str] = None

    def __post_init__(self):
        img = np.ascontiguousarray(self.image, dtype=np.uint8)
        img.flags.writeable = False
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "instructions", tuple(self.instructions))

    @property
    def image_hw(self) -> Tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


# ---------------------------------------------------------------------------
# run-length mask codec: "WxH:" then comma-separated runs alternating 0/1,
# starting with a 0-run (possibly of length 0), row-major


def mask_to_rle(mask: BinaryMask) -> str:
    flat = mask.bits.ravel()
    runs = []
    current = False  # encoding starts with a zero run
    count = 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current = not current
            count = 1
    runs.append(count)
    return f"{mask.width}x{mask.height}:" + ",".join(str(r) for r in runs)


def rle_to_mask(text: str) -> BinaryMask:
    try:
        header, body = text.split(":", 1)
        w_str, h_str = header.lower().split("x")
        w, h = int(w_str), int(h_str)
    except ValueError as exc:
        raise ValueError(f"bad RLE header in {text[:32]!r}") from exc
    if w < 1 or h < 1:
        raise ValueError(f"bad RLE dimensions {w}x{h}")
    runs = [int(r) for r in body.split(",")] if body else []
    if any(r < 0 for r in runs):
        raise ValueError("negative run length")
    if sum(runs) != w * h:
        raise ValueError(f"RLE runs sum to {sum(runs)}, expected {w * h}")
    flat = np.zeros(w * h, dtype=bool)
    pos = 0
    value = False
    for r in runs:
        if value:
            flat[pos : pos + r] = True
        pos += r
        value = not value
    return BinaryMask(flat.reshape(h, w))


# ---------------------------------------------------------------------------
# image payloads: "base64:<png>" inline or a file path


_B64_PREFIX = "base64:"


def _encode_image(image: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return _B64_PREFIX + base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_image(value: str, base_dir: Optional[Path], path: str) -> np.ndarray:
    if value.startswith(_B64_PREFIX):
        try:
            raw = base64.b64decode(value[len(_B64_PREFIX):])
            img = Image.open(io.BytesIO(raw))
        except Exception as exc:
            raise SpecParseError(path, f"undecodable inline image: {exc}")
    else:
        file = Path(value)
        if base_dir is not None and not file.is_absolute():
            file = base_dir / file
        if not file.exists():
            raise SpecParseError(path, f"image file not found: {file}")
        img = Image.open(file)
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def _decode_mask(value: str, base_dir: Optional[Path], path: str) -> BinaryMask:
    if ":" in value and "x" in value.split(":", 1)[0].lower():
        try:
            return rle_to_mask(value)
        except ValueError as exc:
            raise SpecParseError(path, str(exc))
    file = Path(value)
    if base_dir is not None and not file.is_absolute():
        file = base_dir / file
    if not file.exists():
        raise SpecParseError(path, f"mask file not found: {file}")
    arr = np.asarray(Image.open(file).convert("L"))
    return BinaryMask(arr > 127)


# ---------------------------------------------------------------------------
# canonical JSON: sorted keys, compact separators, integral reals as ints


def _canonical_number(v):
    f = float(v)
    if not np.isfinite(f):
        raise ValueError(f"non-finite number {v!r} cannot be serialized")
    if f == int(f) and abs(f) < 2**53:
        return int(f)
    return f


def _point_to_json(p: Point):
    return [_canonical_number(p.x), _canonical_number(p.y)]


def serialize_spec(spec: EditSpec) -> str:
    """Canonical document: sorted keys, compact separators, inline payloads.

    parse_spec inverts it, and serializing a parsed document reproduces the
    same bytes.
    """
    doc = {
        "image": _encode_image(spec.image),
        "uneditable_mask": mask_to_rle(spec.uneditable_mask),
        "instructions": [],
        "params": {
            "t_max": spec.params.t_max,
            "strength": _canonical_number(spec.params.strength),
            "t_prime": spec.params.t_prime,
            "big_k": spec.params.big_k,
            "step_size": _canonical_number(spec.params.step_size),
            "lambda_m": _canonical_number(spec.params.lambda_m),
            "optimizer": spec.params.optimizer.value,
            "adam_beta1": _canonical_number(spec.params.adam_beta1),
            "adam_beta2": _canonical_number(spec.params.adam_beta2),
            "adam_eps": _canonical_number(spec.params.adam_eps),
        },
    }
    for inst in spec.instructions:
        entry = {
            "type": inst.drag_type.value,
            "handle_region": mask_to_rle(inst.handle_region),
            "handle": _point_to_json(inst.handle),
            "target": _point_to_json(inst.target),
        }
        if inst.center is not None:
            entry["center"] = _point_to_json(inst.center)
        doc["instructions"].append(entry)
    if spec.intent_note is not None:
        doc["intent_note"] = spec.intent_note
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _require(obj, key, kind, path):
    if key not in obj:
        raise SpecParseError(f"{path}.{key}" if path else key, "missing required field")
    value = obj[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise SpecParseError(f"{path}.{key}" if path else key,
                                 f"expected a number, got {type(value).__name__}")
        return float(value)
    if kind is int:
        if not isinstance(value, int) or isinstance(value, bool):
            raise SpecParseError(f"{path}.{key}" if path else key,
                                 f"expected an integer, got {type(value).__name__}")
        return value
    if not isinstance(value, kind):
        raise SpecParseError(f"{path}.{key}" if path else key,
                             f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_point(value, path) -> Point:
    if (not isinstance(value, list)) or len(value) != 2:
        raise SpecParseError(path, "expected [x, y]")
    x, y = value
    for name, v in (("x", x), ("y", y)):
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not np.isfinite(v):
            raise SpecParseError(f"{path}.{name}", f"expected a finite number, got {v!r}")
    return Point(float(x), float(y))


def _parse_params(raw, path) -> HyperParams:
    if not isinstance(raw, dict):
        raise SpecParseError(path, f"expected an object, got {type(raw).__name__}")
    defaults = HyperParams()
    known = {
        "t_max": int, "strength": float, "t_prime": int, "big_k": int,
        "step_size": float, "lambda_m": float, "optimizer": str,
        "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    }
    for key in raw:
        if key not in known:
            raise SpecParseError(f"{path}.{key}", "unknown parameter")
    values = {}
    for key, kind in known.items():
        if key not in raw:
            continue
        if key == "optimizer":
            name = _require(raw, key, str, path)
            try:
                values[key] = Optimizer(name)
            except ValueError:
                raise SpecParseError(f"{path}.{key}",
                                     f"expected one of {[o.value for o in Optimizer]}, got {name!r}")
        else:
            values[key] = _require(raw, key, kind, path)
    return replace(defaults, **values)


def parse_spec(document, base_dir=None, image_override: Optional[np.ndarray] = None) -> EditSpec:
    """Parse and fully validate an instruction document.

    `document` may be a JSON string/bytes or an already-decoded dict.
    Relative image/mask paths resolve against `base_dir`. Malformed input
    raises SpecParseError with the offending field path; a well-formed
    document with invariant violations raises SpecValidationError listing
    every failure.
    """
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SpecParseError("$", f"invalid JSON: {exc}")
    if not isinstance(document, dict):
        raise SpecParseError("$", f"expected a JSON object, got {type(document).__name__}")
    base_dir = Path(base_dir) if base_dir is not None else None

    if image_override is not None:
        image = np.ascontiguousarray(image_override, dtype=np.uint8)
    else:
        image = _decode_image(_require(document, "image", str, ""), base_dir, "image")
    if image.ndim != 3 or image.shape[2] != 3:
        raise SpecParseError("image", f"expected an RGB raster, got shape {image.shape}")

    uneditable = _decode_mask(_require(document, "uneditable_mask", str, ""),
                              base_dir, "uneditable_mask")

    raw_instructions = _require(document, "instructions", list, "")
    instructions = []
    for i, raw in enumerate(raw_instructions):
        path = f"instructions[{i}]"
        if not isinstance(raw, dict):
            raise SpecParseError(path, "expected an object")
        type_name = _require(raw, "type", str, path)
        try:
            drag_type = DragType(type_name)
        except ValueError:
            raise SpecParseError(f"{path}.type",
                                 f"expected one of {[t.value for t in DragType]}, got {type_name!r}")
        region = _decode_mask(_require(raw, "handle_region", str, path),
                              base_dir, f"{path}.handle_region")
        handle = _parse_point(_require(raw, "handle", list, path), f"{path}.handle")
        target = _parse_point(_require(raw, "target", list, path), f"{path}.target")
        center = None
        if "center" in raw:
            center = _parse_point(raw["center"], f"{path}.center")
        instructions.append(DragInstruction(drag_type, region, handle, target, center))

    params = _parse_params(document.get("params", {}), "params")
    intent = document.get("intent_note")
    if intent is not None and not isinstance(intent, str):
        raise SpecParseError("intent_note", "expected a string")

    spec = EditSpec(image, uneditable, tuple(instructions), params, intent)
    failures = check_spec(spec)
    if failures:
        raise SpecValidationError(failures)
    return spec


def check_spec(spec: EditSpec) -> List[str]:
    """Invariant check; returns one message per violation."""
    failures = []
    h, w = spec.image_hw
    if h < 8 or w < 8:
        failures.append(f"image: must be at least 8x8, got {w}x{h}")
    if spec.uneditable_mask.shape != (h, w):
        failures.append(
            f"uneditable_mask: dims {spec.uneditable_mask.shape[1]}x"
            f"{spec.uneditable_mask.shape[0]} do not match image {w}x{h}"
        )
    if len(spec.instructions) == 0:
        failures.append("instructions: at least one drag is required")
    failures.extend(spec.params.check())

    for i, inst in enumerate(spec.instructions):
        path = f"instructions[{i}]"
        if inst.handle_region.shape != (h, w):
            failures.append(f"{path}.handle_region: dims do not match image")
            continue
        if inst.handle_region.count() == 0:
            failures.append(f"{path}.handle_region: empty region")
            continue
        if inst.drag_type is DragType.ROTATION and inst.center is None:
            failures.append(f"{path}.center: required for rotation")
        if inst.drag_type is not DragType.ROTATION and inst.center is not None:
            failures.append(f"{path}.center: only allowed for rotation")
        for name, p in (("handle", inst.handle), ("target", inst.target),
                        ("center", inst.center)):
            if p is None:
                continue
            if not (0 <= p.x < w and 0 <= p.y < h):
                failures.append(f"{path}.{name}: ({p.x}, {p.y}) outside image bounds")
        px = inst.handle_region.pixels()
        if px.shape[0]:
            cheb = np.maximum(np.abs(px[:, 0] - inst.handle.x),
                              np.abs(px[:, 1] - inst.handle.y)).min()
            if cheb > HANDLE_JITTER_PX:
                failures.append(
                    f"{path}.handle: {cheb:.1f} px off the handle region "
                    f"(tolerance {HANDLE_JITTER_PX})"
                )
    return failures


def validate(spec: EditSpec) -> List[str]:
    """Non-fatal warnings about suspicious but legal specs."""
    warnings = []
    for i, inst in enumerate(spec.instructions):
        overlap = inst.handle_region.bits & spec.uneditable_mask.bits
        if overlap.any():
            warnings.append(
                f"instructions[{i}]: handle region overlaps the uneditable "
                f"area on {int(overlap.sum())} px"
            )
    for i in range(len(spec.instructions)):
        for j in range(i + 1, len(spec.instructions)):
            both = spec.instructions[i].handle_region.bits & spec.instructions[j].handle_region.bits
            if both.any():
                warnings.append(
                    f"instructions[{i}] and instructions[{j}]: handle regions "
                    f"overlap on {int(both.sum())} px"
                )
    return warnings
