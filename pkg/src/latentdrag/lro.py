"""The region-matching loss and the progressive optimization loop.

One run: encode the image, invert it to timestep T, then walk the
denoising chain back down. Inside the window [T, T'] every timestep gets
K optimization iterations: build the intermediate target regions at the
current drag fraction, match current features against warped reference
features (L1, plus the uneditable-region anchor), pull the cotangent back
through the extractor, and step the latent. Below the window the chain
denoises untouched.

Reference features at each timestep come from a parallel vanilla chain
(the latent the run would have produced with no edits), computed once per
timestep and treated as constants. For exactly-invertible denoisers this
equals the inversion trajectory; computing it as a chain makes the no-op
run bit-exact.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .diffusion import (
    Codec,
    Denoiser,
    IdentityCodec,
    LatentCode,
    LinearDenoiser,
    NoiseSchedule,
    PoolCodec,
    SmoothingDenoiser,
    ZeroDenoiser,
    ddim_step,
    invert,
    make_schedule,
)
from .features import Extractor, IdentityExtractor, PyramidExtractor, l1_sign
from .geometry import (
    BinaryMask,
    CoordinateMap,
    Schedule,
    eta,
    feature_dims,
    intermediate_state,
    to_feature_grid,
)
from .instruction import EditSpec, Optimizer, mask_to_rle


class RunAbortedError(RuntimeError):
    """The optimization produced a non-finite loss; configuration is bad."""


@dataclass(frozen=True)
class IntermediateState:
    """One instruction's target region and gather map on the feature grid."""

    rho: BinaryMask
    pi: CoordinateMap
    instruction_index: int
    t: int
    k: int


@dataclass
class RunEvent:
    session_id: str
    t: int
    k: int
    loss: float
    eta: float
    elapsed_ms: float
    rho_preview: Optional[List[str]] = None  # image-resolution RLE per instruction

    def to_json(self) -> dict:
        doc = {
            "session_id": self.session_id,
            "t": self.t,
            "k": self.k,
            "loss": self.loss,
            "eta": self.eta,
            "elapsed_ms": self.elapsed_ms,
        }
        if self.rho_preview is not None:
            doc["rho_preview"] = self.rho_preview
        return doc


@dataclass
class RunResult:
    image: np.ndarray
    final_latent: LatentCode
    loss_trace: List[Tuple[int, int, float]]  # (t, k, loss)
    latency_ms: float
    cancelled: bool = False
    snapshots: Dict[int, LatentCode] = field(default_factory=dict)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape))


def adam_step(state: AdamState, z: np.ndarray, grad: np.ndarray, step_size: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Standard bias-corrected update; mutates the moment accumulators."""
    state.count += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.count)
    v_hat = state.v / (1 - beta2**state.count)
    return z - step_size * m_hat / (np.sqrt(v_hat) + eps)


def warp_reference(ref: np.ndarray, state: IntermediateState) -> np.ndarray:
    """Gather reference features through the coordinate map.

    output[q] = ref[pi(q)] for q in rho; other pixels are zero and callers
    must mask by rho.
    """
    out = np.zeros_like(ref)
    if len(state.pi) == 0:
        return out
    tgt = state.pi.targets
    src = state.pi.sources
    out[tgt[:, 1], tgt[:, 0], :] = ref[src[:, 1], src[:, 0], :]
    return out


def lro_loss(cur: np.ndarray, ref: np.ndarray, states: List[IntermediateState],
             m_feat: BinaryMask, lambda_m: float) -> Tuple[float, np.ndarray]:
    """Region-matching loss and its L1 cotangent on the feature grid.

    loss = sum_i |(cur - warp_i(ref)) * rho_i| + lambda_m * |(cur - ref) * M|
    Overlapping target regions contribute once per instruction (summed).
    """
    if cur.shape != ref.shape:
        raise ValueError(f"feature shapes differ: {cur.shape} vs {ref.shape}")
    if m_feat.shape != cur.shape[:2]:
        raise ValueError(f"mask shape {m_feat.shape} does not match features {cur.shape[:2]}")
    loss = 0.0
    cotangent = np.zeros_like(cur)
    for state in states:
        if state.rho.shape != cur.shape[:2]:
            raise ValueError("state grid does not match features")
        warped = warp_reference(ref, state)
        sel = state.rho.bits
        diff = cur[sel] - warped[sel]
        loss += float(np.abs(diff).sum())
        cotangent[sel] += l1_sign(diff)
    if lambda_m > 0 and m_feat.count():
        sel = m_feat.bits
        diff = cur[sel] - ref[sel]
        loss += lambda_m * float(np.abs(diff).sum())
        cotangent[sel] += lambda_m * l1_sign(diff)
    return loss, cotangent


def build_states(spec: EditSpec, t: int, k: int, schedule: Schedule) -> List[IntermediateState]:
    """Intermediate drag states of every instruction, moved to the feature grid."""
    image_hw = spec.image_hw
    states = []
    for i, inst in enumerate(spec.instructions):
        rho_img, pi_img = intermediate_state(inst, t, k, schedule)
        states.append(
            IntermediateState(
                rho=to_feature_grid(rho_img, image_hw),
                pi=to_feature_grid(pi_img, image_hw),
                instruction_index=i,
                t=t,
                k=k,
            )
        )
    return states


def _image_rho_previews(spec: EditSpec, t: int, k: int, schedule: Schedule) -> List[str]:
    previews = []
    for inst in spec.instructions:
        rho_img, _ = intermediate_state(inst, t, k, schedule)
        previews.append(mask_to_rle(rho_img))
    return previews


# ---------------------------------------------------------------------------
# component wiring


DENOISERS = {
    "zero": ZeroDenoiser,
    "linear": LinearDenoiser,
    "smoothing": SmoothingDenoiser,
}

CODECS = {
    "identity": IdentityCodec,
    "pool": PoolCodec,
}


def latent_dims(codec: Codec, image_hw: Tuple[int, int]) -> Tuple[int, int]:
    if isinstance(codec, PoolCodec):
        return (image_hw[0] + 1) // 2, (image_hw[1] + 1) // 2
    return tuple(image_hw)


def make_extractor(name: str, codec: Codec, image_hw: Tuple[int, int]) -> Extractor:
    lhw = latent_dims(codec, image_hw)
    fhw = feature_dims(image_hw)
    if name == "identity":
        return IdentityExtractor(lhw, fhw)
    if name == "pyramid":
        return PyramidExtractor(lhw, fhw)
    raise ValueError(f"unknown extractor {name!r}")


def make_components(spec: EditSpec, denoiser: str = "zero", extractor: str = "pyramid",
                    codec: str = "identity"):
    """Named component selection for one run."""
    if denoiser not in DENOISERS:
        raise ValueError(f"unknown denoiser {denoiser!r}")
    if codec not in CODECS:
        raise ValueError(f"unknown codec {codec!r}")
    den = DENOISERS[denoiser]()
    cod = CODECS[codec]()
    ext = make_extractor(extractor, cod, spec.image_hw)
    sched = make_schedule(t_max=spec.params.t_max)
    return den, ext, cod, sched


# ---------------------------------------------------------------------------
# the optimization loop


def pbsi_run(
    spec: EditSpec,
    denoiser: Denoiser,
    extractor: Extractor,
    codec: Codec,
    schedule: Optional[NoiseSchedule] = None,
    *,
    session_id: str = "",
    event_sink: Optional[Callable[[RunEvent], None]] = None,
    cancel: Optional[threading.Event] = None,
    snapshot_every: int = 0,
    include_previews: bool = True,
) -> RunResult:
    """Run the full edit: encode, invert, optimize over the window, decode.

    The window covers timesteps T down to T' inclusive, so the drag
    fraction spans [0, 1 - 1/(K*(T-T'+1))]. One event is emitted per
    (t, k) iteration; a set cancel flag stops the loop between iterations
    and the partially-edited latent is still denoised and decoded.
    """
    params = spec.params
    if schedule is None:
        schedule = make_schedule(t_max=params.t_max)
    T = params.t_big
    window = Schedule(T=T, T_prime=params.t_prime, K=params.big_k)
    if T > schedule.t_max:
        raise ValueError(f"inversion depth {T} exceeds schedule t_max {schedule.t_max}")

    started = time.perf_counter()
    z0 = codec.encode(spec.image)
    trajectory = invert(z0, T, denoiser, schedule)
    z = trajectory[-1] if trajectory else z0
    ref = z  # parallel unedited chain, same object at T

    m_feat = to_feature_grid(spec.uneditable_mask, spec.image_hw)

    loss_trace: List[Tuple[int, int, float]] = []
    snapshots: Dict[int, LatentCode] = {}
    cancelled = False

    for t in range(T, params.t_prime - 1, -1):
        ref_features = extractor.apply(ref, t)  # detached: plain array, once per t
        adam = AdamState.zeros(z.shape)
        for k in range(params.big_k):
            if cancel is not None and cancel.is_set():
                cancelled = True
                break
            states = build_states(spec, t, k, window)
            cur_features = extractor.apply(z, t)
            loss, cotangent = lro_loss(cur_features, ref_features, states,
                                       m_feat, params.lambda_m)
            if not np.isfinite(loss):
                raise RunAbortedError(
                    f"non-finite loss {loss} at t={t}, k={k}; "
                    f"step size {params.step_size} likely diverged"
                )
            grad = extractor.adjoint(cotangent, t)
            if params.optimizer is Optimizer.ADAM:
                new_data = adam_step(adam, z.data, grad, params.step_size,
                                     params.adam_beta1, params.adam_beta2, params.adam_eps)
            else:
                new_data = z.data - params.step_size * grad
            if not np.all(np.isfinite(new_data)):
                raise RunAbortedError(
                    f"latent overflowed at t={t}, k={k}; "
                    f"step size {params.step_size} diverged"
                )
            z = LatentCode(new_data, timestep=t)
            loss_trace.append((t, k, loss))
            if event_sink is not None:
                event = RunEvent(
                    session_id=session_id,
                    t=t,
                    k=k,
                    loss=loss,
                    eta=eta(t, k, window),
                    elapsed_ms=(time.perf_counter() - started) * 1000.0,
                    rho_preview=_image_rho_previews(spec, t, k, window) if include_previews else None,
                )
                event_sink(event)
        if cancelled:
            break
        if snapshot_every and (T - t) % snapshot_every == 0:
            snapshots[t] = z
        if t > 0:
            z = ddim_step(z, t, denoiser, schedule)
            ref = ddim_step(ref, t, denoiser, schedule)

    # below the window (or after a cancel): vanilla denoising to 0
    for t in range(z.timestep, 0, -1):
        z = ddim_step(z, t, denoiser, schedule)

    image = codec.decode(z)
    latency_ms = (time.perf_counter() - started) * 1000.0
    return RunResult(
        image=image,
        final_latent=z,
        loss_trace=loss_trace,
        latency_ms=latency_ms,
        cancelled=cancelled,
        snapshots=snapshots,
    )


def iteration_count(params) -> int:
    """Events a full run emits: K per timestep across the inclusive window."""
    return params.big_k * (params.t_big - params.t_prime + 1)
