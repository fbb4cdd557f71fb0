"""Noise schedule, deterministic DDIM stepping, and toy denoiser/codec stand-ins.

The sampler is the sigma=0 (deterministic) branch; with it, inversion
followed by sampling is the identity up to the small-step approximation,
and exactly so for the zero denoiser. The stochastic branch exists behind
a flag but nothing in the editing pipeline uses it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.ndimage

MAGIC = b"LRO1"


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels alpha_bar[0..t_max] and per-step betas."""

    alphas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=np.float64)
        betas = np.asarray(self.betas, dtype=np.float64)
        if abs(alphas[0] - 1.0) > 1e-12:
            raise ValueError(f"alphas[0] must be 1, got {alphas[0]}")
        if not np.all(np.diff(alphas) < 0):
            raise ValueError("alphas must be strictly decreasing")
        if not (np.all(alphas > 0) and np.all(alphas <= 1)):
            raise ValueError("alphas must lie in (0, 1]")
        alphas = alphas.copy()
        betas = betas.copy()
        alphas.flags.writeable = False
        betas.flags.writeable = False
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "betas", betas)

    @property
    def t_max(self) -> int:
        return len(self.alphas) - 1


def make_schedule(t_max: int = 50, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule; alphas[t] is the running product of (1 - beta)."""
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.zeros(t_max + 1)
    if t_max == 1:
        betas[1] = beta_start
    else:
        betas[1:] = beta_start + (beta_end - beta_start) * np.arange(t_max) / (t_max - 1)
    alphas = np.cumprod(1.0 - betas)
    return NoiseSchedule(alphas, betas)


@dataclass(frozen=True)
class LatentCode:
    """Dense real grid [H, W, C] tagged with the timestep it lives at."""

    data: np.ndarray
    timestep: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"latent must be [H, W, C], got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("latent contains non-finite entries")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape


class Denoiser:
    """Noise predictor contract: deterministic for fixed inputs.

    The condition slot mirrors conditional denoisers; the toy
    implementations ignore it.
    """

    def predict(self, z: LatentCode, t: int, condition: Optional[Sequence] = None) -> np.ndarray:
        raise NotImplementedError


class ZeroDenoiser(Denoiser):
    """Predicts no noise: DDIM steps become exact rescalings."""

    def predict(self, z, t, condition=None):
        return np.zeros(z.shape)


class LinearDenoiser(Denoiser):
    """Predicts gamma * z."""

    def __init__(self, gamma: float = 0.05):
        self.gamma = float(gamma)

    def predict(self, z, t, condition=None):
        return self.gamma * z.data


class SmoothingDenoiser(Denoiser):
    """Predicts gamma * (z - blur(z)); denoising pulls toward smoothness."""

    def __init__(self, gamma: float = 0.05, sigma: float = 1.0):
        self.gamma = float(gamma)
        self.sigma = float(sigma)

    def predict(self, z, t, condition=None):
        blurred = scipy.ndimage.gaussian_filter(z.data, sigma=(self.sigma, self.sigma, 0.0),
                                                mode="reflect")
        return self.gamma * (z.data - blurred)


class Codec:
    """Image <-> latent transport."""

    def encode(self, image: np.ndarray) -> LatentCode:
        raise NotImplementedError

    def decode(self, z: LatentCode) -> np.ndarray:
        raise NotImplementedError


class IdentityCodec(Codec):
    """Latent = the image itself, channels rescaled to [-1, 1].

    decode(encode(x)) is bit-exact for 8-bit input.
    """

    def encode(self, image):
        img = np.asarray(image, dtype=np.float64)
        return LatentCode(img / 127.5 - 1.0, timestep=0)

    def decode(self, z):
        raw = (z.data + 1.0) * 127.5
        return np.clip(np.floor(np.abs(raw) + 0.5) * np.sign(raw), 0, 255).astype(np.uint8)


class PoolCodec(Codec):
    """2x2 average-pool encode, bilinear decode. Lossy by construction."""

    def encode(self, image):
        img = np.asarray(image, dtype=np.float64) / 127.5 - 1.0
        h, w, c = img.shape
        fh, fw = (h + 1) // 2, (w + 1) // 2
        padded = np.zeros((fh * 2, fw * 2, c))
        padded[:h, :w] = img
        # partial edge windows average only real pixels
        counts = np.zeros((fh * 2, fw * 2, 1))
        counts[:h, :w] = 1.0
        pooled = padded.reshape(fh, 2, fw, 2, c).sum(axis=(1, 3))
        norm = counts.reshape(fh, 2, fw, 2, 1).sum(axis=(1, 3)).reshape(fh, fw, 1)
        return LatentCode(pooled / np.maximum(norm, 1.0), timestep=0)

    def decode(self, z):
        small = z.data
        fh, fw, c = small.shape
        h, w = fh * 2, fw * 2
        ys = (np.arange(h) + 0.5) / 2.0 - 0.5
        xs = (np.arange(w) + 0.5) / 2.0 - 0.5
        y0 = np.clip(np.floor(ys).astype(int), 0, fh - 1)
        x0 = np.clip(np.floor(xs).astype(int), 0, fw - 1)
        y1 = np.clip(y0 + 1, 0, fh - 1)
        x1 = np.clip(x0 + 1, 0, fw - 1)
        wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
        wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
        top = small[y0][:, x0] * (1 - wx) + small[y0][:, x1] * wx
        bot = small[y1][:, x0] * (1 - wx) + small[y1][:, x1] * wx
        raw = ((1 - wy) * top + wy * bot + 1.0) * 127.5
        return np.clip(np.floor(np.abs(raw) + 0.5) * np.sign(raw), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# DDIM stepping


def ddim_step(z: LatentCode, t: int, denoiser: Denoiser, schedule: NoiseSchedule,
              sigma_scale: float = 0.0, rng: Optional[np.random.Generator] = None) -> LatentCode:
    """One deterministic denoising step from t to t-1.

    z_{t-1} = sqrt(a_{t-1}) * (z_t - sqrt(1-a_t) * eps) / sqrt(a_t)
              + sqrt(1 - a_{t-1} - sigma_t^2) * eps  (+ sigma_t * noise)

    sigma_scale > 0 selects the stochastic branch; the editing pipeline
    never uses it.
    """
    if not (1 <= t <= schedule.t_max):
        raise ValueError(f"timestep {t} outside [1, {schedule.t_max}]")
    a = schedule.alphas
    eps = denoiser.predict(z, t)
    sigma = 0.0
    if sigma_scale > 0.0:
        sigma = sigma_scale * np.sqrt((1 - a[t - 1]) / (1 - a[t])) * np.sqrt(1 - a[t] / a[t - 1])
    x0_coeff = np.sqrt(a[t - 1])
    data = x0_coeff * (z.data - np.sqrt(1 - a[t]) * eps) / np.sqrt(a[t])
    data = data + np.sqrt(max(1 - a[t - 1] - sigma**2, 0.0)) * eps
    if sigma > 0.0:
        if rng is None:
            raise ValueError("stochastic stepping needs an rng")
        data = data + sigma * rng.standard_normal(z.shape)
    return LatentCode(data, timestep=t - 1)


def ddim_invert_step(z: LatentCode, t: int, denoiser: Denoiser,
                     schedule: NoiseSchedule) -> LatentCode:
    """One inversion step from t to t+1; noise evaluated at (z_t, t)."""
    if not (0 <= t < schedule.t_max):
        raise ValueError(f"timestep {t} outside [0, {schedule.t_max})")
    a = schedule.alphas
    eps = denoiser.predict(z, t)
    data = np.sqrt(a[t + 1]) / np.sqrt(a[t]) * (z.data - np.sqrt(1 - a[t]) * eps)
    data = data + np.sqrt(1 - a[t + 1]) * eps
    return LatentCode(data, timestep=t + 1)


def invert(z0: LatentCode, T: int, denoiser: Denoiser, schedule: NoiseSchedule) -> List[LatentCode]:
    """Chained inversion from a clean latent; returns [z_1, ..., z_T].

    The whole trajectory is kept: the editing loop wants per-timestep
    references.
    """
    if z0.timestep != 0:
        raise ValueError(f"inversion starts from timestep 0, got {z0.timestep}")
    if not (0 <= T <= schedule.t_max):
        raise ValueError(f"T={T} outside [0, {schedule.t_max}]")
    trajectory = []
    z = z0
    for t in range(T):
        z = ddim_invert_step(z, t, denoiser, schedule)
        trajectory.append(z)
    return trajectory


def sample(z: LatentCode, from_t: int, to_t: int, denoiser: Denoiser,
           schedule: NoiseSchedule) -> LatentCode:
    """Chained deterministic denoising from from_t down to to_t."""
    if from_t < to_t:
        raise ValueError(f"cannot sample upward from {from_t} to {to_t}")
    for t in range(from_t, to_t, -1):
        z = ddim_step(z, t, denoiser, schedule)
    return z


# ---------------------------------------------------------------------------
# latent snapshots: magic + H, W, C (u32 LE) + float32 grid


def latent_to_bytes(z: LatentCode) -> bytes:
    h, w, c = z.shape
    header = MAGIC + struct.pack("<III", h, w, c)
    return header + z.data.astype("<f4").tobytes(order="C")


def latent_from_bytes(blob: bytes, timestep: int = 0) -> LatentCode:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise ValueError("bad latent snapshot header")
    h, w, c = struct.unpack("<III", blob[4:16])
    expected = 16 + h * w * c * 4
    if len(blob) != expected:
        raise ValueError(f"latent snapshot truncated: {len(blob)} != {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w, c)
    return LatentCode(data.astype(np.float64), timestep=timestep)
