"""Feature extraction with exact adjoints.

Extractors map a latent grid to a feature grid at half the image
resolution. Every shipped extractor is a linear operator built as an
explicit sparse matrix, so the adjoint is the literal transpose and
vector-Jacobian products are exact rather than approximated. That keeps
gradient code provable at this scale: the inner-product identity
<Fz, u> == <z, F^T u> holds to machine precision by construction.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .diffusion import LatentCode

SIGN_DEADBAND = 1e-9  # |residual| below this counts as an exact match


def l1_sign(residual: np.ndarray) -> np.ndarray:
    """Subgradient of |r| with sign(0) = 0, widened by a small deadband.

    Float-level residuals (products of reciprocal rescalings and the like)
    must not inject full-magnitude sign gradients, so anything within the
    deadband is treated as zero.
    """
    return np.where(np.abs(residual) > SIGN_DEADBAND, np.sign(residual), 0.0)


def _reflect_index(i: int, n: int) -> int:
    # half-sample symmetric reflection: (b a | a b)
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        if i >= n:
            i = 2 * n - 1 - i
    return i


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian tap weights; sigma 0 is the identity tap."""
    if sigma <= 0:
        return np.array([1.0])
    radius = int(np.ceil(3 * sigma))
    offsets = np.arange(-radius, radius + 1)
    weights = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return weights / weights.sum()


def _conv1d_matrix(n: int, sigma: float) -> sp.csr_matrix:
    """1-D convolution as a sparse matrix with reflective boundaries."""
    weights = gaussian_kernel(sigma)
    radius = len(weights) // 2
    if radius == 0:
        return sp.identity(n, format="csr")
    rows, cols, vals = [], [], []
    for i in range(n):
        for o, wv in zip(range(-radius, radius + 1), weights):
            rows.append(i)
            cols.append(_reflect_index(i + o, n))
            vals.append(wv)
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    return mat.tocsr()


def _down_axis_matrix(src: int, dst: int) -> sp.csr_matrix:
    """Area-average 2:1 reduction along one axis; edge windows partial."""
    rows, cols, vals = [], [], []
    for i in range(dst):
        js = [j for j in (2 * i, 2 * i + 1) if j < src]
        for j in js:
            rows.append(i)
            cols.append(j)
            vals.append(1.0 / len(js))
    return sp.coo_matrix((vals, (rows, cols)), shape=(dst, src)).tocsr()


def _up_axis_matrix(src: int, dst: int) -> sp.csr_matrix:
    """Bilinear enlargement along one axis, clamped at the edges."""
    rows, cols, vals = [], [], []
    scale = src / dst
    for i in range(dst):
        pos = (i + 0.5) * scale - 0.5
        j0 = int(np.floor(pos))
        frac = pos - j0
        j0c = min(max(j0, 0), src - 1)
        j1c = min(max(j0 + 1, 0), src - 1)
        if j0c == j1c:
            rows.append(i); cols.append(j0c); vals.append(1.0)
        else:
            rows.append(i); cols.append(j0c); vals.append(1.0 - frac)
            rows.append(i); cols.append(j1c); vals.append(frac)
    return sp.coo_matrix((vals, (rows, cols)), shape=(dst, src)).tocsr()


def _resample_matrix(src_hw: Tuple[int, int], dst_hw: Tuple[int, int]) -> sp.csr_matrix:
    """Spatial resampling on vectorized grids: identity, area-average
    down, or bilinear up per axis."""
    def axis(src, dst):
        if src == dst:
            return sp.identity(src, format="csr")
        if src > dst:
            return _down_axis_matrix(src, dst)
        return _up_axis_matrix(src, dst)

    return sp.kron(axis(src_hw[0], dst_hw[0]), axis(src_hw[1], dst_hw[1]), format="csr")


class Extractor:
    """Linear feature extractor with an exact adjoint.

    apply() maps a latent [H_l, W_l, C] to features [H_f, W_f, C_f];
    adjoint() maps a feature cotangent back to a latent-shaped gradient.
    Implementations may depend on the timestep; the shipped ones do not.
    """

    latent_hw: Tuple[int, int]
    feature_hw: Tuple[int, int]
    channels_out: int

    def apply(self, z: LatentCode, t: int = 0) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, cotangent: np.ndarray, t: int = 0) -> np.ndarray:
        raise NotImplementedError


class IdentityExtractor(Extractor):
    """Resample the latent onto the feature grid, nothing else."""

    def __init__(self, latent_hw: Tuple[int, int], feature_hw: Tuple[int, int], channels: int = 3):
        self.latent_hw = tuple(latent_hw)
        self.feature_hw = tuple(feature_hw)
        self.channels = channels
        self.channels_out = channels
        self._op = _resample_matrix(self.latent_hw, self.feature_hw)
        self._op_t = self._op.T.tocsr()

    def apply(self, z, t=0):
        data = z.data if isinstance(z, LatentCode) else np.asarray(z)
        fh, fw = self.feature_hw
        out = np.empty((fh, fw, self.channels))
        for c in range(self.channels):
            out[:, :, c] = (self._op @ data[:, :, c].ravel()).reshape(fh, fw)
        return out

    def adjoint(self, cotangent, t=0):
        lh, lw = self.latent_hw
        out = np.empty((lh, lw, self.channels))
        for c in range(self.channels):
            out[:, :, c] = (self._op_t @ cotangent[:, :, c].ravel()).reshape(lh, lw)
        return out


class PyramidExtractor(Extractor):
    """Multi-scale features: the resampled latent convolved with Gaussians.

    One channel block per smoothing level, concatenated; level 0 is the
    plain resampled latent. Emulates reading a denoiser's multi-stage
    feature stack without a learned network.
    """

    def __init__(self, latent_hw: Tuple[int, int], feature_hw: Tuple[int, int],
                 channels: int = 3, sigmas: Sequence[float] = (0.0, 1.0, 2.0, 4.0)):
        self.latent_hw = tuple(latent_hw)
        self.feature_hw = tuple(feature_hw)
        self.channels = channels
        self.sigmas = tuple(sigmas)
        self.channels_out = channels * len(self.sigmas)
        resample = _resample_matrix(self.latent_hw, self.feature_hw)
        fh, fw = self.feature_hw
        self._ops = []
        self._ops_t = []
        for s in self.sigmas:
            blur = sp.kron(_conv1d_matrix(fh, s), _conv1d_matrix(fw, s), format="csr")
            op = (blur @ resample).tocsr()
            self._ops.append(op)
            self._ops_t.append(op.T.tocsr())

    def apply(self, z, t=0):
        data = z.data if isinstance(z, LatentCode) else np.asarray(z)
        fh, fw = self.feature_hw
        out = np.empty((fh, fw, self.channels_out))
        for si, op in enumerate(self._ops):
            for c in range(self.channels):
                out[:, :, si * self.channels + c] = (op @ data[:, :, c].ravel()).reshape(fh, fw)
        return out

    def adjoint(self, cotangent, t=0):
        lh, lw = self.latent_hw
        out = np.zeros((lh, lw, self.channels))
        for si, op_t in enumerate(self._ops_t):
            for c in range(self.channels):
                block = cotangent[:, :, si * self.channels + c].ravel()
                out[:, :, c] += (op_t @ block).reshape(lh, lw)
        return out


def vjp_of_l1(extractor: Extractor, z: LatentCode, target_features: np.ndarray,
              weight_mask: np.ndarray, t: int = 0) -> np.ndarray:
    """Gradient of sum(|F(z) - target| * w) with respect to the latent.

    weight_mask is per-pixel [H_f, W_f] (broadcast over channels) or full
    [H_f, W_f, C_f].
    """
    features = extractor.apply(z, t)
    if features.shape != target_features.shape:
        raise ValueError(f"feature shape {features.shape} != target {target_features.shape}")
    w = np.asarray(weight_mask, dtype=float)
    if w.ndim == 2:
        w = w[:, :, None]
    if w.shape[:2] != features.shape[:2]:
        raise ValueError(f"weight shape {w.shape} incompatible with features {features.shape}")
    cotangent = l1_sign(features - target_features) * w
    return extractor.adjoint(cotangent, t)
