"""Evaluation tools: low-rank baselines, error metrics and time-activity curves."""

from __future__ import annotations

import dataclasses

import numpy as np
from skimage.metrics import structural_similarity

from .geometry import ImagingSystem, frame_times, pixel_centers, pixel_index
from .phantom import GridImage
from .pounet import ContractError, PouNet


def _values(F) -> np.ndarray:
    return F.values if isinstance(F, GridImage) else np.asarray(F, dtype=float)


@dataclasses.dataclass
class SemiseparableApprox:
    """Rank-r space-time factorization F ~ spatial @ temporal."""

    spatial_factors: np.ndarray  # (N, r)
    temporal_factors: np.ndarray  # (r, K)
    rank_r: int

    def reconstruct(self) -> np.ndarray:
        return self.spatial_factors @ self.temporal_factors

    @property
    def n_params(self) -> int:
        N, K = self.spatial_factors.shape[0], self.temporal_factors.shape[1]
        return self.rank_r * (N + K)


def truncated_svd(F, r: int) -> SemiseparableApprox:
    """Best rank-r Frobenius approximation from the K x K Gram eigendecomposition."""
    A = _values(F)
    N, K = A.shape
    if not 1 <= r <= min(N, K):
        raise ContractError(f"rank {r} outside 1..{min(N, K)}")
    lam, V = np.linalg.eigh(A.T @ A)
    V = V[:, np.argsort(lam)[::-1][:r]]
    # projecting onto the leading right singular vectors: spatial = A V, temporal = V^T
    return SemiseparableApprox(A @ V, V.T.copy(), r)


def singular_spectrum(F) -> np.ndarray:
    """Singular values, descending, length min(N, K)."""
    return np.linalg.svd(_values(F), compute_uv=False)


def ss_param_count(r: int, n_pixels: int, n_frames: int) -> int:
    return r * (n_pixels + n_frames)


def equivalent_rank(n_params: int, n_pixels: int, n_frames: int) -> int:
    """Largest r with r (N + K) <= n_params."""
    return n_params // (n_pixels + n_frames)


def rrmse(F, G_ref) -> float:
    """||F - G||_F / ||G||_F."""
    a, b = _values(F), _values(G_ref)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ContractError("reference has zero norm")
    return float(np.linalg.norm(a - b) / nb)


def ssim(F, G_ref, n_side: int | None = None, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float | None = None) -> float:
    """Mean over frames of the Gaussian-window SSIM map.

    The dynamic range is taken from the reference over the whole sequence.
    On images smaller than the window the window shrinks to the largest
    odd size that fits.
    """
    a, b = _values(F), _values(G_ref)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    n = int(round(np.sqrt(a.shape[0]))) if n_side is None else n_side
    if data_range is None:
        data_range = float(b.max() - b.min()) or 1.0
    if win_size > n:
        win_size = n if n % 2 else n - 1
    if win_size < 3:
        raise ContractError("images too small for SSIM")
    out = []
    for k in range(a.shape[1]):
        out.append(structural_similarity(
            a[:, k].reshape(n, n), b[:, k].reshape(n, n), data_range=data_range, gaussian_weights=True,
            sigma=sigma, win_size=win_size, K1=k1, K2=k2, use_sample_covariance=False))
    return float(np.mean(out))


def time_activity(F, points, sys: ImagingSystem) -> np.ndarray:
    """Series over the frame times at each point, shape (n_points, K).

    ``F`` is a GridImage (nearest pixel) or a neural field (direct evaluation).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    h = sys.fov_size_L / 2
    if np.any(np.abs(pts) > h):
        raise ContractError("time-activity point outside the field of view")
    if isinstance(F, PouNet):
        t = frame_times(sys)
        return np.stack([F(pts, tk) for tk in t], axis=1)
    vals = _values(F)
    n = int(round(np.sqrt(vals.shape[0])))
    idx, inside = pixel_index(sys, np.clip(pts, -h, h * (1 - 1e-12)), n)
    return vals[idx]


def render_field(xi, sys: ImagingSystem, n_side: int | None = None) -> GridImage:
    """Evaluate a field at the pixel centers and frame times of the reconstruction grid."""
    n = sys.pixels_per_side_Ns if n_side is None else n_side
    c = pixel_centers(sys, n)
    t = frame_times(sys)
    vals = np.stack([xi(c, tk) for tk in t], axis=1)
    return GridImage(vals, sys.fov_size_L / n, t)


def downsample(img: GridImage, factor: int) -> GridImage:
    """Block-average each frame by an integer factor."""
    n = img.n_side
    if n % factor:
        raise ContractError("grid size not divisible by the factor")
    m = n // factor
    V = img.values.reshape(m, factor, m, factor, img.n_frames).mean(axis=(1, 3))
    return GridImage(V.reshape(m * m, img.n_frames), img.pixel_pitch * factor, img.frame_times)
