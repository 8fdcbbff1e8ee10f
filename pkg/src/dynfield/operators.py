"""Circular Radon transform: quadrature (continuous-to-discrete) and sparse-matrix forms.

Data of one frame is a vector of length S*I ordered ``m = s*I + i`` (0-based),
i.e. all rings of the first sensor, then all rings of the second, and so on.
"""

from __future__ import annotations

import dataclasses
import functools
import math

import numpy as np
import scipy.sparse as sp

from .geometry import ImagingSystem, frame_times, pixel_index, ring_radii, sensor_positions
from .pounet import ContractError


@dataclasses.dataclass
class Sinogram:
    frames: np.ndarray  # (K, S*I)
    sigma: float
    system: ImagingSystem

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        K, m = self.frames.shape
        if K != self.system.n_frames_K or m != self.system.n_measurements_per_frame:
            raise ValueError(f"sinogram shape {self.frames.shape} does not match the system")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def n_measurements(self) -> int:
        return self.frames.size

    def copy(self) -> Sinogram:
        return Sinogram(self.frames.copy(), self.sigma, self.system)


# ----------------------------------------------------------------------------
# continuous-to-discrete operator


@dataclasses.dataclass(frozen=True)
class ArcQuadrature:
    """Mid-point quadrature nodes of all arcs of one frame that fall inside the FOV."""

    points: np.ndarray  # (n, 2)
    weights: np.ndarray  # (n,)
    rows: np.ndarray  # (n,) measurement index of each node
    n_rows: int
    time: float

    @functools.cached_property
    def aggregate(self) -> sp.csr_matrix:
        """Sparse (n_rows, n) matrix mapping node values to weighted arc sums."""
        n = len(self.weights)
        return sp.csr_matrix((self.weights, (self.rows, np.arange(n))), shape=(self.n_rows, n))

    def apply(self, values) -> np.ndarray:
        return np.bincount(self.rows, weights=self.weights * values, minlength=self.n_rows)

    def adjoint(self, residual) -> np.ndarray:
        return self.weights * residual[self.rows]


def arc_quadrature(sys: ImagingSystem, frame_k: int, n_quad: int | None = None) -> ArcQuadrature:
    """Quadrature nodes r_s + l_i (cos phi_q, sin phi_q), phi_q = 2 pi q / Q, q = 1..Q."""
    return _arc_quadrature(sys, frame_k, n_quad or sys.quadrature_points_Q)


@functools.lru_cache(maxsize=512)
def _arc_quadrature(sys: ImagingSystem, frame_k: int, Q: int) -> ArcQuadrature:
    radii = ring_radii(sys)
    I = len(radii)
    phi = 2 * math.pi * np.arange(1, Q + 1) / Q
    circle = np.stack([np.cos(phi), np.sin(phi)], axis=-1)  # (Q, 2)
    sensors = sensor_positions(sys, frame_k)  # (S, 2)
    pts = sensors[:, None, None, :] + radii[None, :, None, None] * circle[None, None]
    h = sys.fov_size_L / 2
    inside = (np.abs(pts[..., 0]) <= h) & (np.abs(pts[..., 1]) <= h)
    w = np.broadcast_to((2 * math.pi / Q) * radii[None, :, None], inside.shape)
    rows = np.broadcast_to((np.arange(len(sensors))[:, None] * I + np.arange(I)[None, :])[..., None], inside.shape)
    t = frame_times(sys)[frame_k - 1]
    return ArcQuadrature(pts[inside], w[inside].copy(), rows[inside].copy(), len(sensors) * I, float(t))


def crt_apply_field(field, sys: ImagingSystem, frame_k: int, n_quad: int | None = None,
                    time: float | None = None) -> np.ndarray:
    """Arc integrals of ``field(points, t)`` for frame ``frame_k`` (1-based).

    ``time`` overrides the frame time (used by the static initialization).
    """
    quad = arc_quadrature(sys, frame_k, n_quad)
    t = quad.time if time is None else time
    if len(quad.points) == 0:
        return np.zeros(quad.n_rows)
    return quad.apply(np.asarray(field(quad.points, t), dtype=float))


def crt_apply_field_all(field, sys: ImagingSystem, n_quad: int | None = None) -> Sinogram:
    frames = np.stack([crt_apply_field(field, sys, k, n_quad) for k in range(1, sys.n_frames_K + 1)])
    return Sinogram(frames, 0.0, sys)


# ----------------------------------------------------------------------------
# discrete-to-discrete operator


@dataclasses.dataclass
class SparseCrtOperator:
    """Per-frame CSC matrices H_k of shape (S*I, n_side**2)."""

    blocks: list
    system: ImagingSystem
    n_side: int

    @property
    def n_pixels(self) -> int:
        return self.n_side**2

    @property
    def shape(self) -> tuple[int, int]:
        return self.blocks[0].shape


def build_sparse_crt(sys: ImagingSystem, n_side: int | None = None, oversample: int = 4) -> SparseCrtOperator:
    """Arc-length-in-pixel matrices by fine arc subdivision.

    Each arc is cut into equal angular pieces no longer than
    ``pixel_pitch / oversample``; each piece contributes its length to the
    pixel containing its midpoint.
    """
    n = sys.pixels_per_side_Ns if n_side is None else n_side
    pitch = sys.fov_size_L / n
    radii = ring_radii(sys)
    I = len(radii)
    h = sys.fov_size_L / 2
    counts = np.maximum(np.ceil(2 * math.pi * radii / (pitch / oversample)).astype(np.int64), 8)
    blocks = []
    for k in range(1, sys.n_frames_K + 1):
        sensors = sensor_positions(sys, k)
        rows_all, cols_all, vals_all = [], [], []
        for i, (l, c) in enumerate(zip(radii, counts)):
            ang = 2 * math.pi * (np.arange(c) + 0.5) / c
            circle = l * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
            for s, r0 in enumerate(sensors):
                pts = r0 + circle
                ok = (np.abs(pts[:, 0]) < h) & (np.abs(pts[:, 1]) < h)
                if not ok.any():
                    continue
                idx, inside = pixel_index(sys, pts[ok], n)
                idx = idx[inside]
                if idx.size == 0:
                    continue
                uniq, cnt = np.unique(idx, return_counts=True)
                rows_all.append(np.full(uniq.size, s * I + i))
                cols_all.append(uniq)
                vals_all.append(cnt * (2 * math.pi * l / c))
        m = len(sensors) * I
        if rows_all:
            H = sp.csc_matrix((np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
                              shape=(m, n * n))
        else:
            H = sp.csc_matrix((m, n * n))
        H.sum_duplicates()
        H.sort_indices()
        blocks.append(H)
    return SparseCrtOperator(blocks, sys, n)


def _check_image(op: SparseCrtOperator, F):
    F = np.asarray(F, dtype=float)
    if F.shape[0] != op.n_pixels:
        raise ContractError(f"image has {F.shape[0]} pixels, operator expects {op.n_pixels}")
    return F


def sparse_apply(op: SparseCrtOperator, F, frame_k: int) -> np.ndarray:
    """H_k applied to frame ``frame_k`` (1-based) of F (N, K), or to a single frame vector."""
    F = _check_image(op, F)
    col = F if F.ndim == 1 else F[:, frame_k - 1]
    return op.blocks[frame_k - 1] @ col


def sparse_adjoint(op: SparseCrtOperator, v, frame_k: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (op.shape[0],):
        raise ContractError(f"data vector has shape {v.shape}, expected ({op.shape[0]},)")
    return op.blocks[frame_k - 1].T @ v


def forward_all(op: SparseCrtOperator, F) -> np.ndarray:
    """H(F) for F of shape (N, K); returns (K, S*I)."""
    F = _check_image(op, F)
    if F.shape[1] != len(op.blocks):
        raise ContractError("frame count mismatch")
    return np.stack([H @ F[:, k] for k, H in enumerate(op.blocks)])


def adjoint_all(op: SparseCrtOperator, D) -> np.ndarray:
    D = np.asarray(D, dtype=float)
    if D.shape != (len(op.blocks), op.shape[0]):
        raise ContractError(f"data has shape {D.shape}, expected {(len(op.blocks), op.shape[0])}")
    return np.stack([H.T @ D[k] for k, H in enumerate(op.blocks)], axis=1)


# ----------------------------------------------------------------------------
# noise


def frame_noise(seed: int, frame: int, size: int) -> np.ndarray:
    """Standard normal draws keyed by (seed, frame); entry j is the j-th counter."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, frame])))
    return gen.standard_normal(size)


def add_noise(d: Sinogram, relative_noise: float, seed: int) -> Sinogram:
    """Add white Gaussian noise with sigma = relative_noise * max|d|."""
    if relative_noise < 0:
        raise ValueError("relative_noise must be nonnegative")
    sigma = float(relative_noise * np.max(np.abs(d.frames)))
    if sigma == 0:
        return Sinogram(d.frames.copy(), 0.0, d.system)
    K, m = d.frames.shape
    noise = np.stack([frame_noise(seed, k, m) for k in range(K)])
    return Sinogram(d.frames + sigma * noise, sigma, d.system)
