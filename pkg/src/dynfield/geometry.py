"""Virtual circular-aperture imaging system and the space-time domain box.

Lengths are in cm, times in s. The rotation step is given in degrees at the
interface and converted to radians internally.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math

import numpy as np


class DomainError(ValueError):
    """Raised when an index or coordinate falls outside its valid range."""


@dataclasses.dataclass(frozen=True)
class ImagingSystem:
    """Geometry and acquisition parameters of the ring-sensor system.

    Defaults reproduce the full-scale system: a 2.9 cm field of view on a
    200x200 grid, an aperture of radius 2.05 cm, 180 frames over 5 s, 283
    integration arcs per view and a 2 degree rotation after every frame.
    """

    fov_size_L: float = 2.9
    pixels_per_side_Ns: int = 200
    aperture_R: float = 2.05
    acquisition_T: float = 5.0
    n_frames_K: int = 180
    rings_per_view_I: int = 283
    rotation_dtheta: float = 2.0
    views_per_frame_S: int = 4
    quadrature_points_Q: int = 512
    relative_noise: float = 0.025

    def __post_init__(self):
        if not self.fov_size_L >= 0:
            raise DomainError("fov_size_L must be nonnegative")
        # R > L/sqrt(2) would exclude the reference system itself (2.05 < 2.0506),
        # so only the inscribed disk is required to lie inside the aperture.
        if self.fov_size_L > 0 and not self.aperture_R > self.fov_size_L / 2:
            raise DomainError("aperture must enclose the field of view (R > L/2)")
        for name in ("n_frames_K", "views_per_frame_S", "rings_per_view_I", "pixels_per_side_Ns"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        if self.quadrature_points_Q < 8:
            raise DomainError("quadrature_points_Q must be >= 8")
        if self.acquisition_T <= 0:
            raise DomainError("acquisition_T must be positive")
        if self.relative_noise < 0:
            raise DomainError("relative_noise must be nonnegative")

    @property
    def n_pixels(self) -> int:
        return self.pixels_per_side_Ns**2

    @property
    def pixel_pitch(self) -> float:
        return self.fov_size_L / self.pixels_per_side_Ns

    @property
    def n_measurements_per_frame(self) -> int:
        return self.views_per_frame_S * self.rings_per_view_I

    @property
    def n_measurements(self) -> int:
        return self.n_frames_K * self.n_measurements_per_frame

    @property
    def box(self) -> DomainBox:
        return DomainBox(self.fov_size_L / 2, self.acquisition_T)

    def replace(self, **changes) -> ImagingSystem:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Short stable hash of all fields, used to key caches and files."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclasses.dataclass(frozen=True)
class DomainBox:
    """Omega_T = [-h, h]^2 x [0, T] with its affine map onto [-1, 1]^3."""

    half_width: float
    duration: float

    @property
    def volume(self) -> float:
        return (2 * self.half_width) ** 2 * self.duration

    @property
    def scale(self) -> np.ndarray:
        """Derivative of the normalized coordinates w.r.t. physical ones."""
        return np.array([1 / self.half_width, 1 / self.half_width, 2 / self.duration])

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        out[..., 0] = x[..., 0] / self.half_width
        out[..., 1] = x[..., 1] / self.half_width
        out[..., 2] = 2 * x[..., 2] / self.duration - 1
        return out

    def denormalize(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = np.empty_like(u)
        out[..., 0] = u[..., 0] * self.half_width
        out[..., 1] = u[..., 1] * self.half_width
        out[..., 2] = (u[..., 2] + 1) * self.duration / 2
        return out

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = self.half_width * (1 + tol) + tol
        return (
            (np.abs(x[..., 0]) <= h)
            & (np.abs(x[..., 1]) <= h)
            & (x[..., 2] >= -tol * self.duration)
            & (x[..., 2] <= self.duration * (1 + tol))
        )

    def check(self, x) -> None:
        if not np.all(self.contains(x)):
            raise DomainError("point outside the space-time domain")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples in Omega_T, returned in physical coordinates."""
        u = rng.uniform(-1.0, 1.0, size=(n, 3))
        return self.denormalize(u)


def normalize_coords(box: DomainBox, x) -> np.ndarray:
    return box.normalize(x)


def denormalize_coords(box: DomainBox, u) -> np.ndarray:
    return box.denormalize(u)


def sensor_angle(sys: ImagingSystem, frame_k: int, view_s: int) -> float:
    """Angle of sensor ``view_s`` during frame ``frame_k`` (both 1-based)."""
    if not 1 <= frame_k <= sys.n_frames_K:
        raise DomainError(f"frame index {frame_k} out of range 1..{sys.n_frames_K}")
    if not 1 <= view_s <= sys.views_per_frame_S:
        raise DomainError(f"view index {view_s} out of range 1..{sys.views_per_frame_S}")
    return 2 * math.pi * (view_s - 1) / sys.views_per_frame_S + (frame_k - 1) * math.radians(
        sys.rotation_dtheta
    )


def sensor_position(sys: ImagingSystem, frame_k: int, view_s: int) -> np.ndarray:
    theta = sensor_angle(sys, frame_k, view_s)
    return sys.aperture_R * np.array([math.cos(theta), math.sin(theta)])


def sensor_positions(sys: ImagingSystem, frame_k: int) -> np.ndarray:
    """All S sensor positions of one frame, shape (S, 2)."""
    return np.stack([sensor_position(sys, frame_k, s) for s in range(1, sys.views_per_frame_S + 1)])


def ring_radii(sys: ImagingSystem) -> np.ndarray:
    # uniform spacing so the outermost arc reaches the far corner of the FOV
    dl = (sys.aperture_R + sys.fov_size_L / math.sqrt(2)) / sys.rings_per_view_I
    return dl * np.arange(1, sys.rings_per_view_I + 1)


def frame_times(sys: ImagingSystem) -> np.ndarray:
    K = sys.n_frames_K
    if K == 1:
        return np.zeros(1)
    return np.arange(K) * (sys.acquisition_T / (K - 1))


def pixel_centers(sys: ImagingSystem, n_side: int | None = None) -> np.ndarray:
    """Pixel centers in row-major order (row index y, column index x), shape (N, 2).

    Row 0 is the top of the image (largest y) so that saved frames display
    with the usual orientation.
    """
    n = sys.pixels_per_side_Ns if n_side is None else n_side
    h = sys.fov_size_L / 2
    pitch = sys.fov_size_L / n
    c = -h + pitch * (np.arange(n) + 0.5)
    xx, yy = np.meshgrid(c, c[::-1])
    return np.column_stack([xx.ravel(), yy.ravel()])


def pixel_index(sys: ImagingSystem, points, n_side: int | None = None):
    """Row-major pixel index of each point and an in-FOV mask."""
    n = sys.pixels_per_side_Ns if n_side is None else n_side
    h = sys.fov_size_L / 2
    pitch = sys.fov_size_L / n
    points = np.asarray(points, dtype=float)
    col = np.floor((points[..., 0] + h) / pitch).astype(np.int64)
    row = np.floor((h - points[..., 1]) / pitch).astype(np.int64)
    inside = (col >= 0) & (col < n) & (row >= 0) & (row < n)
    return row * n + col, inside


PAPER_SYSTEM = ImagingSystem()

# Scaled-down profile: same physical geometry, coarser sampling.
DESK_SYSTEM = ImagingSystem(
    pixels_per_side_Ns=64,
    n_frames_K=32,
    rings_per_view_I=91,
    quadrature_points_Q=256,
    rotation_dtheta=2.0 * 180 / 32,
)
