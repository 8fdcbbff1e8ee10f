"""Procedural dynamic torso phantom built from moving ellipses.

Each component is a sharp-edged ellipse whose center and semi-axes oscillate
sinusoidally in time. The object is the sum of the component indicators
weighted by their intensities, so it is nonnegative and piecewise constant
in space at every instant.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .geometry import DomainBox, DomainError, ImagingSystem, frame_times, pixel_centers


@dataclasses.dataclass(frozen=True)
class Motion:
    center_amplitude: tuple[float, float] = (0.0, 0.0)
    axes_amplitude: tuple[float, float] = (0.0, 0.0)
    frequency: float = 0.0
    phase: float = 0.0


@dataclasses.dataclass(frozen=True)
class EllipseComponent:
    center0: tuple[float, float]
    axes0: tuple[float, float]
    angle0: float
    value: float
    motion: Motion = Motion()

    def __post_init__(self):
        a, b = self.axes0
        da, db = self.motion.axes_amplitude
        if a <= 0 or b <= 0:
            raise ValueError("ellipse axes must be positive")
        if a - abs(da) <= 0 or b - abs(db) <= 0:
            raise ValueError("axis oscillation would collapse the ellipse")

    def state(self, t):
        """Center (cx, cy) and axes (a, b) at time(s) ``t``."""
        m = self.motion
        s = np.sin(2 * math.pi * m.frequency * np.asarray(t, dtype=float) + m.phase)
        cx = self.center0[0] + m.center_amplitude[0] * s
        cy = self.center0[1] + m.center_amplitude[1] * s
        a = self.axes0[0] + m.axes_amplitude[0] * s
        b = self.axes0[1] + m.axes_amplitude[1] * s
        return cx, cy, a, b

    def inside(self, x, y, t) -> np.ndarray:
        cx, cy, a, b = self.state(t)
        c, s = math.cos(self.angle0), math.sin(self.angle0)
        dx, dy = x - cx, y - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0

    def max_extent(self) -> float:
        """Upper bound on the distance from the origin reached by the support."""
        m = self.motion
        reach = math.hypot(abs(self.center0[0]) + abs(m.center_amplitude[0]),
                           abs(self.center0[1]) + abs(m.center_amplitude[1]))
        return reach + max(self.axes0[0] + abs(m.axes_amplitude[0]),
                           self.axes0[1] + abs(m.axes_amplitude[1]))


@dataclasses.dataclass(frozen=True)
class DynamicPhantom:
    components: tuple[EllipseComponent, ...]
    domain: DomainBox
    seed: int = 0

    def __call__(self, points, t):
        """Vectorized evaluation used by the operators: ``points`` (n, 2), ``t`` scalar or (n,)."""
        points = np.asarray(points, dtype=float)
        return _evaluate(self, points[..., 0], points[..., 1], t)

    @property
    def max_value(self) -> float:
        return float(sum(c.value for c in self.components))


def _evaluate(ph: DynamicPhantom, x, y, t):
    out = np.zeros(np.broadcast(x, y, t).shape)
    for comp in ph.components:
        out += comp.value * comp.inside(x, y, t)
    return out


def evaluate(ph: DynamicPhantom, r, t):
    """Intensity f(r, t) for points ``r`` (..., 2) and times ``t``; DomainError outside Omega_T."""
    r = np.asarray(r, dtype=float)
    t = np.broadcast_to(np.asarray(t, dtype=float), r.shape[:-1])
    ph.domain.check(np.concatenate([r, t[..., None]], axis=-1))
    return _evaluate(ph, r[..., 0], r[..., 1], t)


def phantom_default(seed: int = 0, fov_size_L: float = 2.9, acquisition_T: float = 5.0) -> DynamicPhantom:
    """Torso-like slice: body, two lungs, liver, spine, a beating heart and a vessel.

    The heart pulses at 0.8 Hz (4 cycles over 5 s); the liver and lungs follow
    a slow breathing motion of 0.16 Hz (0.8 cycle). ``seed`` adds small
    deterministic perturbations to the organ placement so that distinct seeds
    give distinct but structurally identical objects.
    """
    rng = np.random.default_rng(seed)
    jitter = (lambda: tuple(rng.uniform(-0.02, 0.02, size=2))) if seed else (lambda: (0.0, 0.0))
    s = fov_size_L / 2.9
    T = acquisition_T
    breath = 0.8 / T  # cycles per second
    heart = 4.0 / T

    def P(x, y):
        j = jitter()
        return (s * (x + j[0]), s * (y + j[1]))

    comps = [
        # body outline, stationary
        EllipseComponent(P(0.0, 0.0), (1.25 * s, 0.95 * s), 0.0, 0.2),
        # lungs: dilate with breathing
        EllipseComponent(P(-0.52, 0.18), (0.30 * s, 0.42 * s), 0.15, 0.15,
                         Motion((0.0, 0.0), (0.05 * s, 0.08 * s), breath, 0.0)),
        EllipseComponent(P(0.52, 0.18), (0.30 * s, 0.42 * s), -0.15, 0.15,
                         Motion((0.0, 0.0), (0.05 * s, 0.08 * s), breath, 0.0)),
        # liver: translates with the diaphragm
        EllipseComponent(P(-0.42, -0.52), (0.42 * s, 0.24 * s), 0.3, 0.5,
                         Motion((0.0, 0.12 * s), (0.0, 0.0), breath, 0.0)),
        # heart: fast pulsation
        EllipseComponent(P(0.16, 0.10), (0.26 * s, 0.22 * s), 0.5, 0.6,
                         Motion((0.03 * s, 0.0), (0.08 * s, 0.07 * s), heart, 0.0)),
        # spine, stationary
        EllipseComponent(P(0.0, -0.72), (0.12 * s, 0.10 * s), 0.0, 0.3),
        # vessel near the heart, pulsing out of phase
        EllipseComponent(P(0.45, -0.30), (0.10 * s, 0.10 * s), 0.0, 0.3,
                         Motion((0.0, 0.0), (0.04 * s, 0.04 * s), heart, math.pi)),
    ]
    box = DomainBox(fov_size_L / 2, acquisition_T)
    ph = DynamicPhantom(tuple(comps), box, seed)
    for c in comps:
        if c.max_extent() > box.half_width:
            raise AssertionError("phantom component leaves the field of view")
    return ph


def constant_phantom(value: float, box: DomainBox) -> DynamicPhantom:
    """A single component covering the whole FOV (used for checks)."""
    big = 4 * box.half_width
    return DynamicPhantom((EllipseComponent((0.0, 0.0), (big, big), 0.0, value),), box, 0)


@dataclasses.dataclass
class GridImage:
    """Pixel-basis dynamic image: ``values`` has shape (N, K), N = Ns**2 row-major."""

    values: np.ndarray
    pixel_pitch: float
    frame_times: np.ndarray

    @property
    def n_side(self) -> int:
        return int(round(math.sqrt(self.values.shape[0])))

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def frame(self, k: int) -> np.ndarray:
        """Frame ``k`` (0-based) as an (Ns, Ns) array."""
        return self.values[:, k].reshape(self.n_side, self.n_side)

    def volume(self) -> np.ndarray:
        """Array of shape (Ns, Ns, K)."""
        return self.values.reshape(self.n_side, self.n_side, self.n_frames)


def render(ph, sys: ImagingSystem, supersample: int = 1, n_side: int | None = None) -> GridImage:
    """Average of the object over ``supersample**2`` sub-points per pixel at each frame time.

    ``ph`` is any callable ``f(points (n, 2), t) -> (n,)``.
    """
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    n = sys.pixels_per_side_Ns if n_side is None else n_side
    pitch = sys.fov_size_L / n
    centers = pixel_centers(sys, n)
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    ox, oy = np.meshgrid(offs * pitch, offs * pitch)
    sub = np.column_stack([ox.ravel(), oy.ravel()])
    times = frame_times(sys)
    values = np.zeros((n * n, len(times)))
    for k, t in enumerate(times):
        acc = np.zeros(n * n)
        for d in sub:
            acc += ph(centers + d, t)
        values[:, k] = acc / len(sub)
    return GridImage(values, pitch, times)
