"""Pixel-grid reconstructions: FISTA with space-time TV or nuclear-norm regularization.

The unknown is F with shape (N, K), one column per frame, N = Ns**2 in
row-major pixel order. The data fidelity is (1/2 sigma^2) ||H(F) - d||^2 with
block-diagonal H.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

from .operators import Sinogram, SparseCrtOperator
from .pounet import ContractError


class SolverError(RuntimeError):
    """Non-finite iterate in an iterative solver."""


# ----------------------------------------------------------------------------
# data term


def _blocks(op):
    return op.blocks if isinstance(op, SparseCrtOperator) else op


def _check_shapes(F, op, D):
    blocks = _blocks(op)
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape != (blocks[0].shape[1], len(blocks)):
        raise ContractError(f"image shape {F.shape} does not match the operator")
    if D.shape != (len(blocks), blocks[0].shape[0]):
        raise ContractError(f"data shape {D.shape} does not match the operator")
    return F


def _data(d):
    return d.frames if isinstance(d, Sinogram) else np.asarray(d, dtype=float)


def apply_blocks(op, F) -> np.ndarray:
    return np.stack([H @ F[:, k] for k, H in enumerate(_blocks(op))])


def adjoint_blocks(op, R) -> np.ndarray:
    return np.stack([H.T @ R[k] for k, H in enumerate(_blocks(op))], axis=1)


def fidelity(F, op, d, sigma: float) -> float:
    D = _data(d)
    F = _check_shapes(F, op, D)
    r = apply_blocks(op, F) - D
    return 0.5 * float(np.sum(r * r)) / sigma**2


def fidelity_grad(F, op, d, sigma: float) -> np.ndarray:
    """Column k equals (1/sigma^2) H_k^T (H_k F_k - d_k)."""
    D = _data(d)
    F = _check_shapes(F, op, D)
    return adjoint_blocks(op, apply_blocks(op, F) - D) / sigma**2


def lipschitz_estimate(op, sigma: float = 1.0, n_iter: int = 50, seed: int = 0, safety: float = 1.05) -> float:
    """Power-iteration estimate of the largest eigenvalue of blockdiag(H_k^T H_k) / sigma^2, times ``safety``."""
    blocks = _blocks(op)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((blocks[0].shape[1], len(blocks)))
    lam = 0.0
    for _ in range(n_iter):
        nrm = np.linalg.norm(X)
        if nrm == 0:
            return 0.0
        X /= nrm
        Y = adjoint_blocks(op, apply_blocks(op, X))
        lam = float(np.sum(X * Y))
        X = Y
    return safety * lam / sigma**2


# ----------------------------------------------------------------------------
# space-time total variation


def _as_volume(F, n_side: int) -> np.ndarray:
    F = np.asarray(F, dtype=float)
    return F.reshape(n_side, n_side, -1)


def _grad(V, tw):
    """Forward differences with zero difference at the last index (Neumann)."""
    gx = np.zeros_like(V)
    gy = np.zeros_like(V)
    gt = np.zeros_like(V)
    gx[:, :-1] = V[:, 1:] - V[:, :-1]  # along columns (x)
    gy[:-1] = V[1:] - V[:-1]  # along rows (y)
    gt[:, :, :-1] = tw * (V[:, :, 1:] - V[:, :, :-1])
    return gx, gy, gt


def _div(gx, gy, gt, tw):
    """Discrete divergence, the negative adjoint of ``_grad``."""
    out = np.zeros_like(gx)
    out[:, :-1] += gx[:, :-1]
    out[:, 1:] -= gx[:, :-1]
    out[:-1] += gy[:-1]
    out[1:] -= gy[:-1]
    out[:, :, :-1] += tw * gt[:, :, :-1]
    out[:, :, 1:] -= tw * gt[:, :, :-1]
    return out


def tv_discrete(F, n_side: int, time_weight: float = 1.0) -> float:
    """Isotropic space-time TV, sum over voxels of sqrt(Dx^2 + Dy^2 + Dt^2), unit index spacing."""
    gx, gy, gt = _grad(_as_volume(F, n_side), time_weight)
    return float(np.sum(np.sqrt(gx * gx + gy * gy + gt * gt)))


def prox_tv(F, weight: float, n_side: int, inner_iter: int = 20, time_weight: float = 1.0) -> np.ndarray:
    """Approximate prox of weight*TV by fast gradient projection on the dual.

    The result never has a larger proximal objective than the input itself.
    """
    if weight < 0:
        raise ValueError("weight must be nonnegative")
    F = np.asarray(F, dtype=float)
    if weight == 0 or inner_iter == 0:
        return F.copy()
    V = _as_volume(F, n_side)
    L = 4.0 * (2 + time_weight**2)
    p = [np.zeros_like(V) for _ in range(3)]
    r = [a.copy() for a in p]
    t = 1.0
    for _ in range(inner_iter):
        G = V + weight * _div(*r, time_weight)  # primal estimate for the current dual point
        g = _grad(G, time_weight)
        q = [ri + ci / (L * weight) for ri, ci in zip(r, g)]
        nrm = np.maximum(1.0, np.sqrt(q[0] ** 2 + q[1] ** 2 + q[2] ** 2))
        q = [qi / nrm for qi in q]
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        r = [qi + ((t - 1) / t_new) * (qi - pi) for qi, pi in zip(q, p)]
        p, t = q, t_new
    G = (V + weight * _div(*p, time_weight)).reshape(F.shape)
    obj_g = 0.5 * float(np.sum((G - F) ** 2)) + weight * tv_discrete(G, n_side, time_weight)
    obj_f = weight * tv_discrete(F, n_side, time_weight)
    return G if obj_g <= obj_f else F.copy()


# ----------------------------------------------------------------------------
# nuclear norm


def svd_via_gram(F):
    """Thin SVD of a tall N x K matrix from the K x K Gram eigendecomposition.

    Returns (U, s, V) with F = U diag(s) V^T, s descending; columns of U for
    zero singular values are zero.
    """
    F = np.asarray(F, dtype=float)
    lam, V = np.linalg.eigh(F.T @ F)
    order = np.argsort(lam)[::-1]
    lam, V = np.clip(lam[order], 0, None), V[:, order]
    s = np.sqrt(lam)
    FV = F @ V
    U = np.zeros_like(FV)
    nz = s > 1e-300
    U[:, nz] = FV[:, nz] / s[nz]
    return U, s, V


def prox_nuclear(F, weight: float) -> tuple[np.ndarray, int]:
    """Singular value soft-thresholding; returns the result and its rank."""
    if weight < 0:
        raise ValueError("weight must be nonnegative")
    F = np.asarray(F, dtype=float)
    if weight == 0:
        return F.copy(), int(np.linalg.matrix_rank(F))
    _, s, V = svd_via_gram(F)
    keep = s > weight
    # F V diag(shrink/s) V^T avoids forming U explicitly
    scale = np.zeros_like(s)
    scale[keep] = (s[keep] - weight) / s[keep]
    W = V[:, keep]
    G = (F @ W) * scale[keep] @ W.T
    return G, int(keep.sum())


def nuclear_norm(F) -> float:
    return float(np.sum(np.linalg.svd(np.asarray(F, dtype=float), compute_uv=False)))


# ----------------------------------------------------------------------------
# FISTA


@dataclasses.dataclass
class ProxProblem:
    operator: object  # SparseCrtOperator or list of (m, N) blocks
    data: Sinogram | np.ndarray
    gamma: float = 0.0
    regularizer: str = "tv"  # "tv", "nuclear" or "none"
    sigma: float | None = None  # defaults to the sinogram's sigma (or 1 when zero)
    step: float | None = None  # defaults to 1 / lipschitz_estimate
    max_iter: int = 200
    tv_inner_iter: int = 20
    time_weight: float = 1.0
    n_side: int | None = None
    tol: float = 0.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.regularizer not in ("tv", "nuclear", "none"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.sigma is None:
            s = self.data.sigma if isinstance(self.data, Sinogram) else 0.0
            self.sigma = s if s > 0 else 1.0
        if self.n_side is None:
            n = _blocks(self.operator)[0].shape[1]
            self.n_side = int(round(math.sqrt(n)))
        if self.step is None:
            self.step = 1.0 / lipschitz_estimate(self.operator, self.sigma)
        if not self.step > 0:
            raise ValueError("step must be positive")

    def regularization(self, F) -> float:
        if self.regularizer == "tv":
            return tv_discrete(F, self.n_side, self.time_weight)
        if self.regularizer == "nuclear":
            return nuclear_norm(F) if self.gamma > 0 else 0.0
        return 0.0

    def objective(self, F) -> float:
        val = fidelity(F, self.operator, self.data, self.sigma)
        if self.gamma > 0:
            val += self.gamma * self.regularization(F)
        return val

    def prox(self, F, t):
        """Prox of t*gamma*R; returns (G, rank or None)."""
        if self.gamma == 0 or self.regularizer == "none":
            return F, None
        if self.regularizer == "tv":
            return prox_tv(F, t * self.gamma, self.n_side, self.tv_inner_iter, self.time_weight), None
        return prox_nuclear(F, t * self.gamma)


@dataclasses.dataclass
class FistaReport:
    objective: list  # objective of each accepted iterate (entry 0 is F0)
    restarts: list  # iterations at which the momentum was reset
    best_iter: int
    best_objective: float
    rank: int | None = None


def fista(problem: ProxProblem, F0=None) -> tuple[np.ndarray, FistaReport]:
    """FISTA with function-value restart; returns the best-objective iterate."""
    blocks = _blocks(problem.operator)
    shape = (blocks[0].shape[1], len(blocks))
    x = np.zeros(shape) if F0 is None else np.array(F0, dtype=float)
    D = _data(problem.data)
    _check_shapes(x, problem.operator, D)
    s = problem.step
    f_x = problem.objective(x)
    hist, restarts = [f_x], []
    best, best_f, best_it, best_rank = x.copy(), f_x, 0, None
    y, t = x.copy(), 1.0
    for it in range(1, problem.max_iter + 1):
        g = fidelity_grad(y, problem.operator, D, problem.sigma)
        x_new, rank = problem.prox(y - s * g, s)
        f_new = problem.objective(x_new)
        if not np.isfinite(f_new) or f_new > f_x:
            # restart: drop the momentum and take a plain proximal step from x
            restarts.append(it)
            g = fidelity_grad(x, problem.operator, D, problem.sigma)
            x_new, rank = problem.prox(x - s * g, s)
            f_new = problem.objective(x_new)
            t = 1.0
            if not np.all(np.isfinite(x_new)):
                raise SolverError(f"non-finite iterate at iteration {it}")
            t_new = 1.0
            y = x_new.copy()
        else:
            t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
            y = x_new + ((t - 1) / t_new) * (x_new - x)
        if not np.isfinite(f_new):
            raise SolverError(f"non-finite objective at iteration {it}")
        rel = abs(f_x - f_new) / max(abs(f_x), 1e-300)
        x, f_x, t = x_new, f_new, t_new
        hist.append(f_x)
        if f_x < best_f:
            best, best_f, best_it, best_rank = x.copy(), f_x, it, rank
        if problem.tol > 0 and rel < problem.tol:
            break
    if best_rank is None and problem.regularizer == "nuclear":
        best_rank = int(np.linalg.matrix_rank(best))
    return best, FistaReport(hist, restarts, best_it, best_f, best_rank)


# ----------------------------------------------------------------------------
# regularization parameter choice


def geometric_grid(center: float, n: int = 10, ratio: float = 2.0) -> list[float]:
    """Descending geometric grid of ``n`` points around ``center``."""
    if n < 1:
        raise ContractError("empty grid")
    top = center * ratio ** ((n - 1) / 2)
    return [top / ratio**i for i in range(n)]


@dataclasses.dataclass
class MorozovReport:
    gamma: float
    threshold: float
    flagged: bool  # True when no grid value satisfied the inequality
    tried: list  # (gamma, squared residual) in evaluation order


def morozov_search(solve: Callable, sigma: float, n_measurements: int, gamma_grid: Sequence[float]):
    """Largest grid gamma whose reconstruction satisfies ||H f - d||^2 <= sigma^2 N_m.

    ``solve(gamma)`` returns ``(reconstruction, squared residual)``. The grid
    is scanned from the largest value down; the first value satisfying the
    inequality is returned. If none does, the smallest value is returned
    and the report is flagged.
    """
    grid = sorted((float(g) for g in gamma_grid), reverse=True)
    if not grid:
        raise ContractError("empty gamma grid")
    thr = sigma**2 * n_measurements
    tried = []
    rec = None
    for g in grid:
        rec, res2 = solve(g)
        tried.append((g, float(res2)))
        if res2 <= thr:
            return g, rec, MorozovReport(g, thr, False, tried)
    return grid[-1], rec, MorozovReport(grid[-1], thr, True, tried)
