"""Block coordinate descent training of the neural field from sinogram data.

Each outer iteration runs one Adam solve over the coefficients C with the
partition frozen, then one over the partition parameters eta with C frozen.
The data fidelity is estimated on fixed, cyclically visited frame batches.
While eta is frozen the field is linear in C, so the arc integrals of every
(partition, monomial) pair are tabulated once per C solve and reused.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from . import pounet as pn
from .geometry import ImagingSystem
from .operators import ArcQuadrature, Sinogram, arc_quadrature

# stream identifiers for the counter-based generators
_TV_STREAM, _Q_STREAM, _BATCH_STREAM, _PROBE_STREAM = 11, 12, 13, 14


class TrainingError(RuntimeError):
    """Non-finite objective, gradient or parameter during training."""


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    outer_max_iter: int = 10
    inner_epochs: int = 20
    inner_epochs_eta: int | None = None  # defaults to inner_epochs
    batch_frames: int = 10
    lr_C0: float = 1e-2
    lr_eta0: float = 1e-4
    lr_total_decay: float = 1e-3
    rho0: float | None = None  # None -> 1e-4 / sigma^2
    tau0: float = 1.0
    aux_decay_epochs: int = 10
    aux_decay_factor: float = 1e-3
    q: float = 0.5
    eps_q: float = 1e-2
    tv_weight_gamma: float = 0.0
    tv_samples: int = 2048
    tv_include_time: bool = True
    tv_delta: float = 1e-8
    qnorm_samples: int = 2048
    static_init: bool = True
    static_outer_iter: int = 3
    width: int = 140
    depth: int = 4
    n_partitions: int = 40
    omega0: float = 30.0
    space_degree: int = 3
    time_degree: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.eps_q <= 0:
            raise ValueError("eps_q must be positive")
        if self.lr_C0 <= 0 or self.lr_eta0 <= 0 or self.lr_total_decay <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_frames < 1 or self.outer_max_iter < 1 or self.inner_epochs < 0:
            raise ValueError("batch_frames and outer_max_iter must be >= 1")
        if self.tv_weight_gamma < 0 or self.tau0 < 0 or (self.rho0 is not None and self.rho0 < 0):
            raise ValueError("penalty weights must be nonnegative")

    @property
    def epochs_eta(self) -> int:
        return self.inner_epochs if self.inner_epochs_eta is None else self.inner_epochs_eta

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def resolved_rho0(self, sigma: float) -> float:
        return 1e-4 / sigma**2 if self.rho0 is None else self.rho0


# ----------------------------------------------------------------------------
# schedules and Adam


def aux_weight(w0: float, epoch: int, decay_epochs: int, factor: float = 1e-3) -> float:
    """Geometric decay from w0 to factor*w0 over the first epochs, zero afterwards."""
    if epoch >= decay_epochs:
        return 0.0
    if decay_epochs == 1:
        return w0
    return w0 * factor ** (epoch / (decay_epochs - 1))


def lr_at(lr0: float, epoch: int, total_epochs: int, total_decay: float) -> float:
    """Per-epoch geometric decay reaching ``total_decay`` at the last planned epoch."""
    if total_epochs <= 1:
        return lr0
    return lr0 * total_decay ** (min(epoch, total_epochs - 1) / (total_epochs - 1))


@dataclasses.dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr)


def adam_step(state: AdamState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient/state lists differ in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient at Adam step {state.step + 1} ({bad} entries)")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError("shape mismatch in adam_step")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def frame_batches(n_frames: int, batch_frames: int, seed: int) -> list[np.ndarray]:
    """Fixed partition of the 0-based frame indices into near-equal batches of at most batch_frames."""
    n_batches = math.ceil(n_frames / min(batch_frames, n_frames))
    perm = np.random.default_rng([seed, _BATCH_STREAM]).permutation(n_frames)
    return [np.sort(b) for b in np.array_split(perm, n_batches)]


# ----------------------------------------------------------------------------
# data fidelity


class FidelityProblem:
    """Quadrature nodes of every frame together with the measured data.

    ``time`` replaces every frame time by a single instant (static problem).
    """

    def __init__(self, d: Sinogram, n_quad: int | None = None, time: float | None = None):
        if d.sigma <= 0:
            raise pn.ContractError("data fidelity needs sigma > 0; use sigma = 1 for noiseless data")
        self.data = d
        self.sys: ImagingSystem = d.system
        self.sigma = d.sigma
        self.quads: list[ArcQuadrature] = [arc_quadrature(self.sys, k, n_quad) for k in range(1, self.sys.n_frames_K + 1)]
        box = self.sys.box
        self.nodes = []
        for q in self.quads:
            t = q.time if time is None else time
            x = np.column_stack([q.points, np.full(len(q.points), t)])
            self.nodes.append(box.normalize(x))

    @property
    def n_frames(self) -> int:
        return len(self.quads)

    def weight(self, batch) -> float:
        return (self.n_frames / len(batch)) / (2 * self.sigma**2)

    def predict(self, xi: pn.PouNet, k: int) -> np.ndarray:
        """Arc integrals of the field for 0-based frame k."""
        return self.quads[k].apply(pn.forward(xi, self.nodes[k], keep=False).phi)

    def fidelity(self, xi: pn.PouNet, batch=None) -> float:
        batch = range(self.n_frames) if batch is None else batch
        r2 = sum(float(np.sum((self.predict(xi, k) - self.data.frames[k]) ** 2)) for k in batch)
        return self.weight(batch) * r2

    def features(self, xi: pn.PouNet) -> list[np.ndarray]:
        """Per frame, the (S*I, P*M) matrix A_k with arc integrals A_k vec(C) (row-major C)."""
        P, M = xi.coeffs.shape
        out = []
        for q, u in zip(self.quads, self.nodes):
            agg = q.aggregate
            fw = pn.forward(xi, u, keep=False)
            A = np.empty((q.n_rows, P * M))
            for p in range(P):
                A[:, p * M:(p + 1) * M] = agg @ (fw.psi[:, p, None] * fw.B)
            out.append(A)
        return out

    def fidelity_from_features(self, A, C, batch=None) -> float:
        batch = range(self.n_frames) if batch is None else batch
        c = C.ravel()
        r2 = sum(float(np.sum((A[k] @ c - self.data.frames[k]) ** 2)) for k in batch)
        return self.weight(batch) * r2

    def grad_C_from_features(self, A, C, batch) -> tuple[float, np.ndarray]:
        c = C.ravel()
        w = self.weight(batch)
        val, g = 0.0, np.zeros_like(c)
        for k in batch:
            r = A[k] @ c - self.data.frames[k]
            val += float(r @ r)
            g += A[k].T @ r
        return w * val, (2 * w * g).reshape(C.shape)

    def grad_batch(self, xi: pn.PouNet, batch, need_eta: bool = True) -> tuple[float, pn.Grads]:
        """Batch fidelity and its gradient through the network, one frame at a time."""
        w = self.weight(batch)
        total = 0.0
        grads = pn.Grads.zeros(xi)
        for k in batch:
            q = self.quads[k]
            fw = pn.forward(xi, self.nodes[k], keep=need_eta)
            r = q.apply(fw.phi) - self.data.frames[k]
            total += w * float(r @ r)
            grads += pn.backward(xi, fw, gphi=2 * w * q.adjoint(r), need_eta=need_eta)
        return total, grads


def data_fidelity_batch(xi: pn.PouNet, d: Sinogram, batch, n_quad: int | None = None) -> float:
    """(1/2 sigma^2) (K/|K_b|) sum over the batch (0-based frames) of squared residuals."""
    batch = list(batch)
    if not batch:
        raise pn.ContractError("empty batch")
    return FidelityProblem(d, n_quad).fidelity(xi, batch)


# ----------------------------------------------------------------------------
# Monte Carlo penalties


def _sample(xi: pn.PouNet, n: int, seed) -> np.ndarray:
    return xi.domain.sample(n, np.random.default_rng(seed))


def tv_term(xi, n_samples, seed, include_time=True, weight=1.0, delta=1e-8, time=None) -> pn.FieldGradients:
    x = _sample(xi, n_samples, seed)
    if time is not None:
        x[:, 2] = time
    return pn.FieldGradients(x, pn.smoothed_gradient_norm(weight, delta, include_time))


def stochastic_tv(xi: pn.PouNet, n_samples: int, seed, include_time: bool = True, delta: float = 1e-8) -> float:
    """Mean of sqrt(|grad Phi|^2 + delta^2) over uniform samples of the space-time box."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    g = pn.eval_field_grad_x(xi, _sample(xi, n_samples, seed), check=False)
    if not include_time:
        g[:, 2] = 0
    return float(np.mean(np.sqrt(np.sum(g * g, axis=1) + delta**2)))


def qnorm_term(xi, n_samples, q, eps_q, seed, weight=1.0, time=None) -> pn.PartitionValues:
    x = _sample(xi, n_samples, seed)
    if time is not None:
        x[:, 2] = time
    return pn.PartitionValues(x, pn.smoothed_qnorm(weight, q, eps_q, xi.domain.volume))


def qnorm_penalty(xi: pn.PouNet, n_samples: int, q: float, eps_q: float, seed) -> float:
    """|Omega_T| times the sample mean of sum_p (Psi_p + eps)^q."""
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    psi = pn.eval_pou(xi.partition, xi.domain.normalize(_sample(xi, n_samples, seed)))
    return xi.domain.volume * float(np.mean(np.sum((psi + eps_q) ** q, axis=1)))


# ----------------------------------------------------------------------------
# inner solves


@dataclasses.dataclass
class SolveContext:
    """What an inner solve needs besides the parameters."""

    problem: FidelityProblem
    cfg: TrainConfig
    rho0: float
    outer: int  # 0-based outer iteration, used for schedules and sampling keys
    n_outer: int
    batches: list
    time: float | None = None  # static problem: fixed evaluation time
    stream: int = 0  # keeps static and dynamic sample streams apart

    def key(self, kind, epoch, b, block):
        return [self.cfg.seed, self.stream, kind, self.outer, block, epoch, b]


def _check_finite(value, what):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what}")


def update_C(xi: pn.PouNet, ctx: SolveContext, A=None, state: AdamState | None = None):
    """Adam on C with eta frozen: batch fidelity + gamma*TV + (rho/2)||C||^2.

    Returns ``(xi, state, epoch_log)``; ``A`` are the tabulated features of the
    current partition (computed when not given).
    """
    cfg = ctx.cfg
    A = ctx.problem.features(xi) if A is None else A
    xi = xi.copy()
    E = cfg.inner_epochs
    state = state or AdamState.for_params([xi.coeffs], cfg.lr_C0)
    log = []
    for epoch in range(E):
        state.lr = lr_at(cfg.lr_C0, ctx.outer * E + epoch, ctx.n_outer * E, cfg.lr_total_decay)
        rho = aux_weight(ctx.rho0, epoch, cfg.aux_decay_epochs, cfg.aux_decay_factor)
        ep_val = 0.0
        for b, batch in enumerate(ctx.batches):
            val, g = ctx.problem.grad_C_from_features(A, xi.coeffs, batch)
            extra = []
            if cfg.tv_weight_gamma > 0:
                extra.append(tv_term(xi, cfg.tv_samples, ctx.key(_TV_STREAM, epoch, b, 0), cfg.tv_include_time,
                                     cfg.tv_weight_gamma, cfg.tv_delta, ctx.time))
            if rho > 0:
                extra.append(pn.CoefficientPenalty(pn.frobenius(rho)))
            if extra:
                v2, g2 = pn.grad_params(xi, extra, need_eta=False)
                val += v2
                g = g + g2.C
            _check_finite(val, "objective in the C update")
            adam_step(state, [xi.coeffs], [g])
            ep_val += val
        if not np.all(np.isfinite(xi.coeffs)):
            raise TrainingError("non-finite coefficients")
        log.append({"epoch": epoch, "objective": ep_val / max(len(ctx.batches), 1), "rho": rho, "lr": state.lr})
    return xi, state, log


def update_eta(xi: pn.PouNet, ctx: SolveContext, state: AdamState | None = None):
    """Adam on eta with C frozen: batch fidelity + gamma*TV + tau*||Psi||_{q,eps}^q."""
    cfg = ctx.cfg
    xi = xi.copy()
    params = xi.partition.arrays()
    E = cfg.epochs_eta
    state = state or AdamState.for_params(params, cfg.lr_eta0)
    log = []
    for epoch in range(E):
        state.lr = lr_at(cfg.lr_eta0, ctx.outer * E + epoch, ctx.n_outer * E, cfg.lr_total_decay)
        tau = aux_weight(cfg.tau0, epoch, cfg.aux_decay_epochs, cfg.aux_decay_factor)
        ep_val = 0.0
        for b, batch in enumerate(ctx.batches):
            val, g = ctx.problem.grad_batch(xi, batch)
            extra = []
            if cfg.tv_weight_gamma > 0:
                extra.append(tv_term(xi, cfg.tv_samples, ctx.key(_TV_STREAM, epoch, b, 1), cfg.tv_include_time,
                                     cfg.tv_weight_gamma, cfg.tv_delta, ctx.time))
            if tau > 0:
                extra.append(qnorm_term(xi, cfg.qnorm_samples, cfg.q, cfg.eps_q, ctx.key(_Q_STREAM, epoch, b, 1),
                                        tau, ctx.time))
            if extra:
                v2, g2 = pn.grad_params(xi, extra)
                val += v2
                g += g2
            _check_finite(val, "objective in the eta update")
            adam_step(state, params, g.eta)
            ep_val += val
        log.append({"epoch": epoch, "objective": ep_val / max(len(ctx.batches), 1), "tau": tau, "lr": state.lr})
    return xi, state, log


# ----------------------------------------------------------------------------
# outer loop


@dataclasses.dataclass
class TrainingReport:
    rows: list  # one dict per outer iteration (row 0 is the starting point)
    stop_reason: str
    best_iter: int
    static_rows: list = dataclasses.field(default_factory=list)
    c_logs: list = dataclasses.field(default_factory=list)
    eta_logs: list = dataclasses.field(default_factory=list)

    COLUMNS = ("iter", "J", "fidelity", "tv", "rho_term", "tau_term", "lr_C", "lr_eta")

    def to_csv(self, rows=None) -> str:
        rows = self.rows if rows is None else rows
        lines = [",".join(self.COLUMNS)]
        for r in rows:
            lines.append(",".join(_fmt(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    @property
    def final(self) -> dict:
        return self.rows[self.best_iter]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def build_template(sys: ImagingSystem, cfg: TrainConfig) -> pn.PouNet:
    basis = pn.PolyBasis.tensor(cfg.space_degree, cfg.time_degree)
    return pn.PouNet.create(sys.box, cfg.width, cfg.depth, cfg.n_partitions, cfg.omega0, cfg.seed, basis)


def _objective(problem, xi, A, cfg, tv_x, time=None):
    fid = problem.fidelity_from_features(A, xi.coeffs)
    tv = 0.0
    if cfg.tv_weight_gamma > 0:
        g = pn.eval_field_grad_x(xi, tv_x, check=False)
        if not cfg.tv_include_time:
            g[:, 2] = 0
        tv = float(np.mean(np.sqrt(np.sum(g * g, axis=1) + cfg.tv_delta**2)))
    return fid, tv


def _penalties(xi, rho, tau, cfg, probe_x):
    rho_term = 0.5 * rho * float(np.sum(xi.coeffs**2))
    tau_term = 0.0
    if tau > 0:
        psi = pn.eval_pou(xi.partition, xi.domain.normalize(probe_x))
        tau_term = tau * xi.domain.volume * float(np.mean(np.sum((psi + cfg.eps_q) ** cfg.q, axis=1)))
    return rho_term, tau_term


def run_bcd(xi: pn.PouNet, problem: FidelityProblem, cfg: TrainConfig, n_outer: int,
            time: float | None = None, stream: int = 0, checkpoint=None):
    """Alternate update_C / update_eta until J stops decreasing; returns the best iterate.

    ``checkpoint(iteration, xi)`` is called after every outer iteration.
    """
    rho0 = cfg.resolved_rho0(problem.sigma)
    batches = frame_batches(problem.n_frames, cfg.batch_frames, cfg.seed)
    frozen_tv = _sample(xi, cfg.tv_samples, [cfg.seed, stream, _TV_STREAM, 999_999])
    probe = _sample(xi, cfg.qnorm_samples, [cfg.seed, stream, _PROBE_STREAM])
    if time is not None:
        frozen_tv[:, 2] = time
        probe[:, 2] = time
    A = problem.features(xi)
    fid, tv = _objective(problem, xi, A, cfg, frozen_tv)
    J = fid + cfg.tv_weight_gamma * tv
    _check_finite(J, "objective")
    rows = [dict(iter=0, J=J, fidelity=fid, tv=tv, rho_term=0.0, tau_term=0.0, lr_C=cfg.lr_C0, lr_eta=cfg.lr_eta0)]
    best_J, best_xi, best_iter = J, xi, 0
    c_logs, eta_logs = [], []
    reason = "max_iter"
    for it in range(n_outer):
        ctx = SolveContext(problem, cfg, rho0, it, n_outer, batches, time, stream)
        xi, stC, logC = update_C(xi, ctx, A)
        rho_end = aux_weight(rho0, cfg.inner_epochs - 1, cfg.aux_decay_epochs, cfg.aux_decay_factor) if cfg.inner_epochs else 0.0
        if cfg.epochs_eta > 0:
            xi, stE, logE = update_eta(xi, ctx)
            lr_eta = stE.lr
        else:
            logE, lr_eta = [], cfg.lr_eta0
        tau_end = aux_weight(cfg.tau0, cfg.epochs_eta - 1, cfg.aux_decay_epochs, cfg.aux_decay_factor) if cfg.epochs_eta else 0.0
        c_logs.append(logC)
        eta_logs.append(logE)
        A = problem.features(xi)
        fid, tv = _objective(problem, xi, A, cfg, frozen_tv)
        J_new = fid + cfg.tv_weight_gamma * tv
        _check_finite(J_new, "objective")
        rt, tt = _penalties(xi, rho_end, tau_end, cfg, probe)
        rows.append(dict(iter=it + 1, J=J_new, fidelity=fid, tv=tv, rho_term=rt, tau_term=tt,
                         lr_C=stC.lr if cfg.inner_epochs else cfg.lr_C0, lr_eta=lr_eta))
        if checkpoint is not None:
            checkpoint(it + 1, xi)
        if J_new < best_J:
            best_J, best_xi, best_iter = J_new, xi, it + 1
        if J_new >= J:
            reason = "no_decrease"
            break
        J = J_new
    return best_xi, TrainingReport(rows, reason, best_iter, c_logs=c_logs, eta_logs=eta_logs)


def init_static(d: Sinogram, sys: ImagingSystem, xi_template: pn.PouNet, cfg: TrainConfig,
                n_quad: int | None = None) -> tuple[pn.PouNet, TrainingReport]:
    """Fit a time-independent field to all frames at once, evaluating it at t = T/2.

    The returned field is made exactly time independent by zeroing the
    first-layer weights acting on time (the optimized partition only ever
    saw t = T/2) and the coefficients of time-dependent monomials.
    """
    tmid = sys.acquisition_T / 2
    problem = FidelityProblem(d, n_quad, time=tmid)
    xi, rep = run_bcd(xi_template, problem, cfg.replace(tv_weight_gamma=0.0), cfg.static_outer_iter,
                      time=tmid, stream=1)
    xi = xi.copy()
    xi.partition.weights[0][:, 2] = 0.0
    timed = np.array([e[2] > 0 for e in xi.basis.exponents])
    xi.coeffs[:, timed] = 0.0
    return xi, rep


def noiseless_sigma(d: Sinogram) -> Sinogram:
    """Substitute sigma = 1 for noiseless data so the fidelity weight is defined."""
    return d if d.sigma > 0 else Sinogram(d.frames, 1.0, d.system)


def reconstruct_nf(d: Sinogram, sys: ImagingSystem, cfg: TrainConfig, n_quad: int | None = None,
                   init: pn.PouNet | None = None, checkpoint=None) -> tuple[pn.PouNet, TrainingReport]:
    """Full pipeline: initialization, static warm start, block coordinate descent.

    ``init`` skips the initializer and static warm start (used to share one
    warm start across a regularization sweep).
    """
    d = noiseless_sigma(d)
    static_rows = []
    if init is None:
        xi = build_template(sys, cfg)
        if cfg.static_init:
            xi, srep = init_static(d, sys, xi, cfg, n_quad)
            static_rows = srep.rows
    else:
        xi = init
    problem = FidelityProblem(d, n_quad)
    xi, rep = run_bcd(xi, problem, cfg, cfg.outer_max_iter, checkpoint=checkpoint)
    rep.static_rows = static_rows
    return xi, rep


# ----------------------------------------------------------------------------
# embedding: fitting pointwise samples of a known field

_EMBED_STREAM = 15


@dataclasses.dataclass
class EmbedReport:
    rows: list  # per epoch: epoch, loss (after the C solve), lr_eta

    def to_csv(self) -> str:
        lines = ["epoch,loss,lr_eta"]
        for r in self.rows:
            lines.append(f"{r['epoch']},{_fmt(r['loss'])},{_fmt(r['lr_eta'])}")
        return "\n".join(lines) + "\n"


def _solve_C(xi: pn.PouNet, x, f, ridge: float):
    """Least squares for C at frozen eta on the samples ``x`` with targets ``f``."""
    fw = pn.forward(xi, xi.domain.normalize(x), keep=False)
    n, P = fw.psi.shape
    A = (fw.psi[:, :, None] * fw.B[:, None, :]).reshape(n, -1)
    G = A.T @ A
    G[np.diag_indices_from(G)] += ridge * np.trace(G) / G.shape[0]
    c = np.linalg.solve(G, A.T @ f)
    r = A @ c - f
    return c.reshape(P, -1), float(r @ r) / n


def embed_field(f, xi: pn.PouNet, epochs: int = 100, steps_per_epoch: int = 10, samples: int = 4096,
                lr_eta0: float = 1e-3, lr_total_decay: float = 1e-2, c_samples: int | None = None,
                ridge: float = 1e-10, seed: int = 0) -> tuple[pn.PouNet, EmbedReport]:
    """Fit ``xi`` to pointwise values of ``f(points, t)`` by minimizing the mean squared error.

    Every epoch draws fresh uniform space-time samples, solves for C exactly
    (the loss is quadratic in C at frozen eta) and then takes Adam steps on
    eta with C frozen, one fresh sample batch per step.
    """
    xi = xi.copy()
    c_samples = c_samples or 4 * xi.coeffs.size
    params = xi.partition.arrays()
    state = AdamState.for_params(params, lr_eta0)
    rows = []

    def target(x):
        return np.asarray(f(x[:, :2], x[:, 2]), dtype=float)

    for epoch in range(epochs):
        x = _sample(xi, c_samples, [seed, _EMBED_STREAM, epoch, 0])
        xi.coeffs[...], loss = _solve_C(xi, x, target(x), ridge)
        _check_finite(loss, "embedding loss")
        state.lr = lr_at(lr_eta0, epoch, epochs, lr_total_decay)
        for s in range(steps_per_epoch):
            xs = _sample(xi, samples, [seed, _EMBED_STREAM, epoch, s + 1])
            term = pn.FieldValues(xs, pn.squared_residual(target(xs), 1.0 / samples))
            val, g = pn.grad_params(xi, [term])
            _check_finite(val, "embedding loss")
            adam_step(state, params, g.eta)
        rows.append({"epoch": epoch, "loss": loss, "lr_eta": state.lr})
    x = _sample(xi, c_samples, [seed, _EMBED_STREAM, epochs, 0])
    xi.coeffs[...], loss = _solve_C(xi, x, target(x), ridge)
    rows.append({"epoch": epochs, "loss": loss, "lr_eta": state.lr})
    return xi, EmbedReport(rows)
