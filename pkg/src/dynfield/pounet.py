"""Partition-of-unity network field with a hand-written differentiation engine.

The field is ``Phi(x) = Psi(x)^T C B(x)`` where ``Psi`` is the softmax output of
a sine-activated MLP, ``B`` is a fixed polynomial basis and ``C`` is a P x M
coefficient matrix. All network inputs are normalized coordinates in
[-1, 1]^3.

Gradients with respect to the parameters are obtained by an explicit reverse
pass. Input gradients are propagated forward as three tangents, and terms of
the loss that depend on those tangents are differentiated by reversing the
tangent recursion as well, which supplies the mixed second derivatives the
total-variation penalty needs.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

from .geometry import DomainBox

try:  # torch's vectorized float64 sin/cos are several times faster than numpy's
    import torch as _torch

    def _sin(z):
        return _torch.sin(_torch.from_numpy(z)).numpy()

    def _cos(z):
        return _torch.cos(_torch.from_numpy(z)).numpy()

except ImportError:  # pragma: no cover
    _sin, _cos = np.sin, np.cos


class ContractError(TypeError):
    """Raised when a loss term is not built from the supported primitives."""


# ----------------------------------------------------------------------------
# polynomial basis


@dataclasses.dataclass(frozen=True)
class PolyBasis:
    """Monomials ``x^p y^q t^s`` listed by their exponent triples."""

    exponents: tuple[tuple[int, int, int], ...]

    @classmethod
    def tensor(cls, space_degree: int = 3, time_degree: int = 3) -> PolyBasis:
        space = [(p, q) for p in range(space_degree + 1) for q in range(space_degree + 1 - p)]
        space.sort(key=lambda e: (e[0] + e[1], -e[0]))
        exps = tuple((p, q, s) for s in range(time_degree + 1) for (p, q) in space)
        return cls(exps)

    @property
    def M(self) -> int:
        return len(self.exponents)

    @property
    def _exp(self) -> np.ndarray:
        return np.asarray(self.exponents, dtype=np.int64).reshape(-1, 3)

    def _powers(self, u):
        deg = int(self._exp.max(initial=0))
        # pw[d][..., j] = u_j ** d
        pw = [np.ones_like(u)]
        for _ in range(deg):
            pw.append(pw[-1] * u)
        return pw

    def evaluate(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        pw = self._powers(u)
        return np.stack([pw[p][..., 0] * pw[q][..., 1] * pw[s][..., 2] for p, q, s in self.exponents], axis=-1)

    def gradient(self, u) -> np.ndarray:
        """Derivatives w.r.t. the normalized coordinates, shape (3, n, M)."""
        u = np.asarray(u, dtype=float)
        pw = self._powers(u)
        zero = np.zeros(u.shape[:-1])

        def d(e, j):
            if e == 0:
                return zero
            return e * pw[e - 1][..., j]

        cols = [[], [], []]
        for p, q, s in self.exponents:
            a, b, c = pw[p][..., 0], pw[q][..., 1], pw[s][..., 2]
            cols[0].append(d(p, 0) * b * c)
            cols[1].append(a * d(q, 1) * c)
            cols[2].append(a * b * d(s, 2))
        return np.stack([np.stack(c, axis=-1) for c in cols])


# ----------------------------------------------------------------------------
# parameters


@dataclasses.dataclass
class PartitionNet:
    """Sine MLP 3 -> width (x depth) -> P followed by a softmax.

    ``weights[l]`` has shape (out, in). Hidden layer ``l`` computes
    ``sin(omega_l * (W h + b))`` with ``omega_0 = omega0`` and
    ``omega_l = omega_hidden`` afterwards; the output layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    omega0: float = 30.0
    omega_hidden: float = 1.0

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_partitions(self) -> int:
        return self.weights[-1].shape[0]

    def omega(self, layer: int) -> float:
        return self.omega0 if layer == 0 else self.omega_hidden

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> PartitionNet:
        return PartitionNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                            self.omega0, self.omega_hidden)

    def count(self) -> int:
        return sum(a.size for a in self.arrays())


def init_siren(width: int = 140, depth: int = 4, n_partitions: int = 40, omega0: float = 30.0,
               seed: int = 0, omega_hidden: float = 1.0, in_dim: int = 3) -> PartitionNet:
    """Sine-network initialization.

    First layer weights are uniform in [-1/in, 1/in]; later layers (including
    the output logits) are uniform in +-sqrt(6/fan_in)/omega_hidden. Biases
    are uniform in +-1/sqrt(fan_in).
    """
    rng = np.random.default_rng(seed)
    dims = [in_dim] + [width] * depth + [n_partitions]
    weights, biases = [], []
    for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if layer == 0:
            bound = 1.0 / fan_in
        else:
            bound = math.sqrt(6.0 / fan_in) / omega_hidden
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-1, 1, size=fan_out) / math.sqrt(fan_in))
    return PartitionNet(weights, biases, omega0, omega_hidden)


@dataclasses.dataclass
class PouNet:
    """Neural field parameters xi = (eta, C) plus the fixed basis and domain."""

    partition: PartitionNet
    coeffs: np.ndarray
    basis: PolyBasis
    domain: DomainBox

    def __post_init__(self):
        P, M = self.coeffs.shape
        if P != self.partition.n_partitions or M != self.basis.M:
            raise ValueError(f"coefficient shape {self.coeffs.shape} does not match P={self.partition.n_partitions}, M={self.basis.M}")

    @classmethod
    def create(cls, domain: DomainBox, width: int = 140, depth: int = 4, n_partitions: int = 40,
               omega0: float = 30.0, seed: int = 0, basis: PolyBasis | None = None,
               coeff_scale: float = 0.0) -> PouNet:
        basis = basis or PolyBasis.tensor()
        net = init_siren(width, depth, n_partitions, omega0, seed)
        rng = np.random.default_rng([seed, 1])
        C = coeff_scale * rng.standard_normal((n_partitions, basis.M))
        return cls(net, C, basis, domain)

    def copy(self) -> PouNet:
        return PouNet(self.partition.copy(), self.coeffs.copy(), self.basis, self.domain)

    def with_coeffs(self, C) -> PouNet:
        return PouNet(self.partition, np.asarray(C, dtype=float), self.basis, self.domain)

    def __call__(self, points, t):
        """Field values at spatial ``points`` (n, 2) and time(s) ``t``."""
        points = np.asarray(points, dtype=float)
        t = np.broadcast_to(np.asarray(t, dtype=float), points.shape[:-1])
        return eval_field(self, np.concatenate([points, t[..., None]], axis=-1), check=False)


def count_params(xi: PouNet) -> int:
    return xi.partition.count() + xi.coeffs.size


# ----------------------------------------------------------------------------
# forward evaluation


@dataclasses.dataclass
class Forward:
    """Cached intermediates of one batched evaluation."""

    u: np.ndarray
    hs: list  # activations, hs[0] = u
    zs: list  # pre-activations (after the omega scaling)
    coss: list | None
    psi: np.ndarray
    B: np.ndarray
    CB: np.ndarray
    phi: np.ndarray
    # tangents along the three normalized input axes
    dhs: list | None = None
    dzs: list | None = None
    dlog: np.ndarray | None = None
    dpsi: np.ndarray | None = None
    dB: np.ndarray | None = None
    grad_u: np.ndarray | None = None


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(xi: PouNet, u, tangents: bool = False, keep: bool = True) -> Forward:
    """Evaluate the field at normalized points ``u`` (n, 3)."""
    net = xi.partition
    u = np.asarray(u, dtype=float)
    hs, zs, coss = [u], [], [] if keep or tangents else None
    dhs = dzs = None
    if tangents:
        dhs = [None]
        dzs = []
    h = u
    for layer in range(net.depth):
        W, b, om = net.weights[layer], net.biases[layer], net.omega(layer)
        z = h @ (om * W).T
        z += om * b
        h = _sin(z)
        if keep or tangents:
            c = _cos(z)
            zs.append(z)
            coss.append(c)
            hs.append(h)
        if tangents:
            if layer == 0:
                dz = np.broadcast_to((om * W.T)[:, None, :], (3, u.shape[0], W.shape[0]))
            else:
                dz = om * (dhs[-1] @ W.T)
            dzs.append(dz)
            dhs.append(c * dz)
    logits = h @ net.weights[-1].T + net.biases[-1]
    psi = _softmax(logits)
    B = xi.basis.evaluate(u)
    CB = B @ xi.coeffs.T
    phi = np.einsum("np,np->n", psi, CB)
    fw = Forward(u, hs if keep else [u, h], zs, coss, psi, B, CB, phi)
    if tangents:
        dlog = dhs[-1] @ net.weights[-1].T
        s = np.einsum("np,jnp->jn", psi, dlog)
        dpsi = psi * (dlog - s[..., None])
        dB = xi.basis.gradient(u)
        CdB = dB @ xi.coeffs.T
        grad_u = (np.einsum("jnp,np->nj", dpsi, CB) + np.einsum("np,jnp->nj", psi, CdB))
        fw.dhs, fw.dzs, fw.dlog, fw.dpsi, fw.dB, fw.grad_u = dhs, dzs, dlog, dpsi, dB, grad_u
    return fw


def eval_pou(net: PartitionNet, u) -> np.ndarray:
    h = np.asarray(u, dtype=float)
    for layer in range(net.depth):
        om = net.omega(layer)
        h = _sin(h @ (om * net.weights[layer]).T + om * net.biases[layer])
    return _softmax(h @ net.weights[-1].T + net.biases[-1])


def eval_field(xi: PouNet, x, check: bool = True, chunk: int = 65536) -> np.ndarray:
    """Field values at physical space-time points ``x`` (n, 3)."""
    x = np.asarray(x, dtype=float)
    if check:
        xi.domain.check(x)
    flat = x.reshape(-1, 3)
    u = xi.domain.normalize(flat)
    out = np.empty(len(u))
    for i in range(0, len(u), chunk):
        sl = slice(i, i + chunk)
        out[sl] = forward(xi, u[sl], keep=False).phi
    return out.reshape(x.shape[:-1])


def eval_field_grad_x(xi: PouNet, x, check: bool = True) -> np.ndarray:
    """Physical space-time gradient (d/dr_x, d/dr_y, d/dt) at points ``x`` (n, 3)."""
    x = np.asarray(x, dtype=float)
    if check:
        xi.domain.check(x)
    flat = x.reshape(-1, 3)
    fw = forward(xi, xi.domain.normalize(flat), tangents=True)
    return (fw.grad_u * xi.domain.scale).reshape(x.shape)


# ----------------------------------------------------------------------------
# reverse pass


@dataclasses.dataclass
class Grads:
    """Parameter gradients, shaped like ``PartitionNet.arrays()`` and ``C``."""

    eta: list
    C: np.ndarray

    @classmethod
    def zeros(cls, xi: PouNet) -> Grads:
        return cls([np.zeros_like(a) for a in xi.partition.arrays()], np.zeros_like(xi.coeffs))

    def __iadd__(self, other: Grads) -> Grads:
        for a, b in zip(self.eta, other.eta):
            a += b
        self.C += other.C
        return self

    def scaled(self, s: float) -> Grads:
        return Grads([s * a for a in self.eta], s * self.C)


def backward(xi: PouNet, fw: Forward, gphi=None, ggrad=None, gpsi=None, need_eta: bool = True) -> Grads:
    """Reverse pass for seeds on phi, on the normalized input gradient and on psi."""
    net = xi.partition
    C = xi.coeffs
    psi, CB, B = fw.psi, fw.CB, fw.B
    n, P = psi.shape
    psi_bar = np.zeros((n, P)) if gpsi is None else np.array(gpsi, dtype=float)
    CB_bar = np.zeros((n, P))
    C_bar = np.zeros_like(C)
    if gphi is not None:
        gphi = np.asarray(gphi, dtype=float)
        psi_bar += gphi[:, None] * CB
        CB_bar += gphi[:, None] * psi
    dlog_bar = None
    if ggrad is not None:
        if fw.dpsi is None:
            raise ContractError("input-gradient seeds need a forward pass with tangents")
        ggrad = np.asarray(ggrad, dtype=float)
        dpsi_bar = ggrad.T[:, :, None] * CB[None]  # (3, n, P)
        CB_bar += np.einsum("nj,jnp->np", ggrad, fw.dpsi)
        CdB = fw.dB @ C.T
        psi_bar += np.einsum("nj,jnp->np", ggrad, CdB)
        for j in range(3):
            C_bar += (ggrad[:, j, None] * psi).T @ fw.dB[j]
        s_bar = -np.einsum("jnp,np->jn", dpsi_bar, psi)
        s = np.einsum("np,jnp->jn", psi, fw.dlog)
        dlog_bar = psi[None] * dpsi_bar + psi[None] * s_bar[..., None]
        psi_bar += np.einsum("jnp,jnp->np", dpsi_bar, fw.dlog - s[..., None])
        psi_bar += np.einsum("jnp,jn->np", fw.dlog, s_bar)
    C_bar += CB_bar.T @ B
    grads = Grads([np.zeros_like(a) for a in net.arrays()], C_bar)
    if not need_eta:
        return grads
    if fw.coss is None or len(fw.zs) != net.depth:
        raise ContractError("parameter gradients need a forward pass with cached intermediates")
    logits_bar = psi * (psi_bar - np.einsum("np,np->n", psi_bar, psi)[:, None])
    Wg, bg = grads.eta[0::2], grads.eta[1::2]
    L = net.depth
    Wo = net.weights[-1]
    Wg[-1] += logits_bar.T @ fw.hs[-1]
    bg[-1] += logits_bar.sum(axis=0)
    h_bar = logits_bar @ Wo
    dh_bar = None
    if dlog_bar is not None:
        for j in range(3):
            Wg[-1] += dlog_bar[j].T @ fw.dhs[-1][j]
        dh_bar = dlog_bar @ Wo
    for layer in range(L - 1, -1, -1):
        W, om = net.weights[layer], net.omega(layer)
        c = fw.coss[layer]
        z_bar = h_bar * c
        if dh_bar is not None:
            dz_bar = dh_bar * c
            # d(cos z)/dz = -sin z = -h
            z_bar -= np.einsum("jnw,jnw->nw", dh_bar, fw.dzs[layer]) * fw.hs[layer + 1]
        Wg[layer] += om * (z_bar.T @ fw.hs[layer])
        bg[layer] += om * z_bar.sum(axis=0)
        if layer > 0:
            h_bar = z_bar @ (om * W)
            if dh_bar is not None:
                for j in range(3):
                    Wg[layer] += om * (dz_bar[j].T @ fw.dhs[layer][j])
                dh_bar = om * (dz_bar @ W)
        elif dh_bar is not None:
            # first-layer tangents are om * W[:, j], constant over points
            Wg[0] += om * dz_bar.sum(axis=1).T
    return grads


# ----------------------------------------------------------------------------
# loss terms accepted by grad_params

Reducer = Callable[[np.ndarray], tuple]


@dataclasses.dataclass
class FieldValues:
    """Scalar function of Phi at physical points ``x`` (n, 3)."""

    x: np.ndarray
    reduce: Reducer


@dataclasses.dataclass
class FieldGradients:
    """Scalar function of the physical gradient of Phi at ``x`` (n, 3)."""

    x: np.ndarray
    reduce: Reducer


@dataclasses.dataclass
class PartitionValues:
    """Scalar function of Psi (n, P) at ``x`` (n, 3)."""

    x: np.ndarray
    reduce: Reducer


@dataclasses.dataclass
class CoefficientPenalty:
    """Scalar function of C alone."""

    reduce: Reducer


LossTerm = FieldValues | FieldGradients | PartitionValues | CoefficientPenalty


def grad_params(xi: PouNet, terms: Sequence[LossTerm], need_eta: bool = True) -> tuple[float, Grads]:
    """Value and exact parameter gradients of a sum of supported loss terms.

    Each reducer maps the evaluated quantity to ``(value, derivative)``,
    where the derivative has the quantity's shape.
    """
    total = 0.0
    grads = Grads.zeros(xi)
    scale = xi.domain.scale
    for term in terms:
        if isinstance(term, CoefficientPenalty):
            v, g = term.reduce(xi.coeffs)
            total += v
            grads.C += g
            continue
        if not isinstance(term, (FieldValues, FieldGradients, PartitionValues)):
            raise ContractError(f"unsupported loss term {type(term).__name__}")
        u = xi.domain.normalize(np.asarray(term.x, dtype=float).reshape(-1, 3))
        if isinstance(term, FieldValues):
            fw = forward(xi, u, keep=need_eta)
            v, g = term.reduce(fw.phi)
            grads += backward(xi, fw, gphi=g, need_eta=need_eta)
        elif isinstance(term, FieldGradients):
            fw = forward(xi, u, tangents=True)
            v, g = term.reduce(fw.grad_u * scale)
            grads += backward(xi, fw, ggrad=np.asarray(g) * scale, need_eta=need_eta)
        else:
            fw = forward(xi, u, keep=True)
            v, g = term.reduce(fw.psi)
            grads += backward(xi, fw, gpsi=g, need_eta=need_eta)
        total += float(v)
    return total, grads


# common reducers

def squared_residual(target, weight: float = 1.0) -> Reducer:
    """weight * ||values - target||^2."""
    target = np.asarray(target, dtype=float)

    def reduce(values):
        r = values - target
        return weight * float(r @ r), 2 * weight * r

    return reduce


def smoothed_gradient_norm(weight: float = 1.0, delta: float = 1e-8, include_time: bool = True) -> Reducer:
    """weight * mean over points of sqrt(|grad|^2 + delta^2)."""

    def reduce(g):
        g = np.array(g, dtype=float)
        if not include_time:
            g[:, 2] = 0.0
        nrm = np.sqrt(np.sum(g * g, axis=1) + delta**2)
        n = len(nrm)
        d = weight * g / (n * nrm[:, None])
        return weight * float(nrm.mean()), d

    return reduce


def smoothed_qnorm(weight: float, q: float, eps: float, volume: float) -> Reducer:
    """weight * |Omega_T| * mean over points of sum_p (psi_p + eps)^q."""

    def reduce(psi):
        n = psi.shape[0]
        base = psi + eps
        v = weight * volume * float(np.sum(base**q)) / n
        return v, weight * volume * q * base ** (q - 1) / n

    return reduce


def frobenius(weight: float) -> Reducer:
    """weight/2 * ||C||_F^2."""

    def reduce(C):
        return 0.5 * weight * float(np.sum(C * C)), weight * C

    return reduce


# ----------------------------------------------------------------------------
# misc helpers


def partition_sparsity(net: PartitionNet, u, threshold: float = 0.05) -> float:
    """Mean number of partitions with weight above ``threshold``."""
    return float(np.mean(np.sum(eval_pou(net, u) > threshold, axis=1)))


def flatten_eta(net: PartitionNet) -> np.ndarray:
    return np.concatenate([a.ravel() for a in net.arrays()])


def unflatten_eta(net: PartitionNet, vec) -> PartitionNet:
    out = net.copy()
    i = 0
    for a in out.arrays():
        a[...] = np.asarray(vec[i:i + a.size]).reshape(a.shape)
        i += a.size
    return out


def layer_dims(xi: PouNet) -> list[tuple[int, int]]:
    return [w.shape for w in xi.partition.weights]


