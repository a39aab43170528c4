"""Neural scalar fields on the unit torus.

A network maps a point ``x`` to ``h(x)``.  Besides the value, the forward
sweep carries the input Jacobian and the input Laplacian of every layer, so
``grad h`` and ``lap h`` come out exactly without nested differentiation.
The sweep is also registered as a single fused primitive on an autodiff
:class:`~ergodic_mfc.autodiff.Tape`, whose hand-written adjoint propagates
cotangents of (value, gradient, Laplacian) back to the flat parameters.

Two flavours are supported:

``sin_periodic``
    one hidden layer of ``sin`` units on raw coordinates (the class used in
    the error analysis; periodic when first-layer weights lie on 2 pi Z).
``tanh_embedded``
    any depth of ``tanh`` layers on top of the embedding
    ``x -> (cos 2 pi x_1, sin 2 pi x_1, ...)``; always exactly 1-periodic.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .model import TWO_PI, FieldJet, as_points


@dataclass(frozen=True)
class NetworkArch:
    layer_widths: tuple  # (d, n_1, ..., n_l, 1)
    activation: str = "tanh_embedded"  # or "sin_periodic"
    gamma1: Optional[float] = None  # L1 bound on output weights
    gamma2: Optional[float] = None  # L2 bound on each hidden unit's (weights, bias)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3 or widths[-1] != 1 or min(widths) < 1:
            raise ValueError("layer_widths must be (d, hidden..., 1)")
        if self.activation not in ("sin_periodic", "tanh_embedded"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "sin_periodic" and len(widths) != 3:
            raise ValueError("sin_periodic networks have exactly one hidden layer")
        for g in (self.gamma1, self.gamma2):
            if g is not None and g <= 0:
                raise ValueError("constraint bounds must be positive")

    @property
    def d(self) -> int:
        return self.layer_widths[0]

    @property
    def embedding(self) -> str:
        return "trig" if self.activation == "tanh_embedded" else "raw"

    @property
    def constrained(self) -> bool:
        return self.gamma1 is not None or self.gamma2 is not None

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) of every affine map, input layer first."""
        widths = list(self.layer_widths)
        if self.embedding == "trig":
            widths[0] = 2 * widths[0]
        return [(widths[k + 1], widths[k]) for k in range(len(widths) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes())

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layer_widths"] = list(self.layer_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkArch":
        return cls(**{**data, "layer_widths": tuple(data["layer_widths"])})


def unpack(arch: NetworkArch, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer ``(W, beta)`` views into the flat vector.

    The flat layout is ``(beta_0, W_0, beta_1, W_1, ...)`` with each ``W_k``
    stored row-major with shape (fan_out, fan_in).
    """
    theta = np.asarray(theta)
    if theta.shape != (arch.n_params,):
        raise ValueError(f"expected {arch.n_params} parameters, got {theta.shape}")
    layers, pos = [], 0
    for fan_out, fan_in in arch.layer_shapes():
        beta = theta[pos:pos + fan_out]
        pos += fan_out
        W = theta[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        layers.append((W, beta))
    return layers


def init_params(arch: NetworkArch, seed: int) -> np.ndarray:
    """Glorot-uniform hidden weights, zero biases, zero output layer."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.n_params)
    layers = unpack(arch, theta)
    for W, _ in layers[:-1]:
        fan_out, fan_in = W.shape
        a = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-a, a, size=W.shape)
    return theta


def project_constraints(arch: NetworkArch, theta: np.ndarray) -> np.ndarray:
    """Radially rescale onto ``||w||_1 <= gamma1`` and ``||(u_n, beta_n)||_2 <= gamma2``.

    Only the output weights and the first hidden layer are touched; the
    output bias is free.  Returns a new vector.
    """
    theta = np.array(theta, dtype=float)
    if not arch.constrained:
        return theta
    layers = unpack(arch, theta)
    if arch.gamma1 is not None:
        w = layers[-1][0]
        norm = np.abs(w).sum()
        if norm > arch.gamma1 + 1e-13:  # slack keeps the projection idempotent
            w *= arch.gamma1 / norm
    if arch.gamma2 is not None:
        W, beta = layers[0]
        norms = np.sqrt((W**2).sum(axis=1) + beta**2)
        scale = np.where(norms > arch.gamma2 + 1e-13, arch.gamma2 / np.maximum(norms, 1e-300), 1.0)
        W *= scale[:, None]
        beta *= scale
    return theta


def _embed(arch: NetworkArch, x: np.ndarray, need_derivs: bool):
    """Input features, their Jacobian (B, d, n0) and Laplacian (B, n0)."""
    B, d = x.shape
    if arch.embedding == "raw":
        if not need_derivs:
            return x, None, None
        J = np.broadcast_to(np.eye(d), (B, d, d))
        return x, J, np.zeros((B, d))
    c, s = np.cos(TWO_PI * x), np.sin(TWO_PI * x)
    z = np.empty((B, 2 * d))
    z[:, 0::2], z[:, 1::2] = c, s
    if not need_derivs:
        return z, None, None
    J = np.zeros((B, d, 2 * d))
    idx = np.arange(d)
    J[:, idx, 2 * idx] = -TWO_PI * s
    J[:, idx, 2 * idx + 1] = TWO_PI * c
    L = -TWO_PI**2 * z
    return z, J, L


def _activate(arch: NetworkArch, a: np.ndarray, order: int):
    """Activation and its first ``order`` derivatives."""
    if arch.activation == "sin_periodic":
        s, c = np.sin(a), np.cos(a)
        return [s, c, -s, -c][: order + 1]
    t = np.tanh(a)
    s1 = 1.0 - t * t
    out = [t, s1]
    if order >= 2:
        s2 = -2.0 * t * s1
        out.append(s2)
    if order >= 3:
        out.append(-2.0 * s1 * s1 - 2.0 * t * s2)
    return out[: order + 1]


def _forward_value(arch, theta, x):
    layers = unpack(arch, theta)
    z, _, _ = _embed(arch, x, need_derivs=False)
    cache = []
    for W, beta in layers[:-1]:
        a = z @ W.T + beta
        s0, s1 = _activate(arch, a, 1)
        cache.append((z, s1))
        z = s0
    W, beta = layers[-1]
    return z @ W[0] + beta[0], (layers, cache, z)


def _forward_jet(arch, theta, x):
    layers = unpack(arch, theta)
    z, J, L = _embed(arch, x, need_derivs=True)
    cache = []
    for W, beta in layers[:-1]:
        a = z @ W.T + beta
        A = J @ W.T  # (B, d, m)
        M = L @ W.T
        s0, s1, s2, s3 = _activate(arch, a, 3)
        q = (A * A).sum(axis=1)
        cache.append((z, J, L, A, M, q, s1, s2, s3))
        z = s0
        J = s1[:, None, :] * A
        L = s2 * q + s1 * M
    W, beta = layers[-1]
    w = W[0]
    value = z @ w + beta[0]
    grad = J @ w
    lap = L @ w
    return (value, grad, lap), (layers, cache, z, J, L)


def _backward_value(arch, saved, hbar):
    layers, cache, z = saved
    grads = []
    W, _ = layers[-1]
    grads.append(((hbar @ z)[None, :], np.array([hbar.sum()])))
    zbar = np.outer(hbar, W[0])
    for (W, _), (zin, s1) in zip(reversed(layers[:-1]), reversed(cache)):
        abar = zbar * s1
        grads.append((abar.T @ zin, abar.sum(axis=0)))
        zbar = abar @ W
    return _flatten_grads(arch, grads)


def _backward_jet(arch, saved, hbar, gbar, lbar):
    layers, cache, z, J, L = saved
    W, _ = layers[-1]
    w = W[0]
    wbar = hbar @ z + np.einsum("bd,bdn->n", gbar, J) + lbar @ L
    grads = [(wbar[None, :], np.array([hbar.sum()]))]
    zbar = np.outer(hbar, w)
    Jbar = gbar[:, :, None] * w
    Lbar = np.outer(lbar, w)
    for (W, _), (zin, Jin, Lin, A, M, q, s1, s2, s3) in zip(reversed(layers[:-1]), reversed(cache)):
        abar = zbar * s1 + (Jbar * A).sum(axis=1) * s2 + Lbar * (s3 * q + s2 * M)
        Abar = Jbar * s1[:, None, :] + 2.0 * A * (Lbar * s2)[:, None, :]
        Mbar = Lbar * s1
        B, d, m = Abar.shape
        Wbar = abar.T @ zin + Abar.reshape(B * d, m).T @ Jin.reshape(B * d, -1) + Mbar.T @ Lin
        grads.append((Wbar, abar.sum(axis=0)))
        zbar = abar @ W
        Jbar = Abar @ W
        Lbar = Mbar @ W
    return _flatten_grads(arch, grads)


def _flatten_grads(arch, grads_rev):
    parts = []
    for Wbar, bbar in reversed(grads_rev):
        parts.append(np.ravel(bbar))
        parts.append(np.ravel(Wbar))
    return np.concatenate(parts)


def eval_value(arch: NetworkArch, theta, x):
    """``h_theta`` at a batch of points; records on the tape if ``theta`` is a Var."""
    x = as_points(x)
    if isinstance(theta, ad.Var):
        value, saved = _forward_value(arch, theta.value, x)
        return theta.tape.record(value, (theta,), lambda g: (_backward_value(arch, saved, g),))
    return _forward_value(arch, np.asarray(theta), x)[0]


def eval_jet(arch: NetworkArch, theta, x) -> FieldJet:
    """Value, input gradient and input Laplacian of ``h_theta``.

    With a plain array ``theta`` the jet holds arrays.  With a tape ``Var``
    the jet holds Vars sliced from one fused node, so any scalar built from
    them can be differentiated with respect to ``theta``.
    """
    x = as_points(x)
    if x.shape[1] != arch.d:
        raise ValueError(f"points have dimension {x.shape[1]}, network expects {arch.d}")
    if not isinstance(theta, ad.Var):
        (value, grad, lap), _ = _forward_jet(arch, np.asarray(theta), x)
        return FieldJet(value, grad, lap)
    (value, grad, lap), saved = _forward_jet(arch, theta.value, x)
    d = arch.d
    packed = np.concatenate([value[:, None], grad, lap[:, None]], axis=1)

    def vjp(g):
        return (_backward_jet(arch, saved, g[:, 0], g[:, 1:d + 1], g[:, d + 1]),)

    node = theta.tape.record(packed, (theta,), vjp)
    return FieldJet(node[:, 0], node[:, 1:d + 1], node[:, d + 1])


def backprop(tape: ad.Tape, scalar: ad.Var, theta: ad.Var) -> np.ndarray:
    """Reverse-mode derivative of a recorded scalar with respect to ``theta``."""
    return tape.gradient(scalar, theta)


class NetField:
    """A network with fixed parameters viewed as a field handle."""

    def __init__(self, arch: NetworkArch, theta: np.ndarray, transform: str = "identity"):
        self.arch = arch
        self.theta = np.asarray(theta, dtype=float)
        self.transform = transform

    def __call__(self, x):
        v = eval_value(self.arch, self.theta, x)
        return np.exp(v) if self.transform == "exp" else v

    def jet(self, x) -> FieldJet:
        j = eval_jet(self.arch, self.theta, x)
        if self.transform != "exp":
            return j
        nu = np.exp(j.value)
        return FieldJet(nu, nu[:, None] * j.grad, nu * (j.laplacian + (j.grad**2).sum(axis=1)))


def exact_sine_params(arch: NetworkArch, weights, frequencies, biases=None,
                      output_bias: float = 0.0) -> np.ndarray:
    """Parameters of a ``sin_periodic`` net ``sum_n w_n sin(u_n . x + beta_n) + c``."""
    if arch.activation != "sin_periodic":
        raise ValueError("only for sin_periodic networks")
    theta = np.zeros(arch.n_params)
    (U, beta), (W, c) = unpack(arch, theta)
    n = len(weights)
    U[:n] = np.asarray(frequencies, dtype=float).reshape(n, arch.d)
    if biases is not None:
        beta[:n] = biases
    W[0, :n] = weights
    c[0] = output_bias
    return theta


def fit_to_field(arch: NetworkArch, theta0: np.ndarray, target, n_points: int = 512,
                 grad_weight: float = 0.0, seed: int = 0, maxiter: int = 2000) -> np.ndarray:
    """Least-squares fit of ``h_theta`` to a field handle with L-BFGS.

    The loss is the mean squared value error, plus ``grad_weight`` times the
    mean squared gradient error when the target exposes a jet.
    """
    from scipy.optimize import minimize

    rng = np.random.default_rng(seed)
    x = rng.random((n_points, arch.d))
    if grad_weight > 0:
        tj = target.jet(x)
        tv, tg = tj.value, tj.grad
    else:
        tv, tg = np.asarray(target(x)), None

    def loss_and_grad(th):
        tape = ad.Tape()
        t = tape.variable(th)
        j = eval_jet(arch, t, x)
        r = j.value - tv
        loss = ad.mean(r * r)
        if tg is not None:
            e = j.grad - tg
            loss = loss + grad_weight * ad.mean(ad.vsum(e * e, axis=1))
        return float(loss.value), tape.gradient(loss, t)

    res = minimize(loss_and_grad, np.asarray(theta0, dtype=float), jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter, "gtol": 1e-12, "ftol": 1e-15})
    return res.x


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, header: dict, vector: np.ndarray) -> None:
    """One line of compact JSON, then the parameters as little-endian float64."""
    head = json.dumps({**header, "n_values": int(np.size(vector))}, sort_keys=True,
                      separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(head.encode("utf-8") + b"\n")
        fh.write(np.asarray(vector, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut].decode("utf-8"))
    vector = np.frombuffer(raw[cut + 1:], dtype="<f8").copy()
    if vector.size != header["n_values"]:
        raise ValueError(f"checkpoint {path} is truncated")
    return header, vector
