"""State space kernels: ZOH discretization, LTI scan/convolution, selective scan and Bi-SSM.

Selective-scan shapes: a sequence ``X`` is (T, C); every channel carries a
diagonal state of size d, so per-token operators are (C, d) arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import macs

SERIES_THRESHOLD = 1e-4
CHUNK = 16
_PSI_THRESHOLD = 1e-3


class ScanOverflowError(ArithmeticError):
    def __init__(self, token: int):
        super().__init__(f"numerical overflow in scan at token {token}")
        self.token = token


# ---------------------------------------------------------------------------
# Linear time-invariant systems

@dataclass
class LTISystem:
    A: np.ndarray   # (d,) diagonal storage or (d, d) dense
    B: np.ndarray   # (d,)
    C: np.ndarray   # (d,)
    delta: float

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(-1)
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not np.all(np.isfinite(self.A)):
            raise ValueError("A must be finite")


@dataclass
class DiscreteLTI:
    Abar: np.ndarray  # (d,) diagonal or (d, d)
    Bbar: np.ndarray  # (d,)

    @property
    def diagonal(self) -> bool:
        return self.Abar.ndim == 1


def phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z, continuous through z = 0."""
    z = np.asarray(z, dtype=np.float64)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    out = np.expm1(safe) / safe
    series = 1.0 + z * (1 / 2 + z * (1 / 6 + z / 24))
    return np.where(small, series, out)


def _psi(z: np.ndarray) -> np.ndarray:
    """d/dA of (exp(A*dt) - 1)/A divided by dt**2, i.e. (z e^z - e^z + 1) / z^2."""
    small = np.abs(z) < _PSI_THRESHOLD
    safe = np.where(small, 1.0, z)
    direct = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 1 / 2 + z * (1 / 3 + z * (1 / 8 + z / 30))
    return np.where(small, series, direct)


def zoh_discretize(sys: LTISystem) -> DiscreteLTI:
    """Zero-order hold: Abar = exp(A dt), Bbar = A^-1 (exp(A dt) - I) B."""
    if sys.A.ndim == 1:
        z = sys.A * sys.delta
        return DiscreteLTI(np.exp(z), sys.delta * phi(z) * sys.B)
    # dense A: block exponential avoids inverting a possibly singular A
    d = len(sys.B)
    M = np.zeros((d + 1, d + 1))
    M[:d, :d] = sys.A * sys.delta
    M[:d, d] = sys.B * sys.delta
    E = expm(M)
    return DiscreteLTI(E[:d, :d], E[:d, d].copy())


def lti_kernel(dsys: DiscreteLTI, Cmat, length: int) -> np.ndarray:
    """K[i] = C Abar^i Bbar for i < length."""
    if length < 1:
        raise ValueError(f"kernel length must be >= 1, got {length}")
    C = np.asarray(Cmat, dtype=np.float64).reshape(-1)
    if dsys.diagonal:
        powers = dsys.Abar[None, :] ** np.arange(length)[:, None]
        return powers @ (C * dsys.Bbar)
    K = np.empty(length)
    v = dsys.Bbar.copy()
    for i in range(length):
        K[i] = C @ v
        v = dsys.Abar @ v
    return K


def lti_scan(dsys: DiscreteLTI, Cmat, x) -> np.ndarray:
    """Recurrent evaluation from h_0 = 0; y_k = C h_{k+1}."""
    C = np.asarray(Cmat, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = np.zeros_like(dsys.Bbar)
    y = np.empty(len(x))
    for k, xk in enumerate(x):
        h = (dsys.Abar * h if dsys.diagonal else dsys.Abar @ h) + dsys.Bbar * xk
        y[k] = C @ h
    return y


def causal_conv(x, K) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return np.convolve(x, np.asarray(K, dtype=np.float64))[: len(x)]


# ---------------------------------------------------------------------------
# Selective scan

@dataclass
class SelectiveParams:
    A: np.ndarray       # (C, d), diagonal state matrix per channel
    w_b: np.ndarray     # (C, d)  token -> B(x)
    w_c: np.ndarray     # (C, d)  token -> C(x)
    w_dt: np.ndarray    # (C, C)  token -> pre-softplus step
    b_dt: np.ndarray    # (C,)
    w_gate: np.ndarray  # (C, C)  output gate, applied by the Bi-SSM layer

    @property
    def channels(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    def check(self, channels: int | None = None) -> None:
        C, d = self.A.shape
        if channels is not None and C != channels:
            raise ValueError(f"SSM channels {C} != expected {channels}")
        want = {"w_b": (C, d), "w_c": (C, d), "w_dt": (C, C), "b_dt": (C,), "w_gate": (C, C)}
        for name, shape in want.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"selective param {name} has shape {got}, expected {shape}")


@dataclass
class SelectiveGrads:
    A: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    w_dt: np.ndarray
    b_dt: np.ndarray


def init_selective(channels: int, state_dim: int, rng: np.random.Generator) -> SelectiveParams:
    C, d = channels, state_dim
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), C))
    return SelectiveParams(
        A=-np.tile(np.arange(1, d + 1, dtype=np.float64), (C, 1)),
        w_b=rng.normal(0.0, 1.0 / np.sqrt(C), (C, d)),
        w_c=rng.normal(0.0, 1.0 / np.sqrt(C), (C, d)),
        w_dt=rng.normal(0.0, 0.1 / np.sqrt(C), (C, C)),
        b_dt=np.log(np.expm1(dt)),
        w_gate=rng.normal(0.0, 1.0 / np.sqrt(C), (C, C)),
    )


def softplus(u: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, u)


def sigmoid(u: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -u))


@dataclass
class _Trace:
    u: np.ndarray      # (T, C)
    delta: np.ndarray  # (T, C)
    Bv: np.ndarray     # (T, d)
    Cv: np.ndarray     # (T, d)
    z: np.ndarray      # (T, C, d) = delta * A
    Ab: np.ndarray     # (T, C, d)
    g: np.ndarray      # (T, C, d) = (exp(z) - 1) / A
    U: np.ndarray      # (T, C, d) input injection Bbar * x
    H: np.ndarray | None = field(default=None)


def _prepare(p: SelectiveParams, X: np.ndarray) -> _Trace:
    T, C = X.shape
    d = p.state_dim
    u = X @ p.w_dt + p.b_dt
    delta = softplus(u)
    Bv = X @ p.w_b
    Cv = X @ p.w_c
    z = delta[:, :, None] * p.A[None]
    Ab = np.exp(z)
    g = delta[:, :, None] * phi(z)
    U = g * Bv[:, None, :] * X[:, :, None]
    macs.add(T * C * (C + 2 * d) + 4 * T * C * d, "ssm")
    return _Trace(u, delta, Bv, Cv, z, Ab, g, U)


def _check_input(p: SelectiveParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"selective scan expects a non-empty (T, C) matrix, got {X.shape}")
    if X.shape[1] != p.channels:
        raise ValueError(f"input has {X.shape[1]} channels, params expect {p.channels}")
    return X


def _raise_on_overflow(H: np.ndarray) -> None:
    bad = ~np.isfinite(H.reshape(len(H), -1)).all(axis=1)
    if bad.any():
        raise ScanOverflowError(int(np.argmax(bad)))


def _sequential_states(tr: _Trace) -> np.ndarray:
    T, C, d = tr.U.shape
    H = np.empty((T, C, d))
    h = np.zeros((C, d))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            h = tr.Ab[k] * h + tr.U[k]
            H[k] = h
    macs.add(2 * T * C * d, "ssm")
    return H


def _chunked_states(tr: _Trace, chunk: int) -> np.ndarray:
    # Within a block: h_i = exp(Z_i) h_s + sum_{j<=i} exp(Z_i - Z_j) U_j,
    # Z = running sum of z over the block; the last state carries over.
    T, C, d = tr.U.shape
    H = np.empty((T, C, d))
    h = np.zeros((C, d))
    with np.errstate(over="ignore", invalid="ignore"):
        for s in range(0, T, chunk):
            e = min(s + chunk, T)
            Z = np.cumsum(tr.z[s:e], axis=0)
            n = e - s
            lower = np.tril(np.ones((n, n), dtype=bool))
            diff = np.where(lower[:, :, None, None], Z[:, None] - Z[None, :], -np.inf)
            Hb = np.exp(Z) * h + np.einsum("ijcd,jcd->icd", np.exp(diff), tr.U[s:e])
            H[s:e] = Hb
            h = Hb[-1]
    return H


def selective_scan(p: SelectiveParams, X, chunk: int | None = None) -> np.ndarray:
    """Input-dependent scan h_{k+1} = Abar(x_k) h_k + Bbar(x_k) x_k, y_k = C(x_k) h_{k+1}.

    ``chunk`` switches to the blocked evaluation with carried state.
    """
    X = _check_input(p, X)
    with np.errstate(over="ignore", invalid="ignore"):
        tr = _prepare(p, X)
    H = _sequential_states(tr) if chunk is None else _chunked_states(tr, chunk)
    _raise_on_overflow(H)
    macs.add(H.size, "ssm")
    return np.einsum("tcd,td->tc", H, tr.Cv)


def selective_scan_backward(p: SelectiveParams, X, dY) -> tuple[SelectiveGrads, np.ndarray]:
    """Reverse-mode gradients of ``sum(dY * selective_scan(p, X))``.

    Returns parameter gradients and the gradient with respect to ``X``.
    """
    X = _check_input(p, X)
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != X.shape:
        raise ValueError(f"upstream gradient shape {dY.shape} != input shape {X.shape}")
    tr = _prepare(p, X)
    H = _sequential_states(tr)
    _raise_on_overflow(H)
    T, C, d = H.shape

    dAb = np.empty_like(H)
    dU = np.empty_like(H)
    carry = np.zeros((C, d))
    for k in range(T - 1, -1, -1):
        dh = carry + dY[k][:, None] * tr.Cv[k][None, :]
        dAb[k] = dh * H[k - 1] if k > 0 else 0.0
        dU[k] = dh
        carry = dh * tr.Ab[k]

    dCv = np.einsum("tc,tcd->td", dY, H)
    dg = dU * tr.Bv[:, None, :] * X[:, :, None]
    dBv = np.einsum("tcd,tcd,tc->td", dU, tr.g, X)
    dX = np.einsum("tcd,tcd,td->tc", dU, tr.g, tr.Bv)

    dz = dAb * tr.Ab
    # g = (exp(delta A) - 1) / A:  dg/ddelta = exp(delta A),  dg/dA = delta^2 psi(delta A)
    ddelta = np.sum(dz * p.A[None] + dg * tr.Ab, axis=2)
    dA = np.sum(dz * tr.delta[:, :, None] + dg * np.square(tr.delta)[:, :, None] * _psi(tr.z), axis=0)
    du = ddelta * sigmoid(tr.u)

    dX = dX + du @ p.w_dt.T + dBv @ p.w_b.T + dCv @ p.w_c.T
    grads = SelectiveGrads(
        A=dA, w_b=X.T @ dBv, w_c=X.T @ dCv, w_dt=X.T @ du, b_dt=du.sum(axis=0))
    return grads, dX


# ---------------------------------------------------------------------------
# Bidirectional layers

@dataclass
class BiSSMLayer:
    fwd: SelectiveParams
    bwd: SelectiveParams
    norm: np.ndarray  # (C,) RMS-norm scale

    def swapped(self) -> "BiSSMLayer":
        return BiSSMLayer(self.bwd, self.fwd, self.norm)


@dataclass
class BiSSMStack:
    layers: list[BiSSMLayer]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("a Bi-SSM stack needs at least one layer")


def init_layer(channels: int, state_dim: int, rng: np.random.Generator) -> BiSSMLayer:
    return BiSSMLayer(init_selective(channels, state_dim, rng),
                      init_selective(channels, state_dim, rng),
                      np.ones(channels))


def rms_norm(X: np.ndarray, scale: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return X / np.sqrt(np.mean(X * X, axis=-1, keepdims=True) + eps) * scale


def silu(u: np.ndarray) -> np.ndarray:
    return u * sigmoid(u)


def gated_scan(p: SelectiveParams, X: np.ndarray) -> np.ndarray:
    T, C = X.shape
    macs.add(T * C * C, "ssm")
    return selective_scan(p, X) * silu(X @ p.w_gate)


def _check_order(order, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64).reshape(-1)
    if len(order) != n or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError("order must be a permutation of the row indices")
    return order


def bi_ssm_layer(layer: BiSSMLayer, X, order=None) -> np.ndarray:
    """Forward scan over X[order] plus backward scan over its reverse, residual, RMS norm."""
    X = np.asarray(X, dtype=np.float64)
    T = len(X)
    order = np.arange(T) if order is None else _check_order(order, T)
    Xo = X[order]
    y = gated_scan(layer.fwd, Xo) + gated_scan(layer.bwd, Xo[::-1])[::-1]
    mixed = np.empty_like(X)
    mixed[order] = y
    return rms_norm(X + mixed, layer.norm)


def bi_ssm_stack(stack: BiSSMStack, X, order=None, layers: int | None = None) -> np.ndarray:
    n = len(stack.layers) if layers is None else layers
    if n < 1 or n > len(stack.layers):
        raise ValueError(f"requested {n} layers, stack holds {len(stack.layers)}")
    out = np.asarray(X, dtype=np.float64)
    for layer in stack.layers[:n]:
        out = bi_ssm_layer(layer, out, order)
    return out
