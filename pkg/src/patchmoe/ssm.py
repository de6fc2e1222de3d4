"""Selective state-space scan.

For each (batch, channel) pair the recurrence

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t,   h_0 = 0
    y_t = <C_t, h_t> + D * x_t

runs in a single pass over the sequence.  ``delta``, ``B`` and ``C`` are
computed from the input at each step (1x1 projections of the channel vector);
``A = -exp(A_log)`` and ``D`` are input independent.  The decay factors
``exp(delta_t * A)`` are computed once up front and the compiled forward
pass stores every hidden state for the compiled adjoint.
"""
from __future__ import annotations

import numba
import numpy as np

from . import tensor as T
from .nn import Module
from .scan_order import ScanOrder, gather, scatter
from .tensor import ContractError, DimensionError, Param, Tensor


@numba.njit(cache=True)
def _scan_forward(x, delta, Bm, Cm, D, decay, hs):
    # x, delta: (B, C, T); Bm, Cm: (B, N, T); decay (B, C, N, T) is read, hs is written.
    # Channels never interact inside the recurrence, so each (b, c) runs its own pass over t.
    nb, nc, nt = x.shape
    nn = decay.shape[2]
    y = np.empty_like(x)
    h = np.empty(nn, dtype=x.dtype)
    for b in range(nb):
        for c in range(nc):
            h[:] = 0.0
            dc = D[c]
            for t in range(nt):
                xt = x[b, c, t]
                u = delta[b, c, t] * xt
                acc = dc * xt
                for n in range(nn):
                    hn = decay[b, c, n, t] * h[n] + u * Bm[b, n, t]
                    h[n] = hn
                    hs[b, c, n, t] = hn
                    acc += Cm[b, n, t] * hn
                y[b, c, t] = acc
    return y


@numba.njit(cache=True)
def _scan_backward(gy, x, delta, A, Bm, Cm, D, decay, hs):
    nb, nc, nt = x.shape
    nn = A.shape[1]
    gx = np.empty_like(x)
    gdelta = np.empty_like(x)
    gA = np.zeros((nc, nn))
    gB = np.zeros(Bm.shape)
    gC = np.zeros(Cm.shape)
    gD = np.zeros(nc)
    g = np.zeros(nn)  # dL/dh carried backwards through time
    ga_acc = np.zeros(nn)
    for b in range(nb):
        for c in range(nc):
            g[:] = 0.0
            ga_acc[:] = 0.0
            gd_acc = 0.0
            dc = D[c]
            for t in range(nt - 1, -1, -1):
                gyt = gy[b, c, t]
                dt = delta[b, c, t]
                xt = x[b, c, t]
                gxt = gyt * dc
                gd_acc += gyt * xt
                gdt = 0.0
                for n in range(nn):
                    bn = Bm[b, n, t]
                    gh = g[n] + gyt * Cm[b, n, t]
                    gC[b, n, t] += gyt * hs[b, c, n, t]
                    hprev = hs[b, c, n, t - 1] if t > 0 else 0.0
                    a = decay[b, c, n, t]
                    ga = gh * hprev * a
                    gdt += ga * A[c, n] + gh * bn * xt
                    ga_acc[n] += ga * dt
                    gB[b, n, t] += gh * dt * xt
                    gxt += gh * dt * bn
                    g[n] = gh * a
                gdelta[b, c, t] = gdt
                gx[b, c, t] = gxt
            for n in range(nn):
                gA[c, n] += ga_acc[n]
            gD[c] += gd_acc
    return gx, gdelta, gA, gB, gC, gD


def scan_core(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Run the recurrence for explicit gates.

    Shapes: ``x, delta`` are (batch, channels, T); ``A`` is (channels, N);
    ``B, C`` are (batch, N, T); ``D`` is (channels,).  All inputs are
    differentiable.
    """
    if x.ndim != 3:
        raise DimensionError(f"scan_core: x must be (batch, channels, length), got {x.shape}")
    nb, nc, nt = x.shape
    nn = A.shape[1] if A.ndim == 2 else -1
    if nt < 1:
        raise ContractError("scan_core: empty sequence")
    if delta.shape != x.shape or A.shape != (nc, nn) or D.shape != (nc,):
        raise DimensionError("scan_core: delta/A/D do not match x")
    if B.shape != (nb, nn, nt) or C.shape != (nb, nn, nt):
        raise DimensionError(f"scan_core: B and C must be {(nb, nn, nt)}, got {B.shape} and {C.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ContractError("scan_core: non-finite values in x")
    dtype = x.data.dtype
    xd, dd, Ad, Bd, Cd, Dd = (np.ascontiguousarray(t.data, dtype=dtype) for t in (x, delta, A, B, C, D))
    # Vectorised exp over a (B, C, N, T) layout: time innermost keeps numpy's loops long.
    decay = np.multiply(dd[:, :, None, :], Ad[None, :, :, None])
    np.exp(decay, out=decay)
    hs = np.empty((nb, nc, nn, nt), dtype=dtype)
    y = _scan_forward(xd, dd, Bd, Cd, Dd, decay, hs)

    def grad(gy):
        gx, gdelta, gA, gB, gC, gD = _scan_backward(
            np.ascontiguousarray(gy, dtype=dtype), xd, dd, Ad, Bd, Cd, Dd, decay, hs
        )
        return gx, gdelta, gA.astype(dtype), gB.astype(dtype), gC.astype(dtype), gD.astype(dtype)

    return Tensor.from_op(y, (x, delta, A, B, C, D), grad)


def _neg_exp(a_log: Tensor) -> Tensor:
    a = -np.exp(a_log.data)
    return Tensor.from_op(a, (a_log,), lambda g: (g * a,))


class SsmParams(Module):
    """Per-channel selective SSM parameters.

    ``A_log`` (C, N) holds ``log(-A)``; ``dt_weight``/``dt_bias`` give the
    step size ``softplus(dt_weight @ x_t + dt_bias)``; ``B_weight`` and
    ``C_weight`` (N, C) project the channel vector to the input and readout
    vectors.
    """

    def __init__(self, channels: int, state_dim: int = 8, rng: np.random.Generator | None = None,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.state_dim = state_dim
        self.A_log = Param(np.log(np.tile(np.arange(1, state_dim + 1, dtype=float), (channels, 1))))
        self.D = Param(np.ones(channels))
        bound = 1.0 / np.sqrt(channels)
        self.dt_weight = Param(rng.uniform(-bound, bound, (channels, channels)) * 0.1)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), channels))
        self.dt_bias = Param(dt + np.log(-np.expm1(-dt)))  # inverse softplus
        self.B_weight = Param(rng.uniform(-bound, bound, (state_dim, channels)))
        self.C_weight = Param(rng.uniform(-bound, bound, (state_dim, channels)))

    @classmethod
    def pure_skip(cls, channels: int, state_dim: int = 8) -> "SsmParams":
        """D = 1 with zero input/readout projections: the scan is the identity."""
        p = cls(channels, state_dim)
        p.B_weight.data[:] = 0.0
        p.C_weight.data[:] = 0.0
        return p

    def gates(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-dependent ``delta`` (B, C, T), ``B`` and ``C`` (B, N, T)."""
        nb, nc, nt = x.shape
        x4 = T.reshape(x, (nb, nc, nt, 1))
        delta = T.softplus(T.conv1x1(x4, self.dt_weight, self.dt_bias))
        bm = T.conv1x1(x4, self.B_weight)
        cm = T.conv1x1(x4, self.C_weight)
        n = self.state_dim
        return (T.reshape(delta, (nb, nc, nt)), T.reshape(bm, (nb, n, nt)), T.reshape(cm, (nb, n, nt)))

    def A(self) -> Tensor:
        return _neg_exp(self.A_log)


def selective_scan(x: Tensor, params: SsmParams) -> Tensor:
    """Apply the selective scan to a (batch, channels, T) sequence."""
    if x.ndim != 3 or x.shape[1] != params.channels:
        raise DimensionError(f"selective_scan: expected (batch, {params.channels}, T), got {x.shape}")
    delta, bm, cm = params.gates(x)
    return scan_core(x, delta, params.A(), bm, cm, params.D)


def directional_scan(x: Tensor, order: ScanOrder, params: SsmParams) -> Tensor:
    """Scan a (B, C, H, W) map along ``order`` and scatter the result back to the grid."""
    return scatter(selective_scan(gather(x, order), params), order)
