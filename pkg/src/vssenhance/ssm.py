"""State-space sequence primitives.

Continuous (A, B, C, D) systems, zero-order-hold discretization, the
input-dependent (selective) parameterization, and three interchangeable ways
of evaluating the discrete recurrence

    h_t = A_bar * h_{t-1} + B_bar * x_t,      y_t = C h_t + D x_t

with h_0 = 0: an exact left-to-right loop, a work-efficient parallel prefix
scan over the associative composition (a1,b1)∘(a2,b2) = (a2·a1, a2·b1 + b2),
and (for time-invariant systems) a causal convolution with the kernel
(C B_bar, C A_bar B_bar, C A_bar^2 B_bar, ...).

State matrices are stored diagonally by default; dense d×d storage is
supported for discretization only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .layers import Module
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    _node,
    _wrap,
    matmul,
    softplus,
)

__all__ = [
    "DomainError",
    "SSMParams",
    "DiscreteSSM",
    "SelectiveParams",
    "SelectiveHead",
    "random_ssm",
    "stable_diagonal_init",
    "discretize_zoh",
    "scan_sequential",
    "scan_parallel",
    "scan_convolutional",
    "causal_convolve",
    "lti_kernel",
    "selective_parameterize",
    "linear_recurrence",
    "sequential_recurrence_data",
    "parallel_recurrence_data",
]

# |delta * a| below this uses the series limit B_bar -> delta * B
_ZOH_SERIES_THRESHOLD = 1e-8


class DomainError(ValueError):
    """A numeric argument is outside its mathematical domain."""


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class SSMParams:
    """Continuous-time system. ``a`` is the state matrix: a length-d vector in
    diagonal mode, a (d, d) matrix in dense mode."""

    a: Tensor
    b: Tensor  # (d, 1)
    c: Tensor  # (1, d)
    d: float
    state_dim: int
    diagonal: bool = True

    def __post_init__(self):
        if self.state_dim < 1:
            raise DimensionError("state dimension must be >= 1")
        expect = (self.state_dim,) if self.diagonal else (self.state_dim, self.state_dim)
        if self.a.shape != expect:
            raise DimensionError(f"state matrix shape {self.a.shape}, expected {expect}")
        if self.b.shape != (self.state_dim, 1):
            raise DimensionError(f"input matrix must be ({self.state_dim}, 1)")
        if self.c.shape != (1, self.state_dim):
            raise DimensionError(f"output matrix must be (1, {self.state_dim})")


@dataclass
class DiscreteSSM:
    """Zero-order-hold discretization of an :class:`SSMParams` at timescale delta."""

    a_bar: Tensor
    b_bar: Tensor  # (d, 1)
    c: Tensor  # (1, d)
    d: float
    delta: float
    state_dim: int
    diagonal: bool = True


@dataclass
class SelectiveParams:
    """Per-timestep scan parameters produced from the input sequence.

    ``b_t`` and ``c_t`` are (L, d); ``delta_t`` is (L,) and strictly positive.
    The time-invariant base (diagonal state matrix and skip coefficient) rides
    along so a scan over these parameters is self-contained.
    """

    b_t: Tensor
    c_t: Tensor
    delta_t: Tensor
    a_diag: Tensor  # (d,)
    d: float
    head: "SelectiveHead | None" = None

    @property
    def length(self) -> int:
        return self.delta_t.shape[0]

    @property
    def state_dim(self) -> int:
        return self.b_t.shape[1]


@dataclass
class SelectiveHead(Module):
    """Projection weights that map input features to (B_t, C_t, delta_t)."""

    w_b: Tensor  # (C_feat, d)
    w_c: Tensor  # (C_feat, d)
    w_delta: Tensor  # (C_feat, 1)
    b_delta: Tensor  # (1,)

    @staticmethod
    def init(feat_dim: int, state_dim: int, rng: np.random.Generator,
             delta_floor: float = 0.01) -> "SelectiveHead":
        scale = 1.0 / np.sqrt(feat_dim)
        bias = float(np.log(np.expm1(delta_floor)))  # softplus(bias) == delta_floor
        return SelectiveHead(
            w_b=Tensor(rng.normal(0.0, scale, size=(feat_dim, state_dim)), requires_grad=True),
            w_c=Tensor(rng.normal(0.0, scale, size=(feat_dim, state_dim)), requires_grad=True),
            w_delta=Tensor(rng.normal(0.0, scale, size=(feat_dim, 1)), requires_grad=True),
            b_delta=Tensor(np.array([bias]), requires_grad=True),
        )


def stable_diagonal_init(state_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Negative diagonal entries a_i = -exp(u), u ~ U[log 0.5, log 8]."""
    u = rng.uniform(np.log(0.5), np.log(8.0), size=state_dim)
    return -np.exp(u)


def random_ssm(state_dim: int, rng: np.random.Generator) -> SSMParams:
    """A random stable diagonal system, the stock test/benchmark generator."""
    return SSMParams(
        a=Tensor(stable_diagonal_init(state_dim, rng)),
        b=Tensor(rng.normal(size=(state_dim, 1))),
        c=Tensor(rng.normal(size=(1, state_dim))),
        d=float(rng.normal()),
        state_dim=state_dim,
    )


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------


def _zoh_input_scale(a: np.ndarray, delta: float) -> np.ndarray:
    """(exp(delta*a) - 1) / a per entry, with the delta limit near a == 0."""
    da = delta * a
    out = np.full_like(a, delta)
    big = np.abs(da) >= _ZOH_SERIES_THRESHOLD
    out[big] = np.expm1(da[big]) / a[big]
    return out


def discretize_zoh(params: SSMParams, delta: float, b_mode: str = "exact") -> DiscreteSSM:
    """Zero-order-hold discretization: A_bar = exp(delta·A).

    ``b_mode="exact"`` evaluates B_bar = A^{-1}(exp(delta·A) − I)·B (the
    closed-form integral of the hold); ``b_mode="approx"`` selects the
    first-order shortcut B_bar = delta·B.  In dense mode the integral is
    computed through a block matrix exponential, which stays exact even for
    singular A, so no fallback path is ever needed.
    """
    if delta <= 0:
        raise DomainError(f"timescale must be positive, got {delta}")
    if b_mode not in ("exact", "approx"):
        raise ValueError(f"unknown b_mode {b_mode!r}")
    a = params.a.data
    b = params.b.data
    if params.diagonal:
        a_bar = np.exp(delta * a)
        if b_mode == "exact":
            b_bar = _zoh_input_scale(a, delta)[:, None] * b
        else:
            b_bar = delta * b
    else:
        a_bar = expm(delta * a)
        if b_mode == "exact":
            # exp of [[A, B], [0, 0]]·delta has the hold integral in its
            # upper-right block; exact for singular A as well.
            d = params.state_dim
            block = np.zeros((d + 1, d + 1))
            block[:d, :d] = a
            block[:d, d:] = b
            b_bar = expm(delta * block)[:d, d:]
        else:
            b_bar = delta * b
    return DiscreteSSM(
        a_bar=Tensor(a_bar),
        b_bar=Tensor(b_bar),
        c=params.c,
        d=params.d,
        delta=float(delta),
        state_dim=params.state_dim,
        diagonal=params.diagonal,
    )


# ---------------------------------------------------------------------------
# recurrence kernels (data-level, no autodiff)
# ---------------------------------------------------------------------------


def sequential_recurrence_data(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Exact left-to-right evaluation of h_t = a_t * h_{t-1} + u_t on (L, n)."""
    L, n = a.shape
    out = np.empty((L, n))
    h = np.zeros(n)
    for t in range(L):
        h = a[t] * h + u[t]
        out[t] = h
    return out


def parallel_recurrence_data(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Work-efficient (up-sweep/down-sweep) prefix scan over (L, n) lanes.

    Pads to the next power of two with the monoid identity (1, 0), reduces
    pairwise to the root, then walks back down distributing exclusive
    prefixes; the final inclusive value is prefix ∘ element.
    """
    L, n = a.shape
    if L == 0:
        return np.empty((0, n))
    P = 1 << (L - 1).bit_length() if L > 1 else 1
    A = np.ones((P, n))
    U = np.zeros((P, n))
    A[:L] = a
    U[:L] = u

    levels = []
    Ak, Uk = A, U
    while Ak.shape[0] > 1:
        levels.append((Ak, Uk))
        Ae, Ue = Ak[0::2], Uk[0::2]
        Ao, Uo = Ak[1::2], Uk[1::2]
        Ak = Ao * Ae
        Uk = Ao * Ue + Uo

    pa = np.ones((1, n))
    pu = np.zeros((1, n))
    for Ak, Uk in reversed(levels):
        m = Ak.shape[0]
        Ae, Ue = Ak[0::2], Uk[0::2]
        npa = np.empty((m, n))
        npu = np.empty((m, n))
        npa[0::2] = pa
        npu[0::2] = pu
        npa[1::2] = pa * Ae
        npu[1::2] = Ae * pu + Ue
        pa, pu = npa, npu

    return (A * pu + U)[:L]


_RECURRENCE_KERNELS = {
    "sequential": sequential_recurrence_data,
    "parallel": parallel_recurrence_data,
}

# wide lane counts favor the python-level time loop over the log-depth sweep's
# extra memory traffic; the choice depends only on shape, so it is deterministic
_AUTO_PARALLEL_MAX_LANES = 64


def linear_recurrence(a: Tensor, u: Tensor, mode: str = "parallel") -> Tensor:
    """Differentiable h_t = a_t ⊙ h_{t-1} + u_t over (L, n) lanes, h_0 = 0.

    ``mode`` picks the evaluation kernel ("sequential", "parallel", or "auto"
    to choose by shape).  The backward pass is the adjoint recurrence
    s_t = g_t + a_{t+1} ⊙ s_{t+1} run through the same kernel on
    time-reversed arrays, with du = s and da_t = s_t ⊙ h_{t-1}.
    """
    a, u = _wrap(a), _wrap(u)
    if a.shape != u.shape or a.data.ndim != 2:
        raise DimensionError("linear_recurrence expects matching (L, n) operands")
    if mode == "auto":
        mode = "parallel" if a.shape[1] <= _AUTO_PARALLEL_MAX_LANES else "sequential"
    kernel = _RECURRENCE_KERNELS[mode]
    h = kernel(a.data, u.data)

    def grad_fn(g):
        L, n = a.data.shape
        a_next = np.vstack([a.data[1:], np.ones((1, n))]) if L else a.data
        s = kernel(a_next[::-1].copy(), g[::-1].copy())[::-1]
        h_prev = np.vstack([np.zeros((1, n)), h[:-1]]) if L else h
        return np.ascontiguousarray(s * h_prev), np.ascontiguousarray(s)

    return _node(h, (a, u), grad_fn)


# ---------------------------------------------------------------------------
# public scan operations (SISO view: scalar input/output per timestep)
# ---------------------------------------------------------------------------


def _check_signal(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 1:
        raise DimensionError("scan input must be a rank-1 sequence")
    return x


def _per_step_terms(ssm: DiscreteSSM | SelectiveParams, x: Tensor):
    """Per-step (a_t, u_t) lanes plus the output contraction pieces."""
    L = x.shape[0]
    if isinstance(ssm, SelectiveParams):
        if ssm.length != L:
            raise DimensionError(
                f"selective parameters cover {ssm.length} steps, input has {L}"
            )
        d = ssm.state_dim
        delta = ssm.delta_t.reshape(L, 1)
        a = ssm.a_diag.reshape(1, d)
        a_bar = (delta * a).exp()
        # exact per-step hold integral; a_diag is strictly negative by
        # construction so the series guard never bites here
        b_scale = (a_bar - 1.0) / a
        u = b_scale * ssm.b_t * x.reshape(L, 1)
        return a_bar, u, ssm.c_t, ssm.d
    if not ssm.diagonal:
        raise ContractError("scans operate on diagonal-mode systems")
    d = ssm.state_dim
    ones = np.ones((L, 1))
    a_bar = ssm.a_bar.reshape(1, d) * Tensor(ones)
    u = x.reshape(L, 1) * ssm.b_bar.reshape(1, d)
    c_t = ssm.c.reshape(1, d) * Tensor(ones)
    return a_bar, u, c_t, ssm.d


def _scan(ssm, x, mode: str) -> Tensor:
    x = _check_signal(x)
    if x.shape[0] == 0:
        return Tensor(np.empty(0))
    a_bar, u, c_t, skip = _per_step_terms(ssm, x)
    h = linear_recurrence(a_bar, u, mode=mode)
    return (c_t * h).sum(axis=1) + x * float(skip)


def scan_sequential(ssm: DiscreteSSM | SelectiveParams, x: Tensor) -> Tensor:
    """Exact left-to-right recurrence from a zero initial state."""
    return _scan(ssm, x, "sequential")


def scan_parallel(ssm: DiscreteSSM | SelectiveParams, x: Tensor) -> Tensor:
    """Parallel prefix-scan evaluation; output matches the sequential scan."""
    return _scan(ssm, x, "parallel")


def causal_convolve(x: Tensor, kernel: Tensor) -> Tensor:
    """y_t = sum_{j<=t} kernel_j * x_{t-j} for two length-L sequences."""
    x, kernel = _wrap(x), _wrap(kernel)
    L = x.shape[0]
    if kernel.shape != (L,):
        raise DimensionError("kernel length must match the sequence length")
    data = np.convolve(x.data, kernel.data, mode="full")[:L]

    def grad_fn(g):
        gx = np.correlate(g, kernel.data, mode="full")[L - 1 :]
        gk = np.correlate(g, x.data, mode="full")[L - 1 :]
        return np.ascontiguousarray(gx), np.ascontiguousarray(gk)

    return _node(data, (x, kernel), grad_fn)


def geometric_powers(a: Tensor, L: int) -> Tensor:
    """Stack (a^0, a^1, ..., a^{L-1}) for a rank-1 ``a``, shape (L, d)."""
    a = _wrap(a)
    d = a.shape[0]
    data = np.ones((L, d))
    if L > 1:
        data[1:] = np.cumprod(np.broadcast_to(a.data, (L - 1, d)), axis=0)

    def grad_fn(g):
        # d(a^j)/da = j * a^{j-1}, which is j * data[j-1]
        if L <= 1:
            return (np.zeros(d),)
        j = np.arange(1, L, dtype=np.float64)[:, None]
        return ((g[1:] * j * data[:-1]).sum(axis=0),)

    return _node(data, (a,), grad_fn)


def lti_kernel(ssm: DiscreteSSM, L: int) -> Tensor:
    """Convolution kernel K_j = C A_bar^j B_bar for j = 0..L-1 (diagonal mode)."""
    d = ssm.state_dim
    powers = geometric_powers(ssm.a_bar, L)
    weights = ssm.c.reshape(d, 1) * ssm.b_bar.reshape(d, 1)
    return matmul(powers, weights).reshape(L)


def scan_convolutional(ssm: DiscreteSSM, x: Tensor) -> Tensor:
    """Causal convolution with K = (C B_bar, C A_bar B_bar, ...), LTI only."""
    if isinstance(ssm, SelectiveParams):
        raise ContractError("convolutional scan is LTI only")
    if not ssm.diagonal:
        raise ContractError("scans operate on diagonal-mode systems")
    x = _check_signal(x)
    L = x.shape[0]
    if L == 0:
        return Tensor(np.empty(0))
    return causal_convolve(x, lti_kernel(ssm, L)) + x * float(ssm.d)


# ---------------------------------------------------------------------------
# selective parameterization
# ---------------------------------------------------------------------------


def selective_parameterize(
    x: Tensor, head: SelectiveHead, a_diag: Tensor, d: float
) -> SelectiveParams:
    """Input-dependent B_t, C_t and delta_t = softplus(proj(x_t) + bias).

    ``x`` is the (L, C_feat) feature sequence driving the parameters; the
    softplus keeps every timescale strictly positive while letting gradients
    reach all projection weights.
    """
    x = _wrap(x)
    if x.data.ndim != 2:
        raise DimensionError("selective_parameterize expects (L, C_feat) features")
    b_t = matmul(x, head.w_b)
    c_t = matmul(x, head.w_c)
    delta_t = softplus(matmul(x, head.w_delta) + head.b_delta).reshape(x.shape[0])
    return SelectiveParams(b_t=b_t, c_t=c_t, delta_t=delta_t, a_diag=_wrap(a_diag), d=float(d), head=head)
