"""Delay-gated recurrent cells.

The main cell keeps a hidden state h and, besides the usual gated update, feeds a
*delayed* copy of the state back through its own candidate path. With delay m and
step index n (zero-based), one step reads h_n and h_{n-m} and produces

    u_n   = tanh(W1 h_n + U1 x_n + b1)          instantaneous candidate
    z_n   = tanh(W2 h_{n-m} + U2 x_n + b2)      delayed candidate
    g_n   = sigmoid(W3 h_n + U3 x_n + b3)       update gate
    a_n   = sigmoid(W4 h_n + U4 x_n + b4)       delay weighting
    h_{n+1} = (1 - g_n) * h_n + g_n * (beta * u_n + alpha * a_n * z_n)
    y_n   = V h_{n+1} + c

alpha, beta and the use_weighting_a flag carve ablations out of the same update:
alpha=1, beta=1, weighting on is the full cell; alpha=0 removes the delay path
entirely; beta=0 leaves only the delayed candidate; weighting off pins a_n to 1.
States at indices <= 0 are the zero initial function, so the first m steps read
zeros through the delay slot. All state components stay in (-2, 2) regardless of
parameters because both candidates are tanh-bounded and the update is a convex
mix (the weighted candidate sum has magnitude below 2).

A plainer gated baseline and a linear delayed cell used by the gradient oracle
live here too, sharing the history machinery.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .numerics import matvec, sigmoid_vec, tanh_vec
from .rng import SplitMix64

# Canonical parameter ordering used by init draws, serialization, and the
# flattened views the optimizer walks. Do not reorder.
PARAM_FIELDS = (
    "W1", "W2", "W3", "W4",
    "U1", "U2", "U3", "U4",
    "b1", "b2", "b3", "b4",
    "V", "c",
)

PARAMS_MAGIC = 0x54475255
PARAMS_VERSION = 1


class CellKind(Enum):
    TAU_GRU = "taugru"
    SIMPLE_DELAY_GRU = "simple_delay_gru"
    LINEAR_DELAYED = "linear_delayed"


_KIND_CODES = {
    CellKind.TAU_GRU: 0,
    CellKind.SIMPLE_DELAY_GRU: 1,
    CellKind.LINEAR_DELAYED: 2,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class CellVariant:
    """Which member of the cell family to run, and with what ablation knobs.

    delay_m is the delay in steps (the step size is 1, so a physical delay tau
    maps to m = tau). delay_m = 0 is legal: the delay slot then reads the
    current state h_n.
    """

    kind: CellKind = CellKind.TAU_GRU
    alpha: float = 1.0
    beta: float = 1.0
    use_weighting_a: bool = True
    delay_m: int = 1

    def __post_init__(self):
        if not isinstance(self.kind, CellKind):
            raise ValueError(f"kind must be a CellKind, got {self.kind!r}")
        self.delay_m = int(self.delay_m)
        if self.delay_m < 0:
            raise ValueError(f"delay_m must be >= 0, got {self.delay_m}")
        self.alpha = float(self.alpha)
        self.beta = float(self.beta)
        for name, val in (("alpha", self.alpha), ("beta", self.beta)):
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")


def _as_param(name: str, arr, shape) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    return out


@dataclass
class CellParams:
    """Full parameter set; ablated variants simply leave some groups unused."""

    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W4: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray
    U4: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    b4: np.ndarray
    V: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.W1).shape[0] if np.asarray(self.W1).ndim == 2 else 0
        p = np.asarray(self.U1).shape[1] if np.asarray(self.U1).ndim == 2 else 0
        q = np.asarray(self.V).shape[0] if np.asarray(self.V).ndim == 2 else 0
        for name in ("W1", "W2", "W3", "W4"):
            setattr(self, name, _as_param(name, getattr(self, name), (d, d)))
        for name in ("U1", "U2", "U3", "U4"):
            setattr(self, name, _as_param(name, getattr(self, name), (d, p)))
        for name in ("b1", "b2", "b3", "b4"):
            setattr(self, name, _as_param(name, getattr(self, name), (d,)))
        self.V = _as_param("V", self.V, (q, d))
        self.c = _as_param("c", self.c, (q,))

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def p(self) -> int:
        return self.U1.shape[1]

    @property
    def q(self) -> int:
        return self.V.shape[0]

    def param_count(self) -> int:
        """Total scalar parameters: 4d^2 + 4dp + 4d + qd + q."""
        d, p, q = self.d, self.p, self.q
        return 4 * d * d + 4 * d * p + 4 * d + q * d + q

    def arrays(self):
        """(name, array) pairs in canonical order."""
        return [(name, getattr(self, name)) for name in PARAM_FIELDS]

    def copy(self) -> "CellParams":
        return CellParams(**{name: getattr(self, name).copy() for name in PARAM_FIELDS})


def param_shapes(d: int, p: int, q: int) -> dict[str, tuple]:
    """Canonical name -> shape table for the given sizes, in PARAM_FIELDS order."""
    shapes: dict[str, tuple] = {}
    for name in PARAM_FIELDS:
        if name.startswith("W"):
            shapes[name] = (d, d)
        elif name.startswith("U"):
            shapes[name] = (d, p)
        elif name.startswith("b"):
            shapes[name] = (d,)
        elif name == "V":
            shapes[name] = (q, d)
        else:
            shapes[name] = (q,)
    return shapes


def dead_param_groups(variant: CellVariant) -> set[str]:
    """Names of parameter arrays that cannot influence the output of `variant`.

    The gradient of the loss with respect to every array named here is exactly
    zero, and reported effective parameter counts exclude them.
    """
    dead: set[str] = set()
    if variant.kind == CellKind.SIMPLE_DELAY_GRU:
        # candidate fuses W1 h_n + W2 h_{n-m} + U1 x_n + b1; gate keeps W3/U3/b3
        dead |= {"W4", "U4", "b4", "U2", "b2"}
        return dead
    if variant.kind != CellKind.TAU_GRU:
        raise ValueError(f"no parameter-group map for {variant.kind}")
    if variant.alpha == 0.0:
        # the whole delay product a*z drops out, taking the weighting gate with it
        dead |= {"W2", "U2", "b2", "W4", "U4", "b4"}
    if variant.beta == 0.0:
        dead |= {"W1", "U1", "b1"}
    if not variant.use_weighting_a:
        dead |= {"W4", "U4", "b4"}
    return dead


def effective_param_count(params: CellParams, variant: CellVariant) -> int:
    """param_count() minus the arrays `variant` leaves dead."""
    dead = dead_param_groups(variant)
    return sum(arr.size for name, arr in params.arrays() if name not in dead)


def init_params(d: int, p: int, q: int, seed: int) -> CellParams:
    """Deterministic uniform init.

    Entries are drawn from SplitMix64(seed) in canonical field order, row-major
    within each array: recurrent matrices and the readout V from
    [-1/sqrt(d), 1/sqrt(d)], input matrices from [-1/sqrt(p), 1/sqrt(p)]
    (fan-in scaling), and every bias starts at zero.
    """
    if d <= 0 or p <= 0 or q <= 0:
        raise ValueError(f"d, p, q must be positive, got ({d}, {p}, {q})")
    rng = SplitMix64(seed)
    w_lim = 1.0 / np.sqrt(d)
    u_lim = 1.0 / np.sqrt(p)
    out = {}
    for name in PARAM_FIELDS:
        if name.startswith("W"):
            arr = np.empty((d, d))
            rng.fill(arr, -w_lim, w_lim)
        elif name.startswith("U"):
            arr = np.empty((d, p))
            rng.fill(arr, -u_lim, u_lim)
        elif name.startswith("b"):
            arr = np.zeros(d)
        elif name == "V":
            arr = np.empty((q, d))
            rng.fill(arr, -w_lim, w_lim)
        else:  # c
            arr = np.zeros(q)
        out[name] = arr
    return CellParams(**out)


class HiddenHistory:
    """Ring buffer over the last delay_m + 1 hidden states.

    Construction represents the zero initial function: lookups that reach at or
    before step 0 return zeros (h_0 itself is zero unless an explicit initial
    state is supplied). lookup(j) returns h_{n-j} where n is the index of the
    newest stored state.
    """

    def __init__(self, delay_m: int, state_shape, initial_state=None):
        delay_m = int(delay_m)
        if delay_m < 0:
            raise ValueError(f"delay_m must be >= 0, got {delay_m}")
        if np.isscalar(state_shape):
            state_shape = (int(state_shape),)
        self.delay_m = delay_m
        self.ring = np.zeros((delay_m + 1,) + tuple(state_shape))
        self.step_count = 1  # h_0 is present from construction
        self.write_index = 1 % (delay_m + 1)
        if initial_state is not None:
            self.ring[0] = initial_state

    def push(self, h: np.ndarray) -> None:
        self.ring[self.write_index] = h
        self.write_index = (self.write_index + 1) % self.ring.shape[0]
        self.step_count += 1

    def lookup(self, j: int) -> np.ndarray:
        """State j steps back; zeros once the index reaches before step 0."""
        if not 0 <= j <= self.delay_m:
            raise ValueError(f"lookup depth {j} outside [0, {self.delay_m}]")
        idx = self.step_count - 1 - j
        if idx < 0:
            return np.zeros_like(self.ring[0])
        return self.ring[idx % self.ring.shape[0]].copy()


@dataclass
class StepActivations:
    """Everything one step computed, as recorded on the tape.

    For the simple delayed baseline the fused candidate lives in (pre_u, u_n)
    and the z/a slots are None; a_n is None as well when the weighting gate is
    disabled (it is identically 1 then).
    """

    x_n: np.ndarray
    h_in: np.ndarray
    h_delay: np.ndarray
    pre_u: np.ndarray
    u_n: np.ndarray
    pre_z: np.ndarray | None
    z_n: np.ndarray | None
    pre_g: np.ndarray
    g_n: np.ndarray
    pre_a: np.ndarray | None
    a_n: np.ndarray | None
    h_out: np.ndarray


class BpttTape:
    """Stacked per-step records from one forward run.

    Arrays are time-major with a trailing batch axis: xs is (T, p, B), states is
    (T+1, d, B) with states[0] = h_0, and each activation array is (T, d, B).
    step(i) assembles the StepActivations view for one step. z/a arrays are
    None exactly when the variant never computes them.
    """

    def __init__(self, variant, xs, states, pre_u, u, pre_z, z, pre_g, g, pre_a, a):
        self.variant = variant
        self.xs = xs
        self.states = states
        self.pre_u = pre_u
        self.u = u
        self.pre_z = pre_z
        self.z = z
        self.pre_g = pre_g
        self.g = g
        self.pre_a = pre_a
        self.a = a

    @property
    def T(self) -> int:
        return self.xs.shape[0]

    @property
    def batch(self) -> int:
        return self.xs.shape[2]

    def h_delay_at(self, n: int) -> np.ndarray:
        """The delayed state step n read: states[n - m], zeros before step 0."""
        idx = n - self.variant.delay_m
        if idx < 0:
            return np.zeros_like(self.states[0])
        return self.states[idx]

    def step(self, n: int) -> StepActivations:
        if not 0 <= n < self.T:
            raise ValueError(f"step index {n} outside [0, {self.T})")
        return StepActivations(
            x_n=self.xs[n],
            h_in=self.states[n],
            h_delay=self.h_delay_at(n),
            pre_u=self.pre_u[n],
            u_n=self.u[n],
            pre_z=None if self.pre_z is None else self.pre_z[n],
            z_n=None if self.z is None else self.z[n],
            pre_g=self.pre_g[n],
            g_n=self.g[n],
            pre_a=None if self.pre_a is None else self.pre_a[n],
            a_n=None if self.a is None else self.a[n],
            h_out=self.states[n + 1],
        )


def _check_x(params: CellParams, x_n: np.ndarray) -> np.ndarray:
    x_n = np.asarray(x_n, dtype=np.float64)
    if x_n.shape != (params.p,):
        raise ValueError(f"x_n must have shape ({params.p},), got {x_n.shape}")
    return x_n


def step_taugru(params: CellParams, variant: CellVariant, x_n: np.ndarray,
                hist: HiddenHistory) -> StepActivations:
    """Advance the delay-gated cell one step; pushes h_out into hist."""
    if variant.kind != CellKind.TAU_GRU:
        raise ValueError(f"step_taugru called with variant kind {variant.kind}")
    x_n = _check_x(params, x_n)
    h_in = hist.lookup(0)
    h_delay = hist.lookup(variant.delay_m)
    pre_u = matvec(params.W1, h_in) + matvec(params.U1, x_n) + params.b1
    u_n = tanh_vec(pre_u)
    pre_z = matvec(params.W2, h_delay) + matvec(params.U2, x_n) + params.b2
    z_n = tanh_vec(pre_z)
    pre_g = matvec(params.W3, h_in) + matvec(params.U3, x_n) + params.b3
    g_n = sigmoid_vec(pre_g)
    if variant.use_weighting_a:
        pre_a = matvec(params.W4, h_in) + matvec(params.U4, x_n) + params.b4
        a_n = sigmoid_vec(pre_a)
        weighted = a_n * z_n
    else:
        pre_a = None
        a_n = None
        weighted = z_n
    cand = variant.beta * u_n + variant.alpha * weighted
    h_out = (1.0 - g_n) * h_in + g_n * cand
    hist.push(h_out)
    return StepActivations(x_n, h_in, h_delay, pre_u, u_n, pre_z, z_n,
                           pre_g, g_n, pre_a, a_n, h_out)


def step_simple_delay_gru(params: CellParams, variant: CellVariant, x_n: np.ndarray,
                          hist: HiddenHistory) -> StepActivations:
    """One step of the plain gated baseline: the candidate fuses both states."""
    if variant.kind != CellKind.SIMPLE_DELAY_GRU:
        raise ValueError(f"step_simple_delay_gru called with kind {variant.kind}")
    x_n = _check_x(params, x_n)
    h_in = hist.lookup(0)
    h_delay = hist.lookup(variant.delay_m)
    pre_c = (matvec(params.W1, h_in) + matvec(params.W2, h_delay)
             + matvec(params.U1, x_n) + params.b1)
    cand = tanh_vec(pre_c)
    pre_g = matvec(params.W3, h_in) + matvec(params.U3, x_n) + params.b3
    g_n = sigmoid_vec(pre_g)
    h_out = (1.0 - g_n) * h_in + g_n * cand
    hist.push(h_out)
    return StepActivations(x_n, h_in, h_delay, pre_c, cand, None, None,
                           pre_g, g_n, None, None, h_out)


def step_linear(A: np.ndarray, B: np.ndarray, C: np.ndarray, u_n: np.ndarray,
                hist: HiddenHistory) -> np.ndarray:
    """One step of the linear delayed cell h_{n+1} = A h_n + B h_{n-m} + C u_n."""
    h_in = hist.lookup(0)
    h_delay = hist.lookup(hist.delay_m)
    h_out = matvec(A, h_in) + matvec(B, h_delay) + matvec(C, np.asarray(u_n, dtype=np.float64))
    hist.push(h_out)
    return h_out


def run_batch(params: CellParams, variant: CellVariant, xs: np.ndarray,
              h0: np.ndarray | None = None):
    """Run a batch of sequences through the cell.

    xs has shape (T, p, B). Returns (states, ys, tape) with states (T+1, d, B)
    including h_0 and ys (T, q, B). The loop is written against (d, B) slabs so
    one pass serves any batch size; per-component arithmetic is independent of B.
    """
    xs = np.ascontiguousarray(np.asarray(xs, dtype=np.float64))
    if xs.ndim != 3 or xs.shape[1] != params.p:
        raise ValueError(f"xs must have shape (T, {params.p}, B), got {xs.shape}")
    T, p, B = xs.shape
    d = params.d
    m = variant.delay_m

    states = np.zeros((T + 1, d, B))
    if h0 is not None:
        if h0.shape != (d, B):
            raise ValueError(f"h0 must have shape ({d}, {B}), got {h0.shape}")
        states[0] = h0
    zeros_state = np.zeros((d, B))

    # fold U x_n + b into per-step slabs up front; one big matmul instead of T small ones
    xs2d = np.ascontiguousarray(xs.transpose(1, 0, 2)).reshape(p, T * B)

    if variant.kind == CellKind.TAU_GRU:
        weighting = variant.use_weighting_a
        if weighting:
            w_top = np.vstack([params.W1, params.W3, params.W4])
            u_top = np.vstack([params.U1, params.U3, params.U4])
            b_top = np.concatenate([params.b1, params.b3, params.b4])
        else:
            w_top = np.vstack([params.W1, params.W3])
            u_top = np.vstack([params.U1, params.U3])
            b_top = np.concatenate([params.b1, params.b3])
        k = w_top.shape[0]
        ux_top = np.ascontiguousarray(
            (u_top @ xs2d + b_top[:, None]).reshape(k, T, B).transpose(1, 0, 2))
        ux_z = np.ascontiguousarray(
            (params.U2 @ xs2d + params.b2[:, None]).reshape(d, T, B).transpose(1, 0, 2))

        pre_top = np.empty((T, k, B))
        pre_z = np.empty((T, d, B))
        act_top = np.empty((T, k, B))
        z = np.empty((T, d, B))
        alpha, beta = variant.alpha, variant.beta
        for n in range(T):
            h = states[n]
            hd = states[n - m] if n >= m else zeros_state
            np.matmul(w_top, h, out=pre_top[n])
            pre_top[n] += ux_top[n]
            np.matmul(params.W2, hd, out=pre_z[n])
            pre_z[n] += ux_z[n]
            np.tanh(pre_top[n, :d], out=act_top[n, :d])
            act_top[n, d:] = sigmoid_vec(pre_top[n, d:])
            np.tanh(pre_z[n], out=z[n])
            u = act_top[n, :d]
            g = act_top[n, d:2 * d]
            if weighting:
                cand = beta * u + alpha * (act_top[n, 2 * d:] * z[n])
            else:
                cand = beta * u + alpha * z[n]
            states[n + 1] = h + g * (cand - h)
        tape = BpttTape(
            variant, xs, states,
            pre_u=pre_top[:, :d], u=act_top[:, :d],
            pre_z=pre_z, z=z,
            pre_g=pre_top[:, d:2 * d], g=act_top[:, d:2 * d],
            pre_a=pre_top[:, 2 * d:] if weighting else None,
            a=act_top[:, 2 * d:] if weighting else None,
        )
    elif variant.kind == CellKind.SIMPLE_DELAY_GRU:
        w_top = np.vstack([params.W1, params.W3])
        u_top = np.vstack([params.U1, params.U3])
        b_top = np.concatenate([params.b1, params.b3])
        k = 2 * d
        ux_top = np.ascontiguousarray(
            (u_top @ xs2d + b_top[:, None]).reshape(k, T, B).transpose(1, 0, 2))
        pre_top = np.empty((T, k, B))
        act_top = np.empty((T, k, B))
        for n in range(T):
            h = states[n]
            hd = states[n - m] if n >= m else zeros_state
            np.matmul(w_top, h, out=pre_top[n])
            pre_top[n] += ux_top[n]
            pre_top[n, :d] += params.W2 @ hd
            np.tanh(pre_top[n, :d], out=act_top[n, :d])
            act_top[n, d:] = sigmoid_vec(pre_top[n, d:])
            cand = act_top[n, :d]
            g = act_top[n, d:]
            states[n + 1] = h + g * (cand - h)
        tape = BpttTape(
            variant, xs, states,
            pre_u=pre_top[:, :d], u=act_top[:, :d],
            pre_z=None, z=None,
            pre_g=pre_top[:, d:], g=act_top[:, d:],
            pre_a=None, a=None,
        )
    else:
        raise ValueError(
            f"run_batch supports the gated cells; drive {variant.kind} with step_linear")

    ys = np.einsum("qd,tdb->tqb", params.V, states[1:]) + params.c[:, None]
    return states, ys, tape


def run_sequence(params: CellParams, variant: CellVariant, xs: np.ndarray,
                 h0: np.ndarray | None = None):
    """Run one sequence. xs is (T, p); returns (hs (T, d), ys (T, q), tape).

    hs[n] is h_{n+1}, the state the n-th step produced; ys[n] = V hs[n] + c.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != params.p:
        raise ValueError(f"xs must have shape (T, {params.p}), got {xs.shape}")
    h0_col = None if h0 is None else np.asarray(h0, dtype=np.float64).reshape(params.d, 1)
    states, ys, tape = run_batch(params, variant, xs[:, :, None], h0=h0_col)
    return states[1:, :, 0], ys[:, :, 0], tape


def save_params(path: str | os.PathLike, params: CellParams, kind: CellKind) -> None:
    """Write params as a flat little-endian binary file.

    Layout: six uint32 header words (magic 0x54475255, format version, d, p, q,
    variant-kind code), then every array in canonical field order, row-major,
    as little-endian float64. Round-trips bit-exactly.
    """
    header = np.array(
        [PARAMS_MAGIC, PARAMS_VERSION, params.d, params.p, params.q, _KIND_CODES[kind]],
        dtype="<u4",
    )
    payload = np.concatenate([arr.reshape(-1) for _, arr in params.arrays()])
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(payload.astype("<f8").tobytes())


def load_params(path: str | os.PathLike) -> tuple[CellParams, CellKind]:
    """Read a file written by save_params; bit-exact inverse."""
    with open(path, "rb") as fh:
        raw = fh.read()
    header = np.frombuffer(raw[:24], dtype="<u4")
    if len(header) != 6 or header[0] != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    if header[1] != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported format version {header[1]}")
    d, p, q, code = (int(v) for v in header[2:])
    if code not in _CODE_KINDS:
        raise ValueError(f"{path}: unknown variant-kind code {code}")
    flat = np.frombuffer(raw[24:], dtype="<f8")
    expected = 4 * d * d + 4 * d * p + 4 * d + q * d + q
    if flat.shape[0] != expected:
        raise ValueError(
            f"{path}: payload holds {flat.shape[0]} floats, expected {expected}")
    shapes = param_shapes(d, p, q)
    out = {}
    pos = 0
    for name in PARAM_FIELDS:
        size = int(np.prod(shapes[name]))
        out[name] = flat[pos:pos + size].reshape(shapes[name]).copy()
        pos += size
    return CellParams(**out), _CODE_KINDS[code]
