"""Backpropagation through time for the delay cells.

The delay makes the adjoint graph different from an ordinary RNN: the adjoint of
h_n collects a contribution from step n (through the gates and the instantaneous
candidate) and a second one from step n+m, whose delayed candidate read h_n.
backward() walks the tape once in reverse, routing that second contribution m
steps ahead of where an ordinary GRU would put it; parameter gradients are
accumulated with per-step rank-B updates.

Also here: central-difference gradients (the test oracle), the exact
state-to-state Jacobian accumulated over the complete unrolled graph, the
closed-form input-gradient oracle for the linear delayed cell, and the
gradient-norm bound checker for the delay-window regime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import (
    PARAM_FIELDS,
    BpttTape,
    CellKind,
    CellParams,
    CellVariant,
    HiddenHistory,
    step_linear,
)
from .numerics import inf_norm


@dataclass
class ParamGrads:
    """Gradient arrays, one per parameter array, same shapes as CellParams."""

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

    @classmethod
    def zeros_like(cls, params: CellParams) -> "ParamGrads":
        return cls(**{name: np.zeros_like(getattr(params, name)) for name in PARAM_FIELDS})

    def arrays(self):
        return [(name, getattr(self, name)) for name in PARAM_FIELDS]

    def scale(self, s: float) -> None:
        for _, arr in self.arrays():
            arr *= s

    def global_norm(self) -> float:
        total = 0.0
        for _, arr in self.arrays():
            total += float(np.sum(arr * arr))
        return float(np.sqrt(total))


def _loss_grads_3d(tape: BpttTape, loss_grads: np.ndarray, q: int) -> np.ndarray:
    lg = np.asarray(loss_grads, dtype=np.float64)
    if lg.ndim == 2 and tape.batch == 1:
        lg = lg[:, :, None]
    if lg.shape != (tape.T, q, tape.batch):
        raise ValueError(
            f"loss_grads must have shape ({tape.T}, {q}, {tape.batch}), got {lg.shape}")
    return lg


def backward(tape: BpttTape, params: CellParams, loss_grads: np.ndarray) -> ParamGrads:
    """Exact gradients of sum_n loss_grads[n] . y_n over one recorded run.

    loss_grads holds dL/dy_n, shape (T, q, B) ((T, q) is accepted for B = 1).
    Gradients flowing to states at or before h_0 are dropped: the initial
    function is not a parameter.
    """
    variant = tape.variant
    d, q = params.d, params.q
    T, B = tape.T, tape.batch
    m = variant.delay_m
    lg = _loss_grads_3d(tape, loss_grads, q)
    grads = ParamGrads.zeros_like(params)

    grads.V[:] = np.einsum("tqb,tdb->qd", lg, tape.states[1:])
    grads.c[:] = lg.sum(axis=(0, 2))

    # adjoints of h_1..h_T; slot 0 absorbs (and discards) flow into h_0
    adj = np.einsum("qd,tqb->tdb", params.V, lg)
    adj = np.concatenate([np.zeros((1, d, B)), adj], axis=0)

    if variant.kind == CellKind.TAU_GRU:
        alpha, beta = variant.alpha, variant.beta
        weighting = variant.use_weighting_a
        if weighting:
            w_top_t = np.vstack([params.W1, params.W3, params.W4]).T.copy()
        else:
            w_top_t = np.vstack([params.W1, params.W3]).T.copy()
        w2_t = params.W2.T.copy()
        k = w_top_t.shape[1]
        dpre_top = np.empty((k, B))
        for n in range(T - 1, -1, -1):
            delta = adj[n + 1]
            h = tape.states[n]
            u = tape.u[n]
            z = tape.z[n]
            g = tape.g[n]
            gd = g * delta
            if weighting:
                a = tape.a[n]
                az = a * z
            else:
                a = None
                az = z
            cand = beta * u + alpha * az
            dpre_top[:d] = (beta * gd) * (1.0 - u * u)
            dpre_top[d:2 * d] = delta * (cand - h) * g * (1.0 - g)
            if weighting:
                dpre_top[2 * d:] = (alpha * gd) * z * a * (1.0 - a)
            if weighting:
                dpre_z = (alpha * gd) * a * (1.0 - z * z)
            else:
                dpre_z = (alpha * gd) * (1.0 - z * z)
            adj[n] += delta - gd + w_top_t @ dpre_top
            if n - m >= 1:
                adj[n - m] += w2_t @ dpre_z
            x = tape.xs[n]
            acc = dpre_top @ h.T
            grads.W1 += acc[:d]
            grads.W3 += acc[d:2 * d]
            accx = dpre_top @ x.T
            grads.U1 += accx[:d]
            grads.U3 += accx[d:2 * d]
            grads.b1 += dpre_top[:d].sum(axis=1)
            grads.b3 += dpre_top[d:2 * d].sum(axis=1)
            if weighting:
                grads.W4 += acc[2 * d:]
                grads.U4 += accx[2 * d:]
                grads.b4 += dpre_top[2 * d:].sum(axis=1)
            if n >= m:
                grads.W2 += dpre_z @ tape.states[n - m].T
            grads.U2 += dpre_z @ x.T
            grads.b2 += dpre_z.sum(axis=1)
    elif variant.kind == CellKind.SIMPLE_DELAY_GRU:
        w1_t = params.W1.T.copy()
        w2_t = params.W2.T.copy()
        w3_t = params.W3.T.copy()
        for n in range(T - 1, -1, -1):
            delta = adj[n + 1]
            h = tape.states[n]
            cand = tape.u[n]
            g = tape.g[n]
            gd = g * delta
            dpre_c = gd * (1.0 - cand * cand)
            dpre_g = delta * (cand - h) * g * (1.0 - g)
            adj[n] += delta - gd + w1_t @ dpre_c + w3_t @ dpre_g
            if n - m >= 1:
                adj[n - m] += w2_t @ dpre_c
            x = tape.xs[n]
            grads.W1 += dpre_c @ h.T
            grads.W3 += dpre_g @ h.T
            grads.U1 += dpre_c @ x.T
            grads.U3 += dpre_g @ x.T
            grads.b1 += dpre_c.sum(axis=1)
            grads.b3 += dpre_g.sum(axis=1)
            if n >= m:
                grads.W2 += dpre_c @ tape.states[n - m].T
    else:
        raise ValueError(f"backward has no rule for variant kind {variant.kind}")
    return grads


def fd_gradient(loss_fn, params: CellParams, h: float = 1e-5) -> ParamGrads:
    """Central-difference gradient of loss_fn over every scalar parameter.

    loss_fn maps CellParams -> float. O(2 * param_count) loss evaluations;
    meant as the reference oracle in tests, not for training.
    """
    grads = ParamGrads.zeros_like(params)
    work = params.copy()
    for name in PARAM_FIELDS:
        arr = getattr(work, name).reshape(-1)
        out = getattr(grads, name).reshape(-1)
        for idx in range(arr.shape[0]):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(work)
            arr[idx] = orig - h
            down = loss_fn(work)
            arr[idx] = orig
            out[idx] = (up - down) / (2.0 * h)
    return grads


def _step_jacobians(tape: BpttTape, params: CellParams, j: int):
    """(d/dh_j, d/dh_{j-m}) of h_{j+1}, evaluated at the recorded activations."""
    variant = tape.variant
    d = params.d
    g = tape.g[j, :, 0]
    h = tape.states[j, :, 0]
    if variant.kind == CellKind.TAU_GRU:
        alpha, beta = variant.alpha, variant.beta
        u = tape.u[j, :, 0]
        z = tape.z[j, :, 0]
        a = tape.a[j, :, 0] if tape.a is not None else np.ones(d)
        cand = beta * u + alpha * (a * z)
        j_step = np.diag(1.0 - g)
        j_step += (g * beta * (1.0 - u * u))[:, None] * params.W1
        j_step += (g * (1.0 - g) * (cand - h))[:, None] * params.W3
        if variant.use_weighting_a:
            j_step += (g * alpha * z * a * (1.0 - a))[:, None] * params.W4
        j_delay = (g * alpha * a * (1.0 - z * z))[:, None] * params.W2
    elif variant.kind == CellKind.SIMPLE_DELAY_GRU:
        cand = tape.u[j, :, 0]
        dcand = g * (1.0 - cand * cand)
        j_step = np.diag(1.0 - g)
        j_step += dcand[:, None] * params.W1
        j_step += (g * (1.0 - g) * (cand - h))[:, None] * params.W3
        j_delay = dcand[:, None] * params.W2
    else:
        raise ValueError(f"no step Jacobian for variant kind {variant.kind}")
    return j_step, j_delay


def state_jacobian(tape: BpttTape, params: CellParams, n: int, k: int) -> np.ndarray:
    """Total derivative dh_n / dh_k over the complete unrolled graph.

    Accumulates forward from step k, following both the step-to-step path and
    every delay edge that lands inside [k, n]. Requires a batch-1 tape.
    """
    if tape.batch != 1:
        raise ValueError(f"state_jacobian expects a batch-1 tape, got batch {tape.batch}")
    if not 0 <= k < n <= tape.T:
        raise ValueError(f"need 0 <= k < n <= {tape.T}, got k={k}, n={n}")
    d = params.d
    m = tape.variant.delay_m
    sens = {k: np.eye(d)}
    for j in range(k, n):
        j_step, j_delay = _step_jacobians(tape, params, j)
        acc = j_step @ sens[j]
        back = sens.get(j - m)
        if back is not None:
            acc += j_delay @ back
        sens[j + 1] = acc
    return sens[n]


def prop1_oracle(A: np.ndarray, B: np.ndarray, C: np.ndarray,
                 m: int, n: int, i: int) -> np.ndarray:
    """Closed-form input gradient d h_{n+1} / d u_i for the linear delayed cell.

    Valid for commuting A, B (checked to 1e-12 in the inf norm), m >= 1 and
    0 <= i <= n <= 2m + 1: below the delay horizon (n <= m) the gradient is
    A^(n-i) C; one delay span beyond it, each input additionally reaches the
    state through the delayed term, contributing (j - i) A^(j-i-1) B C with
    j = n - m when i < j.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if inf_norm(A @ B - B @ A) > 1e-12:
        raise ValueError("closed form requires commuting A and B "
                         f"(|AB - BA|_inf = {inf_norm(A @ B - B @ A):.3e})")
    m = int(m)
    if m < 1:
        raise ValueError(f"delay m must be >= 1, got {m}")
    if not 0 <= i <= n:
        raise ValueError(f"need 0 <= i <= n, got i={i}, n={n}")
    if n > 2 * m + 1:
        raise ValueError(f"closed form covers n <= 2m+1 = {2 * m + 1}, got n={n}")
    grad = np.linalg.matrix_power(A, n - i) @ C
    if n > m:
        j = n - m
        if i < j:
            grad = grad + (j - i) * (np.linalg.matrix_power(A, j - i - 1) @ B @ C)
    return grad


def linear_bptt_input_grads(A: np.ndarray, B: np.ndarray, C: np.ndarray,
                            m: int, n: int) -> list[np.ndarray]:
    """Reverse-mode input gradients [d h_{n+1} / d u_i for i = 0..n].

    One backward sweep over the linear recursion h_{j+1} = A h_j + B h_{j-m}
    + C u_j; the adjoint of h_j receives A^T-routed flow from step j and
    B^T-routed flow from step j + m, mirroring what backward() does for the
    gated cells. Independent of prop1_oracle (no closed form, no matrix powers).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    d = A.shape[0]
    m = int(m)
    # lam[j] = d h_{n+1} / d h_j, built from the top
    lam = {n + 1: np.eye(d)}
    for j in range(n, -1, -1):
        acc = np.zeros((d, d))
        if j + 1 in lam:
            acc += lam[j + 1] @ A
        if j + 1 + m in lam and j + 1 + m <= n + 1:
            acc += lam[j + 1 + m] @ B
        lam[j] = acc
    return [lam[i + 1] @ C for i in range(n + 1)]


def run_linear(A: np.ndarray, B: np.ndarray, C: np.ndarray, m: int,
               us: np.ndarray) -> np.ndarray:
    """Drive the linear delayed cell over inputs us (T, du); returns (T, d)."""
    us = np.asarray(us, dtype=np.float64)
    d = A.shape[0]
    hist = HiddenHistory(m, d)
    out = np.empty((us.shape[0], d))
    for n in range(us.shape[0]):
        out[n] = step_linear(A, B, C, us[n], hist)
    return out


@dataclass
class BoundReport:
    """Observed Jacobian norm against the delay-window growth bound."""

    n: int
    k: int
    m: int
    observed: float
    bound: float
    epsilon: float
    gate_gain: float
    holds: bool


def grad_norm_bound_check(tape: BpttTape, params: CellParams, n: int, k: int) -> BoundReport:
    """Check |dh_n/dh_k|_inf against (1 + C - eps)^(n-k) plus the delay term.

    C = |W1|_inf + |W3|_inf + |W4|_inf / 4 and eps is the empirical minimum
    over every recorded g and a gate value, so (1 - g) <= (1 - eps) holds at
    each step of the window. The delay term |W2|_inf (1 + C - eps)^(n-k-1-m)
    enters only when the window spans the delay (m <= n - k - 1). Valid for
    windows up to one delay span: n - k <= m + 1, with m >= 1 (at m = 0 the
    one-step Jacobian itself carries W2, which this bound does not cover).
    """
    m = tape.variant.delay_m
    if m < 1:
        raise ValueError(f"bound requires delay m >= 1, got {m}")
    if not 1 <= n - k <= m + 1:
        raise ValueError(f"bound covers 1 <= n-k <= m+1 = {m + 1}, got n-k = {n - k}")
    observed = inf_norm(state_jacobian(tape, params, n, k))
    eps = float(tape.g.min())
    if tape.a is not None:
        eps = min(eps, float(tape.a.min()))
    gate_gain = (inf_norm(params.W1) + inf_norm(params.W3)
                 + 0.25 * inf_norm(params.W4))
    growth = 1.0 + gate_gain - eps
    bound = growth ** (n - k)
    if 1 <= m <= n - k - 1:
        bound += inf_norm(params.W2) * growth ** (n - k - 1 - m)
    return BoundReport(n=n, k=k, m=m, observed=observed, bound=bound,
                       epsilon=eps, gate_gain=gate_gain, holds=observed <= bound)
