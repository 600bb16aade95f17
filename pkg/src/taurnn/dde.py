"""Fixed-step integration of constant-delay DDEs by the method of steps.

The integrator advances node by node with Euler or RK4 stages; whenever a stage
needs the state at t - tau it asks the partially built solution, which serves
exact stored values at nodes, the initial function at or before t0, and a cubic
Hermite interpolant (from stored value/derivative pairs) in between. With
tau >= dt every stage lookup lands in the already-computed region, so no
iteration is needed.

Also here: the two scalar benchmark generators (blood-cell production with
delayed feedback, and the delayed-oscillator sea-surface-temperature model),
the truncated self-similar cosine input signal, the dataset file format, and
the continuous-time run of the delay-gated cell used to exercise its
contraction-style bound.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cells import CellParams
from .numerics import operator_norm, sigmoid_vec, tanh_vec
from .rng import SplitMix64

# blood-cell production model (chaotic for these constants)
MG_A = 0.2
MG_B = 0.1
MG_N = 10
MG_DELAY = 17.0
MG_DT = 0.25
MG_T_END = 1000.0
MG_EMIT_T0 = 500.0

# delayed-oscillator temperature model
ENSO_C = 0.93
ENSO_GAMMA = 0.49
ENSO_DELAY = 4.8
ENSO_DT = 0.1
ENSO_T_END = 400.0
ENSO_EMIT_T0 = 200.0

SERIES_LEN = 2000


@dataclass
class DdeProblem:
    """rhs(t, y, y_delayed) -> dy/dt, with initial_fn defined on [t0 - tau, t0].

    tau = 0 degenerates to an ODE; the delayed argument then receives the
    current stage value.
    """

    rhs: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    tau: float
    t0: float
    t_end: float
    dt: float
    initial_fn: Callable[[float], np.ndarray]

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_end <= self.t0:
            raise ValueError(f"t_end must exceed t0, got [{self.t0}, {self.t_end}]")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if 0.0 < self.tau < self.dt * (1.0 - 1e-12):
            raise ValueError(
                f"explicit method of steps needs tau >= dt (or tau = 0), "
                f"got tau={self.tau}, dt={self.dt}")


class DenseSolution:
    """Grid solution with derivative-matched dense output.

    eval(t) returns initial_fn(t) for t <= t0, the stored value when t falls on
    a node (snapped within 1e-9 of the index, which keeps node reads bit-exact),
    and the cubic Hermite interpolant of the bracketing (value, deriv) pairs
    otherwise. Read-only once integrate() returns it.
    """

    def __init__(self, t0: float, dt: float, n_steps: int, dim: int,
                 initial_fn: Callable[[float], np.ndarray]):
        self.t0 = t0
        self.dt = dt
        self.n_steps = n_steps
        self.initial_fn = initial_fn
        self.values = np.zeros((n_steps + 1, dim))
        self.derivs = np.zeros((n_steps + 1, dim))
        self._filled = 0  # nodes with valid (value, deriv); value-only at the frontier

    @property
    def grid(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_steps + 1) * self.dt

    def eval(self, t: float) -> np.ndarray:
        if t <= self.t0:
            return np.asarray(self.initial_fn(t), dtype=np.float64)
        u = (t - self.t0) / self.dt
        r = int(round(u))
        if abs(u - r) <= 1e-9 and r <= self._filled:
            return self.values[r].copy()
        k = int(np.floor(u))
        if u > self._filled + 1e-9 or k + 1 > self._filled:
            raise ValueError(
                f"eval at t={t!r} is beyond the computed range "
                f"(filled to t={self.t0 + self._filled * self.dt!r})")
        theta = u - k
        h00 = (1.0 + 2.0 * theta) * (1.0 - theta) ** 2
        h10 = theta * (1.0 - theta) ** 2
        h01 = theta * theta * (3.0 - 2.0 * theta)
        h11 = theta * theta * (theta - 1.0)
        return (h00 * self.values[k] + h10 * self.dt * self.derivs[k]
                + h01 * self.values[k + 1] + h11 * self.dt * self.derivs[k + 1])


def _step_count(t0: float, t_end: float, dt: float) -> int:
    span = t_end - t0
    n = round(span / dt)
    if n < 1 or abs(n * dt - span) > 1e-8 * max(1.0, abs(span)):
        raise ValueError(
            f"t_end - t0 = {span!r} must be a whole number of dt={dt!r} steps")
    return int(n)


def integrate(problem: DdeProblem, scheme: str = "rk4") -> DenseSolution:
    """Method-of-steps integration; scheme is 'euler' or 'rk4'.

    Stored derivatives are the rhs at each accepted node (the first RK4 stage),
    which is exactly what the Hermite dense output needs. Raises on NaN/Inf with
    the time where the trajectory blew up.
    """
    if scheme not in ("euler", "rk4"):
        raise ValueError(f"scheme must be 'euler' or 'rk4', got {scheme!r}")
    n = _step_count(problem.t0, problem.t_end, problem.dt)
    y = np.atleast_1d(np.asarray(problem.initial_fn(problem.t0), dtype=np.float64)).copy()
    sol = DenseSolution(problem.t0, problem.dt, n, y.shape[0], problem.initial_fn)
    sol.values[0] = y
    rhs, tau, dt = problem.rhs, problem.tau, problem.dt

    def delayed(t_stage: float, y_stage: np.ndarray) -> np.ndarray:
        if tau == 0.0:
            return y_stage
        return sol.eval(t_stage - tau)

    def f(t_stage: float, y_stage: np.ndarray) -> np.ndarray:
        return np.asarray(rhs(t_stage, y_stage, delayed(t_stage, y_stage)),
                          dtype=np.float64)

    for k in range(n):
        t = problem.t0 + k * dt
        k1 = f(t, y)
        sol.derivs[k] = k1
        if scheme == "euler":
            y = y + dt * k1
        else:
            half = 0.5 * dt
            k2 = f(t + half, y + half * k1)
            k3 = f(t + half, y + half * k2)
            k4 = f(t + dt, y + dt * k3)
            y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise RuntimeError(f"trajectory blew up at t = {t + dt!r}")
        sol.values[k + 1] = y
        sol._filled = k + 1
    sol.derivs[n] = f(problem.t0 + n * dt, y)
    return sol


def _gen_scalar_family(seed: int, n_samples: int, *, delay: float, dt: float,
                       t_end: float, emit_t0: float, warm_rhs_factory, main_rhs,
                       bound_check) -> np.ndarray:
    """Shared recipe: draw per-sample initial values, run the frozen-argument
    warm-up ODE on [0, delay], then the DDE to t_end; emit SERIES_LEN values
    from emit_t0 on. Samples integrate as one vector system; every operation is
    componentwise, so each row is bit-identical to a single-sample run."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    rng = SplitMix64(seed)
    y0 = np.array([rng.next_double() for _ in range(n_samples)])
    warm = integrate(DdeProblem(
        rhs=warm_rhs_factory(y0), tau=0.0, t0=0.0, t_end=delay, dt=dt,
        initial_fn=lambda t: y0), "rk4")
    main = integrate(DdeProblem(
        rhs=main_rhs, tau=delay, t0=delay, t_end=t_end, dt=dt,
        initial_fn=warm.eval), "rk4")
    k0 = int(round((emit_t0 - delay) / dt))
    series = main.values[k0:k0 + SERIES_LEN].T.copy()
    if series.shape != (n_samples, SERIES_LEN):
        raise RuntimeError(
            f"emission window produced shape {series.shape}, "
            f"expected ({n_samples}, {SERIES_LEN})")
    bound_check(series, main.values)
    return series


def gen_mackey_glass(seed: int, n_samples: int) -> np.ndarray:
    """Blood-cell-production series: x' = a x(t-delay)/(1 + x(t-delay)^n) - b x.

    Per sample x(0) ~ Unif(0,1); on [0, delay] the delayed argument is frozen at
    x(0) (an ODE), then the DDE runs to t=1000 with RK4 at dt=0.25 and the 2000
    values on [500, 1000) are emitted. Returns (n_samples, 2000).
    """
    def warm_factory(y0):
        drive = MG_A * y0 / (1.0 + y0 ** MG_N)
        return lambda t, y, _yd: drive - MG_B * y

    def rhs(t, y, yd):
        return MG_A * yd / (1.0 + yd ** MG_N) - MG_B * y

    def check(series, _trajectory):
        if not (np.all(series > 0.0) and np.all(series < 2.0)):
            raise RuntimeError(
                f"series left the expected attractor range (0, 2): "
                f"min={series.min():.6g}, max={series.max():.6g}")

    return _gen_scalar_family(seed, n_samples, delay=MG_DELAY, dt=MG_DT,
                              t_end=MG_T_END, emit_t0=MG_EMIT_T0,
                              warm_rhs_factory=warm_factory, main_rhs=rhs,
                              bound_check=check)


def gen_enso(seed: int, n_samples: int) -> np.ndarray:
    """Sea-surface-temperature series: T' = T - T^3 - c T(t-delay)(1 - g T^2(t-delay)).

    Per sample T(0) ~ Unif(0,1); frozen-argument warm-up on [0, delay], then the
    DDE to t=400 with RK4 at dt=0.1; the 2000 values on [200, 400) are emitted.
    Returns (n_samples, 2000).
    """
    def warm_factory(y0):
        drive = ENSO_C * y0 * (1.0 - ENSO_GAMMA * y0 * y0)
        return lambda t, y, _yd: y - y ** 3 - drive

    def rhs(t, y, yd):
        return y - y ** 3 - ENSO_C * yd * (1.0 - ENSO_GAMMA * yd * yd)

    def check(_series, trajectory):
        amp = float(np.max(np.abs(trajectory)))
        if amp >= 2.0:
            raise RuntimeError(f"trajectory left |T| < 2 (max |T| = {amp:.6g})")

    return _gen_scalar_family(seed, n_samples, delay=ENSO_DELAY, dt=ENSO_DT,
                              t_end=ENSO_T_END, emit_t0=ENSO_EMIT_T0,
                              warm_rhs_factory=warm_factory, main_rhs=rhs,
                              bound_check=check)


def gen_weierstrass_input(t):
    """Truncated self-similar cosine sum: sum_{n=0..3} 3^-n cos(4^n * 2 t)."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    for n in range(4):
        out = out + (3.0 ** -n) * np.cos((4.0 ** n) * 2.0 * t)
    return float(out) if out.ndim == 0 else out


@dataclass
class LipschitzReport:
    """Segment distances between two trajectories against the growth bound."""

    K: float
    initial_distance: float   # sup over [-tau, 0] of |phi - psi|_2
    times: np.ndarray         # multiples of tau from 0 to T_end
    distances: np.ndarray     # sup over each trailing segment of |h_phi - h_psi|_2
    bounds: np.ndarray        # initial_distance * exp(K * t)
    slack: float
    holds: bool

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        self.bounds = np.asarray(self.bounds, dtype=np.float64)


def _as_initial_fn(f, d: int) -> Callable[[float], np.ndarray]:
    if callable(f):
        return f
    const = np.asarray(f, dtype=np.float64).reshape(d)
    return lambda t: const


def integrate_continuous_taugru(params: CellParams, x: Callable[[float], np.ndarray],
                                phi, psi, tau: float, T_end: float | None = None,
                                dt: float | None = None, slack: float = 1e-6):
    """Integrate h' = -h + u(h,x) + a(h,x) * z(h(t-tau),x) from two histories.

    phi and psi may be constant vectors or callables on [-tau, 0]. Returns
    (solution_phi, solution_psi, LipschitzReport): at every multiple of tau the
    report compares the segment sup-distance between the trajectories against
    initial_distance * exp(K t) with K = 1 + |W1| + |W2| + |W4|/4 in the
    operator norm. Blow-ups raise from the integrator rather than being
    flagged quietly.
    """
    d = params.d
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if T_end is None:
        T_end = 5.0 * tau
    if dt is None:
        dt = tau / 64.0
    phi_fn = _as_initial_fn(phi, d)
    psi_fn = _as_initial_fn(psi, d)

    def rhs(t, h, h_del):
        xv = np.asarray(x(t), dtype=np.float64)
        u = tanh_vec(params.W1 @ h + params.U1 @ xv + params.b1)
        z = tanh_vec(params.W2 @ h_del + params.U2 @ xv + params.b2)
        a = sigmoid_vec(params.W4 @ h + params.U4 @ xv + params.b4)
        return -h + u + a * z

    sols = []
    for fn in (phi_fn, psi_fn):
        sols.append(integrate(DdeProblem(rhs=rhs, tau=tau, t0=0.0, t_end=T_end,
                                         dt=dt, initial_fn=fn), "rk4"))
    sol_phi, sol_psi = sols

    n_init = max(int(round(tau / dt)), 1)
    theta = -tau + np.arange(n_init + 1) * (tau / n_init)
    init_d = max(float(np.linalg.norm(phi_fn(t) - psi_fn(t))) for t in theta)

    diff = np.linalg.norm(sol_phi.values - sol_psi.values, axis=1)
    k_const = (1.0 + operator_norm(params.W1) + operator_norm(params.W2)
               + 0.25 * operator_norm(params.W4))
    n_seg = int(round(T_end / tau))
    per_seg = int(round(tau / dt))
    times = [0.0]
    distances = [init_d]
    bounds = [init_d]
    for j in range(1, n_seg + 1):
        lo = max((j - 1) * per_seg, 0)
        hi = min(j * per_seg, diff.shape[0] - 1)
        times.append(j * tau)
        distances.append(float(diff[lo:hi + 1].max()))
        bounds.append(init_d * float(np.exp(k_const * j * tau)))
    holds = all(dist <= b + slack for dist, b in zip(distances, bounds))
    report = LipschitzReport(K=k_const, initial_distance=init_d, times=times,
                             distances=distances, bounds=bounds, slack=slack,
                             holds=holds)
    return sol_phi, sol_psi, report


def write_series_file(path: str | os.PathLike, name: str, dt: float, tau: float,
                      series: np.ndarray) -> None:
    """Dataset file: header '# name, dt, tau, n_samples, len', one series per
    CSV row, floats printed with 17 significant digits (value-exact)."""
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    n, length = series.shape
    with open(path, "w") as fh:
        fh.write(f"# {name}, {dt:.17g}, {tau:.17g}, {n}, {length}\n")
        for row in series:
            fh.write(",".join(f"{v:.17g}" for v in row))
            fh.write("\n")


def read_series_file(path: str | os.PathLike):
    """Inverse of write_series_file: returns (name, dt, tau, array (n, len))."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# "):
            raise ValueError(f"{path}: missing '# name, dt, tau, n_samples, len' header")
        parts = [p.strip() for p in header[2:].split(",")]
        if len(parts) != 5:
            raise ValueError(f"{path}: header has {len(parts)} fields, expected 5")
        name, dt, tau, n, length = (parts[0], float(parts[1]), float(parts[2]),
                                    int(parts[3]), int(parts[4]))
        rows = [np.array([float(v) for v in line.split(",")]) for line in fh
                if line.strip()]
    series = np.vstack(rows) if rows else np.zeros((0, length))
    if series.shape != (n, length):
        raise ValueError(f"{path}: body shape {series.shape} does not match "
                         f"header ({n}, {length})")
    return name, dt, tau, series
