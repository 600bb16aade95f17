"""Numerical verification batteries for the cell family and the integrator.

Each battery runs a randomized sweep of an exactness or inequality property
and returns a BatteryResult. The suites:

  gradients    analytic backpropagation vs central finite differences
  prop1        closed-form input sensitivities of the linear delayed cell
  bounds       the |h| <= 2 state bound and the delay-aware gradient-norm bound
  lipschitz    continuous-time trajectory divergence vs the exponential envelope
  convergence  integrator self-convergence orders and known fixed points

All randomness is drawn from seeded SplitMix64 streams, so every battery is
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bptt import (
    backward,
    fd_gradient,
    grad_norm_bound_check,
    linear_bptt_input_grads,
    prop1_oracle,
)
from .cells import CellKind, CellParams, CellVariant, init_params, run_sequence
from .dde import (
    DdeProblem,
    MG_A,
    MG_B,
    MG_DELAY,
    MG_N,
    gen_weierstrass_input,
    integrate,
    integrate_continuous_taugru,
)
from .numerics import operator_norm
from .rng import SplitMix64


@dataclass
class BatteryResult:
    suite: str
    n_cases: int
    n_failed: int
    failures: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    MAX_RECORDED_FAILURES = 10

    @property
    def passed(self) -> bool:
        return self.n_failed == 0

    def record_failure(self, message: str) -> None:
        self.n_failed += 1
        if len(self.failures) < self.MAX_RECORDED_FAILURES:
            self.failures.append(message)

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = ""
        if self.metrics:
            parts = [f"{k}={v:.3g}" for k, v in sorted(self.metrics.items())]
            extra = "  [" + ", ".join(parts) + "]"
        return (f"{status}  {self.suite}: {self.n_cases - self.n_failed}"
                f"/{self.n_cases} checks passed{extra}")


def _variant_grid(delay_m: int):
    return [
        ("full", CellVariant(kind=CellKind.TAU_GRU, delay_m=delay_m)),
        ("alpha0", CellVariant(kind=CellKind.TAU_GRU, alpha=0.0, delay_m=delay_m)),
        ("beta0", CellVariant(kind=CellKind.TAU_GRU, beta=0.0, delay_m=delay_m)),
        ("noweight", CellVariant(kind=CellKind.TAU_GRU, use_weighting_a=False,
                                 delay_m=delay_m)),
        ("simple", CellVariant(kind=CellKind.SIMPLE_DELAY_GRU, delay_m=delay_m)),
    ]


def battery_gradients(seed: int = 2024_0501, rel_tol: float = 1e-5,
                      abs_floor: float = 1e-10) -> BatteryResult:
    """Backward pass vs central differences on a squared-error loss.

    Covers every cell variant crossed with delays m in {0, 1, 5, 20}; a
    coordinate passes when |analytic - fd| < max(rel_tol * max(|a|, |b|),
    abs_floor).
    """
    result = BatteryResult(suite="gradients", n_cases=0, n_failed=0)
    d, p, q = 3, 2, 2
    worst_rel = 0.0
    case = 0
    for m in (0, 1, 5, 20):
        for name, variant in _variant_grid(m):
            case += 1
            T = m + 6
            params = init_params(d, p, q, seed + case)
            rng = SplitMix64(seed ^ (case * 2654435761))
            xs = np.empty((T, p))
            rng.fill(xs, -1.0, 1.0)
            target = np.empty((T, q))
            rng.fill(target, -1.0, 1.0)

            def loss_fn(pp: CellParams) -> float:
                _, ys, _ = run_sequence(pp, variant, xs)
                return float(np.mean((ys - target) ** 2))

            _, ys, tape = run_sequence(params, variant, xs)
            lg = (2.0 / ys.size) * (ys - target)
            analytic = backward(tape, params, lg)
            fd = fd_gradient(loss_fn, params)
            result.n_cases += 1
            bad = 0
            for pname, a in analytic.arrays():
                b = getattr(fd, pname)
                gap = np.abs(a - b)
                allowed = np.maximum(rel_tol * np.maximum(np.abs(a), np.abs(b)),
                                     abs_floor)
                bad += int(np.sum(gap >= allowed))
                denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), abs_floor)
                worst_rel = max(worst_rel, float(np.max(gap / denom)))
            if bad:
                result.record_failure(
                    f"variant={name} m={m}: {bad} gradient coordinates off")
    result.metrics["worst_rel_err"] = worst_rel
    return result


def battery_prop1(seed: int = 2024_0502, tol: float = 1e-12) -> BatteryResult:
    """Closed-form sensitivities of h_{n+1} to each input vs reverse-mode sweep.

    Uses diagonal (hence commuting) A and B; every (m, n, i) with m in
    {1, 2, 5}, 0 <= n <= 2m + 1 and 0 <= i <= n is one case. Two extra cases
    check the guard rails: the delayed-feedback term is genuinely nonzero, and
    non-commuting inputs are rejected.
    """
    result = BatteryResult(suite="prop1", n_cases=0, n_failed=0)
    worst = 0.0
    rng = SplitMix64(seed)
    d, r = 3, 2
    for m in (1, 2, 5):
        A = np.diag(np.array([rng.uniform(-0.9, 0.9) for _ in range(d)]))
        B = np.diag(np.array([rng.uniform(-0.9, 0.9) for _ in range(d)]))
        C = np.empty((d, r))
        rng.fill(C, -1.0, 1.0)
        for n in range(0, 2 * m + 2):
            bptt_grads = linear_bptt_input_grads(A, B, C, m, n)
            for i in range(n + 1):
                result.n_cases += 1
                want = prop1_oracle(A, B, C, m, n, i)
                gap = float(np.max(np.abs(bptt_grads[i] - want)))
                worst = max(worst, gap)
                if gap > tol:
                    result.record_failure(
                        f"m={m} n={n} i={i}: max deviation {gap:.3e}")

    # the (j - i) A^(j-i-1) B C correction must actually bite: scalar case
    result.n_cases += 1
    A1 = np.array([[0.9]])
    B1 = np.array([[0.5]])
    C1 = np.array([[1.0]])
    got = prop1_oracle(A1, B1, C1, m=2, n=4, i=0)
    want = 0.9 ** 4 * 1.0 + 2 * 0.9 * 0.5 * 1.0
    if abs(float(got[0, 0]) - want) > tol:
        result.record_failure(f"scalar delayed-feedback term wrong: {got[0, 0]}")

    result.n_cases += 1
    try:
        prop1_oracle(np.array([[1.0, 1.0], [0.0, 1.0]]),
                     np.array([[1.0, 0.0], [1.0, 1.0]]),
                     np.eye(2), m=1, n=2, i=0)
        result.record_failure("non-commuting A, B were not rejected")
    except ValueError:
        pass
    result.metrics["worst_abs_err"] = worst
    return result


def battery_bounds(seed: int = 2024_0503, n_state_runs: int = 1000,
                   n_grad_checks: int = 500) -> BatteryResult:
    """State boundedness plus the gradient-norm inequality.

    State part: random parameters (scaled well past the init range), random
    inputs and delays; every hidden coordinate must stay in [-2, 2]. Gradient
    part: for random (n, k) with 1 <= n - k <= m + 1 the measured
    infinity-norm of dh_n/dh_k must sit below the two-term envelope.
    """
    result = BatteryResult(suite="bounds", n_cases=0, n_failed=0)
    rng = SplitMix64(seed)
    worst_state = 0.0
    for run in range(n_state_runs):
        result.n_cases += 1
        d = 1 + rng.next_below(8)
        T = 1 + rng.next_below(500)
        m = rng.next_below(51)
        kinds = [
            CellVariant(kind=CellKind.TAU_GRU, delay_m=m),
            CellVariant(kind=CellKind.TAU_GRU, alpha=0.0, delay_m=m),
            CellVariant(kind=CellKind.TAU_GRU, beta=0.0, delay_m=m),
            CellVariant(kind=CellKind.TAU_GRU, use_weighting_a=False, delay_m=m),
            CellVariant(kind=CellKind.SIMPLE_DELAY_GRU, delay_m=m),
        ]
        variant = kinds[rng.next_below(len(kinds))]
        params = init_params(d, 1, 1, seed + run)
        scale = rng.uniform(0.5, 4.0)
        for name, arr in params.arrays():
            if name[0] in ("W", "U"):
                arr *= scale
        xs = np.empty((T, 1))
        rng.fill(xs, -3.0, 3.0)
        hs, _, _ = run_sequence(params, variant, xs)
        peak = float(np.max(np.abs(hs)))
        worst_state = max(worst_state, peak)
        if peak > 2.0 + 1e-12:
            result.record_failure(
                f"state run {run}: |h| reached {peak:.6f} (d={d} T={T} m={m})")

    worst_margin = 0.0
    for check in range(n_grad_checks):
        result.n_cases += 1
        d = 1 + rng.next_below(8)
        m = 1 + rng.next_below(10)
        gap = 1 + rng.next_below(m + 1)     # n - k in [1, m + 1]
        T = gap + 1 + rng.next_below(5)
        k = rng.next_below(T - gap + 1)
        n = k + gap
        params = init_params(d, 1, 1, seed + 7919 * (check + 1))
        scale = rng.uniform(0.5, 2.0)
        for name, arr in params.arrays():
            if name[0] in ("W", "U"):
                arr *= scale
        variant = CellVariant(kind=CellKind.TAU_GRU, delay_m=m)
        xs = np.empty((T, 1))
        rng.fill(xs, -2.0, 2.0)
        _, _, tape = run_sequence(params, variant, xs)
        report = grad_norm_bound_check(tape, params, n, k)
        worst_margin = max(worst_margin,
                           report.observed / max(report.bound, 1e-300))
        if not report.holds:
            result.record_failure(
                f"gradient bound violated: n={n} k={k} m={m} "
                f"observed={report.observed:.6e} bound={report.bound:.6e}")
    result.metrics["max_abs_state"] = worst_state
    result.metrics["worst_bound_ratio"] = worst_margin
    result.metrics["n_state_runs"] = n_state_runs
    result.metrics["n_grad_checks"] = n_grad_checks
    return result


def battery_lipschitz(seed: int = 2024_0504, n_trials: int = 100) -> BatteryResult:
    """Continuous-time divergence of paired trajectories vs exp(K t) growth.

    Weights are rescaled so each operator norm is at most 1, initial functions
    are random constants, and the shared input is the lacunar cosine signal.
    """
    result = BatteryResult(suite="lipschitz", n_cases=0, n_failed=0)
    rng = SplitMix64(seed)
    worst = -np.inf
    for trial in range(n_trials):
        result.n_cases += 1
        d = 1 + rng.next_below(4)
        params = init_params(d, 1, 1, seed + 31 * (trial + 1))
        for name in ("W1", "W2", "W4"):
            w = getattr(params, name)
            norm = operator_norm(w)
            if norm > 1.0:
                w *= 0.99 / norm
        tau = rng.uniform(0.5, 2.0)
        phi = np.array([rng.uniform(-1.0, 1.0) for _ in range(d)])
        psi = np.array([rng.uniform(-1.0, 1.0) for _ in range(d)])

        def drive(t: float) -> np.ndarray:
            return np.array([gen_weierstrass_input(t)])

        _, _, report = integrate_continuous_taugru(params, drive, phi, psi, tau)
        if report.distances.size:
            ratios = report.distances / np.maximum(report.bounds, 1e-300)
            worst = max(worst, float(np.max(ratios)))
        if not report.holds:
            result.record_failure(
                f"trial {trial}: divergence exceeded envelope (d={d} tau={tau:.3f})")
    result.metrics["worst_envelope_ratio"] = worst
    return result


def _mg_rhs(t: float, y: np.ndarray, y_delayed: np.ndarray) -> np.ndarray:
    return MG_A * y_delayed / (1.0 + y_delayed ** MG_N) - MG_B * y


def _self_convergence_order(scheme: str, dt: float) -> float:
    """Observed order from solutions at dt, dt/2 and a dt/8 reference.

    The test problem is the chaotic delayed feedback system started from the
    constant history 0.5; errors are measured in sup norm on the coarse nodes
    inside [17, 27], past the first delay span so interpolated history reads
    are genuinely exercised.
    """
    sols = {}
    for step in (dt, dt / 2, dt / 8):
        problem = DdeProblem(rhs=_mg_rhs, tau=MG_DELAY, t0=0.0, t_end=27.0,
                             dt=step, initial_fn=lambda t: np.array([0.5]))
        sols[step] = integrate(problem, scheme=scheme)
    coarse = sols[dt]
    grid = coarse.grid
    mask = (grid >= 17.0 - 1e-12) & (grid <= 27.0 + 1e-12)
    times = grid[mask]
    ref = sols[dt / 8]
    e_coarse = max(float(np.max(np.abs(sols[dt].eval(t) - ref.eval(t))))
                   for t in times)
    e_half = max(float(np.max(np.abs(sols[dt / 2].eval(t) - ref.eval(t))))
                 for t in times)
    return float(np.log2(e_coarse / e_half))


def battery_convergence(dt: float = 0.25) -> BatteryResult:
    """Integrator orders plus two analytically known invariant trajectories."""
    result = BatteryResult(suite="convergence", n_cases=0, n_failed=0)

    result.n_cases += 1
    rk4_order = _self_convergence_order("rk4", dt)
    result.metrics["rk4_order"] = rk4_order
    if rk4_order < 3.0:
        result.record_failure(f"rk4 self-convergence order {rk4_order:.3f} < 3")

    result.n_cases += 1
    euler_order = _self_convergence_order("euler", dt)
    result.metrics["euler_order"] = euler_order
    if euler_order < 1.0:
        result.record_failure(f"euler self-convergence order {euler_order:.3f} < 1")

    # constant history 1 is an equilibrium of the delayed feedback system
    result.n_cases += 1
    problem = DdeProblem(rhs=_mg_rhs, tau=MG_DELAY, t0=0.0,
                         t_end=MG_DELAY + 100.0, dt=0.25,
                         initial_fn=lambda t: np.array([1.0]))
    sol = integrate(problem, scheme="rk4")
    drift = float(np.max(np.abs(sol.values - 1.0)))
    result.metrics["mg_fixed_point_drift"] = drift
    if drift > 1e-10:
        result.record_failure(f"equilibrium at 1 drifted by {drift:.3e}")

    # the zero state of the oscillator recurrence never moves
    result.n_cases += 1

    def osc_rhs(t, y, yd):
        return y - y ** 3 - 0.93 * yd * (1.0 - 0.49 * yd * yd)

    problem = DdeProblem(rhs=osc_rhs, tau=4.8, t0=0.0, t_end=96.0, dt=0.1,
                         initial_fn=lambda t: np.array([0.0]))
    sol = integrate(problem, scheme="rk4")
    peak = float(np.max(np.abs(sol.values)))
    result.metrics["zero_state_peak"] = peak
    if peak != 0.0:
        result.record_failure(f"zero state moved to {peak:.3e}")
    return result


VERIFY_SUITES = {
    "gradients": battery_gradients,
    "prop1": battery_prop1,
    "bounds": battery_bounds,
    "lipschitz": battery_lipschitz,
    "convergence": battery_convergence,
}


_SEEDED_SUITES = {"gradients", "prop1", "bounds", "lipschitz"}


def run_suites(names=None, seed: int | None = None) -> dict:
    """Run the requested suites (all by default) and return name -> result.

    A seed overrides each battery's default stream; convergence is
    deterministic and ignores it.
    """
    if names is None:
        names = list(VERIFY_SUITES)
    out = {}
    for idx, name in enumerate(names):
        if name not in VERIFY_SUITES:
            raise ValueError(
                f"unknown verify suite {name!r}; choose from "
                f"{sorted(VERIFY_SUITES)}")
        fn = VERIFY_SUITES[name]
        if seed is not None and name in _SEEDED_SUITES:
            out[name] = fn(seed=seed + idx)
        else:
            out[name] = fn()
    return out
