"""Datasets, losses, Adam, and the training/evaluation loops.

Two task families: one-step-ahead prediction on generated scalar series (the
model reads s_n and is scored on s_{n+1} at every step), and the long-range
marker-sum regression task, scored at the final step only. Training is plain
minibatch Adam; batches are consecutive slices in a fixed order and every
random draw comes from the seeded generator, so a (config, seed) pair pins the
whole run. Dataset realizations are keyed by a separate data_seed so different
init seeds and ablation rows see identical data.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .bptt import ParamGrads, backward
from .cells import (
    CellKind,
    CellParams,
    CellVariant,
    dead_param_groups,
    init_params,
    param_shapes,
    run_batch,
)
from .dde import ENSO_DELAY, ENSO_DT, MG_DELAY, MG_DT, gen_enso, gen_mackey_glass
from .rng import SplitMix64

TASK_MACKEY_GLASS = "mackey_glass"
TASK_ENSO = "enso"
TASK_ADDING = "adding"
SERIES_TASKS = (TASK_MACKEY_GLASS, TASK_ENSO)

_KIND_NAMES = {
    "taugru": CellKind.TAU_GRU,
    "simple_delay_gru": CellKind.SIMPLE_DELAY_GRU,
}


@dataclass
class TrainConfig:
    task: str
    d: int
    tau: int
    lr: float
    epochs: int
    seed: int
    variant_kind: CellKind = CellKind.TAU_GRU
    alpha: float = 1.0
    beta: float = 1.0
    use_weighting_a: bool = True
    data_seed: int = 1234
    n_train: int = 32
    n_test: int = 32
    batch_size: int = 0       # 0 = full batch
    grad_clip: float = 0.0    # 0 = off
    N: int = 0                # marker-task sequence length

    def __post_init__(self):
        if self.task not in (TASK_MACKEY_GLASS, TASK_ENSO, TASK_ADDING):
            raise ValueError(f"unknown task {self.task!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.task == TASK_ADDING and self.N < 2:
            raise ValueError(f"task {self.task!r} needs N >= 2, got {self.N}")
        if isinstance(self.variant_kind, str):
            if self.variant_kind not in _KIND_NAMES:
                raise ValueError(f"unknown variant {self.variant_kind!r}")
            self.variant_kind = _KIND_NAMES[self.variant_kind]

    @property
    def p(self) -> int:
        return 2 if self.task == TASK_ADDING else 1

    @property
    def q(self) -> int:
        return 1

    def variant(self) -> CellVariant:
        return CellVariant(kind=self.variant_kind, alpha=self.alpha, beta=self.beta,
                           use_weighting_a=self.use_weighting_a, delay_m=self.tau)


@dataclass
class AdamState:
    m: ParamGrads
    v: ParamGrads
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: CellParams) -> "AdamState":
        return cls(m=ParamGrads.zeros_like(params), v=ParamGrads.zeros_like(params))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float     # MSE; RMSE is taken at report time
    test_loss: float
    wall_seconds: float


def adam_step(params: CellParams, grads: ParamGrads, state: AdamState,
              lr: float, grad_clip: float = 0.0) -> None:
    """In-place Adam update with bias correction; optional global-norm clip."""
    if grad_clip > 0.0:
        norm = grads.global_norm()
        if norm > grad_clip:
            grads.scale(grad_clip / norm)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.arrays():
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        getattr(params, name)[...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def gen_adding_task(N: int, n_samples: int, seed: int):
    """Marker-sum task: u ~ Unif(0,1)^N; v is zero except markers at
    i ~ Unif{0..floor(N/2)-1} and j ~ Unif{ceil(N/2)-1..N-1}; the target is
    u . v, read at the final step. Returns (xs (N, 2, n_samples), targets (n,)).

    Draw order per sample: the N entries of u, then i, then j. For even N the
    ranges share one index; a collision stacks both markers there (v gets a 2).
    """
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    rng = SplitMix64(seed)
    xs = np.zeros((N, 2, n_samples))
    targets = np.empty(n_samples)
    i_range = N // 2
    j_lo = (N + 1) // 2 - 1
    j_range = N - j_lo
    for s in range(n_samples):
        u = np.array([rng.next_double() for _ in range(N)])
        i = rng.next_below(i_range)
        j = j_lo + rng.next_below(j_range)
        v = np.zeros(N)
        v[i] += 1.0
        v[j] += 1.0
        xs[:, 0, s] = u
        xs[:, 1, s] = v
        targets[s] = float(u @ v)
    return xs, targets


def make_prediction_task(series: np.ndarray):
    """One-step-ahead supervision: x_n = s_n, y_n = s_{n+1}.

    series is (n_samples, length); returns (xs (length-1, 1, n), ys (length-1, 1, n)).
    """
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    if series.shape[1] < 2:
        raise ValueError(f"series length must be >= 2, got {series.shape[1]}")
    xs = series.T[:-1][:, None, :].copy()
    ys = series.T[1:][:, None, :].copy()
    return xs, ys


@dataclass
class TaskData:
    xs_train: np.ndarray
    ys_train: np.ndarray      # (T, q, B) for per-step loss; (q, B) targets otherwise
    xs_test: np.ndarray
    ys_test: np.ndarray
    final_step_only: bool
    baseline_mse: float       # persistence for series tasks; constant-1 for markers
    dt: float = 1.0
    tau_physical: float = 0.0


_dataset_cache: dict = {}


def _series_realizations(task: str, data_seed: int, n_total: int) -> np.ndarray:
    key = (task, data_seed, n_total)
    if key not in _dataset_cache:
        gen = gen_mackey_glass if task == TASK_MACKEY_GLASS else gen_enso
        _dataset_cache[key] = gen(data_seed, n_total)
    return _dataset_cache[key]


def build_task_data(config: TrainConfig) -> TaskData:
    """Materialize train/test arrays for the configured task (cached by value key)."""
    if config.task in SERIES_TASKS:
        series = _series_realizations(config.task, config.data_seed,
                                      config.n_train + config.n_test)
        train = series[:config.n_train]
        test = series[config.n_train:]
        xs_tr, ys_tr = make_prediction_task(train)
        xs_te, ys_te = make_prediction_task(test)
        baseline = float(np.mean((test[:, 1:] - test[:, :-1]) ** 2))
        dt = MG_DT if config.task == TASK_MACKEY_GLASS else ENSO_DT
        tau_phys = MG_DELAY if config.task == TASK_MACKEY_GLASS else ENSO_DELAY
        return TaskData(xs_tr, ys_tr, xs_te, ys_te, final_step_only=False,
                        baseline_mse=baseline, dt=dt, tau_physical=tau_phys)
    key = (TASK_ADDING, config.data_seed, config.N, config.n_train + config.n_test)
    if key not in _dataset_cache:
        _dataset_cache[key] = gen_adding_task(config.N, config.n_train + config.n_test,
                                              config.data_seed)
    xs, targets = _dataset_cache[key]
    xs_tr = xs[:, :, :config.n_train]
    xs_te = xs[:, :, config.n_train:]
    ys_tr = targets[None, :config.n_train]
    ys_te = targets[None, config.n_train:]
    baseline = float(np.mean((1.0 - ys_te) ** 2))
    return TaskData(xs_tr, ys_tr, xs_te, ys_te, final_step_only=True,
                    baseline_mse=baseline)


def _loss_and_grads(params, variant, xs, ys, final_step_only, want_grads=True):
    _, youts, tape = run_batch(params, variant, xs)
    T, q, B = youts.shape
    if final_step_only:
        err = youts[-1] - ys
        loss = float(np.mean(err * err))
        if not want_grads:
            return loss, None, None
        lg = np.zeros_like(youts)
        lg[-1] = (2.0 / err.size) * err
    else:
        err = youts - ys
        loss = float(np.mean(err * err))
        if not want_grads:
            return loss, None, None
        lg = (2.0 / err.size) * err
    return loss, lg, tape


def evaluate_mse(params: CellParams, variant: CellVariant, xs, ys,
                 final_step_only: bool) -> float:
    loss, _, _ = _loss_and_grads(params, variant, xs, ys, final_step_only,
                                 want_grads=False)
    return loss


@dataclass
class TrainResult:
    config: TrainConfig
    params: CellParams
    records: list
    final_train_mse: float
    final_test_mse: float
    baseline_mse: float


def train(config: TrainConfig, data: TaskData | None = None) -> TrainResult:
    """Run the configured training loop; deterministic in (config contents).

    Per epoch: minibatch passes in fixed slice order (full batch when
    batch_size is 0 or covers the split), one Adam update per batch, then a
    test-split evaluation at the updated parameters. Aborts on non-finite loss.
    """
    if data is None:
        data = build_task_data(config)
    variant = config.variant()
    params = init_params(config.d, config.p, config.q, config.seed)
    state = AdamState.init(params)
    n_train = data.xs_train.shape[2]
    bs = config.batch_size if 0 < config.batch_size < n_train else n_train
    records = []
    train_mse = float("nan")
    for epoch in range(1, config.epochs + 1):
        tick = time.perf_counter()
        total, weight = 0.0, 0
        for lo in range(0, n_train, bs):
            hi = min(lo + bs, n_train)
            xs = data.xs_train[:, :, lo:hi]
            ys = data.ys_train[..., lo:hi]
            loss, lg, tape = _loss_and_grads(params, variant, xs, ys,
                                             data.final_step_only)
            if not np.isfinite(loss):
                raise RuntimeError(f"training loss became non-finite at epoch {epoch}")
            grads = backward(tape, params, lg)
            adam_step(params, grads, state, config.lr, config.grad_clip)
            total += loss * (hi - lo)
            weight += hi - lo
        train_mse = total / weight
        test_mse = evaluate_mse(params, variant, data.xs_test, data.ys_test,
                                data.final_step_only)
        if not np.isfinite(test_mse):
            raise RuntimeError(f"test loss became non-finite at epoch {epoch}")
        records.append(EpochRecord(epoch, train_mse, test_mse,
                                   time.perf_counter() - tick))
    return TrainResult(config=config, params=params, records=records,
                       final_train_mse=train_mse,
                       final_test_mse=records[-1].test_loss,
                       baseline_mse=data.baseline_mse)


def worker_cap(requested: int) -> int:
    """Worker count honoring the TAU_RNN_THREADS environment cap."""
    cap = os.environ.get("TAU_RNN_THREADS")
    limit = os.cpu_count() or 1
    if cap is not None:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ValueError(f"TAU_RNN_THREADS must be an integer, got {cap!r}")
    return max(1, min(requested, limit))


def _final_mse_job(args):
    config_kwargs, seed = args
    cfg = TrainConfig(**config_kwargs)
    cfg.seed = seed
    return train(cfg).final_test_mse


def _config_kwargs(config: TrainConfig) -> dict:
    return {
        "task": config.task, "d": config.d, "tau": config.tau, "lr": config.lr,
        "epochs": config.epochs, "seed": config.seed,
        "variant_kind": config.variant_kind, "alpha": config.alpha,
        "beta": config.beta, "use_weighting_a": config.use_weighting_a,
        "data_seed": config.data_seed, "n_train": config.n_train,
        "n_test": config.n_test, "batch_size": config.batch_size,
        "grad_clip": config.grad_clip, "N": config.N,
    }


def _run_seeds(config: TrainConfig, seeds: list[int]) -> list[float]:
    """Final test MSE per init seed; parallel across processes when allowed."""
    jobs = [(_config_kwargs(config), s) for s in seeds]
    workers = worker_cap(len(jobs))
    if workers <= 1:
        return [_final_mse_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_final_mse_job, jobs))


@dataclass
class SeedSpread:
    seeds: list[int]
    metrics: list[float]
    min: float
    max: float
    mean: float
    std: float


def evaluate_seed_spread(config: TrainConfig, n_seeds: int = 8) -> SeedSpread:
    """Final test MSE over init seeds config.seed .. config.seed + n_seeds - 1.

    The dataset is pinned by config.data_seed, so the spread isolates
    initialization/training variance.
    """
    if n_seeds < 2:
        raise ValueError(f"n_seeds must be >= 2, got {n_seeds}")
    seeds = [config.seed + i for i in range(n_seeds)]
    metrics = _run_seeds(config, seeds)
    arr = np.array(metrics)
    return SeedSpread(seeds=seeds, metrics=metrics, min=float(arr.min()),
                      max=float(arr.max()), mean=float(arr.mean()),
                      std=float(arr.std()))


STANDARD_ABLATION_ROWS = ("full", "alpha0", "beta0", "simple")


def ablation_overrides(name: str) -> dict:
    """Named ablation rows; 'tau:<k>' rows sweep the cell delay."""
    table = {
        "full": {},
        "alpha0": {"alpha": 0.0},
        "beta0": {"beta": 0.0},
        "noweight": {"use_weighting_a": False},
        "simple": {"variant_kind": CellKind.SIMPLE_DELAY_GRU},
    }
    if name in table:
        return table[name]
    if name.startswith("tau:"):
        return {"tau": int(name.split(":", 1)[1])}
    raise ValueError(f"unknown ablation row {name!r}")


@dataclass
class AblationRow:
    name: str
    alpha: float
    beta: float
    tau: int
    weighting: bool
    test_metric: float
    param_count: int


def effective_count_for(d: int, p: int, q: int, variant: CellVariant) -> int:
    shapes = param_shapes(d, p, q)
    dead = dead_param_groups(variant)
    return sum(int(np.prod(shape)) for name, shape in shapes.items()
               if name not in dead)


def ablate(config: TrainConfig, rows: list[str], n_seeds: int = 1) -> list[AblationRow]:
    """Train each named row under the shared data/seed protocol.

    test_metric is the final test MSE, the median over init seeds
    config.seed .. config.seed + n_seeds - 1 (all rows see the same seeds and
    the same dataset). param_count excludes groups the row leaves dead.
    """
    if not rows:
        raise ValueError("ablation row list is empty")
    out = []
    for name in rows:
        cfg = replace(config, **ablation_overrides(name))
        if n_seeds == 1:
            metric = train(cfg).final_test_mse
        else:
            metrics = _run_seeds(cfg, [cfg.seed + i for i in range(n_seeds)])
            metric = float(np.median(metrics))
        variant = cfg.variant()
        out.append(AblationRow(
            name=name, alpha=variant.alpha, beta=variant.beta, tau=variant.delay_m,
            weighting=variant.use_weighting_a, test_metric=metric,
            param_count=effective_count_for(cfg.d, cfg.p, cfg.q, variant)))
    return out
