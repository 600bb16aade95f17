"""Command-line entry point.

Subcommands: gen-data, train, ablate, seed-spread, verify. Every command is
deterministic in its flags plus the seeds named in the config; outputs are
CSV tables, a binary params file, an optional SVG chart, and a JSON run
manifest written atomically next to the other outputs. Timestamps (manifest
start/end, the wall_seconds CSV column) are the only fields exempt from
bit-reproducibility.

Config files are flat key = value text; see CONFIG_KEYS for the accepted
keys. Exit codes: 0 success, 1 runtime failure, 2 config error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .cells import save_params
from .dde import gen_enso, gen_mackey_glass, write_series_file
from .dde import ENSO_DELAY, ENSO_DT, MG_DELAY, MG_DT
from .training import (
    STANDARD_ABLATION_ROWS,
    AblationRow,
    TrainConfig,
    ablate,
    ablation_overrides,
    effective_count_for,
    evaluate_seed_spread,
    gen_adding_task,
    train,
)
from .verify import VERIFY_SUITES, run_suites


class ConfigError(Exception):
    """Raised for malformed configs and bad usage; mapped to exit code 2."""


# key -> (parser, required, default); parsed values feed TrainConfig plus the
# sweep controls consumed by ablate / seed-spread.
def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "on", "yes"):
        return True
    if low in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


CONFIG_KEYS = {
    "task": (str, True, None),
    "d": (int, True, None),
    "tau": (int, True, None),
    "lr": (float, True, None),
    "epochs": (int, True, None),
    "seed": (int, True, None),
    "variant": (str, False, "taugru"),
    "alpha": (float, False, 1.0),
    "beta": (float, False, 1.0),
    "weighting": (_parse_bool, False, True),
    "data_seed": (int, False, 1234),
    "n_train": (int, False, 32),
    "n_test": (int, False, 32),
    "batch_size": (int, False, 0),
    "grad_clip": (float, False, 0.0),
    "N": (int, False, 0),
    "ablate": (str, False, ",".join(STANDARD_ABLATION_ROWS)),
    "ablate_seeds": (int, False, 8),
    "n_seeds": (int, False, 8),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat `key = value` lines; '#' starts a comment, blanks ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(
                f"{source}:{lineno}: unknown key {key!r}; valid keys: "
                + ", ".join(sorted(CONFIG_KEYS)))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parse, _, _ = CONFIG_KEYS[key]
        try:
            values[key] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}")
    for key, (_, required, default) in CONFIG_KEYS.items():
        if key not in values:
            if required:
                raise ConfigError(f"{source}: missing required key {key!r}")
            values[key] = default
    return values


def load_config(path: str) -> tuple[TrainConfig, dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    values = parse_config_text(text, source=path)
    try:
        config = TrainConfig(
            task=values["task"], d=values["d"], tau=values["tau"],
            lr=values["lr"], epochs=values["epochs"], seed=values["seed"],
            variant_kind=values["variant"], alpha=values["alpha"],
            beta=values["beta"], use_weighting_a=values["weighting"],
            data_seed=values["data_seed"], n_train=values["n_train"],
            n_test=values["n_test"], batch_size=values["batch_size"],
            grad_clip=values["grad_clip"], N=values["N"])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}")
    return config, values


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    outputs: list = field(default_factory=list)

    def start(self) -> "RunManifest":
        self.started_at = datetime.now(timezone.utc).isoformat()
        return self

    def finish(self) -> None:
        self.finished_at = datetime.now(timezone.utc).isoformat()

    def write(self, path: str) -> None:
        """Atomic write: the manifest appears complete or not at all.

        Outputs are recorded by name only (they sit next to the manifest), so
        the same run into a different directory produces identical bytes.
        """
        payload = json.dumps({
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": self.version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": sorted(os.path.basename(p) for p in self.outputs),
        }, indent=2, sort_keys=True) + "\n"
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(payload)
        os.replace(tmp, path)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_epoch_csv(path: str, records) -> None:
    """epoch,train_rmse,test_rmse,wall_seconds (RMSE = sqrt of the MSE loss)."""
    lines = ["epoch,train_rmse,test_rmse,wall_seconds"]
    for r in records:
        lines.append(f"{r.epoch},{_fmt(math.sqrt(r.train_loss))},"
                     f"{_fmt(math.sqrt(r.test_loss))},{r.wall_seconds:.6f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_results_csv(path: str, rows) -> None:
    """name,alpha,beta,tau,weighting,test_metric,param_count."""
    lines = ["name,alpha,beta,tau,weighting,test_metric,param_count"]
    for r in rows:
        lines.append(f"{r.name},{_fmt(r.alpha)},{_fmt(r.beta)},{r.tau},"
                     f"{int(r.weighting)},{_fmt(r.test_metric)},{r.param_count}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def svg_line_chart(series, *, title: str = "", log_y: bool = False,
                   x_label: str = "", y_label: str = "") -> str:
    """Render labelled (xs, ys) polylines into a fixed 800x400 SVG string.

    Pure function of its arguments. With log_y, points with y <= 0 are
    dropped and the axis is decorated in powers of ten.
    """
    width, height = 800, 400
    ml, mr, mt, mb = 64, 16, 30, 42
    plot_w, plot_h = width - ml - mr, height - mt - mb

    cleaned = []
    for label, xs, ys in series:
        pts = [(float(x), float(y)) for x, y in zip(xs, ys)
               if not log_y or y > 0.0]
        if pts:
            cleaned.append((label, pts))
    if not cleaned:
        raise ValueError("no plottable points")

    def ty(y: float) -> float:
        return math.log10(y) if log_y else y

    all_x = [x for _, pts in cleaned for x, _ in pts]
    all_y = [ty(y) for _, pts in cleaned for _, y in pts]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x1 - x0 <= 0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 - y0 <= 0:
        y0, y1 = y0 - 1.0, y1 + 1.0

    def px(x: float) -> float:
        return ml + (x - x0) / (x1 - x0) * plot_w

    def py(y: float) -> float:
        return mt + (y1 - ty(y)) / (y1 - y0) * plot_h

    def ylab(v: float) -> str:
        return f"1e{v:g}" if log_y else f"{v:.4g}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
        f'width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333" stroke-width="1"/>',
    ]
    if title:
        parts.append(f'<text x="{ml}" y="20" font-family="sans-serif" '
                     f'font-size="14" fill="#111">{title}</text>')
    n_ticks = 4
    for i in range(n_ticks + 1):
        yv = y0 + (y1 - y0) * i / n_ticks
        ypix = mt + plot_h - plot_h * i / n_ticks
        parts.append(f'<line x1="{ml}" y1="{ypix:.2f}" x2="{ml + plot_w}" '
                     f'y2="{ypix:.2f}" stroke="#ddd" stroke-width="1"/>')
        parts.append(f'<text x="{ml - 6}" y="{ypix + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11" fill="#333">'
                     f'{ylab(yv)}</text>')
        xv = x0 + (x1 - x0) * i / n_ticks
        xpix = ml + plot_w * i / n_ticks
        parts.append(f'<text x="{xpix:.2f}" y="{height - mb + 16}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11" fill="#333">{xv:.4g}</text>')
    if x_label:
        parts.append(f'<text x="{ml + plot_w / 2:.2f}" y="{height - 6}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="12" fill="#111">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{mt + plot_h / 2:.2f}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="12" fill="#111" transform="rotate(-90 14 '
                     f'{mt + plot_h / 2:.2f})">{y_label}</text>')
    for idx, (label, pts) in enumerate(cleaned):
        color = _PALETTE[idx % len(_PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        lx = ml + plot_w - 150
        lyy = mt + 14 + 16 * idx
        parts.append(f'<line x1="{lx}" y1="{lyy - 4}" x2="{lx + 22}" '
                     f'y2="{lyy - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 28}" y="{lyy}" font-family="sans-serif" '
                     f'font-size="11" fill="#111">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_from_epoch_csv(csv_text: str, *, title: str = "",
                       log_y: bool = True) -> str:
    """Chart the train/test RMSE columns of an epoch CSV (pure text -> text)."""
    lines = [ln for ln in csv_text.strip().splitlines() if ln.strip()]
    header = lines[0].split(",")
    if header[:3] != ["epoch", "train_rmse", "test_rmse"]:
        raise ValueError(f"unexpected epoch CSV header: {lines[0]!r}")
    epochs, train, test = [], [], []
    for ln in lines[1:]:
        cols = ln.split(",")
        epochs.append(float(cols[0]))
        train.append(float(cols[1]))
        test.append(float(cols[2]))
    return svg_line_chart(
        [("train_rmse", epochs, train), ("test_rmse", epochs, test)],
        title=title, log_y=log_y, x_label="epoch", y_label="RMSE")


def _out_base(out_dir: str, stem: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, stem)


def cmd_gen_data(args) -> int:
    task = args.task
    out = args.out or f"{task}.csv"
    manifest = RunManifest(
        command=" ".join(["gen-data", task, f"--seed={args.seed}",
                          f"--n={args.n}", f"--N={args.N}"]),
        config_hash=_sha256(
            f"{task}|seed={args.seed}|n={args.n}|N={args.N}".encode()),
        seed=args.seed).start()
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    if task == "adding":
        if args.N < 2:
            raise ConfigError("gen-data adding requires --N >= 2")
        xs, targets = gen_adding_task(args.N, args.n, args.seed)
        write_adding_file(out, xs, targets)
    elif task == "mackey_glass":
        series = gen_mackey_glass(args.seed, args.n)
        write_series_file(out, "mackey_glass", MG_DT, MG_DELAY, series)
    else:
        series = gen_enso(args.seed, args.n)
        write_series_file(out, "enso", ENSO_DT, ENSO_DELAY, series)
    manifest.outputs.append(out)
    manifest.finish()
    manifest_path = os.path.splitext(out)[0] + "_manifest.json"
    manifest.write(manifest_path)
    print(f"wrote {out} and {manifest_path}")
    return 0


def write_adding_file(path: str, xs: np.ndarray, targets: np.ndarray) -> None:
    """One sample per row: N marker-stream u values, N v values, the target."""
    N, two, n = xs.shape
    if two != 2:
        raise ValueError(f"xs must be (N, 2, n_samples), got {xs.shape}")
    lines = [f"# adding, N={N}, n_samples={n}"]
    for s in range(n):
        row = list(xs[:, 0, s]) + list(xs[:, 1, s]) + [targets[s]]
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_adding_file(path: str):
    """Inverse of write_adding_file: returns (xs (N,2,n), targets (n,))."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("# adding,"):
            raise ValueError(f"{path}: not a marker-task file: {header!r}")
        N = int(header.split("N=")[1].split(",")[0])
        n = int(header.split("n_samples=")[1])
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (n, 2 * N + 1):
        raise ValueError(f"{path}: expected shape {(n, 2 * N + 1)}, "
                         f"got {data.shape}")
    xs = np.empty((N, 2, n))
    xs[:, 0, :] = data[:, :N].T
    xs[:, 1, :] = data[:, N:2 * N].T
    return xs, data[:, -1].copy()


def _manifest_for_config(subcommand: str, config_path: str, seed: int):
    with open(config_path, "rb") as fh:
        digest = _sha256(fh.read())
    return RunManifest(command=f"{subcommand} {config_path}",
                       config_hash=digest, seed=seed).start()


def cmd_train(args) -> int:
    config, _ = load_config(args.config)
    manifest = _manifest_for_config("train", args.config, config.seed)
    stem = os.path.splitext(os.path.basename(args.config))[0]
    base = _out_base(args.out_dir, stem)
    result = train(config)

    epoch_csv = base + "_epochs.csv"
    write_epoch_csv(epoch_csv, result.records)
    manifest.outputs.append(epoch_csv)

    variant = config.variant()
    row_name = args.row_name
    results_csv = base + "_results.csv"
    write_results_csv(results_csv, [AblationRow(
        name=row_name, alpha=variant.alpha, beta=variant.beta,
        tau=variant.delay_m, weighting=variant.use_weighting_a,
        test_metric=result.final_test_mse,
        param_count=effective_count_for(config.d, config.p, config.q, variant))])
    manifest.outputs.append(results_csv)

    params_path = base + "_params.bin"
    save_params(params_path, result.params, variant.kind)
    manifest.outputs.append(params_path)

    if args.svg:
        with open(epoch_csv, "r", encoding="utf-8") as fh:
            chart = svg_from_epoch_csv(fh.read(), title=stem)
        svg_path = base + "_loss.svg"
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(chart)
        manifest.outputs.append(svg_path)

    manifest.finish()
    manifest.write(base + "_manifest.json")
    print(f"final test MSE {result.final_test_mse:.6e} "
          f"(baseline {result.baseline_mse:.6e}) over {config.epochs} epochs")
    print(f"outputs: {', '.join(sorted(manifest.outputs))}")
    return 0


def cmd_ablate(args) -> int:
    config, values = load_config(args.config)
    rows = [r.strip() for r in values["ablate"].split(",") if r.strip()]
    if not rows:
        raise ConfigError(f"{args.config}: 'ablate' names no rows")
    for name in rows:
        try:
            ablation_overrides(name)
        except ValueError as exc:
            raise ConfigError(f"{args.config}: {exc}")
    manifest = _manifest_for_config("ablate", args.config, config.seed)
    stem = os.path.splitext(os.path.basename(args.config))[0]
    base = _out_base(args.out_dir, stem)
    table = ablate(config, rows, n_seeds=values["ablate_seeds"])
    results_csv = base + "_results.csv"
    write_results_csv(results_csv, table)
    manifest.outputs.append(results_csv)
    manifest.finish()
    manifest.write(base + "_manifest.json")
    for row in table:
        print(f"{row.name:10s} test_metric={row.test_metric:.6e} "
              f"params={row.param_count}")
    print(f"outputs: {', '.join(sorted(manifest.outputs))}")
    return 0


def cmd_seed_spread(args) -> int:
    config, values = load_config(args.config)
    if values["n_seeds"] < 2:
        raise ConfigError(f"{args.config}: n_seeds must be >= 2")
    manifest = _manifest_for_config("seed-spread", args.config, config.seed)
    stem = os.path.splitext(os.path.basename(args.config))[0]
    base = _out_base(args.out_dir, stem)
    spread = evaluate_seed_spread(config, n_seeds=values["n_seeds"])
    csv_path = base + "_seed_spread.csv"
    lines = ["seed,test_mse"]
    for s, m in zip(spread.seeds, spread.metrics):
        lines.append(f"{s},{_fmt(m)}")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    manifest.outputs.append(csv_path)
    manifest.finish()
    manifest.write(base + "_manifest.json")
    print(f"test MSE over {len(spread.seeds)} seeds: min={spread.min:.6e} "
          f"max={spread.max:.6e} mean={spread.mean:.6e} std={spread.std:.6e}")
    return 0


def cmd_verify(args) -> int:
    names = list(VERIFY_SUITES) if args.suite == "all" else [args.suite]
    results = run_suites(names, seed=args.seed)
    failed = False
    for name in names:
        res = results[name]
        print(res.summary_line())
        for msg in res.failures:
            print(f"    {msg}")
        failed = failed or not res.passed
    return 3 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taurnn",
        description="Delay-gated recurrent cells: data, training, verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset file")
    p.add_argument("task", choices=["mackey_glass", "enso", "adding"])
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--N", type=int, default=0,
                   help="sequence length (adding task only)")
    p.add_argument("--out", default=None, help="output path (default <task>.csv)")
    p.set_defaults(func=cmd_gen_data)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate),
                     ("seed-spread", cmd_seed_spread)):
        p = sub.add_parser(name, help=f"{name} from a config file")
        p.add_argument("config")
        p.add_argument("--out-dir", default=".")
        if name == "train":
            p.add_argument("--svg", action="store_true",
                           help="also render the loss curves as SVG")
            p.add_argument("--row-name", default="full",
                           help="row label in the results CSV")
        p.set_defaults(func=fn)

    p = sub.add_parser("verify", help="run numerical verification batteries")
    p.add_argument("suite", choices=["all"] + sorted(VERIFY_SUITES))
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
