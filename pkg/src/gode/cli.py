"""Command line interface: ``gode {train,eval,grid,gradcheck,params,trajectory}``.

Configuration precedence: built-in defaults < ``--config`` JSON file < flags.
The JSON file has up to four top-level keys::

    {"model": {...ModelSpec fields, "solver": {...SolverConfig fields}},
     "train": {...TrainConfig fields},
     "data":  {"dataset": "mnist", "data_dir": "...", "subset": 5000, ...},
     "out":   "runs"}

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset, load_cifar10, load_mnist, make_synthetic
from .models import (
    ModelConfigError,
    ModelSpec,
    build,
    count_params,
    export_weight_trajectory,
    load_checkpoint,
)
from .odeint import SolverConfigError
from .train import TrainConfig, cross_entropy, evaluate, train

log = logging.getLogger("gode")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
GRADCHECK_TOL = 1e-4
# gradients whose norm is below this are compared absolutely (FD roundoff is ~1e-12)
GRADCHECK_FLOOR = 1e-6


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    subset: int | None = None
    test_subset: int | None = None
    synthetic_size: int = 200
    subset_seed: int = 0


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out: str = "runs"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", "data", "out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        try:
            if "model" in d:
                cfg.model = ModelSpec.from_dict(d["model"])
            if "train" in d:
                cfg.train = _from_fields(TrainConfig, d["train"], "train")
            if "data" in d:
                cfg.data = _from_fields(DataConfig, d["data"], "data")
        except ModelConfigError as exc:
            raise ConfigError(str(exc)) from None
        if "out" in d:
            cfg.out = str(d["out"])
        return cfg

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.digest()}-s{self.train.seed}"


def _from_fields(cls, d: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    bad = set(d) - names
    if bad:
        raise ConfigError(f"unknown {section} keys: {sorted(bad)}")
    return cls(**d)


def _parse_values(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--family", choices=["resnet", "node", "gode"])
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"])
    p.add_argument("--data-dir")
    p.add_argument("--width", type=int)
    p.add_argument("--blocks", type=int, help="residual blocks (resnet)")
    p.add_argument("--h-scale", type=float, help="residual scale (resnet)")
    p.add_argument("--n", type=int, help="spline control points")
    p.add_argument("--k", type=int, help="spline degree")
    p.add_argument("--T", type=float, help="integration end time")
    p.add_argument("--layers", type=int, help="conv layers inside the dynamics")
    p.add_argument("--bias-mode", choices=["constant", "spline"])
    p.add_argument("--no-time-channel", action="store_true", help="node: drop the t feature map")
    p.add_argument("--solver", choices=["euler", "dopri5"])
    p.add_argument("--step", type=float)
    p.add_argument("--rtol", type=float)
    p.add_argument("--atol", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--eval-batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-drops", help="comma-separated epochs")
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--subset", type=int, help="train subset size")
    p.add_argument("--test-subset", type=int)
    p.add_argument("--synthetic-size", type=int)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--out")


def resolve_config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg = RunConfig.from_dict(raw)
    else:
        cfg = RunConfig()
    m, t, d = cfg.model, cfg.train, cfg.data
    sets = [
        ("family", m, "family"), ("width", m, "width"), ("blocks", m, "num_blocks"),
        ("h_scale", m, "h_scale"), ("n", m, "n"), ("k", m, "k"), ("layers", m, "dynamics_layers"),
        ("bias_mode", m, "bias_mode"),
        ("solver", m.solver, "method"), ("step", m.solver, "step_size"), ("T", m.solver, "t1"),
        ("rtol", m.solver, "rtol"), ("atol", m.solver, "atol"),
        ("epochs", t, "epochs"), ("batch", t, "batch_size"), ("eval_batch", t, "eval_batch_size"),
        ("lr", t, "lr0"), ("momentum", t, "momentum"), ("weight_decay", t, "weight_decay"),
        ("seed", t, "seed"), ("precision", t, "precision"),
        ("dataset", d, "dataset"), ("data_dir", d, "data_dir"), ("subset", d, "subset"),
        ("test_subset", d, "test_subset"), ("synthetic_size", d, "synthetic_size"),
    ]
    for flag, obj, attr in sets:
        value = getattr(args, flag, None)
        if value is not None:
            setattr(obj, attr, value)
    if getattr(args, "no_time_channel", False):
        m.time_channel = False
    if getattr(args, "lr_drops", None) is not None:
        t.lr_drop_epochs = [int(v) for v in _parse_values(args.lr_drops)]
    if getattr(args, "out", None):
        cfg.out = args.out
    m.in_channels = 3 if d.dataset == "cifar10" else 1
    # drop epochs beyond a short run so the schedule stays valid
    t.lr_drop_epochs = [e for e in t.lr_drop_epochs if e < t.epochs]
    try:
        m.validate()
        t.validate()
    except (ModelConfigError, SolverConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.dataset == "synthetic":
        train_ds = make_synthetic(d.synthetic_size, seed=cfg.train.seed)
        test = make_synthetic(max(10, d.synthetic_size // 2), seed=cfg.train.seed + 1)
        test_ds = Dataset(test.images, test.labels, "test")
    else:
        loader = load_mnist if d.dataset == "mnist" else load_cifar10
        if not d.data_dir:
            raise ConfigError(f"--data-dir is required for dataset {d.dataset}")
        train_ds = loader(d.data_dir, "train")
        test_ds = loader(d.data_dir, "test")
    train_ds = train_ds.subset(d.subset, d.subset_seed)
    test_ds = test_ds.subset(d.test_subset, d.subset_seed)
    return train_ds, test_ds


def _setup_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return run_dir


def _attach_log(run_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(run_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    logging.getLogger("gode").addHandler(handler)
    logging.getLogger("gode").setLevel(logging.INFO)
    return handler


def _run_training(cfg: RunConfig, run_dir: Path):
    ad.set_precision(cfg.train.precision)
    train_ds, test_ds = load_data(cfg)
    model = build(cfg.model, seed=cfg.train.seed)
    report = train(model, train_ds, test_ds, cfg.train, out_dir=run_dir)
    report.to_csv(run_dir / "report.csv")
    return model, report


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    run_dir = _setup_run_dir(cfg)
    handler = _attach_log(run_dir)
    try:
        _, report = _run_training(cfg, run_dir)
    finally:
        logging.getLogger("gode").removeHandler(handler)
        handler.close()
    final = report.epochs[-1].test_error_pct if report.epochs else float("nan")
    print(f"run_dir={run_dir}")
    print(f"final_test_error_pct={final:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ad.set_precision(args.precision or "f32")
    model = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args)
    cfg.model = model.spec
    _, test_ds = load_data(cfg)
    solver = None
    if args.solver is not None:
        solver = dataclasses.replace(model.spec.solver, method=args.solver)
        if args.rtol is not None:
            solver.rtol = args.rtol
        if args.atol is not None:
            solver.atol = args.atol
        if args.step is not None:
            solver.step_size = args.step
    err = evaluate(model, test_ds, cfg.train.eval_batch_size, solver)
    print(f"test_error_pct={err:.4f}")
    return EXIT_OK


GRID_AXES = {"n": ("n",), "k": ("k",), "T": ("solver", "t1"), "layers": ("dynamics_layers",)}


def time_iteration(model, ds: Dataset, batch_size: int, iters: int = 3) -> float:
    """Median seconds of one forward+backward pass on the first batch."""
    x, y = ds.images[:batch_size], ds.labels[:batch_size]
    times = []
    for _ in range(iters):
        start = time.perf_counter()
        ad.backward(cross_entropy(model(ad.Tensor(x)), y))
        times.append(time.perf_counter() - start)
    for p in model.parameters():
        p.grad = None
    return float(np.median(times))


def cmd_grid(args) -> int:
    base = resolve_config(args)
    if base.model.family != "gode":
        raise ConfigError("grid runs require --family gode")
    axis = args.axis
    values = _parse_values(args.values)
    if not values:
        raise ConfigError("--values must list at least one value")
    rows = []
    for v in values:
        cfg = copy.deepcopy(base)
        if axis == "T":
            cfg.model.solver.t1 = v
        elif axis == "n":
            cfg.model.n = int(v)
        elif axis == "k":
            cfg.model.k = int(v)
        else:
            cfg.model.dynamics_layers = int(v)
        try:
            cfg.model.validate()
        except (ModelConfigError, SolverConfigError) as exc:
            raise ConfigError(f"{axis}={v}: {exc}") from None
        nparams = count_params(cfg.model)
        if cfg.train.epochs > 0:
            run_dir = _setup_run_dir(cfg)
            model, report = _run_training(cfg, run_dir)
            sec = float(np.median([r.sec_per_iter for r in report.epochs]))
            err = report.epochs[-1].test_error_pct
        else:
            ad.set_precision(cfg.train.precision)
            train_ds, test_ds = load_data(cfg)
            model = build(cfg.model, seed=cfg.train.seed)
            sec = time_iteration(model, train_ds, cfg.train.batch_size, args.time_iters)
            err = evaluate(model, test_ds, cfg.train.eval_batch_size)
        label = f"{v:g}" if axis == "T" else str(int(v))
        rows.append([cfg.model.n, cfg.model.k, f"{cfg.model.solver.t1:g}", cfg.model.dynamics_layers,
                     nparams, f"{sec:.6g}", f"{err:.4f}"])
        print(f"{axis}={label} params={nparams} sec_per_iter={sec:.4g} test_error_pct={err:.2f}")
    out = Path(args.csv) if args.csv else base.run_dir().parent / f"grid-{axis}-{base.digest()}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "k", "T", "layers", "params", "sec_per_iter", "test_error_pct"])
        w.writerows(rows)
    print(f"grid_csv={out}")
    return EXIT_OK


def tiny_spec(family: str) -> ModelSpec:
    spec = ModelSpec(family=family, width=4, in_channels=1, dynamics_layers=2, num_blocks=3, n=3, k=1)
    spec.solver.step_size = 0.25
    return spec


def gradient_check(model, x: np.ndarray, y: np.ndarray, eps: float = 1e-4) -> dict[str, float]:
    """Relative error ``|g - g_fd| / max(|g|, |g_fd|, floor)`` (Frobenius norms) per parameter tensor."""
    named = model.named_parameters()
    for _, p in named:
        p.grad = None
    ad.backward(cross_entropy(model(ad.Tensor(x)), y))
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in named}
    errors = {}
    for name, p in named:
        fd = ad.finite_difference_grad(lambda _p: cross_entropy(model(ad.Tensor(x)), y), p, eps)
        g = analytic[name]
        denom = max(np.linalg.norm(g), np.linalg.norm(fd), GRADCHECK_FLOOR)
        errors[name] = float(np.linalg.norm(g - fd) / denom)
    return errors


def cmd_gradcheck(args) -> int:
    family = args.family or "gode"
    seed = args.seed if args.seed is not None else 0
    with ad.precision("f64"):
        spec = tiny_spec(family)
        if args.n is not None:
            spec.n = args.n
        if args.k is not None:
            spec.k = args.k
        try:
            spec.validate()
        except (ModelConfigError, SolverConfigError) as exc:
            raise ConfigError(str(exc)) from None
        model = build(spec, seed=seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.uniform(0, 1, size=(2, 1, 8, 8))
        y = rng.integers(0, 10, size=2)
        errors = gradient_check(model, x, y)
    nparams = model.num_parameters()
    worst = max(errors, key=errors.get)
    for name, err in errors.items():
        print(f"{name}\t{err:.3e}")
    print(f"family={family} params={nparams} max_rel_err={errors[worst]:.3e} worst={worst}")
    if errors[worst] > GRADCHECK_TOL:
        print(f"FAIL: {worst} relative error {errors[worst]:.3e} > {GRADCHECK_TOL:g}", file=sys.stderr)
        return EXIT_FAIL
    print("PASS")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = resolve_config(args)
    total = count_params(cfg.model)
    model = build(cfg.model, seed=0)
    for stage, size in model.stage_sizes().items():
        print(f"{stage}\t{size}")
    print(f"total\t{total}")
    return EXIT_OK


def cmd_trajectory(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.spec.family not in ("node", "gode"):
        raise ConfigError(f"trajectory export needs a node or gode checkpoint, got {model.spec.family}")
    if args.t_count < 1:
        raise ConfigError("--t-count must be >= 1")
    t0, t1 = model.spec.solver.t0, model.spec.solver.t1
    grid = [t0] if args.t_count == 1 else list(np.linspace(t0, t1, args.t_count))
    try:
        table = export_weight_trajectory(model, args.layer, grid)
    except IndexError as exc:
        raise ConfigError(str(exc)) from None
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        write_trajectory_csv(fh, grid, table)
    finally:
        if args.output:
            fh.close()
    return EXIT_OK


def write_trajectory_csv(fh, grid, table: np.ndarray) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "kernel_entry_id", "value"])
    for t, row in zip(grid, table):
        for j, v in enumerate(row):
            w.writerow([repr(float(t)), j, repr(float(v))])


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of ``write_trajectory_csv``: returns ``(t_grid, table)``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ts = sorted({float(r["t"]) for r in rows})
    entries = max(int(r["kernel_entry_id"]) for r in rows) + 1
    table = np.zeros((len(ts), entries))
    pos = {t: i for i, t in enumerate(ts)}
    for r in rows:
        table[pos[float(r["t"])], int(r["kernel_entry_id"])] = float(r["value"])
    return np.array(ts), table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test error of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="one run per value along an axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=sorted(GRID_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--csv", help="aggregated CSV path")
    p.add_argument("--time-iters", type=int, default=3)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    p.add_argument("--family", choices=["resnet", "node", "gode"])
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="count trainable parameters")
    _add_common(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("trajectory", help="kernel weights along integration time as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--t-count", type=int, default=21)
    p.add_argument("--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_trajectory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelConfigError, SolverConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
