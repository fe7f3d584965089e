"""Command line entry point: ``acenode {train,eval,gradcheck,demo-crossing}``.

Exit codes: 0 success, 2 configuration or data error, 3 numerical or
training failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adjoint import DataError, LossSpec, SizeError, predict
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (Dataset, IdxFormatError, append_split, load_idx_images, structured_coupling, synth_crossing,
                   synth_var_series)
from .gradcheck import MAX_TOY_DIM, run_gradcheck, toy_dim
from .metrics import AlignmentError, mse_over_time, write_curve_csv
from .model import AceModel, build_model
from .solvers import SolverError, Trajectory, integrate
from .tensor import ConfigurationError, NumericError, Tensor
from .train import TrainingAborted, TrainRun, evaluate, train

log = logging.getLogger("acenode")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_CONFIG_ERRORS = (ConfigurationError, DataError, IdxFormatError, CheckpointFormatError, AlignmentError, SizeError,
                  FileNotFoundError)
_NUMERIC_ERRORS = (TrainingAborted, SolverError, NumericError, FloatingPointError)


# building blocks -----------------------------------------------------------

def make_coupling(cfg: RunConfig) -> np.ndarray:
    d, s = cfg.data.d, cfg.data.coupling_strength
    if cfg.data.coupling == "zero":
        return np.zeros((d, d))
    if cfg.data.coupling == "diagonal":
        return s * np.eye(d)
    return structured_coupling(d, s)


def make_dataset(cfg: RunConfig) -> Dataset:
    task, dc = cfg.run.task, cfg.data
    if task == "crossing":
        return synth_crossing(dc.n, dc.noise, dc.seed)
    if task == "var_forecast":
        return synth_var_series(dc.d, dc.length, make_coupling(cfg), dc.noise, dc.seed, window=dc.window)
    for key in ("images", "labels", "test_images", "test_labels"):
        if not getattr(dc, key):
            raise ConfigurationError(f"data.{key} must name an IDX file for the mnist task")
        if not Path(getattr(dc, key)).is_file():
            raise ConfigurationError(f"data.{key}: {getattr(dc, key)} not found")
    base = load_idx_images(dc.images, dc.labels, dc.limit, dc.seed, dc.downsample)
    held_out = load_idx_images(dc.test_images, dc.test_labels, dc.test_limit, dc.seed, dc.downsample,
                               val_fraction=0.0)
    return append_split(base, held_out, "test")


def make_model(cfg: RunConfig, data: Dataset | None = None) -> AceModel:
    rng = np.random.default_rng(cfg.training.seed)
    dims = {"hidden": cfg.model.hidden, "d": cfg.data.d, "channels": cfg.model.channels}
    if cfg.run.task == "mnist":
        dims["image_size"] = int(data.inputs.shape[-1]) if data is not None else (14 if cfg.data.downsample else 28)
    model = build_model(cfg.run.task, cfg.run.model, rng, **dims)
    model.t1 = cfg.model.t1
    return model


def loss_spec(cfg: RunConfig) -> LossSpec:
    task = "cross_entropy" if cfg.run.task == "mnist" else "mse"
    return LossSpec(task, cfg.training.reg_norm, cfg.training.lam)


def new_run_dir(root: Path, stem: str) -> Path:
    """``root/stem``, or ``root/stem-1``, ``-2``... if taken. Never reuses a directory."""
    root.mkdir(parents=True, exist_ok=True)
    index = 0
    while True:
        path = root / (stem if index == 0 else f"{stem}-{index}")
        try:
            path.mkdir()
            return path
        except FileExistsError:
            index += 1


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")


# verbs ---------------------------------------------------------------------

def cmd_train(config_path, output_dir=None) -> Path:
    cfg = RunConfig.load(config_path)
    if output_dir is not None:
        cfg.run.output_dir = str(output_dir)
    data = make_dataset(cfg)
    model = make_model(cfg, data)
    run_dir = new_run_dir(Path(cfg.run.output_dir), f"{cfg.run.task}-{cfg.run.model}-seed{cfg.training.seed}")
    (run_dir / "config.ini").write_text(cfg.to_ini())
    solver = cfg.solver.to_solver()
    run = TrainRun(model, loss_spec(cfg), solver, lr=cfg.training.lr, batch_size=cfg.training.batch_size,
                   max_iter=cfg.training.epochs, seed=cfg.training.seed, stop_at=cfg.training.stop_at)
    log.info("training %s/%s into %s", cfg.run.task, cfg.run.model, run_dir)
    try:
        with open(run_dir / "metrics.jsonl", "w") as metrics, open(run_dir / "timings.jsonl", "w") as timings:
            train(run, data, metrics, timings)
    finally:
        save_checkpoint(run_dir / "best.ckpt", run.best_state)
    report = {"task": cfg.run.task, "model": cfg.run.model, "epochs_run": run.epoch, "best_epoch": run.best_epoch,
              "best_val": run.best_score, "parameters": model.parameter_counts()}
    if "test" in data.splits:
        test = evaluate(model, data, "test", solver)
        report[f"test_{test.name}"] = test.value
    _write_json(run_dir / "report.json", report)
    return run_dir


def forecast_curve(model: AceModel, data: Dataset, split: str, cfg: RunConfig):
    """Per-step (series index, MSE over dimensions) along a forecasting split."""
    x, y = data.subset(split)
    pred = predict(model, x, cfg.solver.to_solver())
    times = (np.asarray(data.splits[split]) + data.meta["window"]).astype(np.float64)
    return mse_over_time(Trajectory(times, list(pred)), Trajectory(times, list(y)))


def cmd_eval(checkpoint, config_path, split="test", output=None) -> Path:
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise ConfigurationError(f"checkpoint {checkpoint} not found")
    cfg = RunConfig.load(config_path)
    data = make_dataset(cfg)
    if split not in data.splits:
        raise ConfigurationError(f"split {split!r} not in {sorted(data.splits)}")
    model = make_model(cfg, data)
    model.load_state_dict(load_checkpoint(checkpoint))
    report = evaluate(model, data, split, cfg.solver.to_solver())
    out = Path(output) if output is not None else checkpoint.parent / f"eval-{split}.json"
    payload = {"name": report.name, "value": report.value, "n": report.n, "split": report.tag,
               "checkpoint": str(checkpoint)}
    if cfg.run.task == "var_forecast":
        curve, aggregate = forecast_curve(model, data, split, cfg)
        curve_path = out.with_suffix(".csv")
        write_curve_csv(curve_path, curve)
        payload["curve"] = str(curve_path)
        payload["curve_mean"] = aggregate
    _write_json(out, payload)
    return out


def cmd_gradcheck(config_path, samples: int = 4) -> int:
    cfg = RunConfig.load(config_path)
    data = make_dataset(cfg)
    model = make_model(cfg, data)
    dim = toy_dim(model)
    if dim > MAX_TOY_DIM:
        raise ConfigurationError(f"gradcheck is limited to toy states (dimension <= {MAX_TOY_DIM}); "
                                 f"this model has {dim}")
    x, y = data.subset("train")
    report = run_gradcheck(model, x[:samples], y[:samples], loss_spec(cfg))
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


DEMO_MODELS = ("node", "augmented_node", "ace_elementwise")


def crossing_trajectories(model: AceModel, x: np.ndarray, solver, points: int = 21) -> np.ndarray:
    """Readout of h(t) on a uniform grid; shape ``[points, N]``."""
    y, ctx = model.initial_state(x)
    y = y.data
    grid = np.linspace(0.0, model.t1, points)
    rows = [model.readout(Tensor(y), ctx).data]
    for t0, t1 in zip(grid[:-1], grid[1:]):
        y = integrate(lambda s, t: model.rhs(Tensor(s), t, ctx).data, y, t0, t1, solver)
        rows.append(model.readout(Tensor(y), ctx).data)
    return grid, np.stack(rows)


def cmd_demo_crossing(output_dir, seed: int = 0, epochs: int = 200, lr: float = 3e-2) -> Path:
    cfg = RunConfig()
    cfg.run.task = "crossing"
    cfg.training.seed = seed
    cfg.data.seed = seed
    cfg.training.epochs = epochs
    cfg.training.lr = lr
    cfg.training.stop_at = 1.0
    run_dir = new_run_dir(Path(output_dir), f"demo-crossing-seed{seed}")
    data = make_dataset(cfg)
    solver = cfg.solver.to_solver()
    rows = []
    for kind in DEMO_MODELS:
        cfg.run.model = kind
        model = make_model(cfg, data)
        run = TrainRun(model, loss_spec(cfg), solver, lr=lr, batch_size=cfg.training.batch_size, max_iter=epochs,
                       seed=seed, stop_at=cfg.training.stop_at)
        with open(run_dir / f"{kind}-metrics.jsonl", "w") as metrics:
            train(run, data, metrics)
        x, y = data.subset("test")
        grid, traj = crossing_trajectories(model, x, solver)
        with open(run_dir / f"{kind}-trajectories.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "sample", "start", "target", "position"])
            for i, t in enumerate(grid):
                for j in range(len(x)):
                    w.writerow([repr(float(t)), j, repr(float(x[j, 0])), repr(float(y[j])), repr(float(traj[i, j]))])
        final_loss = min(h["loss_h"] for h in run.history) if run.history else float("nan")
        rows.append({"model": kind, "epochs_run": run.epoch, "best_train_loss": final_loss,
                     "val_accuracy": run.best_score, "test_accuracy": evaluate(model, data, "test", solver).value})
    with open(run_dir / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (run_dir / "config.ini").write_text(cfg.to_ini())
    for r in rows:
        print(f"{r['model']:>16}  epochs={r['epochs_run']:<4d} loss={r['best_train_loss']:.4f}  "
              f"test_accuracy={r['test_accuracy']:.3f}")
    return run_dir


# argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acenode", description="Co-evolving attention ODE models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="overrides run.output_dir")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--split", default="test")
    p.add_argument("--output", default=None, help="report path (default: next to the checkpoint)")

    p = sub.add_parser("gradcheck", help="compare adjoint, finite-difference and tape gradients")
    p.add_argument("config")
    p.add_argument("--samples", type=int, default=4)

    p = sub.add_parser("demo-crossing", help="node vs augmented node vs elementwise attention on crossing points")
    p.add_argument("output_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-2)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "train":
            print(cmd_train(args.config, args.output_dir))
        elif args.verb == "eval":
            print(cmd_eval(args.checkpoint, args.config, args.split, args.output))
        elif args.verb == "gradcheck":
            return cmd_gradcheck(args.config, args.samples)
        else:
            print(cmd_demo_crossing(args.output_dir, args.seed, args.epochs, args.lr))
    except _CONFIG_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as err:
        print(f"training failed: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
