"""Command-line surface: profile, gen-data, search, decode, retrain, eval,
bench, report.

Runs are driven by a JSON config file (strictly validated, unknown keys
rejected) with CLI flags overriding individual fields. Exit codes are stable:
2 config error, 3 missing latency table, 4 data error, 5 decode error,
6 missing run artifacts. With --json, stdout carries only the machine-readable
summary; diagnostics go to stderr.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import data as dio
from . import decode as dec
from . import engine
from . import latency as lat
from . import space
from .errors import ConfigError, DataError, DecodeError, FormatError

EXIT_CONFIG = 2
EXIT_NO_TABLE = 3
EXIT_DATA = 4
EXIT_DECODE = 5
EXIT_NO_ARTIFACTS = 6


@dataclass
class RunConfig:
    # search space
    layers: int = 4
    scales: int = 3
    nodes_per_cell: int = 2
    base_channels: int = 4
    k_partial: int = 2
    num_classes: int = 2
    input_shape: tuple = (8, 16, 16)
    n_fusion: int = 2
    # training
    total_epochs: int = 30
    warmup_epochs: int = 15
    batch_size: int = 2
    lr_w: float = 0.1
    momentum: float = 0.9
    lr_arch: float = 0.1
    lambda_lat: float = 0.0001
    tau_start: float = 5.0
    tau_end: float = 0.5
    seed: int = 0
    latency_accounting: str = "per_path"
    augment: bool = False
    # data generation
    num_samples: int = 24
    noise: float = 0.05
    # retraining / evaluation
    retrain_epochs: int = 30
    folds: int = 2
    # profiling / benchmarking
    profile_reps: int = 50
    profile_warmup: int = 10
    bench_reps: int = 30
    budget_latency_ms: float = 50.0
    budget_fps: float = 22.0
    # artifact paths
    table_path: str = ""
    data_path: str = ""
    out_dir: str = "runs/default"

    _JSON_KEYS = {"lambda": "lambda_lat"}

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)} - {"_JSON_KEYS"}
        kwargs = {}
        for key, value in raw.items():
            name = cls._JSON_KEYS.get(key, key)
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self):
        self.input_shape = tuple(self.input_shape)
        self.search_config()
        self.train_config()
        if self.num_samples < 2:
            raise ConfigError("num_samples must be >= 2")
        if self.retrain_epochs < 1:
            raise ConfigError("retrain_epochs must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.bench_reps < 3 or self.profile_reps < 3 or self.profile_warmup < 1:
            raise ConfigError("timing needs reps >= 3 and warmup >= 1")
        if self.budget_latency_ms <= 0 or self.budget_fps <= 0:
            raise ConfigError("budgets must be positive")
        return self

    def search_config(self):
        return space.SearchConfig(
            layers=self.layers, scales=self.scales,
            nodes_per_cell=self.nodes_per_cell, base_channels=self.base_channels,
            k_partial=self.k_partial, num_classes=self.num_classes,
            input_shape=tuple(self.input_shape), n_fusion=self.n_fusion).validate()

    def train_config(self):
        return engine.TrainConfig(
            total_epochs=self.total_epochs, warmup_epochs=self.warmup_epochs,
            batch_size=self.batch_size, lr_w=self.lr_w, momentum=self.momentum,
            lr_arch=self.lr_arch, lambda_lat=self.lambda_lat,
            tau_start=self.tau_start, tau_end=self.tau_end, seed=self.seed,
            n_fusion=self.n_fusion, latency_accounting=self.latency_accounting,
            augment=self.augment).validate()


def _load_config(args):
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "lambda_lat", None) is not None:
        cfg.lambda_lat = args.lambda_lat
    if getattr(args, "n", None) is not None:
        cfg.n_fusion = args.n
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "table", None):
        cfg.table_path = args.table
    if getattr(args, "data", None):
        cfg.data_path = args.data
    cfg.validate()
    return cfg


def _emit(args, summary, human_lines):
    if args.json:
        print(json.dumps(summary))
        for line in human_lines:
            print(line, file=sys.stderr)
    else:
        for line in human_lines:
            print(line)


def _require_table(path):
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"latency table not found: {path!r}")
    return lat.LatencyTable.load(path)


def cmd_profile(args):
    cfg = _load_config(args)
    out_path = args.out or cfg.table_path or os.path.join(cfg.out_dir, "latency_table.json")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    table = lat.build_table(cfg.search_config(), reps=cfg.profile_reps,
                            warmup=cfg.profile_warmup)
    table.save(out_path)
    lines = [f"{sig.describe()}: {sec * 1e3:.4f} ms"
             for sig, sec in sorted(table.entries.items())]
    lines.append(f"wrote {len(table)} entries to {out_path}")
    _emit(args, {"table": out_path, "entries": len(table),
                 "metadata": table.metadata}, lines)
    return 0


def cmd_gen_data(args):
    cfg = _load_config(args)
    out_dir = args.out or cfg.out_dir
    ds = dio.gen_synthetic(cfg.num_samples, cfg.input_shape, cfg.num_classes,
                           cfg.seed, noise=cfg.noise)
    manifest = dio.save_dataset(ds, out_dir)
    _emit(args, {"manifest": manifest, "num_samples": len(ds),
                 "num_classes": ds.num_classes},
          [f"wrote {len(ds)} volumes, manifest at {manifest}"])
    return 0


def _write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "ce", "lat", "total", "tau"])
        for row in history:
            writer.writerow([row["step"], repr(row["ce"]), repr(row["lat"]),
                             repr(row["total"]), repr(row["tau"])])


def cmd_search(args):
    cfg = _load_config(args)
    table = _require_table(cfg.table_path)
    if not cfg.data_path or not os.path.exists(cfg.data_path):
        raise DataError(f"dataset manifest not found: {cfg.data_path!r}")
    dataset = dio.load_dataset(cfg.data_path)
    train_weight, train_arch = dio.split_half(dataset, cfg.seed)
    state = engine.search(train_weight, train_arch, cfg.search_config(),
                          cfg.train_config(), table)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, "checkpoint.bin")
    state.save(ckpt)
    _write_loss_csv(os.path.join(cfg.out_dir, "loss.csv"), state.history)
    summary = {
        "lambda": cfg.lambda_lat,
        "final_expected_latency_s": state.final_lat,
        "final_ce": state.final_ce,
        "seed": cfg.seed,
        "epochs": cfg.total_epochs,
        "steps": state.step,
        "checkpoint": ckpt,
    }
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    _emit(args, summary, [
        f"search done: {state.step} steps",
        f"final CE {state.final_ce:.6f}, final expected latency "
        f"{state.final_lat * 1e3:.4f} ms", f"checkpoint at {ckpt}"])
    return 0


def cmd_decode(args):
    cfg = _load_config(args)
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint!r}")
    table = _require_table(cfg.table_path)
    state = engine.SearchState.load(args.checkpoint)
    n = cfg.n_fusion
    paths = dec.decode_network(state.params, state.cfg, n)
    arch = dec.fuse_paths(paths, state.params, state.cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    arch_path = os.path.join(cfg.out_dir, f"arch_n{n}.json")
    dec.export_arch(arch, arch_path)
    report = {
        "n": n,
        "arch_file": arch_path,
        "paths": [{"steps": [list(s) for s in p.steps],
                   "length": p.length,
                   "log_length": p.log_length,
                   "estimated_latency_s": dec.path_estimated_latency(p, arch, table)}
                  for p in paths],
        "total_estimated_latency_s": dec.estimate_arch_latency(arch, table),
        "edges": [list(e) for e in arch.edges],
    }
    report_path = os.path.join(cfg.out_dir, f"decode_report_n{n}.json")
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=1)
    lines = [f"path {i}: length {p['length']:.6f}, est "
             f"{p['estimated_latency_s'] * 1e3:.4f} ms"
             for i, p in enumerate(report["paths"], 1)]
    lines.append(f"total estimate {report['total_estimated_latency_s'] * 1e3:.4f} ms")
    lines.append(f"architecture at {arch_path}")
    _emit(args, report, lines)
    return 0


def cmd_retrain(args):
    cfg = _load_config(args)
    if not args.arch or not os.path.exists(args.arch):
        raise FileNotFoundError(f"architecture file not found: {args.arch!r}")
    arch = dec.import_arch(args.arch)
    if not cfg.data_path or not os.path.exists(cfg.data_path):
        raise DataError(f"dataset manifest not found: {cfg.data_path!r}")
    dataset = dio.load_dataset(cfg.data_path)
    folds = args.folds or cfg.folds
    assignments = dio.kfold(dataset, folds, cfg.seed)
    train_cfg = cfg.train_config()
    os.makedirs(cfg.out_dir, exist_ok=True)
    per_fold = []
    for f in range(folds):
        train_ds, eval_ds = dio.fold_datasets(dataset, assignments, f)
        result = engine.retrain(arch, train_ds, eval_ds, train_cfg,
                                epochs=cfg.retrain_epochs,
                                rng_seed=cfg.seed + f,
                                measure_reps=cfg.bench_reps)
        per_fold.append(result)
        arrays = {name: t.data for name, t in result.net.named_parameters().items()}
        engine.save_blob(os.path.join(cfg.out_dir, f"weights_fold{f}.bin"),
                         {"kind": "retrained_weights", "fold": f,
                          "arch_file": os.path.abspath(args.arch),
                          "config": arch.cfg.to_dict()}, arrays)
    classes = sorted(k for k in per_fold[0].dice if k != 0)
    per_class = {}
    for c in classes:
        vals = [r.dice[c] for r in per_fold]
        per_class[str(c)] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    fold_means = [float(np.mean([r.dice[c] for c in classes])) for r in per_fold]
    lat_ms = float(np.median([r.latency_s for r in per_fold])) * 1000.0
    metrics = {
        "dice": {"per_class": per_class,
                 "mean": float(np.mean(fold_means)),
                 "std": float(np.std(fold_means))},
        "latency_ms": lat_ms,
        "throughput_fps": 1000.0 / lat_ms,
        "folds": folds,
        "epochs": cfg.retrain_epochs,
    }
    with open(os.path.join(cfg.out_dir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=1)
    _emit(args, metrics, [
        f"dice mean {metrics['dice']['mean']:.4f} ± {metrics['dice']['std']:.4f} "
        f"over {folds} folds",
        f"median latency {lat_ms:.2f} ms "
        f"({metrics['throughput_fps']:.1f} FPS)"])
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    if not args.arch or not os.path.exists(args.arch):
        raise FileNotFoundError(f"architecture file not found: {args.arch!r}")
    if not args.weights or not os.path.exists(args.weights):
        raise FileNotFoundError(f"weights file not found: {args.weights!r}")
    arch = dec.import_arch(args.arch)
    if not cfg.data_path or not os.path.exists(cfg.data_path):
        raise DataError(f"dataset manifest not found: {cfg.data_path!r}")
    dataset = dio.load_dataset(cfg.data_path)
    header, arrays = engine.load_blob(args.weights)
    net = dec.DiscreteNetwork(arch, rng_seed=0)
    for name, t in net.named_parameters().items():
        if name not in arrays:
            raise FormatError(f"weights file missing parameter {name!r}")
        t.data[...] = arrays[name].reshape(t.data.shape)
    dice = engine.evaluate_dice(net, dataset)
    latency_s = dec.measure_inference(net, reps=cfg.bench_reps)
    fg = {str(c): v for c, v in dice.items() if c != 0}
    summary = {
        "dice": {"per_class": fg, "mean": float(np.mean(list(fg.values())))},
        "latency_ms": latency_s * 1000.0,
        "num_samples": len(dataset),
    }
    _emit(args, summary,
          [f"dice per class: {fg}", f"mean {summary['dice']['mean']:.4f}",
           f"latency {summary['latency_ms']:.2f} ms"])
    return 0


def cmd_bench(args):
    cfg = _load_config(args)
    if not args.arch or not os.path.exists(args.arch):
        raise FileNotFoundError(f"architecture file not found: {args.arch!r}")
    arch = dec.import_arch(args.arch)
    net = dec.DiscreteNetwork(arch, rng_seed=cfg.seed)
    reps = args.reps or cfg.bench_reps
    latency_s = dec.measure_inference(net, reps=reps)
    latency_ms = latency_s * 1000.0
    fps = 1000.0 / latency_ms
    budget_ms = args.budget_ms if args.budget_ms is not None else cfg.budget_latency_ms
    budget_fps = args.budget_fps if args.budget_fps is not None else cfg.budget_fps
    ok = latency_ms <= budget_ms and fps >= budget_fps
    report = {
        "latency_ms": latency_ms,
        "throughput_fps": fps,
        "fps_is_inverse_latency": True,
        "reps": reps,
        "budget_latency_ms": budget_ms,
        "budget_fps": budget_fps,
        "pass": ok,
    }
    lines = [f"median latency {latency_ms:.3f} ms over {reps} reps",
             f"throughput {fps:.1f} FPS (= 1000 / latency_ms at batch 1)"]
    if cfg.table_path and os.path.exists(cfg.table_path):
        table = lat.LatencyTable.load(cfg.table_path)
        est = dec.estimate_arch_latency(arch, table)
        report["estimated_latency_ms"] = est * 1000.0
        report["estimate_over_measured"] = est / latency_s
        lines.append(f"table estimate {est * 1e3:.3f} ms "
                     f"(ratio {report['estimate_over_measured']:.2f})")
    lines.append(f"{'PASS' if ok else 'FAIL'}: budget {budget_ms:.0f} ms / "
                 f"{budget_fps:.0f} FPS")
    _emit(args, report, lines)
    return 0


def _render_grid(arch):
    cfg = arch.cfg
    used = {(0, 0), (cfg.layers, 0)}
    for (l, s, t, _k) in arch.edges:
        used.add((l, s))
        used.add((l + 1, t))
    lines = ["# rows = scales, cols = layers 0..L; '*' marks a used vertex"]
    for s in range(cfg.scales):
        row = " ".join("*" if (l, s) in used else "." for l in range(cfg.layers + 1))
        lines.append(f"s{s}: {row}")
    lines.append("edges:")
    for (l, s, t, kind) in arch.edges:
        lines.append(f"l{l} s{s}->s{t} {kind}")
    return "\n".join(lines) + "\n"


def cmd_report(args):
    out_dir = args.out or "report"
    run_dir = args.run_dir
    if not run_dir or not os.path.isdir(run_dir):
        raise FileNotFoundError(f"run directory not found: {run_dir!r}")
    candidates = [run_dir] + sorted(
        os.path.join(run_dir, d) for d in os.listdir(run_dir)
        if os.path.isdir(os.path.join(run_dir, d)))
    runs = [d for d in candidates if os.path.exists(os.path.join(d, "summary.json"))]
    arch_files = []
    for d in candidates:
        for name in sorted(os.listdir(d)):
            if name.startswith("arch_") and name.endswith(".json"):
                arch_files.append(os.path.join(d, name))
    if not runs and not arch_files:
        raise FileNotFoundError(f"no run artifacts under {run_dir!r}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    sweep_rows = []
    for d in runs:
        with open(os.path.join(d, "summary.json")) as fh:
            summary = json.load(fh)
        sweep_rows.append((summary["lambda"], summary["final_expected_latency_s"],
                           summary["final_ce"]))
        loss_src = os.path.join(d, "loss.csv")
        if os.path.exists(loss_src):
            dst = os.path.join(out_dir, f"loss_{os.path.basename(os.path.normpath(d))}.csv")
            with open(loss_src) as src, open(dst, "w", newline="") as dst_fh:
                dst_fh.write(src.read())
            written.append(dst)
    if sweep_rows:
        sweep_path = os.path.join(out_dir, "lambda_sweep.csv")
        with open(sweep_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "final_lat", "final_ce"])
            for row in sorted(sweep_rows):
                writer.writerow([repr(v) for v in row])
        written.append(sweep_path)
    for path in arch_files:
        arch = dec.import_arch(path)
        base = os.path.splitext(os.path.basename(path))[0]
        grid_path = os.path.join(out_dir, f"{base}_grid.txt")
        with open(grid_path, "w") as fh:
            fh.write(_render_grid(arch))
        written.append(grid_path)
    _emit(args, {"written": written, "runs": len(runs), "archs": len(arch_files)},
          [f"wrote {len(written)} report files to {out_dir}"])
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config file")
    common.add_argument("--seed", type=int, help="override RNG seed")
    common.add_argument("--lambda", dest="lambda_lat", type=float,
                        help="override latency loss weight")
    common.add_argument("--n", type=int, help="override top-n fusion paths")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--json", action="store_true",
                        help="machine-readable summary on stdout")
    common.add_argument("--table", help="latency table path")
    common.add_argument("--data", help="dataset manifest path")

    parser = argparse.ArgumentParser(
        prog="nas-rt",
        description="hardware-aware architecture search for 3D segmentation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("profile", parents=[common]).set_defaults(fn=cmd_profile)
    sub.add_parser("gen-data", parents=[common]).set_defaults(fn=cmd_gen_data)
    sub.add_parser("search", parents=[common]).set_defaults(fn=cmd_search)
    p = sub.add_parser("decode", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_decode)
    p = sub.add_parser("retrain", parents=[common])
    p.add_argument("--arch", required=True)
    p.add_argument("--folds", type=int)
    p.set_defaults(fn=cmd_retrain)
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--arch", required=True)
    p.add_argument("--weights", required=True)
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("bench", parents=[common])
    p.add_argument("--arch", required=True)
    p.add_argument("--reps", type=int)
    p.add_argument("--budget-ms", type=float, dest="budget_ms")
    p.add_argument("--budget-fps", type=float, dest="budget_fps")
    p.set_defaults(fn=cmd_bench)
    p = sub.add_parser("report", parents=[common])
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        missing = str(exc)
        print(f"error: {missing}", file=sys.stderr)
        if "table" in missing:
            return EXIT_NO_TABLE
        return EXIT_NO_ARTIFACTS
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DecodeError, FormatError) as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_DECODE


if __name__ == "__main__":
    sys.exit(main())
