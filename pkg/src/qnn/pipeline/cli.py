"""``qnn`` command-line interface.

Every subcommand takes ``--config <file.json>`` (see
:class:`~qnn.pipeline.config.ExperimentConfig`) and writes into the config's
output directory (relative paths are placed under ``$QNN_OUTPUT_ROOT`` when
set).  Exit codes: 0 success, 2 configuration or input error, 3 numeric
failure (non-finite values, divergence).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .. import bitkernel, embed, slim
from ..core.container import load_network, read_matrix, save_network
from ..core.trainer import accuracy
from ..distill import Teacher
from ..errors import ConfigError, NumericError, QNNError, StageError
from . import experiments as ex
from .config import ExperimentConfig

COMMANDS = ("train", "embed", "slim", "prune", "retrain", "distill", "eval", "bench", "sweep", "pipeline")


def _parser():
    p = argparse.ArgumentParser(prog="qnn", description="Widen, slim and distill quantized networks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment JSON file")
        if name in ("prune",):
            s.add_argument("--threshold", type=float, help="override the pruning threshold")
        if name in ("slim",):
            s.add_argument("--lam", type=float, help="override the sparsity weight")
        if name in ("prune", "eval", "bench"):
            s.add_argument("--model", help="model file (defaults to the run directory's)")
        if name == "distill":
            s.add_argument("--teacher", help="teacher model file")
            s.add_argument("--tau", type=float)
            s.add_argument("--mu", type=float)
        if name == "bench":
            s.add_argument("--repeats", type=int)
            s.add_argument("--batch", type=int, default=1)
        if name == "embed":
            s.add_argument("--features", help="feature matrix file (u64 rows, u64 cols, f64 data)")
        if name == "pipeline":
            s.add_argument("--stop-after", choices=ex.STAGES)
    return p


def _out(cfg) -> ex.RunDir:
    return ex.RunDir(cfg.output_path)


def _print(obj):
    print(json.dumps(obj, sort_keys=True, indent=1))


def cmd_train(cfg, args):
    data = ex.dataset_for(cfg)
    spec = slim.widen(ex.base_spec(cfg, data, cfg.weight_bits, cfg.act_bits), cfg.width)
    net, acc = ex.train_cell(cfg, spec, data, cfg.seeds[0])
    run = _out(cfg)
    save_network(run / "model.qnnf", net)
    result = {"accuracy": acc, "params": spec.param_count(), "model": str(run / "model.qnnf")}
    ex.dump_json(run / "train.json", result)
    _print(result)


def cmd_embed(cfg, args):
    path = args.features or cfg.features
    if not path:
        raise ConfigError("embed needs a feature matrix (--features or 'features' in the config)")
    Y = read_matrix(path)
    state = embed.alternate(Y, cfg.embed_m, cfg.embed_gamma, cfg.embed_beta, cfg.embed_rounds,
                            embed.SolverConfig(seed=int(cfg.seeds[0])))
    run = _out(cfg)
    np.savez(run / "embed_state.npz", **state.to_arrays())
    with open(run / "embed_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "before_b", "after_b", "objective", "kept"])
        for t in state.trace:
            w.writerow([t["round"], repr(t["before_b"]), repr(t["after_b"]), repr(t["objective"]), t["kept"]])
    _print({"m": state.m, "n": state.n, "kept": state.kept,
            "distance_error": embed.distance_preservation_check(state.Y, state.P)})


def cmd_slim(cfg, args):
    if args.lam is not None:
        cfg = dataclasses.replace(cfg, lam=args.lam)
    data, run = ex.dataset_for(cfg), _out(cfg)
    ex._stage_widen(cfg, run, data, cfg.seeds[0], None)
    ex._stage_sparse(cfg, run, data, cfg.seeds[0], None)
    _print(ex.read_json(run / "sparse.json") | {"model": str(run / "sparse.qnnf")})


def cmd_prune(cfg, args):
    if args.threshold is not None:
        cfg = dataclasses.replace(cfg, threshold=args.threshold)
    data, run = ex.dataset_for(cfg), _out(cfg)
    model = Path(args.model) if args.model else run / "sparse.qnnf"
    net, _ = load_network(model, dtype=np.dtype(cfg.dtype))
    _, _, xte, yte = ex._arrays(cfg, data)
    spec, report = slim.prune(net, cfg.threshold, (xte, yte), lam=ex._sparse_lam(cfg, run))
    ex._write_spec(run / "pruned_spec.json", spec)
    ex.dump_json(run / "prune_report.json", report.to_dict())
    table = slim.format_table([report])
    (run / "prune_table.txt").write_text(table + "\n")
    print(table)


def _retrain(cfg, run, data, teacher):
    ex._stage_reconcile(cfg, run, data, cfg.seeds[0], None)
    spec = ex._spec_file(run / "reconciled_spec.json")
    report = slim.PruneReport.from_dict(ex.read_json(run / "prune_report.json"))
    xtr, ytr, xte, yte = ex._arrays(cfg, data)
    net, acc = slim.retrain(spec, xtr, ytr, cfg.train_config(cfg.seeds[0], cfg.retrain_epochs), teacher=teacher,
                            eval_data=(xte, yte), report=report, dtype=np.dtype(cfg.dtype),
                            gamma_init=cfg.gamma_init, augment=data.augmenter())
    save_network(run / "retrained.qnnf", net)
    ex.dump_json(run / "prune_report.json", report.to_dict())
    print(slim.format_table([report]))


def cmd_retrain(cfg, args):
    data, run = ex.dataset_for(cfg), _out(cfg)
    _retrain(cfg, run, data, None)


def cmd_distill(cfg, args):
    path = args.teacher or (cfg.teacher if cfg.teacher != "baseline" else None)
    if not path:
        raise ConfigError("distill needs --teacher <model-file>")
    if not Path(path).exists():
        raise ConfigError(f"teacher model {path!r} does not exist")
    tau = cfg.tau if args.tau is None else args.tau
    mu = cfg.mu if args.mu is None else args.mu
    data, run = ex.dataset_for(cfg), _out(cfg)
    teacher_net, _ = load_network(path, dtype=np.dtype(cfg.dtype))
    _retrain(cfg, run, data, Teacher(tau, mu, network=teacher_net))


def cmd_eval(cfg, args):
    data, run = ex.dataset_for(cfg), _out(cfg)
    model = Path(args.model) if args.model else run / "model.qnnf"
    net, _ = load_network(model, dtype=np.dtype(cfg.dtype))
    _, _, xte, yte = ex._arrays(cfg, data)
    _print({"model": str(model), "accuracy": accuracy(net, xte, yte), "params": net.spec.param_count()})


def cmd_bench(cfg, args):
    run = _out(cfg)
    model = Path(args.model) if args.model else run / "model.qnnf"
    net, _ = load_network(model)
    repeats = cfg.bench_repeats if args.repeats is None else args.repeats
    rep = bitkernel.bench(model, (args.batch,) + tuple(net.spec.input_shape), repeats,
                          log=lambda m: print(m, file=sys.stderr))
    ex.dump_json(run / "bench_timing.json", rep)
    _print(rep)


def cmd_sweep(cfg, args):
    run = _out(cfg)
    rows = ex.run_width_sweep(cfg, run / "sweep.csv", log=lambda m: print(m, file=sys.stderr))
    ex.dump_json(run / "sweep.json", rows)
    print((run / "sweep.csv").read_text(), end="")


def cmd_pipeline(cfg, args):
    report = ex.run_full_pipeline(cfg, stop_after=args.stop_after, log=lambda m: print(m, file=sys.stderr))
    if report is not None:
        print(report["summary"])


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def _exit_code(exc) -> int:
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NumericError):
        return 3
    return 2


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        HANDLERS[args.command](cfg, args)
    except (QNNError, FileNotFoundError) as exc:
        print(f"qnn {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
