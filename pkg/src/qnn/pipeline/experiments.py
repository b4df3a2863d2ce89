"""Width sweeps and the staged widen -> slim -> retrain pipeline.

Pipeline stages and the files they leave in the output directory::

    baseline    baseline.qnnf, baseline.json        full-precision width-1 model
    widen       widened_spec.json
    sparse      sparse.qnnf, sparse.json            sparsity-regularised training
    prune       pruned_spec.json, prune_report.json
    reconcile   reconciled_spec.json, prune_report.json (updated)
    retrain     teacher_logits.bin, retrained.qnnf, retrain.json
    finetune    finetuned.qnnf (only with bn_finetune_epochs > 0)
    eval        eval.json
    bench       bench.json (memory), bench_timing.json (wall times)
    report      report.json, report.txt

Each stage reads only files written by earlier stages and then drops a
marker in ``stages/``; a rerun skips marked stages, so an interrupted run
resumes where it stopped.  Everything except ``bench_timing.json`` is a
deterministic function of the config.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from .. import bitkernel, slim
from ..core.container import load_network, save_network
from ..core.layers import Network
from ..core.spec import ModelSpec, build_template
from ..core.trainer import TrainConfig, accuracy, train
from ..distill import Teacher, cache_teacher_logits, load_teacher_logits
from ..errors import QNNError, StageError
from .config import ExperimentConfig
from .data import load_dataset

STAGES = ("baseline", "widen", "sparse", "prune", "reconcile", "retrain", "finetune", "eval", "bench", "report")
SWEEP_COLUMNS = ("bits", "width", "paras(M)", "accuracy")


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def dataset_for(cfg: ExperimentConfig):
    return load_dataset(cfg.dataset, cfg.dataset_path, **dict(cfg.dataset_options))


def base_spec(cfg: ExperimentConfig, data, weight_bits=32, act_bits=32) -> ModelSpec:
    opts = dict(cfg.model_options)
    if cfg.model == "mlp":
        opts.setdefault("in_features", data.input_shape[0])
    else:
        opts.setdefault("in_channels", data.input_shape[0])
        opts.setdefault("image_size", data.input_shape[1])
    opts.setdefault("num_classes", data.num_classes)
    return build_template(cfg.model, weight_bits=weight_bits, act_bits=act_bits, **opts)


def _dtype(cfg):
    return np.dtype(cfg.dtype)


def _arrays(cfg, data):
    dt = _dtype(cfg)
    return (data.x_train.astype(dt), data.y_train, data.x_test.astype(dt), data.y_test)


def train_cell(cfg: ExperimentConfig, spec: ModelSpec, data, seed: int, epochs=None, log=None):
    """Train one model from scratch; returns ``(net, test accuracy)``."""
    xtr, ytr, xte, yte = _arrays(cfg, data)
    net = Network(spec, seed=seed, dtype=_dtype(cfg), gamma_init=cfg.gamma_init)
    tc = cfg.train_config(seed, epochs)
    if tc.epochs > 0:
        train(net, xtr, ytr, tc, augment=data.augmenter(), log=log)
    return net, accuracy(net, xte, yte)


# -- width sweep -----------------------------------------------------------

def run_width_sweep(cfg: ExperimentConfig, out_csv=None, log=None) -> list:
    """Train every ``(bits, width)`` cell for every seed with one schedule.

    Returns one row per cell with the closed-form parameter count and the
    mean (and per-seed) test accuracy; optionally writes the CSV
    ``bits,width,paras(M),accuracy``.
    """
    data = dataset_for(cfg)
    rows = []
    for bits in cfg.bits:
        for width in cfg.widths:
            spec = slim.widen(base_spec(cfg, data, bits, bits), width)
            accs = [train_cell(cfg, spec, data, s)[1] for s in cfg.seeds]
            row = {"bits": int(bits), "width": width, "params": spec.param_count(),
                   "paras(M)": spec.param_count() / 1e6, "accuracy": float(np.mean(accs)),
                   "per_seed": accs}
            rows.append(row)
            if log:
                log(f"bits={bits} width={width} params={row['params']} acc={row['accuracy']:.2f}")
    if out_csv is not None:
        write_sweep_csv(out_csv, rows)
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["bits"], f"{r['width']:g}", f"{r['paras(M)']:.6f}", f"{r['accuracy']:.2f}"])


# -- slimming sweep ----------------------------------------------------------

def slim_cell(cfg: ExperimentConfig, data, lam: float, seed: int, teacher=None, spec=None):
    """Sparse training, pruning and retraining of one widened model."""
    xtr, ytr, xte, yte = _arrays(cfg, data)
    spec = spec or slim.widen(base_spec(cfg, data, cfg.weight_bits, cfg.act_bits), cfg.width)
    net = Network(spec, seed=seed, dtype=_dtype(cfg), gamma_init=cfg.gamma_init)
    tc = cfg.train_config(seed)
    slim.train_sparse(net, xtr, ytr, lam, tc, augment=data.augmenter())
    pruned, report = slim.prune(net, cfg.threshold, (xte, yte), lam=lam)
    reconciled = slim.reconcile_residual(pruned, report)
    rc = cfg.train_config(seed, cfg.retrain_epochs)
    _, acc = slim.retrain(reconciled, xtr, ytr, rc, teacher=teacher, eval_data=(xte, yte),
                          report=report, dtype=_dtype(cfg), gamma_init=cfg.gamma_init,
                          augment=data.augmenter())
    return report, reconciled


def run_slim_sweep(cfg: ExperimentConfig, log=None) -> dict:
    """``{lam: [PruneReport per seed]}`` over ``cfg.lambdas``."""
    data = dataset_for(cfg)
    out = {}
    for lam in cfg.lambdas:
        out[lam] = []
        for seed in cfg.seeds:
            rep, _ = slim_cell(cfg, data, lam, seed)
            out[lam].append(rep)
            if log:
                log(f"lam={lam:g} seed={seed} ratio={100 * rep.ratio:.2f} acc_P={rep.acc_P:.2f} acc_R={rep.acc_R:.2f}")
    return out


# -- full pipeline ---------------------------------------------------------

class RunDir:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "stages").mkdir(exist_ok=True)

    def __truediv__(self, name):
        return self.root / name

    def done(self, stage) -> bool:
        return (self.root / "stages" / f"{stage}.done").exists()

    def mark(self, stage) -> None:
        (self.root / "stages" / f"{stage}.done").write_text(stage + "\n")


def _spec_file(path) -> ModelSpec:
    return ModelSpec.from_json(Path(path).read_text())


def _write_spec(path, spec: ModelSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=1) + "\n")


def _stage_baseline(cfg, run, data, seed, log):
    spec = base_spec(cfg, data)
    net, acc = train_cell(cfg, spec, data, seed, log=log)
    save_network(run / "baseline.qnnf", net)
    dump_json(run / "baseline.json", {"accuracy": acc, "params": spec.param_count()})


def _stage_widen(cfg, run, data, seed, log):
    spec = slim.widen(base_spec(cfg, data, cfg.weight_bits, cfg.act_bits), cfg.width)
    _write_spec(run / "widened_spec.json", spec)


def _stage_sparse(cfg, run, data, seed, log):
    spec = _spec_file(run / "widened_spec.json")
    xtr, ytr, xte, yte = _arrays(cfg, data)
    net = Network(spec, seed=seed, dtype=_dtype(cfg), gamma_init=cfg.gamma_init)
    hist = slim.train_sparse(net, xtr, ytr, cfg.lam, cfg.train_config(seed), augment=data.augmenter(), log=log)
    save_network(run / "sparse.qnnf", net)
    dump_json(run / "sparse.json", {"lam": cfg.lam, "loss": hist, "accuracy": accuracy(net, xte, yte),
                                   "gamma_l1": slim.gamma_l1(net)})


def _load(cfg, path):
    net, _ = load_network(path, dtype=_dtype(cfg))
    return net


def _sparse_lam(cfg, run):
    """The sparsity weight the stored sparse model was trained with."""
    meta = run / "sparse.json"
    return read_json(meta).get("lam", cfg.lam) if meta.exists() else cfg.lam


def _stage_prune(cfg, run, data, seed, log):
    net = _load(cfg, run / "sparse.qnnf")
    _, _, xte, yte = _arrays(cfg, data)
    spec, report = slim.prune(net, cfg.threshold, (xte, yte), lam=_sparse_lam(cfg, run))
    _write_spec(run / "pruned_spec.json", spec)
    dump_json(run / "prune_report.json", report.to_dict())


def _stage_reconcile(cfg, run, data, seed, log):
    report = slim.PruneReport.from_dict(read_json(run / "prune_report.json"))
    spec = slim.reconcile_residual(_spec_file(run / "pruned_spec.json"), report)
    _write_spec(run / "reconciled_spec.json", spec)
    dump_json(run / "prune_report.json", report.to_dict())


def _teacher(cfg, run, data):
    if not cfg.distill:
        return None
    path = run / "baseline.qnnf" if cfg.teacher == "baseline" else Path(cfg.teacher)
    teacher_net = _load(cfg, path)
    logits_file = run / "teacher_logits.bin"
    xtr = _arrays(cfg, data)[0]
    if not logits_file.exists():
        cache_teacher_logits(teacher_net, xtr, logits_file)
    return Teacher(cfg.tau, cfg.mu, cached=load_teacher_logits(logits_file))


def _stage_retrain(cfg, run, data, seed, log):
    spec = _spec_file(run / "reconciled_spec.json")
    report = slim.PruneReport.from_dict(read_json(run / "prune_report.json"))
    xtr, ytr, xte, yte = _arrays(cfg, data)
    teacher = _teacher(cfg, run, data)
    if teacher is not None and data.augmenter() is not None:
        # cached logits are per stored sample; with augmentation run the teacher live
        teacher = Teacher(cfg.tau, cfg.mu, network=_load(cfg, run / "baseline.qnnf"))
    net, acc = slim.retrain(spec, xtr, ytr, cfg.train_config(seed, cfg.retrain_epochs), teacher=teacher,
                            eval_data=(xte, yte), report=report, dtype=_dtype(cfg),
                            gamma_init=cfg.gamma_init, augment=data.augmenter(), log=log)
    save_network(run / "retrained.qnnf", net)
    dump_json(run / "prune_report.json", report.to_dict())
    dump_json(run / "retrain.json", {"accuracy": acc, "distilled": teacher is not None,
                                    "params": spec.param_count()})


def _stage_finetune(cfg, run, data, seed, log):
    if cfg.bn_finetune_epochs <= 0:
        return
    net = _load(cfg, run / "retrained.qnnf")
    xtr, ytr, xte, yte = _arrays(cfg, data)
    tc = cfg.train_config(seed, cfg.bn_finetune_epochs)
    tc.freeze_non_bn = True
    tc.lr = cfg.lr * 0.1
    train(net, xtr, ytr, tc, teacher=_teacher(cfg, run, data), augment=data.augmenter(), log=log)
    save_network(run / "finetuned.qnnf", net)


def _final_model(cfg, run):
    return run / ("finetuned.qnnf" if cfg.bn_finetune_epochs > 0 else "retrained.qnnf")


def _stage_eval(cfg, run, data, seed, log):
    net = _load(cfg, _final_model(cfg, run))
    _, _, xte, yte = _arrays(cfg, data)
    acc = accuracy(net, xte, yte)
    installed = bitkernel.install_packed(net)
    acc_packed = accuracy(net, xte, yte) if installed else acc
    bitkernel.uninstall_packed(net)
    dump_json(run / "eval.json", {"accuracy": acc, "accuracy_packed": acc_packed,
                                 "packed_layers": len(installed), "params": net.spec.param_count(),
                                 "params_counted": net.param_count()})


def _stage_bench(cfg, run, data, seed, log):
    model = _final_model(cfg, run)
    net = _load(cfg, model)
    packed_file = run / "final_packed.qnnf"
    save_network(packed_file, net, {"BPK1": bitkernel.encode_bpk1(net)})
    rep = bitkernel.bench(packed_file, (1,) + tuple(net.spec.input_shape), cfg.bench_repeats, log=None)
    timing_keys = ("float_seconds", "packed_seconds", "speedup", "max_abs_diff")
    memory = {k: v for k, v in rep.items() if k not in timing_keys and k != "layers"}
    memory["layers"] = [{k: v for k, v in r.items() if k not in timing_keys} for r in rep["layers"]]
    dump_json(run / "bench.json", memory)
    dump_json(run / "bench_timing.json", rep)


def _stage_report(cfg, run, data, seed, log):
    base = read_json(run / "baseline.json")
    prune = read_json(run / "prune_report.json")
    ev = read_json(run / "eval.json")
    bench = read_json(run / "bench.json")
    widened = _spec_file(run / "widened_spec.json")
    final_spec = _spec_file(run / "reconciled_spec.json")
    report = {
        "config": cfg.to_dict(),
        "baseline": base,
        "widened_params": widened.param_count(),
        "sparse": read_json(run / "sparse.json")["accuracy"],
        "prune": {k: prune[k] for k in ("threshold", "ratio", "params_before", "params_after",
                                        "acc_O", "acc_P", "acc_R", "lam")},
        "reconcile": prune["reconcile"],
        "final": {"accuracy": ev["accuracy"], "accuracy_packed": ev["accuracy_packed"],
                  "params": final_spec.param_count(),
                  "param_ratio_vs_baseline": final_spec.param_count() / base["params"],
                  "gap_vs_baseline": base["accuracy"] - ev["accuracy"]},
        "memory": {"packed_bytes": bench["packed_bytes"], "float_bytes": bench["float_bytes"]},
    }
    report["summary"] = summary_text(report)
    dump_json(run / "report.json", report)
    (run / "report.txt").write_text(report["summary"] + "\n\n" + slim.format_table(
        [slim.PruneReport.from_dict(prune)]) + "\n")


def summary_text(r) -> str:
    f = r["final"]
    bits = r["config"]["weight_bits"]
    kd = "with distillation" if r["config"]["distill"] else "without distillation"
    return (f"{bits}-bit model widened x{r['config']['width']:g}, pruned ({100 * r['prune']['ratio']:.1f}% "
            f"channels removed) and retrained {kd}: {f['accuracy']:.2f}% with {f['params']} parameters "
            f"({f['param_ratio_vs_baseline']:.2f}x the full-precision baseline, which reaches "
            f"{r['baseline']['accuracy']:.2f}% with {r['baseline']['params']}); gap "
            f"{f['gap_vs_baseline']:+.2f} points.")


STAGE_FUNCS = {
    "baseline": _stage_baseline, "widen": _stage_widen, "sparse": _stage_sparse,
    "prune": _stage_prune, "reconcile": _stage_reconcile, "retrain": _stage_retrain,
    "finetune": _stage_finetune, "eval": _stage_eval, "bench": _stage_bench, "report": _stage_report,
}


def run_full_pipeline(cfg: ExperimentConfig, stop_after: str | None = None, log=None) -> dict | None:
    """Run (or resume) the staged pipeline for ``cfg.seeds[0]``.

    ``stop_after`` ends the run once that stage is complete (used to test
    resumption).  Returns the report dict, or None when stopped early.
    """
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"unknown stage {stop_after!r}")
    run = RunDir(cfg.output_path)
    dump_json(run / "config.json", cfg.to_dict())
    data = dataset_for(cfg)
    seed = int(cfg.seeds[0])
    for stage in STAGES:
        if not run.done(stage):
            t0 = time.perf_counter()
            try:
                STAGE_FUNCS[stage](cfg, run, data, seed, log)
            except (QNNError, OSError, KeyError, ValueError) as exc:
                raise StageError(stage, exc) from exc
            run.mark(stage)
            if log:
                log(f"stage {stage} done in {time.perf_counter() - t0:.1f}s")
        if stage == stop_after:
            return None
    return read_json(run / "report.json")
