"""Width multiplication and BN-scale channel slimming.

Pruning works on *channel groups*, one per batch-norm layer: a standalone BN
that directly follows a conv/linear layer, and the two BNs inside every
residual block (``i.bn1`` for the hidden channels, ``i.bn2`` for the block
output).  Channel ``j`` of a group is removed iff ``|gamma_j| < threshold``;
a group that would lose every channel keeps its largest-``|gamma|`` one and is
flagged in the report.

Two networks can be derived from a pruned model:

* :func:`zeroed_network` keeps the original shape and forces pruned channels
  to zero (this gives ``acc_P``);
* :func:`rebuild_pruned` physically removes them and inherits the sliced
  weights.  Both compute the same function.

:func:`reconcile_residual` then rewrites every residual shortcut so that it
maps the block input onto the block output by position (identity when the
counts agree, otherwise shrink/pad by ``|gamma|`` of the channel producer).
The reconciled architecture is retrained from scratch with :func:`retrain`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core.layers import BatchNorm, Conv, Linear, Network, ResidualBlock
from .core.spec import LayerSpec, ModelSpec
from .core.trainer import TrainConfig, accuracy, train
from .errors import ConfigError


def _scale_count(c: int, width: float) -> int:
    return max(1, int(math.floor(c * width + 0.5)))


def widen(spec: ModelSpec, width: float) -> ModelSpec:
    """Multiply every hidden channel count by ``width`` (round to nearest, min 1).

    The network input channels and the number of classes are unchanged.
    """
    width = float(width)
    if not width > 0:
        raise ValueError(f"width must be positive, got {width}")
    out = spec.copy()
    if width == 1:
        return out
    comp = out.compute_layers()
    first, last = comp[0], comp[-1]
    for i, layer in enumerate(out.layers):
        if layer.shortcut_map is not None:
            raise ConfigError(f"layer {i}: cannot widen a block with an explicit shortcut map")
        if layer.kind == "linear" and i != last:
            layer.out_channels = _scale_count(layer.out_channels, width)
        elif layer.kind != "linear":
            if i != first:
                layer.in_channels = _scale_count(layer.in_channels, width)
            layer.out_channels = _scale_count(layer.out_channels, width)
            if layer.kind == "residual-block":
                layer.mid_channels = _scale_count(layer.mid_channels, width)
        if layer.kind in ("conv", "linear", "residual-block"):
            layer.width_multiplier = layer.width_multiplier * width
    # linear inputs follow from the widened shapes (handles flattened maps)
    shape = out.input_shape
    for i, layer in enumerate(out.layers):
        if layer.kind == "linear":
            layer.in_channels = int(np.prod(shape)) if i != first else layer.in_channels
            shape = (layer.out_channels,)
        else:
            shape = ModelSpec(out.layers[i:i + 1], shape, 0).infer_shapes()[0]
    out.validate()
    return out


def train_sparse(net, x, y, lam: float, cfg: TrainConfig, **kw):
    """Train with the sparsity term ``lam * sum|gamma|``; returns the loss history."""
    if lam < 0:
        raise ValueError("sparsity weight must be >= 0")
    return train(net, x, y, cfg, sparsity=lam, **kw)


def gamma_l1(net) -> float:
    return float(sum(np.abs(bn.gamma.data).sum() for _, bn in net.bn_layers()))


# -- reporting -------------------------------------------------------------

@dataclass
class PruneReport:
    threshold: float
    groups: list  # {name, total, kept, gamma, flagged}
    blocks: list  # {layer, producer, in_kept, out_kept}
    params_before: int
    params_after: int
    lam: float | None = None
    acc_O: float | None = None
    acc_P: float | None = None
    acc_R: float | None = None
    reconcile: list = field(default_factory=list)

    @property
    def total_channels(self) -> int:
        return sum(g["total"] for g in self.groups)

    @property
    def kept_channels(self) -> int:
        return sum(len(g["kept"]) for g in self.groups)

    @property
    def ratio(self) -> float:
        """Fraction of channels removed."""
        return 1.0 - self.kept_channels / self.total_channels

    def group(self, name) -> dict:
        for g in self.groups:
            if g["name"] == name:
                return g
        raise KeyError(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratio"] = self.ratio
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("ratio", None)
        return cls(**d)

    def row(self) -> dict:
        return {"reg": self.lam, "acc_O": self.acc_O, "ratio": 100.0 * self.ratio,
                "paras": self.params_after, "acc_P": self.acc_P, "acc_R": self.acc_R}


TABLE_COLUMNS = ("reg", "acc_O", "ratio", "paras", "acc_P", "acc_R")


def format_table(reports) -> str:
    """Plain-text table, one row per report (ratio in percent)."""
    def cell(v, col):
        if v is None:
            return "-"
        if col == "paras":
            return str(int(v))
        if col == "reg":
            return f"{v:g}"
        return f"{v:.2f}"

    rows = [[cell(r.row()[c], c) for c in TABLE_COLUMNS] for r in reports]
    widths = [max(len(c), *(len(row[k]) for row in rows)) if rows else len(c) for k, c in enumerate(TABLE_COLUMNS)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    return "\n".join([line(TABLE_COLUMNS)] + [line(r) for r in rows])


# -- channel selection -----------------------------------------------------

def select_channels(gamma, threshold: float):
    """Indices with ``|gamma| >= threshold``; never empty.  Returns ``(kept, flagged)``."""
    g = np.abs(np.asarray(gamma, dtype=np.float64))
    kept = np.flatnonzero(g >= threshold)
    if kept.size == 0:
        return [int(np.argmax(g))], True
    return [int(i) for i in kept], False


def prunable_groups(spec: ModelSpec) -> list:
    """Names of the BN channel groups, in declaration order."""
    names = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "batchnorm" and i > 0 and spec.layers[i - 1].kind in ("conv", "linear"):
            names.append(f"{i}")
        elif layer.kind == "residual-block":
            names += [f"{i}.bn1", f"{i}.bn2"]
    return names


def _shortcut(layer: LayerSpec) -> list:
    if layer.shortcut_map is not None:
        return list(layer.shortcut_map)
    if layer.in_channels != layer.out_channels:
        return layer.default_shortcut()
    return list(range(layer.out_channels))


def _canonical_shortcut(layer: LayerSpec, smap: list):
    if layer.in_channels == layer.out_channels and smap == list(range(layer.out_channels)):
        return None
    if layer.in_channels != layer.out_channels and smap == layer.default_shortcut():
        return None
    return smap


def pruned_structure(spec: ModelSpec, kept: dict):
    """Apply per-group kept index lists to ``spec``.

    Returns ``(new_spec, plan, blocks)`` where ``plan[i]`` holds the index
    arrays used to slice layer ``i``'s parameters and ``blocks`` records, for
    each residual block, which group produced its input channels.
    """
    shapes = [tuple(spec.input_shape)] + spec.infer_shapes()
    out = spec.copy()
    cur = list(range(spec.input_shape[0]))
    producer = None
    plan, blocks = {}, []
    n = len(spec.layers)
    for i, layer in enumerate(spec.layers):
        new = out.layers[i]
        nxt = f"{i + 1}" if i + 1 < n and f"{i + 1}" in kept else None
        if layer.kind in ("conv", "linear"):
            in_shape = shapes[i]
            if layer.kind == "linear" and len(in_shape) == 3:
                hw = in_shape[1] * in_shape[2]
                in_idx = [c * hw + p for c in cur for p in range(hw)]
            else:
                in_idx = list(cur)
            out_idx = kept[nxt] if nxt else list(range(layer.out_channels))
            plan[i] = {"in": in_idx, "out": list(out_idx)}
            new.in_channels, new.out_channels = len(in_idx), len(out_idx)
            cur = list(out_idx)
            producer = nxt
        elif layer.kind == "batchnorm":
            plan[i] = {"out": list(cur)}
            new.in_channels = new.out_channels = len(cur)
        elif layer.kind in ("relu", "pool"):
            new.in_channels = new.out_channels = len(cur)
        elif layer.kind == "residual-block":
            mid, outk = kept[f"{i}.bn1"], kept[f"{i}.bn2"]
            orig = _shortcut(layer)
            pos = {c: p for p, c in enumerate(cur)}
            smap = [pos.get(orig[j], -1) if orig[j] >= 0 else -1 for j in outk]
            plan[i] = {"in": list(cur), "mid": list(mid), "out": list(outk)}
            new.in_channels, new.mid_channels, new.out_channels = len(cur), len(mid), len(outk)
            new.shortcut_map = _canonical_shortcut(new, smap)
            blocks.append({"layer": i, "producer": producer, "in_kept": list(cur), "out_kept": list(outk)})
            cur = list(outk)
            producer = f"{i}.bn2"
    out.validate()
    return out, plan, blocks


def _net_groups(net) -> dict:
    return dict(net.bn_layers())


def prune(net, threshold: float, data=None, lam=None):
    """Threshold-prune ``net``'s BN channel groups.

    ``data`` is an optional ``(x, y)`` evaluation split; when given the
    report carries ``acc_O`` (original) and ``acc_P`` (pruned channels zeroed).
    Returns ``(pruned_spec, report)``; the spec keeps channel identity in its
    shortcut maps so that :func:`rebuild_pruned` can inherit weights.
    """
    bns = _net_groups(net)
    names = prunable_groups(net.spec)
    kept, groups = {}, []
    for name in names:
        gamma = bns[name].gamma.data
        k, flagged = select_channels(gamma, threshold)
        kept[name] = k
        groups.append({"name": name, "total": int(gamma.size), "kept": k,
                       "gamma": [float(v) for v in np.abs(gamma)], "flagged": flagged})
    new_spec, _, blocks = pruned_structure(net.spec, kept)
    report = PruneReport(float(threshold), groups, blocks, net.spec.param_count(),
                         new_spec.param_count(), lam=lam)
    if data is not None:
        x, y = data
        report.acc_O = accuracy(net, x, y)
        report.acc_P = accuracy(zeroed_network(net, report), x, y)
    return new_spec, report


def _clone(net) -> Network:
    twin = Network(net.spec, dtype=net.dtype)
    twin.load_state_dict(net.state_dict())
    for a, b in zip(net.quantized_layers(), twin.quantized_layers()):
        b.frozen = None if a.frozen is None else a.frozen.copy()
    return twin


def zeroed_network(net, report: PruneReport) -> Network:
    """Copy of ``net`` whose pruned channels are forced to zero."""
    twin = _clone(net)
    bns = _net_groups(twin)
    for g in report.groups:
        mask = np.zeros(g["total"], dtype=twin.dtype)
        mask[g["kept"]] = 1.0
        if not mask.all():
            bns[g["name"]].mask = mask
    return twin


def _kept_from_report(report):
    return {g["name"]: list(g["kept"]) for g in report.groups}


def rebuild_pruned(net, report: PruneReport, freeze: bool = True) -> Network:
    """The physically pruned network with weights sliced from ``net``.

    With ``freeze`` the quantized layers carry their sliced *effective*
    weights (computed on the full tensors), so per-filter statistics such as
    the binary scale factors are inherited rather than recomputed.
    """
    spec, plan, _ = pruned_structure(net.spec, _kept_from_report(report))
    new = Network(spec, dtype=net.dtype)

    def copy_bn(dst: BatchNorm, src: BatchNorm, idx):
        dst.gamma.data[...] = src.gamma.data[idx]
        dst.beta.data[...] = src.beta.data[idx]
        dst.running_mean[...] = src.running_mean[idx]
        dst.running_var[...] = src.running_var[idx]

    def copy_conv(dst, src, out_idx, in_idx):
        oi, ii = np.asarray(out_idx, dtype=np.int64), np.asarray(in_idx, dtype=np.int64)
        dst.weight.data[...] = src.weight.data[np.ix_(oi, ii)] if src.weight.ndim == 2 else \
            src.weight.data[oi][:, ii]
        if freeze and src.weight_bits < 32:
            eff = src.effective_weight()
            dst.frozen = eff[np.ix_(oi, ii)] if eff.ndim == 2 else eff[oi][:, ii]

    for i, (src, dst) in enumerate(zip(net.modules, new.modules)):
        p = plan.get(i)
        if isinstance(src, (Conv, Linear)):
            copy_conv(dst, src, p["out"], p["in"])
            if isinstance(src, Linear):
                dst.bias.data[...] = src.bias.data[p["out"]]
        elif isinstance(src, BatchNorm) and p is not None:
            copy_bn(dst, src, p["out"])
        elif isinstance(src, ResidualBlock):
            copy_conv(dst.conv1, src.conv1, p["mid"], p["in"])
            copy_bn(dst.bn1, src.bn1, p["mid"])
            copy_conv(dst.conv2, src.conv2, p["out"], p["mid"])
            copy_bn(dst.bn2, src.bn2, p["out"])
    return new


def _rank_desc(gamma, candidates):
    """Candidates ordered by |gamma| descending, ties by lower index."""
    return sorted(candidates, key=lambda c: (-abs(gamma[c]), c))


def reconcile_residual(spec: ModelSpec, report: PruneReport) -> ModelSpec:
    """Give every residual block a positional shortcut matching its output width.

    * equal in/out counts: identity shortcut;
    * more inputs than outputs: keep the ``out`` incoming channels with the
      largest producer ``|gamma|`` (drop the smallest);
    * fewer inputs: pass all of them and pad with zero channels, which stand
      for the largest-``|gamma|`` pruned producer channels (recorded).

    The result does not carry weights; retrain it from scratch.  The
    reconciliation decisions are appended to ``report.reconcile``.
    """
    out = spec.copy()
    groups = {g["name"]: g for g in report.groups}
    report.reconcile = []
    for blk in report.blocks:
        i = blk["layer"]
        layer = out.layers[i]
        if layer.kind != "residual-block":
            raise ConfigError(f"layer {i} is not a residual block; report does not match spec")
        n_in, n_out = layer.in_channels, layer.out_channels
        incoming = blk["in_kept"]
        if len(incoming) != n_in:
            raise ConfigError(f"layer {i}: report lists {len(incoming)} inputs, spec has {n_in}")
        prod = groups.get(blk["producer"])
        gamma = prod["gamma"] if prod else [1.0] * (max(incoming) + 1 if incoming else 0)
        rec = {"layer": i, "in": n_in, "out": n_out, "action": "identity", "dropped": [], "readded": []}
        if n_in > n_out:
            keep = _rank_desc(gamma, incoming)[:n_out]
            rec["action"] = "shrink"
            rec["dropped"] = [c for c in _rank_desc(gamma, incoming)[n_out:]]
            smap = sorted(incoming.index(c) for c in keep)
        elif n_in < n_out:
            pruned = [c for c in range(len(gamma)) if c not in set(incoming)] if prod else []
            rec["action"] = "pad"
            rec["readded"] = _rank_desc(gamma, pruned)[:n_out - n_in]
            smap = list(range(n_in)) + [-1] * (n_out - n_in)
        else:
            smap = list(range(n_out))
        layer.shortcut_map = _canonical_shortcut(layer, smap)
        report.reconcile.append(rec)
    out.validate()
    return out


def retrain(spec: ModelSpec, x, y, cfg: TrainConfig, teacher=None, eval_data=None,
            report: PruneReport | None = None, dtype=np.float64, gamma_init: float = 1.0, **kw):
    """Train ``spec`` from a fresh initialisation; returns ``(net, acc_R)``.

    ``acc_R`` is measured on ``eval_data`` (or the training data) and stored
    in ``report`` when one is given.
    """
    net = Network(spec, seed=cfg.seed, dtype=dtype, gamma_init=gamma_init)
    if cfg.epochs > 0:
        train(net, x, y, cfg, teacher=teacher, **kw)
    ex, ey = eval_data if eval_data is not None else (x, y)
    acc = accuracy(net, ex, ey)
    if report is not None:
        report.acc_R = acc
    return net, acc
