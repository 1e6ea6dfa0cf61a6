"""One-shot magnitude-based structured pruning: filter selection, channel
propagation, residual zero-padding, block removal, compaction, counting,
sparsity sweeps, and fine-tuning."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from flowprune import checkpoint as ckpt
from flowprune import train as TR
from flowprune.nets import ResNet, ResidualMlp, VggNet, build_network
from flowprune.regularizer import FfrConfig
from flowprune.tensor import ConfigError, ShapeError


@dataclass
class PrunePlan:
    keeps: dict = field(default_factory=dict)       # layer name -> sorted kept filter indices
    removed_blocks: list = field(default_factory=list)
    model_hash: str = ""


@dataclass
class SparsityReport:
    threshold: float
    structured_sparsity: float
    accuracy: float
    params_remaining: int
    flops_remaining: int


def _filter_l1(w):
    return np.abs(w.data).reshape(w.shape[0], -1).sum(axis=1)


def filter_magnitudes(net):
    """Per prunable conv layer, the L1 norm of each filter's weights.

    Prunable layers are the VGG convs and both convs of every residual
    block; the stem, projection shortcuts, and heads are never pruned.
    """
    mags = {}
    if isinstance(net, VggNet):
        for i in range(1, len(net.spec["widths"]) + 1):
            mags[f"conv{i}"] = _filter_l1(net.params[f"conv{i}.w"])
    elif isinstance(net, ResNet):
        for bi, name in enumerate(net.block_names()):
            if not net.spec["blocks"][bi]["removed"]:
                mags[f"{name}.conv1"] = _filter_l1(net.params[f"{name}.conv1.w"])
                mags[f"{name}.conv2"] = _filter_l1(net.params[f"{name}.conv2.w"])
    elif isinstance(net, ResidualMlp):
        pass
    else:
        raise ConfigError(f"unsupported network type {type(net).__name__}")
    return mags


def _select(mag, threshold=None, fraction=None):
    if fraction is None:
        keep = np.flatnonzero(mag >= threshold)
    else:
        drop_n = int(np.floor(fraction * len(mag)))
        order = np.argsort(mag, kind="stable")
        keep = np.sort(order[drop_n:])
    return keep


def make_plan(net, threshold=None, policy="global", fraction=None):
    """Choose kept filters per layer and propagate structural fallout.

    Global policy drops filters with magnitude strictly below the
    threshold; per_layer_fraction drops the lowest fraction per layer.
    A layer is never emptied: the single largest filter is retained,
    except a residual block's first conv, whose emptying removes the
    whole block (branch becomes zero, block reduces to its shortcut).
    """
    if policy == "global":
        if threshold is None or threshold < 0:
            raise ConfigError("global policy needs a threshold >= 0")
        fraction = None
    elif policy == "per_layer_fraction":
        if fraction is None or not 0 <= fraction < 1:
            raise ConfigError("per_layer_fraction policy needs fraction in [0, 1)")
        threshold = None
    else:
        raise ConfigError(f"unknown pruning policy {policy!r}")

    mags = filter_magnitudes(net)
    plan = PrunePlan(model_hash=ckpt.spec_hash(net.spec))
    if isinstance(net, VggNet):
        for name, mag in mags.items():
            keep = _select(mag, threshold, fraction)
            if len(keep) == 0:
                keep = np.array([int(np.argmax(mag))])
            plan.keeps[name] = keep.tolist()
    elif isinstance(net, ResNet):
        for name in net.block_names():
            if f"{name}.conv1" not in mags:
                continue
            keep1 = _select(mags[f"{name}.conv1"], threshold, fraction)
            if len(keep1) == 0:
                plan.removed_blocks.append(name)
                continue
            keep2 = _select(mags[f"{name}.conv2"], threshold, fraction)
            if len(keep2) == 0:
                keep2 = np.array([int(np.argmax(mags[f"{name}.conv2"]))])
            plan.keeps[f"{name}.conv1"] = keep1.tolist()
            plan.keeps[f"{name}.conv2"] = keep2.tolist()
    return plan


def _check_keep(keep, width, layer):
    arr = np.asarray(keep, dtype=int)
    if (
        len(arr) == 0
        or len(np.unique(arr)) != len(arr)
        or list(arr) != sorted(arr.tolist())
        or arr.min() < 0
        or arr.max() >= width
    ):
        raise ShapeError(f"plan is inconsistent at layer {layer}")
    return arr


def validate_plan(net, plan):
    """Structural consistency of a plan against a concrete model."""
    if plan.model_hash and plan.model_hash != ckpt.spec_hash(net.spec):
        raise ShapeError("plan was made for a different model spec")
    if isinstance(net, VggNet):
        if plan.removed_blocks:
            raise ShapeError("plan is inconsistent: removed blocks on a VGG model")
        names = {f"conv{i}" for i in range(1, len(net.spec["widths"]) + 1)}
        if set(plan.keeps) != names:
            raise ShapeError("plan is inconsistent: layer set mismatch")
        for i, w in enumerate(net.spec["widths"], start=1):
            _check_keep(plan.keeps[f"conv{i}"], w, f"conv{i}")
    elif isinstance(net, ResNet):
        active = {
            name
            for bi, name in enumerate(net.block_names())
            if not net.spec["blocks"][bi]["removed"]
        }
        bad = set(plan.removed_blocks) - active
        if bad:
            raise ShapeError(f"plan is inconsistent at block {sorted(bad)[0]}")
        expect = set()
        for name in active - set(plan.removed_blocks):
            expect.update({f"{name}.conv1", f"{name}.conv2"})
        if set(plan.keeps) != expect:
            raise ShapeError("plan is inconsistent: layer set mismatch")
        for bi, name in enumerate(net.block_names()):
            if name in active and name not in plan.removed_blocks:
                blk = net.spec["blocks"][bi]
                _check_keep(plan.keeps[f"{name}.conv1"], blk["f1"], f"{name}.conv1")
                _check_keep(plan.keeps[f"{name}.conv2"], blk["f2"], f"{name}.conv2")
    elif isinstance(net, ResidualMlp):
        if plan.keeps or plan.removed_blocks:
            raise ShapeError("plan is inconsistent: MLP has no prunable layers")


def apply_plan(net, plan):
    """Build the compact network a plan describes; the input is untouched.

    VGG convs lose filters, their BN channels, the next conv's matching
    input channels, and the classifier columns fed by the last conv's
    removed maps. Residual conv2 outputs are scattered back to trunk
    width (zero padding) before the addition; removed blocks keep only
    their shortcut.
    """
    validate_plan(net, plan)
    if isinstance(net, ResidualMlp):
        compact = build_network(net.spec)
        for name, p in net.params.items():
            compact.params[name].data = p.data.copy()
            compact.params[name].zero_grad()
        return compact

    if isinstance(net, VggNet):
        widths = net.spec["widths"]
        keeps = [np.asarray(plan.keeps[f"conv{i}"]) for i in range(1, len(widths) + 1)]
        new_spec = dict(net.spec, widths=[len(k) for k in keeps])
        compact = VggNet(new_spec)
        prev = np.arange(net.spec["in_channels"])
        for i, keep in enumerate(keeps, start=1):
            compact.params[f"conv{i}.w"].data = net.params[f"conv{i}.w"].data[keep][:, prev].copy()
            for part in ("gamma", "beta"):
                compact.params[f"conv{i}.{part}"].data = net.params[f"conv{i}.{part}"].data[keep].copy()
            compact.bn_stats[f"conv{i}"].mean = net.bn_stats[f"conv{i}"].mean[keep].copy()
            compact.bn_stats[f"conv{i}"].var = net.bn_stats[f"conv{i}"].var[keep].copy()
            prev = keep
        sp = net.final_hw * net.final_hw
        cols = np.concatenate([np.arange(c * sp, (c + 1) * sp) for c in keeps[-1]])
        compact.params["head.w"].data = net.params["head.w"].data[:, cols].copy()
        compact.params["head.b"].data = net.params["head.b"].data.copy()
        for p in compact.params.values():
            p.zero_grad()
        return compact

    # residual net
    new_blocks = []
    for bi, name in enumerate(net.block_names()):
        blk = dict(net.spec["blocks"][bi])
        if blk["removed"] or name in plan.removed_blocks:
            blk["removed"] = True
            blk["scatter"] = None
        else:
            keep1 = plan.keeps[f"{name}.conv1"]
            keep2 = plan.keeps[f"{name}.conv2"]
            width = net.spec["stage_widths"][bi // net.spec["blocks_per_stage"]]
            old_scatter = blk["scatter"]
            if old_scatter is None:
                scatter = list(keep2)
            else:
                scatter = [old_scatter[j] for j in keep2]
            blk.update(
                f1=len(keep1),
                f2=len(keep2),
                scatter=None if scatter == list(range(width)) else scatter,
            )
        new_blocks.append(blk)
    compact = ResNet(dict(net.spec, blocks=new_blocks))
    for name in ("stem.w", "stem.gamma", "stem.beta", "head.w", "head.b"):
        compact.params[name].data = net.params[name].data.copy()
    compact.bn_stats["stem"].mean = net.bn_stats["stem"].mean.copy()
    compact.bn_stats["stem"].var = net.bn_stats["stem"].var.copy()
    for bi, name in enumerate(net.block_names()):
        if f"{name}.down.w" in net.params:
            compact.params[f"{name}.down.w"].data = net.params[f"{name}.down.w"].data.copy()
            for part in ("gamma", "beta"):
                compact.params[f"{name}.downbn.{part}"].data = net.params[
                    f"{name}.downbn.{part}"
                ].data.copy()
            compact.bn_stats[f"{name}.downbn"].mean = net.bn_stats[f"{name}.downbn"].mean.copy()
            compact.bn_stats[f"{name}.downbn"].var = net.bn_stats[f"{name}.downbn"].var.copy()
        if new_blocks[bi]["removed"]:
            continue
        keep1 = np.asarray(plan.keeps[f"{name}.conv1"])
        keep2 = np.asarray(plan.keeps[f"{name}.conv2"])
        compact.params[f"{name}.conv1.w"].data = net.params[f"{name}.conv1.w"].data[keep1].copy()
        compact.params[f"{name}.conv2.w"].data = (
            net.params[f"{name}.conv2.w"].data[keep2][:, keep1].copy()
        )
        for bn, keep in ((f"{name}.bn1", keep1), (f"{name}.bn2", keep2)):
            for part in ("gamma", "beta"):
                compact.params[f"{bn}.{part}"].data = net.params[f"{bn}.{part}"].data[keep].copy()
            compact.bn_stats[bn].mean = net.bn_stats[bn].mean[keep].copy()
            compact.bn_stats[bn].var = net.bn_stats[bn].var[keep].copy()
    for p in compact.params.values():
        p.zero_grad()
    return compact


@contextlib.contextmanager
def masked(net, plan):
    """Temporarily zero the filters, BN channels, and downstream weights
    a plan removes, without changing any shape. The zero-masked model is
    the semantic reference that apply_plan must match."""
    validate_plan(net, plan)
    saved = {name: p.data.copy() for name, p in net.params.items()}
    if isinstance(net, VggNet):
        widths = net.spec["widths"]
        for i in range(1, len(widths) + 1):
            drop = np.setdiff1d(np.arange(widths[i - 1]), plan.keeps[f"conv{i}"])
            if len(drop) == 0:
                continue
            net.params[f"conv{i}.w"].data[drop] = 0.0
            net.params[f"conv{i}.gamma"].data[drop] = 0.0
            net.params[f"conv{i}.beta"].data[drop] = 0.0
            if i < len(widths):
                net.params[f"conv{i + 1}.w"].data[:, drop] = 0.0
            else:
                sp = net.final_hw * net.final_hw
                cols = np.concatenate([np.arange(c * sp, (c + 1) * sp) for c in drop])
                net.params["head.w"].data[:, cols] = 0.0
    elif isinstance(net, ResNet):
        for bi, name in enumerate(net.block_names()):
            blk = net.spec["blocks"][bi]
            if blk["removed"]:
                continue
            parts = [f"{name}.conv1.w", f"{name}.bn1.gamma", f"{name}.bn1.beta",
                     f"{name}.conv2.w", f"{name}.bn2.gamma", f"{name}.bn2.beta"]
            if name in plan.removed_blocks:
                for p in parts:
                    net.params[p].data[...] = 0.0
                continue
            drop1 = np.setdiff1d(np.arange(blk["f1"]), plan.keeps[f"{name}.conv1"])
            drop2 = np.setdiff1d(np.arange(blk["f2"]), plan.keeps[f"{name}.conv2"])
            if len(drop1):
                net.params[f"{name}.conv1.w"].data[drop1] = 0.0
                net.params[f"{name}.bn1.gamma"].data[drop1] = 0.0
                net.params[f"{name}.bn1.beta"].data[drop1] = 0.0
                net.params[f"{name}.conv2.w"].data[:, drop1] = 0.0
            if len(drop2):
                net.params[f"{name}.conv2.w"].data[drop2] = 0.0
                net.params[f"{name}.bn2.gamma"].data[drop2] = 0.0
                net.params[f"{name}.bn2.beta"].data[drop2] = 0.0
    try:
        yield net
    finally:
        for name, p in net.params.items():
            p.data = saved[name]


# ---------------------------------------------------------------------------
# counting


def count_params(net):
    """Parameters of convs, BN affine pairs, and linear layers, counted
    from the actual tensors."""
    return sum(p.data.size for p in net.params.values())


def count_flops(net, input_hw=None):
    """Multiply-accumulate count of conv and linear layers for one input."""
    spec = net.spec
    if spec["kind"] == "mlp":
        return spec["blocks"] * 2 * spec["hidden"] * spec["dim"]
    hw = input_hw or spec["input_hw"]
    total = 0
    if spec["kind"] == "vgg":
        c = spec["in_channels"]
        pools = set(spec["pools_after"])
        for i, f in enumerate(spec["widths"], start=1):
            total += f * c * 9 * hw * hw
            c = f
            if i in pools:
                hw //= 2
        total += spec["num_classes"] * spec["widths"][-1] * hw * hw
        return total
    if spec["kind"] == "resnet":
        total += spec["stem"] * spec["in_channels"] * 9 * hw * hw
        in_c = spec["stem"]
        bi = 0
        for s, w in enumerate(spec["stage_widths"]):
            if s > 0:
                hw = (hw - 1) // 2 + 1
            for b in range(spec["blocks_per_stage"]):
                blk = spec["blocks"][bi]
                if b == 0 and s > 0:
                    total += w * in_c * hw * hw
                if not blk["removed"]:
                    total += blk["f1"] * in_c * 9 * hw * hw
                    total += blk["f2"] * blk["f1"] * 9 * hw * hw
                in_c = w
                bi += 1
        total += spec["num_classes"] * spec["stage_widths"][-1]
        return total
    raise ConfigError(f"unknown network kind {spec['kind']!r}")


def _plan_dims(net, plan):
    """Kept-filter sizes per layer from the plan (no tensors touched)."""
    if isinstance(net, VggNet):
        return [len(plan.keeps[f"conv{i}"]) for i in range(1, len(net.spec["widths"]) + 1)]
    sizes = {}
    for bi, name in enumerate(net.block_names()):
        blk = net.spec["blocks"][bi]
        if blk["removed"] or name in plan.removed_blocks:
            sizes[name] = None
        else:
            sizes[name] = (len(plan.keeps[f"{name}.conv1"]), len(plan.keeps[f"{name}.conv2"]))
    return sizes


def count_params_plan(net, plan):
    """Arithmetic parameter count of the compact model a plan implies."""
    validate_plan(net, plan)
    spec = net.spec
    if isinstance(net, ResidualMlp):
        return count_params(net)
    if isinstance(net, VggNet):
        keeps = _plan_dims(net, plan)
        total = 0
        c = spec["in_channels"]
        for k in keeps:
            total += k * c * 9 + 2 * k
            c = k
        total += spec["num_classes"] * keeps[-1] * net.final_hw ** 2 + spec["num_classes"]
        return total
    sizes = _plan_dims(net, plan)
    total = spec["stem"] * spec["in_channels"] * 9 + 2 * spec["stem"]
    in_c = spec["stem"]
    bi = 0
    for s, w in enumerate(spec["stage_widths"]):
        for b in range(spec["blocks_per_stage"]):
            name = f"s{s}b{b}"
            if b == 0 and s > 0:
                total += w * in_c + 2 * w
            if sizes[name] is not None:
                f1, f2 = sizes[name]
                total += f1 * in_c * 9 + 2 * f1 + f2 * f1 * 9 + 2 * f2
            in_c = w
            bi += 1
    total += spec["num_classes"] * spec["stage_widths"][-1] + spec["num_classes"]
    return total


def count_flops_plan(net, plan):
    """Arithmetic MAC count of the compact model a plan implies."""
    validate_plan(net, plan)
    spec = net.spec
    if isinstance(net, ResidualMlp):
        return count_flops(net)
    hw = spec["input_hw"]
    if isinstance(net, VggNet):
        keeps = _plan_dims(net, plan)
        pools = set(spec["pools_after"])
        total = 0
        c = spec["in_channels"]
        for i, k in enumerate(keeps, start=1):
            total += k * c * 9 * hw * hw
            c = k
            if i in pools:
                hw //= 2
        total += spec["num_classes"] * keeps[-1] * hw * hw
        return total
    sizes = _plan_dims(net, plan)
    total = spec["stem"] * spec["in_channels"] * 9 * hw * hw
    in_c = spec["stem"]
    for s, w in enumerate(spec["stage_widths"]):
        if s > 0:
            hw = (hw - 1) // 2 + 1
        for b in range(spec["blocks_per_stage"]):
            name = f"s{s}b{b}"
            if b == 0 and s > 0:
                total += w * in_c * hw * hw
            if sizes[name] is not None:
                f1, f2 = sizes[name]
                total += f1 * in_c * 9 * hw * hw + f2 * f1 * 9 * hw * hw
            in_c = w
    total += spec["num_classes"] * spec["stage_widths"][-1]
    return total


def params_removed(net, plan):
    return count_params(net) - count_params_plan(net, plan)


# ---------------------------------------------------------------------------
# sweeps and fine-tuning


def sparsity_sweep(net, test_set, thresholds, policy="global"):
    """Accuracy/sparsity trade-off by zero-masking at each threshold.

    The model is bitwise restored after each point.
    """
    if list(thresholds) != sorted(thresholds):
        raise ConfigError("thresholds must be ascending")
    total = count_params(net)
    reports = []
    for t in thresholds:
        plan = make_plan(net, threshold=t, policy=policy)
        with masked(net, plan):
            acc, _ = TR.evaluate(net, test_set)
        remaining = count_params_plan(net, plan)
        reports.append(
            SparsityReport(
                threshold=float(t),
                structured_sparsity=(total - remaining) / total,
                accuracy=acc,
                params_remaining=remaining,
                flops_remaining=count_flops_plan(net, plan),
            )
        )
    return reports


def fine_tune(
    net, train_set, test_set, epochs=30, lr=1e-4, momentum=0.9,
    weight_decay=5e-4, batch_size=128, seed=0, augment=True,
):
    """Short low-rate SGD on a compact model; restores the best-accuracy
    epoch into the model before returning."""
    if epochs == 0:
        acc, _ = TR.evaluate(net, test_set)
        return [], acc
    cfg = TR.TrainConfig(
        batch_size=batch_size, epochs=epochs, base_lr=lr, lr_milestones=[],
        momentum=momentum, weight_decay=weight_decay, seed=seed,
        augment=augment, ffr=FfrConfig(enabled=False),
    )
    best = {"acc": -1.0, "params": None, "stats": None}

    def snapshot(model, epoch, row):
        if row["test_acc"] != "" and row["test_acc"] > best["acc"]:
            best["acc"] = row["test_acc"]
            best["params"] = {n: p.data.copy() for n, p in model.params.items()}
            best["stats"] = {
                n: (st.mean.copy(), st.var.copy()) for n, st in model.bn_stats.items()
            }

    rows, _ = TR.train(net, train_set, cfg, test_set=test_set, on_epoch=snapshot)
    if best["params"] is not None:
        for n, arr in best["params"].items():
            net.params[n].data = arr
        for n, (m, v) in best["stats"].items():
            net.bn_stats[n].mean = m
            net.bn_stats[n].var = v
    return rows, best["acc"]


# ---------------------------------------------------------------------------
# plan files


def format_plan(plan):
    lines = ["# flowprune prune plan v1", f"model_hash {plan.model_hash or '-'}"]
    for name, keep in plan.keeps.items():
        lines.append(f"layer {name} keep {','.join(str(i) for i in keep)}")
    for name in plan.removed_blocks:
        lines.append(f"removed_block {name}")
    return "\n".join(lines) + "\n"


def parse_plan(text):
    plan = PrunePlan()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "model_hash" and len(parts) == 2:
            plan.model_hash = "" if parts[1] == "-" else parts[1]
        elif parts[0] == "layer" and len(parts) == 4 and parts[2] == "keep":
            plan.keeps[parts[1]] = [int(x) for x in parts[3].split(",") if x != ""]
        elif parts[0] == "removed_block" and len(parts) == 2:
            plan.removed_blocks.append(parts[1])
        else:
            raise ConfigError(f"plan line {ln}: cannot parse {raw!r}")
    return plan
