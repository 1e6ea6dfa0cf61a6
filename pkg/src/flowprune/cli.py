"""Command-line pipeline: train, sweep, prune, finetune, stats, demo2d,
synth-data. JSON config files drive every run; numeric CSV output is
formatted at 17 significant digits so reruns are byte-identical."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from flowprune import checkpoint as CK
from flowprune import data as D
from flowprune import nets
from flowprune import prune as P
from flowprune import train as TR
from flowprune.regularizer import (
    FfrConfig,
    measure_mean_curvature,
    measure_mean_length,
)
from flowprune.tensor import ConfigError, NumericalError, Tensor

# ---------------------------------------------------------------------------
# config schema


_FFR_SCHEMA = {"enabled": bool, "k1": float, "k2": float, "stage_scaling": str}
_SCHEMA = {
    "schema": int,
    "seed": int,
    "out_dir": str,
    "model": {"name": str, "hidden": int, "blocks": int},
    "dataset": {
        "kind": str, "dir": str, "subset": int, "subset_seed": int,
        "test_subset": int, "n_train": int, "n_test": int, "seed": int,
        "difficulty": float, "n": int, "layout": str,
    },
    "train": {
        "batch_size": int, "epochs": int, "base_lr": float,
        "lr_milestones": list, "lr_factor": float, "momentum": float,
        "weight_decay": float, "augment": bool, "ffr": _FFR_SCHEMA,
    },
    "demo": {
        "iterations": int, "lr": float, "lr_milestones": list,
        "lr_factor": float, "momentum": float, "log_every": int,
        "ffr": _FFR_SCHEMA,
    },
    "prune": {
        "policy": str, "threshold": float, "fraction": float, "thresholds": list,
    },
    "finetune": {
        "epochs": int, "lr": float, "momentum": float, "weight_decay": float,
        "batch_size": int, "augment": bool,
    },
    "stats": {"batch": int, "split": str, "seed": int},
}


def _validate(cfg, schema, path=""):
    if not isinstance(cfg, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    for key, val in cfg.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key: {where}")
        want = schema[key]
        if isinstance(want, dict):
            _validate(val, want, where)
        elif want is float:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"config key {where} must be a number")
        elif want is int:
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"config key {where} must be an integer")
        elif not isinstance(val, want):
            raise ConfigError(f"config key {where} must be {want.__name__}")


def load_config(path, overrides=()):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"missing config file: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} crosses a non-object key")
        node[parts[-1]] = val
    _validate(cfg, _SCHEMA)
    if cfg.get("schema") != 1:
        raise ConfigError("config must set \"schema\": 1")
    for req in ("seed", "out_dir"):
        if req not in cfg:
            raise ConfigError(f"config is missing required key: {req}")
    return cfg


def _section(cfg, name, required=True):
    if name not in cfg:
        if required:
            raise ConfigError(f"config is missing required section: {name}")
        return {}
    return cfg[name]


# ---------------------------------------------------------------------------
# shared plumbing


def fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def build_model(cfg):
    model = _section(cfg, "model")
    if "name" not in model:
        raise ConfigError("config is missing model.name")
    rng = np.random.default_rng([cfg["seed"], 0])
    name = model["name"]
    if name == "demo_mlp":
        return nets.build_demo_mlp(
            rng, blocks=model.get("blocks", 5), hidden=model.get("hidden", 16)
        )
    return nets.build_named(name, rng)


def load_image_data(cfg):
    ds = _section(cfg, "dataset")
    kind = ds.get("kind")
    if kind == "cifar10":
        if "dir" not in ds:
            raise ConfigError("dataset.kind cifar10 needs dataset.dir")
        train, test = D.load_cifar10(ds["dir"])
    elif kind == "synthetic_cifar10":
        train, test = D.synthetic_cifar10(
            ds.get("n_train", 5000), ds.get("n_test", 1000),
            ds.get("seed", 0), ds.get("difficulty", 0.55),
        )
    else:
        raise ConfigError(f"dataset.kind {kind!r} is not an image dataset")
    if "subset" in ds:
        train = D.subset(train, ds["subset"], ds.get("subset_seed", 0))
    if "test_subset" in ds:
        test = D.subset(test, ds["test_subset"], ds.get("subset_seed", 0) + 1)
    return train, test


def make_ffr(section):
    return FfrConfig(
        k1=section.get("k1", 0.0),
        k2=section.get("k2", 0.0),
        enabled=section.get("enabled", True),
        stage_scaling=section.get("stage_scaling", "spatial"),
    )


def make_train_config(cfg):
    t = _section(cfg, "train")
    return TR.TrainConfig(
        batch_size=t.get("batch_size", 128),
        epochs=t.get("epochs", 200),
        base_lr=t.get("base_lr", 0.1),
        lr_milestones=t.get("lr_milestones", [80, 120, 160]),
        lr_factor=t.get("lr_factor", 0.1),
        momentum=t.get("momentum", 0.9),
        weight_decay=t.get("weight_decay", 5e-4),
        seed=cfg["seed"],
        augment=t.get("augment", True),
        ffr=make_ffr(t.get("ffr", {})),
    )


METRIC_HEADER = TR.METRIC_COLUMNS


def _metric_rows(rows):
    return [[r[c] for c in METRIC_HEADER] for r in rows]


def _load_net(path):
    return CK.load_checkpoint(path).build_network()


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    cfg = load_config(args.config, args.set or [])
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    tcfg = make_train_config(cfg)
    train_set, test_set = load_image_data(cfg)
    if args.resume:
        loaded = CK.load_checkpoint(args.resume)
        net = loaded.build_network()
        state = TR.TrainState(
            velocities=loaded.velocities(),
            projections=loaded.build_projections(),
            next_epoch=loaded.epoch,
            shuffle_state=loaded.rng_state["shuffle"],
            augment_state=loaded.rng_state["augment"],
        )
    else:
        net = build_model(cfg)
        state = None
    rows, state = TR.train(net, train_set, tcfg, test_set=test_set, state=state)
    write_csv(os.path.join(out, "metrics.csv"), METRIC_HEADER, _metric_rows(rows))
    CK.save_checkpoint(
        os.path.join(out, "train.ckpt"), net,
        projections=state.projections, velocities=state.velocities,
        epoch=state.next_epoch, config=cfg,
        rng_state={"shuffle": state.shuffle_state, "augment": state.augment_state},
    )
    CK.save_checkpoint(os.path.join(out, "model.ckpt"), net, config=cfg, deploy=True)
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config, args.set or [])
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    thresholds = _section(cfg, "prune").get("thresholds")
    if not isinstance(thresholds, list) or not thresholds:
        raise ConfigError("sweep needs prune.thresholds (ascending list)")
    net = _load_net(args.checkpoint)
    _, test_set = load_image_data(cfg)
    reports = P.sparsity_sweep(net, test_set, thresholds)
    write_csv(
        os.path.join(out, "sweep.csv"),
        ["threshold", "sparsity", "accuracy", "params", "flops"],
        [
            [r.threshold, r.structured_sparsity, r.accuracy,
             r.params_remaining, r.flops_remaining]
            for r in reports
        ],
    )
    return 0


def cmd_prune(args):
    cfg = load_config(args.config, args.set or [])
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    pcfg = _section(cfg, "prune", required=False)
    policy = pcfg.get("policy", "global")
    threshold = args.threshold if args.threshold is not None else pcfg.get("threshold")
    fraction = args.fraction if args.fraction is not None else pcfg.get("fraction")
    net = _load_net(args.checkpoint)
    plan = P.make_plan(net, threshold=threshold, policy=policy, fraction=fraction)
    compact = P.apply_plan(net, plan)
    with open(os.path.join(out, "plan.txt"), "w") as f:
        f.write(P.format_plan(plan))
    CK.save_checkpoint(os.path.join(out, "pruned.ckpt"), compact, config=cfg, deploy=True)
    p0, f0 = P.count_params(net), P.count_flops(net)
    p1, f1 = P.count_params(compact), P.count_flops(compact)
    write_json(
        os.path.join(out, "counts.json"),
        {
            "policy": policy, "threshold": threshold, "fraction": fraction,
            "params_original": p0, "params_pruned": p1,
            "flops_original": f0, "flops_pruned": f1,
            "param_reduction": 1.0 - p1 / p0, "flop_reduction": 1.0 - f1 / f0,
            "removed_blocks": list(plan.removed_blocks),
        },
    )
    return 0


def cmd_finetune(args):
    cfg = load_config(args.config, args.set or [])
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    f = _section(cfg, "finetune", required=False)
    net = _load_net(args.checkpoint)
    train_set, test_set = load_image_data(cfg)
    rows, best = P.fine_tune(
        net, train_set, test_set,
        epochs=f.get("epochs", 30), lr=f.get("lr", 1e-4),
        momentum=f.get("momentum", 0.9), weight_decay=f.get("weight_decay", 5e-4),
        batch_size=f.get("batch_size", 128), seed=cfg["seed"],
        augment=f.get("augment", True),
    )
    write_csv(os.path.join(out, "finetune_metrics.csv"), METRIC_HEADER, _metric_rows(rows))
    CK.save_checkpoint(os.path.join(out, "finetuned.ckpt"), net, config=cfg, deploy=True)
    write_json(os.path.join(out, "finetune_summary.json"), {"best_test_acc": best})
    return 0


def cmd_stats(args):
    cfg = load_config(args.config, args.set or [])
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    s = _section(cfg, "stats", required=False)
    net = _load_net(args.checkpoint)
    train_set, test_set = load_image_data(cfg)
    source = test_set if s.get("split", "test") == "test" else train_set
    batch = D.subset(source, min(s.get("batch", 256), len(source)), s.get("seed", 0))
    _, taps = net.forward_with_taps(Tensor(batch.images), train=False)
    norm_rows = []
    for name, tap in zip(net.tap_names(), taps):
        per_map = np.abs(tap.data).sum(axis=(2, 3)).mean(axis=0)
        for c, v in enumerate(per_map):
            norm_rows.append([name, c, v])
    write_csv(os.path.join(out, "feature_norms.csv"), ["layer", "channel", "l1_norm"], norm_rows)
    mag_rows = [
        [name, f, v]
        for name, mags in P.filter_magnitudes(net).items()
        for f, v in enumerate(mags)
    ]
    write_csv(os.path.join(out, "filter_magnitudes.csv"), ["layer", "filter", "l1_norm"], mag_rows)
    return 0


def cmd_demo2d(args):
    cfg = load_config(args.config, args.set or [])
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    ds = _section(cfg, "dataset")
    if ds.get("kind") != "clusters2d":
        raise ConfigError("demo2d needs dataset.kind clusters2d")
    clusters = D.make_clusters_2d(
        seed=ds.get("seed", 0), n=ds.get("n", 50), layout=ds.get("layout", "uniform")
    )
    with open(os.path.join(out, "clusters.csv"), "w") as f:
        f.write(D.clusters_to_csv(clusters))
    demo = _section(cfg, "demo")
    summary = {}
    for variant in ("baseline", "ffr"):
        model = _section(cfg, "model", required=False)
        net = nets.build_demo_mlp(
            np.random.default_rng([cfg["seed"], 0]),
            blocks=model.get("blocks", 5), hidden=model.get("hidden", 16),
        )
        base = TR.DemoConfig()
        dcfg = TR.DemoConfig(
            iterations=demo.get("iterations", base.iterations),
            lr=demo.get("lr", base.lr),
            lr_milestones=demo.get("lr_milestones", base.lr_milestones),
            lr_factor=demo.get("lr_factor", base.lr_factor),
            momentum=demo.get("momentum", base.momentum),
            seed=cfg["seed"],
            log_every=demo.get("log_every", base.log_every),
            ffr=make_ffr(demo.get("ffr", {})) if variant == "ffr" else FfrConfig(enabled=False),
        )
        rows = TR.train_demo(net, clusters, dcfg)
        write_csv(
            os.path.join(out, f"demo_metrics_{variant}.csv"),
            ["iteration", "lr", "total_loss", "mse"],
            [[r["iteration"], r["lr"], r["total_loss"], r["mse"]] for r in rows],
        )
        points = TR.demo_polyline(net, clusters.inputs)
        blocks = len(points) - 1
        header = ["in_x", "in_y"]
        for i in range(1, blocks + 1):
            header += [f"b{i}_x", f"b{i}_y"]
        header += ["out_x", "out_y"]
        traj_rows = []
        for j in range(len(clusters.inputs)):
            row = []
            for pt in points:
                row += [pt[j, 0], pt[j, 1]]
            row += [points[-1][j, 0], points[-1][j, 1]]
            traj_rows.append(row)
        write_csv(os.path.join(out, f"trajectories_{variant}.csv"), header, traj_rows)
        mse = float(np.mean((points[-1] - clusters.targets) ** 2))
        summary[variant] = {
            "mse": mse,
            "mean_length": measure_mean_length(points),
            "mean_curvature": measure_mean_curvature(points),
        }
    write_json(os.path.join(out, "demo_summary.json"), summary)
    return 0


def cmd_synth_data(args):
    D.write_synthetic_cifar10(
        args.dir, n_train=args.n_train, n_test=args.n_test,
        seed=args.seed, difficulty=args.difficulty,
    )
    return 0


# ---------------------------------------------------------------------------


def _add_common(sp, checkpoint=False):
    sp.add_argument("--config", required=True, help="JSON run config")
    sp.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override a config key (dotted path, JSON value)",
    )
    if checkpoint:
        sp.add_argument("--checkpoint", required=True, help="input checkpoint file")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="flowprune",
        description="Train, regularize, and structurally prune small conv nets.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train a model per config")
    _add_common(sp)
    sp.add_argument("--resume", help="continue from a training checkpoint")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sweep", help="accuracy/sparsity sweep over thresholds")
    _add_common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("prune", help="one-shot structured pruning")
    _add_common(sp, checkpoint=True)
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--fraction", type=float)
    sp.set_defaults(fn=cmd_prune)

    sp = sub.add_parser("finetune", help="fine-tune a pruned model")
    _add_common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_finetune)

    sp = sub.add_parser("stats", help="feature-map norms and filter magnitudes")
    _add_common(sp, checkpoint=True)
    sp.set_defaults(fn=cmd_stats)

    sp = sub.add_parser("demo2d", help="paired 2-D translation demo")
    _add_common(sp)
    sp.set_defaults(fn=cmd_demo2d)

    sp = sub.add_parser("synth-data", help="write synthetic data in the CIFAR-10 binary layout")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--n-train", type=int, default=50000)
    sp.add_argument("--n-test", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--difficulty", type=float, default=0.55)
    sp.set_defaults(fn=cmd_synth_data)

    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except D.DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
