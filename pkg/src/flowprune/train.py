"""SGD training loops: mini-batch classification with optional feature-
flow penalties, and the full-batch trainer for the 2-D translation demo."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowprune import tensor as T
from flowprune import data as D
from flowprune.flow import group_by_stage, make_projections
from flowprune.regularizer import FfrConfig, ffr_curvature, ffr_length, _projected_boundaries
from flowprune.tensor import ConfigError, NumericalError, Tape, Tensor


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 200
    base_lr: float = 0.1
    lr_milestones: list = field(default_factory=lambda: [80, 120, 160])
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True
    ffr: FfrConfig = field(default_factory=FfrConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        ms = list(self.lr_milestones)
        if ms != sorted(ms) or len(set(ms)) != len(ms) or any(
            m < 0 or m >= self.epochs for m in ms
        ):
            raise ConfigError("lr_milestones must be strictly increasing and < epochs")

    def lr_at(self, epoch):
        drops = sum(1 for m in self.lr_milestones if m <= epoch)
        return self.base_lr * self.lr_factor ** drops


def sgd_step(params, velocities, lr, momentum, weight_decay, no_decay=frozenset()):
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v."""
    for name, p in params.items():
        g = p.grad if p.grad is not None else 0.0
        if weight_decay != 0 and name not in no_decay:
            g = g + weight_decay * p.data
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocities[name] = v
        v *= momentum
        v += g
        p.data -= lr * v


def _first_non_finite(tape, params):
    for i, node in enumerate(tape.nodes):
        if not np.all(np.isfinite(node.out.data)):
            return f"op '{node.op}' (tape node {i})"
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter '{name}'"
    return "loss"


def evaluate(net, dataset, batch_size=200):
    """Eval-mode accuracy and mean cross-entropy; no tape, no stat updates."""
    n = len(dataset)
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        xb = dataset.images[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        logits = net.forward(Tensor(xb), train=False)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == yb).sum())
        loss_sum += float(T.softmax_cross_entropy(logits, yb).data) * len(yb)
    return correct / n, loss_sum / n


METRIC_COLUMNS = [
    "epoch", "lr", "train_loss", "task_loss",
    "ffr_length", "ffr_curvature", "train_acc", "test_acc",
]


@dataclass
class TrainState:
    """Everything needed to resume: optimizer velocities, projections,
    epoch counter, and the data-order RNG states."""
    velocities: dict
    projections: list
    next_epoch: int
    shuffle_state: dict
    augment_state: dict


def init_train_state(net, cfg):
    velocities = {}
    projections = []
    if cfg.ffr.active:
        proj_rng = np.random.default_rng([cfg.seed, 0xFF])
        shapes = net.tap_shapes()
        if net.spec.get("flow_includes_input"):
            shapes = [shapes[0]] + shapes
        projections = make_projections(shapes, proj_rng)
    shuffle = np.random.default_rng([cfg.seed, 1])
    augment = np.random.default_rng([cfg.seed, 2])
    return TrainState(
        velocities, projections, 0,
        shuffle.bit_generator.state, augment.bit_generator.state,
    )


def train(net, train_set, cfg, test_set=None, state=None, epochs=None, on_epoch=None):
    """Run (remaining) epochs of shuffled mini-batch SGD.

    Returns (metrics rows, state). Passing the returned state back in
    continues the run exactly where it stopped.
    """
    if len(train_set) == 0:
        raise ConfigError("train: empty dataset")
    if state is None:
        state = init_train_state(net, cfg)
    shuffle_rng = np.random.default_rng()
    shuffle_rng.bit_generator.state = state.shuffle_state
    aug_rng = np.random.default_rng()
    aug_rng.bit_generator.state = state.augment_state

    all_params = dict(net.params)
    for proj in state.projections:
        all_params[proj.name] = proj.w
    no_decay = net.no_decay_names()
    include_input = bool(net.spec.get("flow_includes_input"))

    n = len(train_set)
    stop = cfg.epochs if epochs is None else min(cfg.epochs, state.next_epoch + epochs)
    rows = []
    for epoch in range(state.next_epoch, stop):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        sums = np.zeros(4)
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = train_set.images[idx]
            yb = train_set.labels[idx]
            if cfg.augment:
                xb = D.augment_batch(xb, aug_rng)
            xt = Tensor(xb)
            with Tape() as tape:
                logits, taps = net.forward_with_taps(xt, train=True)
                task = T.softmax_cross_entropy(logits, yb)
                if cfg.ffr.active:
                    fl = group_by_stage([xt] + taps if include_input else taps)
                    projected = _projected_boundaries(fl, state.projections)
                    parts = [task]
                    if cfg.ffr.k1 > 0:
                        parts.append(ffr_length(fl, state.projections, cfg.ffr, _projected=projected))
                    if cfg.ffr.k2 > 0:
                        parts.append(ffr_curvature(fl, state.projections, cfg.ffr, _projected=projected))
                    loss = parts[0]
                    for p in parts[1:]:
                        loss = T.add(loss, p)
                    len_val = float(parts[1].data) if cfg.ffr.k1 > 0 else 0.0
                    curv_val = float(parts[-1].data) if cfg.ffr.k2 > 0 else 0.0
                else:
                    loss = task
                    len_val = curv_val = 0.0
                if not np.isfinite(loss.data):
                    raise NumericalError(
                        f"non-finite loss in epoch {epoch + 1} at sample offset {start}; "
                        f"first non-finite tensor: {_first_non_finite(tape, all_params)}"
                    )
                for p in all_params.values():
                    p.zero_grad()
                T.backward(loss, release=True)
            sgd_step(all_params, state.velocities, lr, cfg.momentum, cfg.weight_decay, no_decay)
            b = len(idx)
            sums += b * np.array([float(loss.data), float(task.data), len_val, curv_val])
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        means = sums / n
        test_acc = ""
        if test_set is not None:
            test_acc, _ = evaluate(net, test_set)
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": means[0],
            "task_loss": means[1],
            "ffr_length": means[2],
            "ffr_curvature": means[3],
            "train_acc": correct / n,
            "test_acc": test_acc,
        }
        rows.append(row)
        state.next_epoch = epoch + 1
        state.shuffle_state = shuffle_rng.bit_generator.state
        state.augment_state = aug_rng.bit_generator.state
        if on_epoch is not None:
            on_epoch(net, epoch, row)
    return rows, state


# ---------------------------------------------------------------------------
# 2-D demo: full-batch regression


@dataclass
class DemoConfig:
    # long constant-lr phase, then a deep anneal: the sign subgradients of
    # the flow penalties oscillate at amplitude ~lr, so the final lr sets
    # how precisely trajectories settle
    iterations: int = 100000
    lr: float = 0.1
    lr_milestones: list = field(default_factory=lambda: [70000, 85000, 92000, 96000])
    lr_factor: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    log_every: int = 500
    ffr: FfrConfig = field(default_factory=FfrConfig)

    def lr_at(self, it):
        drops = sum(1 for m in self.lr_milestones if m <= it)
        return self.lr * self.lr_factor ** drops


def demo_polyline(net, inputs):
    """Raw trajectory arrays [input, block outputs...] without a tape."""
    out, taps = net.forward_with_taps(Tensor(inputs), train=False)
    return [inputs] + [t.data for t in taps]


def train_demo(net, clusters, cfg):
    """Full-batch gradient descent on the paired-cluster translation task."""
    x = Tensor(clusters.inputs)
    target = Tensor(clusters.targets)
    projections = []
    if cfg.ffr.active:
        # input and taps share one shape here, so normally no boundaries
        shapes = [net.tap_shapes()[0]] + net.tap_shapes()
        projections = make_projections(shapes, np.random.default_rng([cfg.seed, 0xFF]))
    all_params = dict(net.params)
    for proj in projections:
        all_params[proj.name] = proj.w
    velocities = {}
    rows = []
    for it in range(cfg.iterations):
        lr = cfg.lr_at(it)
        with Tape() as tape:
            out, taps = net.forward_with_taps(x, train=True)
            task = T.mse(out, target)
            parts = [task]
            if cfg.ffr.active:
                fl = group_by_stage([x] + taps)
                projected = _projected_boundaries(fl, projections)
                if cfg.ffr.k1 > 0:
                    parts.append(ffr_length(fl, projections, cfg.ffr, _projected=projected))
                if cfg.ffr.k2 > 0:
                    parts.append(ffr_curvature(fl, projections, cfg.ffr, _projected=projected))
            loss = parts[0]
            for p in parts[1:]:
                loss = T.add(loss, p)
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"non-finite loss at iteration {it}; first non-finite tensor: "
                    f"{_first_non_finite(tape, all_params)}"
                )
            for p in all_params.values():
                p.zero_grad()
            T.backward(loss, release=True)
        sgd_step(all_params, velocities, lr, cfg.momentum, 0.0)
        if (it + 1) % cfg.log_every == 0 or it == cfg.iterations - 1:
            rows.append(
                {"iteration": it + 1, "lr": lr, "total_loss": float(loss.data),
                 "mse": float(task.data)}
            )
    return rows
