"""Network builders: VGG-style conv stacks, two-conv residual nets, and
the small fully-connected residual net for the 2-D translation demo.

Every network is described by a plain serializable spec dict and carries
its parameters in an insertion-ordered name -> Tensor mapping, so
checkpoints, pruning, and the optimizer all agree on one naming scheme.
"""

from __future__ import annotations

import numpy as np

from flowprune import tensor as T
from flowprune.tensor import ConfigError, RunningStats, ShapeError, Tensor


def he_conv(rng, f, c, k):
    return rng.standard_normal((f, c, k, k)) * np.sqrt(2.0 / (c * k * k))


def he_linear(rng, out_features, in_features):
    return rng.standard_normal((out_features, in_features)) * np.sqrt(2.0 / in_features)


def identity_kernel(channels, k=3):
    """Convolution weight whose filter i passes channel i through unchanged."""
    w = np.zeros((channels, channels, k, k))
    mid = k // 2
    for i in range(channels):
        w[i, i, mid, mid] = 1.0
    return w


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _NetBase:
    def __init__(self):
        self.params = {}
        self.bn_stats = {}

    def _param(self, name, data):
        t = T.param(data, name)
        self.params[name] = t
        return t

    def _bn(self, name, channels):
        self._param(f"{name}.gamma", np.ones(channels))
        self._param(f"{name}.beta", np.zeros(channels))
        self.bn_stats[name] = RunningStats(channels)

    def _apply_bn(self, name, x, train):
        return T.batchnorm2d(
            x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
            self.bn_stats[name], train=train,
        )

    def forward(self, x, train=False):
        out, _ = self.forward_with_taps(x, train=train)
        return out

    def no_decay_names(self):
        """Linear biases are exempt from weight decay."""
        return {n for n in self.params if n.endswith(".b") or n.endswith(".b1") or n.endswith(".b2")}

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()


class VggNet(_NetBase):
    """Stack of conv(3x3, pad 1) + BN + ReLU blocks with interleaved
    max pooling and a linear classifier head.

    Taps are the post-ReLU block outputs, taken before the pooling that
    follows a block, so every stage (pool-delimited run of blocks) has
    exactly one shape boundary at its first tap.
    """

    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        widths = spec["widths"]
        pools = set(spec["pools_after"])
        if any(p < 1 or p > len(widths) for p in pools):
            raise ConfigError("pools_after indices out of range")
        hw = spec["input_hw"]
        c = spec["in_channels"]
        rng = rng or np.random.default_rng(0)
        for i, f in enumerate(widths, start=1):
            self._param(f"conv{i}.w", he_conv(rng, f, c, 3))
            self._bn(f"conv{i}", f)
            c = f
            if i in pools:
                hw //= 2
        self.final_hw = hw
        head_in = widths[-1] * hw * hw
        self._param("head.w", he_linear(rng, spec["num_classes"], head_in))
        self._param("head.b", np.zeros(spec["num_classes"]))

    def tap_shapes(self):
        shapes = []
        hw = self.spec["input_hw"]
        for i, f in enumerate(self.spec["widths"], start=1):
            shapes.append((f, hw, hw))
            if i in set(self.spec["pools_after"]):
                hw //= 2
        return shapes

    def tap_names(self):
        return [f"conv{i}" for i in range(1, len(self.spec["widths"]) + 1)]

    def forward_with_taps(self, x, train=False):
        x = _as_tensor(x)
        pools = set(self.spec["pools_after"])
        h = x
        taps = []
        for i in range(1, len(self.spec["widths"]) + 1):
            h = T.conv2d(h, self.params[f"conv{i}.w"], stride=1, padding=1)
            h = self._apply_bn(f"conv{i}", h, train)
            h = T.relu(h)
            taps.append(h)
            if i in pools:
                h = T.maxpool2d(h, 2)
        logits = T.linear(T.flatten(h), self.params["head.w"], self.params["head.b"])
        return logits, taps


class ResNet(_NetBase):
    """Stem conv + stages of two-conv residual blocks + average pool head.

    Each block computes relu(branch + shortcut) where the branch is
    relu(bn2(conv2(relu(bn1(conv1(x)))))). Stage transitions use stride 2
    in conv1 and a 1x1 stride-2 projection shortcut with BN.

    Pruned specs may narrow conv1/conv2 per block; a narrowed conv2's
    output channels are scattered back to the trunk width with zeros
    before the addition, and a block whose branch was removed entirely
    reduces to relu(shortcut).
    """

    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        rng = rng or np.random.default_rng(0)
        stem = spec["stem"]
        widths = spec["stage_widths"]
        bps = spec["blocks_per_stage"]
        blocks = spec.get("blocks")
        if blocks is None:
            blocks = [
                {"f1": widths[s], "f2": widths[s], "scatter": None, "removed": False}
                for s in range(len(widths))
                for _ in range(bps)
            ]
            spec = dict(spec, blocks=blocks)
            self.spec = spec
        if len(blocks) != len(widths) * bps:
            raise ConfigError("blocks list does not match stage layout")

        self._param("stem.w", he_conv(rng, stem, spec["in_channels"], 3))
        self._bn("stem", stem)
        in_c = stem
        bi = 0
        for s, w in enumerate(widths):
            for b in range(bps):
                blk = blocks[bi]
                name = f"s{s}b{b}"
                first = b == 0 and s > 0
                if first:
                    self._param(f"{name}.down.w", he_conv(rng, w, in_c, 1))
                    self._bn(f"{name}.downbn", w)
                if not blk["removed"]:
                    f1, f2 = blk["f1"], blk["f2"]
                    if f1 < 1 or f2 < 1:
                        raise ConfigError(f"block {name}: conv widths must be >= 1")
                    scatter = blk["scatter"]
                    if scatter is not None and len(scatter) != f2:
                        raise ConfigError(f"block {name}: scatter size != conv2 filters")
                    self._param(f"{name}.conv1.w", he_conv(rng, f1, in_c, 3))
                    self._bn(f"{name}.bn1", f1)
                    self._param(f"{name}.conv2.w", he_conv(rng, f2, f1, 3))
                    self._bn(f"{name}.bn2", f2)
                in_c = w
                bi += 1
        self._param("head.w", he_linear(rng, spec["num_classes"], widths[-1]))
        self._param("head.b", np.zeros(spec["num_classes"]))

    def block_names(self):
        widths = self.spec["stage_widths"]
        bps = self.spec["blocks_per_stage"]
        return [f"s{s}b{b}" for s in range(len(widths)) for b in range(bps)]

    def tap_shapes(self):
        hw = self.spec["input_hw"]
        shapes = []
        for s, w in enumerate(self.spec["stage_widths"]):
            if s > 0:
                hw = (hw - 1) // 2 + 1
            shapes.extend([(w, hw, hw)] * self.spec["blocks_per_stage"])
        return shapes

    def tap_names(self):
        return self.block_names()

    def forward_with_taps(self, x, train=False):
        x = _as_tensor(x)
        spec = self.spec
        h = T.relu(self._apply_bn("stem", T.conv2d(x, self.params["stem.w"], stride=1, padding=1), train))
        taps = []
        bi = 0
        for s, w in enumerate(spec["stage_widths"]):
            for b in range(spec["blocks_per_stage"]):
                blk = spec["blocks"][bi]
                name = f"s{s}b{b}"
                first = b == 0 and s > 0
                stride = 2 if first else 1
                if first:
                    short = self._apply_bn(
                        f"{name}.downbn",
                        T.conv2d(h, self.params[f"{name}.down.w"], stride=2),
                        train,
                    )
                else:
                    short = h
                if blk["removed"]:
                    h = T.relu(short)
                else:
                    m = T.conv2d(h, self.params[f"{name}.conv1.w"], stride=stride, padding=1)
                    m = T.relu(self._apply_bn(f"{name}.bn1", m, train))
                    m = T.conv2d(m, self.params[f"{name}.conv2.w"], stride=1, padding=1)
                    m = T.relu(self._apply_bn(f"{name}.bn2", m, train))
                    if blk["scatter"] is not None:
                        m = T.scatter_channels(m, blk["scatter"], w)
                    h = T.relu(T.add(m, short))
                taps.append(h)
                bi += 1
        pooled = T.global_avg_pool(h)
        logits = T.linear(pooled, self.params["head.w"], self.params["head.b"])
        return logits, taps


class ResidualMlp(_NetBase):
    """Chain of fully-connected residual blocks acting on fixed-size
    vectors: x <- relu(x + W2·relu(W1·x + b1) + b2).

    The network output is the last block's output; there is no head. The
    input point is part of the feature polyline for this net.
    """

    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        rng = rng or np.random.default_rng(0)
        d, hdim = spec["dim"], spec["hidden"]
        for i in range(1, spec["blocks"] + 1):
            # damped branch init: raw positive-quadrant inputs are O(6), so
            # He-scale branches overshoot under full-batch GD and park every
            # relu(x + branch) at zero. 0.1x keeps blocks near-identity.
            self._param(f"block{i}.w1", 0.1 * he_linear(rng, hdim, d))
            self._param(f"block{i}.b1", np.zeros(hdim))
            self._param(f"block{i}.w2", 0.1 * he_linear(rng, d, hdim))
            self._param(f"block{i}.b2", np.zeros(d))

    def tap_shapes(self):
        return [(self.spec["dim"],)] * self.spec["blocks"]

    def tap_names(self):
        return [f"block{i}" for i in range(1, self.spec["blocks"] + 1)]

    def forward_with_taps(self, x, train=False):
        x = _as_tensor(x)
        h = x
        taps = []
        for i in range(1, self.spec["blocks"] + 1):
            t = T.relu(T.linear(h, self.params[f"block{i}.w1"], self.params[f"block{i}.b1"]))
            t = T.linear(t, self.params[f"block{i}.w2"], self.params[f"block{i}.b2"])
            h = T.relu(T.add(h, t))
            taps.append(h)
        return h, taps


# ---------------------------------------------------------------------------
# builders


def build_vgg16_cifar(rng=None, num_classes=10):
    """13-conv VGG for 32x32 inputs: widths 64..512, five pooling points,
    512-feature linear head."""
    spec = {
        "kind": "vgg",
        "in_channels": 3,
        "input_hw": 32,
        "num_classes": num_classes,
        "widths": [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512],
        "pools_after": [2, 4, 7, 10, 13],
        "flow_includes_input": False,
    }
    return VggNet(spec, rng)


def build_desk_vgg8(rng=None, num_classes=10):
    """8-conv VGG variant capped at width 128, small enough to train on a
    single CPU core while keeping the full pipeline shape."""
    spec = {
        "kind": "vgg",
        "in_channels": 3,
        "input_hw": 32,
        "num_classes": num_classes,
        "widths": [16, 16, 32, 32, 64, 64, 128, 128],
        "pools_after": [2, 4, 6, 8],
        "flow_includes_input": False,
    }
    return VggNet(spec, rng)


def build_resnet56_cifar(rng=None, num_classes=10):
    """Three-stage residual net for 32x32 inputs: 16-filter stem, 9
    two-conv blocks per stage at widths 16/32/64, average-pool head."""
    spec = {
        "kind": "resnet",
        "in_channels": 3,
        "input_hw": 32,
        "num_classes": num_classes,
        "stem": 16,
        "stage_widths": [16, 32, 64],
        "blocks_per_stage": 9,
        "flow_includes_input": False,
    }
    return ResNet(spec, rng)


def build_demo_mlp(rng=None, blocks=5, hidden=16, dim=2):
    """Five-block residual MLP mapping 2-D points to 2-D points."""
    spec = {
        "kind": "mlp",
        "dim": dim,
        "hidden": hidden,
        "blocks": blocks,
        "flow_includes_input": True,
    }
    return ResidualMlp(spec, rng)


_BUILDERS = {
    "vgg16_cifar": build_vgg16_cifar,
    "desk_vgg8": build_desk_vgg8,
    "resnet56_cifar": build_resnet56_cifar,
    "demo_mlp": build_demo_mlp,
}


def build_named(name, rng=None):
    if name not in _BUILDERS:
        raise ConfigError(f"unknown model name {name!r}; choices: {sorted(_BUILDERS)}")
    return _BUILDERS[name](rng)


def build_network(spec, rng=None):
    """Instantiate any serialized spec dict (fresh He-initialized params)."""
    kind = spec.get("kind")
    if kind == "vgg":
        return VggNet(dict(spec), rng)
    if kind == "resnet":
        return ResNet(dict(spec), rng)
    if kind == "mlp":
        return ResidualMlp(dict(spec), rng)
    raise ConfigError(f"unknown network kind {kind!r}")
