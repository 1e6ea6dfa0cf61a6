"""Checkpoint format tests: round trips, deploy stripping, corruption."""

import numpy as np
import pytest

from flowprune import checkpoint as C
from flowprune.flow import make_projections
from flowprune.nets import VggNet, build_named
from flowprune.tensor import ConfigError, Tensor


def small_net(seed=1):
    spec = {
        "kind": "vgg", "in_channels": 3, "input_hw": 8, "num_classes": 4,
        "widths": [4, 5], "pools_after": [1, 2], "flow_includes_input": False,
    }
    return VggNet(spec, np.random.default_rng(seed))


def drift_stats(net, seed=2):
    """Give running stats non-default values so round trips are meaningful."""
    x = np.random.default_rng(seed).standard_normal((4, 3, 8, 8))
    net.forward_with_taps(Tensor(x), train=True)


def test_full_round_trip_is_bitwise(tmp_path):
    net = small_net()
    drift_stats(net)
    projections = make_projections(net.tap_shapes(), np.random.default_rng(3))
    velocities = {n: np.random.default_rng(4).standard_normal(p.shape) for n, p in net.params.items()}
    rng_state = {"shuffle": np.random.default_rng(5).bit_generator.state}
    path = str(tmp_path / "full.ckpt")
    C.save_checkpoint(
        path, net, projections=projections, velocities=velocities,
        epoch=7, config={"note": 1}, rng_state=rng_state,
    )
    ck = C.load_checkpoint(path)
    assert ck.epoch == 7 and ck.config == {"note": 1}
    assert ck.rng_state["shuffle"] == rng_state["shuffle"]

    rebuilt = ck.build_network()
    for n, p in net.params.items():
        assert np.array_equal(rebuilt.params[n].data, p.data)
    for n, st in net.bn_stats.items():
        assert np.array_equal(rebuilt.bn_stats[n].mean, st.mean)
        assert np.array_equal(rebuilt.bn_stats[n].var, st.var)

    re_proj = ck.build_projections()
    assert [p.name for p in re_proj] == [p.name for p in projections]
    for a, b in zip(re_proj, projections):
        assert np.array_equal(a.w.data, b.w.data)
        assert a.stride == b.stride and a.in_shape == b.in_shape

    re_vel = ck.velocities()
    assert set(re_vel) == set(velocities)
    assert all(np.array_equal(re_vel[n], velocities[n]) for n in velocities)


def test_rebuilt_network_forward_is_bitwise_identical(tmp_path):
    net = small_net()
    drift_stats(net)
    path = str(tmp_path / "m.ckpt")
    C.save_checkpoint(path, net, deploy=True)
    rebuilt = C.load_checkpoint(path).build_network()
    x = np.random.default_rng(6).standard_normal((2, 3, 8, 8))
    a, _ = net.forward_with_taps(Tensor(x), train=False)
    b, _ = rebuilt.forward_with_taps(Tensor(x), train=False)
    assert np.array_equal(a.data, b.data)


def test_deploy_strips_training_state(tmp_path):
    net = small_net()
    projections = make_projections(net.tap_shapes(), np.random.default_rng(3))
    velocities = {"conv1.w": np.ones((4, 3, 3, 3))}
    path = str(tmp_path / "deploy.ckpt")
    C.save_checkpoint(
        path, net, projections=projections, velocities=velocities,
        epoch=3, rng_state={"x": 1}, deploy=True,
    )
    ck = C.load_checkpoint(path)
    assert ck.build_projections() == []
    assert ck.velocities() == {}
    assert ck.rng_state is None
    roles = {r for (_, r) in ck.arrays}
    assert roles == {"param", "running_mean", "running_var"}


def test_resnet_round_trip_keeps_block_structure(tmp_path):
    net = build_named("resnet56_cifar", np.random.default_rng(0))
    path = str(tmp_path / "res.ckpt")
    C.save_checkpoint(path, net, deploy=True)
    rebuilt = C.load_checkpoint(path).build_network()
    assert rebuilt.spec["blocks"] == net.spec["blocks"]
    assert set(rebuilt.params) == set(net.params)


def test_missing_file_raises(tmp_path):
    with pytest.raises(ConfigError):
        C.load_checkpoint(str(tmp_path / "absent.ckpt"))


def test_bad_magic_raises(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 64)
    with pytest.raises(ConfigError):
        C.load_checkpoint(str(path))


def test_unsupported_version_raises(tmp_path):
    net = small_net()
    path = str(tmp_path / "v.ckpt")
    C.save_checkpoint(path, net, deploy=True)
    raw = bytearray(open(path, "rb").read())
    # bump the version field inside the JSON header
    idx = raw.find(b'"version": 1')
    raw[idx : idx + 12] = b'"version": 9'
    open(path, "wb").write(raw)
    with pytest.raises(ConfigError):
        C.load_checkpoint(path)


def test_spec_hash_is_order_insensitive():
    a = {"kind": "vgg", "widths": [1, 2]}
    b = {"widths": [1, 2], "kind": "vgg"}
    assert C.spec_hash(a) == C.spec_hash(b)
    assert C.spec_hash(a) != C.spec_hash({"kind": "vgg", "widths": [2, 1]})
