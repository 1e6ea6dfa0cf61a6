"""Versioned binary checkpoints: magic bytes, JSON header describing the
model spec and payload layout, then raw little-endian float64 arrays."""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from flowprune import nets
from flowprune.flow import Projection
from flowprune.tensor import ConfigError, Tensor

MAGIC = b"FFRCKPT1"


def spec_hash(spec):
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()


def _entry(name, role, arr, offset):
    return (
        {"name": name, "role": role, "shape": list(arr.shape), "offset": offset},
        arr.astype("<f8", copy=False).tobytes(),
    )


def save_checkpoint(
    path,
    net,
    projections=None,
    velocities=None,
    epoch=0,
    config=None,
    rng_state=None,
    deploy=False,
):
    """Write net (and optionally training state) to ``path``.

    deploy=True keeps only model parameters and BN running statistics:
    projections and optimizer state exist only for training resumption.
    """
    entries = []
    blobs = []
    offset = 0

    def push(name, role, arr):
        nonlocal offset
        e, b = _entry(name, role, np.asarray(arr), offset)
        entries.append(e)
        blobs.append(b)
        offset += len(b)

    for name, p in net.params.items():
        push(name, "param", p.data)
    for name, st in net.bn_stats.items():
        push(name, "running_mean", st.mean)
        push(name, "running_var", st.var)
    proj_meta = []
    if not deploy:
        for proj in projections or []:
            push(proj.name, "projection", proj.w.data)
            proj_meta.append(
                {
                    "name": proj.name,
                    "stride": proj.stride,
                    "in_shape": list(proj.in_shape),
                    "out_shape": list(proj.out_shape),
                }
            )
        for name, v in (velocities or {}).items():
            push(name, "velocity", v)

    header = {
        "version": 1,
        "spec": net.spec,
        "spec_hash": spec_hash(net.spec),
        "epoch": epoch,
        "config": config,
        "rng_state": None if deploy else rng_state,
        "projections": proj_meta,
        "entries": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


class Checkpoint:
    """Parsed checkpoint: header fields plus arrays grouped by role."""

    def __init__(self, header, arrays):
        self.spec = header["spec"]
        self.spec_hash = header["spec_hash"]
        self.epoch = header["epoch"]
        self.config = header["config"]
        self.rng_state = header["rng_state"]
        self.proj_meta = header["projections"]
        self.arrays = arrays  # (name, role) -> ndarray

    def _by_role(self, role):
        return {n: a for (n, r), a in self.arrays.items() if r == role}

    def build_network(self):
        net = nets.build_network(self.spec)
        params = self._by_role("param")
        if set(params) != set(net.params):
            missing = set(net.params) ^ set(params)
            raise ConfigError(f"checkpoint/spec parameter mismatch: {sorted(missing)}")
        for name, arr in params.items():
            if net.params[name].data.shape != arr.shape:
                raise ConfigError(f"checkpoint shape mismatch for {name}")
            net.params[name].data = arr.copy()
            net.params[name].zero_grad()
        means = self._by_role("running_mean")
        variances = self._by_role("running_var")
        for name, st in net.bn_stats.items():
            st.mean = means[name].copy()
            st.var = variances[name].copy()
        return net

    def build_projections(self):
        weights = self._by_role("projection")
        projs = []
        for meta in self.proj_meta:
            w = Tensor(weights[meta["name"]].copy(), requires_grad=True, name=meta["name"])
            projs.append(
                Projection(
                    w,
                    meta["stride"],
                    tuple(meta["in_shape"]),
                    tuple(meta["out_shape"]),
                    meta["name"],
                )
            )
        return projs

    def velocities(self):
        return {n: a.copy() for n, a in self._by_role("velocity").items()}


def load_checkpoint(path):
    if not os.path.isfile(path):
        raise ConfigError(f"missing checkpoint file: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path}: bad magic bytes (not a checkpoint)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode())
    if header.get("version") != 1:
        raise ConfigError(f"{path}: unsupported checkpoint version")
    payload = raw[16 + hlen :]
    arrays = {}
    for e in header["entries"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        arr = np.frombuffer(payload[start : start + 8 * n], dtype="<f8")
        arrays[(e["name"], e["role"])] = arr.reshape(e["shape"]).copy()
    return Checkpoint(header, arrays)
