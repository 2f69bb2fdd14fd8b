"""Versioned binary checkpoints for networks ("DGPW") and basis pools ("DGPP").

Layout: 4-byte magic, little-endian uint32 version, uint64 header length, a
JSON header describing every array (name, shape) plus non-array state, then
the raw float64 little-endian payloads in header order.  Weights round-trip
bit-exactly; files are written atomically (temp + rename).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .errors import CheckpointError
from .memory import BasisPool, LayerPool
from .network import BatchNormState, LayerSpec, Network, NetworkSpec

NET_MAGIC = b"DGPW"
POOL_MAGIC = b"DGPP"
FORMAT_VERSION = 1


def _atomic_write(path, data: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _serialize(magic: bytes, header: dict, arrays: list) -> bytes:
    named = []
    payload = bytearray()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        named.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = dict(header, arrays=named)
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(hjson)),
         hjson, bytes(payload)]
    )


def _parse(path, magic: bytes, kind: str):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated {kind} checkpoint header")
    if data[:4] != magic:
        raise CheckpointError(
            f"{path}: bad magic {data[:4]!r}, expected {magic!r} for a {kind} checkpoint"
        )
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported {kind} checkpoint version {version} "
            f"(this build reads version {FORMAT_VERSION})"
        )
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated {kind} checkpoint header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt {kind} checkpoint header: {exc}") from exc
    payload = data[16 + hlen :]
    arrays = {}
    cursor = 0
    for entry in header.get("arrays", []):
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = payload[cursor : cursor + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{path}: truncated {kind} checkpoint payload at array "
                f"{entry['name']!r}"
            )
        arrays[entry["name"]] = (
            np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        )
        cursor += nbytes
    return header, arrays


def _layer_to_dict(layer: LayerSpec) -> dict:
    return asdict(layer)


def _layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    d["in_shape"] = tuple(d.get("in_shape", ()))
    return LayerSpec(**d)


def save_network(path, net: Network, metadata: dict | None = None):
    header = {
        "kind": "network",
        "spec": {
            "first": _layer_to_dict(net.spec.first),
            "shared": [_layer_to_dict(l) for l in net.spec.shared],
        },
        "task_order": list(net.task_order),
        "head_classes": {str(t): c for t, c in net.head_classes.items()},
        "bn": [
            None
            if s is None
            else {"eps": s.eps, "momentum": s.momentum, "frozen": bool(s.frozen)}
            for s in net.bn_states
        ],
        "metadata": metadata or {},
    }
    arrays = []
    for i, w in enumerate(net.shared_weights):
        arrays.append((f"shared/{i}", w))
    for i, s in enumerate(net.bn_states):
        if s is not None:
            arrays.append((f"bn/{i}/gamma", s.gamma))
            arrays.append((f"bn/{i}/beta", s.beta))
            arrays.append((f"bn/{i}/mean", s.mean))
            arrays.append((f"bn/{i}/var", s.var))
    for t in net.task_order:
        arrays.append((f"first/{t}", net.first_weights[t]))
        arrays.append((f"head/{t}", net.head_weights[t]))
    _atomic_write(path, _serialize(NET_MAGIC, header, arrays))


def load_network(path):
    """Returns ``(net, metadata)`` reconstructed bit-exactly."""
    header, arrays = _parse(path, NET_MAGIC, "network")
    spec = NetworkSpec(
        first=_layer_from_dict(header["spec"]["first"]),
        shared=tuple(_layer_from_dict(d) for d in header["spec"]["shared"]),
    )
    net = Network(spec, np.random.default_rng(0))
    for i in range(len(net.shared_weights)):
        net.shared_weights[i] = arrays[f"shared/{i}"]
    for i, (state, meta) in enumerate(zip(net.bn_states, header["bn"])):
        if state is None:
            continue
        net.bn_states[i] = BatchNormState(
            gamma=arrays[f"bn/{i}/gamma"],
            beta=arrays[f"bn/{i}/beta"],
            mean=arrays[f"bn/{i}/mean"],
            var=arrays[f"bn/{i}/var"],
            eps=meta["eps"],
            momentum=meta["momentum"],
            frozen=meta["frozen"],
        )
    net.task_order = [int(t) for t in header["task_order"]]
    net.head_classes = {int(t): int(c) for t, c in header["head_classes"].items()}
    net.first_weights = {t: arrays[f"first/{t}"] for t in net.task_order}
    net.head_weights = {t: arrays[f"head/{t}"] for t in net.task_order}
    return net, header.get("metadata", {})


def save_pool(path, pool: BasisPool, metadata: dict | None = None):
    header = {
        "kind": "pool",
        "layers": [
            {
                "layer": l,
                "dim": p.dim,
                "count": p.count,
                "provenance": list(p.provenance),
                "origin": [int(t) for t in p.origin],
            }
            for l, p in sorted(pool.layers.items())
        ],
        "metadata": metadata or {},
    }
    arrays = [(f"basis/{l}", p.vectors) for l, p in sorted(pool.layers.items())]
    _atomic_write(path, _serialize(POOL_MAGIC, header, arrays))


def load_pool(path):
    """Returns ``(pool, metadata)`` reconstructed bit-exactly."""
    header, arrays = _parse(path, POOL_MAGIC, "pool")
    pool = BasisPool({})
    for entry in header["layers"]:
        l = int(entry["layer"])
        vectors = arrays[f"basis/{l}"]
        if vectors.shape != (entry["dim"], entry["count"]):
            raise CheckpointError(
                f"{path}: layer {l} basis shape {vectors.shape} does not match "
                f"header ({entry['dim']}, {entry['count']})"
            )
        pool.layers[l] = LayerPool(
            dim=int(entry["dim"]),
            vectors=vectors,
            provenance=list(entry["provenance"]),
            origin=[int(t) for t in entry["origin"]],
        )
    return pool, header.get("metadata", {})
