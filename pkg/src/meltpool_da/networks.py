"""The three networks (encoder, task classifiers, domain classifier),
their Adam optimizers, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ContractError
from .layers import BatchNorm, Conv2d, Flatten, Layer, Linear, MaxPool2d, ReLU, Sigmoid
from .tensor import Tensor

ENCODED_DIM = 20


class Network:
    """An ordered stack of layers with a single forward/backward chain."""

    def __init__(self, name: str, layers: list[Layer]):
        self.name = name
        self.layers = layers

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def state_tensors(self) -> list[Tensor]:
        """Trainable parameters plus batchnorm running statistics."""
        out = []
        for layer in self.layers:
            out.extend(layer.params())
            if isinstance(layer, BatchNorm):
                out.extend(layer.state())
        return out

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dout: np.ndarray, input_grad: bool = True) -> np.ndarray:
        from .layers import Conv2d
        for i, layer in enumerate(reversed(self.layers)):
            last = i == len(self.layers) - 1
            if last and not input_grad and isinstance(layer, Conv2d):
                return layer.backward(dout, need_dx=False)
            dout = layer.backward(dout)
        return dout

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            layer.astype(dtype)
        return self


class Adam:
    """Adam with bias correction; clears gradients after each step."""

    def __init__(self, net: Network, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.net = net
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in net.params()]
        self.v = [np.zeros_like(p.data) for p in net.params()]

    def step(self) -> None:
        params = self.net.params()
        for p in params:
            if p.grad is None:
                raise ContractError(f"adam step with no gradient on {p.name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(params):
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** t)
            v_hat = self.v[i] / (1 - b2 ** t)
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            p.zero_grad()


def build_encoder(seed: int = 0, dtype=np.float32) -> Network:
    """80x80 grayscale image -> 20-d encoding.

    Three conv modules (16, 32, 32 channels; conv3x3 pad1 -> BN -> ReLU ->
    maxpool2x2), flatten to 3200, linear to 20, BN, ReLU.
    """
    rng = np.random.default_rng([seed, 0])
    return Network("encoder", [
        Conv2d(1, 16, rng=rng, name="conv1", dtype=dtype),
        BatchNorm(16, name="bn1", dtype=dtype), ReLU(), MaxPool2d(),
        Conv2d(16, 32, rng=rng, name="conv2", dtype=dtype),
        BatchNorm(32, name="bn2", dtype=dtype), ReLU(), MaxPool2d(),
        Conv2d(32, 32, rng=rng, name="conv3", dtype=dtype),
        BatchNorm(32, name="bn3", dtype=dtype), ReLU(), MaxPool2d(),
        Flatten(),
        Linear(32 * 10 * 10, ENCODED_DIM, rng=rng, name="fc", dtype=dtype),
        BatchNorm(ENCODED_DIM, name="bn_fc", dtype=dtype), ReLU(),
    ])


def build_task_classifier(seed: int = 0, which: int = 1, dtype=np.float32) -> Network:
    """20-d encoding -> sigmoid anomaly probability."""
    rng = np.random.default_rng([seed, which])
    return Network(f"task{which}", [
        Linear(ENCODED_DIM, 32, rng=rng, name="fc1", dtype=dtype), ReLU(),
        Linear(32, 1, rng=rng, name="fc2", dtype=dtype), Sigmoid(),
    ])


def build_domain_classifier(seed: int = 0, head: str = "deep", dtype=np.float32) -> Network:
    """20-d encoding -> sigmoid domain probability (source 0, target 1).

    head="deep": 20->64->64->64->1 (three hidden ReLU layers);
    head="shallow": 20->64->1.
    """
    rng = np.random.default_rng([seed, 3])
    if head == "deep":
        layers = [
            Linear(ENCODED_DIM, 64, rng=rng, name="fc1", dtype=dtype), ReLU(),
            Linear(64, 64, rng=rng, name="fc2", dtype=dtype), ReLU(),
            Linear(64, 64, rng=rng, name="fc3", dtype=dtype), ReLU(),
            Linear(64, 1, rng=rng, name="fc4", dtype=dtype), Sigmoid(),
        ]
    elif head == "shallow":
        layers = [
            Linear(ENCODED_DIM, 64, rng=rng, name="fc1", dtype=dtype), ReLU(),
            Linear(64, 1, rng=rng, name="fc2", dtype=dtype), Sigmoid(),
        ]
    else:
        raise ContractError(f"unknown domain head {head!r} (expected deep|shallow)")
    return Network("domain", layers)


@dataclass
class ModelBundle:
    """The full model: shared encoder, two task heads, one domain head,
    each with its own Adam optimizer."""

    encoder: Network
    task1: Network
    task2: Network
    domain: Network
    opt_encoder: Adam
    opt_task1: Adam
    opt_task2: Adam
    opt_domain: Adam
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, seed: int = 0, lr_encoder: float = 1e-3, lr_task: float = 3e-6,
              lr_domain: float = 1e-5, domain_head: str = "deep") -> "ModelBundle":
        enc = build_encoder(seed)
        t1 = build_task_classifier(seed, which=1)
        t2 = build_task_classifier(seed + 1, which=2)
        dom = build_domain_classifier(seed, head=domain_head)
        return cls(enc, t1, t2, dom,
                   Adam(enc, lr_encoder), Adam(t1, lr_task),
                   Adam(t2, lr_task), Adam(dom, lr_domain),
                   meta={"seed": seed, "phase": "init", "epoch": 0,
                         "domain_head": domain_head})

    def networks(self) -> list[Network]:
        return [self.encoder, self.task1, self.task2, self.domain]

    def optimizers(self) -> list[Adam]:
        return [self.opt_encoder, self.opt_task1, self.opt_task2, self.opt_domain]

    def param_count(self) -> int:
        return sum(p.data.size for net in self.networks() for p in net.params())


# --- checkpoint format -------------------------------------------------
#
# magic "MPCK" | u32 version | u32 json-len | metadata json
# | u32 entry-count | entries (u16 name-len, name, u8 ndim, u32 dims..., u64 offset)
# | u64 payload-len | raw little-endian float32 payload
#
# Entries cover parameters, batchnorm running stats, and Adam moments.

CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1


def _checkpoint_tensors(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    out = []
    for net in bundle.networks():
        for t in net.state_tensors():
            out.append((f"{net.name}/{t.name}", t.data))
    for opt in bundle.optimizers():
        for i, p in enumerate(opt.net.params()):
            out.append((f"adam/{opt.net.name}/{p.name}.m", opt.m[i]))
            out.append((f"adam/{opt.net.name}/{p.name}.v", opt.v[i]))
    return out


def save_checkpoint(bundle: ModelBundle, path) -> None:
    tensors = _checkpoint_tensors(bundle)
    meta = dict(bundle.meta)
    meta["steps"] = {opt.net.name: opt.step_count for opt in bundle.optimizers()}
    meta["lrs"] = {opt.net.name: opt.lr for opt in bundle.optimizers()}
    meta_json = json.dumps(meta, sort_keys=True).encode()

    manifest = bytearray()
    payload = bytearray()
    manifest += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        manifest += struct.pack("<H", len(nb)) + nb
        manifest += struct.pack("<B", arr32.ndim)
        manifest += struct.pack(f"<{arr32.ndim}I", *arr32.shape)
        manifest += struct.pack("<Q", len(payload))
        payload += arr32.tobytes()

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_json)))
        f.write(meta_json)
        f.write(bytes(manifest))
        f.write(struct.pack("<Q", len(payload)))
        f.write(bytes(payload))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read metadata and the raw named-tensor map from a checkpoint file."""
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint {path}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(take(mlen).decode())
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (offset,) = struct.unpack("<Q", take(8))
        entries.append((name, shape, offset))
    (plen,) = struct.unpack("<Q", take(8))
    payload = take(plen)

    spans = []
    tensors = {}
    for name, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        nbytes = max(nbytes, 4) if shape == () else nbytes
        if offset + nbytes > plen:
            raise CheckpointError(f"manifest entry {name!r} exceeds payload ({offset}+{nbytes} > {plen})")
        spans.append((offset, offset + nbytes, name))
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                                      offset=offset).reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"manifest entries {n0!r} and {n1!r} overlap")
    return meta, tensors


def load_checkpoint(path) -> ModelBundle:
    meta, tensors = read_checkpoint(path)
    lrs = meta.get("lrs", {})
    bundle = ModelBundle.build(
        seed=meta.get("seed", 0),
        lr_encoder=lrs.get("encoder", 1e-3), lr_task=lrs.get("task1", 3e-6),
        lr_domain=lrs.get("domain", 1e-5),
        domain_head=meta.get("domain_head", "deep"))
    for net in bundle.networks():
        for t in net.state_tensors():
            key = f"{net.name}/{t.name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {key!r}")
            if tensors[key].shape != t.data.shape:
                raise CheckpointError(
                    f"checkpoint tensor {key!r} has shape {tensors[key].shape}, expected {t.data.shape}")
            t.data = tensors[key]
    for opt in bundle.optimizers():
        opt.step_count = int(meta.get("steps", {}).get(opt.net.name, 0))
        for i, p in enumerate(opt.net.params()):
            opt.m[i] = tensors[f"adam/{opt.net.name}/{p.name}.m"]
            opt.v[i] = tensors[f"adam/{opt.net.name}/{p.name}.v"]
    bundle.meta = {k: v for k, v in meta.items() if k not in ("steps", "lrs")}
    return bundle


def checkpoint_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
