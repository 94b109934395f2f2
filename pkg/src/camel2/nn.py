"""Dense ReLU classifier with hand-written backprop, Adam, and checkpoints."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

POSITIVE = 1
CHECKPOINT_MAGIC = b"CAMEL2CK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class MlpParams:
    """Weights ``(fan_out, fan_in)`` and biases ``(fan_out,)`` per layer."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ValueError(f"layer {i}: fan_in {w.shape[1]} does not chain")
        if self.layers[-1][0].shape[0] != 2:
            raise ValueError("output layer must have width 2")

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def dtype(self):
        return self.layers[0][0].dtype

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers])

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([(w.astype(dtype), b.astype(dtype)) for w, b in self.layers])

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def equals(self, other: "MlpParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes()
            for x, y in zip(a, b)
        )


@dataclass
class LrSchedule:
    initial: float = 0.001
    halve_every: int = 5

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.halve_every < 1:
            raise ValueError("halve_every must be >= 1")


def lr_at_epoch(epoch: int, schedule: LrSchedule = LrSchedule()) -> float:
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    return schedule.initial * 0.5 ** ((epoch - 1) // schedule.halve_every)


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``sizes`` runs input -> ... -> 2."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = [
        (glorot_init(fi, fo, rng, dtype), np.zeros(fo, dtype=dtype))
        for fi, fo in zip(sizes[:-1], sizes[1:])
    ]
    return MlpParams(layers)


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return logits ``(n, 2)`` and the layer inputs needed by :func:`backward`."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.sizes[0]:
        raise ValueError(f"expected input of shape (n, {params.sizes[0]}), got {x.shape}")
    h = x.astype(params.dtype, copy=False)
    cache = []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        cache.append(h)
        z = h @ w.T + b
        h = z if i == last else np.maximum(z, 0)
    return h, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def positive_probability(params: MlpParams, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
    out = np.empty(len(x), dtype=np.float64)
    for s in range(0, len(x), chunk):
        logits, _ = forward(params, x[s : s + chunk])
        out[s : s + chunk] = softmax(logits)[:, POSITIVE]
    return out


def softmax_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits.

    Accepts a single logit pair with a scalar label or a batch ``(n, 2)``
    with ``n`` labels. Reductions run in float64.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z.reshape(-1, z.shape[-1])
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (len(z2),):
        raise ValueError("one label per logit row required")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(z2))
    losses = logsum - shifted[rows, y]
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, y] -= 1.0
    grad /= len(z2)
    loss = float(losses.sum() / len(z2))
    return loss, (grad[0] if single else grad)


def backward(params: MlpParams, cache: list[np.ndarray], dlogits: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients for every ``(weight, bias)`` given ``dL/dlogits``."""
    if len(cache) != len(params.layers):
        raise ValueError("cache does not match the network depth")
    g = np.asarray(dlogits).astype(params.dtype, copy=False)
    if g.shape != (len(cache[0]), 2):
        raise ValueError(f"output gradient shape {g.shape} does not match batch")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        a = cache[i]
        grads[i] = (g.T @ a, g.sum(axis=0, dtype=np.float64).astype(params.dtype))
        if i:
            g = (g @ w) * (a > 0)
    return grads


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: MlpParams, **kw) -> "AdamState":
        zeros = [np.zeros(a.shape, dtype=np.float64) for a in params.arrays()]
        return cls([z.copy() for z in zeros], zeros, **kw)


def adam_step(params: MlpParams, grads, state: AdamState, lr: float) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; moments are kept in float64."""
    flat_g = [a for layer in grads for a in layer]
    flat_p = params.arrays()
    if len(flat_g) != len(flat_p) or any(g.shape != p.shape for g, p in zip(flat_g, flat_p)):
        raise ValueError("gradients are not congruent with parameters")
    if not all(np.all(np.isfinite(g)) for g in flat_g):
        raise FloatingPointError("non-finite gradient")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(flat_p, flat_g, state.m, state.v):
        g = g.astype(np.float64)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_p.append((p.astype(np.float64) - step).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    layers = [(new_p[2 * i], new_p[2 * i + 1]) for i in range(len(params.layers))]
    return MlpParams(layers), AdamState(new_m, new_v, t, b1, b2, state.epsilon)


# -- checkpoints -------------------------------------------------------------
#
# layout (little-endian):
#   8s magic | u32 version | u32 epoch | u32 n_layers
#   n_layers x (u32 fan_out, u32 fan_in)
#   float32 payload: W0, b0, W1, b1, ... (row-major)
#   u32 crc32 of everything before it


@dataclass
class Checkpoint:
    epoch: int
    params: MlpParams = field(repr=False)


def checkpoint_bytes(params: MlpParams, epoch: int) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, epoch, len(params.layers))]
    for w, _ in params.layers:
        parts.append(struct.pack("<II", *w.shape))
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: MlpParams, epoch: int, path: Union[str, Path]) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, epoch))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    head = len(CHECKPOINT_MAGIC) + 12
    if len(buf) < head + 4 or buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError("checksum mismatch (corrupt or truncated file)")
    version, epoch, n_layers = struct.unpack("<III", buf[len(CHECKPOINT_MAGIC) : head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = head
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack("<II", buf[off : off + 8]))
        off += 8
    expected = off + 4 * sum(fo * fi + fo for fo, fi in dims) + 4
    if expected != len(buf):
        raise CheckpointError(f"payload size {len(buf)} does not match layer manifest ({expected})")
    layers = []
    for fo, fi in dims:
        w = np.frombuffer(buf, dtype="<f4", count=fo * fi, offset=off).reshape(fo, fi)
        off += 4 * fo * fi
        b = np.frombuffer(buf, dtype="<f4", count=fo, offset=off)
        off += 4 * fo
        layers.append((w.astype(np.float32), b.astype(np.float32)))
    try:
        params = MlpParams(layers)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return Checkpoint(epoch, params)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
