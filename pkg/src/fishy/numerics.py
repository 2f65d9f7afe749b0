"""Dense-tensor substrate: a tanh MLP with exact reverse-mode gradients,
Adam, bilinear resize matrices and the FBT1/FBF1 binary formats.

Tensors are plain ``numpy.ndarray`` objects. Training math is float64;
float32 is only used for bulk storage of images and score maps.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ContractViolation, FormatError, TrainingDivergence

TENSOR_MAGIC = b"FBT1"
CONTAINER_MAGIC = b"FBF1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_DTYPE = {np.dtype("float32"): 0, np.dtype("float64"): 1}


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass
class Mlp:
    """Feed-forward net: tanh on hidden layers, identity on the output.

    ``layers`` holds ``(W, b)`` pairs with ``W`` of shape ``(in, out)``.
    """

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise ContractViolation("Mlp needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractViolation(f"layer {i}: bad weight/bias shapes {w.shape}, {b.shape}")
            if i and self.layers[i - 1][0].shape[1] != w.shape[0]:
                raise ContractViolation(f"layer {i}: input width {w.shape[0]} does not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]


def mlp_init(sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False) -> Mlp:
    """Glorot-uniform init. ``zero_last`` zeroes the output layer (identity-start flows)."""
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((n_in, n_out))
        else:
            lim = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_in, n_out))
        layers.append((w, np.zeros(n_out)))
    return Mlp(layers)


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ContractViolation(f"Mlp expects (batch, {net.in_dim}) input, got {x.shape}")
    return x


def mlp_forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass returning the output and the per-layer inputs for backprop."""
    h = _check_input(net, x)
    inputs = []
    n = len(net.layers)
    for i, (w, b) in enumerate(net.layers):
        inputs.append(h)
        h = h @ w + b
        if i < n - 1:
            h = np.tanh(h)
    return h, inputs


def mlp_apply(net: Mlp, x: np.ndarray) -> np.ndarray:
    return mlp_forward(net, x)[0]


def mlp_backward(net: Mlp, inputs: list[np.ndarray], upstream: np.ndarray):
    """Backprop from cached layer inputs. Returns ``(grad_x, [(dW, db), ...])``."""
    g = upstream
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[i]
        h_in = inputs[i]
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ w.T
        if i > 0:
            # h_in = tanh(pre) for every layer after the first
            g = g * (1.0 - h_in * h_in)
    return g, grads


def mlp_grad(net: Mlp, x: np.ndarray, upstream: np.ndarray):
    """Exact gradients of ``sum(upstream * mlp_apply(net, x))``.

    Returns ``(grad_x, grad_params)`` where ``grad_params`` mirrors
    ``net.layers`` as ``(dW, db)`` pairs.
    """
    out, inputs = mlp_forward(net, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ContractViolation(f"upstream shape {upstream.shape} != output shape {out.shape}")
    return mlp_backward(net, inputs, upstream)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam step. Returns new ``(params, state)``; inputs are not modified."""
    if lr <= 0:
        raise ContractViolation("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ContractViolation("params, grads and optimizer state disagree in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence("non-finite gradient", last_good_iteration=state.step_count)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.epsilon)


# ---------------------------------------------------------------------------
# Resizing and small helpers
# ---------------------------------------------------------------------------


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` linear interpolation matrix, half-pixel centres, edge clamp."""
    if n_in < 1 or n_out < 1:
        raise ContractViolation("resize dimensions must be positive")
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinearly resize the two leading axes of ``arr`` to ``shape``."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (h, w) == tuple(shape):
        return arr.copy()
    rh = resize_matrix(h, shape[0])
    rw = resize_matrix(w, shape[1])
    out = np.tensordot(rh, arr, axes=(1, 0))
    out = np.tensordot(rw, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def resize_bilinear_grad(grad_out: np.ndarray, in_shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`resize_bilinear`."""
    h, w = grad_out.shape[:2]
    if (h, w) == tuple(in_shape):
        return grad_out.copy()
    rh = resize_matrix(in_shape[0], h)
    rw = resize_matrix(in_shape[1], w)
    g = np.tensordot(rh.T, grad_out, axes=(1, 0))
    g = np.tensordot(rw.T, g, axes=(1, 1))
    return np.swapaxes(g, 0, 1)


def sigmoid(x):
    # clipping keeps the output strictly inside (0, 1) in float64
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def derive_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Named, reproducible sub-stream of a master seed."""
    words = [int(seed)]
    for name in names:
        if isinstance(name, str):
            words.extend(name.encode("utf-8"))
            words.append(0x100)  # separator outside the byte range
        else:
            words.append(int(name))
    return np.random.default_rng(np.random.SeedSequence(words))


# ---------------------------------------------------------------------------
# FBT1 tensors and FBF1 containers
# ---------------------------------------------------------------------------


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_FOR_DTYPE:
        arr = arr.astype(np.float64)
    tag = _TAG_FOR_DTYPE[arr.dtype]
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BI", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated tensor stream")
    return data


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    tag, rank = struct.unpack("<BI", _read_exact(fh, 5))
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, count * dtype.itemsize), dtype=dtype)
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensor(path, arr: np.ndarray) -> None:
    atomic_write(path, tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def container_to_bytes(header: dict, tensors: Sequence[np.ndarray]) -> bytes:
    """FBF1: magic, u32 header length, UTF-8 JSON header, u32 tensor count, FBT1 tensors."""
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(CONTAINER_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for t in tensors:
        write_tensor(buf, t)
    return buf.getvalue()


def container_from_bytes(data: bytes) -> tuple[dict, list[np.ndarray]]:
    fh = io.BytesIO(data)
    if _read_exact(fh, 4) != CONTAINER_MAGIC:
        raise FormatError("bad container magic")
    (n_head,) = struct.unpack("<I", _read_exact(fh, 4))
    header = json.loads(_read_exact(fh, n_head).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
    return header, [read_tensor(fh) for _ in range(n_tensors)]


def save_container(path, header: dict, tensors: Sequence[np.ndarray]) -> None:
    atomic_write(path, container_to_bytes(header, tensors))


def load_container(path) -> tuple[dict, list[np.ndarray]]:
    return container_from_bytes(Path(path).read_bytes())
