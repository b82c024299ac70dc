"""A small VGG-style regression network written directly in numpy.

Public layer functions take NCHW tensors; the network itself runs
channels-last internally. Each conv is "same"-padded, stride 1, and followed by
ReLU; pooled blocks end in a 2x2/stride-2 max pool. The flattened feature map
feeds ReLU dense layers and a final sigmoid layer of width 2N-1.

Parameters are kept as a flat list in declaration order:
``conv weights (O, C, k, k), conv bias (O,)`` for every conv, then
``dense weights (out, in), dense bias (out,)`` for every dense layer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from .errors import FormatError, OddDimension, ShapeMismatch

KERNEL = 3
PAPER_FC_SIDE = 4


# ----------------------------------------------------------------------------
# layers


def _conv_nhwc(x: NDArray, w: NDArray, b: NDArray) -> tuple[NDArray, tuple]:
    # x (n, h, w, c); w (o, c, k, k)
    n, h, wd, c = x.shape
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(n * h * wd, c * k * k)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1), (x.shape, cols, w)


def _conv_nhwc_backward(dout: NDArray, cache: tuple, need_dx: bool = True):
    xshape, cols, w = cache
    n, h, wd, c = xshape
    o, _, k, _ = w.shape
    p = k // 2
    dmat = dout.reshape(-1, o)
    dw = (dmat.T @ cols).reshape(w.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dmat @ w.reshape(o, -1)).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., i, j]
    dx = dxp[:, p:p + h, p:p + wd, :] if p else dxp
    return dx, dw, db


def _pool_nhwc(x: NDArray) -> tuple[NDArray, tuple]:
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise OddDimension(f"max pooling needs even spatial size, got {h}x{w}")
    q0, q1, q2, q3 = (x[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1))
    out = np.maximum(np.maximum(q0, q1), np.maximum(q2, q3))
    # ties go to the first maximum in raster order
    arg = np.where(q0 == out, 0, np.where(q1 == out, 1, np.where(q2 == out, 2, 3)))
    arg = arg.astype(np.int8)
    return out, (x.shape, arg)


def _pool_nhwc_backward(dout: NDArray, cache: tuple) -> NDArray:
    shape, arg = cache
    dx = np.zeros(shape, dtype=dout.dtype)
    for q, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, i::2, j::2, :] = dout * (arg == q)
    return dx


def _check_conv(x: NDArray, w: NDArray, b: NDArray) -> None:
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv input {x.shape} incompatible with filters {w.shape}")
    if w.shape[2] % 2 == 0 or w.shape[3] != w.shape[2]:
        raise ShapeMismatch(f"filters must be square with odd size, got {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} does not match {w.shape[0]} filters")


def _to_nhwc(x: NDArray) -> NDArray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: NDArray) -> NDArray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def conv2d_forward(x: NDArray, w: NDArray, b: NDArray) -> tuple[NDArray, tuple]:
    """Same-padded stride-1 cross-correlation on NCHW input. Returns (output, cache)."""
    _check_conv(x, w, b)
    out, cache = _conv_nhwc(_to_nhwc(x), w, b)
    return _to_nchw(out), cache


def conv2d_backward(dout: NDArray, cache: tuple) -> tuple[NDArray, NDArray, NDArray]:
    """Gradients (dx, dw, db) of a conv given the NCHW upstream gradient."""
    dx, dw, db = _conv_nhwc_backward(_to_nhwc(dout), cache)
    return _to_nchw(dx), dw, db


def maxpool2_forward(x: NDArray) -> tuple[NDArray, tuple]:
    """2x2 stride-2 max pool on NCHW input."""
    out, cache = _pool_nhwc(_to_nhwc(x))
    return _to_nchw(out), cache


def maxpool2_backward(dout: NDArray, cache: tuple) -> NDArray:
    """Route each gradient to the (first) argmax of its window."""
    return _to_nchw(_pool_nhwc_backward(_to_nhwc(dout), cache))


def maxpool2(x: NDArray) -> NDArray:
    return maxpool2_forward(x)[0]


def relu(x: NDArray) -> NDArray:
    return np.maximum(x, 0)


def sigmoid(x: NDArray) -> NDArray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def mse_loss(output: NDArray, label: NDArray) -> tuple[float, NDArray]:
    """Batch mean of per-sample summed squared error, and its gradient."""
    if output.shape != label.shape or output.ndim != 2:
        raise ShapeMismatch(f"output {output.shape} vs label {label.shape}")
    diff = output.astype(np.float64) - label.astype(np.float64)
    m = output.shape[0]
    return float(np.sum(diff * diff) / m), 2.0 * diff / m


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ConvBlock:
    conv_count: int
    out_channels: int
    pool: bool = True


@dataclass(frozen=True)
class NetworkConfig:
    input_resolution: int
    blocks: tuple[ConvBlock, ...]
    fc_layers: tuple[int, ...]
    output_dim: int
    input_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "fc_layers", tuple(self.fc_layers))
        if self.output_dim < 1 or self.output_dim % 2 == 0:
            raise ValueError(f"output_dim must be 2N-1, got {self.output_dim}")
        if any(b.conv_count < 1 or b.out_channels < 1 for b in self.blocks):
            raise ValueError("every block needs at least one conv and one channel")
        self.spatial_sizes()  # validates pooling chain

    @property
    def n_modes(self) -> int:
        return (self.output_dim + 1) // 2

    def spatial_sizes(self) -> list[int]:
        """Feature-map side after each block."""
        side = self.input_resolution
        sizes = []
        for b in self.blocks:
            if b.pool:
                if side % 2:
                    raise OddDimension(f"cannot pool a {side}x{side} feature map")
                side //= 2
            sizes.append(side)
        if side < 1:
            raise ValueError("feature map vanished")
        return sizes

    @property
    def flat_features(self) -> int:
        side = self.spatial_sizes()[-1] if self.blocks else self.input_resolution
        chans = self.blocks[-1].out_channels if self.blocks else self.input_channels
        return side * side * chans

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        c = self.input_channels
        for b in self.blocks:
            for _ in range(b.conv_count):
                shapes += [(b.out_channels, c, KERNEL, KERNEL), (b.out_channels,)]
                c = b.out_channels
        width = self.flat_features
        for out in (*self.fc_layers, self.output_dim):
            shapes += [(out, width), (out,)]
            width = out
        return shapes

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())

    @classmethod
    def paper(cls, n_modes: int, input_resolution: int = 128) -> "NetworkConfig":
        """Five pooled VGG blocks (2,2,3,3,3 convs; 64..512 channels), FC 1024.

        The first dense layer contracts a 4x4x512 map, which pins the input to 128.
        """
        if input_resolution != 32 * PAPER_FC_SIDE:
            raise ValueError(f"paper preset needs a {32 * PAPER_FC_SIDE}x{32 * PAPER_FC_SIDE} "
                             f"input, got {input_resolution}")
        blocks = tuple(ConvBlock(n, ch) for n, ch in
                       zip((2, 2, 3, 3, 3), (64, 128, 256, 512, 512)))
        return cls(input_resolution, blocks, (1024,), 2 * n_modes - 1)

    @classmethod
    def compact(cls, n_modes: int, input_resolution: int = 64) -> "NetworkConfig":
        """Desk-scale preset: three single-conv blocks (16, 32, 64), FC 128."""
        blocks = (ConvBlock(1, 16), ConvBlock(1, 32), ConvBlock(1, 64))
        return cls(input_resolution, blocks, (128,), 2 * n_modes - 1)

    @classmethod
    def preset(cls, name: str, n_modes: int, input_resolution: int | None = None):
        factory = {"paper": cls.paper, "compact": cls.compact}.get(name)
        if factory is None:
            raise ValueError(f"unknown preset {name!r}")
        return factory(n_modes) if input_resolution is None else factory(n_modes, input_resolution)


# ----------------------------------------------------------------------------
# network


@dataclass
class ConvNet:
    config: NetworkConfig
    params: list[NDArray] = field(repr=False)

    def __post_init__(self):
        shapes = self.config.param_shapes()
        if len(shapes) != len(self.params) or any(
                p.shape != s for p, s in zip(self.params, shapes)):
            raise ShapeMismatch("parameter shapes do not match the network config")

    @classmethod
    def initialize(cls, config: NetworkConfig, rng: np.random.Generator,
                   dtype=np.float32) -> "ConvNet":
        """He (fan-in) normal weights, zero biases."""
        params = []
        for shape in config.param_shapes():
            if len(shape) == 1:
                params.append(np.zeros(shape, dtype=dtype))
            else:
                fan_in = int(np.prod(shape[1:]))
                params.append((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))
        return cls(config, params)

    @classmethod
    def zeros(cls, config: NetworkConfig, dtype=np.float32) -> "ConvNet":
        return cls(config, [np.zeros(s, dtype=dtype) for s in config.param_shapes()])

    @property
    def dtype(self):
        return self.params[0].dtype

    def astype(self, dtype) -> "ConvNet":
        return ConvNet(self.config, [p.astype(dtype) for p in self.params])

    def copy(self) -> "ConvNet":
        return self.astype(self.dtype)

    def _prepare(self, images: NDArray) -> NDArray:
        """Accept (M, R, R) or (M, C, R, R); return contiguous NHWC."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        r = self.config.input_resolution
        if x.ndim != 4 or x.shape[1:] != (self.config.input_channels, r, r):
            raise ShapeMismatch(
                f"expected images of shape (M, {r}, {r}), got {np.shape(images)}")
        return _to_nhwc(x)

    def _forward(self, x: NDArray, keep: bool):
        caches = []
        it = iter(self.params)
        for block in self.config.blocks:
            for _ in range(block.conv_count):
                w, b = next(it), next(it)
                x, cache = _conv_nhwc(x, w, b)
                x = relu(x)
                caches.append(("conv", cache, x if keep else None))
            if block.pool:
                x, cache = _pool_nhwc(x)
                caches.append(("pool", cache, None))
        shape4 = x.shape
        x = x.reshape(x.shape[0], -1)  # flattened in (h, w, c) order
        caches.append(("flatten", shape4, None))
        dense = [(next(it), next(it)) for _ in range(len(self.config.fc_layers) + 1)]
        for k, (w, b) in enumerate(dense):
            x_in = x
            x = x_in @ w.T + b
            last = k == len(dense) - 1
            x = sigmoid(x) if last else relu(x)
            caches.append(("dense", (x_in, w), x))
        return x, (caches if keep else None)

    def forward(self, images: NDArray) -> NDArray:
        """Network output (M, 2N-1), every entry in (0, 1)."""
        return self._forward(self._prepare(images), keep=False)[0]

    def __call__(self, images: NDArray) -> NDArray:
        return self.forward(images)

    def loss_and_grads(self, images: NDArray, labels: NDArray) -> tuple[float, list[NDArray]]:
        """MSE loss on a batch and its gradient with respect to every parameter."""
        x = self._prepare(images)
        out, caches = self._forward(x, keep=True)
        loss, dout = mse_loss(out, np.asarray(labels))
        grads: list[NDArray] = []
        g = dout.astype(self.dtype)
        for idx in range(len(caches) - 1, -1, -1):
            kind, cache, act = caches[idx]
            if kind == "dense":
                x_in, w = cache
                g = g * act * (1 - act) if act is out else g * (act > 0)
                grads += [g.sum(axis=0), g.T @ x_in]
                g = g @ w
            elif kind == "flatten":
                g = g.reshape(cache)
            elif kind == "pool":
                g = _pool_nhwc_backward(g, cache)
            else:
                g = g * (act > 0)
                g, dw, db = _conv_nhwc_backward(g, cache, need_dx=idx > 0)
                grads += [db, dw]
        grads.reverse()
        return loss, grads

    def loss(self, images: NDArray, labels: NDArray) -> float:
        return mse_loss(self.forward(images), np.asarray(labels))[0]

    def sgd_step(self, grads: list[NDArray], lr: float) -> None:
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient")
            p -= np.asarray(lr * g, dtype=p.dtype)


def forward(config: NetworkConfig, params: list[NDArray], images: NDArray) -> NDArray:
    return ConvNet(config, params).forward(images)


def backward(config: NetworkConfig, params: list[NDArray], images: NDArray,
             labels: NDArray) -> list[NDArray]:
    return ConvNet(config, params).loss_and_grads(images, labels)[1]


# ----------------------------------------------------------------------------
# checkpoint I/O

CHECKPOINT_MAGIC = b"FMDC"
CHECKPOINT_VERSION = 1


def _config_words(config: NetworkConfig) -> list[int]:
    words = [config.input_resolution, config.input_channels, len(config.blocks)]
    for b in config.blocks:
        words += [b.conv_count, b.out_channels, int(b.pool)]
    words += [len(config.fc_layers), *config.fc_layers, config.output_dim]
    return words


def write_checkpoint(net: ConvNet, dest: str | Path | BinaryIO) -> None:
    """``FMDC``, u16 version, u32 config words, then float32 params (all little-endian).

    Config words: resolution, input channels, block count, (convs, channels, pool)
    per block, dense hidden-layer count, hidden widths, output dim.
    """
    words = _config_words(net.config)
    payload = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
               struct.pack(f"<{len(words)}I", *words)]
    payload += [np.ascontiguousarray(p, dtype="<f4").tobytes() for p in net.params]
    data = b"".join(payload)
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(data)
    else:
        dest.write(data)


def read_checkpoint(src: str | Path | bytes) -> ConvNet:
    data = src if isinstance(src, bytes) else Path(src).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version = struct.unpack("<H", take(2))[0]
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    resolution, channels, n_blocks = u32(), u32(), u32()
    blocks = tuple(ConvBlock(u32(), u32(), bool(u32())) for _ in range(n_blocks))
    n_fc = u32()
    fc = tuple(u32() for _ in range(n_fc))
    try:
        config = NetworkConfig(resolution, blocks, fc, u32(), channels)
    except ValueError as exc:
        raise FormatError(f"invalid network config in checkpoint: {exc}") from None
    params = []
    for shape in config.param_shapes():
        count = int(np.prod(shape))
        raw = take(4 * count)
        params.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after parameters")
    return ConvNet(config, params)
