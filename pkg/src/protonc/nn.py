"""Neural layers and embedding backbones.

Three architectures are available through `Backbone`:

* ``convnet4`` -- four blocks of (3x3 conv, 64 ch -> batchnorm -> relu ->
  2x2 maxpool), then flatten. At 28x28 grayscale input the spatial path
  is 28 -> 14 -> 7 -> 3 -> 1, giving a 64-dim embedding.
* ``resnet18`` -- the CIFAR-style residual network (3x3 stem, no initial
  maxpool, basic blocks 2-2-2-2 at widths 64/128/256/512) with the
  classification layer removed; global average pooling yields a 512-dim
  embedding. Single-channel inputs are replicated to 3 channels.
* ``mlp`` -- flatten, then linear layers of configurable widths with
  relu between (not after the last).

All layers run through the autodiff engine in `tensor`, so any embedding
is differentiable end to end. Checkpoints serialize the full per-layer
state (learned tensors plus batchnorm running statistics) in declaration
order.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import (
    ContractError,
    ShapeError,
    Tensor,
    add,
    broadcast_to,
    concatenate,
    from_op,
    matmul,
    mean,
    multiply,
    power,
    reshape,
    subtract,
    transpose,
)

CHECKPOINT_MAGIC = b"PCKP"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Functional layer ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    x: [B, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout].
    Output spatial extent is floor((H + 2*padding - kh) / stride) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {weight.shape}")
    batch, cin, height, width = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}"
        )
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    hp, wp = height + 2 * padding, width + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel ({kh},{kw}) exceeds padded extents ({hp},{wp})"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    hout = (hp - kh) // stride + 1
    wout = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [B, Cin, Hout, Wout, kh, kw]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * hout * wout, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T + bias.data
    out = out.reshape(batch, hout, wout, cout).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(batch * hout * wout, cout)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = gmat.sum(axis=0)
        gcols = gmat @ wmat
        g6 = gcols.reshape(batch, hout, wout, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((batch, cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += g6[
                    :, :, :, :, i, j
                ]
        if padding:
            gx = gxp[:, :, padding : padding + height, padding : padding + width]
        else:
            gx = gxp
        return gx, gw, gb

    return from_op(out, (x, weight, bias), backward_fn, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward_fn(g):
        return (g * mask,)

    return from_op(out, (x,), backward_fn, "relu")


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k window maximum; H and W must be divisible by k.

    The subgradient at ties routes to the first maximal element in
    row-major window order.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-d input, got {x.shape}")
    batch, ch, height, width = x.shape
    if height % k or width % k:
        raise ShapeError(f"maxpool2d: spatial extents {height}x{width} not divisible by {k}")
    hout, wout = height // k, width // k
    win = (
        x.data.reshape(batch, ch, hout, k, wout, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, ch, hout, wout, k * k)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = (
            gwin.reshape(batch, ch, hout, wout, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, ch, height, width)
        )
        return (gx,)

    return from_op(out, (x,), backward_fn, "maxpool2d")


def _crop2d(x: Tensor, h2: int, w2: int) -> Tensor:
    """Drop trailing rows/cols down to (h2, w2); gradient zero-pads back."""
    batch, ch, height, width = x.shape
    data = x.data[:, :, :h2, :w2]

    def backward_fn(g):
        gx = np.zeros((batch, ch, height, width))
        gx[:, :, :h2, :w2] = g
        return (gx,)

    return from_op(data, (x,), backward_fn, "crop2d")


class BatchNormState:
    """Per-channel batchnorm state: learned scale/shift plus running stats."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def init(self, rng: np.random.Generator) -> None:
        self.gamma.data = np.ones(self.channels)
        self.beta.data = np.zeros(self.channels)
        self.running_mean = np.zeros(self.channels)
        self.running_var = np.ones(self.channels)

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def state_arrays(self) -> list[np.ndarray]:
        return [self.gamma.data, self.beta.data, self.running_mean, self.running_var]


def batchnorm2d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel standardization then affine scale/shift.

    Training mode normalizes by batch statistics over (B, H, W) and
    updates the running statistics (unbiased variance); eval mode uses
    the running statistics and mutates nothing.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-d input, got {x.shape}")
    batch, ch, height, width = x.shape
    if ch != state.channels:
        raise ShapeError(f"batchnorm2d channel mismatch: {ch} vs state {state.channels}")
    gamma = reshape(state.gamma, (1, ch, 1, 1))
    beta = reshape(state.beta, (1, ch, 1, 1))
    if training:
        count = batch * height * width
        if count < 2:
            raise ContractError(f"batchnorm2d training needs B*H*W >= 2, got {count}")
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = subtract(x, mu)
        var = mean(multiply(centered, centered), axis=(0, 2, 3), keepdims=True)
        inv_std = power(add(var, Tensor(state.eps)), -0.5)
        normed = multiply(centered, inv_std)
        batch_mean = mu.data.reshape(ch)
        batch_var = var.data.reshape(ch)
        unbiased = batch_var * (count / (count - 1))
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * batch_mean
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        rm = Tensor(state.running_mean.reshape(1, ch, 1, 1))
        rv = Tensor(((state.running_var + state.eps) ** -0.5).reshape(1, ch, 1, 1))
        normed = multiply(subtract(x, rm), rv)
    return add(multiply(normed, gamma), beta)


# ---------------------------------------------------------------------------
# Layers with parameters
# ---------------------------------------------------------------------------


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(2.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2dLayer:
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(np.zeros((cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def init(self, rng: np.random.Generator) -> None:
        cout, cin, kh, kw = self.weight.shape
        self.weight.data = _kaiming_uniform(rng, self.weight.shape, cin * kh * kw)
        self.bias.data = np.zeros(cout)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_arrays(self) -> list[np.ndarray]:
        return [self.weight.data, self.bias.data]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LinearLayer:
    def __init__(self, fan_in: int, fan_out: int):
        self.weight = Tensor(np.zeros((fan_out, fan_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def init(self, rng: np.random.Generator) -> None:
        fan_out, fan_in = self.weight.shape
        self.weight.data = _kaiming_uniform(rng, self.weight.shape, fan_in)
        self.bias.data = np.zeros(fan_out)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_arrays(self) -> list[np.ndarray]:
        return [self.weight.data, self.bias.data]

    def __call__(self, x: Tensor) -> Tensor:
        wt = transpose(self.weight, (1, 0))
        return add(matmul(x, wt), broadcast_to(self.bias, (x.shape[0], self.bias.shape[0])))


class _ResidualBlock:
    def __init__(self, cin: int, cout: int, stride: int):
        self.conv1 = Conv2dLayer(cin, cout, 3, stride, 1)
        self.bn1 = BatchNormState(cout)
        self.conv2 = Conv2dLayer(cout, cout, 3, 1, 1)
        self.bn2 = BatchNormState(cout)
        if stride != 1 or cin != cout:
            self.shortcut_conv: Conv2dLayer | None = Conv2dLayer(cin, cout, 1, stride, 0)
            self.shortcut_bn: BatchNormState | None = BatchNormState(cout)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def pieces(self):
        out = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.shortcut_conv is not None:
            out += [self.shortcut_conv, self.shortcut_bn]
        return out

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = relu(batchnorm2d(self.conv1(x), self.bn1, training))
        y = batchnorm2d(self.conv2(y), self.bn2, training)
        if self.shortcut_conv is not None:
            x = batchnorm2d(self.shortcut_conv(x), self.shortcut_bn, training)
        return relu(add(y, x))


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------

ARCHITECTURES = ("convnet4", "resnet18", "mlp")


class Backbone:
    """Embedding function mapping image batches [B,C,H,W] to [B, embedding_dim]."""

    def __init__(
        self,
        arch: str,
        input_spec: tuple[int, int, int],
        mlp_widths: tuple[int, ...] = (),
        seed: int = 0,
    ):
        if arch not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
        self.arch = arch
        self.input_spec = tuple(int(v) for v in input_spec)
        self.mlp_widths = tuple(int(w) for w in mlp_widths)
        c, h, w = self.input_spec

        if arch == "convnet4":
            self._blocks = []
            cin = c
            sh, sw = h, w
            for _ in range(4):
                self._blocks.append((Conv2dLayer(cin, 64, 3, 1, 1), BatchNormState(64)))
                cin = 64
                sh, sw = sh // 2, sw // 2
                if sh < 1 or sw < 1:
                    raise ContractError(
                        f"input {h}x{w} too small for four pooling stages"
                    )
            self.embedding_dim = 64 * sh * sw
            self._pieces = [p for conv, bn in self._blocks for p in (conv, bn)]
        elif arch == "resnet18":
            self._stem = Conv2dLayer(3, 64, 3, 1, 1)
            self._stem_bn = BatchNormState(64)
            cfg = [(64, 1), (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2), (512, 1)]
            self._res_blocks = []
            cin = 64
            for cout, stride in cfg:
                self._res_blocks.append(_ResidualBlock(cin, cout, stride))
                cin = cout
            self.embedding_dim = 512
            self._pieces = [self._stem, self._stem_bn]
            for blk in self._res_blocks:
                self._pieces += blk.pieces()
        else:  # mlp
            if not self.mlp_widths:
                raise ContractError("mlp backbone requires at least one layer width")
            dims = [c * h * w, *self.mlp_widths]
            self._linears = [LinearLayer(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
            self.embedding_dim = dims[-1]
            self._pieces = list(self._linears)

        init_parameters(self, seed)

    def parameters(self) -> list[Tensor]:
        """Learned tensors in declaration order."""
        out: list[Tensor] = []
        for piece in self._pieces:
            out += piece.parameters()
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """Learned tensors plus batchnorm running statistics, in order."""
        out: list[np.ndarray] = []
        for piece in self._pieces:
            out += piece.state_arrays()
        return out

    def tag(self) -> str:
        c, h, w = self.input_spec
        widths = ",".join(str(v) for v in self.mlp_widths)
        return f"{self.arch}|{c},{h},{w}|{widths}"

    def embed(self, images: Tensor, training: bool = False) -> Tensor:
        if images.ndim != 4 or images.shape[1:] != self.input_spec:
            raise ShapeError(
                f"embed: batch shape {images.shape} does not match input spec {self.input_spec}"
            )
        if self.arch == "convnet4":
            x = images
            for conv, bn in self._blocks:
                x = relu(batchnorm2d(conv(x), bn, training))
                _, _, sh, sw = x.shape
                if sh % 2 or sw % 2:
                    x = _crop2d(x, (sh // 2) * 2, (sw // 2) * 2)
                x = maxpool2d(x, 2)
            return reshape(x, (x.shape[0], self.embedding_dim))
        if self.arch == "resnet18":
            x = images
            if x.shape[1] == 1:
                x = concatenate([x, x, x], axis=1)
            x = relu(batchnorm2d(self._stem(x), self._stem_bn, training))
            for blk in self._res_blocks:
                x = blk(x, training)
            return mean(x, axis=(2, 3))
        x = reshape(images, (images.shape[0], -1))
        for i, layer in enumerate(self._linears):
            x = layer(x)
            if i + 1 < len(self._linears):
                x = relu(x)
        return x


def make_backbone(
    arch: str,
    input_spec: tuple[int, int, int],
    mlp_widths: tuple[int, ...] = (),
    seed: int = 0,
) -> Backbone:
    return Backbone(arch, input_spec, mlp_widths, seed)


def embed(backbone: Backbone, images: Tensor, training: bool = False) -> Tensor:
    return backbone.embed(images, training)


def count_parameters(backbone: Backbone) -> int:
    """Total element count over all learned tensors."""
    return int(np.sum([p.data.size for p in backbone.parameters()], dtype=np.int64))


def init_parameters(backbone: Backbone, seed: int) -> None:
    """(Re)initialize every layer deterministically from `seed`.

    Conv/linear weights are Kaiming-uniform over fan-in (bound
    sqrt(2/fan_in)); biases and batchnorm shifts are zero, batchnorm
    scales one, running statistics reset.
    """
    rng = np.random.default_rng(seed)
    for piece in backbone._pieces:
        piece.init(rng)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(backbone: Backbone, path) -> None:
    """Write magic, version, architecture tag, then per-layer state tensors
    as (rank, extents, little-endian float64) in declaration order."""
    arrays = backbone.state_arrays()
    tag = backbone.tag().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _parse_tag(tag: str) -> tuple[str, tuple[int, int, int], tuple[int, ...]]:
    parts = tag.split("|")
    if len(parts) != 3:
        raise ContractError(f"malformed checkpoint tag {tag!r}")
    arch = parts[0]
    spec = tuple(int(v) for v in parts[1].split(","))
    widths = tuple(int(v) for v in parts[2].split(",")) if parts[2] else ()
    return arch, spec, widths


def load_checkpoint(path) -> Backbone:
    """Rebuild the architecture named by the tag and load its state."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {version}")
        (taglen,) = struct.unpack("<I", fh.read(4))
        tag = fh.read(taglen).decode("utf-8")
        arch, spec, widths = _parse_tag(tag)
        backbone = Backbone(arch, spec, widths, seed=0)
        arrays = backbone.state_arrays()
        (count,) = struct.unpack("<I", fh.read(4))
        if count != len(arrays):
            raise ContractError(
                f"{path}: checkpoint holds {count} tensors, architecture needs {len(arrays)}"
            )
        loaded = []
        for arr in arrays:
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            if shape != arr.shape:
                raise ContractError(f"{path}: tensor shape {shape} != expected {arr.shape}")
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            loaded.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
    it = iter(loaded)
    for piece in backbone._pieces:
        if isinstance(piece, BatchNormState):
            piece.gamma.data = next(it)
            piece.beta.data = next(it)
            piece.running_mean = next(it)
            piece.running_var = next(it)
        else:
            piece.weight.data = next(it)
            piece.bias.data = next(it)
    return backbone
