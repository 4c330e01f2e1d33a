"""Runnable networks built from an :class:`ArchSpec`."""

from __future__ import annotations

import numpy as np

from funnet.arch.spec import ArchSpec, BlockSpec, has_identity_skip, se_width
from funnet.dct_codec import BLOCK, COEFFS, dct_matrix, zigzag_order
from funnet.errors import DimensionError
from funnet.nn import functional as F
from funnet.nn.module import BatchNorm2d, Conv2d, Linear, Module, SqueezeExcite
from funnet.nn.tensor import DEFAULT_DTYPE, Tensor, add, concat, mul, upsample_nearest2

MAX_DROP = 0.2
# channels whose spread is below this carry no signal (e.g. chroma of gray
# images, constant up to float rounding); they are centred but not rescaled
MIN_STD = 1e-3


class ConvBnAct(Module):
    def __init__(self, cin, cout, kernel, stride, act, rng, groups=1, use_act=True):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride, groups=groups)
        self.bn = BatchNorm2d(cout)
        self._act = F.ACTIVATIONS[act] if use_act else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return self._act(y) if self._act else y


class MBConv(Module):
    """Inverted residual: 1x1 expand, depthwise, optional SE, 1x1 project."""

    def __init__(self, cin: int, block: BlockSpec, stride: int, act: str,
                 rng: np.random.Generator, drop_rate: float = 0.0):
        super().__init__()
        cexp = cin * block.expansion
        self.expand = ConvBnAct(cin, cexp, 1, 1, act, rng) if block.expansion != 1 else None
        self.depthwise = ConvBnAct(cexp, cexp, block.kernel, stride, act, rng, groups=cexp)
        cse = se_width(cin, block.se_ratio)
        self.se = SqueezeExcite(cexp, cse, rng) if cse else None
        self.project = ConvBnAct(cexp, block.out_channels, 1, 1, act, rng, use_act=False)
        self._skip = has_identity_skip(cin, block, stride)
        self._survive = 1.0 - drop_rate

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        y = self.expand(x) if self.expand is not None else x
        y = self.depthwise(y)
        if self.se is not None:
            y = self.se(y)
        y = self.project(y)
        if not self._skip:
            return y
        return F.stochastic_depth(x, y, self._survive, self.training, rng)


class Bottleneck(Module):
    """1x1 reduce, kxk (carrying the stride), 1x1 expand, plus a shortcut."""

    def __init__(self, cin: int, block: BlockSpec, stride: int, act: str,
                 rng: np.random.Generator, drop_rate: float = 0.0):
        super().__init__()
        self.reduce = ConvBnAct(cin, block.inner, 1, 1, act, rng)
        self.spatial = ConvBnAct(block.inner, block.inner, block.kernel, stride, act, rng)
        self.expand = ConvBnAct(block.inner, block.out_channels, 1, 1, act, rng, use_act=False)
        skip = has_identity_skip(cin, block, stride)
        self.shortcut = (
            None if skip else ConvBnAct(cin, block.out_channels, 1, stride, act, rng, use_act=False)
        )
        self._act = F.ACTIVATIONS[act]

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        y = self.expand(self.spatial(self.reduce(x)))
        s = x if self.shortcut is None else self.shortcut(x)
        return self._act(add(s, y))


class Model(Module):
    """Body + head over normalized DCT coefficients.

    ``input_mean`` / ``input_std`` are per-channel statistics applied to the
    raw coefficients; they default to the identity and are filled in by
    training. Stochastic-depth drop rates ramp linearly from 0 at the first
    block to ``MAX_DROP`` at the last.
    """

    def __init__(self, spec: ArchSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        gh, gw, cin = spec.input
        self._buffers["input_mean"] = np.zeros(cin, dtype=DEFAULT_DTYPE)
        self._buffers["input_std"] = np.ones(cin, dtype=DEFAULT_DTYPE)
        n_blocks = spec.depth
        blocks: list[Module] = []
        for stage in spec.stages:
            for stride in stage.strides():
                drop = MAX_DROP * len(blocks) / n_blocks
                b = stage.block
                if b.operator == "MBConv":
                    blocks.append(MBConv(cin, b, stride, spec.activation, rng, drop))
                elif b.operator == "Bottleneck":
                    blocks.append(Bottleneck(cin, b, stride, spec.activation, rng, drop))
                else:
                    blocks.append(ConvBnAct(cin, b.out_channels, b.kernel, stride, spec.activation, rng))
                cin = b.out_channels
        self.blocks = blocks
        self.head = (
            ConvBnAct(cin, spec.head_width, 1, 1, spec.activation, rng) if spec.head_width else None
        )
        self.fc = Linear(spec.head_width or cin, spec.num_classes, rng)

    @property
    def in_channels(self) -> int:
        return self.spec.input[2]

    def set_input_stats(self, mean: np.ndarray, std: np.ndarray) -> None:
        std = np.where(np.asarray(std) > MIN_STD, std, 1.0)
        dtype = self._buffers["input_mean"].dtype
        self._buffers["input_mean"] = np.asarray(mean, dtype=dtype).copy()
        self._buffers["input_std"] = np.asarray(std, dtype=dtype).copy()

    def normalize(self, x) -> Tensor:
        """Standardize raw coefficients channel-wise."""
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self._buffers["input_mean"].dtype))
        if t.ndim != 4 or t.shape[1] != self.in_channels:
            raise DimensionError(
                f"{self.spec.name} expects (N, {self.in_channels}, H, W) input, got {t.shape}"
            )
        mean = self._buffers["input_mean"].reshape(1, -1, 1, 1)
        inv = (1.0 / self._buffers["input_std"]).reshape(1, -1, 1, 1)
        return add(mul(t, inv), -mean * inv)

    def features(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, rng) if isinstance(block, (MBConv, Bottleneck)) else block(x)
        if self.head is not None:
            x = self.head(x)
        return F.global_avg_pool(x)

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        """Raw DCT batch (N, C, H, W) -> logits (N, classes)."""
        return self.fc(self.features(self.normalize(x), rng))


def instantiate(spec: ArchSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


# ---------------------------------------------------------------------------
# learnable front


LEVEL_SHIFT = 128.0


def dct_filter_bank() -> np.ndarray:
    """Conv weights (64, 1, 8, 8) reproducing the static DCT in zigzag
    channel order, applied to level-shifted planes."""
    m = dct_matrix()
    return np.stack([np.outer(m[u], m[v]) for u, v in zigzag_order()])[:, None]


def random_orthonormal_bank(rng: np.random.Generator) -> np.ndarray:
    """A random rotation of the 64-dim block space.

    Like the DCT it preserves block energy, so its outputs sit on the scale
    the body's input statistics expect; only the basis orientation is random.
    """
    q, r = np.linalg.qr(rng.normal(size=(COEFFS, COEFFS)))
    q *= np.sign(np.diag(r))  # unique, uniformly distributed rotation
    return q.reshape(COEFFS, 1, BLOCK, BLOCK)


class LefunFront(Module):
    """Trainable 8x8 stride-8 transform replacing the fixed DCT.

    One bank of 64 filters is shared by Y, Cb and Cr unless ``per_plane``.
    Chroma outputs are upsampled onto the luma grid and the three groups are
    stacked plane-major like the static pipeline. ``init`` is ``"dct"`` (the
    exact static transform) or ``"random"`` (a random orthonormal basis).

    Planes are level-shifted by a fixed -128 before the conv and the bias
    starts at zero. Folding the shift into the bias instead gives the same
    function at init, but then every weight update also moves the response
    to flat (e.g. grey chroma) blocks, which a frozen body cannot absorb.
    """

    def __init__(self, rng: np.random.Generator, per_plane: bool = False, init: str = "random"):
        super().__init__()
        if init not in ("dct", "random"):
            raise ValueError(f"unknown front init {init!r}")
        self.per_plane = per_plane
        banks = []
        for _ in range(3 if per_plane else 1):
            conv = Conv2d(1, COEFFS, BLOCK, rng, stride=BLOCK, padding=0, bias=True)
            w = dct_filter_bank() if init == "dct" else random_orthonormal_bank(rng)
            conv.weight.data = w.astype(DEFAULT_DTYPE)
            conv.bias.data = np.zeros(COEFFS, dtype=DEFAULT_DTYPE)
            banks.append(conv)
        self.banks = banks

    def load_dct_basis(self) -> None:
        w = dct_filter_bank()
        for conv in self.banks:
            conv.weight.data = w.astype(conv.weight.dtype)
            conv.bias.data = np.zeros(COEFFS, dtype=conv.bias.dtype)

    def forward(self, planes) -> Tensor:
        y, cb, cr = planes
        if y.shape[-1] % 16 or y.shape[-2] % 16:
            raise DimensionError(f"luma plane {y.shape[-2:]} is not a multiple of 16")
        if cb.shape[-2:] != (y.shape[-2] // 2, y.shape[-1] // 2) or cr.shape != cb.shape:
            raise DimensionError("chroma planes must be half the luma size")
        out = []
        for i, p in enumerate((y, cb, cr)):
            conv = self.banks[i if self.per_plane else 0]
            p = p - LEVEL_SHIFT if isinstance(p, Tensor) else Tensor(np.asarray(p) - LEVEL_SHIFT)
            c = conv(p)
            out.append(c if i == 0 else upsample_nearest2(c))
        return concat(out, axis=1)

    def filters(self) -> np.ndarray:
        """(banks, 64, 8, 8) filter weights."""
        return np.stack([c.weight.data[:, 0] for c in self.banks])


class LefunModel(Module):
    """A learnable front feeding a DCT-domain body (full 192 channels)."""

    def __init__(self, body: Model, front: LefunFront, freeze_body: bool = False):
        super().__init__()
        if body.in_channels != 3 * COEFFS:
            raise DimensionError("a learnable front needs a body taking all 192 channels")
        self.front = front
        self.body = body
        self.freeze_body = freeze_body
        if freeze_body:
            body.set_trainable(False)

    def train(self, mode: bool = True) -> "LefunModel":
        # a frozen body stays in eval mode so its BN statistics never move
        super().train(mode)
        if self.freeze_body:
            self.body.train(False)
        return self

    def forward(self, planes, rng: np.random.Generator | None = None) -> Tensor:
        return self.body(self.front(planes), rng)


def front_param_count(per_plane: bool = False) -> int:
    return (3 if per_plane else 1) * (COEFFS * BLOCK * BLOCK + COEFFS)


__all__ = [
    "Bottleneck", "ConvBnAct", "LefunFront", "LefunModel", "MBConv", "Model",
    "dct_filter_bank", "front_param_count", "instantiate",
]
