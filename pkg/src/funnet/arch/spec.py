"""Declarative architecture descriptions, presets and compound scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

from funnet.errors import DegenerateScaleError, SpecError

OPERATORS = ("MBConv", "Bottleneck", "ConvBnAct")
ACTIVATIONS = ("swish", "relu")


@dataclass(frozen=True)
class BlockSpec:
    """One block type.

    ``expansion`` and ``se_ratio`` apply to MBConv, ``inner`` (the bottleneck
    width) to Bottleneck. ``se_ratio`` is relative to the block input width;
    0 disables squeeze-and-excitation.
    """

    operator: str
    kernel: int
    stride: int
    out_channels: int
    expansion: int = 1
    se_ratio: float = 0.0
    inner: int = 0

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise SpecError(f"unknown operator {self.operator!r}")
        if self.stride not in (1, 2):
            raise SpecError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError(f"kernel must be a positive odd size, got {self.kernel}")
        if self.out_channels < 1:
            raise SpecError("out_channels must be positive")
        if self.expansion < 1:
            raise SpecError("expansion must be >= 1")
        if not 0.0 <= self.se_ratio <= 1.0:
            raise SpecError("se_ratio must lie in [0, 1]")
        if self.operator == "Bottleneck" and self.inner < 1:
            raise SpecError("Bottleneck needs a positive inner width")


@dataclass(frozen=True)
class Stage:
    block: BlockSpec
    repeats: int

    def __post_init__(self):
        if self.repeats < 1:
            raise SpecError("a stage needs at least one block")

    def strides(self) -> list[int]:
        """The first block carries the stage stride, the rest use 1."""
        return [self.block.stride] + [1] * (self.repeats - 1)


@dataclass(frozen=True)
class ArchSpec:
    """A network over DCT inputs.

    ``input`` is (grid_h, grid_w, channels). ``head_width`` 0 means the head
    is pool + FC only, otherwise a 1x1 conv + BN + activation comes first.
    """

    name: str
    input: tuple[int, int, int]
    stages: tuple[Stage, ...]
    head_width: int
    num_classes: int
    activation: str = "swish"

    def __post_init__(self):
        object.__setattr__(self, "input", tuple(int(v) for v in self.input))
        object.__setattr__(self, "stages", tuple(self.stages))
        gh, gw, c = self.input
        if gh < 1 or gw < 1 or c < 1:
            raise SpecError(f"bad input dims {self.input}")
        if not self.stages:
            raise SpecError("an architecture needs at least one stage")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")

    @property
    def depth(self) -> int:
        return sum(s.repeats for s in self.stages)

    def with_input_channels(self, channels: int) -> "ArchSpec":
        gh, gw, _ = self.input
        return replace(self, input=(gh, gw, channels))

    def with_classes(self, num_classes: int) -> "ArchSpec":
        return replace(self, num_classes=num_classes)

    def with_grid(self, grid_h: int, grid_w: int) -> "ArchSpec":
        return replace(self, input=(grid_h, grid_w, self.input[2]))


def se_width(cin: int, ratio: float) -> int:
    """Reduced width of a squeeze-and-excitation branch (0 when disabled)."""
    if ratio <= 0:
        return 0
    return max(1, math.floor(cin * ratio + 0.5))


def has_identity_skip(cin: int, block: BlockSpec, stride: int) -> bool:
    return stride == 1 and cin == block.out_channels


# ---------------------------------------------------------------------------
# builders


def _mb(kernel, stride, width, repeats, expansion=6, se=0.25) -> Stage:
    return Stage(BlockSpec("MBConv", kernel, stride, width, expansion, se), repeats)


def efun_base(num_classes: int = 1000) -> ArchSpec:
    """eFUN: widened EfficientNet-B0 stages from the 28x28 resolution onward.

    The first stage drops squeeze-and-excitation, as in the fused early
    stages of later EfficientNets; see the decision ledger for how the table
    was fitted to the published size, cost and pruning figures.
    """
    return ArchSpec(
        "efun",
        (28, 28, 192),
        (_mb(3, 1, 128, 3, se=0.0), _mb(5, 2, 160, 1), _mb(5, 2, 192, 3)),
        head_width=1280,
        num_classes=num_classes,
    )


def efun_variant_a(num_classes: int = 1000) -> ArchSpec:
    return ArchSpec(
        "efun-variant-a",
        (28, 28, 192),
        (
            _mb(3, 1, 16, 1, expansion=1),
            _mb(3, 1, 24, 2),
            _mb(5, 1, 40, 2),
            _mb(3, 2, 80, 3),
            _mb(5, 1, 112, 3),
            _mb(5, 2, 192, 4),
            _mb(3, 1, 320, 1),
        ),
        head_width=1280,
        num_classes=num_classes,
    )


def efun_variant_b(num_classes: int = 1000) -> ArchSpec:
    return ArchSpec(
        "efun-variant-b",
        (28, 28, 192),
        (_mb(3, 2, 80, 3), _mb(5, 1, 112, 3), _mb(5, 2, 192, 4), _mb(3, 1, 320, 1)),
        head_width=1280,
        num_classes=num_classes,
    )


def resfun(num_classes: int = 1000) -> ArchSpec:
    """ResNet-50 with its stem and first residual stage replaced by a 1x1 adapter."""

    def stage(inner, out, repeats, stride):
        return Stage(BlockSpec("Bottleneck", 3, stride, out, inner=inner), repeats)

    return ArchSpec(
        "resfun",
        (28, 28, 192),
        (
            Stage(BlockSpec("ConvBnAct", 1, 1, 256), 1),
            stage(128, 512, 4, 1),
            stage(192, 768, 6, 2),
            stage(256, 1024, 3, 2),
        ),
        head_width=0,
        num_classes=num_classes,
        activation="relu",
    )


# ---------------------------------------------------------------------------
# compound scaling


@dataclass(frozen=True)
class ScaleCoeffs:
    phi: int
    alpha: Fraction = field(default=Fraction(6, 5))
    beta: Fraction = field(default=Fraction(11, 10))
    gamma: Fraction = field(default=Fraction(23, 20))

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, Fraction(str(getattr(self, name))))


def round_width(width, multiple: int = 8, minimum: int = 8) -> int:
    """Nearest multiple of ``multiple`` (halves round up), floored at ``minimum``."""
    q = math.floor(Fraction(width) / multiple + Fraction(1, 2))
    return max(minimum, q * multiple)


def scaled_grid(grid: int, gamma: Fraction, phi: int) -> int:
    """Grid side after resolution scaling, kept even so RGB stays a multiple of 16."""
    return 2 * math.floor(grid * gamma**phi / 2 + Fraction(1, 2))


def compound_scale(base: ArchSpec, coeffs: ScaleCoeffs | int, name: str | None = None) -> ArchSpec:
    """Scale depth, width and input grid together.

    Repeats become ``ceil(n * alpha**phi)``, widths (head included) the
    nearest multiple of 8 of ``w * beta**phi`` and the grid side
    ``round(g * gamma**phi)`` made even. Arithmetic is exact, so boundary
    cases such as ``5 * 1.2 == 6`` do not pick up float error.
    """
    if isinstance(coeffs, int):
        coeffs = ScaleCoeffs(coeffs)
    phi = coeffs.phi
    if phi == 0:
        return base if name is None else replace(base, name=name)
    depth = coeffs.alpha**phi
    width = coeffs.beta**phi
    stages = []
    for s in base.stages:
        b = s.block
        repeats = math.ceil(s.repeats * depth)
        out = round_width(b.out_channels * width)
        inner = round_width(b.inner * width) if b.inner else 0
        if repeats < 1 or out < 1:
            raise DegenerateScaleError(f"phi={phi} collapses stage {b}")
        stages.append(Stage(replace(b, out_channels=out, inner=inner), repeats))
    gh, gw, c = base.input
    grid = (scaled_grid(gh, coeffs.gamma, phi), scaled_grid(gw, coeffs.gamma, phi))
    if min(grid) < 2:
        raise DegenerateScaleError(f"phi={phi} shrinks the {gh}x{gw} grid to {grid}")
    head = round_width(base.head_width * width) if base.head_width else 0
    return ArchSpec(
        name or f"{base.name}@phi{phi:+d}",
        (grid[0], grid[1], c),
        tuple(stages),
        head,
        base.num_classes,
        base.activation,
    )


PRESETS = {
    "efun-s+": lambda: compound_scale(efun_base(), -2, "efun-s+"),
    "efun-s": lambda: compound_scale(efun_base(), -1, "efun-s"),
    "efun": efun_base,
    "efun-l": lambda: compound_scale(efun_base(), 1, "efun-l"),
    "efun-variant-a": efun_variant_a,
    "efun-variant-b": efun_variant_b,
    "resfun": resfun,
    "micro": lambda: compound_scale(efun_base(), -6, "micro"),
}


def preset(name: str, num_classes: int | None = None) -> ArchSpec:
    if name not in PRESETS:
        raise SpecError(f"unknown architecture {name!r}; choose from {', '.join(PRESETS)}")
    spec = PRESETS[name]()
    return spec if num_classes is None else spec.with_classes(num_classes)


# ---------------------------------------------------------------------------
# text format


def _fmt_ratio(x: float) -> str:
    return format(x, "g")


def to_text(spec: ArchSpec) -> str:
    """One header field per line, then one stage per line."""
    gh, gw, c = spec.input
    lines = [
        f"name {spec.name}",
        f"input {gh} {gw} {c}",
        f"head {spec.head_width}",
        f"classes {spec.num_classes}",
        f"act {spec.activation}",
    ]
    for s in spec.stages:
        b = s.block
        extras = []
        if b.operator == "MBConv":
            extras += [f"expand={b.expansion}", f"se={_fmt_ratio(b.se_ratio)}"]
        if b.operator == "Bottleneck":
            extras.append(f"inner={b.inner}")
        fields = [b.operator, str(b.kernel), str(b.stride), str(b.out_channels), str(s.repeats)]
        lines.append(" ".join(fields + extras))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> ArchSpec:
    header: dict[str, list[str]] = {}
    stages = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] in OPERATORS:
                op, k, s, w, n = parts[0], *map(int, parts[1:5])
                opts = dict(p.split("=", 1) for p in parts[5:])
                unknown = set(opts) - {"expand", "se", "inner"}
                if unknown:
                    raise SpecError(f"unknown stage options {sorted(unknown)}")
                block = BlockSpec(
                    op, k, s, w,
                    expansion=int(opts.get("expand", 1)),
                    se_ratio=float(opts.get("se", 0)),
                    inner=int(opts.get("inner", 0)),
                )
                stages.append(Stage(block, n))
            else:
                header[parts[0]] = parts[1:]
        except (ValueError, TypeError) as exc:
            raise SpecError(f"line {lineno}: cannot parse {raw!r}: {exc}") from exc
    missing = {"name", "input", "head", "classes"} - set(header)
    if missing:
        raise SpecError(f"architecture text lacks {sorted(missing)}")
    try:
        return ArchSpec(
            header["name"][0],
            tuple(int(v) for v in header["input"]),
            tuple(stages),
            int(header["head"][0]),
            int(header["classes"][0]),
            header.get("act", ["swish"])[0],
        )
    except (ValueError, IndexError) as exc:
        raise SpecError(f"bad architecture header: {exc}") from exc
