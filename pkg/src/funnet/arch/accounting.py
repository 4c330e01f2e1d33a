"""Closed-form parameter and multiply-accumulate counts.

Conventions: convolutions inside blocks carry no bias, batch norm counts its
two affine vectors, squeeze-and-excitation is two biased 1x1 convs and the
classifier is a biased dense layer. Costs are MACs; activations, batch norm
and residual adds are free, pooling costs one MAC per input element.
"""

from __future__ import annotations

from dataclasses import dataclass

from funnet.arch.spec import ArchSpec, BlockSpec, has_identity_skip, se_width


def conv_out(size: int, kernel: int, stride: int) -> int:
    return (size + 2 * (kernel // 2) - kernel) // stride + 1


@dataclass
class Cost:
    params: int = 0
    macs: int = 0

    def conv(self, cin, cout, k, ho, wo, groups=1, bias=False, bn=True):
        self.params += k * k * (cin // groups) * cout + (cout if bias else 0) + (2 * cout if bn else 0)
        self.macs += ho * wo * cout * k * k * (cin // groups)

    def __iadd__(self, other: "Cost"):
        self.params += other.params
        self.macs += other.macs
        return self


def block_cost(block: BlockSpec, cin: int, stride: int, h: int, w: int) -> tuple[Cost, int, int]:
    """Cost of one block and its output spatial size."""
    c = Cost()
    ho, wo = conv_out(h, block.kernel, stride), conv_out(w, block.kernel, stride)
    if block.operator == "MBConv":
        cexp = cin * block.expansion
        if block.expansion != 1:
            c.conv(cin, cexp, 1, h, w)
        c.conv(cexp, cexp, block.kernel, ho, wo, groups=cexp)
        cse = se_width(cin, block.se_ratio)
        if cse:
            c.conv(cexp, cse, 1, 1, 1, bias=True, bn=False)
            c.conv(cse, cexp, 1, 1, 1, bias=True, bn=False)
            c.macs += ho * wo * cexp  # squeeze pooling
        c.conv(cexp, block.out_channels, 1, ho, wo)
    elif block.operator == "Bottleneck":
        c.conv(cin, block.inner, 1, h, w)
        c.conv(block.inner, block.inner, block.kernel, ho, wo)
        c.conv(block.inner, block.out_channels, 1, ho, wo)
        if not has_identity_skip(cin, block, stride):
            ho_s, wo_s = conv_out(h, 1, stride), conv_out(w, 1, stride)
            c.conv(cin, block.out_channels, 1, ho_s, wo_s)
    else:  # ConvBnAct
        c.conv(cin, block.out_channels, block.kernel, ho, wo)
    return c, ho, wo


def arch_cost(spec: ArchSpec) -> Cost:
    h, w, cin = spec.input
    total = Cost()
    for stage in spec.stages:
        for stride in stage.strides():
            c, h, w = block_cost(stage.block, cin, stride, h, w)
            total += c
            cin = stage.block.out_channels
    if spec.head_width:
        total.conv(cin, spec.head_width, 1, h, w)
        cin = spec.head_width
    total.macs += h * w * cin  # global pooling
    total.params += cin * spec.num_classes + spec.num_classes
    total.macs += cin * spec.num_classes
    return total


def stage_costs(spec: ArchSpec) -> list[tuple[Cost, int, int]]:
    """Per-stage cost and output grid, in stage order."""
    h, w, cin = spec.input
    rows = []
    for stage in spec.stages:
        cost = Cost()
        for stride in stage.strides():
            c, h, w = block_cost(stage.block, cin, stride, h, w)
            cost += c
            cin = stage.block.out_channels
        rows.append((cost, h, w))
    return rows


def count_params(spec: ArchSpec) -> int:
    """Trainable parameters; batch-norm running statistics excluded."""
    return arch_cost(spec).params


def count_flops(spec: ArchSpec, input_dims: tuple[int, int, int] | None = None) -> int:
    """Multiply-accumulates for one image at ``input_dims`` (default: the spec's input)."""
    if input_dims is not None:
        spec = spec.with_grid(input_dims[0], input_dims[1]).with_input_channels(input_dims[2])
    return arch_cost(spec).macs


def output_grid(spec: ArchSpec) -> tuple[int, int]:
    """Spatial size entering the head."""
    h, w, _ = spec.input
    for stage in spec.stages:
        for stride in stage.strides():
            h, w = conv_out(h, stage.block.kernel, stride), conv_out(w, stage.block.kernel, stride)
    return h, w
