"""Inference-time frequency-channel reduction.

Masking zeroes dropped channels and keeps the network intact, so it is the
function-level operation. Pruning rebuilds the first block for fewer input
channels; it changes the function and exists for size accounting and as a
starting point for fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from funnet.arch.accounting import count_params
from funnet.arch.model import MBConv, Model
from funnet.dct_codec import COEFFS, FULL_SPEC, CompressionSpec, DctTensor
from funnet.errors import DimensionError, SpecError
from funnet.nn.tensor import Parameter

PAPER_SPECS = (
    CompressionSpec(64, 64, 64),
    CompressionSpec(64, 12, 12),
    CompressionSpec(44, 10, 10),
    CompressionSpec(32, 8, 8),
    CompressionSpec(14, 5, 5),
)


def channel_mask(spec: CompressionSpec) -> np.ndarray:
    """Boolean (192,) vector, True at retained channels."""
    keep = np.zeros(3 * COEFFS, dtype=bool)
    keep[spec.channel_indices()] = True
    return keep


def mask_channels(x, spec: CompressionSpec):
    """Zero every channel past each plane's keep-count.

    Accepts a full :class:`DctTensor` or a raw array whose channel axis is
    the third from last, e.g. a (N, 192, H, W) batch. Returns the same kind.
    """
    if not isinstance(spec, CompressionSpec):
        raise SpecError(f"expected a CompressionSpec, got {type(spec).__name__}")
    if isinstance(x, DctTensor):
        if not x.spec.is_full:
            raise DimensionError("mask_channels needs a full 192-channel tensor")
        return DctTensor(mask_channels(x.data, spec), FULL_SPEC)
    arr = np.asarray(x)
    if arr.ndim < 3 or arr.shape[-3] != 3 * COEFFS:
        raise DimensionError(f"expected 192 channels on axis -3, got shape {arr.shape}")
    keep = channel_mask(spec).reshape(-1, 1, 1)
    return np.where(keep, arr, np.zeros((), dtype=arr.dtype))


@dataclass
class MaskReport:
    spec: CompressionSpec
    channels_active: int
    accuracy: float | None
    pruned_param_count: int

    def row(self) -> str:
        acc = "" if self.accuracy is None else f"{self.accuracy:.4f}"
        ky, kb, kr = self.spec.keeps
        return f"{ky},{kb},{kr},{self.channels_active},{acc},{self.pruned_param_count}"


CSV_HEADER = "keep_y,keep_cb,keep_cr,channels,top1,params"


def pruned_param_count(model_or_spec, spec: CompressionSpec) -> int:
    arch = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    return count_params(arch.with_input_channels(spec.channels))


def prune_first_block(model: Model, spec: CompressionSpec) -> tuple[Model, int]:
    """Rebuild the first MBConv for ``spec.channels`` inputs.

    The expanded width is recomputed as expansion x inputs. Surviving input
    columns of the expand conv are copied; of its outputs the first
    ``expansion * channels`` are kept together with the matching depthwise,
    SE and projection slices. Returns the new model and the (non-positive)
    parameter delta.
    """
    if model.in_channels != 3 * COEFFS:
        raise DimensionError("pruning starts from a model taking all 192 channels")
    first = model.blocks[0]
    if not isinstance(first, MBConv):
        raise SpecError("the first block is not an MBConv")
    before = model.num_parameters()
    if spec.is_full:
        return model, 0
    cin = spec.channels
    block = model.spec.stages[0].block
    cexp = cin * block.expansion
    new_spec = model.spec.with_input_channels(cin)
    pruned = Model(new_spec, seed=0)
    # copy everything that keeps its shape, then slice the first block
    src = dict(model.named_parameters())
    for name, p in pruned.named_parameters():
        if p.shape == src[name].shape and not name.startswith("blocks.0."):
            p.data = src[name].data.copy()
    src_bufs = dict(model.named_buffers())
    for name, buf in pruned.named_buffers():
        if buf.shape == src_bufs[name].shape and not name.startswith("blocks.0."):
            buf[...] = src_bufs[name]
    cols = spec.channel_indices()
    rows = np.arange(cexp) if block.expansion != 1 else cols
    _copy_first_block(first, pruned.blocks[0], cols, rows)
    mean, std = model._buffers["input_mean"], model._buffers["input_std"]
    pruned.set_input_stats(mean[cols], std[cols])
    return pruned, pruned.num_parameters() - before


def _slice_into(dst: Parameter, src: np.ndarray) -> None:
    if dst.shape != src.shape:
        raise DimensionError(f"pruned slice {src.shape} does not fit {dst.shape}")
    dst.data = np.ascontiguousarray(src).astype(dst.dtype)


def _copy_bn(dst, src, rows):
    _slice_into(dst.gamma, src.gamma.data[rows])
    _slice_into(dst.beta, src.beta.data[rows])
    for k in ("running_mean", "running_var"):
        dst._buffers[k] = src._buffers[k][rows].copy()


def _copy_first_block(src: MBConv, dst: MBConv, cols: np.ndarray, rows: np.ndarray) -> None:
    if src.expand is not None:
        _slice_into(dst.expand.conv.weight, src.expand.conv.weight.data[rows][:, cols])
        _copy_bn(dst.expand.bn, src.expand.bn, rows)
    _slice_into(dst.depthwise.conv.weight, src.depthwise.conv.weight.data[rows])
    _copy_bn(dst.depthwise.bn, src.depthwise.bn, rows)
    if dst.se is not None:
        r = dst.se.reduce.weight.shape[0]
        _slice_into(dst.se.reduce.weight, src.se.reduce.weight.data[:r][:, rows])
        _slice_into(dst.se.reduce.bias, src.se.reduce.bias.data[:r])
        _slice_into(dst.se.expand.weight, src.se.expand.weight.data[rows][:, :r])
        _slice_into(dst.se.expand.bias, src.se.expand.bias.data[rows])
    _slice_into(dst.project.conv.weight, src.project.conv.weight.data[:, rows])
    _copy_bn(dst.project.bn, src.project.bn, slice(None))


def compression_sweep(model: Model, features: np.ndarray, labels: np.ndarray,
                      specs=PAPER_SPECS, batch_size: int = 64) -> list[MaskReport]:
    """Masked top-1 accuracy for each spec on raw full-channel features."""
    from funnet.train_eval import accuracy_on

    reports = []
    for spec in specs:
        acc = accuracy_on(model, mask_channels(features, spec), labels, batch_size)
        reports.append(MaskReport(spec, spec.channels, acc, pruned_param_count(model, spec)))
    return reports


def sweep_csv(reports: list[MaskReport]) -> str:
    return "\n".join([CSV_HEADER] + [r.row() for r in reports]) + "\n"
