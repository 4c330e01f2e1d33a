"""Training and evaluation harness, including the learnable-front experiments."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from funnet.arch.model import LefunFront, LefunModel, MBConv, Model
from funnet.compression import mask_channels
from funnet.data import Dataset, FeatureCache, channel_stats, dct_features, plane_batches
from funnet.dct_codec import COEFFS, FULL_SPEC, CompressionSpec, zigzag_order
from funnet.errors import ConfigError, DimensionError, DivergenceError
from funnet.imageio import write_pgm
from funnet.nn import functional as F
from funnet.nn.module import Module
from funnet.nn.optim import Optimizer, OptimizerState, lr_schedule, step_schedule
from funnet.nn.tensor import no_grad


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe. Defaults are the eFUN ImageNet recipe at batch 32.

    ``freeze`` lists parameter-name prefixes that stay fixed.
    ``bn_momentum`` overrides every batch-norm layer's momentum when set.
    ``target_accuracy`` ends training after the first epoch whose test
    top-1 reaches it.
    """

    optimizer: str = "rmsprop"
    lr0: float = 0.048
    momentum: float = 0.9
    rms_decay: float = 0.9
    eps: float = 1e-3
    weight_decay: float = 1e-5
    schedule: str = "exponential"
    epochs_per_decay: float = 2.4
    lr_decay: float = 0.97
    step_boundaries: tuple[int, ...] = (90, 110)
    step_values: tuple[float, ...] = (0.1, 0.01, 0.001)
    epochs: int = 30
    batch_size: int = 32
    stochastic_depth_max: float = 0.2
    bn_momentum: float | None = None
    seed: int = 0
    freeze: tuple[str, ...] = ()
    hflip: bool = False
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("exponential", "step"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.stochastic_depth_max < 1.0:
            raise ConfigError("stochastic_depth_max must be in [0, 1)")
        if len(self.step_values) != len(self.step_boundaries) + 1:
            raise ConfigError("step schedule needs one more value than boundaries")
        object.__setattr__(self, "freeze", tuple(self.freeze))
        object.__setattr__(self, "step_boundaries", tuple(self.step_boundaries))
        object.__setattr__(self, "step_values", tuple(self.step_values))

    @classmethod
    def resfun(cls, **overrides) -> "TrainConfig":
        """SGD with momentum, 0.1 / 0.01 / 0.001 over 90 / 20 / 20 epochs."""
        base = dict(optimizer="sgd", lr0=0.1, weight_decay=1e-4, schedule="step",
                    epochs=130, stochastic_depth_max=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, batch_size: int = 32, **overrides) -> "TrainConfig":
        """The eFUN recipe for toy runs.

        The initial rate is scaled linearly from its batch-512 value, and BN
        running statistics use momentum 0.1 because a few hundred steps are
        too few for 0.01 to settle.
        """
        base = dict(lr0=0.048 * batch_size / 512, batch_size=batch_size, bn_momentum=0.1)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_arch(cls, name: str, **overrides) -> "TrainConfig":
        if name == "resfun":
            return cls.resfun(**overrides)
        base = {"stochastic_depth_max": 0.3} if name == "efun-l" else {}
        base.update(overrides)
        return cls(**base)

    def lr_at(self, epoch) -> float:
        if self.schedule == "step":
            return step_schedule(epoch, self.step_boundaries, self.step_values)
        return lr_schedule(epoch, self.epochs_per_decay, self.lr_decay, self.lr0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    test_top1: float | None

    def line(self) -> str:
        test = "nan" if self.test_top1 is None else f"{self.test_top1:.4f}"
        return (f"epoch={self.epoch} lr={self.lr:.8g} train_loss={self.train_loss:.6f} "
                f"train_top1={self.train_top1:.4f} test_top1={test}")


@dataclass
class TrainResult:
    model: Module
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.records)

    @property
    def final_test_top1(self) -> float | None:
        return self.records[-1].test_top1 if self.records else None


# ---------------------------------------------------------------------------
# inputs


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(p[idx] for p in inputs)
    return inputs[idx]


def _count(inputs) -> int:
    return len(inputs[0]) if isinstance(inputs, tuple) else len(inputs)


def _hflip_signs() -> np.ndarray:
    """(+1/-1) per channel: mirroring a block negates odd horizontal frequencies."""
    per_plane = np.array([(-1.0) ** v for _, v in zigzag_order()], dtype=np.float32)
    return np.tile(per_plane, 3)


def hflip_features(x: np.ndarray) -> np.ndarray:
    """DCT-domain horizontal flip of a (N, C, H, W) full-channel batch."""
    if x.shape[1] != 3 * COEFFS:
        raise DimensionError("hflip_features needs all 192 channels")
    return x[..., ::-1] * _hflip_signs().reshape(1, -1, 1, 1)


def _flip(inputs, rows):
    if isinstance(inputs, tuple):
        return tuple(np.where(rows.reshape(-1, 1, 1, 1), p[..., ::-1], p) for p in inputs)
    return np.where(rows.reshape(-1, 1, 1, 1), hflip_features(inputs), inputs)


def model_inputs(model: Module, ds: Dataset, cache: FeatureCache | None = None):
    """What ``model`` consumes for ``ds``: DCT features or YCbCr planes."""
    if isinstance(model, LefunModel):
        return plane_batches(ds)
    spec = FULL_SPEC if model.in_channels == 3 * COEFFS else None
    if spec is None:
        raise DimensionError("use truncated features explicitly for pruned models")
    return dct_features(ds, spec, cache)


# ---------------------------------------------------------------------------
# evaluation


def predict(model: Module, inputs, batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax predictions; restores the previous train/eval mode."""
    was_training = model.training
    model.eval()
    try:
        preds = []
        with no_grad():
            for lo in range(0, _count(inputs), batch_size):
                logits = model(_take(inputs, slice(lo, lo + batch_size)))
                preds.append(np.argmax(logits.data, axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy_on(model: Module, inputs, labels, batch_size: int = 64) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("cannot evaluate on an empty set")
    return float(np.mean(predict(model, inputs, batch_size) == labels))


def evaluate(model: Module, ds: Dataset, spec: CompressionSpec = FULL_SPEC,
             cache: FeatureCache | None = None, batch_size: int = 64) -> float:
    """Top-1 accuracy on ``ds`` with inputs masked to ``spec``."""
    inputs = model_inputs(model, ds, cache)
    if not spec.is_full:
        if isinstance(model, LefunModel):
            raise ConfigError("masking applies to DCT-input models")
        inputs = mask_channels(inputs, spec)
    return accuracy_on(model, inputs, ds.labels, batch_size)


def mean_loss(model: Module, inputs, labels, batch_size: int = 64) -> float:
    """Eval-mode mean cross-entropy."""
    was_training = model.training
    model.eval()
    total = 0.0
    try:
        with no_grad():
            for lo in range(0, _count(inputs), batch_size):
                sl = slice(lo, lo + batch_size)
                loss = F.softmax_cross_entropy(model(_take(inputs, sl)), labels[sl])
                total += loss.item() * len(labels[sl])
    finally:
        model.train(was_training)
    return total / len(labels)


# ---------------------------------------------------------------------------
# training


def configure(model: Module, config: TrainConfig) -> None:
    """Apply drop-rate ramp, BN momentum and freezing from ``config``."""
    body = model.body if isinstance(model, LefunModel) else model
    n = len(body.blocks)
    for i, block in enumerate(body.blocks):
        if isinstance(block, MBConv):
            block._survive = 1.0 - config.stochastic_depth_max * i / n
    if config.bn_momentum is not None:
        for m in model.modules():
            if hasattr(m, "momentum") and "running_mean" in m._buffers:
                m.momentum = config.bn_momentum
    for name, p in model.named_parameters():
        p.set_trainable(not any(name.startswith(f) for f in config.freeze))


def make_optimizer(model: Module, config: TrainConfig) -> Optimizer:
    params = model.parameters()
    state = OptimizerState(
        config.optimizer,
        lr=config.lr0,
        momentum=config.momentum,
        decay=config.rms_decay,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    return Optimizer(params, state)


def fit_input_stats(model: Model, features: np.ndarray) -> None:
    mean, std = channel_stats(features)
    model.set_input_stats(mean, std)


def train_on(model: Module, inputs, labels, config: TrainConfig,
             test_inputs=None, test_labels=None, log=None) -> TrainResult:
    """Minibatch training on prepared inputs.

    All randomness comes from one generator seeded with ``config.seed``,
    consumed per epoch as: shuffle permutation, then for each batch the
    flip draws (when enabled) followed by stochastic-depth draws in block
    order.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = _count(inputs)
    if n == 0:
        raise ConfigError("cannot train on an empty set")
    configure(model, config)
    opt = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = -(-n // config.batch_size)
    result = TrainResult(model)
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            xb = _take(inputs, idx)
            if config.hflip:
                xb = _flip(xb, rng.random(len(idx)) < 0.5)
            lr = config.lr_at(Fraction(epoch) + Fraction(step, steps_per_epoch))
            logits = model(xb, rng)
            loss = F.softmax_cross_entropy(logits, labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"loss became {value} at epoch {epoch} step {step} (lr={lr:.6g})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        test_top1 = None
        if test_inputs is not None:
            test_top1 = accuracy_on(model, test_inputs, test_labels)
        rec = EpochRecord(epoch, config.lr_at(epoch), loss_sum / n, correct / n, test_top1)
        result.records.append(rec)
        if log is not None:
            log(rec.line())
        if (config.target_accuracy is not None and test_top1 is not None
                and test_top1 >= config.target_accuracy):
            break
    model.eval()
    return result


def train(model: Module, train_ds: Dataset, config: TrainConfig, test_ds: Dataset | None = None,
          cache: FeatureCache | None = None, fit_stats: bool = True, log=None) -> TrainResult:
    """Preprocess (cached), normalize and train ``model`` on ``train_ds``."""
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    cache = cache if cache is not None else FeatureCache()
    inputs = model_inputs(model, train_ds, cache)
    if fit_stats and isinstance(model, Model):
        fit_input_stats(model, inputs)
    test_inputs = test_labels = None
    if test_ds is not None:
        test_inputs, test_labels = model_inputs(model, test_ds, cache), test_ds.labels
    return train_on(model, inputs, train_ds.labels, config, test_inputs, test_labels, log)


# ---------------------------------------------------------------------------
# learnable front


@dataclass
class LefunReport:
    static_top1: float
    frozen_top1: float | None = None
    e2e_top1: float | None = None
    front_params: int = 0

    def text(self) -> str:
        def fmt(x):
            return "nan" if x is None else f"{x:.4f}"

        return (f"static_top1={fmt(self.static_top1)}\n"
                f"lefun_frozen_top1={fmt(self.frozen_top1)}\n"
                f"lefun_e2e_top1={fmt(self.e2e_top1)}\n"
                f"front_params={self.front_params}\n")


def attach_front(base: Model, mode: str, init: str = "random", per_plane: bool = False,
                 seed: int = 0, warm_start: bool | None = None) -> LefunModel:
    """Put a learnable front before a copy of ``base``.

    ``frozen`` keeps the trained body fixed in eval mode so only the front
    learns. ``end_to_end`` trains both; unless ``warm_start`` its body is a
    fresh ``seed`` initialization of the same architecture, so the front and
    body are learned together from the start. ``warm_start`` defaults to
    True for ``frozen`` and False for ``end_to_end``.
    """
    if mode not in ("frozen", "end_to_end"):
        raise ConfigError(f"unknown LeFUN mode {mode!r}")
    if warm_start is None:
        warm_start = mode == "frozen"
    if mode == "frozen" and not warm_start:
        raise ConfigError("a frozen body must be the trained base")
    body = copy.deepcopy(base) if warm_start else Model(base.spec, seed=seed)
    front = LefunFront(np.random.default_rng(seed), per_plane=per_plane, init=init)
    return LefunModel(body, front, freeze_body=(mode == "frozen"))


def calibrate_front(model: LefunModel, planes, batch_size: int = 64) -> None:
    """Refit the body's input normalization to the front's current outputs.

    The body was normalized for DCT statistics; a random front produces
    channels on unrelated scales, which the fixed body cannot absorb.
    Only normalization buffers change, never trained parameters.
    """
    n = _count(planes)
    with no_grad():
        feats = np.concatenate([
            model.front(_take(planes, np.arange(i, min(i + batch_size, n)))).data
            for i in range(0, n, batch_size)
        ])
    fit_input_stats(model.body, feats)


def run_lefun(mode: str, base: Model, train_ds: Dataset, config: TrainConfig,
              test_ds: Dataset, init: str = "random", per_plane: bool = False,
              warm_start: bool | None = None, log=None) -> tuple[TrainResult, float]:
    """Train a front-equipped model built from ``base``; returns the run and test top-1.

    See ``attach_front`` for ``warm_start``.
    """
    model = attach_front(base, mode, init, per_plane, seed=config.seed, warm_start=warm_start)
    if init == "random" or (mode == "end_to_end" and not warm_start):
        calibrate_front(model, plane_batches(train_ds))
    cfg = replace(config, freeze=config.freeze + (("body.",) if mode == "frozen" else ()))
    result = train(model, train_ds, cfg, test_ds, fit_stats=False, log=log)
    return result, evaluate(model, test_ds)


def export_filters(front: LefunFront, directory: str | Path) -> list[Path]:
    """Write each 8x8 filter as a PGM, min-max scaled per filter."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for b, bank in enumerate(front.filters()):
        for k, f in enumerate(bank):
            lo, hi = float(f.min()), float(f.max())
            if hi > lo:
                img = np.rint((f - lo) / (hi - lo) * 255.0)
            else:
                img = np.full(f.shape, 128.0)
            path = out / f"filter_b{b}_{k:02d}.pgm"
            write_pgm(path, img.astype(np.uint8))
            paths.append(path)
    return paths
