"""Acceptance suite: one group of checks per criterion, summarized at the end
of the run as one PASS/FAIL line each (see conftest.py).

The toy-training criteria share one trained micro eFUN (module fixture).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from funnet.arch import count_flops, count_params, efun_base, instantiate, preset
from funnet.compression import PAPER_SPECS, compression_sweep, mask_channels, pruned_param_count
from funnet.data import FeatureCache, dct_features, synth_freq_dataset
from funnet.dct_codec import (
    FULL_SPEC,
    CompressionSpec,
    DctTensor,
    block_dct8,
    blockwise_dct,
    blockwise_idct,
    pad_to_full,
    preprocess,
    truncate,
)
from funnet.nn import functional as F
from funnet.nn.tensor import Tensor, add, concat, mul, reshape, upsample_nearest2
from funnet.train_eval import TrainConfig, attach_front, evaluate, run_lefun, train
from funnet.weights import WeightsFile

from oracles import gradcheck

GRAD_TOL = 1e-5
LEFUN_EPOCHS = 12

criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# shared toy run


@pytest.fixture(scope="module")
def toy_data():
    size = 8 * preset("micro").input[0]
    return (synth_freq_dataset(800, 4, seed=0, size=size),
            synth_freq_dataset(200, 4, seed=0, size=size, split="test"))


@pytest.fixture(scope="module")
def toy_config():
    return TrainConfig.desk(epochs=30, target_accuracy=0.95, seed=0)


@pytest.fixture(scope="module")
def cache():
    return FeatureCache()


@pytest.fixture(scope="module")
def trained(toy_data, toy_config, cache):
    model = instantiate(preset("micro", 4), seed=0)
    result = train(model, toy_data[0], toy_config, toy_data[1], cache)
    return result


# ---------------------------------------------------------------------------
# 1-3: accounting


@criterion(1, "parameter accounting")
@pytest.mark.parametrize("name,target,tol", [
    ("efun-variant-a", 5.3e6, 0.05), ("efun-variant-b", 5.6e6, 0.05), ("efun", 4.2e6, 0.10),
    ("efun-l", 6.2e6, 0.15), ("resfun", 10.4e6, 0.15),
])
def test_parameter_counts(name, target, tol):
    t = time.perf_counter()
    params = count_params(preset(name))
    assert time.perf_counter() - t < 1.0
    assert abs(params - target) <= tol * target, f"{name}: {params}"


@criterion(2, "MAC accounting")
@pytest.mark.parametrize("name,target,tol", [("efun", 850e6, 0.15), ("efun-l", 1600e6, 0.20)])
def test_mac_counts(name, target, tol):
    t = time.perf_counter()
    spec = preset(name)
    macs = count_flops(spec)
    assert time.perf_counter() - t < 1.0
    if name == "efun":
        assert spec.input == (28, 28, 192)
    assert abs(macs - target) <= tol * target, f"{name}: {macs}"


@criterion(3, "compression size table")
@pytest.mark.parametrize("spec,target", list(zip(PAPER_SPECS, (4.23e6, 3.99e6, 3.96e6, 3.93e6, 3.91e6))),
                         ids=str)
def test_pruned_totals(spec, target):
    total = pruned_param_count(efun_base(), spec)
    assert abs(total - target) <= 0.05e6, f"{spec}: {total}"


# ---------------------------------------------------------------------------
# 4: codec


@criterion(4, "DCT codec properties")
def test_codec_properties():
    t = time.perf_counter()
    plane = np.random.default_rng(0).uniform(0, 255, (800, 800))  # 100 x 100 blocks
    coeffs = blockwise_dct(plane)
    assert coeffs.shape[:2] == (100, 100)
    assert np.abs(blockwise_idct(coeffs) - plane).max() < 1e-4
    tiles = plane.reshape(100, 8, 100, 8).transpose(0, 2, 1, 3) - 128.0
    e_in = np.square(tiles).sum(axis=(2, 3))
    e_out = np.square(coeffs).sum(axis=(2, 3))
    assert np.max(np.abs(e_out - e_in) / e_in) < 1e-4
    assert not block_dct8(np.full((8, 8), 128.0)).any()
    img = np.random.default_rng(1).integers(0, 256, (224, 224, 3), dtype=np.uint8)
    assert preprocess(img).data.shape == (192, 28, 28)
    assert time.perf_counter() - t < 10.0


# ---------------------------------------------------------------------------
# 5: gradients


def _gradient_cases():
    g = np.random.default_rng(0)
    labels = np.array([0, 3, 2])
    rm, rv = g.normal(size=4), g.uniform(0.5, 2.0, size=4)
    relu_x = g.normal(size=(2, 3, 4, 4))
    relu_x[np.abs(relu_x) < 0.05] = 0.3
    cases = {
        "conv": (lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1),
                 [g.normal(size=(2, 3, 5, 5)), g.normal(size=(4, 3, 3, 3)), g.normal(size=4)]),
        "conv_strided": (lambda x, w: F.conv2d(x, w, stride=2, padding=2),
                         [g.normal(size=(2, 3, 6, 6)), g.normal(size=(2, 3, 5, 5))]),
        "conv_pointwise": (lambda x, w: F.conv2d(x, w), [g.normal(size=(2, 4, 3, 3)),
                                                         g.normal(size=(5, 4, 1, 1))]),
        "conv_depthwise": (lambda x, w: F.conv2d(x, w, stride=2, padding=1, groups=4),
                           [g.normal(size=(2, 4, 6, 6)), g.normal(size=(4, 1, 3, 3))]),
        "conv_grouped": (lambda x, w: F.conv2d(x, w, padding=1, groups=2),
                         [g.normal(size=(1, 4, 4, 4)), g.normal(size=(6, 2, 3, 3))]),
        "batchnorm_train": (lambda x, a, b: F.batchnorm2d(x, a, b, rm.copy(), rv.copy(), True),
                            [g.normal(size=(3, 4, 3, 3)), g.normal(size=4), g.normal(size=4)]),
        "batchnorm_eval": (lambda x, a, b: F.batchnorm2d(x, a, b, rm.copy(), rv.copy(), False),
                           [g.normal(size=(3, 4, 3, 3)), g.normal(size=4), g.normal(size=4)]),
        "swish": (F.swish, [g.normal(size=(2, 3, 4, 4))]),
        "sigmoid": (F.sigmoid, [g.normal(size=(2, 3, 4, 4))]),
        "relu": (F.relu, [relu_x]),
        "squeeze_excite": (F.squeeze_excite,
                           [g.normal(size=(2, 6, 3, 3)), g.normal(size=(2, 6, 1, 1)),
                            g.normal(size=2), g.normal(size=(6, 2, 1, 1)), g.normal(size=6)]),
        "stochastic_depth": (lambda a, b: F.stochastic_depth(a, b, 0.5, True,
                                                             np.random.default_rng(4)),
                             [g.normal(size=(6, 2, 3, 3)), g.normal(size=(6, 2, 3, 3))]),
        "global_avg_pool": (F.global_avg_pool, [g.normal(size=(2, 3, 4, 4))]),
        "linear": (F.linear, [g.normal(size=(3, 5)), g.normal(size=(4, 5)), g.normal(size=4)]),
        "softmax_cross_entropy": (lambda z: F.softmax_cross_entropy(z, labels),
                                  [g.normal(size=(3, 4))]),
        "add_broadcast": (add, [g.normal(size=(2, 3, 4)), g.normal(size=(3, 1))]),
        "mul_broadcast": (mul, [g.normal(size=(2, 3, 4)), g.normal(size=(1, 4))]),
        "reshape": (lambda x: reshape(x, (4, 6)), [g.normal(size=(2, 3, 4))]),
        "concat": (lambda a, b: concat([a, b], axis=1),
                   [g.normal(size=(2, 1, 3, 3)), g.normal(size=(2, 2, 3, 3))]),
        "upsample_nearest2": (upsample_nearest2, [g.normal(size=(1, 2, 3, 3))]),
    }
    return cases


@criterion(5, "gradient correctness")
def test_all_gradients():
    t = time.perf_counter()
    errors = {name: gradcheck(fn, arrays) for name, (fn, arrays) in _gradient_cases().items()}
    bad = {k: v for k, v in errors.items() if not v < GRAD_TOL}
    assert not bad, bad
    assert time.perf_counter() - t < 60.0


@criterion(5, "gradient correctness")
def test_block_gradient():
    from funnet.arch import ArchSpec, BlockSpec, Stage

    spec = ArchSpec("g", (4, 4, 8), (Stage(BlockSpec("MBConv", 3, 1, 8, 2, 0.25), 1),), 0, 3)
    model = instantiate(spec, 0).astype(np.float64).eval()
    x = np.random.default_rng(2).normal(size=(2, 8, 4, 4))
    assert gradcheck(lambda t: model(t), [x]) < GRAD_TOL


# ---------------------------------------------------------------------------
# 6: masking


@criterion(6, "mask/truncate equivalence")
def test_mask_truncate_equivalence():
    model = instantiate(preset("micro", 4), 0).eval()
    rng = np.random.default_rng(6)
    for _ in range(20):
        x = DctTensor(rng.normal(0, 80, (192, 12, 12)).astype(np.float32), FULL_SPEC)
        s = CompressionSpec(*(int(v) for v in rng.integers(0, 65, 3)))
        a = model(mask_channels(x, s).data[None]).data
        b = model(pad_to_full(truncate(x, s)).data[None]).data
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# 7-8: toy training and compression trend


@criterion(7, "toy-scale learning")
def test_micro_reaches_target(trained):
    assert len(trained.records) <= 30
    assert trained.final_test_top1 >= 0.95, trained.log_text


@criterion(7, "toy-scale learning")
def test_micro_run_deterministic(trained, toy_data, toy_config, cache):
    again = train(instantiate(preset("micro", 4), seed=0), toy_data[0],
                  replace(toy_config, epochs=1), toy_data[1], cache)
    assert again.records[0].line() == trained.records[0].line()


@criterion(8, "compression trend")
def test_sweep_trend(trained, toy_data, cache):
    feats = dct_features(toy_data[1], FULL_SPEC, cache)
    reports = compression_sweep(trained.model, feats, toy_data[1].labels, PAPER_SPECS)
    assert [r.channels_active for r in reports] == [192, 88, 64, 48, 24]
    assert all(r.accuracy is not None for r in reports)
    assert reports[0].accuracy >= reports[-1].accuracy


# ---------------------------------------------------------------------------
# 9: learnable front


@criterion(9, "learnable-front ordering")
def test_dct_front_matches_static(trained, toy_data, cache):
    lefun = attach_front(trained.model, "frozen", init="dct")
    assert evaluate(lefun, toy_data[1]) == evaluate(trained.model, toy_data[1], cache=cache)


@criterion(9, "learnable-front ordering")
def test_end_to_end_not_worse_than_frozen(trained, toy_data):
    cfg = TrainConfig.desk(epochs=LEFUN_EPOCHS, seed=0)
    _, frozen = run_lefun("frozen", trained.model, toy_data[0], cfg, toy_data[1])
    _, e2e = run_lefun("end_to_end", trained.model, toy_data[0], cfg, toy_data[1])
    assert e2e >= frozen, f"e2e {e2e:.4f} < frozen {frozen:.4f}"


# ---------------------------------------------------------------------------
# 10: determinism and serialization


@criterion(10, "determinism and serialization")
def test_identical_seeds_identical_logs(toy_data):
    sub = toy_data[0].subset(np.arange(64))
    cfg = TrainConfig.desk(epochs=2, seed=5, hflip=True)
    a = train(instantiate(preset("micro", 4), 5), sub, cfg, toy_data[1].subset(np.arange(32)))
    b = train(instantiate(preset("micro", 4), 5), sub, cfg, toy_data[1].subset(np.arange(32)))
    assert a.log_text == b.log_text
    assert WeightsFile(a.model, seed=5).to_bytes() == WeightsFile(b.model, seed=5).to_bytes()


@criterion(10, "determinism and serialization")
def test_weights_round_trip(trained, tmp_path):
    from funnet.weights import load, save

    save(tmp_path / "a.funw", trained.model)
    loaded = load(tmp_path / "a.funw")
    save(tmp_path / "b.funw", loaded.model)
    assert (tmp_path / "a.funw").read_bytes() == (tmp_path / "b.funw").read_bytes()
