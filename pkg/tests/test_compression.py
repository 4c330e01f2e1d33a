import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnet.arch import ArchSpec, BlockSpec, Stage, efun_base, instantiate
from funnet.compression import (
    CSV_HEADER,
    PAPER_SPECS,
    channel_mask,
    compression_sweep,
    mask_channels,
    prune_first_block,
    pruned_param_count,
    sweep_csv,
)
from funnet.dct_codec import FULL_SPEC, CompressionSpec, DctTensor, pad_to_full, truncate
from funnet.errors import DimensionError, SpecError

PUBLISHED_TOTALS = {(64, 64, 64): 4.23e6, (64, 12, 12): 3.99e6, (44, 10, 10): 3.96e6,
                    (32, 8, 8): 3.93e6, (14, 5, 5): 3.91e6}
FROZEN_TOTALS = {(64, 64, 64): 4_240_464, (64, 12, 12): 3_977_760, (44, 10, 10): 3_935_568,
                 (32, 8, 8): 3_911_280, (14, 5, 5): 3_880_608}

keeps = st.tuples(st.integers(0, 64), st.integers(0, 64), st.integers(0, 64))


def small_spec():
    return ArchSpec(
        name="small",
        input=(4, 4, 192),
        stages=(Stage(BlockSpec("MBConv", 3, 1, 16, 2, 0.25), 1),
                Stage(BlockSpec("MBConv", 3, 2, 16, 2, 0.25), 1)),
        head_width=32,
        num_classes=3,
    )


def _features(n=4, seed=0):
    return np.random.default_rng(seed).normal(0, 50, (n, 192, 4, 4)).astype(np.float32)


class TestMask:
    def test_full_spec_is_identity(self):
        x = _features()
        np.testing.assert_array_equal(mask_channels(x, FULL_SPEC), x)

    def test_zero_spec_is_zero(self):
        assert not mask_channels(_features(), CompressionSpec(0, 0, 0)).any()

    def test_mask_layout(self):
        m = channel_mask(CompressionSpec(14, 5, 5))
        assert m.sum() == 24
        assert m[:14].all() and not m[14:64].any()
        assert m[64:69].all() and not m[69:128].any()
        assert m[128:133].all() and not m[133:].any()

    def test_dct_tensor_input(self):
        x = DctTensor(_features(1)[0], FULL_SPEC)
        out = mask_channels(x, CompressionSpec(10, 2, 2))
        assert isinstance(out, DctTensor) and out.spec.is_full
        np.testing.assert_array_equal(out.data, pad_to_full(truncate(x, CompressionSpec(10, 2, 2))).data)

    def test_rejects_truncated_tensor(self):
        x = truncate(DctTensor(_features(1)[0], FULL_SPEC), CompressionSpec(10, 2, 2))
        with pytest.raises(DimensionError):
            mask_channels(x, FULL_SPEC)

    def test_rejects_wrong_channels(self):
        with pytest.raises(DimensionError):
            mask_channels(np.zeros((2, 100, 4, 4)), FULL_SPEC)

    def test_rejects_non_spec(self):
        with pytest.raises(SpecError):
            mask_channels(_features(), (64, 64, 64))

    @settings(max_examples=40, deadline=None)
    @given(keeps)
    def test_idempotent(self, k):
        s = CompressionSpec(*k)
        x = _features(2)
        once = mask_channels(x, s)
        np.testing.assert_array_equal(mask_channels(once, s), once)

    @settings(max_examples=40, deadline=None)
    @given(keeps, keeps)
    def test_composition_is_intersection(self, a, b):
        x = _features(1)
        both = mask_channels(mask_channels(x, CompressionSpec(*a)), CompressionSpec(*b))
        meet = CompressionSpec(*(min(p, q) for p, q in zip(a, b)))
        np.testing.assert_array_equal(both, mask_channels(x, meet))

    @settings(max_examples=40, deadline=None)
    @given(keeps)
    def test_matches_truncate_then_pad(self, k):
        s = CompressionSpec(*k)
        x = DctTensor(_features(1)[0], FULL_SPEC)
        np.testing.assert_array_equal(mask_channels(x, s).data, pad_to_full(truncate(x, s)).data)


class TestMaskedModelEquivalence:
    def test_twenty_random_pairs(self):
        model = instantiate(small_spec(), 0).eval()
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = DctTensor(rng.normal(0, 60, (192, 4, 4)).astype(np.float32), FULL_SPEC)
            s = CompressionSpec(*(int(v) for v in rng.integers(0, 65, 3)))
            a = model(mask_channels(x.data, s)[None]).data
            b = model(pad_to_full(truncate(x, s)).data[None]).data
            np.testing.assert_array_equal(a, b)


class TestPrune:
    @pytest.mark.parametrize("spec", PAPER_SPECS, ids=str)
    def test_published_totals(self, spec):
        total = pruned_param_count(efun_base(), spec)
        assert total == FROZEN_TOTALS[spec.keeps]
        assert abs(total - PUBLISHED_TOTALS[spec.keeps]) <= 0.05e6

    def test_totals_decrease(self):
        totals = [pruned_param_count(efun_base(), s) for s in PAPER_SPECS]
        assert totals == sorted(totals, reverse=True)

    def test_pruned_model_counts(self):
        model = instantiate(small_spec(), 0)
        s = CompressionSpec(20, 6, 6)
        pruned, delta = prune_first_block(model, s)
        assert pruned.in_channels == 32
        assert pruned.num_parameters() == pruned_param_count(model, s)
        assert delta == pruned.num_parameters() - model.num_parameters() < 0

    def test_full_spec_returns_same(self):
        model = instantiate(small_spec(), 0)
        pruned, delta = prune_first_block(model, FULL_SPEC)
        assert pruned is model and delta == 0

    def test_pruned_weights_are_slices(self):
        model = instantiate(small_spec(), 0)
        s = CompressionSpec(20, 6, 6)
        pruned, _ = prune_first_block(model, s)
        cols = s.channel_indices()
        w = model.blocks[0].expand.conv.weight.data
        np.testing.assert_array_equal(pruned.blocks[0].expand.conv.weight.data, w[:64][:, cols])
        np.testing.assert_array_equal(pruned.fc.weight.data, model.fc.weight.data)
        np.testing.assert_array_equal(pruned._buffers["input_mean"],
                                      model._buffers["input_mean"][cols])

    def test_pruned_forward(self):
        model = instantiate(small_spec(), 0).eval()
        s = CompressionSpec(20, 6, 6)
        pruned, _ = prune_first_block(model, s)
        x = _features(2)[:, s.channel_indices()]
        assert pruned.eval()(x).shape == (2, 3)

    def test_requires_full_model(self):
        model = instantiate(small_spec().with_input_channels(32), 0)
        with pytest.raises(DimensionError):
            prune_first_block(model, CompressionSpec(10, 1, 1))


class TestSweep:
    def test_rows_and_csv(self):
        model = instantiate(small_spec(), 0)
        x = _features(6)
        labels = np.array([0, 1, 2, 0, 1, 2])
        reports = compression_sweep(model, x, labels, PAPER_SPECS, batch_size=4)
        assert [r.spec for r in reports] == list(PAPER_SPECS)
        assert all(0.0 <= r.accuracy <= 1.0 for r in reports)
        text = sweep_csv(reports)
        lines = text.strip().split("\n")
        assert lines[0] == CSV_HEADER and len(lines) == 6
        assert lines[-1].startswith("14,5,5,24,")

    def test_row_without_accuracy(self):
        from funnet.compression import MaskReport

        assert MaskReport(FULL_SPEC, 192, None, 10).row() == "64,64,64,192,,10"
