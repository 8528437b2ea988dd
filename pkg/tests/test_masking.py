import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sparsepost.errors import ConfigError, ShapeError, UsageError
from sparsepost.masking import (
    MaskProvenance,
    PruneSchedule,
    SparsityMask,
    apply_mask,
    iterative_prune,
    iterative_prune_rewind,
    layerwise_rates_of,
    prune_lowest_magnitude,
    random_global_mask,
    random_layerwise_mask,
)
from sparsepost.network import LayerSpec, NetworkSpec, ParamVector, init_params
from sparsepost.store import synth_blobs
from sparsepost.streams import derive_rng
from sparsepost.training import SchedulerSpec, SGDConfig


def tiny_sgd(epochs=2):
    return SGDConfig(learning_rate=0.05, momentum=0.9, weight_decay=0.0, epochs=epochs,
                     batch_size=16, scheduler=SchedulerSpec.constant(), seed=0)


@pytest.fixture
def blob_data():
    return synth_blobs(3, 20, 4, 0.05, seed=4)


@pytest.fixture
def net():
    return NetworkSpec.mlp(4, [6], 3)


class TestApplyMask:
    def test_identity(self, net):
        p = init_params(net, derive_rng(0, "p"))
        out = apply_mask(p, SparsityMask.full(net))
        assert np.array_equal(out.values, p.values)

    def test_all_zeros(self, net):
        p = init_params(net, derive_rng(0, "p"))
        out = apply_mask(p, SparsityMask(np.zeros(net.param_count, dtype=np.uint8), net.layout()))
        assert np.array_equal(out.values, np.zeros(net.param_count))

    def test_idempotent(self, net):
        p = init_params(net, derive_rng(1, "p"))
        m = random_global_mask(net.param_count, 0.5, derive_rng(1, "m"), offsets=net.layout())
        once = apply_mask(p, m)
        twice = apply_mask(once, m)
        assert np.array_equal(once.values, twice.values)

    def test_length_mismatch(self, net):
        p = init_params(net, derive_rng(0, "p"))
        with pytest.raises(ShapeError):
            apply_mask(p, SparsityMask(np.ones(net.param_count + 1, dtype=np.uint8)))


class TestPruneLowestMagnitude:
    def test_zero_fraction_unchanged(self, net):
        p = init_params(net, derive_rng(2, "p"))
        m = SparsityMask.full(net)
        out = prune_lowest_magnitude(p, m, 0.0)
        assert np.array_equal(out.bits, m.bits)

    def test_small_example_keeps_largest(self):
        # params (0.5, -0.1, 0.3, 0.05), all active, pi = 0.5:
        # sort-by-|.| oracle prunes 0.05 and -0.1, keeps 0.5 and 0.3
        net = NetworkSpec((LayerSpec(1, 2, "identity"),), 2)  # K = 1*2 + 2 = 4
        p = ParamVector(np.array([0.5, -0.1, 0.3, 0.05]), net.layout())
        keep_oracle = set(np.argsort(np.abs(p.values), kind="stable")[2:])
        out = prune_lowest_magnitude(p, SparsityMask.full(net), 0.5)
        assert set(np.flatnonzero(out.bits)) == keep_oracle == {0, 2}

    def test_repeated_rounds_match_floor_rule(self):
        # Brute-force oracle: each round removes floor(0.2 * active).
        k = 10_000
        active = k
        for _ in range(10):
            active -= int(math.floor(0.2 * active))
        assert active == 1076  # frozen from the floor-rule oracle

        net = NetworkSpec.mlp(999, [], 10)
        assert net.param_count == k
        p = ParamVector(derive_rng(5, "big").standard_normal(k), net.layout())
        m = SparsityMask.full(net)
        for _ in range(10):
            m = prune_lowest_magnitude(p, m, 0.2)
        assert m.active_count() == active

    def test_tie_break_lowest_index_first(self):
        net = NetworkSpec.mlp(3, [], 1)  # K = 4
        p = ParamVector(np.array([0.2, 0.2, 0.2, 0.2]), net.layout())
        out = prune_lowest_magnitude(p, SparsityMask.full(net), 0.5)
        assert list(out.bits) == [0, 0, 1, 1]

    def test_never_reactivates(self, net):
        p = init_params(net, derive_rng(3, "p"))
        m = random_global_mask(net.param_count, 0.3, derive_rng(3, "m"), offsets=net.layout())
        out = prune_lowest_magnitude(p, m, 0.25)
        assert np.all(out.bits <= m.bits)

    def test_fraction_validated(self, net):
        p = init_params(net, derive_rng(0, "p"))
        with pytest.raises(ConfigError):
            prune_lowest_magnitude(p, SparsityMask.full(net), 1.0)

    @given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.8))
    @settings(max_examples=25, deadline=None)
    def test_prune_count_property(self, seed, fraction):
        net = NetworkSpec.mlp(7, [5], 3)
        p = ParamVector(derive_rng(seed, "p").standard_normal(net.param_count), net.layout())
        m = random_global_mask(net.param_count, 0.2, derive_rng(seed, "m"), offsets=net.layout())
        out = prune_lowest_magnitude(p, m, fraction)
        expected_removed = int(math.floor(fraction * m.active_count()))
        assert m.active_count() - out.active_count() == expected_removed
        assert np.all(out.bits <= m.bits)


class TestIterativePrune:
    def test_single_round_no_prune(self, net, blob_data):
        # floor(pi * K) == 0 leaves the full mask
        schedule = PruneSchedule(1.0 / (net.param_count + 1), 1, 1)
        stages = iterative_prune(net, blob_data, schedule, tiny_sgd(1), seed=6)
        assert len(stages) == 2
        assert stages[1].mask.active_count() == net.param_count

    def test_nested_and_monotone(self, net, blob_data):
        schedule = PruneSchedule(0.3, 4, 1)
        stages = iterative_prune(net, blob_data, schedule, tiny_sgd(1), seed=7)
        assert len(stages) == 5
        for a, b in zip(stages, stages[1:]):
            assert np.all(b.mask.bits <= a.mask.bits)  # nestedness
            assert b.mask.sparsity() >= a.mask.sparsity()
        assert stages[0].mask.active_count() == net.param_count

    def test_params_live_inside_mask(self, net, blob_data):
        stages = iterative_prune(net, blob_data, PruneSchedule(0.3, 3, 1), tiny_sgd(1), seed=8)
        for stage in stages:
            off_mask = stage.params.values[stage.mask.bits == 0]
            assert np.array_equal(off_mask, np.zeros_like(off_mask))

    def test_ip_final_sparsity_mlp200_rule(self):
        # composition of the floor rule on K = 199,210 with pi=0.2, T=10
        active = 199_210
        for _ in range(10):
            active -= int(math.floor(0.2 * active))
        assert active == 21_392
        assert 1 - active / 199_210 == pytest.approx(0.893, abs=5e-4)


class TestIterativePruneRewind:
    def test_degenerate_equals_ip(self, net, blob_data):
        schedule = PruneSchedule(1.0 / (net.param_count + 1), 1, 2)
        ip = iterative_prune(net, blob_data, schedule, tiny_sgd(), seed=9)
        ipr, theta0 = iterative_prune_rewind(net, blob_data, schedule, tiny_sgd(), seed=9)
        assert np.array_equal(ip[1].params.values, ipr[1].params.values)
        assert np.array_equal(ip[0].params.values, theta0.values)

    def test_each_round_starts_from_rewound_init(self, net, blob_data, monkeypatch):
        # instrumentation oracle: record each training round's start vector
        from sparsepost.training import sgd_train as real_sgd_train

        calls = []

        def spy(net_, params0, mask, dataset, config):
            calls.append((params0.values.copy(), mask.bits.copy()))
            return real_sgd_train(net_, params0, mask, dataset, config)

        import sparsepost.training as training_mod

        monkeypatch.setattr(training_mod, "sgd_train", spy)
        stages, theta0 = iterative_prune_rewind(
            net, blob_data, PruneSchedule(0.3, 3, 1), tiny_sgd(1), seed=10
        )
        assert len(calls) == 3
        for start, bits in calls:
            assert np.array_equal(start, theta0.values * bits)

    def test_final_masks_recorded_with_provenance_fields(self):
        prov = MaskProvenance("IPR", seed=3, source_iterations=4)
        assert prov.method == "IPR"
        with pytest.raises(ConfigError):
            MaskProvenance("NOT_A_METHOD", seed=1)


class TestRandomLayerwiseMask:
    def test_zero_rates_full(self, net):
        m = random_layerwise_mask(net, [0.0, 0.0], derive_rng(0, "m"))
        assert m.active_count() == net.param_count

    def test_unit_rates_empty(self, net):
        m = random_layerwise_mask(net, [1.0, 1.0], derive_rng(0, "m"))
        assert m.active_count() == 0

    def test_exact_counts_100(self):
        net = NetworkSpec.mlp(9, [], 10)  # single layer, K = 100
        assert net.param_count == 100
        for seed in range(5):
            m = random_layerwise_mask(net, [0.9], derive_rng(seed, "m"))
            assert m.active_count() == 10

    def test_positions_uniform_chi_square(self):
        # statistical oracle: 10,000 draws, chi-square over the 100 positions
        net = NetworkSpec.mlp(9, [], 10)
        counts = np.zeros(100)
        rng = derive_rng(42, "chi")
        for _ in range(10_000):
            counts += random_layerwise_mask(net, [0.9], rng).bits
        expected = 10_000 * 10 / 100
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        p = stats.chi2.sf(chi2, df=99)
        assert p > 0.01

    def test_rate_validation(self, net):
        with pytest.raises(ConfigError):
            random_layerwise_mask(net, [0.5, 1.5], derive_rng(0, "m"))
        with pytest.raises(ShapeError):
            random_layerwise_mask(net, [0.5], derive_rng(0, "m"))


class TestLayerwiseRates:
    def test_full_mask_zero_rates(self, net):
        assert np.array_equal(layerwise_rates_of(SparsityMask.full(net)), np.zeros(2))

    def test_zero_mask_unit_rates(self, net):
        m = SparsityMask(np.zeros(net.param_count, dtype=np.uint8), net.layout())
        assert np.array_equal(layerwise_rates_of(m), np.ones(2))

    def test_round_trip_preserves_per_layer_counts(self, net):
        m = random_layerwise_mask(net, [0.4, 0.7], derive_rng(11, "m"))
        rates = layerwise_rates_of(m)
        m2 = random_layerwise_mask(net, rates, derive_rng(12, "m"))
        for s in net.layout():
            k_l = s.weight_len + s.bias_len
            block = slice(s.weight_offset, s.weight_offset + k_l)
            assert m.bits[block].sum() == m2.bits[block].sum()

    def test_offsets_required(self):
        m = SparsityMask(np.ones(10, dtype=np.uint8))
        with pytest.raises(UsageError):
            layerwise_rates_of(m)


class TestRandomGlobalMask:
    def test_zero_rate_full(self):
        m = random_global_mask(50, 0.0, derive_rng(0, "m"))
        assert m.active_count() == 50

    def test_fmnist_scale_count(self):
        m = random_global_mask(199_210, 0.95, derive_rng(1, "m"))
        assert m.active_count() == 9_961

    def test_two_seeds_differ_same_count(self):
        a = random_global_mask(400, 0.5, derive_rng(1, "m"))
        b = random_global_mask(400, 0.5, derive_rng(2, "m"))
        assert a.active_count() == b.active_count() == 200
        assert not np.array_equal(a.bits, b.bits)

    def test_determinism(self):
        a = random_global_mask(300, 0.37, derive_rng(9, "m"))
        b = random_global_mask(300, 0.37, derive_rng(9, "m"))
        assert np.array_equal(a.bits, b.bits)

    @given(st.integers(1, 2000), st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_exact_count_property(self, k, rate):
        m = random_global_mask(k, rate, derive_rng(k, "m"))
        assert m.active_count() == int(math.floor((1.0 - rate) * k + 0.5))

    def test_rate_validated(self):
        with pytest.raises(ConfigError):
            random_global_mask(10, 1.2, derive_rng(0, "m"))


class TestMaskPacking:
    def test_pack_unpack_round_trip(self):
        bits = derive_rng(5, "bits").integers(0, 2, 77).astype(np.uint8)
        m = SparsityMask(bits)
        again = SparsityMask.unpack(m.pack(), 77)
        assert np.array_equal(again.bits, bits)

    def test_lsb_is_lowest_coordinate(self):
        bits = np.zeros(9, dtype=np.uint8)
        bits[0] = 1
        assert SparsityMask(bits).pack()[0] & 1 == 1
