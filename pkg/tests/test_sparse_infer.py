import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsepost.errors import ConfigError, ShapeError, UsageError
from sparsepost.masking import MaskProvenance, SparsityMask, random_global_mask
from sparsepost.metrics import posterior_predictive
from sparsepost.network import Minibatch, NetworkSpec, ParamVector, forward, init_params, softmax
from sparsepost.sampling import ChainGroup, PosteriorEnsemble
from sparsepost.sparse_infer import (
    CSRMatrix,
    SparseModel,
    bench,
    ensemble_predict_sparse,
    spmv_forward,
    spmv_logits,
    to_csr,
)
from sparsepost.streams import derive_rng


@pytest.fixture
def net():
    return NetworkSpec.mlp(6, [5, 4], 3)


def random_ensemble(net, sparsity, num_samples, seed, chains=1):
    groups = []
    for c in range(chains):
        mask = random_global_mask(net.param_count, sparsity, derive_rng(seed, "m", c),
                                  offsets=net.layout())
        rng = derive_rng(seed, "vals", c)
        samples = rng.standard_normal((num_samples, mask.active_count()))
        groups.append(ChainGroup(mask, samples, MaskProvenance("RGM", seed)))
    return PosteriorEnsemble(net, groups)


class TestCSRMatrix:
    def test_full_mask_nnz(self, net):
        p = init_params(net, derive_rng(0, "p"))
        csr = to_csr(p, SparsityMask.full(net), 0)
        assert csr.nnz == 6 * 5
        assert csr.rows == 5 and csr.cols == 6

    def test_zero_mask_matvec_is_zero(self, net):
        p = init_params(net, derive_rng(0, "p"))
        mask = SparsityMask(np.zeros(net.param_count, dtype=np.uint8), net.layout())
        csr = to_csr(p, mask, 0)
        assert csr.nnz == 0
        assert np.array_equal(csr.matvec(np.ones(6)), np.zeros(5))

    def test_densify_round_trip(self, net):
        p = init_params(net, derive_rng(1, "p"))
        mask = random_global_mask(net.param_count, 0.5, derive_rng(1, "m"), offsets=net.layout())
        for layer in range(3):
            csr = to_csr(p, mask, layer)
            l, s = net.layers[layer], net.layout()[layer]
            dense = (p.values * mask.bits)[s.weight_offset:s.weight_offset + s.weight_len]
            dense = dense.reshape(l.in_dim, l.out_dim).T
            assert np.array_equal(csr.densify(), dense)

    def test_structural_nonzeros_survive_zero_values(self, net):
        p = ParamVector.zeros(net)
        csr = to_csr(p, SparsityMask.full(net), 1)
        assert csr.nnz == 5 * 4
        assert np.array_equal(csr.vals, np.zeros(20))

    def test_invariants_rejected(self):
        with pytest.raises(ShapeError):
            CSRMatrix(2, 3, np.array([0, 1]), np.array([0]), np.array([1.0]))  # bad row_ptr len
        with pytest.raises(ShapeError):
            CSRMatrix(2, 3, np.array([0, 2, 1]), np.array([0, 1]), np.array([1.0, 2.0]))
        with pytest.raises(ShapeError):
            CSRMatrix(1, 3, np.array([0, 2]), np.array([1, 1]), np.array([1.0, 2.0]))
        with pytest.raises(ShapeError):
            CSRMatrix(1, 3, np.array([0, 1]), np.array([7]), np.array([1.0]))

    @given(st.integers(0, 10_000), st.floats(0.0, 0.95))
    @settings(max_examples=25, deadline=None)
    def test_structure_property(self, seed, rate):
        net = NetworkSpec.mlp(7, [6], 4)
        p = init_params(net, derive_rng(seed, "p"))
        mask = random_global_mask(net.param_count, rate, derive_rng(seed, "m"),
                                  offsets=net.layout())
        csr = to_csr(p, mask, 0)
        assert csr.row_ptr[0] == 0
        assert csr.row_ptr[-1] == csr.nnz == len(csr.col_idx) == len(csr.vals)
        assert np.all(np.diff(csr.row_ptr) >= 0)
        s = net.layout()[0]
        assert csr.nnz == int(mask.bits[s.weight_offset:s.weight_offset + s.weight_len].sum())

    def test_value_swap_changes_product(self, net):
        p = init_params(net, derive_rng(2, "p"))
        mask = SparsityMask.full(net)
        model = SparseModel.from_params(net, p, mask)
        x = derive_rng(3, "x").random(6)
        before = model.layers[0].csr.matvec(x).copy()
        swapped = np.zeros(mask.active_count())
        model.load_sample(swapped)
        after = model.layers[0].csr.matvec(x)
        assert not np.array_equal(before, after)
        assert np.array_equal(after, np.zeros(5))


class TestSpmvForward:
    def test_dense_equivalence_mlp200_shape(self):
        net = NetworkSpec.mlp(784, [200, 200], 10)
        p = init_params(net, derive_rng(4, "p"))
        mask = random_global_mask(net.param_count, 0.95, derive_rng(4, "m"), offsets=net.layout())
        model = SparseModel.from_params(net, p, mask)
        x = derive_rng(5, "x").random(784)
        sparse_logits = spmv_logits(model, x)
        dense_logits, _ = forward(net, p, mask, Minibatch(x[None, :], np.array([0])))
        assert np.max(np.abs(sparse_logits - dense_logits[0])) <= 1e-12

    def test_all_zero_mask_uniform_softmax(self, net):
        p = init_params(net, derive_rng(6, "p"))
        mask = SparsityMask(np.zeros(net.param_count, dtype=np.uint8), net.layout())
        probs = spmv_forward(SparseModel.from_params(net, p, mask), np.ones(6))
        assert np.allclose(probs, 1.0 / 3, atol=1e-15)

    def test_single_nonzero_picks_one_coordinate(self):
        net = NetworkSpec.mlp(4, [], 2)
        p = ParamVector.zeros(net)
        p.values[2] = 3.0  # weight (in=1 -> out=0) in (in,out) layout: index 1*2+0
        bits = np.zeros(net.param_count, dtype=np.uint8)
        bits[2] = 1
        mask = SparsityMask(bits, net.layout())
        model = SparseModel.from_params(net, p, mask)
        x = np.array([10.0, 2.0, 30.0, 40.0])
        logits = spmv_logits(model, x)
        assert np.array_equal(logits, np.array([3.0 * 2.0, 0.0]))

    def test_input_length_validated(self, net):
        p = init_params(net, derive_rng(7, "p"))
        model = SparseModel.from_params(net, p, SparsityMask.full(net))
        with pytest.raises(ShapeError):
            spmv_forward(model, np.ones(7))


class TestEnsemblePredictSparse:
    def test_single_sample_equivalence(self, net):
        ens = random_ensemble(net, 0.5, 1, seed=8)
        x = derive_rng(9, "x").random((5, 6))
        sparse = ensemble_predict_sparse(ens, x)
        dense = posterior_predictive(ens, x)
        assert np.max(np.abs(sparse.probs - dense.probs)) <= 1e-10

    def test_matches_dense_predictive(self, net):
        ens = random_ensemble(net, 0.6, 4, seed=10, chains=2)
        x = derive_rng(11, "x").random((7, 6))
        sparse = ensemble_predict_sparse(ens, x)
        dense = posterior_predictive(ens, x)
        assert np.max(np.abs(sparse.probs - dense.probs)) <= 1e-10

    def test_empty_ensemble_rejected(self, net):
        with pytest.raises(UsageError):
            ensemble_predict_sparse(PosteriorEnsemble(net, []), np.zeros((1, 6)))


class TestBench:
    def test_report_structure_and_self_speedup(self, net):
        dense = random_ensemble(net, 0.0, 3, seed=12)
        sparse = random_ensemble(net, 0.9, 3, seed=13)
        report = bench(dense, [sparse], n_inputs=4, repetitions=3)
        assert report.repetitions == 3
        assert len(report.rows) == 3  # dense, one sparse, Full-OPT
        assert report.rows[0].speedup == 1.0
        assert all(r.latency_s > 0 for r in report.rows)
        assert report.rows[-1].method == "Full-OPT"
        assert report.rows[-1].num_samples == 1
        assert "single-thread" in report.hardware

    def test_requires_three_repetitions(self, net):
        dense = random_ensemble(net, 0.0, 2, seed=14)
        with pytest.raises(ConfigError):
            bench(dense, [], n_inputs=2, repetitions=2)
