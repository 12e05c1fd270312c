import numpy as np
import pytest

import partfuse as pf

from conftest import rand_net


class TestCountParams:
    def test_dense_layer_counts_literal_nonzeros(self):
        w0 = np.array([[1.0, 0.0], [2.0, 3.0], [0.0, 0.0]])
        net = pf.DenseNetwork(
            2, (3,), 2, (w0, np.ones((2, 3))), (np.zeros(3), np.zeros(2)),
            pf.ActivationKind.RELU,
        )
        report = pf.count_params(net)
        assert report.per_layer[0] == (6, 3)
        assert report.per_layer[1] == (6, 6)
        assert report.total_nonzero == 9

    def test_ensemble_hidden_layer_is_block_diagonal(self):
        a, b = rand_net((4, 10, 10, 3), seed=1), rand_net((4, 10, 10, 3), seed=2)
        ens = pf.make_ensemble(a, b, 0.5)
        report = pf.count_params(ens)
        assert report.per_layer[1] == (400, 200)  # 2 * 10 * 10 nonzero

    def test_partial_fusion_factor(self):
        a, b = rand_net((6, 8, 8, 4), seed=3), rand_net((6, 8, 8, 4), seed=4)
        fused = pf.partial_fuse(a, b, pf.FusionConfig(lam=0.5, alpha=0.5))
        report = pf.count_params(fused)
        want = pf.theoretical_counts(0.5, 8, 8, "partial-fusion")[0]
        assert report.per_layer[1][1] == int(want)

    def test_ratio_vs_reference(self):
        net = rand_net((4, 6, 3), seed=5)
        base = pf.count_params(net).total_nonzero
        report = pf.count_params(net, reference_nonzero=base)
        assert report.ratio_vs_single == pytest.approx(1.0)


class TestTheoreticalCounts:
    def test_alpha_half_reference_values(self):
        nm = 100 * 100
        assert pf.theoretical_counts(0.5, 100, 100, "pruning") == (1.125 * nm, 1.25 * nm)
        assert pf.theoretical_counts(0.5, 100, 100, "clustering") == (1.125 * nm, 1.75 * nm)
        assert pf.theoretical_counts(0.5, 100, 100, "partial-fusion") == (1.75 * nm, 1.75 * nm)

    def test_alpha_zero(self):
        nm = 50 * 40
        best, worst = pf.theoretical_counts(0.0, 50, 40, "pruning")
        assert best == pytest.approx(0.5 * nm)  # half the single model
        assert worst == pytest.approx(1.0 * nm)
        pfu = pf.theoretical_counts(0.0, 50, 40, "partial-fusion")
        assert pfu == (nm, nm)

    def test_alpha_one_everything_doubles(self):
        nm = 30 * 20
        for method in ("pruning", "clustering", "partial-fusion"):
            best, worst = pf.theoretical_counts(1.0, 30, 20, method)
            assert best == pytest.approx(2 * nm)
            assert worst == pytest.approx(2 * nm)

    def test_invalid_method(self):
        with pytest.raises(ValueError):
            pf.theoretical_counts(0.5, 10, 10, "magic")


class TestBracketing:
    # the balanced best-case formulas are scenario counts, not lower bounds:
    # at tiny widths, anti-correlated per-layer splits undercut them by a few
    # entries.  This test asserts the provable envelope; the scenario-level
    # bracket runs at realistic width on trained parents in the acceptance
    # suite, where the balance assumption holds.
    def test_counts_inside_provable_envelope(self, rng):
        alpha, n = 0.5, 8
        true_min_prune = 2 * alpha * n * n  # one model fully kept below, fully cut above
        for seed in range(10):
            a = rand_net((5, 8, 8, 3), seed=300 + seed)
            b = rand_net((5, 8, 8, 3), seed=400 + seed)
            ens = pf.make_ensemble(a, b, 0.5)
            widths = (12, 12)
            pruned = pf.unstructured_prune(
                ens, pf.PruneSpec(widths, pf.PruneMethod.UNSTRUCTURED, lam=0.5)
            )
            data = np.random.default_rng(seed).normal(size=(40, 5))
            clustered = pf.cluster_prune(
                ens, pf.PruneSpec(widths, pf.PruneMethod.CLUSTER, lam=0.5), data, restarts=20
            )
            _, worst = pf.theoretical_counts(alpha, n, n, "pruning")
            count = pf.count_params(pruned).per_layer[1][1]
            assert true_min_prune - 1e-9 <= count <= worst + 1e-9
            _, worst_c = pf.theoretical_counts(alpha, n, n, "clustering")
            count_c = pf.count_params(clustered).per_layer[1][1]
            assert count_c <= worst_c + 1e-9


class TestSimilarityStats:
    def test_identical_nets_cross_nn_zero(self, rng):
        net = rand_net((4, 6, 3), seed=6)
        data = rng.normal(size=(50, 4))
        rep = pf.similarity_stats(net, net, data, 1)
        np.testing.assert_allclose(rep.values["nn_cross_ab"], 0.0, atol=1e-12)
        np.testing.assert_allclose(rep.values["nn_cross_ba"], 0.0, atol=1e-12)

    def test_hand_computed_one_dimensional_case(self):
        # three neurons whose activation traces are the scalars 0, 3, 10
        w0 = np.array([[0.0], [0.0], [0.0]])
        b0 = np.array([0.0, 3.0, 10.0])
        net = pf.DenseNetwork(
            1, (3,), 2, (w0, np.ones((2, 3))), (b0, np.zeros(2)), pf.ActivationKind.IDENTITY
        )
        rep = pf.similarity_stats(net, net, np.zeros((1, 1)), 1)
        np.testing.assert_allclose(rep.values["nn_within_a"], [3.0, 3.0, 7.0])
        np.testing.assert_allclose(rep.values["mean_within_a"], [6.5, 5.0, 8.5])

    def test_nn_below_mean_and_difference_nonnegative(self, rng):
        a, b = rand_net((5, 7, 3), seed=7), rand_net((5, 7, 3), seed=8)
        rep = pf.similarity_stats(a, b, rng.normal(size=(60, 5)), 1)
        for which in ("within_a", "within_b", "cross_ab", "cross_ba"):
            assert np.all(rep.values[f"nn_{which}"] <= rep.values[f"mean_{which}"] + 1e-12)
        for key, diff in rep.difference.items():
            assert diff >= -1e-12

    def test_cross_stats_are_transposes(self, rng):
        a, b = rand_net((5, 7, 3), seed=9), rand_net((5, 6, 3), seed=10)
        data = rng.normal(size=(50, 5))
        rep = pf.similarity_stats(a, b, data, 1)
        fa, _ = pf.features_activation(a, data, 1)
        fb, _ = pf.features_activation(b, data, 1)
        d = np.sqrt(pf.cost_matrix(fa, fb))
        np.testing.assert_allclose(rep.values["nn_cross_ab"], d.min(axis=1), atol=1e-12)
        np.testing.assert_allclose(rep.values["nn_cross_ba"], d.T.min(axis=1), atol=1e-12)


class TestTradeoffSweep:
    def _pair(self):
        return rand_net((5, 6, 6, 3), seed=11), rand_net((5, 6, 6, 3), seed=12)

    def _eval_data(self, rng):
        return pf.LabeledDataset(rng.normal(size=(40, 5)), rng.integers(0, 3, size=40))

    def test_alpha_one_matches_ensemble_accuracy(self, rng):
        a, b = self._pair()
        data = self._eval_data(rng)
        records = pf.tradeoff_sweep(a, b, [1.0], [0.5], ["partial-ot"], data)
        ens_acc = pf.evaluate_accuracy(pf.make_ensemble(a, b, 0.5), data)
        assert records[0].accuracy == ens_acc

    def test_widths_ascend_with_alpha(self, rng):
        a, b = self._pair()
        data = self._eval_data(rng)
        records = pf.tradeoff_sweep(a, b, [0.0, 0.5, 1.0], [0.5], ["partial-ot"], data)
        widths = [r.widths for r in records]
        for lo, hi in zip(widths, widths[1:]):
            assert all(h >= l for l, h in zip(lo, hi))

    def test_grid_order_and_row_count(self, rng):
        a, b = self._pair()
        data = self._eval_data(rng)
        feature_data = rng.normal(size=(40, 5))
        alphas = [0.0, 0.5, 1.0]
        lams = [0.25, 0.75]
        records = pf.tradeoff_sweep(
            a, b, alphas, lams, ["partial-ot", "prune"], data,
            feature_data=feature_data, cluster_restarts=10,
        )
        assert len(records) == 2 * 3 * 2
        assert [r.method for r in records[:6]] == ["partial-ot"] * 6
        assert [r.lam for r in records[:2]] == [0.25, 0.75]

    def test_error_rows_keep_schema(self, rng):
        a, b = self._pair()
        data = self._eval_data(rng)
        records = pf.tradeoff_sweep(a, b, [0.5], [0.5], ["cluster"], data, feature_data=None)
        assert len(records) == 1
        assert records[0].error == "ValueError"
        assert records[0].accuracy is None
        row = records[0].csv_row()
        assert row.count(",") == 8

    def test_per_layer_alpha_cell(self, rng):
        a, b = self._pair()
        data = self._eval_data(rng)
        records = pf.tradeoff_sweep(a, b, [[1.0, 0.0]], [0.5], ["partial-ot"], data)
        assert records[0].widths == (12, 6)
        assert records[0].alpha == "1|0"
