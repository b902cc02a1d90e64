import math
from fractions import Fraction

import numpy as np
import pytest

from fedlora import aggregation as agg
from fedlora import linalg
from fedlora.lora import LoraPair, effective_update
from fedlora.solver import SolverConfig

from oracles import jacobi_singular_values


def make_contribs(seeds, d=8, l=8, r=2, counts=None, std=1.0, ranks=None):
    contribs = []
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        rk = ranks[i] if ranks else r
        pair = LoraPair(B=rng.normal(0, std, (d, rk)), A=rng.normal(0, std, (rk, l)))
        count = counts[i] if counts else 10
        contribs.append(agg.ClientContribution(pair=pair, sample_count=count, client_id=i))
    return contribs


class TestWeights:
    def test_equal_counts(self):
        c = make_contribs([1, 2], counts=[10, 10])
        assert np.array_equal(agg.weights(c), [0.5, 0.5])

    def test_proportional(self):
        c = make_contribs([1, 2], counts=[1, 3])
        assert np.array_equal(agg.weights(c), [0.25, 0.75])

    def test_sum_to_one_exact_rationals(self):
        counts = [7, 11, 13]
        c = make_contribs([1, 2, 3], counts=counts)
        w = agg.weights(c)
        # rational-arithmetic oracle for the individual weights
        expected = [Fraction(x, sum(counts)) for x in counts]
        for got, exact in zip(w, expected):
            assert abs(got - float(exact)) < 1e-16
        assert abs(w.sum() - 1.0) <= 1e-15

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            agg.weights([])

    def test_affine_invariance_bit_identical(self):
        counts = [7, 11, 13]
        c1 = make_contribs([1, 2, 3], counts=counts)
        c2 = make_contribs([1, 2, 3], counts=[9 * x for x in counts])
        r1 = agg.aggregate_fedit(c1)
        r2 = agg.aggregate_fedit(c2)
        assert np.array_equal(r1.broadcast_A, r2.broadcast_A)
        assert np.array_equal(r1.broadcast_B, r2.broadcast_B)
        assert np.array_equal(r1.ideal_update, r2.ideal_update)
        assert r1.bias_cosine == r2.bias_cosine
        assert r1.bias_frobenius == r2.bias_frobenius


class TestAveragePairs:
    def test_single_client_unchanged(self):
        c = make_contribs([5])
        a_bar, b_bar = agg.average_pairs(c)
        assert np.array_equal(a_bar, c[0].pair.A)
        assert np.array_equal(b_bar, c[0].pair.B)

    def test_identical_pairs_fixed_point(self):
        c0 = make_contribs([5])[0]
        c = [
            agg.ClientContribution(pair=c0.pair, sample_count=n, client_id=i)
            for i, n in enumerate([3, 7, 5])
        ]
        a_bar, b_bar = agg.average_pairs(c)
        assert np.abs(a_bar - c0.pair.A).max() < 1e-15
        assert np.abs(b_bar - c0.pair.B).max() < 1e-15

    def test_matches_elementwise_mean_oracle(self):
        c = make_contribs([1, 2, 3], counts=[10, 10, 10])
        a_bar, b_bar = agg.average_pairs(c)
        a_mean = (c[0].pair.A + c[1].pair.A + c[2].pair.A) / 3
        b_mean = (c[0].pair.B + c[1].pair.B + c[2].pair.B) / 3
        assert np.abs(a_bar - a_mean).max() < 1e-14
        assert np.abs(b_bar - b_mean).max() < 1e-14

    def test_shape_mismatch_rejected(self):
        c = make_contribs([1], d=8) + make_contribs([2], d=6)
        with pytest.raises(ValueError, match="mismatched"):
            agg.average_pairs(c)


class TestAggregationBias:
    def test_single_client_zero_bias(self):
        result = agg.aggregate_fedit(make_contribs([3]))
        assert result.bias_frobenius <= 1e-12
        assert result.bias_cosine == pytest.approx(1.0, abs=1e-12)

    def test_shared_A_zero_bias(self):
        rng = np.random.default_rng(0)
        shared_a = rng.normal(size=(2, 8))
        contribs = []
        for i in range(3):
            b = np.random.default_rng(100 + i).normal(size=(8, 2))
            contribs.append(
                agg.ClientContribution(LoraPair(B=b, A=shared_a), sample_count=5 + i, client_id=i)
            )
        result = agg.aggregate_fedit(contribs)
        assert result.bias_frobenius <= 1e-12

    def test_shared_B_zero_bias(self):
        rng = np.random.default_rng(1)
        shared_b = rng.normal(size=(8, 2))
        contribs = []
        for i in range(3):
            a = np.random.default_rng(200 + i).normal(size=(2, 8))
            contribs.append(
                agg.ClientContribution(LoraPair(B=shared_b, A=a), sample_count=5 + i, client_id=i)
            )
        result = agg.aggregate_fedit(contribs)
        assert result.bias_frobenius <= 1e-12

    def test_generic_pairs_have_positive_bias(self):
        c = make_contribs([11, 12], d=4, l=4, r=1)
        ideal = agg.ideal_update(c)
        approx = agg.approx_update(*agg.average_pairs(c))
        # entrywise expansion oracle: p1^2 B1A1 + p1p2(B1A2 + B2A1) + p2^2 B2A2
        p = agg.weights(c)
        b1, a1 = np.asarray(c[0].pair.B), np.asarray(c[0].pair.A)
        b2, a2 = np.asarray(c[1].pair.B), np.asarray(c[1].pair.A)
        expanded = (
            p[0] ** 2 * b1 @ a1
            + p[0] * p[1] * (b1 @ a2 + b2 @ a1)
            + p[1] ** 2 * b2 @ a2
        )
        assert np.abs(approx - expanded).max() < 1e-12
        assert np.linalg.norm(ideal - approx) > 0

    @pytest.mark.parametrize("seed", range(8))
    def test_bias_law_generic_instances(self, seed):
        c = make_contribs([seed * 3 + 1, seed * 3 + 2, seed * 3 + 3])
        result = agg.aggregate_fedit(c)
        rel = result.bias_frobenius / np.linalg.norm(result.ideal_update)
        assert rel > 0.01


class TestFedit:
    def test_downlink_parameter_count(self):
        result = agg.aggregate_fedit(make_contribs([1, 2], d=8, l=8, r=2))
        assert result.downlink_floats == 2 * (8 + 8)
        assert not result.reinit_required

    def test_rejects_heterogeneous_ranks(self):
        c = make_contribs([1, 2], ranks=[2, 3])
        with pytest.raises(ValueError, match="heterogeneous"):
            agg.aggregate_fedit(c)


class TestFfa:
    def _shared_a_contribs(self, k=2, d=8, l=8, r=2):
        rng = np.random.default_rng(42)
        frozen = rng.normal(size=(r, l))
        contribs = []
        for i in range(k):
            b = np.random.default_rng(300 + i).normal(size=(d, r))
            contribs.append(
                agg.ClientContribution(LoraPair(B=b, A=frozen), sample_count=4 + i, client_id=i)
            )
        return contribs, frozen

    def test_bias_eliminated(self):
        contribs, frozen = self._shared_a_contribs()
        result = agg.aggregate_ffa(contribs, frozen)
        assert result.bias_frobenius <= 1e-12
        assert np.abs(result.realized_update - result.ideal_update).max() < 1e-12

    def test_downlink_is_b_only(self):
        contribs, frozen = self._shared_a_contribs(d=8, r=2)
        assert agg.aggregate_ffa(contribs, frozen).downlink_floats == 16

    def test_tampered_A_rejected(self):
        contribs, frozen = self._shared_a_contribs()
        tampered = np.array(contribs[1].pair.A)
        tampered[0, 0] += 1e-9
        bad = agg.ClientContribution(
            LoraPair(B=contribs[1].pair.B, A=tampered), sample_count=4, client_id=1
        )
        with pytest.raises(agg.ProtocolViolation, match="client 1"):
            agg.aggregate_ffa([contribs[0], bad], frozen)


class TestFlora:
    def test_single_client(self):
        c = make_contribs([9])
        result = agg.aggregate_flora(c)
        assert np.abs(result.fold_delta - effective_update(c[0].pair)).max() < 1e-12
        assert result.reinit_required

    @pytest.mark.parametrize("seed", range(6))
    def test_stacking_matches_ideal_mixed_ranks(self, seed):
        c = make_contribs(
            [seed + 10, seed + 20, seed + 30], ranks=[1, 2, 3], counts=[4, 9, 2]
        )
        result = agg.aggregate_flora(c)
        ideal = agg.ideal_update(c)
        assert np.linalg.norm(result.fold_delta - ideal) <= 1e-10 * np.linalg.norm(ideal)

    def test_downlink_scales_with_total_rank(self):
        c = make_contribs([1, 2, 3], r=2)
        result = agg.aggregate_flora(c)
        fedit_downlink = agg.aggregate_fedit(c).downlink_floats
        assert result.downlink_floats == 6 * 16 == 3 * fedit_downlink


class TestFlexlora:
    def test_exact_recovery_when_rank_suffices(self):
        c = make_contribs([1, 2], r=2)
        result = agg.aggregate_flexlora(c, target_rank=4)
        assert result.bias_frobenius <= 1e-8

    def test_information_loss_when_rank_truncates(self):
        # two rank-2 clients: ideal update has rank 4 almost surely
        c = make_contribs([1, 2], r=2)
        result = agg.aggregate_flexlora(c, target_rank=2)
        assert result.bias_frobenius > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_is_singular_value_tail(self, seed):
        c = make_contribs([seed, seed + 50, seed + 100], r=2)
        result = agg.aggregate_flexlora(c, target_rank=2)
        sv = jacobi_singular_values(agg.ideal_update(c))
        tail = math.sqrt(float((sv[2:] ** 2).sum()))
        assert abs(result.bias_frobenius - tail) < 1e-8

    def test_rank_bound_checked(self):
        with pytest.raises(ValueError, match=r"rank <= min\(d,l\)"):
            agg.aggregate_flexlora(make_contribs([1]), target_rank=9)


class TestHetlora:
    def test_pad_identity_at_max_rank(self):
        c = make_contribs([1, 2], r=3)
        padded = agg.hetlora_pad(c, 3)
        for before, after in zip(c, padded):
            assert np.array_equal(before.pair.B, after.pair.B)
            assert np.array_equal(before.pair.A, after.pair.A)

    def test_pad_preserves_update_bit_exactly(self):
        c = make_contribs([7], r=1)
        padded = agg.hetlora_pad(c, 4)
        assert np.array_equal(
            effective_update(c[0].pair), effective_update(padded[0].pair)
        )

    def test_truncate_pad_round_trip(self):
        ranks = [2, 4, 4, 6, 6, 8]
        c = make_contribs(list(range(6)), d=10, l=12, ranks=ranks)
        padded = agg.hetlora_pad(c, 8)
        for orig, pad in zip(c, padded):
            back = agg.hetlora_truncate(pad.pair, orig.pair.rank)
            assert np.array_equal(back.B, orig.pair.B)
            assert np.array_equal(back.A, orig.pair.A)

    def test_truncate_reduces_update_rank(self):
        c = make_contribs([3], d=10, l=10, r=4)
        truncated = agg.hetlora_truncate(c[0].pair, 2)
        sv = np.linalg.svd(effective_update(truncated), compute_uv=False)
        assert np.all(sv[2:] < 1e-10)

    def test_truncate_rejects_rank_increase(self):
        c = make_contribs([3], r=2)
        with pytest.raises(ValueError, match="truncate"):
            agg.hetlora_truncate(c[0].pair, 3)

    def test_pad_rejects_small_r_max(self):
        c = make_contribs([1], r=4, d=10, l=10)
        with pytest.raises(ValueError, match="r_max"):
            agg.hetlora_pad(c, 2)


class TestLorafair:
    def test_zero_budget_matches_fedit(self):
        c = make_contribs([1, 2, 3])
        cfg = SolverConfig(max_steps=1, learning_rate=1e-30)
        # a step that cannot decrease the loss leaves delta at zero
        fair = agg.aggregate_lorafair(c, cfg)
        fedit = agg.aggregate_fedit(c)
        assert np.abs(fair.realized_update - fedit.realized_update).max() < 1e-12
        assert np.array_equal(fair.broadcast_A, fedit.broadcast_A)

    def test_never_below_fedit_cosine(self):
        for seed in range(6):
            c = make_contribs([seed, seed + 7, seed + 19])
            fair = agg.aggregate_lorafair(c, SolverConfig(lam=0.01, max_steps=200))
            fedit = agg.aggregate_fedit(c)
            assert fair.bias_cosine >= fedit.bias_cosine - 1e-9

    def test_single_client_keeps_delta_small(self):
        c = make_contribs([5])
        fair = agg.aggregate_lorafair(c, SolverConfig(lam=0.01, max_steps=100))
        assert fair.solver_report.final_delta_norm <= 1e-9
        assert fair.bias_cosine == pytest.approx(1.0, abs=1e-9)

    def test_residual_on_A_refines_other_factor(self):
        c = make_contribs([1, 2, 3])
        fair = agg.aggregate_lorafair(
            c, SolverConfig(lam=0.0, max_steps=100, residual_position="on_A")
        )
        fedit = agg.aggregate_fedit(c)
        assert np.array_equal(fair.broadcast_B, fedit.broadcast_B)
        assert not np.array_equal(fair.broadcast_A, fedit.broadcast_A)
        assert fair.bias_cosine >= fedit.bias_cosine - 1e-9


class TestCommCost:
    def test_fedit_per_client_downlink(self):
        assert agg.comm_cost("fedit", 8, 8, [2, 2, 2, 2]) == (4 * 2 * 16, 32)

    def test_flora_is_k_times_fedit(self):
        up, down = agg.comm_cost("flora", 8, 8, [2, 2, 2, 2])
        assert down == 128 == 4 * 32
        assert up == 4 * 2 * 16

    def test_ffa_half_of_fedit_when_square(self):
        _, down_ffa = agg.comm_cost("ffa-lora", 8, 8, [2, 2])
        _, down_fedit = agg.comm_cost("fedit", 8, 8, [2, 2])
        assert down_ffa == 16 == down_fedit // 2

    def test_uplink_totals(self):
        up, _ = agg.comm_cost("ffa-lora", 10, 32, [4, 4, 4])
        assert up == 3 * 4 * 10
        up, _ = agg.comm_cost("lora-fair", 10, 32, [4, 4, 4])
        assert up == 3 * 4 * 42

    def test_hetero_downlink_average(self):
        up, down = agg.comm_cost("hetlora", 10, 32, [2, 4, 4, 6, 6, 8])
        assert up == 30 * 42
        assert down == 30 * 42 / 6

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown method"):
            agg.comm_cost("nope", 4, 4, [1])
