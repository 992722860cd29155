import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import as_set, naive_asyncdgp, naive_eta, random_records, se_config
from asyncgp.aggregation import (
    AggregationResult,
    AggregatorKind,
    InformationSet,
    PredictionRecord,
    aggregate,
    aggregate_error_bound,
    asyncdgp_aggregate,
    baseline_aggregate,
    delayed_error_bound,
    manage_information_set,
    responsibilities,
)
from asyncgp.errors import ContractError, InputError, NotApplicableError

X0 = (0.0, 0.0)


def rec(node, it, q=X0, mean=0.0, std=0.1, produced=0.0, received=0.0):
    return PredictionRecord(node, it, q, mean, std, produced, received)


class TestPredictionRecord:
    def test_json_roundtrip(self):
        r = rec(2, 5, (0.1, -0.2), 1.5, 0.3, 0.02, 0.025)
        assert PredictionRecord.from_dict(r.to_dict()) == r

    def test_negative_std(self):
        with pytest.raises(InputError):
            rec(0, 0, std=-0.1)

    def test_received_before_produced(self):
        with pytest.raises(InputError):
            rec(0, 0, produced=1.0, received=0.5)


class TestDelayedErrorBound:
    def test_zero_distance(self):
        cfg = se_config()
        assert delayed_error_bound(rec(0, 0, std=0.3), X0, cfg) == pytest.approx(0.6, abs=1e-15)

    def test_unit_lipschitz(self):
        cfg = se_config()
        assert delayed_error_bound(rec(0, 0, q=(1.0, 0.0), std=0.0), X0, cfg, L_f=1.0) == 1.0

    def test_derived_value(self):
        cfg = se_config()
        eta = delayed_error_bound(rec(0, 0, q=(0.25, 0.0), std=0.3), X0, cfg)
        assert cfg.L_f == pytest.approx(1.1013, abs=1e-4)
        # 1.15066 is obtained with L_f pre-rounded to 1.1013
        assert eta == pytest.approx(1.15066, abs=1e-4)
        assert eta == pytest.approx(math.sqrt(2 * math.exp(-0.5)) * 0.5 + 0.6, rel=1e-15)
        assert eta == pytest.approx(naive_eta(rec(0, 0, q=(0.25, 0.0), std=0.3), X0, 1, 1, 2, 1), rel=1e-15)


class TestResponsibilities:
    def test_log_ratio_sums_to_one(self):
        rho = responsibilities([0.5, 1.0, 1.9, 2.5], 2.0)
        assert rho[3] == 0.0
        assert math.fsum(rho) == pytest.approx(1.0, abs=1e-15)

    def test_uniform(self):
        np.testing.assert_array_equal(responsibilities([0.5, 1.0, 3.0], 2.0, "uniform"), [0.5, 0.5, 0.0])

    def test_capacity(self):
        np.testing.assert_array_equal(responsibilities([0.5, 1.0], 2.0, "capacity", 4), [0.25, 0.25])

    def test_capacity_needs_room(self):
        with pytest.raises(InputError):
            responsibilities([0.5, 1.0], 2.0, "capacity", 1)

    def test_unknown(self):
        with pytest.raises(InputError):
            responsibilities([0.5], 2.0, "softmax")

    def test_all_invalid(self):
        np.testing.assert_array_equal(responsibilities([2.0, 3.0], 2.0), [0.0, 0.0])


class TestManage:
    def test_all_invalid_gives_empty(self):
        cfg = se_config()
        out = manage_information_set(InformationSet(4), [rec(i, 0, std=1.0) for i in range(3)], X0, cfg)
        assert len(out) == 0

    def test_newest_per_node(self):
        cfg = se_config()
        incoming = [rec(i, k, std=0.05 * (3 - k)) for i in range(4) for k in range(3)]
        out = manage_information_set(InformationSet(4), incoming, X0, cfg)
        assert sorted(r.key for r in out) == [(i, 2) for i in range(4)]
        assert out.latest_iteration == {i: 2 for i in range(4)}

    def test_smallest_eta_oracle(self):
        cfg = se_config()
        rng = np.random.default_rng(11)
        cands = random_records(rng, 12, X0, spread=0.05, max_std=0.5)
        out = manage_information_set(InformationSet(10), cands, X0, cfg, selection="eta")
        etas = {r.key: naive_eta(r, X0, 1, 1, 2, 1) for r in cands}
        best = min(itertools.combinations(cands, 10), key=lambda s: sum(etas[r.key] for r in s))
        assert {r.key for r in out} == {r.key for r in best}

    def test_distinct_nodes_fresh_first_matches_eta(self):
        cfg = se_config()
        rng = np.random.default_rng(12)
        cands = random_records(rng, 12, X0, spread=0.05, max_std=0.5)
        a = manage_information_set(InformationSet(10), cands, X0, cfg, selection="fresh_first")
        b = manage_information_set(InformationSet(10), cands, X0, cfg, selection="eta")
        assert a.records == b.records

    def test_duplicates_collapse(self):
        cfg = se_config()
        r = rec(0, 0)
        out = manage_information_set(InformationSet(4, [r]), [r, r], X0, cfg)
        assert len(out) == 1

    def test_stale_record_dropped_when_query_moves(self):
        cfg = se_config()
        r = rec(0, 0, q=(0.0, 0.0), std=0.1)
        assert len(manage_information_set(InformationSet(4), [r], X0, cfg)) == 1
        assert len(manage_information_set(InformationSet(4, [r]), [], (3.0, 0.0), cfg)) == 0

    def test_bad_policy(self):
        with pytest.raises(InputError):
            manage_information_set(InformationSet(4), [], X0, se_config(), selection="random")


class TestAsyncDGP:
    def test_empty(self):
        cfg = se_config()
        res = asyncdgp_aggregate(InformationSet(4), X0, cfg)
        assert res.fused_mean == cfg.prior_mean
        assert res.omega == cfg.prior_bound == 2.0
        assert res.prior_weight == 1.0

    def test_two_record_example(self):
        cfg = se_config()
        # zero distance, so eta = beta * std: 0.5 and 1.0
        iset = as_set([rec(0, 0, mean=1.0, std=0.25), rec(1, 0, mean=3.0, std=0.5)])
        res = asyncdgp_aggregate(iset, X0, cfg, rho=[0.5, 0.5])
        assert res.omega == pytest.approx(2.5**-0.5, abs=1e-15)
        assert res.omega == pytest.approx(0.63246, abs=1e-5)
        np.testing.assert_allclose([w for _, _, w in res.weights], [0.8, 0.2], atol=1e-15)
        assert res.prior_weight == 0.0
        assert res.fused_mean == pytest.approx(0.8 * 1.0 + 0.2 * 3.0, abs=1e-15)
        assert aggregate_error_bound(res) == res.omega

    def test_record_near_prior_bound(self):
        cfg = se_config()
        res = asyncdgp_aggregate(as_set([rec(0, 0, std=1.0 - 1e-9)]), X0, cfg)
        assert res.omega == pytest.approx(cfg.prior_bound, rel=1e-8)
        assert res.omega <= cfg.prior_bound

    def test_contract_violation(self):
        with pytest.raises(ContractError):
            asyncdgp_aggregate(as_set([rec(0, 0, std=1.5)]), X0, se_config())

    def test_zero_eta_takes_all_weight(self):
        res = asyncdgp_aggregate(as_set([rec(0, 0, mean=4.0, std=0.0), rec(1, 0, mean=1.0, std=0.2)]), X0, se_config())
        assert res.fused_mean == 4.0 and res.omega == 0.0

    def test_bad_explicit_rho(self):
        with pytest.raises(InputError):
            asyncdgp_aggregate(as_set([rec(0, 0), rec(1, 0)]), X0, se_config(), rho=[0.7, 0.7])

    def test_matches_naive(self):
        rng = np.random.default_rng(21)
        cfg = se_config()
        for _ in range(200):
            recs = random_records(rng, int(rng.integers(1, 6)), X0)
            iset = manage_information_set(InformationSet(8), recs, X0, cfg)
            res = asyncdgp_aggregate(iset, X0, cfg)
            mean, omega = naive_asyncdgp(iset.records, X0, 1, 1, 2, 1)
            assert abs(res.fused_mean - mean) <= 1e-12
            assert abs(res.omega - omega) <= 1e-12

    def test_result_roundtrip(self):
        res = asyncdgp_aggregate(as_set([rec(0, 0, mean=1.0), rec(1, 2, mean=2.0, std=0.3)]), X0, se_config())
        assert AggregationResult.from_dict(res.to_dict()) == res


class TestMonotoneImprovement:
    @given(st.lists(st.floats(0.01, 1.99), min_size=0, max_size=5), st.floats(0.01, 1.99))
    @settings(max_examples=200, deadline=None)
    def test_capacity_scheme_never_worse(self, stds, extra):
        cfg = se_config(beta=1.0, sigma_f=2.0)
        base = [rec(i, 0, std=s) for i, s in enumerate(stds)]
        before = asyncdgp_aggregate(as_set(base, 6), X0, cfg, responsibility="capacity").omega
        after = asyncdgp_aggregate(as_set(base + [rec(9, 0, std=extra)], 6), X0, cfg, responsibility="capacity").omega
        assert after <= before * (1 + 1e-12)

    def test_log_ratio_counterexample(self):
        # a normalised scheme can shift responsibility onto a weak newcomer
        cfg = se_config(beta=1.0, sigma_f=2.0)
        base = [rec(0, 0, std=0.1)]
        before = asyncdgp_aggregate(as_set(base, 4), X0, cfg).omega
        after = asyncdgp_aggregate(as_set(base + [rec(1, 0, std=1.5)], 4), X0, cfg).omega
        assert after > before


class TestBaselines:
    def test_moe_mean(self):
        iset = as_set([rec(i, 0, mean=m, std=0.1 * (i + 1)) for i, m in enumerate([1.0, 2.0, 3.0])])
        assert baseline_aggregate("moe", iset, X0, se_config()).fused_mean == 2.0

    def test_poe_equal_std(self):
        iset = as_set([rec(0, 0, mean=1.0, std=0.3), rec(1, 0, mean=2.0, std=0.3)])
        res = baseline_aggregate("poe", iset, X0, se_config())
        assert [w for _, _, w in res.weights] == [0.5, 0.5]

    def test_bcm_single_prior_std_record(self):
        iset = as_set([rec(0, 0, mean=0.73, std=1.0)])
        res = baseline_aggregate("bcm", iset, X0, se_config())
        assert res.fused_mean == 0.73
        assert res.prior_weight == 0.0
        assert res.rho == 1.0

    def test_empty_prior_free_rejected(self):
        for kind in ("poe", "gpoe", "moe"):
            with pytest.raises(InputError):
                baseline_aggregate(kind, InformationSet(4), X0, se_config())

    def test_empty_bcm_returns_prior(self):
        for kind in ("bcm", "rbcm"):
            assert baseline_aggregate(kind, InformationSet(4), X0, se_config(prior_mean=0.4)).fused_mean == 0.4

    def test_zero_std_records_split(self):
        iset = as_set([rec(0, 0, mean=1.0, std=0.0), rec(1, 0, mean=3.0, std=0.0), rec(2, 0, mean=9.0, std=0.2)])
        res = baseline_aggregate("poe", iset, X0, se_config())
        assert res.fused_mean == 2.0

    def test_gpoe_uniform_fallback(self):
        iset = as_set([rec(0, 0, mean=1.0, std=1.0), rec(1, 0, mean=2.0, std=1.0)])
        assert baseline_aggregate("gpoe", iset, X0, se_config()).fused_mean == 1.5

    def test_rbcm_formula(self):
        sf, stds, means = 1.0, np.array([0.3, 0.6]), np.array([1.0, -1.0])
        iset = as_set([rec(i, 0, mean=float(m), std=float(s)) for i, (m, s) in enumerate(zip(means, stds))])
        res = baseline_aggregate("rbcm", iset, X0, se_config())
        rho = np.log(sf / stds)
        prec = rho @ stds**-2 + (1 - rho.sum()) * sf**-2
        assert res.fused_mean == pytest.approx((rho * stds**-2 @ means) / prec, rel=1e-13)

    def test_no_bound_for_baselines(self):
        res = baseline_aggregate("bcm", as_set([rec(0, 0)]), X0, se_config())
        with pytest.raises(NotApplicableError):
            aggregate_error_bound(res)

    def test_dispatch(self):
        iset = as_set([rec(0, 0, mean=1.0)])
        for kind in AggregatorKind:
            assert aggregate(kind, iset, X0, se_config()).kind is kind

    def test_asyncdgp_not_a_baseline(self):
        with pytest.raises(InputError):
            baseline_aggregate("asyncdgp", InformationSet(4), X0, se_config())
