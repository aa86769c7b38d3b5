import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebdiff.datasets import generate_dataset
from ebdiff.diffusion import ddim_sample, eval_loss
from ebdiff.earlybird import EBConfig, find_eb_ticket
from ebdiff.evaluation import weighted_cost
from ebdiff.nn import ConfigError, Denoiser
from ebdiff.pruning import compact
from ebdiff.seeding import stream
from ebdiff.taeb import (RegionPlan, TimestepRegion, build_region_plan, find_taeb_tickets, route,
                         train_regions_parallel, weighted_avg_rate)

RATE_TRIPLES = [  # rates 1/2/3 -> average, in percent
    ((30, 40, 70), 54.4), ((30, 40, 80), 60.0), ((30, 40, 90), 65.6), ((30, 50, 70), 56.4),
    ((30, 50, 80), 62.0), ((30, 60, 70), 58.4), ((30, 60, 80), 64.0),
]


def bounds(plan):
    return [(r.train_lo, r.train_hi) for r in plan.regions]


class TestPlan:
    def test_overlap_bounds(self):
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8], 0.02)
        assert bounds(plan) == [(0, 260), (240, 460), (440, 1000)]
        assert [(r.core_lo, r.core_hi) for r in plan.regions] == [(0, 240), (240, 440),
                                                                  (440, 1000)]

    def test_no_overlap_bounds(self):
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8], 0.0)
        assert bounds(plan) == [(0, 240), (240, 440), (440, 1000)]

    def test_single_region(self):
        plan = build_region_plan(1000, [], [0.5])
        r = plan.regions[0]
        assert (r.core_lo, r.core_hi, r.train_lo, r.train_hi) == (0, 1000, 0, 1000)

    def test_internal_timesteps(self):
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8])
        assert [r.t_range() for r in plan.regions] == [(1, 261), (241, 461), (441, 1001)]

    def test_clamped(self):
        plan = build_region_plan(100, [1, 99], [0.1, 0.2, 0.3], 0.05)
        assert bounds(plan) == [(0, 6), (1, 100), (99, 100)]

    @pytest.mark.parametrize("b,r", [([440, 240], [0.3, 0.6, 0.8]), ([240, 240], [0.1] * 3),
                                     ([0], [0.1, 0.2]), ([1000], [0.1, 0.2]),
                                     ([240, 440], [0.3, 0.6])])
    def test_rejects(self, b, r):
        with pytest.raises(ConfigError):
            build_region_plan(1000, b, r)

    def test_plan_validates_partition(self):
        a = TimestepRegion(0, 500, 0, 500, 0.1)
        b = TimestepRegion(600, 1000, 600, 1000, 0.1)
        with pytest.raises(ConfigError):
            RegionPlan((a, b), 1000)

    def test_budgets(self):
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8], budgets=[1, 2, 3])
        assert [r.iteration_budget for r in plan.regions] == [1, 2, 3]
        with pytest.raises(ConfigError):
            build_region_plan(1000, [240], [0.3, 0.6], budgets=[1])

    @settings(max_examples=100, deadline=None)
    @given(T=st.integers(10, 2000), data=st.data())
    def test_cores_partition(self, T, data):
        k = data.draw(st.integers(0, min(6, T - 1)))
        b = sorted(data.draw(st.sets(st.integers(1, T - 1), min_size=k, max_size=k)))
        rates = data.draw(st.lists(st.floats(0, 0.95), min_size=k + 1, max_size=k + 1))
        ov = data.draw(st.floats(0, 0.2))
        plan = build_region_plan(T, b, rates, ov)
        assert sum(r.core_len for r in plan.regions) == T
        for t in range(0, T, max(1, T // 97)):
            owners = [i for i, r in enumerate(plan.regions) if r.core_lo <= t < r.core_hi]
            assert owners == [plan.region_of(t)]


class TestWeightedRate:
    @pytest.mark.parametrize("rates,expected", RATE_TRIPLES)
    def test_rate_triples(self, rates, expected):
        plan = build_region_plan(1000, [240, 440], [r / 100 for r in rates])
        assert abs(100 * weighted_avg_rate(plan) - expected) < 0.1

    def test_single(self):
        assert weighted_avg_rate(build_region_plan(1000, [], [0.37])) == pytest.approx(0.37)

    @settings(max_examples=100, deadline=None)
    @given(data=st.data())
    def test_split_invariance(self, data):
        T = 1000
        b = sorted(data.draw(st.sets(st.integers(2, T - 2), min_size=1, max_size=4)))
        rates = data.draw(st.lists(st.floats(0, 0.95), min_size=len(b) + 1,
                                   max_size=len(b) + 1))
        plan = build_region_plan(T, b, rates)
        i = data.draw(st.integers(0, len(b)))
        edges = [0, *b, T]
        lo, hi = edges[i], edges[i + 1]
        if hi - lo < 2:
            return
        cut = data.draw(st.integers(lo + 1, hi - 1))
        split = build_region_plan(T, sorted([*b, cut]), rates[:i + 1] + rates[i:])
        assert weighted_avg_rate(split) == pytest.approx(weighted_avg_rate(plan), abs=1e-12)
        # cost weighting is additive over cores too
        nets = [Denoiser.init(np.random.default_rng(j), time_embed_dim=2,
                              hidden_dims=(1 + j % 5,)) for j in range(len(rates))]
        split_nets = nets[:i + 1] + nets[i:]
        assert weighted_cost(split, split_nets)[0] == pytest.approx(
            weighted_cost(plan, nets)[0], rel=1e-12)


class TestRoute:
    @pytest.fixture
    def ensemble(self):
        from ebdiff.taeb import EnsembleModel
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8])
        return EnsembleModel(plan, ["r1", "r2", "r3"], [None] * 3, [None] * 3)

    @pytest.mark.parametrize("t,name", [(0, "r1"), (100, "r1"), (239, "r1"), (240, "r2"),
                                        (439, "r2"), (440, "r3"), (999, "r3")])
    def test_core_routing(self, ensemble, t, name):
        assert route(ensemble, t) == name

    def test_sampler_route_shift(self, ensemble):
        assert ensemble.sampler_route(240) == "r1"
        assert ensemble.sampler_route(241) == "r2"
        assert ensemble.sampler_route(1000) == "r3"

    def test_total(self, ensemble):
        assert {route(ensemble, t) for t in range(1000)} == {"r1", "r2", "r3"}
        with pytest.raises(ValueError):
            route(ensemble, 1000)


MODEL = {"input_dim": 2, "time_embed_dim": 8, "hidden_dims": (24, 24)}


@pytest.fixture(scope="module")
def toy():
    return generate_dataset("gauss8", 800, 7)


@pytest.fixture(scope="module")
def small_cfg():
    return EBConfig(pseudo_epoch_iters=20, max_intervals=15, queue_len=3, epsilon=0.2)


class TestSearches:
    def test_single_region_equals_eb(self, toy, sched, small_cfg):
        plan = build_region_plan(1000, [], [0.5])
        [r] = find_taeb_tickets(plan, toy, sched, small_cfg, 11, MODEL, 64, 1e-3, workers=1)
        net = Denoiser.init(stream(11, "init", 0), **MODEL)
        e = find_eb_ticket(net, toy, sched, small_cfg, stream(11, "search", 0), batch_size=64)
        assert r.ticket.mask == e.ticket.mask
        assert r.ticket.found_at_interval == e.ticket.found_at_interval
        assert r.distances.d.tobytes() == e.distances.d.tobytes()
        for a, b in zip(r.net.params(), e.net.params()):
            assert a.tobytes() == b.tobytes()

    def test_concurrent_matches_sequential(self, toy, sched, small_cfg):
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8])
        seq = find_taeb_tickets(plan, toy, sched, small_cfg, 5, MODEL, 64, workers=1)
        par = find_taeb_tickets(plan, toy, sched, small_cfg, 5, MODEL, 64, workers=3)
        assert len(seq) == len(par) == 3
        for a, b in zip(seq, par):
            assert a.ticket.mask == b.ticket.mask
            assert a.distances.d.tobytes() == b.distances.d.tobytes()
        assert [s.ticket.rate for s in seq] == [0.3, 0.6, 0.8]
        assert [s.ticket.mask.kept_units for s in seq] == [2 * (24 - int(r * 24))
                                                          for r in (0.3, 0.6, 0.8)]

    def test_one_matrix_per_region(self, toy, sched, small_cfg, tmp_path):
        from ebdiff.earlybird import export_distance_matrix
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8])
        res = find_taeb_tickets(plan, toy, sched, small_cfg, 5, MODEL, 64, workers=1)
        for i, r in enumerate(res):
            export_distance_matrix(r.distances, tmp_path / f"region_{i}" / "hamming")
        assert sorted(p.parent.name for p in tmp_path.rglob("*.csv")) == \
            ["region_0", "region_1", "region_2"]


class TestRegionTraining:
    @pytest.fixture(scope="class")
    @classmethod
    def searches(cls, toy, sched, small_cfg):
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8])
        return plan, find_taeb_tickets(plan, toy, sched, small_cfg, 5, MODEL, 64, workers=1)

    def test_zero_budget_is_compacted_ticket(self, searches, toy, sched):
        plan, res = searches
        out = train_regions_parallel(plan, res, toy, sched, 5, 64, workers=1)
        for net, s in zip(out.ensemble.nets, res):
            ref = compact(s.net, s.ticket.mask)
            for a, b in zip(net.params(), ref.params()):
                assert a.tobytes() == b.tobytes()

    def test_training_improves_and_is_deterministic(self, searches, toy, sched):
        plan, res = searches
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8], budgets=300)
        a = train_regions_parallel(plan, res, toy, sched, 5, 64, workers=1)
        b = train_regions_parallel(plan, res, toy, sched, 5, 64, workers=3)
        held = generate_dataset("gauss8", 2000, 99).points
        for i, (region, na, nb) in enumerate(zip(plan.regions, a.ensemble.nets, b.ensemble.nets)):
            for pa, pb in zip(na.params(), nb.params()):
                assert pa.tobytes() == pb.tobytes()
            untrained = Denoiser.init(np.random.default_rng(0), **MODEL)
            la = eval_loss(na, held, sched, np.random.default_rng(i), region.t_range())
            lu = eval_loss(untrained, held, sched, np.random.default_rng(i), region.t_range())
            assert np.isfinite(la) and la < lu
        assert len(a.wall_times) == 3 and a.total_wall_time > 0

    @pytest.mark.skipif((os.cpu_count() or 1) < 3, reason="needs one core per region")
    def test_parallel_not_slower_than_sum(self, searches, toy, sched):
        plan, res = searches
        plan = build_region_plan(1000, [240, 440], [0.3, 0.6, 0.8], budgets=2000)
        out = train_regions_parallel(plan, res, toy, sched, 5, 64, workers=3)
        assert out.total_wall_time <= sum(out.wall_times)

    def test_ticket_count_mismatch(self, searches, toy, sched):
        plan, res = searches
        with pytest.raises(ConfigError):
            train_regions_parallel(plan, res[:2], toy, sched, 5)

    def test_ensemble_sampling_one_region_equals_single(self, searches, toy, sched):
        plan1 = build_region_plan(1000, [], [0.3])
        _, res = searches
        out = train_regions_parallel(plan1, res[:1], toy, sched, 5, 64, workers=1)
        a = ddim_sample(out.ensemble.sampler_route, sched, 20, 50, np.random.default_rng(1))
        b = ddim_sample(out.ensemble.nets[0], sched, 20, 50, np.random.default_rng(1))
        assert a.tobytes() == b.tobytes()
