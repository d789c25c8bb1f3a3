import numpy as np
import pytest

from inductive_cp import engines as en
from inductive_cp import graph_seq as gs
from inductive_cp.cp_core import conformal_threshold
from inductive_cp.model import EquivariantClassifier, train
from inductive_cp.scores import compute_scores


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(42)
    g = gs.sbm_homophilous(150, 3, 0.1, 0.01, 4, 1.0, rng)
    pinned = gs.stratified_nodes(g.labels, 8, rng)
    s = gs.node_sequence(g, rng, n_cal=30, pinned=pinned)
    m = train(gs.view_at(s, g, s.t_train), pinned, epochs=100)
    return g, s, m


def cal_of(g, s):
    return en.CalibrationSet.from_nodes(g, s.cal_nodes)


def assert_auditable(sets, scores, q):
    for v, labels in sets.items():
        assert labels == frozenset(np.flatnonzero(scores.rows([v])[0] >= q).tolist())


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(engine="foo"), dict(alpha=0.0), dict(alpha=1.0),
                                    dict(naps_k=0), dict(vote_K=0),
                                    dict(vote_subgraph_fraction=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            en.EngineConfig(**kw)

    def test_not_applicable_singleton(self):
        assert en.NotApplicable() is en.NOT_APPLICABLE

    def test_empty_calibration(self, setup):
        with pytest.raises(ValueError):
            en.CalibrationSet.from_nodes(setup[0], [])


class TestNaive:
    def test_nine_calibration_scores(self):
        # 9 points at alpha=0.1: the threshold is the lowest calibration score
        n = 12
        base = gs.Graph(n, np.zeros((0, 2)), np.linspace(0, 1, n)[:, None], np.zeros(n))
        model = EquivariantClassifier(np.array([[3.0, -3.0]]), np.zeros(2), hops=0)
        view = gs.induced_view(base, np.arange(n))
        cal = en.CalibrationSet.from_nodes(base, np.arange(9))
        cfg = en.EngineConfig(engine=en.NAIVE, score_kind="tps")
        q = en.naive_calibrate(cal, view, model, cfg)
        assert q == cal.frozen_scores.min()

    def test_frozen_threshold_for_static_scores(self, setup):
        g, s, _ = setup
        rng = np.random.default_rng(42)
        static = EquivariantClassifier(rng.normal(size=(4, 3)), np.zeros(3), hops=0)
        cfg = en.EngineConfig(engine=en.NAIVE, score_kind="tps")
        cal = cal_of(g, s)
        q = en.naive_calibrate(cal, gs.view_at(s, g, s.t0_cal), static, cfg)
        v = int(s.order[s.t0_cal])
        early = en.naive_predict(q, gs.view_at(s, g, s.t0_cal + 1), static, cfg, [v])
        late = en.naive_predict(q, gs.view_at(s, g, len(s)), static, cfg, [v])
        assert early == late

    def test_inactive_node_rejected(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig(engine=en.NAIVE)
        with pytest.raises(KeyError):
            en.naive_predict(0.0, gs.view_at(s, g, s.t0_cal), m, cfg, [int(s.order[-1])])


class TestNodeEx:
    def test_matches_naive_at_calibration_time(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig()
        cal = cal_of(g, s)
        view = gs.view_at(s, g, s.t0_cal)
        q = en.naive_calibrate(cal, view, m, cfg)
        nodes = s.order[:5]
        assert en.nodeex_predict(cal, view, m, cfg, nodes) == en.naive_predict(q, view, m, cfg, nodes)

    def test_threshold_scan_oracle(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig()
        cal = cal_of(g, s)
        t = s.t0_cal + 40
        view = gs.view_at(s, g, t)
        nodes = s.order[s.t0_cal:t]
        sets = en.nodeex_predict(cal, view, m, cfg, nodes)
        scores = compute_scores(view, m, "aps", seed=0, stream=0)
        cal_s = np.sort(scores.true_label_scores(cal.members, cal.true_labels))[::-1]
        q = cal_s[int(np.ceil(31 * 0.9)) - 1]
        assert_auditable(sets, scores, q)


class TestEdgeEx:
    def test_equal_degrees_reduce_to_nodeex(self):
        rng = np.random.default_rng(42)
        n = 40
        # a cycle: every node has degree 2
        base = gs.Graph(n, [[i, (i + 1) % n] for i in range(n)], rng.normal(size=(n, 3)),
                        rng.integers(0, 3, n))
        view = gs.induced_view(base, np.arange(n), 5)
        model = EquivariantClassifier(rng.normal(size=(3, 3)), np.zeros(3))
        cfg = en.EngineConfig()
        cal = en.CalibrationSet.from_nodes(base, np.arange(0, n, 2))
        nodes = np.arange(1, n, 2)
        assert (en.edgeex_predict(cal, view, model, cfg, nodes)
                == en.nodeex_predict(cal, view, model, cfg, nodes))

    def test_degree_weights(self):
        # star: calibration hub has degree 3 (weight 1/3), leaves degree 1
        base = gs.Graph(5, [[0, 1], [0, 2], [0, 3], [3, 4]], np.zeros((5, 1)),
                        [0, 0, 0, 0, 0])
        view = gs.induced_view(base, np.arange(5), 4)
        assert view.degrees().tolist() == [3, 1, 1, 2, 1]

        cal = en.CalibrationSet.from_nodes(base, [0, 1, 3])
        scores = en.ScoreMatrix(np.array([[0.1], [0.5], [0.0], [0.9], [0.0]]), np.arange(5))
        # nonconformity -s sorted: -0.9 (w 1/2), -0.5 (w 1), -0.1 (w 1/3); total + 1 = 17/6
        # level 0.5 -> first fraction >= 0.5 is (1/2 + 1)/(17/6) = 9/17 at -0.5
        q = en.edgeex_threshold(scores, cal, 0.5, view)
        assert q == 0.5

    def test_heavy_degrees_exhaust_mass(self):
        # two calibration nodes of degree 2: fraction tops out at 1 / (1 + 1) = 0.5
        base = gs.Graph(4, [[0, 1], [0, 2], [1, 3], [2, 3]], np.zeros((4, 1)), [0, 0, 0, 0])
        view = gs.induced_view(base, np.arange(4), 9)
        cal = en.CalibrationSet.from_nodes(base, [0, 3])
        scores = en.ScoreMatrix(np.ones((4, 1)), np.arange(4))
        with pytest.raises(en.InsufficientCalibrationMass, match="t=9"):
            en.edgeex_threshold(scores, cal, 0.1, view)

    def test_zero_degree_calibration_node(self):
        base = gs.Graph(3, [[0, 1]], np.zeros((3, 1)), [0, 0, 0])
        view = gs.induced_view(base, [0, 1, 2])
        cal = en.CalibrationSet.from_nodes(base, [0, 2])
        scores = en.ScoreMatrix(np.ones((3, 1)), np.arange(3))
        with pytest.raises(ValueError):
            en.edgeex_threshold(scores, cal, 0.1, view)


class TestNaps:
    def test_disconnected_node_not_applicable(self):
        rng = np.random.default_rng(42)
        base = gs.Graph(6, [[0, 1], [1, 2]], rng.normal(size=(6, 2)), [0, 1, 0, 1, 0, 1])
        model = EquivariantClassifier(rng.normal(size=(2, 2)), np.zeros(2))
        cal = en.CalibrationSet.from_nodes(base, [0, 1])
        out = en.naps_predict(cal, gs.induced_view(base, np.arange(6)), model,
                              en.EngineConfig(engine=en.NAPS), [4])
        assert out[4] is en.NOT_APPLICABLE

    def test_large_k_equals_nodeex(self, setup):
        g, s, m = setup
        view = gs.view_at(s, g, len(s))
        # restrict to test nodes that reach every calibration node
        cal = cal_of(g, s)
        cfg = en.EngineConfig(engine=en.NAPS, naps_k=len(s))
        nodes = [int(v) for v in s.order[s.t0_cal:s.t0_cal + 30]
                 if len(en.k_hop_members(view, int(v), len(s), cal.members)) == len(cal.members)]
        assert nodes
        assert (en.naps_predict(cal, view, m, cfg, nodes)
                == en.nodeex_predict(cal, view, m, cfg, nodes))

    def test_too_few_neighbours_gives_full_set(self):
        rng = np.random.default_rng(42)
        base = gs.Graph(4, [[0, 1], [1, 2], [2, 3]], rng.normal(size=(4, 2)), [0, 1, 0, 1])
        model = EquivariantClassifier(rng.normal(size=(2, 2)), np.zeros(2))
        cal = en.CalibrationSet.from_nodes(base, [0, 2])
        out = en.naps_predict(cal, gs.induced_view(base, np.arange(4)), model,
                              en.EngineConfig(engine=en.NAPS), [3])
        assert out[3] == frozenset({0, 1})

    def test_k_hop_members_bfs(self):
        base = gs.Graph(6, [[0, 1], [1, 2], [2, 3], [3, 4]], np.zeros((6, 1)), np.zeros(6))
        view = gs.induced_view(base, np.arange(6))
        members = np.array([0, 2, 4, 5])
        assert en.k_hop_members(view, 2, 1, members).tolist() == []
        assert en.k_hop_members(view, 2, 2, members).tolist() == [0, 4]
        assert en.k_hop_members(view, 0, 4, members).tolist() == [2, 4]


class TestSubgraphVote:
    def test_k1_is_single_conditional_set(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig(engine=en.VOTE, vote_K=1)
        cal = cal_of(g, s)
        full = gs.view_at(s, g, len(s))
        v = int(s.order[-1])
        out = en.subgraph_vote_predict(cal, full, m, cfg, v, return_outcome=True)
        assert out.union == out.intersection == out.chosen

    def test_unanimous_labels_always_included(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig(engine=en.VOTE, vote_K=5)
        cal = cal_of(g, s)
        full = gs.view_at(s, g, len(s))
        for v in s.order[-5:]:
            o = en.subgraph_vote_predict(cal, full, m, cfg, int(v), return_outcome=True)
            assert o.intersection <= o.chosen <= o.union
            assert o.intersection == frozenset(np.flatnonzero(o.votes == 5).tolist())

    def test_batched_nesting_and_determinism(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig(engine=en.VOTE, vote_K=4)
        cal = cal_of(g, s)
        full = gs.view_at(s, g, len(s))
        nodes = s.order[-20:]
        a = en.subgraph_vote_many(cal, full, m, cfg, nodes)
        b = en.subgraph_vote_many(cal, full, m, cfg, nodes)
        for v in nodes:
            o = a[int(v)]
            assert o.votes.max() <= 4
            assert o.intersection <= o.chosen <= o.union
            assert o.chosen == b[int(v)].chosen

    def test_average_scores_variant(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig(engine=en.VOTE, vote_K=3, vote_average_scores=True)
        cal = cal_of(g, s)
        full = gs.view_at(s, g, len(s))
        out = en.subgraph_vote_many(cal, full, m, cfg, s.order[-3:])
        assert all(o.chosen == o.union == o.intersection for o in out.values())
        single = en.subgraph_vote_predict(cal, full, m, cfg, int(s.order[-1]))
        assert isinstance(single, frozenset)


class TestPolicies:
    def test_upon_arrival(self, setup):
        g, s, _ = setup
        mask = en.build_mask(s, g, en.EvalPolicy.upon_arrival())
        arr = gs.arrival_times(s, g)
        assert mask == {int(v): int(arr[v]) for v in gs.eval_candidates(s, g)}

    def test_fixed_time(self, setup):
        g, s, _ = setup
        t = s.t0_cal + 10
        mask = en.build_mask(s, g, en.EvalPolicy.fixed_time(t))
        assert len(mask) == 10 and set(mask.values()) == {t}
        with pytest.raises(ValueError):
            en.build_mask(s, g, en.EvalPolicy.fixed_time(s.t0_cal))

    def test_random_time_within_range(self, setup):
        g, s, _ = setup
        mask = en.build_mask(s, g, en.EvalPolicy.random_time(3))
        arr = gs.arrival_times(s, g)
        assert all(arr[v] <= t <= len(s) for v, t in mask.items())
        assert mask == en.build_mask(s, g, en.EvalPolicy.random_time(3))

    def test_unknown_policy(self, setup):
        g, s, _ = setup
        with pytest.raises(ValueError):
            en.build_mask(s, g, en.EvalPolicy("adversarial"))


class TestEvaluateSequence:
    def test_three_test_nodes_upon_arrival(self):
        rng = np.random.default_rng(42)
        g = gs.sbm_homophilous(40, 2, 0.3, 0.05, 3, 1.0, rng)
        pinned = gs.stratified_nodes(g.labels, 3, rng)
        m = train(gs.induced_view(g, pinned), pinned, epochs=20)
        s = gs.node_sequence(g, rng, n_cal=40 - len(pinned) - 3, pinned=pinned)
        recs = en.evaluate_sequence(g, s, m, en.EngineConfig())
        assert len(recs) == 3
        assert np.all(np.diff([r.timestep for r in recs]) > 0)

    def test_fixed_end_equals_transductive(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig()
        recs = en.evaluate_sequence(g, s, m, cfg, en.EvalPolicy.fixed_time(len(s)))
        assert {r.timestep for r in recs} == {len(s)}
        full = gs.view_at(s, g, len(s))
        sets = en.nodeex_predict(cal_of(g, s), full, m, cfg, [r.node_id for r in recs])
        assert all(sets[r.node_id] == r.label_set for r in recs)

    def test_records_are_auditable(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig()
        recs = en.evaluate_sequence(g, s, m, cfg, engines=(en.NAIVE, en.NODEEX, en.NAPS))
        for r in recs[::17]:
            if not r.applicable:
                continue
            scores = compute_scores(gs.view_at(s, g, r.timestep), m, "aps", 0, 0)
            assert_auditable({r.node_id: r.label_set}, scores, r.q_used)
            assert r.covered == (r.true_label in r.label_set)

    def test_each_node_once(self, setup):
        g, s, m = setup
        recs = en.evaluate_sequence(g, s, m, en.EngineConfig(), en.EvalPolicy.random_time(1))
        ids = [r.node_id for r in recs]
        assert len(ids) == len(set(ids)) == len(gs.eval_candidates(s, g))

    def test_bad_mask(self, setup):
        g, s, m = setup
        v = int(s.order[-1])
        with pytest.raises(ValueError):
            en.evaluate_sequence(g, s, m, en.EngineConfig(), mask={v: s.t0_cal + 1})

    def test_unknown_engine(self, setup):
        g, s, m = setup
        with pytest.raises(ValueError):
            en.evaluate_sequence(g, s, m, en.EngineConfig(), engines=("magic",))

    def test_step_stats(self, setup):
        g, s, m = setup
        stats = []
        recs = en.evaluate_sequence(g, s, m, en.EngineConfig(), step_stats=stats)
        assert [st.t for st in stats] == sorted({r.timestep for r in recs})
        assert all(st.emd_cal >= 0 and st.emd_test >= 0 for st in stats)

    def test_coverage_matrix_diagonal_matches_arrival_run(self, setup):
        g, s, m = setup
        cfg = en.EngineConfig()
        cm = en.coverage_matrix(g, s, m, cfg)
        recs = en.evaluate_sequence(g, s, m, cfg)
        by_node = {r.node_id: int(r.covered) for r in recs}
        diag = cm.diagonal()
        assert [by_node[int(v)] for v in cm.nodes] == diag.tolist()
        # not-yet-arrived entries are marked absent
        for i, a in enumerate(cm.arrival):
            assert np.all(cm.entries[i, cm.steps < a] == -1)

    def test_coverage_matrix_rejects_naps(self, setup):
        g, s, m = setup
        with pytest.raises(ValueError):
            en.coverage_matrix(g, s, m, en.EngineConfig(engine=en.NAPS))

    def test_naive_threshold_constant(self, setup):
        g, s, m = setup
        recs = en.evaluate_sequence(g, s, m, en.EngineConfig(), engines=(en.NAIVE,))
        assert len({r.q_used for r in recs}) == 1
        cal = cal_of(g, s)
        q = en.naive_calibrate(cal, gs.view_at(s, g, s.t0_cal), m, en.EngineConfig())
        assert recs[0].q_used == q == conformal_threshold(cal.frozen_scores, 0.1)
