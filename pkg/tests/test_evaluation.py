"""Metric formulas, judgment parsing, batch evaluation, layer sweeps."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latefuse import (
    LayerSweepConfig,
    MetricSpec,
    Mode,
    Qrels,
    ScoringConfig,
    SequenceEmbedding,
    layer_sweep,
    ndcg_at_k,
    recall_at_k,
    run_eval,
)
from latefuse.errors import EmptyRelevantSet, MissingLayer, MissingQrels


def random_emb(rng, n, dim, seq_id=0, layer_id=0):
    pooled = rng.standard_normal(dim)
    pooled /= np.linalg.norm(pooled)
    return SequenceEmbedding(
        seq_id=seq_id, layer_id=layer_id,
        pooled=pooled.astype(np.float32),
        tokens=rng.standard_normal((n, dim)).astype(np.float32),
        roles=np.zeros(n, np.uint8),
    )


class TestRecall:
    def test_hand_value(self):
        assert recall_at_k([1, 2, 3], {2, 3}, k=2) == 0.5

    def test_short_relevant_set_can_reach_one(self):
        assert recall_at_k([5, 1, 2], {5}, k=10) == 1.0

    def test_no_hits(self):
        assert recall_at_k([1, 2, 3], {9}, k=3) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.integers(0, 30), min_size=1, max_size=20, unique=True),
        st.sets(st.integers(0, 30), min_size=1, max_size=10),
        st.integers(1, 25),
    )
    def test_bounded_and_saturating(self, ranked, relevant, k):
        # note: dividing by min(k, relevant) makes recall non-monotone in k,
        # so only boundedness and the full-coverage case are invariants
        r = recall_at_k(ranked, relevant, k)
        assert 0.0 <= r <= 1.0
        if relevant <= set(ranked[:k]):
            assert r == 1.0


class TestNDCG:
    def test_single_relevant_at_rank_two(self):
        got = ndcg_at_k([7, 3, 9], {3: 1}, k=3)
        assert got == pytest.approx(1.0 / math.log2(3.0), abs=1e-12)
        assert got == pytest.approx(0.6309297535714575, abs=1e-12)

    def test_graded_frozen_value(self):
        # ranking [20, 10, 30] against gains {10: 3, 20: 2, 30: 1}
        got = ndcg_at_k([20, 10, 30], {10: 3, 20: 2, 30: 1}, k=3)
        assert got == pytest.approx(0.9224945116765986, abs=1e-12)

    def test_ideal_ordering_scores_one(self):
        assert ndcg_at_k([10, 20, 30], {10: 3, 20: 2, 30: 1}, k=3) == pytest.approx(
            1.0, abs=1e-12)

    def test_zero_gain_entries_do_not_count(self):
        assert ndcg_at_k([4, 1], {1: 2, 4: 0}, k=2) == pytest.approx(
            1.0 / math.log2(3.0), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.integers(0, 30), min_size=1, max_size=20, unique=True),
        st.dictionaries(st.integers(0, 30), st.integers(0, 5), min_size=1, max_size=10),
        st.integers(1, 25),
    )
    def test_bounded(self, ranked, gains, k):
        if not any(g > 0 for g in gains.values()):
            gains[0] = 1
        v = ndcg_at_k(ranked, gains, k)
        assert 0.0 <= v <= 1.0 + 1e-12


class TestQrels:
    def test_requires_positive_gain(self):
        with pytest.raises(EmptyRelevantSet):
            Qrels({1: {5: 0}})

    def test_rejects_negative_gain(self):
        with pytest.raises(ValueError):
            Qrels({1: {5: -1}})

    def test_relevant_excludes_zero_gain(self):
        q = Qrels({1: {5: 2, 6: 0}})
        assert q.relevant_for(1) == {5}

    def test_missing_query(self):
        q = Qrels({1: {5: 1}})
        with pytest.raises(MissingQrels):
            q.gains_for(2)

    def test_from_text(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text(
            "# comment line\n"
            "1 10 3\n"
            "1 11\n"
            "\n"
            "2 12 1  # trailing comment\n"
        )
        q = Qrels.from_text(path)
        assert q.gains_for(1) == {10: 3, 11: 1}
        assert q.gains_for(2) == {12: 1}

    def test_from_text_bad_line(self, tmp_path):
        path = tmp_path / "qrels.txt"
        path.write_text("1 2 3 4\n")
        with pytest.raises(ValueError):
            Qrels.from_text(path)


class TestMetricSpec:
    def test_parse(self):
        spec = MetricSpec.parse("NDCG@5")
        assert (spec.name, spec.k) == ("ndcg", 5)
        assert str(spec) == "ndcg@5"

    @pytest.mark.parametrize("bad", ["ndcg", "ndcg@0", "mrr@3", "recall@x"])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            MetricSpec.parse(bad)


def eval_fixture(seed=0, n_corpus=12, n_queries=4, dim=8):
    rng = np.random.default_rng(seed)
    corpus = [random_emb(rng, 5, dim, seq_id=i) for i in range(n_corpus)]
    queries = [random_emb(rng, 3, dim, seq_id=100 + i) for i in range(n_queries)]
    qrels = Qrels({q.seq_id: {int(rng.integers(n_corpus)): 1, 0: 1} for q in queries})
    return corpus, queries, qrels


class TestRunEval:
    def test_macro_is_mean_of_per_query(self):
        corpus, queries, qrels = eval_fixture()
        report = run_eval(corpus, queries, qrels, ScoringConfig(mode=Mode.HYBRID),
                          metrics=("recall@3", "ndcg@5"))
        for metric in report.metric_names:
            vals = list(report.per_query[metric].values())
            assert report.macro[metric] == pytest.approx(np.mean(vals), abs=1e-12)
            assert len(vals) == len(queries)

    def test_missing_judgments_fail_before_scoring(self):
        corpus, queries, _ = eval_fixture()
        sparse = Qrels({queries[0].seq_id: {0: 1}})
        with pytest.raises(MissingQrels):
            run_eval(corpus, queries, sparse, ScoringConfig(mode=Mode.LATE))

    def test_worker_count_does_not_change_results(self):
        corpus, queries, qrels = eval_fixture(seed=1)
        cfg = ScoringConfig(mode=Mode.HYBRID)
        base = run_eval(corpus, queries, qrels, cfg, metrics=("ndcg@5",))
        threaded = run_eval(corpus, queries, qrels, cfg, metrics=("ndcg@5",), workers=4)
        assert base.per_query == threaded.per_query

    def test_single_equals_hybrid_with_zero_weight(self):
        corpus, queries, qrels = eval_fixture(seed=2)
        single = run_eval(corpus, queries, qrels, ScoringConfig(mode=Mode.SINGLE),
                          metrics=("recall@5", "ndcg@5"))
        zeroed = run_eval(corpus, queries, qrels,
                          ScoringConfig(mode=Mode.HYBRID, hybrid_weight=0.0),
                          metrics=("recall@5", "ndcg@5"))
        assert single.per_query == zeroed.per_query

    def test_report_serialization(self):
        corpus, queries, qrels = eval_fixture(seed=3)
        report = run_eval(corpus, queries, qrels, ScoringConfig(mode=Mode.LATE),
                          metrics=("ndcg@5",))
        records = report.to_records()
        assert sum(1 for r in records if r["type"] == "macro") == 1
        assert sum(1 for r in records if r["type"] == "query") == len(queries)
        assert "ndcg@5" in report.to_table()


def multilayer_fixture(seed=4, layers=(0, 1, 2)):
    rng = np.random.default_rng(seed)
    corpus, queries = [], []
    for layer in layers:
        for i in range(10):
            corpus.append(random_emb(rng, 4, 8, seq_id=i, layer_id=layer))
        for i in range(3):
            queries.append(random_emb(rng, 3, 8, seq_id=100 + i, layer_id=layer))
    qrels = Qrels({100 + i: {i: 1} for i in range(3)})
    return corpus, queries, qrels


class TestLayerSweep:
    def test_last_layer_row_matches_run_eval(self):
        corpus, queries, qrels = multilayer_fixture()
        rows = layer_sweep(corpus, queries, qrels,
                           LayerSweepConfig(mode=Mode.LATE), metrics=("ndcg@5",))
        assert len(rows) == 1
        assert rows[0].pool_layer == 2 and rows[0].token_layer == 2
        last_corpus = [e for e in corpus if e.layer_id == 2]
        last_queries = [e for e in queries if e.layer_id == 2]
        direct = run_eval(last_corpus, last_queries, qrels,
                          ScoringConfig(mode=Mode.LATE), metrics=("ndcg@5",))
        assert rows[0].macro["ndcg@5"] == pytest.approx(direct.macro["ndcg@5"], abs=1e-12)

    def test_multiple_token_layers(self):
        corpus, queries, qrels = multilayer_fixture()
        rows = layer_sweep(corpus, queries, qrels,
                           LayerSweepConfig(pool_layer=2, token_layers=(0, 1, 2),
                                            mode=Mode.HYBRID))
        assert [r.token_layer for r in rows] == [0, 1, 2]
        assert all(r.pool_layer == 2 for r in rows)

    def test_unknown_layer(self):
        corpus, queries, qrels = multilayer_fixture()
        with pytest.raises(MissingLayer):
            layer_sweep(corpus, queries, qrels,
                        LayerSweepConfig(pool_layer=9, token_layers=(0,)))
