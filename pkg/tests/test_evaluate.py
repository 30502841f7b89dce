import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amerlab import evaluate as ev
from amerlab import seqmodel as sm
from amerlab import vector_index as vi
from amerlab.errors import EmptyTargets, MissingCorpusIds, SinglePrediction, SingleTarget
from amerlab.synthgen import Split, generate
from amerlab.tensor_core import normalize


def test_mrecall_definition():
    targets = [1, 2, 3, 4, 5]
    assert ev.mrecall([1, 2, 3, 4, 5, 9, 9, 9, 9, 9], targets, 10) == 1
    assert ev.mrecall([1, 2, 3, 4, 6, 7, 8, 9, 10, 11], targets, 10) == 0
    assert ev.mrecall([3, 1, 5, 0, 0], targets, 3) == 1
    assert ev.mrecall([3, 1, 0, 5], targets, 3) == 0
    with pytest.raises(EmptyTargets):
        ev.mrecall([1], [], 1)


@given(st.permutations(list(range(30))), st.integers(5, 30), st.integers(5, 30))
def test_mrecall_monotone_in_k(ranking, k1, k2):
    k1, k2 = sorted((k1, k2))
    targets = [0, 7, 13, 21, 29]
    assert ev.mrecall(ranking, targets, k2) >= ev.mrecall(ranking, targets, k1)


def test_round_robin_examples():
    assert ev.round_robin_merge([["a", "b", "c"], ["d", "e", "f"]], 4).ids.tolist() == ["a", "d", "b", "e"]
    assert ev.round_robin_merge([["a", "b"], ["a", "c"]], 3).ids.tolist() == ["a", "b", "c"]
    assert ev.round_robin_merge([[4, 5, 6, 7]], 2).ids.tolist() == [4, 5]
    rl = ev.round_robin_merge([[1, 2], [3]], 5)
    np.testing.assert_allclose(rl.scores, [1, 1 / 2, 1 / 3])


@given(st.lists(st.lists(st.integers(0, 15), max_size=10, unique=True), min_size=1, max_size=5),
       st.integers(1, 20))
def test_round_robin_properties(lists, k):
    out = ev.round_robin_merge(lists, k).ids.tolist()
    assert len(out) == len(set(out))
    assert len(out) == min(k, len({i for lst in lists for i in lst}))


def test_mmr_hand_example():
    sim_q = [0.9, 0.8, 0.7]
    sim_docs = [[1.0, 0.95, 0.1], [0.95, 1.0, 0.1], [0.1, 0.1, 1.0]]
    assert ev.mmr_order(sim_q, sim_docs, 0.5, 3).tolist() == [0, 2, 1]


@settings(max_examples=100)
@given(st.integers(0, 10**6), st.integers(1, 30))
def test_mmr_lambda_one_identity(seed, n):
    r = np.random.default_rng(seed)
    v = normalize(r.standard_normal((n, 6)))
    q = normalize(r.standard_normal(6))
    order = np.argsort(-(v @ q), kind="stable")
    cand = vi.RankedList(order, (v @ q)[order])
    out = ev.mmr_rerank(q, cand, v[order], 1.0, n)
    np.testing.assert_array_equal(out.ids, cand.ids)


def test_mmr_k1_is_top(rng):
    v = normalize(rng.standard_normal((10, 4)))
    sim_q = np.sort(rng.random(10))[::-1]
    for lam in (0.0, 0.3, 0.9):
        assert ev.mmr_order(sim_q, v @ v.T, lam, 1).tolist() == [0]


def test_diversity_bins_examples():
    e = np.eye(3)
    tight = np.stack([e[0], e[0]])
    wide = np.stack([e[0], -e[0]])
    stat, bins = ev.diversity_bins(np.stack([wide, tight]), "euclidean", 2)
    assert bins.tolist() == [1, 0] and stat[1] == 0.0
    with pytest.raises(SingleTarget):
        ev.diversity_bins(np.ones((3, 1, 4)), "cosine", 2)


def test_linear_targets_mean_cosine_distance_above_one():
    g = generate("multi", "linear", 100, 20, 8, 5, 1000, 0)
    stat = ev.pairwise_statistic(g.splits[Split.TRAIN].targets, "cosine")
    assert stat.mean() > 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 40), st.integers(2, 6))
def test_bins_partition(seed, n, bins):
    r = np.random.default_rng(seed)
    stat, b = ev.diversity_bins(r.standard_normal((n, 3, 4)), "euclidean", bins)
    sizes = np.bincount(b, minlength=bins)
    assert sizes.max() - sizes.min() <= 1 and sizes.sum() == n
    for i in range(bins - 1):
        if sizes[i] and sizes[i + 1]:
            assert stat[b == i].max() <= stat[b == i + 1].min()


def test_output_diversity():
    e = np.eye(3)
    assert ev.output_diversity(np.stack([np.stack([e[0]] * 3)])) == pytest.approx(1.0)
    assert ev.output_diversity(np.stack([np.stack([e[0], -e[0]])])) == pytest.approx(-1.0)
    with pytest.raises(SinglePrediction):
        ev.output_diversity(np.ones((2, 1, 3)))
    g = generate("multi", "linear", 20, 5, 8, 5, 200, 0)
    t = g.splits[Split.TEST].targets[:1]
    assert ev.output_diversity(t) == pytest.approx(ev.mean_pairwise_similarity(t))


class _Oracle:
    """Stands in for decode: emits fixed per-query embeddings."""

    def __init__(self, monkeypatch, table):
        monkeypatch.setattr(sm, "decode", lambda params, cfg, x, m: table[: len(x), :m])


@pytest.fixture
def small():
    g = generate("multi", "linear", 60, 40, 8, 5, 2000, 1)
    return g, vi.build(g.corpus)


def test_perfect_model_scores_one(monkeypatch, small):
    g, index = small
    test = g.splits[Split.TEST]
    _Oracle(monkeypatch, test.unit_targets())
    rep = ev.evaluate_model(None, sm.ModelConfig(d=8), test, index, ev.EvalConfig(), ev.AMER)
    assert rep.overall == {10: 1.0, 100: 1.0}
    for k in (10, 100):
        weighted = sum(s * m for s, m in zip(rep.bin_sizes, rep.per_bin[k])) / rep.n_queries
        assert weighted == pytest.approx(rep.overall[k])


def test_fixed_vector_model_fails_on_linear(monkeypatch, small):
    g, index = small
    test = g.splits[Split.TEST]
    fixed = np.tile(normalize(np.ones(8)), (len(test), 5, 1))
    _Oracle(monkeypatch, fixed)
    rep, lists = ev.evaluate_model(None, sm.ModelConfig(d=8), test, index, ev.EvalConfig(), ev.AMER,
                                   return_lists=True)
    direct, _ = index.search_arrays(fixed[:1, 0], 100)
    np.testing.assert_array_equal(lists[0].ids, direct[0])
    assert rep.overall[10] == 0.0
    assert rep.output_diversity == pytest.approx(1.0)


def test_single_query_modes_and_determinism(small):
    g, index = small
    cfg = sm.ModelConfig(d=8, h=16, layers=1, heads=2)
    params = sm.init_model(cfg, 0)
    test, val = g.splits[Split.TEST], g.splits[Split.VAL]
    a = ev.evaluate_model(params, cfg, test, index, ev.EvalConfig(), ev.SINGLE_QUERY_MMR, val)
    b = ev.evaluate_model(params, cfg, test, index, ev.EvalConfig(), ev.SINGLE_QUERY_MMR, val)
    assert a.to_json() == b.to_json()
    assert a.mmr_lambda in (0.5, 0.75, 0.9)
    sq = ev.evaluate_model(params, cfg, test, index, ev.EvalConfig(), ev.SINGLE_QUERY)
    assert sq.output_diversity is None


def test_missing_corpus_ids(small):
    g, _ = small
    test = g.splits[Split.TEST]
    tiny = vi.build(g.corpus.vectors[:10])
    with pytest.raises(MissingCorpusIds):
        ev.evaluate_model(None, sm.ModelConfig(d=8), test, tiny, ev.EvalConfig())


def test_report_serialization(monkeypatch, small, tmp_path):
    g, index = small
    test = g.splits[Split.TEST]
    _Oracle(monkeypatch, test.unit_targets())
    rep = ev.evaluate_model(None, sm.ModelConfig(d=8), test, index, ev.EvalConfig())
    rep.save(tmp_path / "r.json", tmp_path / "r.csv")
    back = ev.EvalReport.from_json((tmp_path / "r.json").read_text())
    assert back.overall == rep.overall and back.per_bin == rep.per_bin
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "k,bin,metric,n_queries,mrecall"
    assert len(lines) == 1 + 2 * (1 + 4)


def test_external_run_ingestion(tmp_path, small):
    g, index = small
    test = g.splits[Split.TEST]
    lists = index.batch_search(test.unit_targets()[:, 0], 100, queries_tags=test.query_ids.tolist())
    vi.write_run(tmp_path / "x.run", lists)
    ev.write_targets(tmp_path / "x.tgt", test.query_ids, test.target_ids)
    rep = ev.evaluate_run(vi.read_run(tmp_path / "x.run"), ev.read_targets(tmp_path / "x.tgt"),
                          g.corpus.vectors, ev.EvalConfig(ks=(1, 10)))
    assert rep.n_queries == len(test)
    assert rep.overall[1] == 1.0  # the first target is its own nearest neighbour
