from collections import Counter

import pytest

from api.errors import IndexDegenerateError, InvalidParameterError, RetrievalUnderflowError
from api.services.context_retrieval import (
    NEGATIVE,
    POSITIVE,
    build_index,
    classify_polarity,
    epoch_stream,
    retrieve,
    stable_hash,
)
from api.services.data_pipeline import LABEL_NAMES, SampleRecord


def make_record(i: int, positive: bool, split: str = "train") -> SampleRecord:
    labels = [False] * len(LABEL_NAMES)
    labels[3 if positive else 0] = True
    report = "Note: there is a focal opacity." if positive else "the lungs are clear."
    return SampleRecord(f"r{i:02d}", f"images/r{i:02d}.npy", report, tuple(labels), split)


@pytest.fixture
def corpus():
    # 10 training records, the last four with "No Finding"
    return [make_record(i, positive=i < 6) for i in range(10)]


def test_label_strategy_counts(corpus):
    index = build_index(corpus, "label")
    assert index.counts == {POSITIVE: 6, NEGATIVE: 4}
    assert index.polarity_of("r00") == POSITIVE
    assert index.polarity_of("r09") == NEGATIVE


def test_keyword_strategy_matches_labels_on_keyword_reports(corpus):
    assert build_index(corpus, "keyword").positives == build_index(corpus, "label").positives


def test_random_strategy_is_seeded(corpus):
    more = corpus + [make_record(i, positive=i % 2 == 0) for i in range(10, 40)]
    a = build_index(more, "random", seed=7)
    assert a == build_index(more, "random", seed=7)
    assert len(a.positives) + len(a.negatives) == len(more)
    for r in more:
        assert classify_polarity(r, "random", seed=7) == a.polarity_of(r.id)


def test_stable_hash_is_fixed():
    assert stable_hash("fixed", "r00") == stable_hash("fixed", "r00")
    assert stable_hash("fixed", "r00") != stable_hash("fixed", "r01")


def test_only_train_split_is_indexed(corpus):
    extra = [make_record(20, positive=True, split="val"), make_record(21, positive=False, split="test")]
    index = build_index(corpus + extra, "label")
    assert "r20" not in index.positives and "r21" not in index.negatives
    assert set(index.records) == {r.id for r in corpus}


def test_degenerate_index():
    with pytest.raises(IndexDegenerateError):
        build_index([make_record(i, positive=False) for i in range(5)], "label")


def test_empty_train_split():
    with pytest.raises(InvalidParameterError):
        build_index([make_record(0, positive=True, split="val")])


def test_unknown_strategy(corpus):
    with pytest.raises(InvalidParameterError):
        build_index(corpus, "nearest")


def test_fixed_pair_is_deterministic(corpus):
    index = build_index(corpus)
    first = retrieve(index, "r00", n_pairs=2, fixed_pair=True, seed=3)
    for epoch in range(5):
        again = retrieve(index, "r00", n_pairs=2, fixed_pair=True, seed=3, rng=epoch_stream(3, epoch))
        assert again.ids == first.ids


def test_balanced_and_polarity_correct(corpus):
    index = build_index(corpus)
    context = retrieve(index, "r07", n_pairs=3, fixed_pair=False, rng=epoch_stream(0, 1))
    assert context.n_pairs == 3
    positives, negatives = context.ids
    assert all(index.polarity_of(i) == POSITIVE for i in positives)
    assert all(index.polarity_of(i) == NEGATIVE for i in negatives)
    assert len(set(positives)) == 3 and len(set(negatives)) == 3


@pytest.mark.parametrize("query", ["r00", "r05", "r06", "r09"])
def test_query_never_in_its_own_context(corpus, query):
    index = build_index(corpus)
    rng = epoch_stream(0, 0)
    for _ in range(200):
        positives, negatives = retrieve(index, query, n_pairs=3, fixed_pair=False, rng=rng).ids
        assert query not in positives and query not in negatives


def test_underflow(corpus):
    index = build_index(corpus)
    # four negatives, one of them is the query
    with pytest.raises(RetrievalUnderflowError):
        retrieve(index, "r06", n_pairs=4)
    assert retrieve(index, "r00", n_pairs=4).n_pairs == 4
    with pytest.raises(RetrievalUnderflowError):
        retrieve(index, "r00", n_pairs=5)


def test_n_pairs_must_be_positive(corpus):
    with pytest.raises(InvalidParameterError):
        retrieve(build_index(corpus), "r00", n_pairs=0)


def test_non_fixed_draws_are_uniform(corpus):
    index = build_index(corpus)
    rng = epoch_stream(11, 0)
    counts = Counter()
    draws = 5000
    for _ in range(draws):
        counts[retrieve(index, "r00", n_pairs=1, fixed_pair=False, rng=rng).ids[0][0]] += 1
    assert set(counts) == {"r01", "r02", "r03", "r04", "r05"}
    for hits in counts.values():
        assert abs(hits / draws - 0.2) < 0.03


def test_epochs_draw_different_contexts(corpus):
    index = build_index(corpus)
    draws = {
        tuple(retrieve(index, "r00", n_pairs=2, fixed_pair=False, rng=epoch_stream(0, epoch)).ids[0])
        for epoch in range(10)
    }
    assert len(draws) > 1


@pytest.mark.parametrize("fixed_pair", [True, False])
def test_negative_seed_is_a_parameter_error(corpus, fixed_pair):
    index = build_index(corpus, "label")
    with pytest.raises(InvalidParameterError):
        retrieve(index, "r00", 1, fixed_pair=fixed_pair, seed=-1)
    with pytest.raises(InvalidParameterError):
        epoch_stream(-1, 0)
