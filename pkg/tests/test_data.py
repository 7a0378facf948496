import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssept.data import (
    IdMaps, InteractionRecord, ParseError, UserSequence, WindowConfig, build_sequences,
    filter_min_counts, left_pad, load_interactions, load_sequence_cache, pad_and_window,
    save_sequence_cache, sequence_stats, split_leave_last_two, training_pairs,
)


def test_tsv_line():
    rep = load_interactions(io.StringIO("u1 \t i9 \t 100\n"), "\t")
    assert rep.records == [InteractionRecord("u1", "i9", 100)]
    assert rep.malformed == []


def test_movielens_line_drops_rating():
    rep = load_interactions(io.StringIO("1::1193::5::978300760\n"), "movielens")
    assert rep.records == [InteractionRecord("1", "1193", 978300760)]


def test_empty_file():
    rep = load_interactions(io.StringIO(""))
    assert rep.records == [] and rep.malformed == []


def test_malformed_lines_counted_and_strict_raises():
    text = "a\tb\t1\nbroken line\na\tc\t-5\n\na\td\t2\n"
    rep = load_interactions(io.StringIO(text))
    assert [r.item for r in rep.records] == ["b", "d"]
    assert rep.malformed == [2, 3]
    with pytest.raises(ParseError) as err:
        load_interactions(io.StringIO(text), strict=True)
    assert err.value.line_number == 2


def test_load_from_path(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("u,i,7\n", encoding="utf-8")
    assert load_interactions(p, "comma").records == [InteractionRecord("u", "i", 7)]


def test_sequences_sorted_by_timestamp():
    recs = [InteractionRecord("u", "a", 3), InteractionRecord("u", "b", 1), InteractionRecord("u", "c", 2)]
    seqs, maps = build_sequences(recs)
    assert [maps.index_to_item[i] for i in seqs[0].items] == ["b", "c", "a"]


def test_timestamp_ties_keep_file_order():
    recs = [InteractionRecord("u", "x", 5), InteractionRecord("u", "y", 5), InteractionRecord("u", "w", 1)]
    seqs, maps = build_sequences(recs)
    assert [maps.index_to_item[i] for i in seqs[0].items] == ["w", "x", "y"]


def test_id_maps_reserve_zero_and_round_trip():
    rng = np.random.default_rng(0)
    recs = [InteractionRecord(f"u{rng.integers(5)}", f"i{rng.integers(9)}", int(rng.integers(100)))
            for _ in range(60)]
    seqs, maps = build_sequences(recs)
    assert maps.index_to_user[0] is None and maps.index_to_item[0] is None
    assert 0 not in maps.user_to_index.values() and 0 not in maps.item_to_index.values()
    for raw, idx in maps.item_to_index.items():
        assert maps.index_to_item[idx] == raw
    rebuilt = Counter((maps.index_to_user[s.user], maps.index_to_item[i]) for s in seqs for i in s.items)
    assert rebuilt == Counter((r.user, r.item) for r in recs)


def test_filter_min_counts():
    recs = [InteractionRecord("u1", "a", 1), InteractionRecord("u1", "b", 2),
            InteractionRecord("u2", "a", 1)]
    assert filter_min_counts(recs, min_user=2) == recs[:2]
    assert filter_min_counts(recs, min_item=2) == [recs[0], recs[2]]


def test_split_examples():
    sp = split_leave_last_two([UserSequence(1, [1, 2, 3, 4]), UserSequence(2, [5, 6]), UserSequence(3, [7])])
    assert sp.train[1] == [1, 2] and sp.valid[1] == 3 and sp.test[1] == 4
    assert sp.train[2] == [5, 6] and 2 not in sp.valid and 2 not in sp.test
    assert sp.train[3] == [7] and 3 not in sp.test
    assert sp.full_history[1] == {1, 2, 3, 4}
    assert sp.history_before(1, "valid") == [1, 2]
    assert sp.history_before(1, "test") == [1, 2, 3]
    assert (sp.n_users, sp.n_items) == (3, 7)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=40))
def test_split_reassembles_sequence(items):
    sp = split_leave_last_two([UserSequence(1, items)])
    tail = [sp.valid[1], sp.test[1]] if 1 in sp.test else []
    assert sp.train[1] + tail == items


def test_sequence_stats():
    st_ = sequence_stats([UserSequence(1, [1, 2, 3]), UserSequence(2, [2])])
    assert st_ == {"users": 2, "items": 3, "interactions": 4, "avg_len": 2.0, "max_len": 3}


def test_left_pad_example():
    assert left_pad([7, 9], 4).tolist() == [0, 0, 7, 9]


def test_window_exact_fit_is_identity():
    items = list(range(1, 11))
    for p in (0.0, 0.5, 1.0):
        assert pad_and_window(items, WindowConfig(10, p), np.random.default_rng(0)).tolist() == items


def test_window_most_recent_when_no_sampling():
    items = list(range(1, 301))
    w = pad_and_window(items, WindowConfig(100, 0.0), np.random.default_rng(0))
    assert w.tolist() == list(range(201, 301))


def test_window_empty_raises():
    with pytest.raises(ValueError):
        pad_and_window([], WindowConfig(4, 0.0), np.random.default_rng(0))


def test_window_config_validation():
    with pytest.raises(ValueError):
        WindowConfig(1, 0.0)
    with pytest.raises(ValueError):
        WindowConfig(5, 1.5)


def test_window_start_uniform():
    t, T, draws = 30, 10, 100_000
    items = list(range(1, t + 1))
    rng = np.random.default_rng(42)
    cfg = WindowConfig(T, 1.0)
    starts = Counter(int(pad_and_window(items, cfg, rng)[0]) for _ in range(draws))
    k = t - T
    assert set(starts) == set(range(1, k + 1))  # window never runs past the end
    p = 1.0 / k
    sigma = np.sqrt(draws * p * (1 - p))
    for v in range(1, k + 1):
        assert abs(starts[v] - draws * p) <= 5 * sigma


def test_training_pairs_examples():
    x, y, m = training_pairs(np.array([0, 0, 5, 6]))
    assert x.tolist() == [0, 0, 5] and y.tolist() == [0, 5, 6] and m.tolist() == [False, False, True]
    x, y, m = training_pairs(np.array([1, 2, 3]))
    assert list(zip(x[m], y[m])) == [(1, 2), (2, 3)]
    assert not training_pairs(np.zeros(4, dtype=int))[2].any()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=12), st.integers(2, 8))
def test_training_targets_never_padding(items, T):
    x, y, m = training_pairs(left_pad(items, T))
    assert np.all(y[m] != 0) and np.all(x[m] != 0)


def test_sequence_cache_round_trip(tmp_path):
    recs = [InteractionRecord("ü1", "film:α", 3), InteractionRecord("u2", "b", 1),
            InteractionRecord("ü1", "b", 4)]
    seqs, maps = build_sequences(recs)
    path = tmp_path / "seq.bin"
    save_sequence_cache(path, seqs, maps)
    assert path.read_bytes()[:4] == b"SEQ1"
    seqs2, maps2 = load_sequence_cache(path)
    assert seqs2 == seqs
    assert maps2.index_to_user == maps.index_to_user and maps2.index_to_item == maps.index_to_item


def test_sequence_cache_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"NOPE")
    with pytest.raises(ParseError):
        load_sequence_cache(p)
    p.write_bytes(b"SEQ1" + b"\x05\x00")
    with pytest.raises(ParseError):
        load_sequence_cache(p)


def test_id_maps_preload():
    maps = IdMaps(["a", "b"], ["x"])
    assert maps.user_index("b") == 2 and maps.item_index("y") == 2 and maps.n_items == 2
