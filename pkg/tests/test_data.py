from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srplr.data import (
    PAD,
    Interaction,
    ParseError,
    SequenceExample,
    SyntheticSpec,
    build_splits,
    compact_left,
    conjunctive_rule,
    generate_synthetic,
    k_core_filter,
    load_interactions,
    load_split,
    markov_table,
    mask_histories_batch,
    mask_history,
    sample_logic_negatives,
    sample_negatives_batch,
    save_split,
)


def brute_force_core(interactions, k):
    """Remove one offending user or item at a time until none is left."""
    alive = list(interactions)
    while True:
        users = Counter(x.user_id for x in alive)
        items = Counter(x.item_id for x in alive)
        bad_user = next((u for u, c in users.items() if c < k), None)
        if bad_user is not None:
            alive = [x for x in alive if x.user_id != bad_user]
            continue
        bad_item = next((i for i, c in items.items() if c < k), None)
        if bad_item is not None:
            alive = [x for x in alive if x.item_id != bad_item]
            continue
        return alive


def inter(pairs):
    return [Interaction(u, i, t) for t, (u, i) in enumerate(pairs)]


# -- loading ----------------------------------------------------------------


def test_load_three_rows(tmp_path):
    f = tmp_path / "log.tsv"
    f.write_text("u1\ti1\t10\nu2\ti2\t5\nu1\ti3\t11\n")
    got = load_interactions(f)
    assert got == [Interaction("u1", "i1", 10), Interaction("u2", "i2", 5), Interaction("u1", "i3", 11)]


def test_load_empty(tmp_path):
    f = tmp_path / "log.tsv"
    f.write_text("")
    assert load_interactions(f) == []


def test_load_missing_column_reports_line(tmp_path):
    f = tmp_path / "log.tsv"
    f.write_text("u1\ti1\t10\nu2\t5\n")
    with pytest.raises(ParseError) as exc:
        load_interactions(f)
    assert exc.value.lineno == 2


def test_load_bad_timestamp(tmp_path):
    f = tmp_path / "log.csv"
    f.write_text("u1,i1,yesterday\n")
    with pytest.raises(ParseError, match="timestamp"):
        load_interactions(f, format="csv")


def test_load_header_and_custom_columns(tmp_path):
    f = tmp_path / "log.csv"
    f.write_text("rating,item,who,when\n5,i1,u1,3\n4,i2,u1,1.0\n")
    got = load_interactions(f, format="csv", columns=("who", "item", "when"))
    assert got == [Interaction("u1", "i1", 3), Interaction("u1", "i2", 1)]


def test_load_without_timestamp_uses_order(tmp_path):
    f = tmp_path / "log.tsv"
    f.write_text("u1\ti1\nu1\ti2\n")
    got = load_interactions(f, columns=("user_id", "item_id", None))
    assert [x.timestamp for x in got] == [0, 1]


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_interactions(tmp_path / "nope.tsv")


def test_interaction_rejects_empty_ids():
    with pytest.raises(ValueError):
        Interaction("", "i1", 0)


# -- k-core -----------------------------------------------------------------


def test_kcore_unchanged_when_already_core():
    data = inter([(u, i) for u in "ab" for i in "xy"])
    assert k_core_filter(data, 2) == data


def test_kcore_empty():
    assert k_core_filter([], 5) == []


def test_kcore_cascade_needs_several_passes():
    pairs = [
        ("u1", "i1"), ("u1", "i2"), ("u1", "i3"),
        ("u2", "i1"), ("u2", "i2"), ("u2", "i3"),
        ("u3", "i1"), ("u3", "i2"), ("u3", "i3"),
        ("u4", "i4"), ("u4", "i5"), ("u4", "i6"),
        ("u5", "i4"), ("u5", "i5"), ("u5", "i6"),
        ("u6", "i5"), ("u6", "i6"),
    ]
    data = inter(pairs)
    # one pass only removes u6 (2 < 3) and i4 (2 < 3)
    got = k_core_filter(data, 3)
    assert got == brute_force_core(data, 3)
    assert {x.user_id for x in got} == {"u1", "u2", "u3"}


interaction_lists = st.lists(
    st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=100
).map(lambda ps: inter([(f"u{u}", f"i{i}") for u, i in ps]))


@settings(max_examples=200, deadline=None)
@given(data=interaction_lists, k=st.integers(1, 4))
def test_kcore_matches_brute_force(data, k):
    got = k_core_filter(data, k)
    assert got == brute_force_core(data, k)
    assert k_core_filter(got, k) == got


def test_kcore_rejects_k0():
    with pytest.raises(ValueError):
        k_core_filter([], 0)


# -- splits -----------------------------------------------------------------


def seq_interactions(user, items, start=0):
    return [Interaction(user, it, start + t) for t, it in enumerate(items)]


def decode(split, example):
    inv = {v: k for k, v in split.item_map.items()}
    return [inv[h] for h in example.history if h != PAD], inv[example.target]


def test_leave_one_out_definition():
    split = build_splits(seq_interactions("u", list("abcde")), 50)
    assert decode(split, split.test[0]) == (list("abcd"), "e")
    assert decode(split, split.valid[0]) == (list("abc"), "d")
    assert sorted(decode(split, e) for e in split.train) == [(["a"], "b"), (["a", "b"], "c")]


def test_truncation_keeps_last_max_len():
    items = [f"i{n:02d}" for n in range(52)]
    split = build_splits(seq_interactions("u", items), 50)
    hist, target = decode(split, split.test[0])
    assert target == items[51] and hist == items[1:51]
    assert len(split.test[0].history) == 50 and split.test[0].history_len == 50


def test_timestamp_order_and_tiebreak():
    data = [
        Interaction("u", "c", 5),
        Interaction("u", "a", 1),
        Interaction("u", "b", 1),  # tie with a: file order keeps a first
        Interaction("u", "d", 9),
    ]
    split = build_splits(data, 10)
    assert decode(split, split.test[0]) == (["a", "b", "c"], "d")


def test_short_users_dropped(caplog):
    data = seq_interactions("long", list("abcd")) + seq_interactions("short", list("ab"))
    split = build_splits(data, 10)
    assert split.user_count == 1 and split.dropped_users == 1
    assert "dropping 1 users" in caplog.text


def test_dense_ids_contiguous_and_padding_left():
    data = seq_interactions("u1", list("abcde")) + seq_interactions("u2", list("edcbx"))
    split = build_splits(data, 8)
    assert sorted(split.item_map.values()) == list(range(1, split.item_count + 1))
    for e in split.train + split.valid + split.test:
        assert e.target != PAD
        real = [h for h in e.history if h != PAD]
        assert e.history_len == len(real) >= 1
        assert e.history[: len(e.history) - len(real)] == (PAD,) * (len(e.history) - len(real))


def test_final_prefix_only_switch():
    split = build_splits(seq_interactions("u", list("abcdef")), 10, all_prefixes=False)
    assert [decode(split, e) for e in split.train] == [(list("abcd")[:3], "d")]


@settings(max_examples=60, deadline=None)
@given(lengths=st.lists(st.integers(3, 15), min_size=1, max_size=6), max_len=st.integers(1, 20))
def test_split_targets_partition_positions(lengths, max_len):
    data = []
    for u, L in enumerate(lengths):
        data += seq_interactions(f"u{u}", [f"x{u}_{t}" for t in range(L)], start=100 * u)
    split = build_splits(data, max_len)
    inv = {v: k for k, v in split.item_map.items()}
    for u, L in enumerate(lengths):
        dense_u = split.user_map[f"u{u}"]
        positions = []
        for e in split.train + split.valid + split.test:
            if e.user == dense_u:
                positions.append(int(inv[e.target].split("_")[1]))
                hist_pos = [int(inv[h].split("_")[1]) for h in e.history if h != PAD]
                assert hist_pos == sorted(hist_pos)
                assert hist_pos[-1] == positions[-1] - 1
        assert sorted(positions) == list(range(1, L))


def test_split_roundtrip(tmp_path):
    data = seq_interactions("u1", list("abcde")) + seq_interactions("u2", list("bcdea"))
    split = build_splits(data, 4)
    save_split(split, tmp_path / "s")
    back = load_split(tmp_path / "s")
    assert back.train == split.train and back.test == split.test and back.valid == split.valid
    assert back.item_map == split.item_map and back.fingerprint() == split.fingerprint()
    assert (tmp_path / "s" / "test.txt").read_text().splitlines()[0].count("\t") == 2


# -- negatives --------------------------------------------------------------


def ex(history, target, max_len=6):
    hist = (PAD,) * (max_len - len(history)) + tuple(history)
    return SequenceExample(1, hist, target, len(history))


def test_negatives_zero_and_forced():
    rng = np.random.default_rng(0)
    assert sample_logic_negatives(ex([1, 2], 3), 0, 6, rng) == []
    assert sample_logic_negatives(ex([1, 2, 3, 4], 5), 1, 6, rng) == [6]


def test_negatives_infeasible():
    with pytest.raises(ValueError):
        sample_logic_negatives(ex([1, 2, 3, 4], 5), 2, 6, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_logic_negatives(ex([1], 2), 11, 100, np.random.default_rng(0))


def test_negatives_deterministic_and_distinct():
    a = sample_logic_negatives(ex([1, 2], 3), 10, 50, np.random.default_rng(7))
    b = sample_logic_negatives(ex([1, 2], 3), 10, 50, np.random.default_rng(7))
    assert a == b and len(set(a)) == 10 and not set(a) & {1, 2, 3}


def _uniformity(draws, eligible):
    counts = Counter(draws)
    n, m = len(draws), len(eligible)
    p = 1 / m
    sigma = np.sqrt(n * p * (1 - p))
    assert set(counts) <= set(eligible)
    return max(abs(counts.get(i, 0) - n * p) for i in eligible) / sigma


def test_negatives_uniform():
    rng = np.random.default_rng(1)
    e = ex([1, 2, 3], 4)
    draws = [sample_logic_negatives(e, 1, 100, rng)[0] for _ in range(10_000)]
    assert _uniformity(draws, range(5, 101)) < 3.0 + 0.6  # 3 sigma, allowance for the max over 96 cells


def test_batch_negatives_uniform_and_valid():
    rng = np.random.default_rng(2)
    hist = np.tile(np.array([[0, 0, 1, 2, 3]]), (10_000, 1))
    tgt = np.full(10_000, 4)
    draws = sample_negatives_batch(hist, tgt, 1, 100, rng)[:, 0]
    assert _uniformity(list(draws), range(5, 101)) < 3.6
    multi = sample_negatives_batch(hist[:500], tgt[:500], 10, 20, rng)
    for row in multi:
        assert len(set(row)) == 10 and not set(row) & {1, 2, 3, 4}


def test_batch_negatives_infeasible():
    hist = np.array([[1, 2, 3, 4]])
    with pytest.raises(ValueError):
        sample_negatives_batch(hist, np.array([5]), 2, 6, np.random.default_rng(0))
    assert sample_negatives_batch(hist, np.array([5]), 1, 6, np.random.default_rng(0)).tolist() == [[6]]


# -- masking ----------------------------------------------------------------


def test_mask_r0_identity():
    e = ex([1, 2, 3], 4)
    assert mask_history(e, 0.0, np.random.default_rng(0)) == e


def test_mask_r1_keeps_last():
    e = ex([1, 2, 3], 4)
    got = mask_history(e, 1.0, np.random.default_rng(0))
    assert [h for h in got.history if h] == [3] and got.target == 4 and got.history_len == 1


def test_mask_rate():
    rng = np.random.default_rng(3)
    e = ex(list(range(1, 11)), 20, max_len=10)
    kept = sum(mask_history(e, 0.3, rng).history_len for _ in range(1000))
    n = 10_000
    masked = n - kept
    sigma = np.sqrt(n * 0.3 * 0.7)
    # the all-masked guard shifts the mean by at most 0.3**10 per example
    assert abs(masked - 0.3 * n) < 3 * sigma


@settings(max_examples=100, deadline=None)
@given(
    length=st.integers(1, 8),
    r=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_mask_never_empty_and_preserves_order(length, r, seed):
    e = ex(list(range(1, length + 1)), 99, max_len=8)
    got = mask_history(e, r, np.random.default_rng(seed))
    real = [h for h in got.history if h]
    assert real and real == sorted(real) and got.target == 99 and got.history_len == len(real)
    batch = mask_histories_batch(np.array([e.history] * 4), r, np.random.default_rng(seed))
    for row in batch:
        real = [h for h in row if h]
        assert real and real == sorted(real)
        assert list(row[: 8 - len(real)]) == [0] * (8 - len(real))


def test_mask_batch_r1_keeps_last():
    hist = np.array([[0, 0, 5, 6, 7], [1, 2, 3, 4, 5]])
    got = mask_histories_batch(hist, 1.0, np.random.default_rng(0))
    assert got.tolist() == [[0, 0, 0, 0, 7], [0, 0, 0, 0, 5]]


def test_compact_left():
    assert compact_left(np.array([[3, 0, 4, 0]])).tolist() == [[0, 0, 3, 4]]


# -- synthetic --------------------------------------------------------------


@pytest.mark.parametrize("rule", ["markov", "conjunctive"])
def test_synthetic_deterministic(rule):
    spec = SyntheticSpec(20, 12, rule, seed=5)
    assert generate_synthetic(spec) == generate_synthetic(spec)
    assert generate_synthetic(spec) != generate_synthetic(SyntheticSpec(20, 12, rule, seed=6))


def test_synthetic_markov_follows_onehot_table():
    spec = SyntheticSpec(30, 15, "markov", seed=1, deterministic=True)
    table = markov_table(spec)
    assert np.all(table[1:].max(axis=1) == 1.0)
    seqs = {}
    for x in generate_synthetic(spec):
        seqs.setdefault(x.user_id, []).append(int(x.item_id[1:]))
    for seq in seqs.values():
        for a, b in zip(seq, seq[1:]):
            assert table[a, b] == 1.0


def test_synthetic_conjunctive_oracle_accuracy():
    spec = SyntheticSpec(200, 30, "conjunctive", seed=9)
    rule = conjunctive_rule(spec)
    seqs = {}
    for x in generate_synthetic(spec):
        seqs.setdefault(x.user_id, []).append(int(x.item_id[1:]))
    hits, fired = 0, 0
    for seq in seqs.values():
        window, target = seq[-1 - spec.window : -1], seq[-1]
        # independent replay: scan planted pairs for co-occurrence
        expected = None
        for a, b, c in rule.pairs:
            if a in window and b in window:
                expected = c
                break
        if expected is None:
            expected = rule.fallback[window[-1]]
        else:
            fired += 1
        hits += expected == target
    assert hits == len(seqs)
    assert 0 < fired < len(seqs)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(4, 10)
    with pytest.raises(ValueError):
        SyntheticSpec(10, 10, "unknown")


def test_load_positional_columns(tmp_path):
    f = tmp_path / "ratings.csv"
    f.write_text("A1,B7,5.0,1300000000\nA2,B8,3.0,1200000000\n")
    got = load_interactions(f, format="csv", columns=(0, 1, 3))
    assert got == [Interaction("A1", "B7", 1300000000), Interaction("A2", "B8", 1200000000)]
