import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from avsekd.peranalysis import (
    CATEGORIES,
    DEFAULT_CATEGORY_MAP,
    DELETE,
    INSERT,
    MATCH,
    SUBSTITUTE,
    PhoneSequence,
    align,
    alignment_cost,
    per_by_category,
    per_report,
    per_table,
    read_category_map,
    read_phone_file,
    write_phone_file,
)

from phone_oracle import canonical_pairs, code, distance_tables, naive_distance

seqs = st.lists(st.sampled_from("abcd"), max_size=7).map(tuple)


def all_sequences(max_len, alphabet="abcd"):
    for n in range(max_len + 1):
        yield from itertools.product(alphabet, repeat=n)


def test_identical_sequences_all_match():
    ops = align("pak", "pak")
    assert [o.op for o in ops] == [MATCH] * 3
    assert alignment_cost(ops) == 0


def test_single_deletion():
    ops = align("abc", "ac")
    assert [o.op for o in ops] == [MATCH, DELETE, MATCH]
    assert ops[1].ref == "b"


def test_tie_break_prefers_substitution_over_indels():
    ops = align("ab", "bc")
    assert [o.op for o in ops] == [SUBSTITUTE, SUBSTITUTE]


def test_empty_sides():
    assert [o.op for o in align("", "xy")] == [INSERT, INSERT]
    assert [o.op for o in align("xy", "")] == [DELETE, DELETE]
    assert align("", "") == []


def test_table_oracle_agrees_with_naive_recursion():
    tables = distance_tables(4)
    alphabet = "abcd"
    for a in all_sequences(3):
        for b in all_sequences(3):
            ia = tuple(alphabet.index(s) for s in a)
            ib = tuple(alphabet.index(s) for s in b)
            assert tables[len(a), len(b)][code(ia), code(ib)] == naive_distance(a, b)


def test_exhaustive_small_against_oracle():
    """Every pair of length <= 4 over four symbols, no reduction."""
    tables = distance_tables(4)
    alphabet = "abcd"
    for a in all_sequences(4):
        ia = code(tuple(alphabet.index(s) for s in a))
        for b in all_sequences(4):
            ib = code(tuple(alphabet.index(s) for s in b))
            assert alignment_cost(align(a, b)) == tables[len(a), len(b)][ia, ib]


@settings(max_examples=300, deadline=None)
@given(seqs, seqs, st.permutations("abcd"))
def test_alignment_invariant_to_relabelling(a, b, perm):
    relabel = dict(zip("abcd", perm))
    ops = align(a, b)
    mapped = align([relabel[s] for s in a], [relabel[s] for s in b])
    assert [o.op for o in ops] == [o.op for o in mapped]


@settings(max_examples=300, deadline=None)
@given(seqs, seqs)
def test_alignment_reconstructs_both_sequences(a, b):
    ops = align(a, b)
    assert tuple(o.ref for o in ops if o.ref is not None) == a
    assert tuple(o.hyp for o in ops if o.hyp is not None) == b
    for o in ops:
        assert (o.op == MATCH) == (o.ref is not None and o.ref == o.hyp)
    if len(a) <= 5 and len(b) <= 5:
        assert alignment_cost(ops) == naive_distance(a, b)


def test_canonical_enumeration_covers_relabelling_classes():
    # pairs of length <= 2 over 4 symbols: count canonical classes directly
    seen = set()
    for n in range(3):
        for m in range(3):
            for a in itertools.product(range(4), repeat=n):
                for b in itertools.product(range(4), repeat=m):
                    mapping = {}
                    for s in a + b:
                        mapping.setdefault(s, len(mapping))
                    seen.add((tuple(mapping[s] for s in a), tuple(mapping[s] for s in b)))
    assert set(canonical_pairs(2)) == seen


def test_hand_example_velar():
    table = per_by_category([align("p a k".split(), "p a t".split())])
    assert table.per("Velar") == 100.0
    assert table.per("Labial") == 0.0
    assert table.per("Vowels") == 0.0
    assert table.insertions == 0


def test_identical_sequences_zero_per():
    table = per_by_category([align("p a k s".split(), "p a k s".split())])
    assert all(c.per in (0.0, None) for c in table.categories.values())
    assert table.overall == 0.0


def test_deletion_counts_against_reference_category():
    table = per_by_category([align(["k"], [])])
    assert table.per("Velar") == 100.0


def test_insertions_reported_separately():
    table = per_by_category([align(["a"], ["a", "k", "k"])])
    assert table.per("Vowels") == 0.0
    assert table.per("Velar") is None
    assert table.insertions == 2
    assert table.overall == 200.0


def test_unmapped_phone_rejected():
    with pytest.raises(ValueError, match="'qq'"):
        per_by_category([align(["qq"], ["a"])])
    with pytest.raises(ValueError, match="'zz'"):
        per_by_category([align(["a"], ["zz"])])


def test_pooling_and_order_invariance():
    rng = random.Random(4)
    phones = sorted(DEFAULT_CATEGORY_MAP)
    refs, hyps = {}, {}
    for i in range(100):
        ref = [rng.choice(phones) for _ in range(rng.randint(0, 8))]
        hyp = [p for p in ref if rng.random() > 0.2]
        hyp = [rng.choice(phones) if rng.random() < 0.2 else p for p in hyp]
        if rng.random() < 0.3:
            hyp.insert(rng.randint(0, len(hyp)), rng.choice(phones))
        refs[f"u{i}"] = PhoneSequence(f"u{i}", ref)
        hyps[f"u{i}"] = PhoneSequence(f"u{i}", hyp)
    table = per_table(refs, hyps)
    # direct global recount
    counts = {c: [0, 0] for c in CATEGORIES}
    insertions = 0
    for k in refs:
        for o in align(refs[k], hyps[k]):
            if o.op == INSERT:
                insertions += 1
                continue
            cat = DEFAULT_CATEGORY_MAP[o.ref]
            counts[cat][1] += 1
            counts[cat][0] += o.op != MATCH
    for c, (err, n) in counts.items():
        assert table.categories[c].errors == err and table.categories[c].ref_count == n
    assert table.insertions == insertions
    reversed_table = per_by_category(align(refs[k], hyps[k]) for k in reversed(list(refs)))
    assert reversed_table.to_tsv() == table.to_tsv()


def test_pooling_is_not_average_of_utterance_rates():
    refs = {"a": PhoneSequence("a", ["k"]), "b": PhoneSequence("b", ["k", "k", "k"])}
    hyps = {"a": PhoneSequence("a", []), "b": PhoneSequence("b", ["k", "k", "k"])}
    assert per_table(refs, hyps).per("Velar") == 25.0


def test_report_files(tmp_path):
    write_phone_file(tmp_path / "ref.txt", [PhoneSequence("u1", "p a k".split()), PhoneSequence("u2", ["s"])])
    write_phone_file(tmp_path / "hyp.txt", [PhoneSequence("u1", []), PhoneSequence("u2", [])])
    text = per_report(tmp_path / "ref.txt", tmp_path / "hyp.txt")
    lines = text.splitlines()
    assert lines[0] == "category\terrors\tref_phones\tper_percent"
    assert [l.split("\t")[0] for l in lines[1:11]] == list(CATEGORIES)
    rows = {l.split("\t")[0]: l.split("\t") for l in lines[1:]}
    for cat in ("Labial", "Vowels", "Velar", "Alveolar"):
        assert rows[cat][3] == "100.00"
    assert rows["Glottal"][3] == "-"
    assert rows["overall"][1:] == ["4", "4", "100.00"]
    assert per_report(tmp_path / "ref.txt", tmp_path / "hyp.txt") == text


def test_report_missing_counterpart(tmp_path):
    write_phone_file(tmp_path / "ref.txt", [PhoneSequence("u1", ["a"]), PhoneSequence("u2", ["a"])])
    write_phone_file(tmp_path / "hyp.txt", [PhoneSequence("u1", ["a"]), PhoneSequence("u3", ["a"])])
    with pytest.raises(ValueError, match=r"\['u2'\].*\['u3'\]"):
        per_report(tmp_path / "ref.txt", tmp_path / "hyp.txt")


def test_custom_category_map(tmp_path):
    (tmp_path / "map.tsv").write_text("# phone map\nx\tVelar\ny\tNasal\n", encoding="utf-8")
    cmap = read_category_map(tmp_path / "map.tsv")
    assert cmap == {"x": "Velar", "y": "Nasal"}
    table = per_by_category([align(["x", "y"], ["x"])], cmap)
    assert table.per("Nasal") == 100.0
    assert table.order()[-1] == "Nasal"
    (tmp_path / "bad.tsv").write_text("x Velar\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_category_map(tmp_path / "bad.tsv")


def test_phone_file_parsing(tmp_path):
    (tmp_path / "p.txt").write_text("u1 a b\n\nu2\n", encoding="utf-8")
    seqs_read = read_phone_file(tmp_path / "p.txt")
    assert seqs_read["u1"].phones == ("a", "b") and seqs_read["u2"].phones == ()
    (tmp_path / "dup.txt").write_text("u1 a\nu1 b\n", encoding="utf-8")
    with pytest.raises(ValueError, match="duplicate"):
        read_phone_file(tmp_path / "dup.txt")
    with pytest.raises(ValueError):
        PhoneSequence("u", ["a b"])
