import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerdistill.lexicon import (
    UNIFORM,
    MaskPair,
    Match,
    PhraseLexicon,
    WeightProfile,
    brute_force_matches,
    compile_matcher,
    extract_labels,
    mark_decisive,
    weights_from_masks,
)
from steerdistill.synthtask import EOS, Convention, sample_case, DEFAULT_STYLES

TOY = PhraseLexicon({0: [(1, 2), (1, 2, 3)], 1: [(2, 3)], 2: [(3,)], 3: [(4, 4, 4)]})


def test_empty_and_whole_sequence():
    m = compile_matcher(TOY)
    assert m.find([]) == []
    assert m.find([4, 4, 4]) == [Match(0, 3, 3)]


def test_overlapping_and_nested_matches():
    m = compile_matcher(TOY)
    got = m.find([1, 2, 3, 4, 4, 4, 4])
    assert got == brute_force_matches([1, 2, 3, 4, 4, 4, 4], TOY)
    assert Match(0, 2, 0) in got and Match(0, 3, 0) in got and Match(1, 3, 1) in got and Match(2, 3, 2) in got
    assert [x for x in got if x.label == 3] == [Match(3, 6, 3), Match(4, 7, 3)]


def test_lexicon_rejects_empty():
    with pytest.raises(ValueError):
        PhraseLexicon({0: [()]})
    with pytest.raises(ValueError):
        PhraseLexicon({0: []})


@settings(max_examples=100, deadline=None)
@given(
    st.dictionaries(st.integers(0, 5), st.lists(st.lists(st.integers(0, 4), min_size=1, max_size=4), min_size=1, max_size=3), min_size=1),
    st.lists(st.integers(0, 4), max_size=60),
)
def test_matcher_equals_brute_force_property(phrases, seq):
    lex = PhraseLexicon(phrases)
    assert compile_matcher(lex).find(seq) == brute_force_matches(seq, lex)


def test_surface_variants_cover_forms(task):
    lex = PhraseLexicon.for_vocab(task.vocab)
    v = task.vocab
    for label in range(v.n_labels):
        firsts = {p[0] for p in lex.phrases[label]}
        for form in ("lower", "cap", "space"):
            assert v.word_id(label, "head", form) in firsts
            assert v.word_id(label, "mod", form) in firsts


def test_lexicon_file_roundtrip(tmp_path, task):
    PhraseLexicon.save_surface(tmp_path / "l.json", task.vocab.surface_phrases())
    a = PhraseLexicon.load(tmp_path / "l.json", task.vocab)
    assert a.phrases == PhraseLexicon.for_vocab(task.vocab).phrases


def test_negated_phrases_are_not_counted(task):
    v = task.vocab
    m = compile_matcher(PhraseLexicon.for_vocab(v))
    head = v.word_id(4, "head")
    assert extract_labels([head], m, v.negation_ids) == {4}
    assert extract_labels([v.negation_ids[0], head], m, v.negation_ids) == set()


def test_mark_decisive_no_labels(task):
    m = compile_matcher(PhraseLexicon.for_vocab(task.vocab))
    rng = np.random.default_rng(0)
    c = sample_case(DEFAULT_STYLES[2], Convention(2, "space", "desc"), 0.0, rng, task.vocab)
    mk = mark_decisive(c.report, c.labels, m, EOS)
    assert not mk.path.any()
    assert mk.eos.sum() == 1 and mk.eos[-1]


def test_mark_decisive_three_token_phrase(task):
    v = task.vocab
    m = compile_matcher(PhraseLexicon.for_vocab(v))
    phrase = [v.word_id(3, "mod", "cap"), v.word_id(3, "head"), v.word_id(3, "suffix")]
    ref = [v.template(0, 0), v.template(0, 5)] + phrase + [v.closing(0), EOS]
    mk = mark_decisive(ref, [3], m, EOS)
    assert mk.path.sum() == 3
    assert mk.path[2:5].all()
    assert not mark_decisive(ref, [4], m, EOS).path.any()
    with pytest.raises(ValueError):
        mark_decisive(ref[:-1], [3], m, EOS)


def test_mark_decisive_union_of_overlaps():
    lex = PhraseLexicon({0: [(10, 11)], 1: [(11, 12)]})
    mk = mark_decisive([9, 10, 11, 12, 9, EOS], [0, 1], compile_matcher(lex), EOS)
    assert mk.path.tolist() == [False, True, True, True, False, False]


def test_weights_from_masks_profiles():
    path = np.zeros(10, bool)
    path[2] = True
    eos = np.zeros(10, bool)
    eos[9] = True
    mk = MaskPair(path, eos)
    assert weights_from_masks(mk, WeightProfile(8, 5)).tolist() == [1, 1, 8, 1, 1, 1, 1, 1, 1, 5]
    assert weights_from_masks(mk, UNIFORM).tolist() == [1.0] * 10
    w = weights_from_masks(mk, WeightProfile(0, 5))
    assert w[2] == 0 and w[9] == 5
    with pytest.raises(ValueError):
        WeightProfile(-1, 5)
    with pytest.raises(ValueError):
        MaskPair(np.zeros(3, bool), np.zeros(4, bool))
