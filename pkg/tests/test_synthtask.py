import numpy as np
import pytest

from steerdistill.synthtask import (
    BOS,
    COND,
    DEFAULT_STYLES,
    EOS,
    REPORT,
    SEP,
    Convention,
    Task,
    TaskConfig,
    Vocab,
    build_prompt,
    check_disjoint,
    parse_report,
    query_prompt,
    read_dataset,
    sample_case,
    write_dataset,
)

CONV = Convention(3, "cap", "asc")


def MATCHER(vocab):
    from steerdistill.lexicon import PhraseLexicon, compile_matcher

    return compile_matcher(PhraseLexicon.for_vocab(vocab))


def test_vocab_blocks_partition(task):
    v = task.vocab
    spans = sorted(v.blocks.values())
    assert spans[0][0] == 0 and spans[-1][1] == len(v)
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert len(set(v.words)) == len(v)


def test_vocab_roundtrip(tmp_path, task):
    task.vocab.save(tmp_path / "v.json")
    assert Vocab.load(tmp_path / "v.json").words == task.vocab.words


def test_zero_priors_give_no_findings(task, rng):
    v = task.vocab
    fa, fb = v.blocks["finding"]
    for _ in range(50):
        c = sample_case(DEFAULT_STYLES[2], CONV, 0.0, rng, v, flip_noise=0.0)
        assert c.labels == ()
        assert c.report[-1] == EOS
        heads = [t for t in c.report if fa <= t < fb]
        # only negated heads may appear
        for i, t in enumerate(c.report):
            if fa <= t < fb:
                assert c.report[i - 1] in v.negation_ids
        assert len(heads) == sum(t in v.negation_ids for t in c.report)


def test_expected_active_labels(task):
    rng = np.random.default_rng(1)
    n = [len(sample_case(DEFAULT_STYLES[0], CONV, 0.25, rng, task.vocab).labels) for _ in range(4000)]
    assert np.mean(n) == pytest.approx(3.5, abs=0.1)


def test_decisive_fraction_is_sparse():
    t = Task(TaskConfig(distill_size=10000, pool_size=0, val_size=0, test_size=0))
    from steerdistill.lexicon import PhraseLexicon, compile_matcher, mark_decisive

    m = compile_matcher(PhraseLexicon.for_vocab(t.vocab))
    dec = tot = 0
    for c in t.make_splits()["distill"]:
        mk = mark_decisive(c.report, c.labels, m, EOS)
        dec += int(mk.path.sum() + mk.eos.sum())
        tot += len(c.report)
    assert dec / tot < 0.3


def test_reports_parse_and_follow_convention(task):
    rng = np.random.default_rng(2)
    v = task.vocab
    for style in DEFAULT_STYLES:
        for _ in range(200):
            conv = Convention(int(rng.integers(style.closing_run[0], style.closing_run[1] + 1)), "space", "desc")
            c = sample_case(style, conv, 0.3, rng, v)
            p = parse_report(c.report, style, v)
            assert p["closing"] == conv.closing
            assert len(p["findings"]) == len(c.labels)
            for ph in p["findings"]:
                assert v.words[ph[0]].startswith("▁")
            found = [mt.label for mt in MATCHER(v).find(c.report) if c.report[mt.start - 1] not in v.negation_ids]
            assert list(dict.fromkeys(found)) == sorted(c.labels, reverse=True)


def test_parse_rejects_foreign_style(task):
    rng = np.random.default_rng(3)
    c = sample_case(DEFAULT_STYLES[0], Convention(1, "lower", "asc"), 0.3, rng, task.vocab)
    with pytest.raises(ValueError):
        parse_report(c.report, DEFAULT_STYLES[2], task.vocab)


def test_long_styles_are_longer(task):
    rng = np.random.default_rng(4)
    lens = {}
    for s in DEFAULT_STYLES:
        lens[s.style_id] = np.mean([len(task.sample(s.style_id, Convention(s.closing_run[0], "lower", "asc"), rng).report) for _ in range(300)])
    assert min(lens[2], lens[3]) > 1.5 * max(lens[0], lens[1])


def test_zero_shot_layout_is_query(splits):
    c = splits["test"][0]
    lay = build_prompt(c)
    assert lay.tokens[: lay.answer[0]] == query_prompt(c)
    assert lay.tokens[0] == BOS and lay.tokens[lay.condition[0]] == COND
    assert lay.tokens[lay.answer[0] - 1] == REPORT
    assert lay.tokens[lay.answer[0] :] == c.report


def test_demos_only_shift_offsets(splits):
    c, pool = splits["test"][1], splits["pool"]
    z = build_prompt(c)
    k8 = build_prompt(c, pool[:8])
    a, b = k8.answer
    assert k8.tokens[a:b] == z.tokens[z.answer[0] : z.answer[1]]
    assert b - a == z.answer[1] - z.answer[0]
    assert all(k8.tokens[e] == SEP for _, e in k8.demo_spans)
    assert EOS not in k8.tokens[: a]


def test_prompt_length_affine_in_shots(splits):
    c = splits["test"][2]
    d = splits["pool"][0]
    n = {k: len(build_prompt(c, [d] * k).tokens) for k in (0, 4, 8)}
    assert n[8] - n[4] == n[4] - n[0] == 4 * len(d.report)


def test_splits_deterministic_and_disjoint(task):
    a, b = task.make_splits(), task.make_splits()
    assert {k: [c.to_json() for c in v] for k, v in a.items()} == {k: [c.to_json() for c in v] for k, v in b.items()}
    check_disjoint(a)
    ids = {k: {c.id for c in v} for k, v in a.items()}
    assert not ids["distill"] & ids["pool"] and not ids["distill"] & ids["test"]
    bad = {"x": a["distill"][:2], "y": a["distill"][1:3]}
    with pytest.raises(ValueError):
        check_disjoint(bad)


def test_paper_scale_sizes_accepted():
    t = Task(TaskConfig(distill_size=1000, pool_size=20, val_size=10, test_size=200))
    s = t.make_splits()
    assert len(s["distill"]) == 1000 and len(s["test"]) == 200


def test_dataset_roundtrip(tmp_path, splits):
    write_dataset(tmp_path / "d.jsonl", splits["val"])
    back = read_dataset(tmp_path / "d.jsonl")
    assert [c.to_json() for c in back] == [c.to_json() for c in splits["val"]]


def test_pretrain_episode_masks(task, rng):
    toks, mask = task.sample_episode(rng, shots=3)
    assert len(toks) == len(mask)
    assert toks[-1] == EOS and mask[-1]
    assert not mask[0]
    assert all(mask[i] for i, t in enumerate(toks) if t == SEP)
    cond = toks.index(COND)
    assert not any(mask[cond : toks.index(REPORT) + 1])


def test_episode_respects_context(task, rng):
    toks, _ = task.sample_episode(rng, max_context=80, shots=8)
    assert len(toks) <= 80 or toks.count(SEP) == 0


def test_bad_task_config():
    with pytest.raises(ValueError):
        Task(TaskConfig(label_prior=0.0))
    with pytest.raises(ValueError):
        Task(TaskConfig(pretrain_style_weights=(1.0, 1.0)))
