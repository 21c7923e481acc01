import csv

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from helpers import constant_model
from oracles import slow_bleu, slow_lcs, slow_rouge_l
from steerdistill.evalkit import (
    ALL_ABLATIONS,
    CUMULATIVE,
    EOS_SWEEP,
    GROUPS,
    PATH_SWEEP,
    CostModel,
    EOSProfile,
    ablation_by_id,
    ablation_suite,
    bleu,
    eos_profile,
    finding_f1,
    fit_cost_ratio,
    flops_proxy,
    flops_ratio,
    lcs_length,
    length_stats,
    rouge_l,
    score_generations,
    write_profile,
    write_table,
)
from steerdistill.lexicon import PhraseLexicon, compile_matcher
from steerdistill.synthtask import EOS, build_prompt

TABLE6_TOKENS = (413, 724, 1036, 1665, 2913)
TABLE6_RATIOS = (1.00, 1.77, 2.56, 4.22, 7.69)

A, B, C, D, X = range(5)


def test_bleu_hand_examples():
    assert bleu([[A, B, C, D]], [[A, B, C, D]]) == pytest.approx([100.0] * 4)
    assert bleu([[]], [[A, B]]) == [0.0] * 4
    assert bleu([[A, B, C, D]], [[A, B, X, D]], 1)[0] == pytest.approx(75.0)


def test_rouge_hand_examples():
    assert rouge_l([A, B, C], [A, B, C]) == 100.0
    assert rouge_l([A, B, C], [A, X, C]) == pytest.approx(200 / 3)
    assert rouge_l([A, B], [C, D]) == 0.0


@given(st.lists(st.integers(0, 5), max_size=12), st.lists(st.integers(0, 5), max_size=12))
def test_lcs_matches_recursive_oracle(a, b):
    assert lcs_length(a, b) == slow_lcs(a, b)
    assert rouge_l(a, b) == slow_rouge_l(a, b)


def test_length_stats_examples():
    ref = [[1] * 20, [1] * 20]
    s = length_stats([(r, r) for r in ref])
    assert (s.mean_delta, s.mae, s.proper) == (0.0, 0.0, 100.0)
    s = length_stats([([1] * 10, ref[0]), ([1] * 30, ref[1])])
    assert (s.mean_delta, s.mae, s.under, s.over, s.proper) == (0.0, 10.0, 50.0, 50.0, 0.0)
    # bucket edges: |delta| = 5 is proper, 6 is not
    s = length_stats([([1] * 15, ref[0]), ([1] * 26, ref[1])])
    assert (s.under, s.over, s.proper) == (0.0, 50.0, 50.0)


@pytest.fixture(scope="module")
def matcher(task):
    return compile_matcher(PhraseLexicon.for_vocab(task.vocab))


def test_finding_f1_examples(task, matcher, splits):
    v = task.vocab
    cases = splits["test"]
    assert finding_f1([c.report for c in cases], [c.labels for c in cases], matcher, v.negation_ids) == (100.0, 100.0, 100.0)
    p, r, f = finding_f1([[] for _ in cases], [c.labels for c in cases], matcher, v.negation_ids)
    assert (p, r, f) == (0.0, 0.0, 0.0)
    gen = [v.word_id(0, "head"), v.template(0, 5), v.word_id(2, "head", "cap")]
    assert finding_f1([gen], [{0, 1}], matcher, v.negation_ids) == pytest.approx((50.0, 50.0, 50.0))


def test_eos_profile_constructed_oracle(task, splits):
    """A model that emits EOS with certainty exactly at the reference boundary."""
    cases = [c for c in splits["test"] if len(c.report) >= 12][:3]
    V = len(task.vocab)

    class BoundaryModel(torch.nn.Module):
        def __init__(self, case):
            super().__init__()
            self.case = case
            self.seen = []

        def forward(self, tokens, adapters=None, scales=1.0, cache=None):
            self.seen += list(tokens)
            n = len(self.seen)
            lay = build_prompt(self.case)
            boundary = lay.answer[1] - 1  # predicting position of EOS
            out = torch.full((len(tokens), V), -40.0, dtype=torch.float64)
            for i in range(len(tokens)):
                pos = n - len(tokens) + i + 1
                out[i, EOS if pos == boundary else 7] = 40.0
            return out

    for c in cases:
        prof = eos_profile(BoundaryModel(c), None, [c], window=10, after=5)
        for off, p in zip(prof.offsets, prof.mean_prob):
            assert p == pytest.approx(1.0 if off == 0 else 0.0, abs=1e-12)


def test_eos_profile_bounds_and_counts(tiny_backbone, splits):
    prof = eos_profile(tiny_backbone, None, splits["test"][:5], window=10, after=5)
    assert prof.offsets == list(range(-10, 6))
    assert all(0 <= p <= 1 for p in prof.mean_prob)
    assert prof.counts[-1] == 5 and prof.at(0) == prof.mean_prob[10]


def test_flops_proxy_table6():
    a = fit_cost_ratio(TABLE6_TOKENS, TABLE6_RATIOS)
    assert 2.5e4 < a < 2.9e4
    m = CostModel(k_lin=a, k_quad=1.0)
    for n, r in zip(TABLE6_TOKENS, TABLE6_RATIOS):
        assert abs(flops_ratio(n, 413, m) / r - 1) < 0.02
    assert flops_ratio(413, 413, m) == 1.0
    assert flops_ratio(826, 413, CostModel(3.0, 0.0)) == 2.0
    with pytest.raises(ValueError):
        flops_proxy(0, m)
    with pytest.raises(ValueError):
        CostModel(-1.0)


def test_ablation_catalogue():
    assert [c.id for c in CUMULATIVE] == ["zero-shot", "dynamic", "path", "eos1", "eos5"]
    assert [c.path_weight for c in PATH_SWEEP] == [0, 1, 3, 5, 8, 10]
    assert [c.eos_weight for c in EOS_SWEEP] == [0, 1, 2, 3, 5, 8]
    ids = [c.id for c in ALL_ABLATIONS]
    assert len(ids) == len(set(ids))
    p0 = ablation_by_id("path0")
    assert (p0.mode, p0.path_weight, p0.eos_weight, p0.alpha) == ("dynamic", 0.0, 5.0, 0.8)
    assert ablation_by_id("static").mode == "static" and ablation_by_id("ce-only").alpha == 0.0
    assert ablation_by_id("+ EOS upweight (w=5)").id == "eos5"
    with pytest.raises(KeyError):
        ablation_by_id("nope")
    assert set(GROUPS) == {"cumulative", "objective", "path_sweep", "eos_sweep"}


def test_ablation_suite_order_and_errors(task, matcher, splits, tmp_path):
    cases = splits["test"][:4]
    errors = []

    def run_one(cfg):
        if cfg.id == "path":
            raise FileNotFoundError("missing adapters")
        return score_generations(cfg.name, [c.report for c in cases], cases, matcher, task.vocab.negation_ids)

    reps = ablation_suite(CUMULATIVE, run_one, on_error=lambda c, e: errors.append(c.id))
    assert [r.config for r in reps] == [c.name for c in CUMULATIVE if c.id != "path"]
    assert errors == ["path"]
    reps[0].eos = EOSProfile(list(range(-3, 4)), [0.1] * 7, [1] * 7)
    write_table(tmp_path / "t.csv", reps)
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert [r["config"] for r in rows] == [r.config for r in reps]
    assert float(rows[0]["bleu4"]) == pytest.approx(100.0)
    write_profile(tmp_path / "p.jsonl", reps[0].eos)
    assert len(open(tmp_path / "p.jsonl").read().splitlines()) == 7
    with pytest.raises(FileNotFoundError):
        ablation_suite(CUMULATIVE, run_one)
