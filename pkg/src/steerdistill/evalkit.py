"""Evaluation: lexical metrics, length control, EOS boundary profiles, finding F1, forward cost."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from scipy.optimize import minimize_scalar

from .backbone import Backbone
from .lexicon import Matcher, extract_labels
from .numeric import softmax
from .steering import AdapterSet
from .synthtask import EOS, CaseRecord, build_prompt

# -- lexical metrics ----------------------------------------------------------


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(
    candidates: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
    max_n: int = 4,
    epsilon: float = 0.1,
) -> list[float]:
    """Corpus BLEU-1..BLEU-``max_n`` as percentages.

    Clipped n-gram counts are pooled over the corpus; an order with zero
    matches gets ``epsilon`` added to its numerator. An order with no
    candidate n-grams at all makes that BLEU score 0.
    """
    if not candidates:
        raise ValueError("BLEU of an empty corpus is undefined")
    if len(candidates) != len(references):
        raise ValueError("candidates and references differ in length")
    matches = np.zeros(max_n)
    totals = np.zeros(max_n)
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cn, rn = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(v, rn[g]) for g, v in cn.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    out = []
    log_sum = 0.0
    for n in range(max_n):
        if totals[n] == 0:
            out += [0.0] * (max_n - n)
            break
        num = matches[n] if matches[n] > 0 else epsilon
        log_sum += math.log(num / totals[n])
        out.append(100.0 * bp * math.exp(log_sum / (n + 1)))
    return out


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[int], reference: Sequence[int]) -> float:
    """LCS F1 (beta = 1) as a percentage; two empty sequences score 100."""
    if not candidate and not reference:
        return 100.0
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 100.0 * 2 * p * r / (p + r)


def corpus_rouge_l(candidates, references) -> float:
    return float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))


# -- length control -------------------------------------------------------------


@dataclass
class LengthStats:
    gen_len: float
    mean_delta: float
    mae: float
    under: float
    over: float
    proper: float


def length_stats(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], threshold: int = 5) -> LengthStats:
    """ΔLen = len(generated) - len(reference), in tokens, bucketed at ``threshold``."""
    if not pairs:
        raise ValueError("length_stats needs at least one pair")
    gen = np.array([len(g) for g, _ in pairs], dtype=float)
    delta = gen - np.array([len(r) for _, r in pairs], dtype=float)
    n = len(delta)
    return LengthStats(
        gen_len=float(gen.mean()),
        mean_delta=float(delta.mean()),
        mae=float(np.abs(delta).mean()),
        under=100.0 * float((delta < -threshold).sum()) / n,
        over=100.0 * float((delta > threshold).sum()) / n,
        proper=100.0 * float((np.abs(delta) <= threshold).sum()) / n,
    )


# -- EOS boundary profile -------------------------------------------------------


@dataclass
class EOSProfile:
    offsets: list[int]
    mean_prob: list[float]
    counts: list[int]

    def at(self, offset: int) -> float:
        return self.mean_prob[self.offsets.index(offset)]


@torch.no_grad()
def eos_profile(
    backbone: Backbone,
    adapters: AdapterSet | None,
    cases: Sequence[CaseRecord],
    window: int = 10,
    after: int = 5,
    eos_id: int = EOS,
) -> EOSProfile:
    """Mean P(EOS) around the reference boundary for the query-only model.

    Offsets <= 0 are read teacher-forced on the reference prefix (offset 0
    predicts the reference EOS). For offsets > 0 the model continues past
    the boundary greedily with EOS excluded from the argmax. Adapters run
    at scale 1 throughout.
    """
    offsets = list(range(-window, after + 1))
    sums = np.zeros(len(offsets))
    counts = np.zeros(len(offsets), dtype=int)
    for case in cases:
        lay = build_prompt(case)
        a, b = lay.answer
        cache: list = []
        logits = backbone(lay.tokens[: b - 1], adapters=adapters, cache=cache)
        probs = softmax(logits.to(torch.float64))[:, eos_id].numpy()
        for j, off in enumerate(offsets):
            if off > 0:
                break
            pos = b - 2 + off
            if pos >= a - 1:
                sums[j] += probs[pos]
                counts[j] += 1
        last = logits[-1]
        for step in range(1, after + 1):
            masked = last.clone()
            masked[eos_id] = float("-inf")
            nxt = int(masked.argmax())
            last = backbone([nxt], adapters=adapters, cache=cache)[-1]
            j = offsets.index(step)
            sums[j] += float(softmax(last.to(torch.float64))[eos_id])
            counts[j] += 1
    mean = [float(s / c) if c else float("nan") for s, c in zip(sums, counts)]
    return EOSProfile(offsets, mean, counts.tolist())


# -- finding F1 -----------------------------------------------------------------


def finding_f1(
    generated: Sequence[Sequence[int]],
    truth: Sequence[Iterable[int]],
    matcher: Matcher,
    negation_ids: Iterable[int],
) -> tuple[float, float, float]:
    """Micro precision/recall/F1 (percent) of lexicon-extracted labels."""
    tp = fp = fn = 0
    neg = tuple(negation_ids)
    for gen, gt in zip(generated, truth):
        pred = extract_labels(gen, matcher, neg)
        gt = set(gt)
        tp += len(pred & gt)
        fp += len(pred - gt)
        fn += len(gt - pred)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return 100.0 * p, 100.0 * r, 100.0 * f


# -- forward cost ---------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    k_lin: float = 1.0
    k_quad: float = 0.0

    def __post_init__(self):
        if self.k_lin < 0 or self.k_quad < 0:
            raise ValueError("cost coefficients must be nonnegative")


def flops_proxy(n: int, model: CostModel) -> float:
    if n < 1:
        raise ValueError(f"token count must be at least 1, got {n}")
    return model.k_lin * n + model.k_quad * n * n


def flops_ratio(n: int, n0: int, model: CostModel) -> float:
    return flops_proxy(n, model) / flops_proxy(n0, model)


def fit_cost_ratio(tokens: Sequence[int], ratios: Sequence[float], n0: int | None = None) -> float:
    """Least-squares ``k_lin / k_quad`` matching observed cost ratios against ``n0``."""
    tokens = np.asarray(tokens, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    n0 = float(tokens[0] if n0 is None else n0)

    def sse(log_a):
        a = math.exp(log_a)
        pred = (a * tokens + tokens**2) / (a * n0 + n0**2)
        return float(((pred - ratios) ** 2).sum())

    res = minimize_scalar(sse, bounds=(0.0, 25.0), method="bounded", options={"xatol": 1e-10})
    return math.exp(res.x)


# -- reports ----------------------------------------------------------------------


@dataclass
class MetricReport:
    config: str
    bleu1: float
    bleu4: float
    rouge_l: float
    finding_p: float
    finding_r: float
    finding_f1: float
    length: LengthStats
    eos: EOSProfile | None = None
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {
            "config": self.config,
            "bleu1": self.bleu1,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "finding_p": self.finding_p,
            "finding_r": self.finding_r,
            "finding_f1": self.finding_f1,
            **{f"len_{k}": v for k, v in asdict(self.length).items()},
        }
        if self.eos is not None:
            for off in (-3, 0, 3):
                out[f"eos_p{off:+d}"] = self.eos.at(off)
        out.update(self.extra)
        return out


def strip_eos(tokens: Sequence[int], eos_id: int = EOS) -> list[int]:
    toks = list(tokens)
    return toks[:-1] if toks and toks[-1] == eos_id else toks


def score_generations(
    name: str,
    generated: Sequence[Sequence[int]],
    cases: Sequence[CaseRecord],
    matcher: Matcher,
    negation_ids: Iterable[int],
) -> MetricReport:
    gens = [strip_eos(g) for g in generated]
    refs = [strip_eos(c.report) for c in cases]
    b = bleu(gens, refs, 4)
    p, r, f = finding_f1(gens, [c.labels for c in cases], matcher, negation_ids)
    return MetricReport(name, b[0], b[3], corpus_rouge_l(gens, refs), p, r, f, length_stats(list(zip(gens, refs))))


def write_table(path: str | Path, reports: Sequence[MetricReport]) -> None:
    rows = [r.row() for r in reports]
    keys: list[str] = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def write_profile(path: str | Path, profile: EOSProfile) -> None:
    import json

    with open(path, "w") as f:
        for off, p, n in zip(profile.offsets, profile.mean_prob, profile.counts):
            f.write(json.dumps({"offset": off, "mean_prob": p, "count": n}) + "\n")


# -- ablation table ---------------------------------------------------------------


@dataclass(frozen=True)
class AblationConfig:
    """One row of an ablation table; ``mode='off'`` means no adapters at all."""

    id: str
    name: str
    mode: str = "dynamic"
    path_weight: float = 8.0
    eos_weight: float = 5.0
    alpha: float = 0.8
    group: str = "cumulative"


CUMULATIVE = (
    AblationConfig("zero-shot", "Zero-shot", mode="off"),
    AblationConfig("dynamic", "+ Dynamic TV", path_weight=1.0, eos_weight=0.0),
    AblationConfig("path", "+ Pathology-token supervision", path_weight=8.0, eos_weight=0.0),
    AblationConfig("eos1", "+ EOS (w=1)", path_weight=8.0, eos_weight=1.0),
    AblationConfig("eos5", "+ EOS upweight (w=5)", path_weight=8.0, eos_weight=5.0),
)
OBJECTIVE = (
    AblationConfig("kl-uniform", "Dynamic + KL + uniform CE", path_weight=1.0, eos_weight=1.0, group="objective"),
    AblationConfig("ce-only", "Dynamic + decisive CE, no KL", alpha=0.0, group="objective"),
    AblationConfig("static", "Static + full objective", mode="static", group="objective"),
)
PATH_SWEEP = tuple(
    AblationConfig(f"path{w:g}", f"w_path={w:g}", path_weight=w, eos_weight=5.0, group="path_sweep")
    for w in (0, 1, 3, 5, 8, 10)
)
EOS_SWEEP = tuple(
    AblationConfig(f"eos-w{w:g}", f"w_eos={w:g}", path_weight=8.0, eos_weight=w, group="eos_sweep")
    for w in (0, 1, 2, 3, 5, 8)
)
ALL_ABLATIONS = CUMULATIVE + OBJECTIVE + PATH_SWEEP + EOS_SWEEP
GROUPS = {
    "cumulative": CUMULATIVE,
    "objective": OBJECTIVE,
    "path_sweep": PATH_SWEEP,
    "eos_sweep": EOS_SWEEP,
}


def ablation_by_id(key: str) -> AblationConfig:
    for cfg in ALL_ABLATIONS:
        if key in (cfg.id, cfg.name):
            return cfg
    raise KeyError(f"unknown ablation config {key!r}; known ids: {[c.id for c in ALL_ABLATIONS]}")


def ablation_suite(
    configs: Sequence[AblationConfig],
    run_one: Callable[[AblationConfig], MetricReport],
    on_error: Callable[[AblationConfig, Exception], None] | None = None,
) -> list[MetricReport]:
    """Evaluate each config in declared order; failures are reported per config."""
    out = []
    for cfg in configs:
        try:
            out.append(run_one(cfg))
        except (FileNotFoundError, ValueError) as e:
            if on_error is None:
                raise
            on_error(cfg, e)
    return out
