"""Synthetic long-form report task.

Each report is written in one of four template styles and under an
episode-level *convention* (closing-run length, surface form of the first
token of each phrase, label ordering). Demonstrations share both with the
query, so a model that reads them can infer where reports stop and how
findings are phrased; a query-only model cannot.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<cond>", "<report>")
PAD, BOS, EOS, SEP, COND, REPORT = range(len(SPECIALS))
FORMS = ("lower", "cap", "space")
ORDERS = ("asc", "desc")
NEGATIONS = ("no", "without")
TEMPLATE_SIZE = 10  # opening [0:5], sentence lead-in [5:10]

_SYL = ["ka", "lo", "mi", "ten", "ru", "sa", "vek", "do", "pim", "zu", "ba", "nor", "fe", "gil"]


def _word(i: int, salt: int) -> str:
    a = _SYL[(i + salt) % len(_SYL)]
    b = _SYL[(3 * i + 5 * salt + 1) % len(_SYL)]
    return f"{a}{b}{i:02d}{'aeiou'[salt % 5]}"


def surface_form(word: str, form: str) -> str:
    if form == "lower":
        return word
    if form == "cap":
        return word.capitalize()
    if form == "space":
        return "▁" + word
    raise ValueError(f"unknown form {form!r}")


@dataclass(frozen=True)
class StyleSpec:
    style_id: int
    regime: str  # "short" | "long"
    opening_run: tuple[int, int]
    lead_run: tuple[int, int]
    closing_run: tuple[int, int]
    negatives: tuple[int, ...] = ()  # labels stated as absent when inactive
    negation: int = 0  # which negation word the style uses


PERTINENT = (1, 4, 8, 12)
DEFAULT_STYLES = (
    StyleSpec(0, "short", (3, 5), (1, 2), (1, 2)),
    StyleSpec(1, "short", (3, 5), (1, 2), (1, 2)),
    StyleSpec(2, "long", (3, 3), (2, 2), (2, 7), PERTINENT, 0),
    StyleSpec(3, "long", (3, 3), (2, 2), (2, 7), PERTINENT, 1),
)


@dataclass(frozen=True)
class Convention:
    closing: int
    form: str
    order: str


class Vocab:
    """Contiguous id blocks: specials, observations, finding words, negations, templates, closing."""

    def __init__(self, n_labels: int = 14, n_styles: int = 4, max_closing: int = 7):
        self.n_labels = n_labels
        self.n_styles = n_styles
        self.max_closing = max_closing
        words = list(SPECIALS)
        self.blocks: dict[str, tuple[int, int]] = {"special": (0, len(words))}

        start = len(words)
        words += [f"obs{i:02d}" for i in range(n_labels)]
        self.blocks["observation"] = (start, len(words))

        start = len(words)
        self.label_words: list[dict[str, str]] = []
        for i in range(n_labels):
            head, mod, suffix = _word(i, 0), _word(i, 1), _word(i, 2)
            self.label_words.append({"head": head, "mod": mod, "suffix": suffix})
            for w in (head, mod):
                words += [surface_form(w, f) for f in FORMS]
            words.append(suffix)
        self.blocks["finding"] = (start, len(words))

        start = len(words)
        words += list(NEGATIONS)
        self.blocks["negation"] = (start, len(words))

        start = len(words)
        for s in range(n_styles):
            words += [f"tpl{s}_{j:02d}" for j in range(TEMPLATE_SIZE)]
        self.blocks["template"] = (start, len(words))

        start = len(words)
        words += [f"close{j}" for j in range(1, max_closing + 1)]
        self.blocks["closing"] = (start, len(words))

        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        if len(self.index) != len(words):
            raise ValueError("vocabulary surface strings collide")

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self.index[word]

    def block_of(self, tok: int) -> str:
        for name, (a, b) in self.blocks.items():
            if a <= tok < b:
                return name
        raise KeyError(tok)

    def obs(self, label: int) -> int:
        return self.blocks["observation"][0] + label

    def word_id(self, label: int, part: str, form: str = "lower") -> int:
        w = self.label_words[label][part]
        return self.index[w if part == "suffix" else surface_form(w, form)]

    def template(self, style: int, j: int) -> int:
        return self.blocks["template"][0] + style * TEMPLATE_SIZE + j

    def closing(self, j: int) -> int:
        return self.blocks["closing"][0] + j

    @property
    def negation_ids(self) -> tuple[int, ...]:
        a, b = self.blocks["negation"]
        return tuple(range(a, b))

    def decode(self, toks: Sequence[int]) -> str:
        return " ".join(self.words[t] for t in toks)

    def surface_phrases(self) -> dict[str, list[str]]:
        """Label name -> lowercase surface phrases (1-3 words)."""
        out = {}
        for i, w in enumerate(self.label_words):
            out[f"finding_{i:02d}"] = [w["head"], f"{w['mod']} {w['head']}", f"{w['mod']} {w['head']} {w['suffix']}"]
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {"n_labels": self.n_labels, "n_styles": self.n_styles, "max_closing": self.max_closing,
                 "blocks": self.blocks, "words": self.words},
                indent=1,
            )
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        d = json.loads(Path(path).read_text())
        v = cls(d["n_labels"], d["n_styles"], d["max_closing"])
        if v.words != d["words"]:
            raise ValueError(f"{path}: vocabulary does not match the generator layout")
        return v


@dataclass
class CaseRecord:
    id: int
    style: int
    convention: Convention
    condition: list[int]
    report: list[int]
    labels: tuple[int, ...]
    split: str = ""

    def to_json(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CaseRecord":
        return cls(
            id=d["id"], style=d["style"], convention=Convention(**d["convention"]),
            condition=list(d["condition"]), report=list(d["report"]), labels=tuple(d["labels"]), split=d["split"],
        )


@dataclass
class PromptLayout:
    tokens: list[int]
    answer: tuple[int, int]
    demo_spans: list[tuple[int, int]]
    condition: tuple[int, int]

    @property
    def query(self) -> list[int]:
        """Prompt up to (excluding) the first answer token."""
        return self.tokens[: self.answer[0]]


@dataclass
class TaskConfig:
    n_labels: int = 14
    label_prior: float = 0.12
    flip_noise: float = 0.05
    max_shots: int = 8
    shot_warmup: float = 0.4
    pretrain_style_weights: tuple[float, ...] = (0.35, 0.25, 0.15, 0.25)
    deploy_style: int = 2
    deploy_closing: int = 2
    deploy_form: str = "space"
    deploy_order: str = "desc"
    distill_size: int = 256
    pool_size: int = 512
    val_size: int = 64
    test_size: int = 256
    seed: int = 1234

    @property
    def deploy_convention(self) -> Convention:
        return Convention(self.deploy_closing, self.deploy_form, self.deploy_order)


def random_convention(style: StyleSpec, rng: np.random.Generator) -> Convention:
    lo, hi = style.closing_run
    return Convention(int(rng.integers(lo, hi + 1)), FORMS[rng.integers(len(FORMS))], ORDERS[rng.integers(2)])


def _run(rng, bounds) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def sample_case(
    style: StyleSpec,
    convention: Convention,
    priors,
    rng: np.random.Generator,
    vocab: Vocab,
    flip_noise: float = 0.05,
    case_id: int = -1,
    split: str = "",
) -> CaseRecord:
    """Draw one case: active labels, noisy observation prefix and reference report."""
    F = vocab.n_labels
    priors = np.broadcast_to(np.asarray(priors, dtype=float), (F,))
    active = rng.random(F) < priors
    flips = rng.random(F) < flip_noise
    # the prefix lists the observed labels; each flip drops or adds one
    condition = [COND] + [vocab.obs(int(i)) for i in np.flatnonzero(active ^ flips)]

    s = style.style_id
    report = [vocab.template(s, j) for j in range(_run(rng, style.opening_run))]
    order = range(F) if convention.order == "asc" else range(F - 1, -1, -1)
    for i in order:
        if active[i]:
            report += [vocab.template(s, 5 + j) for j in range(_run(rng, style.lead_run))]
            kind = int(rng.choice(3, p=(0.5, 0.3, 0.2)))
            if kind == 0:
                report += [vocab.word_id(i, "head", convention.form)]
            else:
                report += [vocab.word_id(i, "mod", convention.form), vocab.word_id(i, "head")]
                if kind == 2:
                    report.append(vocab.word_id(i, "suffix"))
    # pertinent negatives close the findings section
    for i in order:
        if i in style.negatives and not active[i]:
            report += [vocab.template(s, 5 + j) for j in range(_run(rng, style.lead_run))]
            report += [vocab.negation_ids[style.negation], vocab.word_id(i, "head")]
    report += [vocab.closing(j) for j in range(convention.closing)]
    report.append(EOS)
    labels = tuple(int(i) for i in np.flatnonzero(active))
    return CaseRecord(case_id, s, convention, condition, report, labels, split)


def parse_report(report: Sequence[int], style: StyleSpec, vocab: Vocab) -> dict:
    """Parse a reference report back into its grammar segments.

    Raises ``ValueError`` if the sequence is not producible by ``style``.
    """
    toks = list(report)
    if not toks or toks[-1] != EOS or toks.count(EOS) != 1:
        raise ValueError("report must contain exactly one EOS, at the end")
    s = style.style_id
    pos = 0

    def take_run(base: int, bounds) -> int:
        nonlocal pos
        n = 0
        while pos < len(toks) and toks[pos] == vocab.template(s, base + n) and n < 5:
            pos += 1
            n += 1
        if not bounds[0] <= n <= bounds[1]:
            raise ValueError(f"template run of length {n} at {pos} outside {bounds}")
        return n

    out = {"opening": take_run(0, style.opening_run), "findings": [], "negations": [], "closing": 0}
    fa, fb = vocab.blocks["finding"]
    while toks[pos] == vocab.template(s, 5):
        take_run(5, style.lead_run)
        if toks[pos] in vocab.negation_ids:
            if not fa <= toks[pos + 1] < fb:
                raise ValueError(f"malformed negation at {pos}")
            out["negations"].append(tuple(toks[pos : pos + 2]))
            pos += 2
            continue
        if out["negations"]:
            raise ValueError(f"finding after the negatives at {pos}")
        start = pos
        while fa <= toks[pos] < fb:
            pos += 1
        if not 1 <= pos - start <= 3:
            raise ValueError(f"finding phrase of length {pos - start} at {start}")
        out["findings"].append(tuple(toks[start:pos]))
    while pos < len(toks) - 1 and toks[pos] == vocab.closing(out["closing"]):
        out["closing"] += 1
        pos += 1
    if pos != len(toks) - 1:
        raise ValueError(f"unexpected token {vocab.words[toks[pos]]!r} at {pos}")
    if not style.closing_run[0] <= out["closing"] <= style.closing_run[1]:
        raise ValueError(f"closing run {out['closing']} outside {style.closing_run}")
    return out


def build_prompt(case: CaseRecord, demos: Sequence[CaseRecord] = ()) -> PromptLayout:
    """``<bos> demo_1 <sep> ... demo_k <sep> <cond> obs... <report> answer``.

    Demonstrations contribute report text only, without their EOS.
    """
    toks = [BOS]
    spans = []
    for d in demos:
        start = len(toks)
        toks += d.report[:-1]
        spans.append((start, len(toks)))
        toks.append(SEP)
    cstart = len(toks)
    toks += case.condition
    cond = (cstart, len(toks))
    toks.append(REPORT)
    astart = len(toks)
    toks += case.report
    return PromptLayout(toks, (astart, len(toks)), spans, cond)


def query_prompt(case: CaseRecord) -> list[int]:
    return build_prompt(case).query


class Task:
    """Bundles the vocabulary, styles and config; produces splits and pretraining episodes."""

    def __init__(self, cfg: TaskConfig | None = None, styles: Sequence[StyleSpec] = DEFAULT_STYLES):
        self.cfg = cfg or TaskConfig()
        self.styles = tuple(styles)
        max_closing = max(s.closing_run[1] for s in self.styles)
        self.vocab = Vocab(self.cfg.n_labels, len(self.styles), max_closing)
        w = np.asarray(self.cfg.pretrain_style_weights, dtype=float)
        if len(w) != len(self.styles) or (w < 0).any() or w.sum() <= 0:
            raise ValueError("pretrain_style_weights must give one nonnegative weight per style")
        self.style_weights = w / w.sum()
        if not 0 < self.cfg.label_prior < 1:
            raise ValueError(f"label_prior must lie in (0, 1), got {self.cfg.label_prior}")

    def _rng(self, *stream: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.seed, *stream]))

    def sample(self, style: int, convention: Convention, rng, **kw) -> CaseRecord:
        return sample_case(self.styles[style], convention, self.cfg.label_prior, rng, self.vocab, self.cfg.flip_noise, **kw)

    def make_splits(self) -> dict[str, list[CaseRecord]]:
        c = self.cfg
        conv = c.deploy_convention
        sizes = {"distill": c.distill_size, "pool": c.pool_size, "val": c.val_size, "test": c.test_size}
        out = {}
        next_id = 0
        for k, (name, n) in enumerate(sizes.items()):
            rng = self._rng(1, k)
            out[name] = [self.sample(c.deploy_style, conv, rng, case_id=next_id + i, split=name) for i in range(n)]
            next_id += n
        check_disjoint(out)
        return out

    def sample_demos(self, pool: Sequence[CaseRecord], k: int, rng) -> list[CaseRecord]:
        if k == 0:
            return []
        idx = rng.choice(len(pool), size=k, replace=False)
        return [pool[i] for i in idx]

    def sample_episode(self, rng: np.random.Generator, max_context: int = 512, shots: int | None = None):
        """Pretraining sequence: demos and query share a style and convention.

        Returns ``(tokens, target_mask)``; targets are report tokens, separators and EOS.
        """
        style = int(rng.choice(len(self.styles), p=self.style_weights))
        conv = random_convention(self.styles[style], rng)
        k = int(rng.integers(0, self.cfg.max_shots + 1)) if shots is None else shots
        cases = [self.sample(style, conv, rng) for _ in range(k + 1)]
        demos, query = cases[:-1], cases[-1]
        lay = build_prompt(query, demos)
        while len(lay.tokens) > max_context and demos:
            demos = demos[:-1]
            lay = build_prompt(query, demos)
        mask = [False] * len(lay.tokens)
        for a, b in lay.demo_spans:
            for t in range(a, b + 1):  # includes the trailing <sep>
                mask[t] = True
        for t in range(*lay.answer):
            mask[t] = True
        return lay.tokens, mask

    def pretrain_batch(self, rng: np.random.Generator, size: int, max_context: int = 512, progress: float = 1.0):
        """One shot count per batch keeps padding low; styles still vary per episode.

        Curriculum: zero-shot only for the first half of ``shot_warmup``,
        then the shot cap rises linearly to ``max_shots``. Condition lookup
        has to form on short contexts; in long ones the few condition tokens
        get too little attention early on for it to form at all.
        """
        warm = self.cfg.shot_warmup
        ramp = min(1.0, max(0.0, 2 * progress / warm - 1)) if warm > 0 else 1.0
        cap = int(round(self.cfg.max_shots * ramp))
        k = int(rng.integers(0, cap + 1))
        return [self.sample_episode(rng, max_context, shots=k) for _ in range(size)]

    def heldout_episodes(self, n: int, shots: int, seed_stream: int = 99) -> list[tuple[CaseRecord, list[CaseRecord]]]:
        """Mixed-style held-out (query, demos) pairs with a fixed shot count."""
        rng = self._rng(2, seed_stream)
        out = []
        for _ in range(n):
            style = int(rng.choice(len(self.styles), p=self.style_weights))
            conv = random_convention(self.styles[style], rng)
            cases = [self.sample(style, conv, rng) for _ in range(shots + 1)]
            out.append((cases[-1], cases[:-1]))
        return out


def check_disjoint(splits: dict[str, Sequence[CaseRecord]]) -> None:
    seen: dict[int, str] = {}
    for name, cases in splits.items():
        for c in cases:
            if c.id in seen:
                raise ValueError(f"case id {c.id} appears in both {seen[c.id]!r} and {name!r}")
            seen[c.id] = name


def write_dataset(path: str | Path, cases: Sequence[CaseRecord]) -> None:
    with open(path, "w") as f:
        for c in cases:
            f.write(json.dumps(c.to_json(), sort_keys=True) + "\n")


def read_dataset(path: str | Path) -> list[CaseRecord]:
    with open(path) as f:
        return [CaseRecord.from_json(json.loads(line)) for line in f if line.strip()]
