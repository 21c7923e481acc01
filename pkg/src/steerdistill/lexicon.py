"""Finding-phrase lexicon, multi-pattern token matcher and decisive-token masks."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .synthtask import FORMS, Vocab, surface_form


@dataclass(frozen=True)
class Match:
    start: int
    end: int  # exclusive
    label: int


class PhraseLexicon:
    """Label index -> token-id phrase variants."""

    def __init__(self, phrases: dict[int, Iterable[Sequence[int]]], names: Sequence[str] | None = None):
        self.phrases: dict[int, list[tuple[int, ...]]] = {}
        for label, variants in phrases.items():
            uniq = sorted({tuple(v) for v in variants})
            if not uniq:
                raise ValueError(f"label {label} has no phrases")
            if any(len(v) == 0 for v in uniq):
                raise ValueError(f"label {label} has an empty phrase")
            self.phrases[int(label)] = uniq
        self.names = list(names) if names is not None else [str(k) for k in sorted(self.phrases)]

    @property
    def labels(self) -> list[int]:
        return sorted(self.phrases)

    def items(self):
        for label in self.labels:
            for p in self.phrases[label]:
                yield label, p

    @classmethod
    def from_surface(cls, surface: dict[str, list[str]], vocab: Vocab) -> "PhraseLexicon":
        """Compile surface phrases, adding case and leading-space variants of the first word."""
        names = list(surface)
        phrases = {}
        for label, name in enumerate(names):
            variants = []
            for text in surface[name]:
                words = text.split()
                for form in FORMS:
                    first = surface_form(words[0], form)
                    if first not in vocab.index:
                        continue
                    try:
                        variants.append([vocab.id(first)] + [vocab.id(w) for w in words[1:]])
                    except KeyError as e:
                        raise ValueError(f"phrase {text!r} for {name!r} uses unknown word {e.args[0]!r}") from None
            phrases[label] = variants
        return cls(phrases, names)

    @classmethod
    def for_vocab(cls, vocab: Vocab) -> "PhraseLexicon":
        return cls.from_surface(vocab.surface_phrases(), vocab)

    @staticmethod
    def save_surface(path: str | Path, surface: dict[str, list[str]]) -> None:
        Path(path).write_text(json.dumps(surface, indent=2))

    @classmethod
    def load(cls, path: str | Path, vocab: Vocab) -> "PhraseLexicon":
        return cls.from_surface(json.loads(Path(path).read_text()), vocab)


class Matcher:
    """Aho-Corasick automaton over token ids, reporting every occurrence in one pass."""

    def __init__(self, lexicon: PhraseLexicon):
        self.lexicon = lexicon
        self.goto: list[dict[int, int]] = [{}]
        self.fail: list[int] = [0]
        self.out: list[list[tuple[int, int]]] = [[]]  # (phrase length, label)
        for label, phrase in lexicon.items():
            node = 0
            for tok in phrase:
                nxt = self.goto[node].get(tok)
                if nxt is None:
                    nxt = len(self.goto)
                    self.goto[node][tok] = nxt
                    self.goto.append({})
                    self.fail.append(0)
                    self.out.append([])
                node = nxt
            self.out[node].append((len(phrase), label))
        queue = deque(self.goto[0].values())
        while queue:
            node = queue.popleft()
            for tok, child in self.goto[node].items():
                queue.append(child)
                f = self.fail[node]
                while f and tok not in self.goto[f]:
                    f = self.fail[f]
                self.fail[child] = self.goto[f].get(tok, 0) if self.goto[f].get(tok, 0) != child else 0
                self.out[child] = self.out[child] + self.out[self.fail[child]]

    def find(self, tokens: Sequence[int]) -> list[Match]:
        node = 0
        found = []
        for i, tok in enumerate(tokens):
            while node and tok not in self.goto[node]:
                node = self.fail[node]
            node = self.goto[node].get(tok, 0)
            for length, label in self.out[node]:
                found.append(Match(i + 1 - length, i + 1, label))
        return sorted(found, key=lambda m: (m.start, m.end, m.label))


def compile_matcher(lexicon: PhraseLexicon) -> Matcher:
    return Matcher(lexicon)


def brute_force_matches(tokens: Sequence[int], lexicon: PhraseLexicon) -> list[Match]:
    toks = list(tokens)
    found = []
    for start in range(len(toks)):
        for label, p in lexicon.items():
            if tuple(toks[start : start + len(p)]) == p:
                found.append(Match(start, start + len(p), label))
    return sorted(found, key=lambda m: (m.start, m.end, m.label))


def extract_labels(tokens: Sequence[int], matcher: Matcher, negation_ids: Iterable[int]) -> set[int]:
    """Labels with at least one phrase occurrence not directly preceded by a negation token."""
    neg = set(negation_ids)
    return {m.label for m in matcher.find(tokens) if not (m.start > 0 and tokens[m.start - 1] in neg)}


@dataclass
class MaskPair:
    path: np.ndarray  # bool per target position
    eos: np.ndarray

    def __post_init__(self):
        if self.path.shape != self.eos.shape:
            raise ValueError("mask lengths differ")


@dataclass(frozen=True)
class WeightProfile:
    path: float = 8.0
    eos: float = 5.0

    def __post_init__(self):
        if self.path < 0 or self.eos < 0:
            raise ValueError(f"weights must be nonnegative, got {self}")


UNIFORM = WeightProfile(1.0, 1.0)


def mark_decisive(reference: Sequence[int], labels: Iterable[int], matcher: Matcher, eos_id: int) -> MaskPair:
    ref = list(reference)
    if not ref or ref[-1] != eos_id:
        raise ValueError("reference must end with the EOS token")
    active = set(labels)
    path = np.zeros(len(ref), dtype=bool)
    for m in matcher.find(ref):
        if m.label in active:
            path[m.start : m.end] = True
    eos = np.zeros(len(ref), dtype=bool)
    eos[-1] = True
    path[-1] = False
    return MaskPair(path, eos)


def weights_from_masks(masks: MaskPair, profile: WeightProfile) -> np.ndarray:
    w = np.ones(masks.path.shape, dtype=np.float64)
    w[masks.path] = profile.path
    w[masks.eos] = profile.eos
    return w
