"""Teacher-logit caching, the decisive-token distillation loss and the adapter training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import Backbone, ContextOverflow
from .lexicon import MaskPair, WeightProfile, weights_from_masks
from .numeric import NumericError, log_softmax, token_cross_entropy
from .steering import AdapterSet
from .synthtask import CaseRecord, build_prompt

log = logging.getLogger(__name__)

CACHE_MAGIC = b"SDTK"
CACHE_VERSION = 1


def dataset_hash(cases: Sequence[CaseRecord]) -> str:
    h = hashlib.sha256()
    for c in sorted(cases, key=lambda c: c.id):
        h.update(json.dumps([c.id, c.condition, c.report, list(c.labels)]).encode())
    return h.hexdigest()


# -- teacher cache ------------------------------------------------------------


@dataclass
class TeacherCacheRecord:
    case_id: int
    ids: np.ndarray  # (positions, K) int32, descending by logit
    logits: np.ndarray  # (positions, K) float32
    shots: int

    @property
    def positions(self) -> int:
        return self.ids.shape[0]


@dataclass
class TeacherCache:
    k: int
    shots: int
    temperature: float
    dataset_hash: str
    records: dict[int, TeacherCacheRecord] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        digest = bytes.fromhex(self.dataset_hash)
        parts = [
            CACHE_MAGIC,
            struct.pack("<IIId32sI", CACHE_VERSION, self.k, self.shots, self.temperature, digest, len(self.records)),
        ]
        for cid in sorted(self.records):
            r = self.records[cid]
            parts.append(struct.pack("<qI", cid, r.positions))
            parts.append(np.ascontiguousarray(r.ids, dtype="<i4").tobytes())
            parts.append(np.ascontiguousarray(r.logits, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path) -> "TeacherCache":
        buf = Path(path).read_bytes()
        if buf[:4] != CACHE_MAGIC:
            raise ValueError(f"{path}: not a teacher cache file")
        head = struct.Struct("<IIId32sI")
        version, k, shots, temp, digest, n = head.unpack_from(buf, 4)
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        pos = 4 + head.size
        out = cls(k, shots, temp, digest.hex())
        for _ in range(n):
            cid, npos = struct.unpack_from("<qI", buf, pos)
            pos += 12
            cnt = npos * k
            ids = np.frombuffer(buf, "<i4", cnt, pos).reshape(npos, k).copy()
            pos += 4 * cnt
            logits = np.frombuffer(buf, "<f4", cnt, pos).reshape(npos, k).copy()
            pos += 4 * cnt
            out.records[cid] = TeacherCacheRecord(cid, ids, logits, shots)
        return out


def demo_rng(seed: int, case_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, case_id]))


@torch.no_grad()
def teacher_logits(backbone: Backbone, case: CaseRecord, demos: Sequence[CaseRecord]) -> torch.Tensor:
    """Teacher-forced logits at the positions predicting each answer token (EOS included)."""
    lay = build_prompt(case, demos)
    a, b = lay.answer
    logits = backbone(lay.tokens[: b - 1])
    return logits[a - 1 : b - 1]


def cache_teacher(
    backbone: Backbone,
    cases: Sequence[CaseRecord],
    pool: Sequence[CaseRecord],
    k: int,
    shots: int,
    seed: int,
    temperature: float = 2.0,
) -> TeacherCache:
    """Cache the top-``k`` teacher logits for every answer token of every case.

    Demonstrations are drawn uniformly from ``pool`` per case. Cases whose
    teacher prompt overflows the context are skipped and listed.
    """
    if not 1 <= k <= backbone.config.vocab_size:
        raise ValueError(f"K must lie in [1, {backbone.config.vocab_size}], got {k}")
    cache = TeacherCache(k, shots, temperature, dataset_hash(cases))
    for case in cases:
        rng = demo_rng(seed, case.id)
        demos = [pool[i] for i in rng.choice(len(pool), size=shots, replace=False)] if shots else []
        try:
            lg = teacher_logits(backbone, case, demos)
        except ContextOverflow:
            log.warning("case %d skipped: teacher prompt overflows the context", case.id)
            cache.skipped.append(case.id)
            continue
        top = torch.topk(lg, k, dim=-1, sorted=True)
        cache.records[case.id] = TeacherCacheRecord(
            case.id, top.indices.numpy().astype(np.int32), top.values.numpy().astype(np.float32), shots
        )
    if cache.skipped:
        log.warning("%d of %d cases skipped for context overflow", len(cache.skipped), len(cases))
    return cache


# -- losses -------------------------------------------------------------------


def topk_kl(teacher_ids, teacher_logits, student_logits: torch.Tensor, temperature: float = 2.0) -> torch.Tensor:
    """Per-position ``KL(p_T || p_S)`` on the teacher's top-K support.

    Both distributions are temperature-scaled and renormalised over the K
    cached ids. Renormalisation is done in log space (log-softmax of the
    gathered logits), so student mass never underflows.
    """
    ids = torch.as_tensor(np.asarray(teacher_ids), dtype=torch.long)
    t_logits = torch.as_tensor(np.asarray(teacher_logits)).to(student_logits.dtype)
    s_logits = student_logits.gather(-1, ids)
    log_pt = log_softmax(t_logits, temperature)
    log_ps = log_softmax(s_logits, temperature)
    return (log_pt.exp() * (log_pt - log_ps)).sum(-1)


def weighted_ce(student_logits: torch.Tensor, targets, weights) -> torch.Tensor:
    """``sum_t w_t CE_t / sum_t w_t`` over the answer positions."""
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    w = torch.as_tensor(np.asarray(weights, dtype=np.float64)).to(student_logits.dtype)
    if student_logits.shape[0] != targets.shape[0] or targets.shape != w.shape:
        raise ValueError("logits, targets and weights must be aligned per position")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero; the weight profile is degenerate")
    return (w * token_cross_entropy(student_logits, targets)).sum() / total


@dataclass
class LossBreakdown:
    L: float
    L_CE: float
    L_KL: float
    sum_w: float
    masses: dict[str, float]


CATEGORIES = ("template", "path", "eos")


def category_masses(masks: MaskPair, weights: np.ndarray) -> dict[str, float]:
    templ = ~(masks.path | masks.eos)
    return {
        "template": float(weights[templ].sum()),
        "path": float(weights[masks.path].sum()),
        "eos": float(weights[masks.eos].sum()),
    }


def sequence_loss(
    student_logits: torch.Tensor,
    targets,
    weights: np.ndarray,
    record: TeacherCacheRecord,
    alpha: float,
    temperature: float,
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None]:
    """``alpha * L_KL + (1 - alpha) * L_CE`` for one answer sequence.

    The endpoint that gets zero weight is not evaluated at all.
    """
    if record.positions != student_logits.shape[0]:
        raise ValueError(
            f"case {record.case_id}: cache has {record.positions} positions, student has {student_logits.shape[0]}"
        )
    kl = ce = None
    loss = student_logits.new_zeros(())
    if alpha > 0:
        kl = topk_kl(record.ids, record.logits, student_logits, temperature).mean()
        loss = loss + alpha * kl
    if alpha < 1:
        ce = weighted_ce(student_logits, targets, weights)
        loss = loss + (1 - alpha) * ce
    return loss, ce, kl


def supervision_mass(masks: Sequence[MaskPair], profile: WeightProfile) -> dict[str, float]:
    """``M(c) = sum of w_t over target tokens in category c``, summed over cases."""
    out = dict.fromkeys(CATEGORIES, 0.0)
    for m in masks:
        for k, v in category_masses(m, weights_from_masks(m, profile)).items():
            out[k] += v
    return out


# -- training -----------------------------------------------------------------


@dataclass
class DistillConfig:
    alpha: float = 0.8
    temperature: float = 2.0
    k: int = 32
    lr: float = 1e-4
    epochs: int = 5
    batch_size: int = 8
    path_weight: float = 8.0
    eos_weight: float = 5.0
    mode: str = "dynamic"
    rank: int = 16
    rho: float = 2.0
    decay: float = 0.9
    layers: list[int] | None = None
    shots: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def profile(self) -> WeightProfile:
        return WeightProfile(self.path_weight, self.eos_weight)


def _student_batch(backbone: Backbone, adapters: AdapterSet, cases: Sequence[CaseRecord]):
    """Query-only teacher-forced logits; returns per-case answer-position slices."""
    lays = [build_prompt(c) for c in cases]
    T = max(lay.answer[1] for lay in lays) - 1
    inp = torch.zeros(len(cases), T, dtype=torch.long)
    for i, lay in enumerate(lays):
        n = lay.answer[1] - 1
        inp[i, :n] = torch.tensor(lay.tokens[:n])
    logits = backbone(inp, adapters=adapters)
    return [logits[i, lay.answer[0] - 1 : lay.answer[1] - 1] for i, lay in enumerate(lays)]


def batch_loss(backbone, adapters, cases, masks, cache: TeacherCache, cfg: DistillConfig):
    """Per-sequence losses averaged uniformly over the batch."""
    outs = _student_batch(backbone, adapters, cases)
    total = None
    stats = {"L_CE": 0.0, "L_KL": 0.0, "sum_w": 0.0, **{k: 0.0 for k in CATEGORIES}}
    for case, logits, m in zip(cases, outs, masks):
        w = weights_from_masks(m, cfg.profile)
        loss, ce, kl = sequence_loss(logits, case.report, w, cache.records[case.id], cfg.alpha, cfg.temperature)
        total = loss if total is None else total + loss
        stats["L_CE"] += ce.item() if ce is not None else 0.0
        stats["L_KL"] += kl.item() if kl is not None else 0.0
        stats["sum_w"] += float(w.sum())
        for k, v in category_masses(m, w).items():
            stats[k] += v
    n = len(cases)
    return total / n, {k: v / n if k in ("L_CE", "L_KL") else v for k, v in stats.items()}


def _breakdown(loss: float, stats: dict) -> LossBreakdown:
    return LossBreakdown(loss, stats["L_CE"], stats["L_KL"], stats["sum_w"], {k: stats[k] for k in CATEGORIES})


def check_cache(cache: TeacherCache, cases: Sequence[CaseRecord]) -> list[CaseRecord]:
    """Cases usable for training; raises if the cache was built for other data."""
    if cache.dataset_hash != dataset_hash(cases):
        raise ValueError(f"cache dataset hash {cache.dataset_hash[:12]} does not match the dataset {dataset_hash(cases)[:12]}")
    return [c for c in cases if c.id in cache.records]


@torch.no_grad()
def evaluate_loss(backbone, adapters, cases, masks, cache, cfg: DistillConfig, batch_size: int = 32) -> LossBreakdown:
    by_id = dict(zip((c.id for c in cases), masks))
    usable = check_cache(cache, cases)
    L = 0.0
    stats = {"L_CE": 0.0, "L_KL": 0.0, "sum_w": 0.0, **{k: 0.0 for k in CATEGORIES}}
    for i in range(0, len(usable), batch_size):
        chunk = usable[i : i + batch_size]
        loss, s = batch_loss(backbone, adapters, chunk, [by_id[c.id] for c in chunk], cache, cfg)
        L += loss.item() * len(chunk)
        for k in stats:
            stats[k] += s[k] * len(chunk) if k in ("L_CE", "L_KL") else s[k]
    n = len(usable)
    return _breakdown(L / n, {k: v / n if k in ("L_CE", "L_KL") else v for k, v in stats.items()})


def new_adapters(backbone: Backbone, cfg: DistillConfig) -> AdapterSet:
    c = backbone.config
    return AdapterSet(
        c.n_layers, c.d_model, mode=cfg.mode, rank=cfg.rank, rho=cfg.rho, decay=cfg.decay,
        layers=cfg.layers, seed=cfg.seed, dtype=backbone.dtype,
    )


def train_adapters(
    cfg: DistillConfig,
    backbone: Backbone,
    cache: TeacherCache,
    cases: Sequence[CaseRecord],
    masks: Sequence[MaskPair],
    on_step: Callable[[dict], None] | None = None,
) -> tuple[AdapterSet, list[dict]]:
    """Optimise only the adapter parameters against the cached teacher.

    Returns the trained adapters and a log with one record per optimiser
    step and one ``epoch`` summary per epoch.
    """
    if cache.temperature != cfg.temperature:
        log.info("cache built at temperature %s; training uses %s", cache.temperature, cfg.temperature)
    if cfg.k > cache.k:
        raise ValueError(f"config asks for K={cfg.k} but the cache holds only {cache.k}")
    by_id = dict(zip((c.id for c in cases), masks))
    usable = check_cache(cache, cases)
    if cfg.k < cache.k:
        cache = TeacherCache(cfg.k, cache.shots, cache.temperature, cache.dataset_hash, {
            cid: TeacherCacheRecord(cid, r.ids[:, : cfg.k], r.logits[:, : cfg.k], r.shots) for cid, r in cache.records.items()
        })
    backbone.freeze()
    adapters = new_adapters(backbone, cfg)
    params = list(adapters.parameters())
    history: list[dict] = []
    if not params:
        return adapters, history
    torch.manual_seed(cfg.seed)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.0)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(usable))
        ep_loss = 0.0
        ep_stats = {"L_CE": 0.0, "L_KL": 0.0, "sum_w": 0.0, **{k: 0.0 for k in CATEGORIES}}
        for i in range(0, len(order), cfg.batch_size):
            chunk = [usable[j] for j in order[i : i + cfg.batch_size]]
            loss, stats = batch_loss(backbone, adapters, chunk, [by_id[c.id] for c in chunk], cache, cfg)
            if not torch.isfinite(loss):
                raise NumericError(f"distillation loss is non-finite at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = {"step": step, "L": loss.item(), "L_CE": stats["L_CE"], "L_KL": stats["L_KL"], "sum_w": stats["sum_w"]}
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            ep_loss += loss.item() * len(chunk)
            for k in ep_stats:
                ep_stats[k] += stats[k] * len(chunk) if k in ("L_CE", "L_KL") else stats[k]
            step += 1
        n = len(usable)
        bd = _breakdown(ep_loss / n, {k: v / n if k in ("L_CE", "L_KL") else v for k, v in ep_stats.items()})
        history.append({"epoch": epoch, **asdict(bd)})
    return adapters, history
