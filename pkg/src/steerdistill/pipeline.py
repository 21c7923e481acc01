"""End-to-end pipeline: run configuration, artifact layout, manifests and stage drivers."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

from . import __version__
from .backbone import Backbone, BackboneConfig, DecodeConfig, PretrainConfig, generate_batch, pretrain
from .distill import DistillConfig, TeacherCache, cache_teacher, evaluate_loss, train_adapters
from .evalkit import (
    GROUPS,
    AblationConfig,
    MetricReport,
    ablation_by_id,
    eos_profile,
    score_generations,
    write_profile,
    write_table,
)
from .lexicon import MaskPair, PhraseLexicon, compile_matcher, mark_decisive
from .steering import AdapterSet
from .synthtask import EOS, Task, TaskConfig, Vocab, query_prompt, read_dataset, write_dataset

log = logging.getLogger(__name__)

SPLITS = ("distill", "pool", "val", "test")


class ConfigError(ValueError):
    """Malformed run configuration (exit code 2)."""


class ArtifactMismatch(RuntimeError):
    """An input artifact does not match the manifest chain (exit code 3)."""


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_context: int = 512
    seed: int = 0


@dataclass
class EvalConfig:
    max_new_tokens: int = 128
    decay: float | None = None
    window: int = 10
    after: int = 5
    length_threshold: int = 5
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    groups: list[str] = field(default_factory=lambda: ["cumulative", "objective"])


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    backbone: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    precision: str = "float64"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


# -- config parsing -------------------------------------------------------------


def _coerce(value: Any, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: expected {tp}, got {value!r}")
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        (inner, *_) = typing.get_args(tp) or (Any,)
        items = [_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
        return tuple(items) if origin is tuple else items
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        return build_dataclass(tp, value, where)
    if tp is Any:
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected float, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected str, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def build_dataclass(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for key, val in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    cfg = build_dataclass(RunConfig, data)
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError(f"config.precision: expected 'float32' or 'float64', got {cfg.precision!r}")
    for g in cfg.eval.groups:
        if g not in GROUPS:
            raise ConfigError(f"config.eval.groups: unknown group {g!r}; expected one of {sorted(GROUPS)}")
    return cfg


# -- hashing and manifests ------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


class Run:
    """Artifacts of one run directory and the stage drivers that produce them."""

    def __init__(self, cfg: RunConfig, out: str | Path, overwrite: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.overwrite = overwrite
        self.out.mkdir(parents=True, exist_ok=True)
        self.task = Task(cfg.task)
        self._backbone: Backbone | None = None
        self._splits: dict | None = None
        self._masks: dict | None = None

    # paths
    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def manifest_path(self, stage: str) -> Path:
        return self.path("manifests", stage.replace(":", ".") + ".json")

    # -- manifest chain --

    def _stage_config(self, stage: str, extra: dict | None = None) -> dict:
        c = self.cfg.to_dict()
        sections = {
            "gen-data": ["task"],
            "pretrain": ["task", "backbone", "pretrain", "precision"],
            "cache-teacher": ["task", "backbone", "pretrain", "precision"],
            "distill": ["task", "backbone", "pretrain", "precision", "distill"],
            "generate": ["task", "backbone", "pretrain", "precision", "distill", "eval"],
            "evaluate": ["task", "backbone", "pretrain", "precision", "distill", "eval"],
        }[stage.split(":")[0]]
        sub = {k: c[k] for k in sections}
        if stage.startswith("cache-teacher"):
            d = c["distill"]
            sub["teacher"] = {k: d[k] for k in ("k", "shots", "temperature")}
        sub.update(extra or {})
        return sub

    def _verify_inputs(self, inputs: list[Path]) -> dict[str, str]:
        """Hash inputs and check each against the manifest that produced it."""
        recorded: dict[str, str] = {}
        mdir = self.path("manifests")
        if mdir.exists():
            for m in sorted(mdir.glob("*.json")):
                recorded.update(json.loads(m.read_text())["outputs"])
        out = {}
        for p in inputs:
            rel = str(p.relative_to(self.out))
            if not p.exists():
                raise FileNotFoundError(f"missing upstream artifact {rel}; run the producing stage first")
            h = sha256_file(p)
            if rel in recorded and recorded[rel] != h:
                raise ArtifactMismatch(f"{rel}: hash {h} does not match manifest hash {recorded[rel]}")
            out[rel] = h
        return out

    def _up_to_date(self, stage: str, conf: dict, inputs: dict, outputs: list[Path]) -> bool:
        mp = self.manifest_path(stage)
        if not mp.exists():
            existing = [p for p in outputs if p.exists()]
            if existing and not self.overwrite:
                raise ArtifactMismatch(
                    f"{stage}: outputs already exist without a manifest ({existing[0]}); pass --overwrite"
                )
            return False
        m = json.loads(mp.read_text())
        fresh = (
            m["config_hash"] == config_hash(conf)
            and m["inputs"] == inputs
            and all(p.exists() and m["outputs"].get(str(p.relative_to(self.out))) == sha256_file(p) for p in outputs)
        )
        if not fresh and not self.overwrite:
            raise ArtifactMismatch(
                f"{stage}: existing outputs were produced under a different config or inputs "
                f"(manifest config hash {m['config_hash']}, current {config_hash(conf)}); pass --overwrite"
            )
        return fresh

    def _stage(self, stage: str, inputs: list[Path], outputs: list[Path], build, extra: dict | None = None) -> bool:
        """Run ``build()`` unless outputs are up to date; write the manifest. Returns True if built."""
        conf = self._stage_config(stage, extra)
        in_hashes = self._verify_inputs(inputs)
        if self._up_to_date(stage, conf, in_hashes, outputs):
            log.info("%s: up to date", stage)
            return False
        t0 = time.time()
        started = time.strftime("%Y-%m-%dT%H:%M:%S")
        for p in outputs:
            p.parent.mkdir(parents=True, exist_ok=True)
        build()
        manifest = {
            "stage": stage,
            "config_hash": config_hash(conf),
            "config": conf,
            "inputs": in_hashes,
            "outputs": {str(p.relative_to(self.out)): sha256_file(p) for p in outputs},
            "tool_version": __version__,
            "started": started,
            "wall_seconds": round(time.time() - t0, 3),
        }
        self.manifest_path(stage).parent.mkdir(parents=True, exist_ok=True)
        self.manifest_path(stage).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return True

    # -- gen-data --

    def data_paths(self) -> list[Path]:
        return (
            [self.path("data", f"{s}.jsonl") for s in SPLITS]
            + [self.path("data", "vocab.json"), self.path("data", "lexicon.json"), self.path("data", "masks.jsonl")]
        )

    def gen_data(self) -> bool:
        def build():
            splits = self.task.make_splits()
            for s in SPLITS:
                write_dataset(self.path("data", f"{s}.jsonl"), splits[s])
            self.task.vocab.save(self.path("data", "vocab.json"))
            PhraseLexicon.save_surface(self.path("data", "lexicon.json"), self.task.vocab.surface_phrases())
            lex = PhraseLexicon.for_vocab(self.task.vocab)
            matcher = compile_matcher(lex)
            with open(self.path("data", "masks.jsonl"), "w") as f:
                for s in ("distill", "val", "test"):
                    for c in splits[s]:
                        m = mark_decisive(c.report, c.labels, matcher, EOS)
                        f.write(json.dumps({"id": c.id, "path": m.path.astype(int).tolist(), "eos": m.eos.astype(int).tolist()}) + "\n")

        return self._stage("gen-data", [], self.data_paths(), build, {"split_sizes": self._split_sizes()})

    def _split_sizes(self) -> dict:
        t = self.cfg.task
        return {"distill": t.distill_size, "pool": t.pool_size, "val": t.val_size, "test": t.test_size}

    @property
    def splits(self) -> dict:
        if self._splits is None:
            self._verify_inputs(self.data_paths())
            self._splits = {s: read_dataset(self.path("data", f"{s}.jsonl")) for s in SPLITS}
        return self._splits

    @property
    def vocab(self) -> Vocab:
        return Vocab.load(self.path("data", "vocab.json"))

    @property
    def matcher(self):
        return compile_matcher(PhraseLexicon.load(self.path("data", "lexicon.json"), self.vocab))

    @property
    def masks(self) -> dict[int, MaskPair]:
        if self._masks is None:
            self._masks = {}
            with open(self.path("data", "masks.jsonl")) as f:
                for line in f:
                    d = json.loads(line)
                    self._masks[d["id"]] = MaskPair(np.array(d["path"], bool), np.array(d["eos"], bool))
        return self._masks

    # -- pretrain --

    def backbone_config(self) -> BackboneConfig:
        b = self.cfg.backbone
        return BackboneConfig(len(self.task.vocab), b.d_model, b.n_layers, b.n_heads, b.d_ff, b.max_context, b.seed)

    def pretrain(self) -> bool:
        ckpt = self.path("backbone.ckpt")
        logp = self.path("pretrain_log.jsonl")

        def build():
            model = Backbone(self.backbone_config(), dtype=self.cfg.precision)
            pc = self.cfg.pretrain
            mc = self.cfg.backbone.max_context
            with open(logp, "w") as f:
                losses = pretrain(
                    model,
                    lambda rng, n, done: self.task.pretrain_batch(rng, n, mc, done),
                    pc,
                    progress=lambda s, l: log.info("pretrain step %d loss %.4f", s, l),
                )
                for i, l in enumerate(losses):
                    f.write(json.dumps({"step": i, "loss": l}) + "\n")
            model.save(ckpt, {"steps": pc.steps, "final_loss": losses[-1], "seed": pc.seed})
            self._backbone = None

        return self._stage("pretrain", [], [ckpt, logp], build)

    @property
    def backbone(self) -> Backbone:
        if self._backbone is None:
            self._verify_inputs([self.path("backbone.ckpt")])
            self._backbone = Backbone.load(self.path("backbone.ckpt"), expect=self.backbone_config())
        return self._backbone

    # -- teacher cache --

    def cache_paths(self, seed: int) -> dict[str, Path]:
        return {s: self.path("cache", f"seed{seed}", f"teacher_{s}.cache") for s in ("distill", "val")}

    def cache_teacher(self, seed: int) -> bool:
        paths = self.cache_paths(seed)
        d = self.cfg.distill

        def build():
            for split, p in paths.items():
                c = cache_teacher(self.backbone, self.splits[split], self.splits["pool"], d.k, d.shots, seed, d.temperature)
                c.save(p)

        inputs = [self.path("backbone.ckpt")] + self.data_paths()
        return self._stage(f"cache-teacher:seed{seed}", inputs, list(paths.values()), build, {"seed": seed})

    # -- distill --

    def variant_dir(self, variant: AblationConfig, seed: int) -> Path:
        return self.path("runs", f"seed{seed}", variant.id)

    def distill_config(self, variant: AblationConfig, seed: int) -> DistillConfig:
        return dataclasses.replace(
            self.cfg.distill,
            mode=variant.mode,
            path_weight=variant.path_weight,
            eos_weight=variant.eos_weight,
            alpha=variant.alpha,
            seed=seed,
        )

    def distill(self, variant: AblationConfig, seed: int) -> bool:
        if variant.mode == "off":
            return False
        vdir = self.variant_dir(variant, seed)
        ckpt, logp = vdir / "adapters.ckpt", vdir / "train_log.jsonl"
        dc = self.distill_config(variant, seed)
        cpaths = self.cache_paths(seed)

        def build():
            cache = TeacherCache.load(cpaths["distill"])
            cases = self.splits["distill"]
            masks = [self.masks[c.id] for c in cases]
            adapters, history = train_adapters(dc, self.backbone, cache, cases, masks)
            val_cache = TeacherCache.load(cpaths["val"])
            val = self.splits["val"]
            vb = evaluate_loss(self.backbone, adapters, val, [self.masks[c.id] for c in val], val_cache, dc)
            adapters.save(ckpt, {"distill": asdict(dc), "val_loss": asdict(vb)})
            with open(logp, "w") as f:
                for rec in history:
                    if "step" in rec:
                        f.write(json.dumps(rec) + "\n")
                f.write(json.dumps({"val": asdict(vb)}) + "\n")

        inputs = [self.path("backbone.ckpt"), *cpaths.values(), *self.data_paths()]
        return self._stage(
            f"distill:seed{seed}:{variant.id}", inputs, [ckpt, logp], build,
            {"variant": asdict(variant), "distill_effective": asdict(dc)},
        )

    def adapters(self, variant: AblationConfig, seed: int) -> AdapterSet | None:
        if variant.mode == "off":
            return None
        p = self.variant_dir(variant, seed) / "adapters.ckpt"
        self._verify_inputs([p])
        return AdapterSet.load(p)

    # -- generate / evaluate --

    def decode_config(self) -> DecodeConfig:
        e = self.cfg.eval
        return DecodeConfig(max_new_tokens=e.max_new_tokens, greedy=True, eos_id=EOS, decay=e.decay)

    def generate(self, variant: AblationConfig, seed: int) -> bool:
        """Decode the test split from query prompts only (no demonstrations, no cache)."""
        vdir = self.variant_dir(variant, seed)
        outp = vdir / "generations.jsonl"

        def build():
            ad = self.adapters(variant, seed)
            cases = self.splits["test"]
            gens = generate_batch(self.backbone, [query_prompt(c) for c in cases], self.decode_config(), ad)
            with open(outp, "w") as f:
                for c, g in zip(cases, gens):
                    f.write(json.dumps({"id": c.id, "tokens": g.tokens, "eos_probs": g.eos_probs, "stop_reason": g.stop_reason}) + "\n")

        inputs = [self.path("backbone.ckpt"), *self.data_paths()]
        if variant.mode != "off":
            inputs.append(vdir / "adapters.ckpt")
        return self._stage(f"generate:seed{seed}:{variant.id}", inputs, [outp], build, {"variant": asdict(variant)})

    def evaluate(self, variant: AblationConfig, seed: int) -> MetricReport:
        vdir = self.variant_dir(variant, seed)
        gen_path = vdir / "generations.jsonl"
        prof_path = vdir / "eos_profile.jsonl"
        metrics_path = vdir / "metrics.csv"
        holder: dict = {}

        def build():
            self._verify_inputs([gen_path])
            with open(gen_path) as f:
                rows = [json.loads(line) for line in f]
            cases = self.splits["test"]
            by_id = {r["id"]: r["tokens"] for r in rows}
            rep = score_generations(variant.name, [by_id[c.id] for c in cases], cases, self.matcher, self.vocab.negation_ids)
            e = self.cfg.eval
            rep.eos = eos_profile(self.backbone, self.adapters(variant, seed), cases, e.window, e.after, EOS)
            rep.extra = {"id": variant.id, "seed": seed}
            write_profile(prof_path, rep.eos)
            write_table(metrics_path, [rep])
            holder["rep"] = rep

        inputs = [self.path("backbone.ckpt"), gen_path, *self.data_paths()]
        if variant.mode != "off":
            inputs.append(vdir / "adapters.ckpt")
        self._stage(f"evaluate:seed{seed}:{variant.id}", inputs, [prof_path, metrics_path], build, {"variant": asdict(variant)})
        if "rep" in holder:
            return holder["rep"]
        return read_report(metrics_path, prof_path, variant)

    def run_variant(self, variant: AblationConfig, seed: int) -> MetricReport:
        self.cache_teacher(seed)
        self.distill(variant, seed)
        self.generate(variant, seed)
        return self.evaluate(variant, seed)

    def ablate(self, groups: list[str] | None = None, seeds: list[int] | None = None) -> list[MetricReport]:
        groups = groups or self.cfg.eval.groups
        seeds = self.cfg.eval.seeds if seeds is None else seeds
        variants = [v for g in groups for v in GROUPS[g]]
        reports = []
        for seed in seeds:
            for v in variants:
                reports.append(self.run_variant(v, seed))
        write_table(self.path("ablation.csv"), reports)
        write_table(self.path("ablation_mean.csv"), mean_reports(reports, variants))
        return reports


def read_report(metrics_path: Path, prof_path: Path, variant: AblationConfig) -> MetricReport:
    import csv

    from .evalkit import EOSProfile, LengthStats

    with open(metrics_path) as f:
        row = next(csv.DictReader(f))
    offs, probs, counts = [], [], []
    with open(prof_path) as f:
        for line in f:
            d = json.loads(line)
            offs.append(d["offset"])
            probs.append(d["mean_prob"])
            counts.append(d["count"])
    length = LengthStats(*(float(row[f"len_{k.name}"]) for k in dataclasses.fields(LengthStats)))
    return MetricReport(
        variant.name, float(row["bleu1"]), float(row["bleu4"]), float(row["rouge_l"]),
        float(row["finding_p"]), float(row["finding_r"]), float(row["finding_f1"]), length,
        EOSProfile(offs, probs, counts), {"id": row["id"], "seed": int(row["seed"])},
    )


def mean_reports(reports: list[MetricReport], variants: list[AblationConfig]) -> list[MetricReport]:
    from .evalkit import EOSProfile, LengthStats

    out = []
    for v in variants:
        rs = [r for r in reports if r.extra.get("id") == v.id]
        if not rs:
            continue
        mean = lambda get: float(np.mean([get(r) for r in rs]))  # noqa: E731
        length = LengthStats(*(mean(lambda r, k=k.name: getattr(r.length, k)) for k in dataclasses.fields(LengthStats)))
        eos = None
        if all(r.eos is not None for r in rs):
            eos = EOSProfile(rs[0].eos.offsets, np.mean([r.eos.mean_prob for r in rs], axis=0).tolist(), rs[0].eos.counts)
        out.append(
            MetricReport(
                v.name, mean(lambda r: r.bleu1), mean(lambda r: r.bleu4), mean(lambda r: r.rouge_l),
                mean(lambda r: r.finding_p), mean(lambda r: r.finding_r), mean(lambda r: r.finding_f1),
                length, eos, {"id": v.id, "seeds": len(rs)},
            )
        )
    return out


def variant(key: str) -> AblationConfig:
    try:
        return ablation_by_id(key)
    except KeyError as e:
        raise ConfigError(str(e)) from None


def set_threads(n: int | None) -> None:
    if n:
        torch.set_num_threads(n)
