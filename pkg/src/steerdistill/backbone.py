"""Small pre-norm decoder-only transformer with branch taps, KV-cached decoding and pretraining."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numeric import NumericError, resolve_dtype, softmax
from .steering import AdapterSet, decay_schedule
from .tensorio import read_container, write_container

CHECKPOINT_MAGIC = b"SDBB"


class ContextOverflow(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_context: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


@dataclass
class DecodeConfig:
    max_new_tokens: int = 128
    greedy: bool = True
    eos_id: int = 2
    decay: float | None = None  # None: use the adapter set's own rate
    seed: int = 0


@dataclass
class GenResult:
    tokens: list[int]
    eos_probs: list[float]
    stop_reason: str  # "eos" or "budget"


class Backbone(nn.Module):
    """Decoder-only transformer ``f_theta``.

    Branch outputs (attention and MLP, after their output projections) pass
    through ``adapters.apply`` before being added to the residual stream.
    """

    def __init__(self, config: BackboneConfig, dtype="float64"):
        super().__init__()
        self.config = config
        dt = resolve_dtype(dtype)
        c = config
        gen = torch.Generator().manual_seed(c.seed)

        def normal(*shape, std=0.02):
            return nn.Parameter((torch.randn(*shape, generator=gen, dtype=torch.float64) * std).to(dt))

        def const(value, *shape):
            return nn.Parameter(torch.full(shape, float(value), dtype=dt))

        out_std = 0.02 / math.sqrt(2 * c.n_layers)
        d = c.d_model
        self.tok_emb = normal(c.vocab_size, d)
        self.pos_emb = normal(c.max_context, d)
        self.blocks = nn.ModuleList()
        for _ in range(c.n_layers):
            blk = nn.ParameterDict(
                {
                    "ln1_w": const(1, d),
                    "ln1_b": const(0, d),
                    "qkv_w": normal(3 * d, d),
                    "qkv_b": const(0, 3 * d),
                    "proj_w": normal(d, d, std=out_std),
                    "proj_b": const(0, d),
                    "ln2_w": const(1, d),
                    "ln2_b": const(0, d),
                    "fc1_w": normal(c.d_ff, d),
                    "fc1_b": const(0, c.d_ff),
                    "fc2_w": normal(d, c.d_ff, std=out_std),
                    "fc2_b": const(0, d),
                }
            )
            self.blocks.append(blk)
        self.lnf_w = const(1, d)
        self.lnf_b = const(0, d)
        self.head_w = normal(c.vocab_size, d)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def freeze(self) -> "Backbone":
        self.requires_grad_(False)
        return self

    def forward(
        self,
        tokens,
        adapters: AdapterSet | None = None,
        scales=1.0,
        cache: list | None = None,
        taps: bool = False,
        offset: int = 0,
    ):
        """Logits for every position of ``tokens`` (B, T) or (T,).

        ``scales`` multiplies the adapter residual per position (scalar or a
        tensor broadcastable to (B, T)). With ``cache`` (a list, possibly
        empty) keys/values are appended in place for incremental decoding.
        Returns ``logits`` or ``(logits, taps_dict)`` when ``taps`` is set;
        taps map ``(layer, branch)`` to the branch output before injection.
        ``offset`` shifts the position ids; pretraining uses it as augmentation.
        """
        x = torch.as_tensor(tokens, dtype=torch.long)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.unsqueeze(0)
        B, T = x.shape
        past = 0 if not cache else cache[0][0].shape[2]
        if offset + past + T > self.config.max_context:
            raise ContextOverflow(
                f"sequence of {past + T} tokens at offset {offset} exceeds max_context={self.config.max_context}"
            )
        c = self.config
        H = c.n_heads
        hd = c.d_model // H
        if isinstance(scales, torch.Tensor):
            s = scales.to(self.dtype)
            if s.ndim == 1:
                s = s.unsqueeze(0)
            s = s.expand(B, T).unsqueeze(-1)
        else:
            s = float(scales)
        h = self.tok_emb[x] + self.pos_emb[offset + past : offset + past + T]
        tapped = {}
        mask = torch.ones(T, past + T, dtype=torch.bool).tril(diagonal=past) if past else None
        for li, blk in enumerate(self.blocks):
            a = F.layer_norm(h, (c.d_model,), blk["ln1_w"], blk["ln1_b"])
            q, k, v = F.linear(a, blk["qkv_w"], blk["qkv_b"]).split(c.d_model, dim=-1)
            q = q.view(B, T, H, hd).transpose(1, 2)
            k = k.view(B, T, H, hd).transpose(1, 2)
            v = v.view(B, T, H, hd).transpose(1, 2)
            if cache is not None:
                if len(cache) > li:
                    k = torch.cat([cache[li][0], k], dim=2)
                    v = torch.cat([cache[li][1], v], dim=2)
                    cache[li] = (k, v)
                else:
                    cache.append((k, v))
            if past == 0:
                y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
            else:
                y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
            y = y.transpose(1, 2).reshape(B, T, c.d_model)
            attn_out = F.linear(y, blk["proj_w"], blk["proj_b"])
            if taps:
                tapped[(li, "attn")] = attn_out
            if adapters is not None:
                attn_out = adapters.apply(li, "attn", attn_out, s)
            h = h + attn_out
            m = F.layer_norm(h, (c.d_model,), blk["ln2_w"], blk["ln2_b"])
            mlp_out = F.linear(F.gelu(F.linear(m, blk["fc1_w"], blk["fc1_b"])), blk["fc2_w"], blk["fc2_b"])
            if taps:
                tapped[(li, "mlp")] = mlp_out
            if adapters is not None:
                mlp_out = adapters.apply(li, "mlp", mlp_out, s)
            h = h + mlp_out
        h = F.layer_norm(h, (c.d_model,), self.lnf_w, self.lnf_b)
        logits = h @ self.head_w.T
        if squeeze:
            logits = logits[0]
            tapped = {k: t[0] for k, t in tapped.items()}
        return (logits, tapped) if taps else logits

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path, training: dict | None = None) -> None:
        header = {"config": asdict(self.config), "training": training or {}}
        tensors = {k: p.detach().cpu().numpy() for k, p in self.named_parameters()}
        write_container(path, CHECKPOINT_MAGIC, header, tensors)

    @classmethod
    def load(cls, path: str | Path, expect: BackboneConfig | None = None) -> "Backbone":
        header, tensors = read_container(path, CHECKPOINT_MAGIC)
        cfg = BackboneConfig(**header["config"])
        if expect is not None and expect != cfg:
            raise ValueError(f"{path}: checkpoint config {cfg} does not match expected {expect}")
        dtype = torch.from_numpy(tensors["tok_emb"]).dtype
        model = cls(cfg, dtype=dtype)
        names = dict(model.named_parameters())
        if set(names) != set(tensors):
            raise ValueError(f"{path}: parameter names do not match the architecture")
        with torch.no_grad():
            for k, arr in tensors.items():
                if tuple(arr.shape) != tuple(names[k].shape):
                    raise ValueError(f"{path}: tensor {k} has shape {arr.shape}, expected {tuple(names[k].shape)}")
                names[k].copy_(torch.from_numpy(arr))
        model.training_meta = header["training"]
        return model.freeze()


def init_backbone(config: BackboneConfig, dtype="float64") -> Backbone:
    return Backbone(config, dtype=dtype)


# -- decoding ---------------------------------------------------------------


@torch.no_grad()
def generate_batch(
    model: Backbone,
    prompts: Sequence[Sequence[int]],
    decode: DecodeConfig,
    adapters: AdapterSet | None = None,
) -> list[GenResult]:
    """Decode ``prompts`` with a KV cache, equal-length prompts in lockstep.

    The inputs are query tokens, the frozen model and the adapters; there is
    deliberately no way to pass demonstrations or a teacher cache. Results
    come back in input order.
    """
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(len(p), []).append(i)
    results: list[GenResult | None] = [None] * len(prompts)
    for L in sorted(groups):
        idx = groups[L]
        for i, r in zip(idx, _lockstep(model, [list(prompts[i]) for i in idx], decode, adapters)):
            results[i] = r
    return results


def _lockstep(model: Backbone, prompts: list[list[int]], decode: DecodeConfig, adapters: AdapterSet | None):
    L = len(prompts[0])
    if L + decode.max_new_tokens > model.config.max_context:
        raise ContextOverflow(
            f"prompt of {L} tokens plus {decode.max_new_tokens} new tokens exceeds "
            f"max_context={model.config.max_context}"
        )
    B = len(prompts)
    rate = decode.decay if decode.decay is not None else (adapters.decay if adapters is not None else 1.0)
    gen = torch.Generator().manual_seed(decode.seed)
    results = [GenResult([], [], "budget") for _ in range(B)]
    if decode.max_new_tokens == 0:
        return results
    active = np.ones(B, dtype=bool)
    cache: list = []
    inp = torch.tensor(prompts, dtype=torch.long)
    scales = torch.ones(B, L, dtype=model.dtype)
    for step in range(decode.max_new_tokens):
        logits = model(inp, adapters=adapters, scales=scales, cache=cache)[:, -1]
        probs = softmax(logits.to(torch.float64))
        if decode.greedy:
            nxt = probs.argmax(dim=-1)
        else:
            nxt = torch.multinomial(probs, 1, generator=gen).squeeze(-1)
        for i in np.flatnonzero(active):
            tok = int(nxt[i])
            results[i].tokens.append(tok)
            results[i].eos_probs.append(float(probs[i, decode.eos_id]))
            if tok == decode.eos_id:
                results[i].stop_reason = "eos"
                active[i] = False
        if not active.any():
            break
        inp = nxt.unsqueeze(-1)
        scales = torch.full((B, 1), decay_schedule(step + 1, rate), dtype=model.dtype)
    return results


def generate(model: Backbone, prompt: Sequence[int], decode: DecodeConfig, adapters: AdapterSet | None = None) -> GenResult:
    return generate_batch(model, [prompt], decode, adapters)[0]


# -- pretraining ------------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 3e-4
    warmup_frac: float = 0.05
    min_lr_frac: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 100
    # random start position per batch, so lookups cannot key on absolute position
    position_jitter: bool = True


def lr_at(step: int, cfg: PretrainConfig) -> float:
    warm = max(1, int(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(1, cfg.steps - warm)
    return cfg.lr * (cfg.min_lr_frac + (1 - cfg.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


def collate(batch: Sequence[tuple[Sequence[int], Sequence[bool]]], pad_id: int = 0):
    """Right-pad (tokens, target_mask) pairs into input/target/mask tensors.

    ``target_mask[t]`` selects whether ``tokens[t]`` is a supervised target.
    """
    T = max(len(t) for t, _ in batch) - 1
    inp = torch.full((len(batch), T), pad_id, dtype=torch.long)
    tgt = torch.full((len(batch), T), pad_id, dtype=torch.long)
    msk = torch.zeros(len(batch), T, dtype=torch.bool)
    for i, (toks, m) in enumerate(batch):
        n = len(toks) - 1
        inp[i, :n] = torch.tensor(toks[:-1])
        tgt[i, :n] = torch.tensor(toks[1:])
        msk[i, :n] = torch.tensor(list(m[1:]), dtype=torch.bool)
    return inp, tgt, msk


def lm_loss(model: Backbone, inp, tgt, msk, offset: int = 0) -> torch.Tensor:
    logits = model(inp, offset=offset)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), reduction="none")
    ce = ce.view_as(tgt)
    return (ce * msk).sum() / msk.sum().clamp_min(1)


def pretrain(
    model: Backbone,
    sample_batch: Callable[[np.random.Generator, int, float], list],
    cfg: PretrainConfig,
    progress: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Train all backbone parameters on batches from ``sample_batch(rng, size, progress)``.

    ``progress`` is the fraction of steps done, for samplers with a curriculum.

    Returns the per-step loss curve; the model is frozen afterwards.
    """
    model.requires_grad_(True)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.95), weight_decay=cfg.weight_decay)
    losses = []
    for step in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, cfg)
        inp, tgt, msk = collate(sample_batch(rng, cfg.batch_size, step / cfg.steps))
        room = model.config.max_context - inp.shape[1]
        offset = int(rng.integers(0, room + 1)) if cfg.position_jitter else 0
        loss = lm_loss(model, inp, tgt, msk, offset)
        if not torch.isfinite(loss):
            raise NumericError(f"pretraining diverged at step {step}: loss={loss.item()}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        losses.append(loss.item())
        if progress is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            progress(step, losses[-1])
    model.freeze()
    return losses
