"""Hidden-state interventions: static residual vectors and state-conditioned bottleneck adapters."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorio import read_container, write_container

BRANCHES = ("attn", "mlp")
MODES = ("dynamic", "static", "off")
ADAPTER_MAGIC = b"SDAD"


def adapter_delta(h: torch.Tensor, w_down=None, w_up=None, v=None) -> torch.Tensor:
    """Residual for hidden state(s) ``h`` of shape ``(..., d)``.

    Dynamic entries pass ``w_down`` (r x d) and ``w_up`` (d x r) and get
    ``w_up @ gelu(w_down @ h)``; static entries pass ``v`` (d,) which is
    broadcast regardless of ``h``.
    """
    d = h.shape[-1]
    if v is not None:
        if v.shape != (d,):
            raise ValueError(f"static vector has shape {tuple(v.shape)}, hidden size is {d}")
        return v.expand_as(h)
    if w_down is None or w_up is None:
        raise ValueError("dynamic entry needs both w_down and w_up")
    r = w_down.shape[0]
    if w_down.shape != (r, d) or w_up.shape != (d, r):
        raise ValueError(
            f"adapter shapes down={tuple(w_down.shape)} up={tuple(w_up.shape)} do not fit hidden size {d}"
        )
    return F.gelu(h @ w_down.T) @ w_up.T


def inject(h: torch.Tensor, delta: torch.Tensor, rho: float, scale=1.0) -> torch.Tensor:
    """Norm-clipped addition ``(h + s*delta) * min(1, rho*|h| / |h + s*delta|)``.

    A zero ``h`` with nonzero ``delta`` gives a clip factor of 0.
    """
    if rho <= 1:
        raise ValueError(f"clip ratio must exceed 1, got {rho}")
    if isinstance(scale, torch.Tensor):
        s = scale
    else:
        if not 0.0 <= scale <= 1.0:
            raise ValueError(f"scale must lie in [0, 1], got {scale}")
        if scale == 0.0:
            return h
        s = scale
    out = h + s * delta
    limit = rho * torch.linalg.vector_norm(h, dim=-1, keepdim=True)
    norm = torch.linalg.vector_norm(out, dim=-1, keepdim=True)
    over = norm > limit
    safe = torch.where(over, norm, torch.ones_like(norm))
    return torch.where(over, out * limit / safe, out)


def decay_schedule(step: int, rate: float) -> float:
    """Adapter scale for the ``step``-th generated token (teacher forcing always uses 1)."""
    if step < 0:
        raise ValueError(f"step must be nonnegative, got {step}")
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"decay rate must lie in (0, 1], got {rate}")
    return rate**step


class AdapterSet(nn.Module):
    """Trainable interventions attached at every (layer, branch) output.

    Only these parameters are optimised; the backbone stays frozen.
    """

    def __init__(
        self,
        n_layers: int,
        d_model: int,
        mode: str = "dynamic",
        rank: int = 16,
        rho: float = 2.0,
        decay: float = 0.9,
        layers=None,
        branches=BRANCHES,
        seed: int = 0,
        dtype=torch.float64,
    ):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if rho <= 1:
            raise ValueError(f"clip ratio must exceed 1, got {rho}")
        if not 0.0 < decay <= 1.0:
            raise ValueError(f"decay rate must lie in (0, 1], got {decay}")
        unknown = set(branches) - set(BRANCHES)
        if unknown:
            raise ValueError(f"unknown branches {sorted(unknown)}")
        self.n_layers = n_layers
        self.d_model = d_model
        self.mode = mode
        self.rank = rank
        self.rho = float(rho)
        self.decay = float(decay)
        self.layers = tuple(range(n_layers)) if layers is None else tuple(sorted(layers))
        self.branches = tuple(branches)
        self.seed = seed
        self.params = nn.ParameterDict()
        if mode == "off":
            return
        gen = torch.Generator().manual_seed(seed)
        for l in self.layers:
            for b in self.branches:
                if mode == "dynamic":
                    down = torch.randn(rank, d_model, generator=gen, dtype=torch.float64) / np.sqrt(d_model)
                    self.params[f"l{l}_{b}_down"] = nn.Parameter(down.to(dtype))
                    self.params[f"l{l}_{b}_up"] = nn.Parameter(torch.zeros(d_model, rank, dtype=dtype))
                else:
                    self.params[f"l{l}_{b}_v"] = nn.Parameter(torch.zeros(d_model, dtype=dtype))

    def entry(self, layer: int, branch: str) -> dict | None:
        if self.mode == "off" or layer not in self.layers or branch not in self.branches:
            return None
        if self.mode == "dynamic":
            return {"w_down": self.params[f"l{layer}_{branch}_down"], "w_up": self.params[f"l{layer}_{branch}_up"]}
        return {"v": self.params[f"l{layer}_{branch}_v"]}

    def apply(self, layer: int, branch: str, h: torch.Tensor, scale=1.0) -> torch.Tensor:
        e = self.entry(layer, branch)
        if e is None:
            return h
        return inject(h, adapter_delta(h, **e), self.rho, scale)

    def metadata(self) -> dict:
        return {
            "mode": self.mode,
            "rank": self.rank,
            "rho": self.rho,
            "decay": self.decay,
            "layers": list(self.layers),
            "branches": list(self.branches),
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "seed": self.seed,
            "activation": "gelu",
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = {"adapter": self.metadata(), **(extra or {})}
        tensors = {k: p.detach().cpu().numpy() for k, p in self.params.items()}
        write_container(path, ADAPTER_MAGIC, header, tensors)

    @classmethod
    def load(cls, path: str | Path) -> "AdapterSet":
        header, tensors = read_container(path, ADAPTER_MAGIC)
        m = header["adapter"]
        dtype = torch.float64
        if tensors:
            dtype = torch.from_numpy(next(iter(tensors.values()))).dtype
        out = cls(
            m["n_layers"], m["d_model"], mode=m["mode"], rank=m["rank"], rho=m["rho"], decay=m["decay"],
            layers=m["layers"], branches=m["branches"], seed=m["seed"], dtype=dtype,
        )
        if set(tensors) != set(out.params.keys()):
            raise ValueError(f"{path}: tensor names do not match adapter layout")
        with torch.no_grad():
            for k, arr in tensors.items():
                out.params[k].copy_(torch.from_numpy(arr))
        return out
