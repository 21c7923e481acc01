"""Numeric kernels and the finite-difference gradient oracle.

Reverse-mode differentiation is delegated to torch autograd: frozen tensors
carry ``requires_grad=False`` so only adapter leaves ever get ``.grad``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

DTYPES = {"float64": torch.float64, "float32": torch.float32}


class NumericError(ValueError):
    """Raised when a kernel receives non-finite input or produces a non-finite gradient."""


def resolve_dtype(name: str | torch.dtype) -> torch.dtype:
    if isinstance(name, torch.dtype):
        return name
    try:
        return DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(DTYPES)}") from None


def _as_tensor(v) -> torch.Tensor:
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(np.asarray(v, dtype=np.float64))


def _check_finite(v: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(v).all()):
        bad = int((~torch.isfinite(v)).nonzero()[0][-1]) if v.ndim else 0
        raise NumericError(f"{what}: non-finite entry at index {bad}")


def log_softmax(v, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = _as_tensor(v)
    z = v / temperature
    z = z - z.max(dim=dim, keepdim=True).values.detach()
    return z - torch.logsumexp(z, dim=dim, keepdim=True)


def softmax(v, temperature: float = 1.0, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax of ``v / temperature`` along ``dim``."""
    v = _as_tensor(v)
    _check_finite(v, "softmax input")
    return log_softmax(v, temperature, dim).exp()


def cross_entropy(logits, target: int, temperature: float = 1.0) -> torch.Tensor:
    """``-log softmax(logits)[target]``.

    ``temperature`` is accepted for signature symmetry with the KL term but CE
    is always evaluated at temperature 1.
    """
    logits = _as_tensor(logits)
    n = logits.shape[-1]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    _check_finite(logits, "cross_entropy logits")
    return -log_softmax(logits, 1.0)[..., target]


def token_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position CE for ``logits[..., t, :]`` against ``targets[..., t]``."""
    lp = log_softmax(logits, 1.0)
    return -lp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` closes over ``params`` (leaf tensors with ``requires_grad``) and
    returns a scalar. Every coordinate of every param is perturbed in place.
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [p.grad.detach().clone() for p in params]
    for p in params:
        p.grad = None

    worst = 0.0
    offset = 0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                if not bool(torch.isfinite(gflat[i])):
                    raise NumericError(f"non-finite analytic gradient at coordinate {offset + i}")
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = fn().item()
                flat[i] = orig - epsilon
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                if not np.isfinite(numeric):
                    raise NumericError(f"non-finite numeric gradient at coordinate {offset + i}")
                err = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
            offset += flat.numel()
    return worst
