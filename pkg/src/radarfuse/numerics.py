"""Layer primitives shared by every network stage, plus a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects. Tests and gradient checks run in float64.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class DimensionError(ValueError):
    pass


class NumericDomainError(ArithmeticError):
    pass


def gelu_tanh(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="tanh")


ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "gelu": gelu_tanh,
}


class Mlp(nn.Module):
    """Stack of affine layers with an activation between them.

    ``activate_last`` also applies the activation to the final layer's output.
    """

    def __init__(self, widths: Sequence[int], activation: str = "relu", activate_last: bool = False):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise DimensionError(f"an MLP needs at least two widths, got {widths}")
        if any(w < 1 for w in widths):
            raise DimensionError(f"MLP widths must be positive, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.activate_last = activate_last
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.widths[0]:
            raise DimensionError(
                f"MLP input axis -1 has size {x.shape[-1]}, but the first layer expects {self.widths[0]}"
            )
        act = ACTIVATIONS[self.activation]
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                x = act(x)
        return x


def mlp_forward(params: Mlp, x: torch.Tensor) -> torch.Tensor:
    return params(x)


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Numerically stable softmax over the last axis."""
    if torch.isnan(x).any():
        raise NumericDomainError("softmax input contains NaN")
    shifted = x - x.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, bias: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(softmax(q k^T / sqrt(d) + bias) v, weights)``; leading axes broadcast."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


class GruCell(nn.Module):
    """Gated recurrent unit.

    Gate convention (pinned by the zero-weight test)::

        z  = sigmoid(Wz x + Uz h + bz)           update gate
        r  = sigmoid(Wr x + Ur h + br)           reset gate
        hc = tanh(Wc x + Uc (r * h) + bc)        candidate
        h' = z * h + (1 - z) * hc

    With all weights and biases zero, z = 0.5 and hc = 0, so h' = 0.5 h.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        # stacked blocks: [update, reset, candidate]
        self.w_x = nn.Parameter(torch.empty(3, hidden_dim, input_dim))
        self.w_h = nn.Parameter(torch.empty(3, hidden_dim, hidden_dim))
        self.bias = nn.Parameter(torch.zeros(3, hidden_dim))
        bound = 1.0 / math.sqrt(hidden_dim)
        nn.init.uniform_(self.w_x, -bound, bound)
        nn.init.uniform_(self.w_h, -bound, bound)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"GRU input axis -1 has size {x.shape[-1]}, expected {self.input_dim}")
        if h.shape[-1] != self.hidden_dim:
            raise DimensionError(f"GRU hidden axis -1 has size {h.shape[-1]}, expected {self.hidden_dim}")
        z = torch.sigmoid(x @ self.w_x[0].T + h @ self.w_h[0].T + self.bias[0])
        r = torch.sigmoid(x @ self.w_x[1].T + h @ self.w_h[1].T + self.bias[1])
        cand = torch.tanh(x @ self.w_x[2].T + (r * h) @ self.w_h[2].T + self.bias[2])
        return z * h + (1.0 - z) * cand


def gru_step(params: GruCell, x: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
    return params(x, h_prev)


def grad_check_groups(
    f: Callable[[], torch.Tensor],
    named_params: Iterable[tuple[str, torch.Tensor]],
    eps: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error per parameter tensor between autograd and central differences.

    The error of one entry is ``|analytic - fd| / max(1, |fd|)``. ``max_entries``
    caps how many entries of each tensor are probed (chosen with a seeded RNG).
    """
    named = [(n, p) for n, p in named_params]
    loss = f()
    if not torch.isfinite(loss).all():
        raise NumericDomainError(f"objective is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    rng = torch.Generator().manual_seed(seed)
    report: dict[str, float] = {}
    with torch.no_grad():
        for (name, p), g in zip(named, grads):
            flat = p.data.view(-1)
            g_flat = torch.zeros_like(flat) if g is None else g.reshape(-1)
            idx = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=rng)[:max_entries].tolist()
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = f()
                flat[i] = orig - eps
                f_minus = f()
                flat[i] = orig
                if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                    raise NumericDomainError(f"objective became non-finite while perturbing {name}[{i}]")
                fd = (f_plus.item() - f_minus.item()) / (2.0 * eps)
                err = abs(g_flat[i].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
            report[name] = worst
    return report


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    eps: float = 1e-3,
    max_entries: int | None = None,
) -> float:
    """Max relative error over all parameter entries (see ``grad_check_groups``)."""
    items = list(params)
    named = [it if isinstance(it, tuple) else (str(i), it) for i, it in enumerate(items)]
    report = grad_check_groups(f, named, eps=eps, max_entries=max_entries)
    return max(report.values(), default=0.0)
