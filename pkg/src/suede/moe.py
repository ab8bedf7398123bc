"""Shared Unified Expert layer: gate, routed experts, always-on shared expert.

Output for a token ``x`` is ``shared(x) + sum_i w_i * routed_i(x)`` where the
weights ``w`` are the gate softmax restricted to the top-k experts and
renormalised to sum to one. Only the selected experts are evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .nn import Module, init_weight, zeros
from .rng import SplitMix64
from .tensor import (
    Tensor,
    gelu,
    logsumexp,
    mean,
    scale,
    scatter_rows,
    softmax,
    square,
    take_rows,
    tsum,
)


class ExpertFfn(Module):
    """Two-layer GELU MLP mapping D -> H -> D."""

    def __init__(self, rng: SplitMix64, dim: int, hidden: int):
        self.w1 = init_weight(rng, (dim, hidden))
        self.b1 = zeros((hidden,))
        self.w2 = init_weight(rng, (hidden, dim))
        self.b2 = zeros((dim,))

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class GateNetwork(Module):
    """Linear map from hidden states to one logit per routed expert."""

    def __init__(self, rng: SplitMix64, dim: int, n_experts: int):
        self.weight = init_weight(rng, (dim, n_experts))
        self.bias = zeros((n_experts,))

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class RouterOutput:
    logits: Tensor
    probs: Tensor
    selected: np.ndarray
    weights: Tensor

    @property
    def n_experts(self) -> int:
        return self.probs.shape[-1]


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries along the last axis; ties go to the lower index."""
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def gate_forward(x: Tensor, gate: GateNetwork, k: int, renormalize: bool = True) -> RouterOutput:
    """Route each token to its top-k experts.

    With ``renormalize=False`` the kept weights are the raw softmax
    probabilities (they then sum to less than one).
    """
    n = gate.n_experts
    if not 1 <= k <= n:
        raise ConfigError(f"top-k must satisfy 1 <= k <= n_experts, got k={k}, n={n}")
    logits = gate(x)
    probs = softmax(logits, axis=-1)
    selected = top_k_indices(probs.data, k)
    mask = np.zeros(probs.shape)
    np.put_along_axis(mask, selected, 1.0, axis=-1)
    # selection is a constant for backward; gradient flows through the kept probabilities
    weights = probs * mask
    if renormalize:
        weights = weights / tsum(weights, axis=-1, keepdims=True)
    return RouterOutput(logits=logits, probs=probs, selected=selected, weights=weights)


def init_shared_expert(base_ffn: ExpertFfn) -> ExpertFfn:
    """Shared expert starts as an exact, independent copy of the block's FFN."""
    return base_ffn.clone()


class SueLayer(Module):
    """Drop-in replacement for a transformer block's FFN.

    ``shared=None`` gives a vanilla routed-only MoE layer.
    """

    def __init__(
        self,
        shared: ExpertFfn | None,
        routed: Sequence[ExpertFfn],
        gate: GateNetwork,
        k: int,
        renormalize: bool = True,
    ):
        if len(routed) != gate.n_experts:
            raise ConfigError(f"gate has {gate.n_experts} outputs but {len(routed)} routed experts given")
        if not 1 <= k <= len(routed):
            raise ConfigError(f"top-k must satisfy 1 <= k <= n_experts, got k={k}, n={len(routed)}")
        self.shared = shared
        self.routed = list(routed)
        self.gate = gate
        self.k = k
        self.renormalize = renormalize

    @classmethod
    def from_base(
        cls,
        base_ffn: ExpertFfn,
        rng: SplitMix64,
        n_experts: int,
        k: int,
        shared: bool = True,
        zero_routed: bool = False,
        renormalize: bool = True,
    ) -> "SueLayer":
        dim, hidden = base_ffn.w1.shape
        routed = [ExpertFfn(rng, dim, hidden) for _ in range(n_experts)]
        if zero_routed:
            for e in routed:
                for p in e.parameters():
                    p.data[...] = 0.0
        gate = GateNetwork(rng, dim, n_experts)
        return cls(init_shared_expert(base_ffn) if shared else None, routed, gate, k, renormalize)

    def __call__(self, x: Tensor) -> tuple[Tensor, RouterOutput]:
        return sue_forward(self, x)


def sue_forward(layer: SueLayer, x: Tensor) -> tuple[Tensor, RouterOutput]:
    shape = x.shape
    dim = shape[-1]
    flat = x.reshape(-1, dim)
    n_tok = flat.shape[0]
    router = gate_forward(x, layer.gate, layer.k, layer.renormalize)
    n = router.n_experts
    sel = router.selected.reshape(n_tok, layer.k)
    w = router.weights.reshape(n_tok, n)

    routed = None
    for i, expert in enumerate(layer.routed):
        rows = np.flatnonzero((sel == i).any(axis=-1))
        if rows.size == 0:
            continue
        out = expert(take_rows(flat, rows))
        wi = w[rows, i].reshape(-1, 1)
        contrib = scatter_rows(n_tok, rows, out * wi)
        routed = contrib if routed is None else routed + contrib
    routed = routed.reshape(shape)
    if layer.shared is None:
        return routed, router
    # shared expert sees the unflattened input so it matches the base FFN bit for bit
    return layer.shared(x) + routed, router


# -- auxiliary losses ---------------------------------------------------------
def router_z_loss(logits: Tensor) -> Tensor:
    """Mean over tokens of the squared log-sum-exp of the gate logits."""
    return mean(square(logsumexp(logits, axis=-1)))


def load_balance_loss(probs: Tensor, selected: np.ndarray) -> Tensor:
    """``n * sum_i f_i * P_i``.

    ``f_i`` is the share of (token, slot) dispatches that went to expert i and
    is treated as a constant; ``P_i`` is the mean router probability of expert
    i, through which the gradient flows.
    """
    n = probs.shape[-1]
    counts = np.bincount(np.asarray(selected).reshape(-1), minlength=n).astype(np.float64)
    frac = counts / counts.sum()
    mean_prob = mean(probs.reshape(-1, n), axis=0)
    return scale(tsum(mean_prob * frac), float(n))


def aux_losses(routers: Sequence[RouterOutput]) -> tuple[Tensor, Tensor]:
    """Layer-averaged (z-loss, load-balance loss); zeros when nothing is routed."""
    if not routers:
        return Tensor(0.0), Tensor(0.0)
    lz = router_z_loss(routers[0].logits)
    lb = load_balance_loss(routers[0].probs, routers[0].selected)
    for r in routers[1:]:
        lz = lz + router_z_loss(r.logits)
        lb = lb + load_balance_loss(r.probs, r.selected)
    c = 1.0 / len(routers)
    return scale(lz, c), scale(lb, c)


def expert_utilization(selections: Sequence[np.ndarray], n_experts: int) -> tuple[np.ndarray, float]:
    """Dispatch fractions per expert and their entropy (nats).

    ``selections`` are selected-index arrays (any shape) collected over a
    dataset for one layer.
    """
    counts = np.zeros(n_experts)
    for sel in selections:
        counts += np.bincount(np.asarray(sel).reshape(-1), minlength=n_experts)[:n_experts]
    total = counts.sum()
    if total == 0:
        raise ContractError("expert_utilization needs at least one routed token")
    frac = counts / total
    nz = frac[frac > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return frac, max(entropy, 0.0)


@dataclass
class LossBundle:
    l_ce: Tensor
    l_z: Tensor
    l_b: Tensor
    total: Tensor
    alpha: float
    beta: float
    gamma: float

    def values(self) -> dict[str, float]:
        return {
            "l_ce": self.l_ce.item(),
            "l_z": self.l_z.item(),
            "l_b": self.l_b.item(),
            "total": self.total.item(),
        }


def total_loss(l_ce, l_z, l_b, alpha: float = 1.0, beta: float = 1e-3, gamma: float = 1e-2) -> LossBundle:
    """``alpha * l_ce + beta * l_z + gamma * l_b`` as one graph node."""
    if min(alpha, beta, gamma) < 0:
        raise ConfigError(f"loss coefficients must be >= 0, got {(alpha, beta, gamma)}")
    l_ce, l_z, l_b = (v if isinstance(v, Tensor) else Tensor(v) for v in (l_ce, l_z, l_b))
    total = scale(l_ce, alpha) + scale(l_z, beta) + scale(l_b, gamma)
    return LossBundle(l_ce, l_z, l_b, total, alpha, beta, gamma)
