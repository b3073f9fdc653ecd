"""Multiply-accumulate accounting for nested-expert forward passes.

The per-token, per-layer count for a token on the expert with nested width d
is fixed as:

    QKV in-projections   3 * d * D
    attention (scores
    plus value mixing)   2 * N * D     (always at full width, every token)
    output projection    d * D
    feed-forward         d * 4D + 4D * d = 8 * d * D
    two LayerNorms       2 * 5D = 10 * D

for a total of ``12*d*D + 2*N*D + 10*D`` MACs. Attention is booked at the
full model dimension regardless of expert because information exchange
always happens there. The router head costs ``N * D * E`` once per image
when included. Tokenization and the classifier are identical for every
assignment and are excluded, as is whatever constant softmax/GeLU work the
nonlinearity does; the 5D LayerNorm figure is a documented estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RoutingError
from .model import NestedSpec
from .routing import expert_counts

__all__ = ["FlopReport", "flops_per_token", "model_flops", "flops_from_counts", "predicted_ratio"]


def flops_per_token(expert_idx: int, num_tokens: int, spec: NestedSpec) -> int:
    """MACs one token costs per layer when handled by ``expert_idx`` (1-based)."""
    if not 1 <= expert_idx <= spec.num_experts:
        raise RoutingError(f"expert index {expert_idx} outside [1, {spec.num_experts}]")
    d = spec.dims[expert_idx - 1]
    full = spec.model_dim
    return 12 * d * full + 2 * num_tokens * full + 10 * full


def router_flops(num_tokens: int, spec: NestedSpec) -> int:
    return num_tokens * spec.model_dim * spec.num_experts


@dataclass
class FlopReport:
    """Per-layer, per-expert MAC counts for one image's forward pass."""

    per_layer_expert: np.ndarray  # (num_layers, num_experts) int64
    router_macs: int
    include_router: bool
    baseline_total: int  # dense model, router excluded

    @property
    def total(self) -> int:
        extra = self.router_macs if self.include_router else 0
        return int(self.per_layer_expert.sum()) + extra

    @property
    def ratio(self) -> float:
        return self.total / self.baseline_total

    def csv_rows(self):
        """(layer, expert, macs, ratio-of-baseline) rows plus a total row."""
        rows = []
        num_layers, num_experts = self.per_layer_expert.shape
        for layer in range(1, num_layers + 1):
            for expert in range(1, num_experts + 1):
                macs = int(self.per_layer_expert[layer - 1, expert - 1])
                rows.append((str(layer), str(expert), str(macs), f"{macs / self.baseline_total:.10g}"))
        if self.include_router:
            rows.append(("router", "-", str(self.router_macs), f"{self.router_macs / self.baseline_total:.10g}"))
        rows.append(("total", "-", str(self.total), f"{self.ratio:.10g}"))
        return rows


def flops_from_counts(
    counts: np.ndarray,
    spec: NestedSpec,
    num_tokens: int,
    include_router: bool = False,
    router_layer: int = 1,
) -> FlopReport:
    """Report from a per-expert token-count vector (routed layers only see it;
    layers before the router layer run every token dense)."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.sum() != num_tokens:
        raise RoutingError(f"counts {counts.tolist()} do not cover {num_tokens} tokens")
    num_layers, num_experts = spec.num_layers, spec.num_experts
    table = np.zeros((num_layers, num_experts), dtype=np.int64)
    dense_row = np.zeros(num_experts, dtype=np.int64)
    dense_row[-1] = num_tokens * flops_per_token(num_experts, num_tokens, spec)
    routed_row = np.array(
        [counts[j] * flops_per_token(j + 1, num_tokens, spec) for j in range(num_experts)],
        dtype=np.int64,
    )
    for layer in range(num_layers):
        table[layer] = dense_row if layer < router_layer - 1 else routed_row
    baseline = int(num_layers * dense_row.sum())
    return FlopReport(
        per_layer_expert=table,
        router_macs=router_flops(num_tokens, spec),
        include_router=include_router,
        baseline_total=baseline,
    )


def model_flops(
    assignments: np.ndarray,
    spec: NestedSpec,
    include_router: bool = False,
    router_layer: int = 1,
) -> FlopReport:
    """Report for one image's token-to-expert assignment vector (1-based)."""
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.size and (assignments.min() < 1 or assignments.max() > spec.num_experts):
        raise RoutingError("assignment entries must be 1-based expert indices")
    counts = np.bincount(assignments, minlength=spec.num_experts + 1)[1:]
    return flops_from_counts(
        counts, spec, assignments.size, include_router=include_router, router_layer=router_layer
    )


def predicted_ratio(
    capacity,
    spec: NestedSpec,
    num_tokens: int,
    include_router: bool = False,
    router_layer: int = 1,
) -> float:
    """Ratio the capacity distribution induces, straight from the integer quota.

    Exactly equal to the measured ratio of any assignment produced for the
    same (capacity, token count), since the quota is deterministic.
    """
    counts = expert_counts(capacity, num_tokens)
    return flops_from_counts(
        counts, spec, num_tokens, include_router=include_router, router_layer=router_layer
    ).ratio
