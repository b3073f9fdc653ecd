"""Token-to-expert routing.

Contains the learned router head, the expert-preferred greedy assignment,
its random-permutation baseline, and the capacity-distribution machinery:
the effective-capacity metric and the entropy-regularized solver that turns
a compute budget into a per-expert token share.

Assignment functions are pure (explicit seeds, no global state) and operate
on plain numpy arrays; only the router head itself participates in gradient
tracking.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import xlogy

from .errors import InfeasibleCapacityError, RoutingError
from .tensor import Tensor, add, matmul, row_softmax

__all__ = [
    "RouterParams",
    "router_forward",
    "validate_capacity",
    "expert_counts",
    "epr_assign",
    "random_assign",
    "effective_capacity",
    "capacity_objective",
    "solve_capacity",
    "min_effective_capacity",
]


@dataclass
class RouterParams:
    """Linear-plus-softmax head mapping token features to expert probabilities."""

    weight: Tensor  # (dim, num_experts)
    bias: Tensor  # (num_experts,)

    @staticmethod
    def init(dim: int, num_experts: int, rng: np.random.Generator, dtype=np.float32) -> "RouterParams":
        w = rng.normal(0.0, 0.02, size=(dim, num_experts)).astype(dtype)
        return RouterParams(weight=Tensor(w), bias=Tensor(np.zeros(num_experts, dtype=dtype)))

    @property
    def num_experts(self) -> int:
        return self.bias.shape[0]


def router_forward(tokens: Tensor, params: RouterParams) -> Tensor:
    """Per-token expert probabilities, one row per token: softmax(x W + b)."""
    return row_softmax(add(matmul(tokens, params.weight), params.bias))


# ---------------------------------------------------------------------------
# Capacity distributions
# ---------------------------------------------------------------------------


def validate_capacity(c, num_experts: int | None = None) -> np.ndarray:
    """Check that ``c`` is a simplex vector; returns it as float64."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size < 2:
        raise RoutingError(f"capacity distribution must be a vector of >=2 shares, got shape {c.shape}")
    if num_experts is not None and c.size != num_experts:
        raise RoutingError(f"capacity distribution has {c.size} entries, expected {num_experts}")
    if (c < -1e-12).any() or (c > 1 + 1e-12).any():
        raise RoutingError(f"capacity shares must lie in [0, 1], got {c}")
    if abs(c.sum() - 1.0) > 1e-9:
        raise RoutingError(f"capacity shares must sum to 1, got sum {c.sum()!r}")
    return np.clip(c, 0.0, 1.0)


def expert_counts(c, num_tokens: int) -> np.ndarray:
    """Integer token quota per expert for one image.

    Experts 2..E receive floor(c_j * N) tokens; whatever integer packing
    leaves over goes to expert 1 (the smallest).
    """
    c = validate_capacity(c)
    counts = np.floor(c * num_tokens).astype(np.int64)
    counts[0] = num_tokens - counts[1:].sum()
    return counts


def epr_assign(r: np.ndarray, c) -> np.ndarray:
    """Expert-preferred greedy assignment.

    ``r`` holds router predictions with one row per expert, one column per
    token (shape E x N). Iterating from the largest expert down, expert j
    claims the floor(c_j * N) still-unassigned tokens with the highest
    r[j, :] (ties broken toward the lower token index, claimed tokens are
    removed from play); tokens left over by integer packing default to
    expert 1. Returns 1-based expert indices, one per token.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2:
        raise RoutingError(f"router predictions must be 2-d (experts x tokens), got {r.shape}")
    num_experts, num_tokens = r.shape
    c = validate_capacity(c, num_experts)
    counts = expert_counts(c, num_tokens)

    assignment = np.ones(num_tokens, dtype=np.int64)
    available = np.ones(num_tokens, dtype=bool)
    for j in range(num_experts, 1, -1):  # expert 1 keeps the defaults
        k = int(counts[j - 1])
        if k == 0:
            continue
        masked = np.where(available, r[j - 1], -np.inf)
        chosen = np.argsort(-masked, kind="stable")[:k]
        assignment[chosen] = j
        available[chosen] = False
    return assignment


def random_assign(c, num_tokens: int, seed) -> np.ndarray:
    """Capacity-respecting random baseline.

    Permutes the exact expert-count vector that ``epr_assign`` would use for
    the same ``(c, N)``, so both routers induce identical per-expert loads.
    """
    counts = expert_counts(c, num_tokens)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    assignment = np.repeat(np.arange(1, counts.size + 1, dtype=np.int64), counts)
    return rng.permutation(assignment)


def min_effective_capacity(num_experts: int) -> float:
    """Smallest reachable effective capacity: everything on the smallest expert."""
    return 2.0 ** -(num_experts - 1)


def effective_capacity(c) -> float:
    """Compute-weighted capacity: sum of c_i * d_i / D = sum of c_i / 2^(E-i).

    Equals 1 when every token takes the full model and 1/2^(E-1) when every
    token takes the smallest nested expert.
    """
    c = validate_capacity(c)
    num_experts = c.size
    dims_over_full = 2.0 ** -(num_experts - 1 - np.arange(num_experts))
    return float(c @ dims_over_full)


def _linear_weights(num_experts: int, delta: float, favor_larger: bool) -> np.ndarray:
    i = np.arange(num_experts, dtype=np.float64)
    exponents = (num_experts - 1 - i) if favor_larger else i
    return delta**-exponents


def capacity_objective(c, beta: float = 10.0, delta: float = 2.0, favor_larger: bool = False) -> float:
    """Solver objective: linear preference term plus beta-weighted entropy."""
    c = np.asarray(c, dtype=np.float64)
    w = _linear_weights(c.size, delta, favor_larger)
    return float(c @ w - beta * xlogy(c, c).sum())


@lru_cache(maxsize=256)
def _solve_capacity_cached(e_c: float, num_experts: int, beta: float, delta: float, favor_larger: bool):
    g = 2.0 ** -(num_experts - 1 - np.arange(num_experts, dtype=np.float64))
    lo, hi = g[0], 1.0
    if e_c < lo - 1e-9 or e_c > hi + 1e-9:
        raise InfeasibleCapacityError(
            f"effective capacity {e_c} outside feasible range [{lo}, {hi}] for {num_experts} experts"
        )
    e_c = min(max(e_c, lo), hi)
    one_hot = np.zeros(num_experts)
    if e_c <= lo + 1e-12:
        one_hot[0] = 1.0
        return one_hot
    if e_c >= hi - 1e-12:
        one_hot[-1] = 1.0
        return one_hot

    w = _linear_weights(num_experts, delta, favor_larger)

    def gibbs(mu: float) -> np.ndarray:
        logits = (w - mu * g) / beta
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()

    def excess(mu: float) -> float:
        return float(gibbs(mu) @ g) - e_c

    # Bracket the dual variable: excess is strictly decreasing in mu.
    mu_lo, mu_hi = -1.0, 1.0
    for _ in range(80):
        if excess(mu_lo) >= 0.0:
            break
        mu_lo *= 2.0
    for _ in range(80):
        if excess(mu_hi) <= 0.0:
            break
        mu_hi *= 2.0
    mu = brentq(excess, mu_lo, mu_hi, xtol=1e-13, rtol=8.882e-16, maxiter=200)

    # Newton polish: d(excess)/d(mu) = -Var(g)/beta under the Gibbs weights.
    for _ in range(4):
        p = gibbs(mu)
        mean_g = float(p @ g)
        var_g = float(p @ (g - mean_g) ** 2)
        if var_g < 1e-300:
            break
        mu += (mean_g - e_c) * beta / var_g
    return gibbs(mu)


def solve_capacity(
    e_c: float,
    num_experts: int,
    beta: float = 10.0,
    delta: float = 2.0,
    favor_larger: bool = False,
) -> np.ndarray:
    """Capacity distribution maximizing the entropy-regularized preference.

    Maximizes  sum_i c_i / delta^(i-1) + beta * entropy(c)  subject to the
    simplex constraint and the effective-capacity equality. The objective is
    strictly concave on the feasible polytope, so the optimum is the unique
    Gibbs point c_i ∝ exp((w_i - mu g_i)/beta) whose dual variable mu is
    found by a bracketed root solve on the capacity constraint.

    ``favor_larger`` flips the linear term so that larger experts carry the
    higher preference weight (the default weights the smallest highest).
    """
    if beta <= 0:
        raise InfeasibleCapacityError(f"beta must be positive, got {beta}")
    if delta <= 1:
        raise InfeasibleCapacityError(f"delta must exceed 1, got {delta}")
    if num_experts < 2:
        raise InfeasibleCapacityError(f"need at least 2 experts, got {num_experts}")
    c = _solve_capacity_cached(float(e_c), int(num_experts), float(beta), float(delta), bool(favor_larger))
    return c.copy()
