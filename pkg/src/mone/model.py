"""Nested vision-transformer: weight-sliced expert blocks and the forward pass.

Every projection weight stores its full-size matrix; an expert with nested
dimension d uses only the first d rows (and the first d input features for
in-projections), so smaller experts are strict parameter subsets of larger
ones. Self-attention always exchanges information at the full model
dimension; branch outputs are padded back to full width before the residual
add and LayerNorm.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, RoutingError
from .routing import RouterParams, epr_assign, random_assign, router_forward
from .tensor import (
    Tensor,
    add,
    gather_pairs,
    gelu,
    layer_norm,
    matmul,
    mean_axis,
    mul,
    pad_cols,
    record,
    reshape,
    row_softmax,
    scale,
    slice_cols,
    transpose,
)

__all__ = [
    "NestedSpec",
    "ModelConfig",
    "BlockParams",
    "ModelParams",
    "extract",
    "pad",
    "dims_from_assignments",
    "sliced_in_projection",
    "sliced_out_projection",
    "attention_branch",
    "ffn_branch",
    "block_forward",
    "image_to_patches",
    "tokenize",
    "pool_classify",
    "granularity_forward",
    "routed_forward",
    "model_forward",
]


@dataclass(frozen=True)
class NestedSpec:
    """Architecture skeleton: full width, expert count, heads, depth.

    Nested dimensions are exponentially spaced, d_i = D / 2^(E-i), so the
    largest expert is the full model and each expert halves the previous
    one's projection width.
    """

    model_dim: int
    num_experts: int = 4
    num_heads: int = 4
    num_layers: int = 4

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"need at least one expert, got {self.num_experts}")
        if self.model_dim % (2 ** (self.num_experts - 1)) != 0:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by 2^(E-1)={2 ** (self.num_experts - 1)}"
            )
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.num_heads} heads")
        if self.num_layers < 1:
            raise ConfigError("need at least one layer")

    @property
    def dims(self) -> tuple[int, ...]:
        """Nested widths d_1 < d_2 < ... < d_E = model_dim."""
        e = self.num_experts
        return tuple(self.model_dim // 2 ** (e - i) for i in range(1, e + 1))

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def ffn_dim(self) -> int:
        return 4 * self.model_dim


@dataclass(frozen=True)
class ModelConfig:
    """Full model shape: nested spec plus tokenization and head settings."""

    spec: NestedSpec
    image_size: tuple[int, int] = (32, 32)
    patch_size: int = 8
    channels: int = 1
    num_classes: int = 10
    norm_style: str = "branch"  # "branch": LN on branch outputs; "pre": LN on branch inputs
    router_layer: int = 1
    ln_eps: float = 1e-6

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"image {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.norm_style not in ("branch", "pre"):
            raise ConfigError(f"unknown norm_style {self.norm_style!r}")
        if not 1 <= self.router_layer <= self.spec.num_layers:
            raise ConfigError(
                f"router_layer {self.router_layer} outside [1, {self.spec.num_layers}]"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size)

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return {
            "model_dim": self.spec.model_dim,
            "num_experts": self.spec.num_experts,
            "num_heads": self.spec.num_heads,
            "num_layers": self.spec.num_layers,
            "image_size": list(self.image_size),
            "patch_size": self.patch_size,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "norm_style": self.norm_style,
            "router_layer": self.router_layer,
            "ln_eps": self.ln_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            spec=NestedSpec(
                model_dim=d["model_dim"],
                num_experts=d["num_experts"],
                num_heads=d["num_heads"],
                num_layers=d["num_layers"],
            ),
            image_size=tuple(d["image_size"]),
            patch_size=d["patch_size"],
            channels=d["channels"],
            num_classes=d["num_classes"],
            norm_style=d.get("norm_style", "branch"),
            router_layer=d.get("router_layer", 1),
            ln_eps=d.get("ln_eps", 1e-6),
        )

    def with_router_layer(self, layer: int) -> "ModelConfig":
        return replace(self, router_layer=layer)


@dataclass
class BlockParams:
    """One transformer layer: attention + FFN projections, norms, FFN gate scalar.

    Projections carry no biases; the FFN hidden width is fixed at 4x the
    model dimension; ``alpha`` scales the router-probability multiplier on
    the FFN branch and starts at zero so routing is initially a no-op.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_sa_out: Tensor
    w_ff_in: Tensor
    w_ff_out: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    alpha: Tensor

    @staticmethod
    def init(spec: NestedSpec, rng: np.random.Generator, dtype=np.float32) -> "BlockParams":
        d, f = spec.model_dim, spec.ffn_dim

        def w(shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape).astype(dtype))

        return BlockParams(
            w_q=w((d, d)),
            w_k=w((d, d)),
            w_v=w((d, d)),
            w_sa_out=w((d, d)),
            w_ff_in=w((d, f)),
            w_ff_out=w((d, f)),
            ln1_gamma=Tensor(np.ones(d, dtype=dtype)),
            ln1_beta=Tensor(np.zeros(d, dtype=dtype)),
            ln2_gamma=Tensor(np.ones(d, dtype=dtype)),
            ln2_beta=Tensor(np.zeros(d, dtype=dtype)),
            alpha=Tensor(np.zeros((), dtype=dtype)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_k": self.w_k,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_sa_out": self.w_sa_out,
            f"{prefix}.w_ff_in": self.w_ff_in,
            f"{prefix}.w_ff_out": self.w_ff_out,
            f"{prefix}.ln1_gamma": self.ln1_gamma,
            f"{prefix}.ln1_beta": self.ln1_beta,
            f"{prefix}.ln2_gamma": self.ln2_gamma,
            f"{prefix}.ln2_beta": self.ln2_beta,
            f"{prefix}.alpha": self.alpha,
        }


@dataclass
class ModelParams:
    """All learnable state plus the configuration it was built for."""

    config: ModelConfig
    patch_embed: Tensor
    pos_embed: Tensor
    blocks: list[BlockParams]
    router: RouterParams
    classifier_w: Tensor
    classifier_b: Tensor

    @staticmethod
    def init(config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        spec = config.spec
        d = spec.model_dim
        return ModelParams(
            config=config,
            patch_embed=Tensor(rng.normal(0.0, 0.02, size=(config.patch_dim, d)).astype(dtype)),
            pos_embed=Tensor(rng.normal(0.0, 0.02, size=(config.num_tokens, d)).astype(dtype)),
            blocks=[BlockParams.init(spec, rng, dtype) for _ in range(spec.num_layers)],
            router=RouterParams.init(d, spec.num_experts, rng, dtype),
            classifier_w=Tensor(rng.normal(0.0, 0.02, size=(d, config.num_classes)).astype(dtype)),
            classifier_b=Tensor(np.zeros(config.num_classes, dtype=dtype)),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"patch_embed": self.patch_embed, "pos_embed": self.pos_embed}
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"blocks.{i}"))
        out["router.weight"] = self.router.weight
        out["router.bias"] = self.router.bias
        out["classifier_w"] = self.classifier_w
        out["classifier_b"] = self.classifier_b
        return out

    def astype(self, dtype) -> "ModelParams":
        named = {k: Tensor(v.data.astype(dtype)) for k, v in self.named_parameters().items()}
        return params_from_named(self.config, named)


def params_from_named(config: ModelConfig, named: dict[str, Tensor]) -> ModelParams:
    """Rebuild a ModelParams from a flat name->Tensor mapping."""
    blocks = []
    for i in range(config.spec.num_layers):
        p = f"blocks.{i}"
        blocks.append(
            BlockParams(
                w_q=named[f"{p}.w_q"],
                w_k=named[f"{p}.w_k"],
                w_v=named[f"{p}.w_v"],
                w_sa_out=named[f"{p}.w_sa_out"],
                w_ff_in=named[f"{p}.w_ff_in"],
                w_ff_out=named[f"{p}.w_ff_out"],
                ln1_gamma=named[f"{p}.ln1_gamma"],
                ln1_beta=named[f"{p}.ln1_beta"],
                ln2_gamma=named[f"{p}.ln2_gamma"],
                ln2_beta=named[f"{p}.ln2_beta"],
                alpha=named[f"{p}.alpha"],
            )
        )
    return ModelParams(
        config=config,
        patch_embed=named["patch_embed"],
        pos_embed=named["pos_embed"],
        blocks=blocks,
        router=RouterParams(weight=named["router.weight"], bias=named["router.bias"]),
        classifier_w=named["classifier_w"],
        classifier_b=named["classifier_b"],
    )


# ---------------------------------------------------------------------------
# Slicing operators
# ---------------------------------------------------------------------------


def extract(x: Tensor, d: int) -> Tensor:
    """First ``d`` features of each token (a copy)."""
    return slice_cols(x, d)


def pad(x: Tensor, full_dim: int) -> Tensor:
    """Zero-fill token features back out to ``full_dim``."""
    return pad_cols(x, full_dim)


def dims_from_assignments(spec: NestedSpec, assignments: np.ndarray) -> np.ndarray:
    """Per-token nested widths for 1-based expert indices; validates range."""
    assignments = np.asarray(assignments)
    if assignments.size and (assignments.min() < 1 or assignments.max() > spec.num_experts):
        raise RoutingError(
            f"expert indices must lie in [1, {spec.num_experts}], got range "
            f"[{assignments.min()}, {assignments.max()}]"
        )
    return np.asarray(spec.dims, dtype=np.int64)[assignments - 1]


def _validate_dimvec(dvec: np.ndarray, spec: NestedSpec) -> np.ndarray:
    dvec = np.asarray(dvec, dtype=np.int64)
    if not np.isin(dvec, spec.dims).all():
        bad = dvec[~np.isin(dvec, spec.dims)]
        raise RoutingError(f"nested dims {set(bad.tolist())} not in {spec.dims}")
    return dvec


def _width_groups(dvec: np.ndarray):
    """(width, row-index) pairs for each distinct nested width present."""
    return [(int(d), np.flatnonzero(dvec == d)) for d in np.unique(dvec)]


def sliced_in_projection(x: Tensor, dvec: np.ndarray, w: Tensor, spec: NestedSpec) -> Tensor:
    """Row j of the result is x_j[:d_j] times the first d_j rows of ``w``.

    Equivalent to a dense matmul after zeroing each token's features beyond
    its nested width. Recorded as one fused primitive: tokens are gathered
    per distinct width, multiplied, and scattered back, with a hand-written
    backward so the hot path avoids intermediate full-size buffers.
    """
    dvec = _validate_dimvec(dvec, spec)
    if (dvec == spec.model_dim).all():
        return matmul(x, w)
    x_data, w_data = x.data, w.data
    n, d_out = x.shape[0], w.shape[1]
    groups = _width_groups(dvec)
    if len(groups) == 1:
        d, _ = groups[0]
        out_data = x_data[:, :d] @ w_data[:d]
    else:
        out_data = np.empty((n, d_out), dtype=x_data.dtype)
        for d, idx in groups:
            out_data[idx] = x_data[idx, :d] @ w_data[:d]
    out = Tensor(out_data)

    def rule(g):
        gx = np.empty_like(x_data)
        gw = np.zeros_like(w_data)
        if len(groups) == 1:
            d, _ = groups[0]
            gx[:, :d] = g @ w_data[:d].T
            gx[:, d:] = 0.0
            gw[:d] = x_data[:, :d].T @ g
        else:
            for d, idx in groups:
                gp = g[idx]
                gx[idx, :d] = gp @ w_data[:d].T
                gx[idx, d:] = 0.0
                gw[:d] += x_data[idx, :d].T @ gp
        return (gx, gw)

    return record(out, (x, w), rule)


def sliced_out_projection(x: Tensor, dvec: np.ndarray, w: Tensor, spec: NestedSpec) -> Tensor:
    """Project row j onto the transposed first d_j rows of ``w`` and zero-pad.

    Row j of the result holds x_j (W[:d_j])^T in its first d_j entries and
    zeros beyond, ready for the residual add at full width. Fused like
    :func:`sliced_in_projection`.
    """
    dvec = _validate_dimvec(dvec, spec)
    full = spec.model_dim
    if (dvec == full).all():
        return matmul(x, transpose(w, (1, 0)))
    x_data, w_data = x.data, w.data
    n = x.shape[0]
    groups = _width_groups(dvec)
    out_data = np.zeros((n, full), dtype=x_data.dtype)
    if len(groups) == 1:
        d, _ = groups[0]
        out_data[:, :d] = x_data @ w_data[:d].T
    else:
        for d, idx in groups:
            out_data[idx, :d] = x_data[idx] @ w_data[:d].T
    out = Tensor(out_data)

    def rule(g):
        gx = np.empty_like(x_data)
        gw = np.zeros_like(w_data)
        if len(groups) == 1:
            d, _ = groups[0]
            gp = np.ascontiguousarray(g[:, :d])
            gx[:] = gp @ w_data[:d]
            gw[:d] = gp.T @ x_data
        else:
            for d, idx in groups:
                gp = np.ascontiguousarray(g[idx, :d])
                gx[idx] = gp @ w_data[:d]
                gw[:d] += gp.T @ x_data[idx]
        return (gx, gw)

    return record(out, (x, w), rule)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def attention_branch(x: Tensor, dvec: np.ndarray, block: BlockParams, cfg: ModelConfig) -> Tensor:
    """Self-attention branch: sliced QKV in, full-width attention, sliced out.

    Tokens enter at their own nested width but queries/keys/values all live
    at the full model dimension, so attention mixes every token pair; the
    output projection returns each token to its nested width and pads.
    """
    spec = cfg.spec
    n = x.shape[0]
    batch = n // cfg.num_tokens
    nh, hd = spec.num_heads, spec.head_dim

    src = layer_norm(x, block.ln1_gamma, block.ln1_beta, cfg.ln_eps) if cfg.norm_style == "pre" else x
    q = sliced_in_projection(src, dvec, block.w_q, spec)
    k = sliced_in_projection(src, dvec, block.w_k, spec)
    v = sliced_in_projection(src, dvec, block.w_v, spec)

    def heads(t):
        return transpose(reshape(t, (batch, cfg.num_tokens, nh, hd)), (0, 2, 1, 3))

    q4, k4, v4 = heads(q), heads(k), heads(v)
    scores = scale(matmul(q4, transpose(k4, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    weights = row_softmax(scores)
    mixed = matmul(weights, v4)
    merged = reshape(transpose(mixed, (0, 2, 1, 3)), (n, spec.model_dim))
    out = sliced_out_projection(merged, dvec, block.w_sa_out, spec)
    if cfg.norm_style == "branch":
        out = layer_norm(out, block.ln1_gamma, block.ln1_beta, cfg.ln_eps)
    return out


def ffn_branch(z: Tensor, dvec: np.ndarray, block: BlockParams, cfg: ModelConfig) -> Tensor:
    """Feed-forward branch: sliced in to the 4D hidden width, GeLU, sliced out."""
    spec = cfg.spec
    src = layer_norm(z, block.ln2_gamma, block.ln2_beta, cfg.ln_eps) if cfg.norm_style == "pre" else z
    hidden = gelu(sliced_in_projection(src, dvec, block.w_ff_in, spec))
    out = sliced_out_projection(hidden, dvec, block.w_ff_out, spec)
    if cfg.norm_style == "branch":
        out = layer_norm(out, block.ln2_gamma, block.ln2_beta, cfg.ln_eps)
    return out


def block_forward(
    x: Tensor,
    dvec: np.ndarray,
    r_sel,
    block: BlockParams,
    cfg: ModelConfig,
) -> Tensor:
    """One layer update: z = x + SA(x); out = z + (alpha * r + 1) * FFN(z).

    ``r_sel`` holds each token's probability of its chosen expert (or None
    to disable the multiplier, e.g. during joint pretraining); multiplying
    it in keeps the router differentiable. Only the FFN branch is scaled.
    """
    z = add(x, attention_branch(x, dvec, block, cfg))
    branch = ffn_branch(z, dvec, block, cfg)
    if r_sel is not None:
        multiplier = add(mul(block.alpha, r_sel), 1.0)  # (n,)
        branch = mul(branch, reshape(multiplier, (multiplier.shape[0], 1)))
    return add(z, branch)


# ---------------------------------------------------------------------------
# Tokenization and heads
# ---------------------------------------------------------------------------


def image_to_patches(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Flatten non-overlapping patches, row-major over the patch grid.

    Accepts (H, W, C) or (B, H, W, C); returns (B * N, patch_dim) float
    pixels, token order matching the positional embedding.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    if (h, w) != tuple(cfg.image_size) or c != cfg.channels:
        raise ConfigError(
            f"image shape {(h, w, c)} does not match config {(*cfg.image_size, cfg.channels)}"
        )
    p = cfg.patch_size
    gh, gw = cfg.grid
    patches = images.reshape(b, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(patches).reshape(b * gh * gw, p * p * c)


def tokenize(images: np.ndarray, params: ModelParams) -> Tensor:
    """Patchify, project to the model width, add positional embeddings."""
    cfg = params.config
    patches = image_to_patches(images, cfg).astype(params.patch_embed.dtype)
    n = patches.shape[0]
    batch = n // cfg.num_tokens
    projected = matmul(Tensor(patches), params.patch_embed)
    shaped = reshape(projected, (batch, cfg.num_tokens, cfg.spec.model_dim))
    with_pos = add(shaped, params.pos_embed)
    return reshape(with_pos, (n, cfg.spec.model_dim))


def pool_classify(x: Tensor, params: ModelParams) -> Tensor:
    """Global average pool over tokens, then the linear class head."""
    cfg = params.config
    batch = x.shape[0] // cfg.num_tokens
    pooled = mean_axis(reshape(x, (batch, cfg.num_tokens, cfg.spec.model_dim)), 1)
    return add(matmul(pooled, params.classifier_w), params.classifier_b)


# ---------------------------------------------------------------------------
# Whole-model forward passes
# ---------------------------------------------------------------------------


def granularity_forward(images: np.ndarray, params: ModelParams, expert_idx: int) -> Tensor:
    """Run every token through nested expert ``expert_idx`` (no router, no
    FFN multiplier); the path joint pretraining optimizes."""
    cfg = params.config
    d = cfg.spec.dims[expert_idx - 1]
    x = tokenize(images, params)
    dvec = np.full(x.shape[0], d, dtype=np.int64)
    for block in params.blocks:
        x = block_forward(x, dvec, None, block, cfg)
    return pool_classify(x, params)


def routed_forward(
    images: np.ndarray,
    params: ModelParams,
    capacity=None,
    assignments: np.ndarray | None = None,
    router_kind: str = "learned",
    router_seed=0,
):
    """Route once, then run all layers under the shared decision.

    Layers before the router layer (1-based, default 1) run dense; the
    router reads that layer's features, the assignment algorithm fixes each
    token's expert for all remaining layers, and the chosen-expert
    probability multiplies every FFN branch so gradients reach the router.

    Either ``capacity`` (a distribution over experts) or explicit 1-based
    ``assignments`` of shape (batch * num_tokens,) must be given. Returns
    (logits, info) where info carries the assignments, the router
    probabilities, and the per-token widths.
    """
    cfg = params.config
    spec = cfg.spec
    x = tokenize(images, params)
    n = x.shape[0]
    batch = n // cfg.num_tokens
    dense_dvec = np.full(n, spec.model_dim, dtype=np.int64)

    for block in params.blocks[: cfg.router_layer - 1]:
        x = block_forward(x, dense_dvec, None, block, cfg)

    probs = router_forward(x, params.router)  # (n, E), on the tape
    if assignments is None:
        if capacity is None:
            raise ConfigError("routed_forward needs a capacity distribution or explicit assignments")
        per_image = probs.data.reshape(batch, cfg.num_tokens, spec.num_experts)
        assignments = np.empty((batch, cfg.num_tokens), dtype=np.int64)
        if router_kind == "learned":
            for b in range(batch):
                assignments[b] = epr_assign(per_image[b].T, capacity)
        elif router_kind == "random":
            base = router_seed if isinstance(router_seed, (int, np.integer)) else router_seed
            for b in range(batch):
                assignments[b] = random_assign(capacity, cfg.num_tokens, np.random.default_rng([int(base), b]))
        else:
            raise ConfigError(f"unknown router kind {router_kind!r}")
        assignments = assignments.reshape(n)
    else:
        assignments = np.asarray(assignments, dtype=np.int64).reshape(n)

    r_sel = gather_pairs(probs, np.arange(n), assignments - 1)
    dvec = dims_from_assignments(spec, assignments)

    for block in params.blocks[cfg.router_layer - 1 :]:
        x = block_forward(x, dvec, r_sel, block, cfg)

    logits = pool_classify(x, params)
    info = {"assignments": assignments, "probs": probs, "dvec": dvec}
    return logits, info


def model_forward(images: np.ndarray, params: ModelParams, assignments: np.ndarray) -> Tensor:
    """Logits for fixed per-token expert assignments (router probabilities
    recomputed internally so the multiplier path stays differentiable)."""
    logits, _ = routed_forward(images, params, assignments=assignments)
    return logits
