"""Training and evaluation harness.

Two training stages mirror the intended recipe: joint pretraining optimizes
the summed cross-entropy of every nested granularity (router idle), after
which finetuning activates the router and trains everything jointly under
expert-preferred routing at a fixed or per-step-sampled effective capacity.

isoFLOPs mode budgets training by multiply-accumulate count instead of
epochs: the loop consumes the same total MACs a dense run of the configured
epoch count would, so cheaper capacities buy proportionally more steps.

All randomness flows through per-purpose generators derived from the config
seed, giving bitwise-reproducible runs on a single thread.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericError, TrainingError
from .flops import flops_from_counts, model_flops, predicted_ratio
from .model import ModelParams, block_forward, pool_classify, routed_forward, tokenize
from .routing import expert_counts, solve_capacity
from .tensor import GradTape, Tensor, cross_entropy_logits, scale, tile_rows

__all__ = [
    "TrainConfig",
    "TrainResult",
    "EvalMetrics",
    "mat_joint_pretrain",
    "mone_finetune",
    "evaluate",
    "capacity_sweep",
    "ADAPTIVE_CAPACITY_SET",
]

ADAPTIVE_CAPACITY_SET = (0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    schedule: str = "cosine"  # "cosine" | "constant"
    optimizer: str = "adam"  # "adam" | "sgd" (momentum 0.9)
    momentum: float = 0.9
    capacity: float | None = None  # fixed effective capacity
    capacity_set: tuple[float, ...] | None = None  # sampled per step when set
    isoflops: bool = False
    beta: float = 10.0
    delta: float = 2.0
    train_router: bool = True  # False freezes router weights and the alpha gates
    augment_crops: bool = False  # random +-2px zero-padded shifts; off for acceptance runs

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.capacity is not None and self.capacity_set is not None:
            raise ConfigError("set either a fixed capacity or a sampled set, not both")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)  # per-step training loss
    steps: int = 0
    total_macs: int = 0  # per-example forward MACs, summed over examples seen
    budget_macs: int = 0
    final_val_accuracy: float | None = None
    max_expert_counts: np.ndarray | None = None  # worst per-expert load over training
    quota: np.ndarray | None = None  # floor quota in fixed-capacity mode


@dataclass
class EvalMetrics:
    accuracy: float
    flop_ratio: float
    e_c: float
    router_kind: str
    num_images: int


class _Optimizer:
    def __init__(self, named: dict[str, Tensor], cfg: TrainConfig):
        self.named = named
        self.cfg = cfg
        self.state = {k: np.zeros_like(v.data) for k, v in named.items()}
        if cfg.optimizer == "adam":
            self.state2 = {k: np.zeros_like(v.data) for k, v in named.items()}
            self.t = 0

    def _lr(self, progress: float) -> float:
        base = self.cfg.learning_rate
        if self.cfg.schedule == "constant":
            return base
        return base * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    def step(self, grads: dict[Tensor, np.ndarray], progress: float) -> None:
        lr = self._lr(progress)
        if self.cfg.optimizer == "sgd":
            for k, p in self.named.items():
                g = grads.get(p)
                if g is None:
                    continue
                v = self.state[k]
                v *= self.cfg.momentum
                v += g
                p.data -= (lr * v).astype(p.dtype, copy=False)
        else:
            self.t += 1
            b1, b2, eps = 0.9, 0.999, 1e-8
            c1 = 1.0 - b1**self.t
            c2 = 1.0 - b2**self.t
            for k, p in self.named.items():
                g = grads.get(p)
                if g is None:
                    continue
                m, v = self.state[k], self.state2[k]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
                p.data -= update.astype(p.dtype, copy=False)


def _epoch_batches(num_examples: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(num_examples)
    for start in range(0, num_examples, batch_size):
        yield order[start : start + batch_size]


def _random_shift(images: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    """Zero-padded random translation, the crop augmentation behind
    ``augment_crops``."""
    out = np.zeros_like(images)
    h, w = images.shape[1:3]
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(images), 2))
    for i, (dy, dx) in enumerate(shifts):
        src = images[i, max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
        out[i, max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    return out


def _check_finite(loss: float) -> float:
    if not math.isfinite(loss):
        raise TrainingError(f"training diverged: loss={loss}")
    return loss


def _dense_macs_per_example(params: ModelParams) -> int:
    spec = params.config.spec
    n = params.config.num_tokens
    return model_flops(np.full(n, spec.num_experts), spec).total


def _joint_granularity_loss(params: ModelParams, images: np.ndarray, labels: np.ndarray):
    """Sum of per-granularity cross-entropies, computed as one forward pass.

    Tokens are tokenized once and replicated once per granularity with the
    matching uniform width vector; the summed-mean loss equals running each
    granularity separately with equal weights, but shares every batched op.
    """
    cfg = params.config
    spec = cfg.spec
    tokens = tokenize(images, params)
    n = tokens.shape[0]
    reps = spec.num_experts
    x = tile_rows(tokens, reps)
    dvec = np.repeat(np.asarray(spec.dims, dtype=np.int64), n)
    for block in params.blocks:
        x = block_forward(x, dvec, None, block, cfg)
    logits = pool_classify(x, params)
    return scale(cross_entropy_logits(logits, np.tile(labels, reps)), float(reps))


def mat_joint_pretrain(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
) -> TrainResult:
    """Joint nested pretraining: every step sums the cross-entropy of all
    granularities with equal weight (router and FFN multiplier inactive),
    yielding one checkpoint from which any granularity works standalone."""
    result = TrainResult()
    opt = _Optimizer(params.named_parameters(), config)
    seq = np.random.SeedSequence([config.seed, 1]).spawn(2)
    rng = np.random.default_rng(seq[0])
    rng_aug = np.random.default_rng(seq[1])
    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total_steps = max(config.epochs * steps_per_epoch, 1)

    for _ in range(config.epochs):
        for idx in _epoch_batches(len(dataset), config.batch_size, rng):
            images = dataset.images[idx]
            if config.augment_crops:
                images = _random_shift(images, rng_aug)
            try:
                with GradTape() as tape:
                    loss = _joint_granularity_loss(params, images, dataset.labels[idx])
            except NumericError as exc:
                raise TrainingError(f"training diverged: {exc}") from exc
            result.losses.append(_check_finite(loss.item()))
            opt.step(tape.backward(loss), result.steps / total_steps)
            result.steps += 1

    if eval_dataset is not None:
        result.final_val_accuracy = evaluate(params, eval_dataset, 1.0).accuracy
    return result


def mone_finetune(
    params: ModelParams,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Dataset | None = None,
) -> TrainResult:
    """Router-active finetuning from a jointly pretrained checkpoint.

    Each step solves (cached) for the capacity distribution at the step's
    effective capacity -- fixed, or drawn uniformly from the sampled set,
    one draw shared by the whole batch -- routes with EPR per image, and
    takes a gradient step on the pooled cross-entropy.
    """
    if config.capacity is None and config.capacity_set is None:
        raise ConfigError("finetuning needs a fixed capacity or a capacity set")
    spec = params.config.spec
    n_tokens = params.config.num_tokens
    result = TrainResult()
    result.max_expert_counts = np.zeros(spec.num_experts, dtype=np.int64)
    trainable = params.named_parameters()
    if not config.train_router:
        trainable = {
            k: v for k, v in trainable.items() if "router" not in k and not k.endswith("alpha")
        }
    opt = _Optimizer(trainable, config)
    streams = np.random.SeedSequence([config.seed, 2]).spawn(3)
    rng_data = np.random.default_rng(streams[0])
    rng_capacity = np.random.default_rng(streams[1])
    rng_aug = np.random.default_rng(streams[2])

    dense_cost = _dense_macs_per_example(params)
    budget = config.epochs * len(dataset) * dense_cost
    result.budget_macs = budget

    if config.capacity is not None:
        c_fixed = solve_capacity(config.capacity, spec.num_experts, config.beta, config.delta)
        result.quota = expert_counts(c_fixed, n_tokens)

    def step_capacity():
        if config.capacity is not None:
            return config.capacity, c_fixed
        e_c = float(rng_capacity.choice(config.capacity_set))
        return e_c, solve_capacity(e_c, spec.num_experts, config.beta, config.delta)

    done = False
    while not done:
        for idx in _epoch_batches(len(dataset), config.batch_size, rng_data):
            e_c, c = step_capacity()
            per_example = flops_from_counts(
                expert_counts(c, n_tokens), spec, n_tokens, include_router=True
            ).total
            if config.isoflops:
                # trim the final batch so the consumed budget lands within
                # one example of the dense baseline's total
                remaining = budget - result.total_macs
                needed = math.ceil(remaining / per_example)
                if needed < len(idx):
                    idx = idx[:needed]
            images, labels = dataset.images[idx], dataset.labels[idx]
            if config.augment_crops:
                images = _random_shift(images, rng_aug)
            try:
                with GradTape() as tape:
                    logits, info = routed_forward(images, params, capacity=c)
                    loss = cross_entropy_logits(logits, labels)
            except NumericError as exc:
                raise TrainingError(f"training diverged: {exc}") from exc
            result.losses.append(_check_finite(loss.item()))

            per_image = info["assignments"].reshape(len(idx), n_tokens)
            for b in range(len(idx)):
                counts = np.bincount(per_image[b], minlength=spec.num_experts + 1)[1:]
                np.maximum(result.max_expert_counts, counts, out=result.max_expert_counts)

            result.total_macs += len(idx) * per_example
            if config.isoflops:
                progress = result.total_macs / budget
            else:
                progress = (result.steps + 1) / (config.epochs * math.ceil(len(dataset) / config.batch_size))
            opt.step(tape.backward(loss), progress)
            result.steps += 1

            if config.isoflops and result.total_macs >= budget:
                done = True
                break
        if not config.isoflops and result.steps >= config.epochs * math.ceil(
            len(dataset) / config.batch_size
        ):
            done = True

    if eval_dataset is not None:
        eval_ec = config.capacity if config.capacity is not None else float(np.median(config.capacity_set))
        result.final_val_accuracy = evaluate(params, eval_dataset, eval_ec).accuracy
    return result


def _eval_shard(params, images, labels, c, router_kind, seed, index_offset, batch_size):
    from .routing import random_assign

    n_tokens = params.config.num_tokens
    correct = 0
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        if router_kind == "random":
            # one stream per global image index, so shard and batch layout
            # cannot change the draw
            assignments = np.empty((len(batch), n_tokens), dtype=np.int64)
            for b in range(len(batch)):
                global_idx = index_offset + start + b
                assignments[b] = random_assign(c, n_tokens, np.random.default_rng([int(seed), global_idx]))
            logits, _ = routed_forward(batch, params, assignments=assignments.reshape(-1))
        else:
            logits, _ = routed_forward(batch, params, capacity=c)
        pred = logits.data.argmax(axis=1)
        correct += int((pred == labels[start : start + batch_size]).sum())
    return correct


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    e_c: float,
    router_kind: str = "learned",
    seed: int = 0,
    batch_size: int = 256,
    include_router_flops: bool = False,
    beta: float = 10.0,
    delta: float = 2.0,
) -> EvalMetrics:
    """Deterministic accuracy plus the FLOP ratio the capacity induces.

    ``MONE_THREADS`` caps shard parallelism (model is read-only); results
    are independent of the shard count. The random router draws one stream
    per global image index from ``seed``.
    """
    if router_kind not in ("learned", "random"):
        raise ConfigError(f"unknown router kind {router_kind!r}")
    spec = params.config.spec
    c = solve_capacity(e_c, spec.num_experts, beta, delta)
    threads = max(1, int(os.environ.get("MONE_THREADS", "1") or "1"))

    if threads == 1 or len(dataset) < 2 * batch_size:
        correct = _eval_shard(
            params, dataset.images, dataset.labels, c, router_kind, seed, 0, batch_size
        )
    else:
        from concurrent.futures import ThreadPoolExecutor

        bounds = np.linspace(0, len(dataset), threads + 1, dtype=int)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    _eval_shard,
                    params,
                    dataset.images[bounds[i] : bounds[i + 1]],
                    dataset.labels[bounds[i] : bounds[i + 1]],
                    c,
                    router_kind,
                    seed,
                    int(bounds[i]),
                    batch_size,
                )
                for i in range(threads)
            ]
            correct = sum(f.result() for f in futures)

    ratio = predicted_ratio(
        c,
        spec,
        params.config.num_tokens,
        include_router=include_router_flops,
        router_layer=params.config.router_layer,
    )
    return EvalMetrics(
        accuracy=correct / len(dataset),
        flop_ratio=ratio,
        e_c=e_c,
        router_kind=router_kind,
        num_images=len(dataset),
    )


def capacity_sweep(
    params: ModelParams,
    dataset: Dataset,
    e_c_list,
    train_e_c: float | None = None,
    router_kind: str = "learned",
    seed: int = 0,
) -> list[dict]:
    """Accuracy-versus-capacity curve; marks the training capacity point."""
    rows = []
    for e_c in e_c_list:
        metrics = evaluate(params, dataset, float(e_c), router_kind=router_kind, seed=seed)
        rows.append(
            {
                "e_c": float(e_c),
                "accuracy": metrics.accuracy,
                "flop_ratio": metrics.flop_ratio,
                "is_train_point": int(train_e_c is not None and abs(e_c - train_e_c) < 1e-9),
            }
        )
    return rows
