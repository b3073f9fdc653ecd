"""Command-line interface.

One binary, subcommand per workflow. A JSON config file supplies defaults;
explicit flags win. Every run writes a resolved config snapshot next to its
outputs, and identical (config, seed) pairs produce byte-identical CSVs.

Exit codes: 0 success, 1 configuration error (including unknown flags),
2 numeric or training failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_idx, split_dataset, synth_planted_patch
from .errors import ConfigError, MoneError, NumericError, TrainingError
from .flops import flops_from_counts
from .model import ModelConfig, ModelParams, NestedSpec
from .routing import effective_capacity, expert_counts, solve_capacity
from .train import (
    ADAPTIVE_CAPACITY_SET,
    TrainConfig,
    capacity_sweep,
    evaluate,
    mat_joint_pretrain,
    mone_finetune,
)
from .visualize import route_visualize, write_pgm

__all__ = ["main"]

DEFAULT_CONFIG = {
    "model": {
        "dim": 64,
        "experts": 4,
        "heads": 4,
        "layers": 4,
        "patch": 8,
        "image_size": [32, 32],
        "channels": 1,
        "classes": 10,
        "norm_style": "branch",
        "router_layer": 1,
    },
    "train": {
        "learning_rate": 0.002,
        "pretrain_learning_rate": 0.003,
        "epochs": 3,
        "pretrain_epochs": 4,
        "batch_size": 128,
        "optimizer": "adam",
        "isoflops": False,
    },
    "routing": {
        "ec": 0.6,
        "adaptive": False,
        "beta": 10.0,
        "delta": 2.0,
        "router": "learned",
        "favor_larger": False,
    },
    "dataset": "synth",
    "synth": {"train": 5000, "test": 1000},
    "seed": 0,
    "out": "runs/out",
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "experts": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "layers": {"type": "integer", "minimum": 1},
                "patch": {"type": "integer", "minimum": 1},
                "image_size": {
                    "type": "array",
                    "items": {"type": "integer", "minimum": 1},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "channels": {"type": "integer", "minimum": 1},
                "classes": {"type": "integer", "minimum": 2},
                "norm_style": {"enum": ["branch", "pre"]},
                "router_layer": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "pretrain_learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "pretrain_epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": ["adam", "sgd"]},
                "isoflops": {"type": "boolean"},
            },
        },
        "routing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ec": {"type": "number"},
                "adaptive": {"type": "boolean"},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "exclusiveMinimum": 1},
                "router": {"enum": ["learned", "random"]},
                "favor_larger": {"type": "boolean"},
            },
        },
        "dataset": {"type": "string"},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": {"type": "integer", "minimum": 1},
                "test": {"type": "integer", "minimum": 1},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
    },
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _deep_merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_run_config(path: str | None, overrides: dict) -> dict:
    """Defaults <- config file <- flags, validated against the schema."""
    import jsonschema

    merged = DEFAULT_CONFIG
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        try:
            jsonschema.validate(user, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"invalid config: {exc.message}") from exc
        merged = _deep_merge(merged, user)
    merged = _deep_merge(merged, overrides)
    jsonschema.validate(merged, CONFIG_SCHEMA)
    return merged


def _model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        spec=NestedSpec(
            model_dim=m["dim"],
            num_experts=m["experts"],
            num_heads=m["heads"],
            num_layers=m["layers"],
        ),
        image_size=tuple(m["image_size"]),
        patch_size=m["patch"],
        channels=m["channels"],
        num_classes=m["classes"],
        norm_style=m["norm_style"],
        router_layer=m["router_layer"],
    )


def _load_dataset(cfg: dict):
    """Returns (train, test) for the configured source."""
    source = cfg["dataset"]
    if source == "synth":
        m = cfg["model"]
        total = cfg["synth"]["train"] + cfg["synth"]["test"]
        full = synth_planted_patch(
            total,
            num_classes=m["classes"],
            height=m["image_size"][0],
            width=m["image_size"][1],
            seed=cfg["seed"] + 1000,
            patch_size=m["patch"],
        )
        return split_dataset(full, cfg["synth"]["train"], seed=cfg["seed"] + 1000)
    if source.startswith("idx:"):
        parts = source[4:].split(",")
        if len(parts) != 2:
            raise ConfigError("idx dataset wants 'idx:<images_path>,<labels_path>'")
        ds = load_idx(parts[0], parts[1])
        n_train = max(1, int(0.8 * len(ds)))
        return split_dataset(ds, n_train, seed=cfg["seed"] + 1000)
    raise ConfigError(f"unknown dataset source {source!r} (use 'synth' or 'idx:<img>,<lbl>')")


def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _snapshot(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _train_config(cfg: dict, pretrain: bool = False) -> TrainConfig:
    t, r = cfg["train"], cfg["routing"]
    return TrainConfig(
        learning_rate=t["pretrain_learning_rate"] if pretrain else t["learning_rate"],
        epochs=t["pretrain_epochs"] if pretrain else t["epochs"],
        batch_size=t["batch_size"],
        seed=cfg["seed"],
        optimizer=t["optimizer"],
        capacity=None if (pretrain or r["adaptive"]) else r["ec"],
        capacity_set=ADAPTIVE_CAPACITY_SET if (not pretrain and r["adaptive"]) else None,
        isoflops=False if pretrain else t["isoflops"],
        beta=r["beta"],
        delta=r["delta"],
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: dict) -> int:
    out = Path(cfg["out"])
    _snapshot(cfg, out)
    train, test = _load_dataset(cfg)
    params = ModelParams.init(_model_config(cfg), seed=cfg["seed"])
    result = mat_joint_pretrain(params, train, _train_config(cfg, pretrain=True), eval_dataset=test)
    save_checkpoint(out / "pretrained.ckpt", params, extra={"stage": "pretrain"})
    _write_csv(out / "pretrain_loss.csv", ["step", "loss"], list(enumerate(result.losses)))
    print(f"pretrained {result.steps} steps; dense val accuracy {result.final_val_accuracy:.4f}")
    print(f"checkpoint: {out / 'pretrained.ckpt'}")
    return 0


def cmd_finetune(cfg: dict, checkpoint: str | None) -> int:
    out = Path(cfg["out"])
    _snapshot(cfg, out)
    train, test = _load_dataset(cfg)
    if checkpoint is None:
        params = ModelParams.init(_model_config(cfg), seed=cfg["seed"])  # from scratch
    else:
        params, _ = load_checkpoint(checkpoint)
    result = mone_finetune(params, train, _train_config(cfg), eval_dataset=test)
    train_ec = None if cfg["routing"]["adaptive"] else cfg["routing"]["ec"]
    save_checkpoint(
        out / "finetuned.ckpt",
        params,
        extra={"stage": "finetune", "train_e_c": train_ec, "adaptive": cfg["routing"]["adaptive"]},
    )
    _write_csv(out / "finetune_loss.csv", ["step", "loss"], list(enumerate(result.losses)))
    print(f"finetuned {result.steps} steps; val accuracy {result.final_val_accuracy:.4f}")
    print(f"checkpoint: {out / 'finetuned.ckpt'}")
    return 0


def cmd_eval(cfg: dict, checkpoint: str) -> int:
    out = Path(cfg["out"])
    _snapshot(cfg, out)
    _, test = _load_dataset(cfg)
    params, _ = load_checkpoint(checkpoint)
    metrics = evaluate(
        params,
        test,
        cfg["routing"]["ec"],
        router_kind=cfg["routing"]["router"],
        seed=cfg["seed"],
        beta=cfg["routing"]["beta"],
        delta=cfg["routing"]["delta"],
    )
    _write_csv(
        out / "eval.csv",
        ["e_c", "router", "accuracy", "flop_ratio", "images"],
        [(metrics.e_c, metrics.router_kind, metrics.accuracy, metrics.flop_ratio, metrics.num_images)],
    )
    print(f"accuracy {metrics.accuracy:.4f} flop_ratio {metrics.flop_ratio:.4f}")
    return 0


def cmd_sweep(cfg: dict, checkpoint: str, ec_list: list[float]) -> int:
    out = Path(cfg["out"])
    _snapshot(cfg, out)
    _, test = _load_dataset(cfg)
    params, extra = load_checkpoint(checkpoint)
    rows = capacity_sweep(
        params,
        test,
        ec_list,
        train_e_c=extra.get("train_e_c"),
        router_kind=cfg["routing"]["router"],
        seed=cfg["seed"],
    )
    _write_csv(
        out / "sweep.csv",
        ["e_c", "accuracy", "flop_ratio", "is_train_point"],
        [(r["e_c"], r["accuracy"], r["flop_ratio"], r["is_train_point"]) for r in rows],
    )
    for r in rows:
        print(f"e_c {r['e_c']:.3f}: accuracy {r['accuracy']:.4f} flop_ratio {r['flop_ratio']:.4f}")
    return 0


def cmd_solve_capacity(cfg: dict) -> int:
    r = cfg["routing"]
    experts = cfg["model"]["experts"]
    c = solve_capacity(r["ec"], experts, r["beta"], r["delta"], favor_larger=r["favor_larger"])
    header = [f"c{i}" for i in range(1, experts + 1)] + ["e_c"]
    values = [f"{v:.10g}" for v in c] + [f"{effective_capacity(c):.10g}"]
    print(",".join(header))
    print(",".join(values))
    return 0


def cmd_flops(cfg: dict) -> int:
    model_cfg = _model_config(cfg)
    r = cfg["routing"]
    c = solve_capacity(r["ec"], model_cfg.spec.num_experts, r["beta"], r["delta"])
    counts = expert_counts(c, model_cfg.num_tokens)
    report = flops_from_counts(
        counts,
        model_cfg.spec,
        model_cfg.num_tokens,
        include_router=True,
        router_layer=model_cfg.router_layer,
    )
    print("layer,expert,macs,ratio")
    for row in report.csv_rows():
        print(",".join(row))
    return 0


def cmd_route_demo(cfg: dict, checkpoint: str, count: int) -> int:
    out = Path(cfg["out"])
    _snapshot(cfg, out)
    _, test = _load_dataset(cfg)
    params, _ = load_checkpoint(checkpoint)
    e_c = cfg["routing"]["ec"]
    for i in range(min(count, len(test))):
        mask, expert_map = route_visualize(params, test.images[i], e_c)
        write_pgm(out / f"mask_{i:03d}.pgm", mask, maxval=1)
        write_pgm(out / f"experts_{i:03d}.pgm", expert_map, maxval=params.config.spec.num_experts)
    print(f"wrote {min(count, len(test))} mask/expert-map pairs to {out}")
    return 0


def cmd_selftest(cfg: dict) -> int:
    """Fast property checks: routing, solver, gradients."""
    del cfg
    rng = np.random.default_rng(0)
    failures = []

    def check(name, ok):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures.append(name)

    from .routing import epr_assign

    ok = True
    for _ in range(200):
        num_experts = int(rng.integers(2, 5))
        num_tokens = int(rng.integers(1, 128))
        c = rng.dirichlet(np.ones(num_experts))
        r = rng.random((num_experts, num_tokens))
        assignment = epr_assign(r, c)
        counts = expert_counts(c, num_tokens)
        observed = np.bincount(assignment, minlength=num_experts + 1)[1:]
        ok &= bool((observed == counts).all())
        ok &= bool((assignment == epr_assign(r, c)).all())
    check("expert-preferred routing: quota, partition, determinism (200 cases)", ok)

    ok = True
    for e_c in (0.2, 0.4, 0.46875, 0.6, 0.8):
        c = solve_capacity(e_c, 4)
        ok &= abs(c.sum() - 1.0) < 1e-8
        ok &= abs(effective_capacity(c) - e_c) < 1e-8
    ok &= bool((solve_capacity(1.0, 4) == [0, 0, 0, 1]).all())
    ok &= bool((solve_capacity(0.125, 4) == [1, 0, 0, 0]).all())
    check("capacity solver: constraints, round trip, vertex cases", ok)

    from .model import routed_forward
    from .tensor import cross_entropy_logits, grad_check

    model_cfg = ModelConfig(
        spec=NestedSpec(model_dim=8, num_experts=2, num_heads=2, num_layers=1),
        image_size=(8, 8),
        patch_size=4,
        num_classes=3,
    )
    params = ModelParams.init(model_cfg, seed=0, dtype=np.float64)
    for block in params.blocks:
        block.alpha.data[...] = 0.5
    image = rng.random((1, 8, 8, 1))
    _, info = routed_forward(image, params, capacity=[0.5, 0.5])
    assignments = info["assignments"]

    def loss_fn():
        logits, _ = routed_forward(image, params, assignments=assignments)
        return cross_entropy_logits(logits, np.array([1]))

    report = grad_check(loss_fn, params.named_parameters(), tol=1e-4, step=1e-5)
    check("gradients: tape vs central differences on a small routed model", report.passed)

    if failures:
        raise NumericError(f"selftest failures: {failures}")
    print("selftest: all suites passed")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="mone", description="Mixture-of-nested-experts workflows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON run-config file (flags override it)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--ec", type=float, help="effective capacity")
        p.add_argument("--experts", type=int, help="number of nested experts")
        p.add_argument("--beta", type=float, help="entropy weight of the capacity solver")
        p.add_argument("--delta", type=float, help="linear-decay base of the capacity solver")
        p.add_argument("--router-layer", type=int, help="1-based layer whose features feed the router")
        p.add_argument("--router", choices=["learned", "random"], help="router kind for evaluation")
        p.add_argument("--isoflops", action="store_true", default=None,
                       help="match total training MACs to the dense baseline")
        p.add_argument("--adaptive", action="store_true", default=None,
                       help="sample the training capacity per step")
        p.add_argument("--dataset", help="'synth' or 'idx:<images_path>,<labels_path>'")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="input model checkpoint")

    common(sub.add_parser("pretrain", help="jointly pretrain all nested granularities"))
    p_ft = sub.add_parser("finetune", help="router-active finetuning")
    common(p_ft)
    p_ft.add_argument("--checkpoint", help="pretrained checkpoint (omit to train from scratch)")
    common(sub.add_parser("eval", help="accuracy and FLOP ratio at one capacity"), checkpoint=True)
    p_sweep = sub.add_parser("sweep", help="accuracy-vs-capacity curve")
    common(p_sweep, checkpoint=True)
    p_sweep.add_argument("--ec-list", default="0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
                         help="comma-separated capacities")
    p_solve = sub.add_parser("solve-capacity", help="print the capacity distribution as CSV")
    common(p_solve)
    p_solve.add_argument("--favor-larger", action="store_true", default=None,
                         help="flip the linear preference toward larger experts")
    common(sub.add_parser("flops", help="print the per-layer MAC report as CSV"))
    p_demo = sub.add_parser("route-demo", help="emit routing masks as PGM images")
    common(p_demo, checkpoint=True)
    p_demo.add_argument("--count", type=int, default=4, help="images to visualize")
    common(sub.add_parser("selftest", help="run embedded property suites"))
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict:
    over: dict = {"model": {}, "train": {}, "routing": {}}
    if args.out is not None:
        over["out"] = args.out
    if args.seed is not None:
        over["seed"] = args.seed
    if args.dataset is not None:
        over["dataset"] = args.dataset
    if args.ec is not None:
        over["routing"]["ec"] = args.ec
    if args.beta is not None:
        over["routing"]["beta"] = args.beta
    if args.delta is not None:
        over["routing"]["delta"] = args.delta
    if args.router is not None:
        over["routing"]["router"] = args.router
    if args.adaptive is not None:
        over["routing"]["adaptive"] = args.adaptive
    if getattr(args, "favor_larger", None) is not None:
        over["routing"]["favor_larger"] = args.favor_larger
    if args.experts is not None:
        over["model"]["experts"] = args.experts
    if args.router_layer is not None:
        over["model"]["router_layer"] = args.router_layer
    if args.isoflops is not None:
        over["train"]["isoflops"] = args.isoflops
    return {k: v for k, v in over.items() if v != {} or not isinstance(v, dict)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_run_config(args.config, _overrides_from_args(args))
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "finetune":
            return cmd_finetune(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "sweep":
            ec_list = [float(x) for x in args.ec_list.split(",") if x]
            return cmd_sweep(cfg, args.checkpoint, ec_list)
        if args.command == "solve-capacity":
            return cmd_solve_capacity(cfg)
        if args.command == "flops":
            return cmd_flops(cfg)
        if args.command == "route-demo":
            return cmd_route_demo(cfg, args.checkpoint, args.count)
        if args.command == "selftest":
            return cmd_selftest(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, TrainingError) as exc:
        print(f"numeric/training failure: {exc}", file=sys.stderr)
        return 2
    except MoneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
