"""Shared fixtures, including the trained artifacts the slow suites reuse.

The session-scoped ``trained_runs`` fixture performs the full desk-scale
experiment once: for each of three seeds it jointly pretrains, finetunes a
dense baseline (capacity 1.0), and finetunes a routed model at capacity
0.6 under matched training compute; seed 0 additionally gets an
adaptive-capacity finetune. Training dominates the suite's runtime, so
everything downstream (acceptance criteria, trend checks) shares these
artifacts.
"""

import pytest

from mone.checkpoint import load_checkpoint, save_checkpoint
from mone.data import split_dataset, synth_planted_patch
from mone.model import ModelConfig, ModelParams, NestedSpec
from mone.train import (
    ADAPTIVE_CAPACITY_SET,
    TrainConfig,
    evaluate,
    mat_joint_pretrain,
    mone_finetune,
)

SEEDS = (0, 1, 2)
DESK_CONFIG = ModelConfig(
    spec=NestedSpec(model_dim=64, num_experts=4, num_heads=4, num_layers=4),
    image_size=(32, 32),
    patch_size=8,
    num_classes=10,
)
PRETRAIN_EPOCHS = 4
FINETUNE_EPOCHS = 3
BATCH = 128


def desk_data(seed):
    full = synth_planted_patch(6000, num_classes=10, seed=100 + seed)
    return split_dataset(full, 5000, seed=100 + seed)


@pytest.fixture(scope="session")
def trained_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    runs = {}
    for seed in SEEDS:
        train, test = desk_data(seed)
        params = ModelParams.init(DESK_CONFIG, seed=seed)
        pre = mat_joint_pretrain(
            params,
            train,
            TrainConfig(epochs=PRETRAIN_EPOCHS, batch_size=BATCH, seed=seed,
                        optimizer="adam", learning_rate=0.003),
        )
        ckpt = root / f"pre{seed}.ckpt"
        save_checkpoint(ckpt, params)

        dense, _ = load_checkpoint(ckpt)
        mone_finetune(
            dense,
            train,
            TrainConfig(epochs=FINETUNE_EPOCHS, batch_size=BATCH, seed=seed,
                        optimizer="adam", learning_rate=0.002, capacity=1.0),
        )

        routed, _ = load_checkpoint(ckpt)
        routed_result = mone_finetune(
            routed,
            train,
            TrainConfig(epochs=FINETUNE_EPOCHS, batch_size=BATCH, seed=seed,
                        optimizer="adam", learning_rate=0.002, capacity=0.6, isoflops=True),
        )

        runs[seed] = {
            "train": train,
            "test": test,
            "pretrained_ckpt": ckpt,
            "pretrain_result": pre,
            "dense": dense,
            "dense_acc": evaluate(dense, test, 1.0).accuracy,
            "routed": routed,
            "routed_result": routed_result,
            "routed_acc": evaluate(routed, test, 0.6).accuracy,
            "learned_03": evaluate(routed, test, 0.3).accuracy,
            "random_03": evaluate(routed, test, 0.3, router_kind="random", seed=seed).accuracy,
        }

    # adaptive-capacity model from the seed-0 pretrained checkpoint
    adaptive, _ = load_checkpoint(runs[0]["pretrained_ckpt"])
    mone_finetune(
        adaptive,
        runs[0]["train"],
        TrainConfig(epochs=FINETUNE_EPOCHS, batch_size=BATCH, seed=0,
                    optimizer="adam", learning_rate=0.002,
                    capacity_set=ADAPTIVE_CAPACITY_SET, isoflops=True),
    )
    runs["adaptive"] = {"params": adaptive, "test": runs[0]["test"]}
    return runs
