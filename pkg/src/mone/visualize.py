"""Routing visualization: per-image expert maps as binary PGM masks."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .model import ModelParams, routed_forward
from .routing import solve_capacity

__all__ = ["route_visualize", "write_pgm"]


def write_pgm(path, array: np.ndarray, maxval: int) -> None:
    """Write a 2-d array of small non-negative ints as a binary (P5) PGM."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ConfigError(f"PGM wants a 2-d array, got shape {array.shape}")
    if not 0 < maxval < 256:
        raise ConfigError(f"maxval {maxval} outside (0, 256)")
    if array.min() < 0 or array.max() > maxval:
        raise ConfigError("pixel values exceed maxval")
    height, width = array.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        f.write(array.astype(np.uint8).tobytes())


def route_visualize(
    params: ModelParams,
    image: np.ndarray,
    e_c: float,
    beta: float = 10.0,
    delta: float = 2.0,
):
    """Route one image and return (full-model mask, expert-index map).

    Both are patch-grid-resolution arrays: the mask holds 1 where the token
    went to the largest expert and 0 elsewhere; the map holds the 1-based
    expert index of every token.
    """
    cfg = params.config
    c = solve_capacity(e_c, cfg.spec.num_experts, beta, delta)
    _, info = routed_forward(image, params, capacity=c)
    grid = info["assignments"].reshape(cfg.grid)
    full_mask = (grid == cfg.spec.num_experts).astype(np.uint8)
    return full_mask, grid.astype(np.uint8)
