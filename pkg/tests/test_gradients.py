"""End-to-end gradient correctness on the full routed model.

Central finite differences against the tape, double precision, with the
token-to-expert assignment frozen so the loss is differentiable at the
measurement point (assignments only change at router-probability ties).
"""

import numpy as np

from mone.model import ModelConfig, ModelParams, NestedSpec, routed_forward
from mone.routing import solve_capacity
from mone.tensor import cross_entropy_logits, grad_check


def build_case(alpha=0.5, seed=0):
    cfg = ModelConfig(
        spec=NestedSpec(model_dim=16, num_experts=4, num_heads=4, num_layers=2),
        image_size=(32, 32),
        patch_size=8,
    )
    params = ModelParams.init(cfg, seed=seed, dtype=np.float64)
    for block in params.blocks:
        block.alpha.data[...] = alpha  # open the gradient path through the router
    rng = np.random.default_rng(seed)
    image = rng.random((1, 32, 32, 1))
    labels = np.array([rng.integers(0, cfg.num_classes)])

    capacity = solve_capacity(0.5, 4)
    _, info = routed_forward(image, params, capacity=capacity)
    assignments = info["assignments"]

    def loss_fn():
        logits, _ = routed_forward(image, params, assignments=assignments)
        return cross_entropy_logits(logits, labels)

    return params, loss_fn


class TestEndToEndGradients:
    def test_all_parameter_tensors_pass(self):
        params, loss_fn = build_case()
        report = grad_check(loss_fn, params.named_parameters(), tol=1e-4, step=1e-5)
        assert report.passed, str(report)

    def test_router_and_alpha_receive_gradient(self):
        from mone.tensor import GradTape

        params, loss_fn = build_case()
        with GradTape() as tape:
            loss = loss_fn()
        grads = tape.backward(loss)
        assert np.abs(grads[params.router.weight]).max() > 0
        assert np.abs(grads[params.router.bias]).max() > 0
        for block in params.blocks:
            assert abs(float(grads[block.alpha])) > 0
