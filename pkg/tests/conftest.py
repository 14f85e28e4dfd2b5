import math

import numpy as np
import pytest
import torch

from beliefsim.env import WorldConfig, WorldState


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


def make_world(
    boxes=(),
    agent=(0.5, 0.5),
    heading=0.0,
    food=(),
    width=8,
    height=8,
    **config_kwargs,
) -> WorldState:
    """Hand-built world for analytic scenes; bypasses generate_world."""
    config = WorldConfig(width=width, height=height, min_boxes=0,
                         max_boxes=max(len(boxes), 0), food_count=len(food),
                         **config_kwargs)
    return WorldState(
        config=config,
        width=width,
        height=height,
        boxes=tuple(boxes),
        agent_x=agent[0],
        agent_y=agent[1],
        agent_heading=heading % (2 * math.pi),
        food=tuple(food),
        rng_seed=0,
    )


def numeric_grad(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar f() with respect to tensor x."""
    grad = torch.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def check_gradients(f, tensors: dict[str, torch.Tensor], eps: float = 1e-5,
                    rel_tol: float = 1e-4) -> dict[str, float]:
    """Compare autograd gradients of scalar f() against central differences.

    Every tensor must be float64 and require grad. Returns the relative
    error per tensor (norm of difference over norm of the numeric grad).
    """
    for name, t in tensors.items():
        assert t.dtype == torch.float64, f"{name} must be float64 for the check"
        assert t.requires_grad, f"{name} must require grad"
        if t.grad is not None:
            t.grad = None
    f().backward()
    errors = {}
    for name, t in tensors.items():
        numeric = numeric_grad(f, t.data, eps)
        analytic = torch.zeros_like(t.data) if t.grad is None else t.grad
        denom = max(numeric.norm().item(), 1e-12)
        rel = (analytic - numeric).norm().item() / denom
        errors[name] = rel
        assert rel < rel_tol, f"gradient mismatch for {name}: rel err {rel:.3e}"
    return errors
