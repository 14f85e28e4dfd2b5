"""Constrained generative training: minimize KL subject to recon <= kappa.

The Lagrange multiplier ascends multiplicatively on a moving average of the
constraint violation and is clamped to [0, 1000]. The multiplier is a plain
float, so it is constant with respect to model-parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

LAMBDA_MAX = 1000.0


@dataclass(frozen=True)
class GecoState:
    lam: float = 1.0        # Lagrange multiplier, clamped to [0, LAMBDA_MAX]
    c_ma: float = 0.0       # moving average of (recon_err - kappa)
    kappa: float = 1e-3     # reconstruction-error target (per-pixel MSE)
    alpha: float = 0.99     # moving-average decay
    nu: float = 0.1         # multiplier step size


def geco_loss(kl: torch.Tensor, recon_err: torch.Tensor, state: GecoState) -> torch.Tensor:
    """kl + lam * (recon_err - kappa), lam held constant for the optimizer."""
    return kl + state.lam * (recon_err - state.kappa)


def geco_update(state: GecoState, batch_recon_err: float) -> GecoState:
    """Ascend the multiplier on the moving-average constraint violation."""
    if not math.isfinite(batch_recon_err):
        raise ValueError(f"non-finite reconstruction error {batch_recon_err!r}")
    c_ma = state.alpha * state.c_ma + (1.0 - state.alpha) * (batch_recon_err - state.kappa)
    lam = min(max(state.lam * math.exp(state.nu * c_ma), 0.0), LAMBDA_MAX)
    return replace(state, lam=lam, c_ma=c_ma)
