"""Simulation network: unroll a belief state forward on actions alone.

A second recurrent core (weights distinct from the belief network) starts
at a belief state and steps on one-hot actions, optionally reading (never
writing) the belief memory frozen at the start time. Overshoot plans pick
random start times and target offsets; the predictive loss scores a head
at every planned target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .belief import (
    BeliefState,
    KanervaMemoryModule,
    KanervaMemoryState,
    MemoryState,
    SlotMemoryModule,
    SlotMemoryState,
    km_read,
    slot_read,
)
from .errors import InvalidConfigError
from .geco import GecoState
from .heads import PredictiveHead
from .nets import one_hot_actions


@dataclass
class SimState:
    """Recurrent sim state plus a read-only view of the belief memory."""

    h: torch.Tensor
    c: torch.Tensor
    memory: MemoryState | None = None

    def features(self) -> torch.Tensor:
        """concat(h, tanh(c)): the conditioning vector handed to heads."""
        return torch.cat([self.h, torch.tanh(self.c)], dim=-1)


@dataclass(frozen=True)
class OvershootPlan:
    """Start indices (0-based) with target offsets; targets stay in-bounds."""

    entries: tuple[tuple[int, tuple[int, ...]], ...]
    unroll_length: int

    def num_targets(self) -> int:
        return sum(len(offsets) for _, offsets in self.entries)


def sample_overshoots(
    unroll_length: int,
    overshoot_length: int,
    num_starts: int,
    num_targets: int,
    rng: np.random.Generator,
) -> OvershootPlan:
    """Uniform start times and per-start uniform offsets.

    Starts are uniform over [0, unroll_length - 2]; each of the
    `num_targets` offsets is uniform over [1, min(overshoot_length,
    last_index - start)], so every target index start + offset stays
    within the unroll.
    """
    if unroll_length < 2 or overshoot_length < 1 or num_starts < 1 or num_targets < 1:
        raise InvalidConfigError(
            "need unroll_length >= 2 and positive overshoot_length/num_starts/num_targets"
        )
    last = unroll_length - 1
    entries = []
    for _ in range(num_starts):
        start = int(rng.integers(0, last))
        max_delta = min(overshoot_length, last - start)
        offsets = tuple(int(rng.integers(1, max_delta + 1)) for _ in range(num_targets))
        entries.append((start, offsets))
    return OvershootPlan(entries=tuple(entries), unroll_length=unroll_length)


class SimulationCore(nn.Module):
    """Deterministic unroll on actions; belief and sim weights are disjoint."""

    def __init__(self, n_h: int, num_actions: int = 5, variant: str = "plain",
                 slot_dim: int = 200, slot_reads: int = 3, slot_top_k: int = 50,
                 kanerva_dim: int = 512, kanerva_ridge: float = 1e-6):
        super().__init__()
        self.n_h = n_h
        self.num_actions = num_actions
        self.variant = variant
        read_size = 0
        query_dim = n_h + num_actions
        if variant == "slot":
            self.read_proj = nn.Linear(query_dim, slot_reads * slot_dim)
            self.slot_reads = slot_reads
            self.slot_dim = slot_dim
            self.slot_top_k = slot_top_k
            read_size = slot_reads * slot_dim
        elif variant == "kanerva":
            self.read_proj = nn.Linear(query_dim, kanerva_dim)
            self.kanerva_ridge = kanerva_ridge
            read_size = kanerva_dim
        elif variant != "plain":
            raise InvalidConfigError(f"unknown sim variant {variant!r}")
        self.cell = nn.LSTMCell(num_actions + read_size, n_h)

    def init(self, b: BeliefState) -> SimState:
        """s^0 = b_t; gradients flow back into the belief state."""
        return SimState(h=b.h, c=b.c, memory=b.memory)

    def step(self, s: SimState, actions: torch.Tensor) -> SimState:
        """One sim step on action ids [B]; memory is read, never written."""
        a = one_hot_actions(actions, self.num_actions).to(s.h.dtype)
        inputs = [a]
        if self.variant == "slot":
            queries = self.read_proj(torch.cat([s.h, a], dim=-1))
            queries = queries.view(-1, self.slot_reads, self.slot_dim)
            assert isinstance(s.memory, SlotMemoryState)
            inputs.append(slot_read(s.memory.slots, queries, top_k=self.slot_top_k).flatten(1))
        elif self.variant == "kanerva":
            z = self.read_proj(torch.cat([s.h, a], dim=-1))
            assert isinstance(s.memory, KanervaMemoryState)
            readout, _ = km_read(s.memory.R, z, self.kanerva_ridge)
            inputs.append(readout)
        h, c = self.cell(torch.cat(inputs, dim=-1), (s.h, s.c))
        return SimState(h=h, c=c, memory=s.memory)


def predictive_loss(
    head: PredictiveHead,
    sim: SimulationCore,
    frames: torch.Tensor,
    actions: torch.Tensor,
    beliefs: list[BeliefState],
    plan: OvershootPlan,
    geco: GecoState | None = None,
    generator: torch.Generator | None = None,
    episode_ids: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Score the head at every plan target; mean over targets.

    frames is [B, T, 3, H, W]; actions is [B, T] with actions[:, t] the
    action taken after observing frame t; beliefs has one entry per step.
    Every start is unrolled with the logged actions (teacher forcing) and
    all targets are evaluated in one batched head call. `episode_ids`
    [B, T] marks episode segments: a target is skipped when its start and
    target step belong to different episodes.

    Returns (loss, metrics): loss combines the head terms (through the
    GECO controller for the generative head); metrics carries the scalar
    term values.
    """
    B, T = frames.shape[:2]
    if plan.unroll_length > T:
        raise InvalidConfigError(f"plan for unroll {plan.unroll_length} exceeds {T} steps")
    for start, offsets in plan.entries:
        if not (0 <= start < T - 1) or any(
            not (1 <= d and start + d <= plan.unroll_length - 1) for d in offsets
        ):
            raise InvalidConfigError(f"plan entry ({start}, {offsets}) out of bounds")

    ctx = head.prepare(frames)

    all_rows = torch.arange(B, device=frames.device)
    conds, b_idx, t_idx = [], [], []
    for start, offsets in plan.entries:
        state = sim.init(beliefs[start])
        by_delta = {}
        for d in range(1, max(offsets) + 1):
            state = sim.step(state, actions[:, start + d - 1])
            by_delta[d] = state
        for d in offsets:
            target_t = start + d
            if episode_ids is not None:
                same = episode_ids[:, start] == episode_ids[:, target_t]
                rows = same.nonzero(as_tuple=True)[0]
                if rows.numel() == 0:
                    continue
            else:
                rows = all_rows
            conds.append(by_delta[d].features()[rows])
            b_idx.append(rows)
            t_idx.append(torch.full_like(rows, target_t))

    if not conds:
        raise InvalidConfigError("no valid overshoot targets in this batch")
    cond = torch.cat(conds)
    b_idx_t = torch.cat(b_idx)
    t_idx_t = torch.cat(t_idx)
    x = frames[b_idx_t, t_idx_t]

    terms = head.targets_loss(x, cond, meta=(b_idx_t, t_idx_t), ctx=ctx, generator=generator)
    loss = head.combine(terms, geco)
    metrics = {name: float(value.detach()) for name, value in terms.items()}
    return loss, metrics
