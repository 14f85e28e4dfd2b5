"""Synchronous actor-critic sharing the belief core with the simulation loss.

A batch of environment instances is stepped in lockstep for one unroll,
beliefs are computed once, and the policy-gradient loss plus (optionally)
the predictive overshoot loss are backpropagated into the same recurrent
core in a single optimizer step. Every collected batch is consumed exactly
once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import env as envlib
from .belief import BeliefCore, BeliefState
from .config import RunConfig
from .errors import InvalidConfigError, NumericFailureError
from .geco import GecoState, geco_update
from .heads import make_head
from .nets import frames_to_tensor
from .simulation import SimulationCore, predictive_loss, sample_overshoots


@dataclass
class AgentOutput:
    policy_logits: torch.Tensor  # [B, A]
    value: torch.Tensor          # [B]


class AgentHeads(nn.Module):
    """Linear policy and value heads read from the belief hidden state."""

    def __init__(self, n_h: int, num_actions: int):
        super().__init__()
        self.policy = nn.Linear(n_h, num_actions)
        self.value = nn.Linear(n_h, 1)

    def forward(self, h: torch.Tensor) -> AgentOutput:
        return AgentOutput(policy_logits=self.policy(h), value=self.value(h).squeeze(-1))


def act(
    heads: AgentHeads, b: BeliefState, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, AgentOutput]:
    """Sample actions from the categorical policy at the current belief."""
    out = heads(b.h)
    probs = torch.softmax(out.policy_logits, dim=-1)
    actions = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
    return actions, out


def discounted_returns(
    rewards: torch.Tensor, dones: torch.Tensor, bootstrap: torch.Tensor, gamma: float
) -> torch.Tensor:
    """n-step returns over [B, T], reset at dones, bootstrapped at the end."""
    B, T = rewards.shape
    out = torch.empty_like(rewards)
    G = bootstrap
    cont = 1.0 - dones.to(rewards.dtype)
    for t in range(T - 1, -1, -1):
        G = rewards[:, t] + gamma * cont[:, t] * G
        out[:, t] = G
    return out


def pg_loss(
    logits: torch.Tensor,
    values: torch.Tensor,
    actions: torch.Tensor,
    rewards: torch.Tensor,
    dones: torch.Tensor,
    bootstrap_value: torch.Tensor,
    gamma: float,
    entropy_cost: float,
    returns: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Entropy-regularized actor-critic loss on one unroll.

    logits [B, T, A], values [B, T], actions/rewards/dones [B, T]. Sums run
    over time and are averaged over the batch. The advantage (G - V) and
    the return targets are constants for the gradient; total is
    policy + 0.5 * value - entropy_cost * entropy with
    value = sum (G - V)^2 / 2.
    """
    if not (0.0 <= gamma < 1.0):
        raise InvalidConfigError("gamma must lie in [0, 1)")
    if returns is None:
        returns = discounted_returns(rewards, dones, bootstrap_value.detach(), gamma)
    returns = returns.detach()

    log_probs = torch.log_softmax(logits, dim=-1)
    taken = log_probs.gather(-1, actions.long().unsqueeze(-1)).squeeze(-1)
    advantage = (returns - values).detach()

    policy_term = -(taken * advantage).sum(dim=1).mean()
    value_term = 0.5 * (returns - values).pow(2).sum(dim=1).mean()
    entropy = -(log_probs.exp() * log_probs).sum(dim=-1).sum(dim=1).mean()
    total = policy_term + 0.5 * value_term - entropy_cost * entropy
    parts = {
        "policy_loss": float(policy_term.detach()),
        "value_loss": float(value_term.detach()),
        "entropy": float(entropy.detach()),
    }
    return total, parts


@dataclass
class AgentBundle:
    """Everything the learner optimizes, plus run RNG streams."""

    core: BeliefCore
    heads: AgentHeads
    sim: SimulationCore | None
    head: nn.Module | None

    def model_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.core, self.heads]
        if self.sim is not None:
            mods.append(self.sim)
        if self.head is not None:
            mods.append(self.head)
        return mods

    def parameters(self):
        for mod in self.model_modules():
            yield from mod.parameters()


def build_agent(cfg: RunConfig) -> AgentBundle:
    if cfg.rl.use_simcore and cfg.model.variant != "plain":
        raise InvalidConfigError("reinforcement learning runs use the plain belief variant")
    core = BeliefCore(
        variant="plain",
        n_h=cfg.model.n_h,
        embed_dim=cfg.model.embed_dim,
        num_actions=envlib.NUM_ACTIONS,
        frame_size=cfg.env.frame_size,
    )
    heads = AgentHeads(cfg.model.n_h, envlib.NUM_ACTIONS)
    sim = head = None
    if cfg.rl.use_simcore:
        sim = SimulationCore(cfg.model.n_h, envlib.NUM_ACTIONS, variant="plain")
        head = make_head(cfg.model.head, cfg.env.frame_size, 2 * cfg.model.n_h,
                         **_head_kwargs(cfg))
    return AgentBundle(core=core, heads=heads, sim=sim, head=head)


def _head_kwargs(cfg: RunConfig) -> dict:
    if cfg.model.head == "generative":
        d = cfg.draw
        return dict(steps=d.steps, enc_hidden_ch=d.enc_hidden_ch, enc_state_ch=d.enc_state_ch,
                    state_ch=d.state_ch, dec_hidden_ch=d.dec_hidden_ch,
                    latent_ch=d.latent_ch, cond_ch=d.cond_ch)
    if cfg.model.head == "contrastive":
        return dict(embed_dim=cfg.model.contrast_embed_dim,
                    traj_negatives=cfg.model.traj_negatives)
    return {}


@dataclass
class RolloutBatch:
    """One synchronous unroll across the environment batch."""

    frames: torch.Tensor        # [B, T, 3, H, W]
    actions: torch.Tensor       # [B, T]
    rewards: torch.Tensor       # [B, T]
    dones: torch.Tensor         # [B, T]
    episode_ids: torch.Tensor   # [B, T]
    logits: torch.Tensor        # [B, T, A]
    values: torch.Tensor        # [B, T]
    beliefs: list[BeliefState]  # length T
    bootstrap_value: torch.Tensor  # [B]


class SyncRunner:
    """Steps a batch of worlds in lockstep, carrying beliefs across unrolls."""

    def __init__(self, cfg: RunConfig, bundle: AgentBundle,
                 action_generator: torch.Generator, env_seed_start: int = 0):
        self.cfg = cfg
        self.bundle = bundle
        self.generator = action_generator
        self.world_config = cfg.world_config()
        self.num_envs = cfg.rl.num_envs
        self.env_seed = env_seed_start
        self.worlds = []
        self.frames = np.empty(
            (self.num_envs, cfg.env.frame_size, cfg.env.frame_size, 3), dtype=np.float32
        )
        for i in range(self.num_envs):
            self.worlds.append(self._fresh_world())
            self.frames[i] = envlib.render_first_person(self.worlds[i])
        self.prev_actions = torch.full((self.num_envs,), envlib.NOOP, dtype=torch.long)
        self.belief = bundle.core.initial_state(self.num_envs)
        self.episode_ids = np.arange(self.num_envs, dtype=np.int64)
        self.next_episode_id = self.num_envs
        self.episode_returns = np.zeros(self.num_envs)
        self.episode_steps = np.zeros(self.num_envs, dtype=np.int64)
        self.env_steps = 0
        self.finished: list[tuple[int, float, int]] = []  # (env_steps, return, length)

    def _fresh_world(self) -> envlib.WorldState:
        world = envlib.generate_world(self.cfg.run.seed * 1_000_003 + self.env_seed,
                                      self.world_config)
        self.env_seed += 1
        return world

    def collect(self, unroll: int) -> RolloutBatch:
        cfg = self.cfg
        B = self.num_envs
        frames_seq, actions_seq, rewards_seq, dones_seq, ep_ids_seq = [], [], [], [], []
        logits_seq, values_seq, beliefs = [], [], []
        b = self.belief.detached()

        for _ in range(unroll):
            x = frames_to_tensor(self.frames)
            b = self.bundle.core.update(b, self.prev_actions, x)
            beliefs.append(b)
            actions, out = act(self.bundle.heads, b, self.generator)

            rewards = np.zeros(B, dtype=np.float32)
            dones = np.zeros(B, dtype=bool)
            ep_ids_seq.append(self.episode_ids.copy())
            for i in range(B):
                world, frame, r, done = envlib.step(self.worlds[i], int(actions[i]))
                rewards[i] = r
                dones[i] = done
                self.episode_returns[i] += r
                self.episode_steps[i] += 1
                if done:
                    self.finished.append(
                        (self.env_steps + i + 1, float(self.episode_returns[i]),
                         int(self.episode_steps[i]))
                    )
                    self.episode_returns[i] = 0.0
                    self.episode_steps[i] = 0
                    world = self._fresh_world()
                    frame = envlib.render_first_person(world)
                    self.episode_ids[i] = self.next_episode_id
                    self.next_episode_id += 1
                self.worlds[i] = world
                self.frames[i] = frame
            self.env_steps += B

            done_t = torch.from_numpy(dones)
            frames_seq.append(x)
            actions_seq.append(actions)
            rewards_seq.append(torch.from_numpy(rewards))
            dones_seq.append(done_t)
            logits_seq.append(out.policy_logits)
            values_seq.append(out.value)
            self.prev_actions = torch.where(
                done_t, torch.full_like(actions, envlib.NOOP), actions
            )
            b = self.bundle.core.reset_entries(b, done_t)

        self.belief = b
        with torch.no_grad():
            x = frames_to_tensor(self.frames)
            b_next = self.bundle.core.update(b, self.prev_actions, x)
            bootstrap = self.bundle.heads(b_next.h).value

        return RolloutBatch(
            frames=torch.stack(frames_seq, dim=1),
            actions=torch.stack(actions_seq, dim=1),
            rewards=torch.stack(rewards_seq, dim=1),
            dones=torch.stack(dones_seq, dim=1),
            episode_ids=torch.from_numpy(np.stack(ep_ids_seq, axis=1)),
            logits=torch.stack(logits_seq, dim=1),
            values=torch.stack(values_seq, dim=1),
            beliefs=beliefs,
            bootstrap_value=bootstrap,
        )


def train_loop(cfg: RunConfig, metrics=None) -> dict:
    """Synchronous on-policy training; returns a summary of the run.

    Each iteration collects one fresh batch of unrolls, computes the
    actor-critic loss and (when enabled) the overshoot predictive loss on
    the same beliefs, and applies one optimizer step. Aborts on non-finite
    loss.
    """
    if not cfg.rl.enabled:
        raise InvalidConfigError("rl.enabled must be true for train_loop")
    torch.manual_seed(cfg.run.seed)
    bundle = build_agent(cfg)
    action_gen = torch.Generator().manual_seed(cfg.run.seed + 1)
    draw_gen = torch.Generator().manual_seed(cfg.run.seed + 2)
    plan_rng = np.random.default_rng(cfg.run.seed + 3)

    runner = SyncRunner(cfg, bundle, action_gen)
    opt = torch.optim.Adam(bundle.parameters(), lr=cfg.optim.lr,
                           betas=(cfg.optim.beta1, cfg.optim.beta2))
    geco = GecoState(kappa=cfg.geco.kappa, alpha=cfg.geco.alpha, nu=cfg.geco.nu,
                     lam=cfg.geco.lambda_init)
    use_model = cfg.rl.use_simcore and cfg.rl.model_loss_weight != 0.0

    num_updates = cfg.rl.env_steps // (cfg.rl.num_envs * cfg.rl.unroll)
    reported = 0
    for update in range(num_updates):
        batch = runner.collect(cfg.rl.unroll)
        loss, parts = pg_loss(
            batch.logits, batch.values, batch.actions, batch.rewards, batch.dones,
            batch.bootstrap_value, cfg.rl.gamma, cfg.rl.entropy_cost,
        )
        if use_model:
            plan = sample_overshoots(cfg.rl.unroll, cfg.sim.overshoot,
                                     cfg.sim.starts, cfg.sim.targets, plan_rng)
            try:
                model_loss, model_parts = predictive_loss(
                    bundle.head, bundle.sim, batch.frames, batch.actions, batch.beliefs,
                    plan, geco=geco if cfg.model.head == "generative" else None,
                    generator=draw_gen, episode_ids=batch.episode_ids,
                )
            except InvalidConfigError:
                model_loss, model_parts = None, {}
            if model_loss is not None:
                loss = loss + cfg.rl.model_loss_weight * model_loss
                parts.update({f"model_{k}": v for k, v in model_parts.items()})
                if cfg.model.head == "generative":
                    geco = geco_update(geco, model_parts["recon"])
                    parts["geco_lambda"] = geco.lam

        if not torch.isfinite(loss):
            raise NumericFailureError(f"non-finite loss at update {update}")
        opt.zero_grad()
        loss.backward()
        if cfg.optim.grad_clip > 0:
            nn.utils.clip_grad_norm_(list(bundle.parameters()), cfg.optim.grad_clip)
        opt.step()

        if metrics is not None:
            for step, ep_return, ep_len in runner.finished[reported:]:
                metrics.write(step, "episode_return", ep_return)
                metrics.write(step, "episode_length", float(ep_len))
            reported = len(runner.finished)
            if update % cfg.run.log_every == 0:
                metrics.write(runner.env_steps, "rl_loss", float(loss.detach()))
                for name, value in parts.items():
                    metrics.write(runner.env_steps, name, value)

    return {
        "env_steps": runner.env_steps,
        "episodes": [(s, r, l) for s, r, l in runner.finished],
        "bundle": bundle,
        "geco": geco,
        "optimizer": opt,
    }
