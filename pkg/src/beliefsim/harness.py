"""Experiment orchestration: runs, metrics, probe fitting, figures.

A run owns a directory with the resolved config, metadata (including
desk-scale overrides and metric conventions), an append-only metric
stream, checkpoints, and emitted figures. Representation runs train the
belief network and head on the predictive loss only; RL runs wrap the
synchronous actor-critic loop.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from . import env as envlib
from .belief import BeliefCore, BeliefState
from .config import RunConfig, desk_overrides, write_config
from .data import Trajectory, collect_scripted_episode
from .errors import InvalidConfigError, NumericFailureError, UnsupportedHeadError
from .geco import GecoState, geco_update
from .heads import ConvDraw, make_head
from .nets import frames_to_tensor
from .probes import ProbeSet, build_probes, evaluate_probes, map_sse, probe_losses
from .rl import train_loop
from .simulation import SimulationCore, predictive_loss, sample_overshoots

METADATA_CONVENTIONS = {
    "map_mse": "sum of squared errors over the map image, mean over examples",
    "confidence_band": "across-seed 5th/95th percentiles (90% region)",
}


class MetricsWriter:
    """Append-only line-delimited metric records, one JSON object per line."""

    def __init__(self, path, seed: int):
        self.path = path
        self.seed = seed
        self._fh = open(path, "a")

    def write(self, step: int, name: str, value: float) -> None:
        record = {"step": int(step), "name": name, "value": float(value), "seed": self.seed}
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    """Read a metric stream, ignoring trailing partial lines."""
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.endswith("\n"):
                break
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                continue
    return records


def metric_curve(records: list[dict], name: str) -> list[tuple[float, float]]:
    return [(r["step"], r["value"]) for r in records if r["name"] == name]


def prepare_run_dir(cfg: RunConfig) -> str:
    name = cfg.run.name or f"run_seed{cfg.run.seed}"
    run_dir = os.path.join(cfg.run.out_dir, name)
    os.makedirs(run_dir, exist_ok=True)
    write_config(cfg, os.path.join(run_dir, "resolved.cfg"))
    metadata = {
        "desk_overrides": desk_overrides(cfg),
        "conventions": METADATA_CONVENTIONS,
        "seed": cfg.run.seed,
    }
    with open(os.path.join(run_dir, "metadata.json"), "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
    return run_dir


# ---------------------------------------------------------------------------
# Scripted datasets and belief computation


def collect_dataset(cfg: RunConfig, heldout: bool = False) -> list[Trajectory]:
    """Scripted episodes; held-out episodes use disjoint world seeds."""
    n = cfg.data.heldout_episodes if heldout else cfg.data.episodes
    base = cfg.run.seed * 100_000 + (50_000 if heldout else 0)
    world_cfg = cfg.world_config()
    return [
        collect_scripted_episode(base + i, world_cfg, base + i + 1, cfg.data.episode_len)
        for i in range(n)
    ]


def episode_tensors(episodes: list[Trajectory]) -> dict[str, torch.Tensor]:
    frames = frames_to_tensor(np.stack([ep.frames for ep in episodes]))
    return {
        "frames": frames,
        "actions": torch.from_numpy(np.stack([ep.actions for ep in episodes])),
        "pos": torch.from_numpy(np.stack([ep.position_class for ep in episodes])),
        "ori": torch.from_numpy(np.stack([ep.orientation_class for ep in episodes])),
        "maps": frames_to_tensor(np.stack([ep.map for ep in episodes])),
    }


def compute_beliefs(
    core: BeliefCore, frames: torch.Tensor, actions: torch.Tensor
) -> list[BeliefState]:
    """Belief per step over [B, T, ...]; the step-0 previous action is noop."""
    B, T = frames.shape[:2]
    b = core.initial_state(B, dtype=frames.dtype)
    prev = torch.full((B,), envlib.NOOP, dtype=torch.long)
    beliefs = []
    for t in range(T):
        b = core.update(b, prev, frames[:, t])
        beliefs.append(b)
        prev = actions[:, t]
    return beliefs


# ---------------------------------------------------------------------------
# Representation training


@dataclass
class ReprModel:
    core: BeliefCore
    sim: SimulationCore
    head: torch.nn.Module

    def parameters(self):
        for mod in (self.core, self.sim, self.head):
            yield from mod.parameters()


def build_repr_model(cfg: RunConfig) -> ReprModel:
    m = cfg.memory
    core = BeliefCore(
        variant=cfg.model.variant,
        n_h=cfg.model.n_h,
        embed_dim=cfg.model.embed_dim,
        num_actions=envlib.NUM_ACTIONS,
        frame_size=cfg.env.frame_size,
        slot_dim=m.slot_dim, slot_reads=m.slot_reads, slot_top_k=m.slot_top_k,
        slot_capacity=m.slot_capacity, kanerva_size=m.kanerva_size,
        kanerva_dim=m.kanerva_dim, kanerva_write_hidden=m.kanerva_write_hidden,
    )
    sim = SimulationCore(
        cfg.model.n_h, envlib.NUM_ACTIONS, variant=cfg.model.variant,
        slot_dim=m.slot_dim, slot_reads=m.slot_reads, slot_top_k=m.slot_top_k,
        kanerva_dim=m.kanerva_dim,
    )
    head_kwargs = {}
    if cfg.model.head == "generative":
        d = cfg.draw
        head_kwargs = dict(steps=d.steps, enc_hidden_ch=d.enc_hidden_ch,
                           enc_state_ch=d.enc_state_ch, state_ch=d.state_ch,
                           dec_hidden_ch=d.dec_hidden_ch, latent_ch=d.latent_ch,
                           cond_ch=d.cond_ch)
    elif cfg.model.head == "contrastive":
        head_kwargs = dict(embed_dim=cfg.model.contrast_embed_dim,
                           traj_negatives=cfg.model.traj_negatives)
    head = make_head(cfg.model.head, cfg.env.frame_size, 2 * cfg.model.n_h, **head_kwargs)
    return ReprModel(core=core, sim=sim, head=head)


def train_representation(
    cfg: RunConfig,
    episodes: list[Trajectory],
    metrics: MetricsWriter | None = None,
    probes: ProbeSet | None = None,
) -> dict:
    """Train belief + sim + head on the overshoot predictive loss.

    Windows are episode prefixes of length sim.unroll. When a ProbeSet is
    given, probes are trained online on gradient-stopped probe vectors and
    their losses logged alongside the model of interest.
    """
    torch.manual_seed(cfg.run.seed)
    model = build_repr_model(cfg)
    draw_gen = torch.Generator().manual_seed(cfg.run.seed + 2)
    rng = np.random.default_rng(cfg.run.seed + 3)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optim.lr,
                           betas=(cfg.optim.beta1, cfg.optim.beta2))
    geco = GecoState(kappa=cfg.geco.kappa, alpha=cfg.geco.alpha, nu=cfg.geco.nu,
                     lam=cfg.geco.lambda_init)
    probe_opt = None
    if probes is not None:
        probe_params = list(probes.parameters())
        probe_opt = torch.optim.Adam(probe_params, lr=cfg.probe.lr) if probe_params else None

    T = min(cfg.sim.unroll, min(ep.length for ep in episodes))
    tensors = episode_tensors(episodes)
    frames_all = tensors["frames"][:, :T]
    actions_all = tensors["actions"][:, :T]
    use_geco = cfg.model.head == "generative"

    for update in range(cfg.optim.updates):
        idx = torch.from_numpy(
            rng.choice(len(episodes), size=min(cfg.optim.batch_size, len(episodes)),
                       replace=False)
        )
        frames = frames_all[idx]
        actions = actions_all[idx]
        beliefs = compute_beliefs(model.core, frames, actions)
        plan = sample_overshoots(T, cfg.sim.overshoot, cfg.sim.starts, cfg.sim.targets, rng)
        loss, parts = predictive_loss(
            model.head, model.sim, frames, actions, beliefs, plan,
            geco=geco if use_geco else None, generator=draw_gen,
        )
        if not torch.isfinite(loss):
            raise NumericFailureError(f"non-finite predictive loss at update {update}")
        opt.zero_grad()
        loss.backward()
        if cfg.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(list(model.parameters()), cfg.optim.grad_clip)
        opt.step()
        if use_geco:
            geco = geco_update(geco, parts["recon"])

        if probes is not None and cfg.probe.online and update % cfg.probe.online_every == 0:
            _online_probe_step(cfg, probes, probe_opt, beliefs, tensors, idx, T, rng,
                               metrics, update)

        if metrics is not None and update % cfg.run.log_every == 0:
            metrics.write(update, "model_loss", float(loss.detach()))
            for name, value in parts.items():
                metrics.write(update, name, value)
            if use_geco:
                metrics.write(update, "geco_lambda", geco.lam)
                metrics.write(update, "geco_c_ma", geco.c_ma)

    return {"model": model, "geco": geco, "optimizer": opt, "window": T}


def _online_probe_step(cfg, probes, probe_opt, beliefs, tensors, idx, T, rng,
                       metrics, update) -> None:
    steps = rng.integers(cfg.probe.burn_in, T, size=min(cfg.probe.online_batch, 8))
    u_list, pos_list, ori_list, map_list = [], [], [], []
    for t in steps:
        u_list.append(probes.reader(beliefs[t]))
        pos_list.append(tensors["pos"][idx, t])
        ori_list.append(tensors["ori"][idx, t])
        map_list.append(tensors["maps"][idx])
    u = torch.cat(u_list)
    losses = probe_losses(probes, u, torch.cat(pos_list), torch.cat(ori_list),
                          torch.cat(map_list))
    total = losses["pos_ce"] + losses["ori_ce"] + losses["map_mse_mean"]
    if probe_opt is not None:
        probe_opt.zero_grad()
        total.backward()
        probe_opt.step()
    if metrics is not None and update % cfg.run.log_every == 0:
        for name, value in losses.items():
            metrics.write(update, f"probe_{name}", float(value.detach()))


# ---------------------------------------------------------------------------
# Post-hoc probe fitting and evaluation


def _belief_cache(core: BeliefCore, episodes: list[Trajectory], window: int,
                  chunk: int = 16) -> list[tuple[list[BeliefState], torch.Tensor]]:
    """Detached per-step beliefs per episode chunk, plus the chunk indices."""
    out = []
    with torch.no_grad():
        for lo in range(0, len(episodes), chunk):
            part = episodes[lo : lo + chunk]
            tensors = episode_tensors(part)
            beliefs = compute_beliefs(core, tensors["frames"][:, :window],
                                      tensors["actions"][:, :window])
            out.append(([b.detached() for b in beliefs],
                        torch.arange(lo, lo + len(part))))
    return out


def fit_probes(cfg: RunConfig, core: BeliefCore, episodes: list[Trajectory],
               window: int | None = None) -> ProbeSet:
    """Fit pose and map probes on cached beliefs from frozen model weights."""
    window = window or min(cfg.sim.unroll, min(ep.length for ep in episodes))
    num_positions = cfg.env.width * cfg.env.height
    probes = build_probes(core, num_positions, cfg.env.orientation_bins,
                          cfg.env.map_size, cfg.memory.kanerva_probe_reads)
    cache = _belief_cache(core, episodes, window)
    tensors = episode_tensors(episodes)
    opt = torch.optim.Adam(list(probes.parameters()), lr=cfg.probe.lr)
    rng = np.random.default_rng(cfg.run.seed + 7)

    plain = core.variant == "plain"
    if plain:
        # Parameter-free reader: precompute probe vectors once.
        with torch.no_grad():
            u_all = torch.stack(
                [torch.stack([probes.reader(b) for b in beliefs], dim=1)
                 for beliefs, _ in cache]
            ).flatten(0, 1)  # [N, T, u]
        steps = [(n, t) for n in range(len(episodes)) for t in range(cfg.probe.burn_in, window)]
        for _ in range(cfg.probe.epochs):
            order = rng.permutation(len(steps))
            for lo in range(0, len(order), cfg.probe.batch_size):
                batch = [steps[i] for i in order[lo : lo + cfg.probe.batch_size]]
                n_idx = torch.tensor([n for n, _ in batch])
                t_idx = torch.tensor([t for _, t in batch])
                u = u_all[n_idx, t_idx]
                losses = probe_losses(probes, u, tensors["pos"][n_idx, t_idx],
                                      tensors["ori"][n_idx, t_idx], tensors["maps"][n_idx])
                opt.zero_grad()
                (losses["pos_ce"] + losses["ori_ce"] + losses["map_mse_mean"]).backward()
                opt.step()
    else:
        for _ in range(cfg.probe.epochs):
            for beliefs, ep_idx in cache:
                for t in range(cfg.probe.burn_in, window):
                    u = probes.reader(beliefs[t])
                    losses = probe_losses(probes, u, tensors["pos"][ep_idx, t],
                                          tensors["ori"][ep_idx, t],
                                          tensors["maps"][ep_idx])
                    opt.zero_grad()
                    (losses["pos_ce"] + losses["ori_ce"] + losses["map_mse_mean"]).backward()
                    opt.step()
    return probes


@torch.no_grad()
def eval_probes(cfg: RunConfig, core: BeliefCore, probes: ProbeSet,
                episodes: list[Trajectory], window: int | None = None,
                train_mean_map: torch.Tensor | None = None):
    """Held-out probe metrics after burn-in, plus the per-step map SSE curve."""
    window = window or min(cfg.sim.unroll, min(ep.length for ep in episodes))
    cache = _belief_cache(core, episodes, window)
    tensors = episode_tensors(episodes)
    num_positions = cfg.env.width * cfg.env.height

    u_rows, pos_rows, ori_rows, map_rows = [], [], [], []
    per_step_sse = torch.zeros(window, dtype=torch.float64)
    count = 0
    for beliefs, ep_idx in cache:
        for t in range(window):
            u = probes.reader(beliefs[t])
            sse = map_sse(probes.map(u), tensors["maps"][ep_idx])
            per_step_sse[t] += sse.sum().double()
            if t >= cfg.probe.burn_in:
                u_rows.append(u)
                pos_rows.append(tensors["pos"][ep_idx, t])
                ori_rows.append(tensors["ori"][ep_idx, t])
                map_rows.append(tensors["maps"][ep_idx])
        count += len(ep_idx)
    per_step_sse /= count

    metrics = evaluate_probes(
        probes, torch.cat(u_rows), torch.cat(pos_rows), torch.cat(ori_rows),
        torch.cat(map_rows), num_positions, cfg.env.orientation_bins,
        train_mean_map=train_mean_map,
    )
    return metrics, per_step_sse.numpy()


# ---------------------------------------------------------------------------
# Figures


def _to_image(array: np.ndarray) -> Image.Image:
    return Image.fromarray((np.clip(array, 0.0, 1.0) * 255).astype(np.uint8))


def emit_map_grid(path, true_maps: np.ndarray, decoded_maps: np.ndarray) -> None:
    """Top row: real maps; bottom row: decoded maps."""
    n, h, w, _ = true_maps.shape
    grid = np.ones((2 * h + 3, n * (w + 1) + 1, 3), dtype=np.float64)
    for i in range(n):
        grid[1 : 1 + h, 1 + i * (w + 1) : 1 + i * (w + 1) + w] = true_maps[i]
        grid[2 + h : 2 + 2 * h, 1 + i * (w + 1) : 1 + i * (w + 1) + w] = decoded_maps[i]
    _to_image(grid).save(path)


def emit_rollout_strip(
    core: BeliefCore,
    sim: SimulationCore,
    head,
    episode: Trajectory,
    start_t: int,
    k: int,
    path,
    generator: torch.Generator | None = None,
) -> np.ndarray:
    """True frames (top) against prior samples along the sim unroll (bottom).

    Column j pairs the true frame at start_t + j with a sample conditioned
    on the simulation state after j action steps. Requires the generative
    head.
    """
    if not isinstance(head, ConvDraw):
        raise UnsupportedHeadError("rollout strips need the generative head")
    if start_t + k >= episode.length:
        raise InvalidConfigError("rollout window exceeds the episode")
    with torch.no_grad():
        frames = frames_to_tensor(episode.frames).unsqueeze(0)
        actions = torch.from_numpy(episode.actions).unsqueeze(0)
        beliefs = compute_beliefs(core, frames[:, : start_t + 1], actions[:, : start_t + 1])
        state = sim.init(beliefs[start_t])
        samples = [head.sample(state.features(), generator)]
        for j in range(k):
            state = sim.step(state, actions[:, start_t + j])
            samples.append(head.sample(state.features(), generator))

    truth = episode.frames[start_t : start_t + k + 1]
    sampled = np.stack([s[0].movedim(0, -1).numpy() for s in samples])
    h, w = truth.shape[1:3]
    strip = np.ones((2 * h + 3, (k + 1) * (w + 1) + 1, 3), dtype=np.float64)
    for j in range(k + 1):
        strip[1 : 1 + h, 1 + j * (w + 1) : 1 + j * (w + 1) + w] = truth[j]
        strip[2 + h : 2 + 2 * h, 1 + j * (w + 1) : 1 + j * (w + 1) + w] = sampled[j]
    if path is not None:
        _to_image(strip).save(path)
    return strip


@torch.no_grad()
def rollout_mae(
    core: BeliefCore,
    sim: SimulationCore,
    head: ConvDraw,
    episodes: list[Trajectory],
    start_t: int,
    horizons: tuple[int, ...],
    generator: torch.Generator,
    samples_per_point: int = 2,
) -> dict[int, np.ndarray]:
    """Per-episode mean absolute rollout error at each horizon."""
    if not isinstance(head, ConvDraw):
        raise UnsupportedHeadError("rollout evaluation needs the generative head")
    max_h = max(horizons)
    tensors = episode_tensors(episodes)
    frames = tensors["frames"]
    actions = tensors["actions"]
    beliefs = compute_beliefs(core, frames[:, : start_t + 1], actions[:, : start_t + 1])
    state = sim.init(beliefs[start_t])
    out = {h: None for h in horizons}
    for j in range(1, max_h + 1):
        state = sim.step(state, actions[:, start_t + j - 1])
        if j in out:
            feats = state.features()
            errs = []
            for _ in range(samples_per_point):
                sample = head.sample(feats, generator)
                errs.append((sample - frames[:, start_t + j]).abs().flatten(1).mean(dim=1))
            out[j] = torch.stack(errs).mean(dim=0).numpy()
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, modules: dict, optimizer=None, geco: GecoState | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "modules": {name: mod.state_dict() for name, mod in modules.items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "geco": geco.__dict__ if geco is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path, modules: dict, optimizer=None) -> dict:
    payload = torch.load(path, weights_only=False)
    for name, mod in modules.items():
        mod.load_state_dict(payload["modules"][name])
    if optimizer is not None and payload["optimizer"] is not None:
        optimizer.load_state_dict(payload["optimizer"])
    if payload["geco"] is not None:
        payload["geco"] = GecoState(**payload["geco"])
    return payload


# ---------------------------------------------------------------------------
# Experiments


def run_representation_experiment(cfg: RunConfig) -> dict:
    """Scripted-data experiment: train, fit probes post-hoc, evaluate, emit."""
    if cfg.rl.enabled:
        raise InvalidConfigError("representation experiments require rl.enabled = false")
    run_dir = prepare_run_dir(cfg)
    train_eps = collect_dataset(cfg, heldout=False)
    heldout_eps = collect_dataset(cfg, heldout=True)

    with MetricsWriter(os.path.join(run_dir, "metrics.jsonl"), cfg.run.seed) as metrics:
        result = train_representation(cfg, train_eps, metrics=metrics)
        model = result["model"]
        window = result["window"]

        probes = fit_probes(cfg, model.core, train_eps, window)
        train_maps = episode_tensors(train_eps)["maps"]
        mean_map = train_maps.mean(dim=0, keepdim=True)
        probe_metrics, per_step_sse = eval_probes(
            cfg, model.core, probes, heldout_eps, window, train_mean_map=mean_map
        )
        for name, value in probe_metrics.as_dict().items():
            metrics.write(cfg.optim.updates, f"heldout_{name}", value)
        for t, value in enumerate(per_step_sse):
            metrics.write(t, "heldout_map_sse_per_step", float(value))

    save_checkpoint(
        os.path.join(run_dir, "checkpoint.pt"),
        {"core": model.core, "sim": model.sim, "head": model.head,
         "probe_reader": probes.reader, "probe_pose": probes.pose, "probe_map": probes.map},
        optimizer=result["optimizer"], geco=result["geco"],
        extra={"window": window, "config": cfg.flat()},
    )

    _emit_repr_figures(cfg, run_dir, model, probes, heldout_eps, window)

    summary = {
        "run_dir": run_dir,
        "probe_metrics": probe_metrics.as_dict(),
        "per_step_map_sse": [float(v) for v in per_step_sse],
    }
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _emit_repr_figures(cfg, run_dir, model, probes, heldout_eps, window, n_show=6):
    with torch.no_grad():
        show = heldout_eps[:n_show]
        tensors = episode_tensors(show)
        beliefs = compute_beliefs(model.core, tensors["frames"][:, :window],
                                  tensors["actions"][:, :window])
        u = probes.reader(beliefs[window - 1])
        decoded = probes.map(u).movedim(1, -1).numpy()
        true_maps = np.stack([ep.map for ep in show])
        emit_map_grid(os.path.join(run_dir, "map_decodes.png"), true_maps, decoded)
    if isinstance(model.head, ConvDraw):
        gen = torch.Generator().manual_seed(cfg.run.seed + 11)
        start = max(0, min(cfg.probe.burn_in, window - 6))
        horizon = min(5, window - start - 1)
        if horizon >= 1:
            emit_rollout_strip(model.core, model.sim, model.head, heldout_eps[0],
                               start, horizon,
                               os.path.join(run_dir, "rollout_strip.png"), gen)


def run_rl_experiment(cfg: RunConfig) -> dict:
    """Food-collection RL run; logs episode returns against env steps."""
    if not cfg.rl.enabled:
        raise InvalidConfigError("rl experiments require rl.enabled = true")
    run_dir = prepare_run_dir(cfg)
    with MetricsWriter(os.path.join(run_dir, "metrics.jsonl"), cfg.run.seed) as metrics:
        result = train_loop(cfg, metrics=metrics)
    bundle = result["bundle"]
    modules = {"core": bundle.core, "heads": bundle.heads}
    if bundle.sim is not None:
        modules["sim"] = bundle.sim
        modules["head"] = bundle.head
    save_checkpoint(os.path.join(run_dir, "checkpoint.pt"), modules,
                    optimizer=result["optimizer"], geco=result["geco"],
                    extra={"env_steps": result["env_steps"], "config": cfg.flat()})
    summary = {
        "run_dir": run_dir,
        "env_steps": result["env_steps"],
        "episodes": result["episodes"],
    }
    with open(os.path.join(run_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def steps_to_threshold(episodes: list[tuple], threshold: float, window: int = 20) -> int | None:
    """First env step where the trailing-window mean return reaches threshold."""
    returns = [r for _, r, _ in episodes]
    steps = [s for s, _, _ in episodes]
    for i in range(len(returns)):
        lo = max(0, i - window + 1)
        if i - lo + 1 >= min(window, 5) and float(np.mean(returns[lo : i + 1])) >= threshold:
            return steps[i]
    return None


def sweep_configs(base: RunConfig, overshoots, heads, seeds) -> list[RunConfig]:
    """The overshoot x head x seed grid of run configs."""
    out = []
    for head in heads:
        for lo in overshoots:
            for seed in seeds:
                cfg = base.copy()
                cfg.model.head = head
                cfg.sim.overshoot = lo
                cfg.run.seed = seed
                cfg.run.name = f"{head}_lo{lo}_seed{seed}"
                out.append(cfg)
    return out
