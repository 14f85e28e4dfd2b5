"""Trajectory records and scripted data collection.

A Trajectory is the time-aligned record every trainer consumes. Alignment:
frames[t] is the observation at step t, actions[t] is the action taken
after observing it, rewards[t]/dones[t] describe the resulting transition.
Pose labels and the per-episode map exist for probe use only and never
enter an agent loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env as envlib
from .errors import InvalidInputError


@dataclass
class Trajectory:
    frames: np.ndarray            # [T, H, W, 3] float32
    actions: np.ndarray           # [T] int64
    rewards: np.ndarray           # [T] float32
    dones: np.ndarray             # [T] bool
    position_class: np.ndarray    # [T] int64
    orientation_class: np.ndarray  # [T] int64
    map: np.ndarray               # [M, M, 3] float32
    behavior_logits: np.ndarray   # [T, A] float32

    def __post_init__(self):
        t = len(self.frames)
        for name in ("actions", "rewards", "dones", "position_class",
                     "orientation_class", "behavior_logits"):
            if len(getattr(self, name)) != t:
                raise InvalidInputError(f"trajectory field {name} misaligned with frames")

    @property
    def length(self) -> int:
        return len(self.frames)


def collect_scripted_episode(
    world_seed: int,
    config: envlib.WorldConfig,
    policy_seed: int,
    length: int,
) -> Trajectory:
    """Roll the waypoint policy for `length` steps in a fresh world."""
    world = envlib.generate_world(world_seed, config)
    policy = envlib.PolicyState.from_seed(policy_seed)
    top_down = envlib.render_top_down_map(world)

    frames = np.empty((length, config.frame_size, config.frame_size, 3), dtype=np.float32)
    actions = np.empty(length, dtype=np.int64)
    rewards = np.zeros(length, dtype=np.float32)
    dones = np.zeros(length, dtype=bool)
    pos = np.empty(length, dtype=np.int64)
    ori = np.empty(length, dtype=np.int64)

    frame = envlib.render_first_person(world)
    for t in range(length):
        frames[t] = frame
        label = envlib.pose_labels(world)
        pos[t], ori[t] = label.position_class, label.orientation_class
        action, policy = envlib.scripted_policy(world, policy)
        actions[t] = action
        world, frame, rewards[t], dones[t] = envlib.step(world, action)

    return Trajectory(
        frames=frames,
        actions=actions,
        rewards=rewards,
        dones=dones,
        position_class=pos,
        orientation_class=ori,
        map=top_down,
        behavior_logits=np.zeros((length, envlib.NUM_ACTIONS), dtype=np.float32),
    )


def save_dataset(path, episodes: list[Trajectory]) -> None:
    """Stacked npz export; all episodes must share a length."""
    lengths = {ep.length for ep in episodes}
    if len(lengths) != 1:
        raise InvalidInputError("episodes in one dataset must share a length")
    np.savez_compressed(
        path,
        frames=np.stack([ep.frames for ep in episodes]),
        actions=np.stack([ep.actions for ep in episodes]),
        rewards=np.stack([ep.rewards for ep in episodes]),
        dones=np.stack([ep.dones for ep in episodes]),
        position_class=np.stack([ep.position_class for ep in episodes]),
        orientation_class=np.stack([ep.orientation_class for ep in episodes]),
        maps=np.stack([ep.map for ep in episodes]),
        behavior_logits=np.stack([ep.behavior_logits for ep in episodes]),
    )


def load_dataset(path) -> list[Trajectory]:
    with np.load(path) as z:
        n = z["frames"].shape[0]
        return [
            Trajectory(
                frames=z["frames"][i],
                actions=z["actions"][i],
                rewards=z["rewards"][i],
                dones=z["dones"][i],
                position_class=z["position_class"][i],
                orientation_class=z["orientation_class"][i],
                map=z["maps"][i],
                behavior_logits=z["behavior_logits"][i],
            )
            for i in range(n)
        ]
