"""Belief-state agents shaped by a generative simulation core."""

from .belief import (
    BeliefCore,
    BeliefState,
    KanervaMemoryState,
    ProbeReader,
    SlotMemoryState,
    belief_features,
    km_read,
    km_write,
    slot_read,
)
from .config import RunConfig
from .data import Trajectory, collect_scripted_episode
from .env import (
    PolicyState,
    PoseLabel,
    WorldConfig,
    WorldState,
    generate_world,
    pose_labels,
    render_first_person,
    render_top_down_map,
    scripted_policy,
    step,
)
from .geco import GecoState, geco_loss, geco_update
from .heads import ContrastiveHead, ConvDraw, DeterministicHead, gaussian_kl, make_head
from .probes import MapProbe, PoseProbe, ProbeMetrics, build_probes
from .rl import AgentHeads, AgentOutput, act, pg_loss, train_loop
from .simulation import (
    OvershootPlan,
    SimState,
    SimulationCore,
    predictive_loss,
    sample_overshoots,
)

__all__ = [name for name in dir() if not name.startswith("_")]
