"""Gradient-stopped probes: what does the belief state contain?

One affine layer decodes discretized position and orientation; a small
deconvolutional network decodes the top-down map. Probes read the belief
only through ProbeReader (which detaches), so probe training can never
shape the representation it measures.

Map error convention: sum of squared errors over the full map image,
averaged over examples.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .belief import ProbeReader


@dataclass
class ProbeMetrics:
    position_accuracy: float
    orientation_accuracy: float
    map_mse: float
    position_chance: float
    orientation_chance: float
    map_constant_mse: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


class PoseProbe(nn.Module):
    """Single affine layer per output: position logits and orientation logits."""

    def __init__(self, u_dim: int, num_positions: int, num_orientations: int):
        super().__init__()
        self.pos = nn.Linear(u_dim, num_positions)
        self.ori = nn.Linear(u_dim, num_orientations)

    def forward(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.pos(u), self.ori(u)


class MapProbe(nn.Module):
    """Affine map to a small grid, then a deconvolutional stack to M x M x 3."""

    def __init__(self, u_dim: int, map_size: int = 32, base_ch: int = 64, hidden_ch: int = 32):
        super().__init__()
        self.map_size = map_size
        self.grid = map_size // 8
        self.base_ch = base_ch
        self.fc = nn.Linear(u_dim, base_ch * self.grid * self.grid)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(base_ch, hidden_ch, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(hidden_ch, hidden_ch, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(hidden_ch, 3, 4, stride=2, padding=1),
        )

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.fc(u)).view(-1, self.base_ch, self.grid, self.grid)
        return self.deconv(h)


def map_sse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-example sum of squared errors over the map image: [B] from [B,3,M,M]."""
    return (pred - target).pow(2).flatten(1).sum(dim=1)


@dataclass
class ProbeSet:
    reader: ProbeReader
    pose: PoseProbe
    map: MapProbe

    def parameters(self):
        yield from self.reader.parameters()
        yield from self.pose.parameters()
        yield from self.map.parameters()


def build_probes(core, num_positions: int, num_orientations: int,
                 map_size: int = 32, kanerva_probe_reads: int = 4) -> ProbeSet:
    reader = ProbeReader(core, kanerva_probe_reads=kanerva_probe_reads)
    return ProbeSet(
        reader=reader,
        pose=PoseProbe(reader.u_dim, num_positions, num_orientations),
        map=MapProbe(reader.u_dim, map_size),
    )


def probe_losses(probes: ProbeSet, u: torch.Tensor, pos_labels: torch.Tensor,
                 ori_labels: torch.Tensor, maps: torch.Tensor) -> dict[str, torch.Tensor]:
    """Cross-entropy pose losses and mean-squared map loss on probe vectors."""
    pos_logits, ori_logits = probes.pose(u)
    ce = nn.functional.cross_entropy
    return {
        "pos_ce": ce(pos_logits, pos_labels),
        "ori_ce": ce(ori_logits, ori_labels),
        "map_mse_mean": (probes.map(u) - maps).pow(2).mean(),
    }


@torch.no_grad()
def evaluate_probes(
    probes: ProbeSet,
    u: torch.Tensor,
    pos_labels: torch.Tensor,
    ori_labels: torch.Tensor,
    maps: torch.Tensor,
    num_positions: int,
    num_orientations: int,
    train_mean_map: torch.Tensor | None = None,
) -> ProbeMetrics:
    """Accuracies and map SSE on a prepared evaluation set.

    The constant-predictor baseline scores the training-set mean map (or
    the evaluation mean when none is given) against every example.
    """
    pos_logits, ori_logits = probes.pose(u)
    pos_acc = (pos_logits.argmax(-1) == pos_labels).double().mean().item()
    ori_acc = (ori_logits.argmax(-1) == ori_labels).double().mean().item()
    decoded = probes.map(u)
    mse = map_sse(decoded, maps).mean().item()
    mean_map = train_mean_map if train_mean_map is not None else maps.mean(dim=0, keepdim=True)
    const_mse = map_sse(mean_map.expand_as(maps), maps).mean().item()
    return ProbeMetrics(
        position_accuracy=pos_acc,
        orientation_accuracy=ori_acc,
        map_mse=mse,
        position_chance=1.0 / num_positions,
        orientation_chance=1.0 / num_orientations,
        map_constant_mse=const_mse,
    )
