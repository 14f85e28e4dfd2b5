"""Run configuration: nested sections, flat dotted-key file format.

Config files are flat `section.field = value` lines (# comments allowed);
CLI flags override file values. Every resolved run re-emits its full
config, and any constant outside the reference hyperparameter ranges is
flagged as a desk-scale override in the run metadata.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields

from .errors import InvalidConfigError
from .env import WorldConfig


@dataclass
class EnvSection:
    width: int = 8
    height: int = 8
    min_boxes: int = 4
    max_boxes: int = 10
    num_colors: int = 6
    num_height_classes: int = 3
    food_count: int = 0
    frame_size: int = 32
    map_size: int = 32
    fov: float = math.pi / 2
    orientation_bins: int = 8
    step_length: float = 0.25
    max_episode_steps: int = 500


@dataclass
class ModelSection:
    variant: str = "plain"        # plain | slot | kanerva
    head: str = "generative"      # generative | deterministic | contrastive
    n_h: int = 512
    embed_dim: int = 256
    contrast_embed_dim: int = 128
    traj_negatives: int = 8


@dataclass
class DrawSection:
    steps: int = 8
    enc_hidden_ch: int = 16
    enc_state_ch: int = 32
    state_ch: int = 64
    dec_hidden_ch: int = 32
    latent_ch: int = 32
    cond_ch: int = 32


@dataclass
class MemorySection:
    slot_dim: int = 200
    slot_reads: int = 3
    slot_top_k: int = 50
    slot_capacity: int = 512
    kanerva_size: int = 32
    kanerva_dim: int = 512
    kanerva_write_hidden: int = 400
    kanerva_probe_reads: int = 4


@dataclass
class SimSection:
    unroll: int = 64      # steps per training window
    overshoot: int = 8    # max prediction horizon
    starts: int = 6       # simulation start points per window
    targets: int = 2      # scored offsets per start


@dataclass
class GecoSection:
    kappa: float = 1e-3
    alpha: float = 0.99
    nu: float = 0.1
    lambda_init: float = 1.0


@dataclass
class OptimSection:
    lr: float = 2e-4
    beta1: float = 0.95
    beta2: float = 0.999
    batch_size: int = 8
    updates: int = 300
    grad_clip: float = 0.0


@dataclass
class DataSection:
    episodes: int = 48
    heldout_episodes: int = 12
    episode_len: int = 64


@dataclass
class RlSection:
    enabled: bool = False
    num_envs: int = 8
    unroll: int = 16
    gamma: float = 0.99
    entropy_cost: float = 0.01
    env_steps: int = 60000
    model_loss_weight: float = 1.0
    use_simcore: bool = True


@dataclass
class ProbeSection:
    burn_in: int = 20
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    online: bool = True
    online_batch: int = 64
    online_every: int = 1


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs"
    name: str = ""
    checkpoint_every: int = 0  # 0: final checkpoint only
    log_every: int = 10


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    draw: DrawSection = field(default_factory=DrawSection)
    memory: MemorySection = field(default_factory=MemorySection)
    sim: SimSection = field(default_factory=SimSection)
    geco: GecoSection = field(default_factory=GecoSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)
    rl: RlSection = field(default_factory=RlSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    run: RunSection = field(default_factory=RunSection)

    def flat(self) -> dict[str, object]:
        out = {}
        for sec in fields(self):
            section = getattr(self, sec.name)
            for f in fields(section):
                out[f"{sec.name}.{f.name}"] = getattr(section, f.name)
        return dict(sorted(out.items()))

    def set_key(self, key: str, raw: object) -> None:
        try:
            sec_name, field_name = key.split(".", 1)
            section = getattr(self, sec_name)
            f = {f.name: f for f in fields(section)}[field_name]
        except (ValueError, AttributeError, KeyError):
            raise InvalidConfigError(f"unknown config key {key!r}") from None
        setattr(section, field_name, _coerce(raw, f.type, key))

    def world_config(self) -> WorldConfig:
        e = self.env
        return WorldConfig(
            width=e.width, height=e.height, min_boxes=e.min_boxes, max_boxes=e.max_boxes,
            num_colors=e.num_colors, num_height_classes=e.num_height_classes,
            food_count=e.food_count, frame_size=e.frame_size, map_size=e.map_size,
            fov=e.fov, orientation_bins=e.orientation_bins, step_length=e.step_length,
            max_episode_steps=e.max_episode_steps,
        )

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self, **{s.name: dataclasses.replace(getattr(self, s.name)) for s in fields(self)}
        )


def _coerce(raw: object, type_name: str, key: str):
    if not isinstance(raw, str):
        return raw
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    if type_name == "bool":
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise InvalidConfigError(f"cannot parse boolean {raw!r} for {key}")
    return raw


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config(cfg: RunConfig, path) -> None:
    lines = [f"{key} = {format_value(value)}" for key, value in cfg.flat().items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config(path, base: RunConfig | None = None) -> RunConfig:
    cfg = base.copy() if base is not None else RunConfig()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfigError(f"{path}:{lineno}: expected `key = value`")
            key, raw = (part.strip() for part in line.split("=", 1))
            cfg.set_key(key, raw)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} must look like key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        cfg.set_key(key, raw)
    return cfg


# Reference hyperparameter ranges; values outside these get flagged as
# desk-scale overrides in the emitted run metadata.
PAPER_RANGES: dict[str, tuple[str, object]] = {
    "optim.lr": ("range", (1e-4, 2e-4)),
    "optim.beta1": ("set", (0.0, 0.95)),
    "optim.beta2": ("set", (0.99, 0.999)),
    "rl.entropy_cost": ("range", (0.0005, 0.03)),
    "sim.overshoot": ("set", (1, 2, 3, 6, 12)),
    "sim.unroll": ("range", (24, 100)),
    "sim.starts": ("set", (6,)),
    "sim.targets": ("set", (2,)),
    "draw.steps": ("set", (8,)),
    "model.n_h": ("range", (512, 1024)),
    "memory.slot_dim": ("set", (200,)),
    "memory.slot_reads": ("set", (3,)),
    "memory.slot_top_k": ("set", (50,)),
    "memory.slot_capacity": ("set", (1350,)),
    "memory.kanerva_size": ("set", (32,)),
    "memory.kanerva_dim": ("set", (512,)),
    "memory.kanerva_write_hidden": ("set", (400,)),
}


def desk_overrides(cfg: RunConfig) -> list[str]:
    flagged = []
    flat = cfg.flat()
    for key, (kind, spec) in PAPER_RANGES.items():
        value = flat[key]
        if kind == "range":
            lo, hi = spec
            ok = lo <= value <= hi
        else:
            ok = any(value == v for v in spec)
        if not ok:
            flagged.append(key)
    return flagged
