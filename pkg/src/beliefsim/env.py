"""Procedurally generated grid city with first-person raycast rendering.

The world is a flat grid of cells. A random number of colored boxes
("buildings") occupy distinct cells; the agent moves continuously between
them with a discrete action set. Observations are column-raycast
first-person frames; ground truth (top-down map, discretized pose) is
available for probe training but never enters the agent's loss.

Conventions: x grows to the right, y grows downward, cell (cx, cy) spans
[cx, cx+1) x [cy, cy+1). Heading 0 points along +x and grows toward +y;
the direction vector is (cos h, sin h).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidActionError, InvalidConfigError, PlanFailureError

FORWARD, BACKWARD, ROTATE_LEFT, ROTATE_RIGHT, NOOP = range(5)
ACTION_NAMES = ("forward", "backward", "rotate_left", "rotate_right", "noop")
NUM_ACTIONS = 5

TWO_PI = 2.0 * math.pi

# Fixed box palette; WorldConfig.num_colors selects a prefix.
BOX_PALETTE = np.array(
    [
        [0.85, 0.10, 0.10],
        [0.10, 0.35, 0.85],
        [0.10, 0.70, 0.20],
        [0.80, 0.10, 0.75],
        [0.95, 0.55, 0.10],
        [0.10, 0.75, 0.75],
        [0.55, 0.30, 0.10],
        [0.75, 0.75, 0.75],
    ],
    dtype=np.float64,
)
FLOOR_COLOR = np.array([0.24, 0.24, 0.24], dtype=np.float64)
SKY_COLOR = np.array([0.55, 0.70, 0.90], dtype=np.float64)
FOOD_COLOR = np.array([0.95, 0.90, 0.10], dtype=np.float64)

# Wall heights in cell units per box_height_class; all reach at least the
# camera height (0.5) so no floor is ever visible behind a box.
BOX_HEIGHTS = (1.0, 1.5, 2.0)
FOOD_HEIGHT = 0.3
CAMERA_HEIGHT = 0.5
# Height-class brightness on the top-down map.
MAP_HEIGHT_SHADE = (0.70, 0.85, 1.0)


@dataclass(frozen=True)
class WorldConfig:
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

    def validate(self) -> None:
        cells = self.width * self.height
        if self.width < 2 or self.height < 2:
            raise InvalidConfigError("grid must be at least 2x2")
        if not (0 <= self.min_boxes <= self.max_boxes):
            raise InvalidConfigError("need 0 <= min_boxes <= max_boxes")
        # Spawn cell plus food cells must stay free.
        if self.max_boxes + 1 + self.food_count > cells:
            raise InvalidConfigError(
                f"box range up to {self.max_boxes} plus spawn and "
                f"{self.food_count} food does not fit a {self.width}x{self.height} grid"
            )
        if not (1 <= self.num_colors <= len(BOX_PALETTE)):
            raise InvalidConfigError(f"num_colors must be in [1, {len(BOX_PALETTE)}]")
        if not (1 <= self.num_height_classes <= len(BOX_HEIGHTS)):
            raise InvalidConfigError(f"num_height_classes must be in [1, {len(BOX_HEIGHTS)}]")
        if self.frame_size not in (32, 64):
            raise InvalidConfigError("frame_size must be 32 or 64")
        if self.orientation_bins < 4 or self.orientation_bins % 4 != 0:
            raise InvalidConfigError("orientation_bins must be a positive multiple of 4")
        if not (0.0 < self.fov < math.pi):
            raise InvalidConfigError("fov must lie in (0, pi)")
        if self.step_length <= 0 or self.max_episode_steps < 1:
            raise InvalidConfigError("step_length and max_episode_steps must be positive")


@dataclass(frozen=True)
class PoseLabel:
    position_class: int
    orientation_class: int


@dataclass
class WorldState:
    """Value object for one world; `step` returns an updated copy."""

    config: WorldConfig
    width: int
    height: int
    boxes: tuple[tuple[int, int, int, int], ...]  # (cell_x, cell_y, color_id, height_class)
    agent_x: float
    agent_y: float
    agent_heading: float
    food: tuple[tuple[int, int, bool], ...]  # (cell_x, cell_y, active)
    rng_seed: int
    step_count: int = 0

    @property
    def agent_cell(self) -> tuple[int, int]:
        return int(self.agent_x), int(self.agent_y)

    def box_cells(self) -> set[tuple[int, int]]:
        return {(bx, by) for bx, by, _, _ in self.boxes}

    def free_cells(self) -> list[tuple[int, int]]:
        occ = self.box_cells()
        return [
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if (x, y) not in occ
        ]


def _free_cells_connected(width: int, height: int, box_cells: set[tuple[int, int]]) -> bool:
    free = [(x, y) for y in range(height) for x in range(width) if (x, y) not in box_cells]
    if not free:
        return False
    seen = {free[0]}
    queue = deque([free[0]])
    while queue:
        x, y = queue.popleft()
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < width and 0 <= ny < height:
                cell = (nx, ny)
                if cell not in box_cells and cell not in seen:
                    seen.add(cell)
                    queue.append(cell)
    return len(seen) == len(free)


def generate_world(seed: int, config: WorldConfig) -> WorldState:
    """Draw a world from the seed: box layout, agent spawn, food placement.

    Box count is uniform over [min_boxes, max_boxes]; placements are
    resampled (count kept fixed) until the free cells form one connected
    component. Regeneration from the same (seed, config) is bit-identical.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    num_boxes = int(rng.integers(config.min_boxes, config.max_boxes + 1))
    cells = [(x, y) for y in range(config.height) for x in range(config.width)]

    for _ in range(500):
        order = rng.permutation(len(cells))
        spawn = cells[order[0]]
        box_cells = [cells[i] for i in order[1 : 1 + num_boxes]]
        if _free_cells_connected(config.width, config.height, set(box_cells)):
            break
    else:
        raise InvalidConfigError("could not place boxes with connected free space")

    colors = rng.integers(0, config.num_colors, size=num_boxes)
    heights = rng.integers(0, config.num_height_classes, size=num_boxes)
    boxes = tuple(
        (bx, by, int(c), int(h)) for (bx, by), c, h in zip(box_cells, colors, heights)
    )

    free_non_spawn = [c for c in cells if c not in set(box_cells) and c != spawn]
    food_idx = rng.permutation(len(free_non_spawn))[: config.food_count]
    food = tuple((free_non_spawn[i][0], free_non_spawn[i][1], True) for i in food_idx)

    heading_bin = int(rng.integers(0, config.orientation_bins))
    return WorldState(
        config=config,
        width=config.width,
        height=config.height,
        boxes=boxes,
        agent_x=spawn[0] + 0.5,
        agent_y=spawn[1] + 0.5,
        agent_heading=heading_bin * (TWO_PI / config.orientation_bins),
        food=food,
        rng_seed=seed,
    )


def cast_ray(
    world: WorldState,
    ox: float,
    oy: float,
    angle: float,
    box_by_cell: dict[tuple[int, int], int] | None = None,
) -> tuple[float, int | None, int]:
    """DDA grid walk from (ox, oy) along `angle` to the nearest box.

    Returns (distance, box_index, side) where side is 0 for a hit on a
    vertical (x) cell boundary and 1 for a horizontal one. box_index is
    None when the ray leaves the grid without hitting a box; distance is
    then inf.
    """
    dx, dy = math.cos(angle), math.sin(angle)
    if box_by_cell is None:
        box_by_cell = {(bx, by): i for i, (bx, by, _, _) in enumerate(world.boxes)}

    cx, cy = int(ox), int(oy)
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    # Parametric distance to the first x/y gridline and per-cell increments.
    inv_dx = abs(1.0 / dx) if dx != 0 else math.inf
    inv_dy = abs(1.0 / dy) if dy != 0 else math.inf
    t_x = ((cx + 1 - ox) if dx > 0 else (ox - cx)) * inv_dx if dx != 0 else math.inf
    t_y = ((cy + 1 - oy) if dy > 0 else (oy - cy)) * inv_dy if dy != 0 else math.inf

    side = 0
    while True:
        if t_x < t_y:
            t_hit = t_x
            cx += step_x
            t_x += inv_dx
            side = 0
        else:
            t_hit = t_y
            cy += step_y
            t_y += inv_dy
            side = 1
        if not (0 <= cx < world.width and 0 <= cy < world.height):
            return math.inf, None, side
        idx = box_by_cell.get((cx, cy))
        if idx is not None:
            return t_hit, idx, side


def _cast_ray_food(
    world: WorldState,
    ox: float,
    oy: float,
    angle: float,
    max_t: float,
    food_by_cell: dict[tuple[int, int], int],
    box_cells: set[tuple[int, int]],
):
    """Nearest active-food cell entry along the ray, closer than max_t."""
    dx, dy = math.cos(angle), math.sin(angle)
    cx, cy = int(ox), int(oy)
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    inv_dx = abs(1.0 / dx) if dx != 0 else math.inf
    inv_dy = abs(1.0 / dy) if dy != 0 else math.inf
    t_x = ((cx + 1 - ox) if dx > 0 else (ox - cx)) * inv_dx if dx != 0 else math.inf
    t_y = ((cy + 1 - oy) if dy > 0 else (oy - cy)) * inv_dy if dy != 0 else math.inf
    while True:
        t_hit = min(t_x, t_y)
        if t_x < t_y:
            cx += step_x
            t_x += inv_dx
        else:
            cy += step_y
            t_y += inv_dy
        if t_hit >= max_t or not (0 <= cx < world.width and 0 <= cy < world.height):
            return None
        if (cx, cy) in box_cells:
            return None
        idx = food_by_cell.get((cx, cy))
        if idx is not None:
            return t_hit, idx


def render_first_person(world: WorldState, fov: float | None = None) -> np.ndarray:
    """Column-raycast frame [H, W, 3] in [0, 1], deterministic in the pose.

    Each column paints the nearest box along its ray, shaded by distance and
    hit side; floor and sky fill the rest. Active food draws a short overlay
    column when it is nearer than the occluding box.
    """
    cfg = world.config
    if fov is None:
        fov = cfg.fov
    size = cfg.frame_size
    frame = np.empty((size, size, 3), dtype=np.float64)
    frame[: size // 2] = SKY_COLOR
    frame[size // 2 :] = FLOOR_COLOR

    focal = (size / 2) / math.tan(fov / 2)
    ox, oy, heading = world.agent_x, world.agent_y, world.agent_heading
    rows = np.arange(size)
    box_by_cell = {(bx, by): i for i, (bx, by, _, _) in enumerate(world.boxes)}
    food_by_cell = {(fx, fy): i for i, (fx, fy, active) in enumerate(world.food) if active}
    box_cells = set(box_by_cell)

    for col in range(size):
        offset = fov * ((col + 0.5) / size - 0.5)
        angle = heading + offset
        t_hit, idx, hit_side = cast_ray(world, ox, oy, angle, box_by_cell)
        cos_off = math.cos(offset)
        if idx is not None:
            _, _, color_id, height_class = world.boxes[idx]
            d_perp = max(t_hit * cos_off, 1e-6)
            wall_h = BOX_HEIGHTS[height_class]
            top = size / 2 + (CAMERA_HEIGHT - wall_h) * focal / d_perp
            bottom = size / 2 + CAMERA_HEIGHT * focal / d_perp
            shade = max(0.35, 1.0 - 0.09 * t_hit) * (0.85 if hit_side == 1 else 1.0)
            mask = (rows >= top) & (rows < bottom)
            frame[mask, col] = BOX_PALETTE[color_id] * shade
        if food_by_cell:
            food_hit = _cast_ray_food(world, ox, oy, angle, t_hit, food_by_cell, box_cells)
            if food_hit is not None:
                t_food, _ = food_hit
                d_perp = max(t_food * cos_off, 1e-6)
                top = size / 2 + (CAMERA_HEIGHT - FOOD_HEIGHT) * focal / d_perp
                bottom = size / 2 + CAMERA_HEIGHT * focal / d_perp
                shade = max(0.35, 1.0 - 0.09 * t_food)
                mask = (rows >= top) & (rows < bottom)
                frame[mask, col] = FOOD_COLOR * shade

    return np.clip(frame, 0.0, 1.0).astype(np.float32)


def render_top_down_map(world: WorldState, agent_marker: bool = False) -> np.ndarray:
    """Fixed-scale [M, M, 3] map of the world layout, pose-independent.

    The optional agent marker is off by default so the map is a pure
    function of the layout.
    """
    cfg = world.config
    m = cfg.map_size
    img = np.empty((m, m, 3), dtype=np.float64)
    img[:] = FLOOR_COLOR
    px = m // max(world.width, world.height)
    for bx, by, color_id, height_class in world.boxes:
        color = BOX_PALETTE[color_id] * MAP_HEIGHT_SHADE[height_class]
        img[by * px : (by + 1) * px, bx * px : (bx + 1) * px] = color
    for fx, fy, active in world.food:
        if active:
            img[fy * px : (fy + 1) * px, fx * px : (fx + 1) * px] = FOOD_COLOR
    if agent_marker:
        ax, ay = world.agent_cell
        img[ay * px : (ay + 1) * px, ax * px : (ax + 1) * px] = 1.0
    return img.astype(np.float32)


def _blocked(world: WorldState, x: float, y: float) -> bool:
    if not (0.0 <= x < world.width and 0.0 <= y < world.height):
        return True
    return (int(x), int(y)) in world.box_cells()


def step(
    world: WorldState, action: int
) -> tuple[WorldState, np.ndarray, float, bool]:
    """Advance one time step; returns (world, frame, reward, done).

    Movement into a box or out of bounds leaves the pose unchanged.
    Entering an active food cell pays +1 and deactivates it. done is set
    when all food is consumed or the episode step limit is reached.
    """
    if action not in range(NUM_ACTIONS):
        raise InvalidActionError(f"unknown action id {action!r}")
    cfg = world.config
    inc = TWO_PI / cfg.orientation_bins
    x, y, heading = world.agent_x, world.agent_y, world.agent_heading

    if action in (FORWARD, BACKWARD):
        sign = 1.0 if action == FORWARD else -1.0
        nx = x + sign * cfg.step_length * math.cos(heading)
        ny = y + sign * cfg.step_length * math.sin(heading)
        if not _blocked(world, nx, ny):
            x, y = nx, ny
    elif action == ROTATE_LEFT:
        heading = (heading + inc) % TWO_PI
    elif action == ROTATE_RIGHT:
        heading = (heading - inc) % TWO_PI

    reward = 0.0
    food = world.food
    cell = (int(x), int(y))
    for i, (fx, fy, active) in enumerate(food):
        if active and (fx, fy) == cell:
            reward = 1.0
            food = food[:i] + ((fx, fy, False),) + food[i + 1 :]
            break

    new_world = replace(
        world,
        agent_x=x,
        agent_y=y,
        agent_heading=heading,
        food=food,
        step_count=world.step_count + 1,
    )
    all_food_gone = len(world.food) > 0 and all(not a for _, _, a in food)
    done = all_food_gone or new_world.step_count >= cfg.max_episode_steps
    frame = render_first_person(new_world)
    return new_world, frame, reward, done


def pose_labels(world: WorldState) -> PoseLabel:
    """Discretize the agent pose into position and orientation classes."""
    cx, cy = world.agent_cell
    cfg = world.config
    heading = world.agent_heading % TWO_PI
    ori = int(heading // (TWO_PI / cfg.orientation_bins)) % cfg.orientation_bins
    return PoseLabel(position_class=cy * world.width + cx, orientation_class=ori)


def bfs_path(
    width: int,
    height: int,
    box_cells: set[tuple[int, int]],
    start: tuple[int, int],
    goal: tuple[int, int],
) -> list[tuple[int, int]] | None:
    """Shortest cell path over free cells, 4-connected; None if unreachable."""
    if start == goal:
        return [start]
    prev: dict[tuple[int, int], tuple[int, int]] = {start: start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for nxt in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            nx, ny = nxt
            if not (0 <= nx < width and 0 <= ny < height):
                continue
            if nxt in box_cells or nxt in prev:
                continue
            prev[nxt] = (x, y)
            if nxt == goal:
                path = [goal]
                while path[-1] != start:
                    path.append(prev[path[-1]])
                return path[::-1]
            queue.append(nxt)
    return None


@dataclass
class PolicyState:
    """Waypoint-following policy state; owns its RNG stream."""

    rng: np.random.Generator
    waypoint: tuple[int, int] | None = None

    @classmethod
    def from_seed(cls, seed: int) -> "PolicyState":
        return cls(rng=np.random.default_rng(seed))


def _signed_angle(delta: float) -> float:
    return (delta + math.pi) % TWO_PI - math.pi


def scripted_policy(world: WorldState, state: PolicyState) -> tuple[int, PolicyState]:
    """Waypoint navigation: BFS a cell path, rotate to face it, walk it.

    Samples a fresh waypoint uniformly over free cells whenever the current
    one is reached (or unset), then emits rotate/forward actions along the
    shortest path.
    """
    cur = world.agent_cell
    free = world.free_cells()
    if state.waypoint is None or state.waypoint == cur:
        candidates = [c for c in free if c != cur]
        if not candidates:
            return NOOP, state
        state.waypoint = candidates[int(state.rng.integers(0, len(candidates)))]

    path = bfs_path(world.width, world.height, world.box_cells(), cur, state.waypoint)
    if path is None:
        raise PlanFailureError(f"no path from {cur} to waypoint {state.waypoint}")
    nxt = path[1]
    # Cardinal steering by cell delta keeps motion axis-aligned even when
    # the agent sits mid-cell after a waypoint switch.
    desired = math.atan2(nxt[1] - cur[1], nxt[0] - cur[0])
    diff = _signed_angle(desired - world.agent_heading)
    inc = TWO_PI / world.config.orientation_bins
    if abs(diff) < inc / 2 - 1e-9:
        return FORWARD, state
    return (ROTATE_LEFT if diff > 0 else ROTATE_RIGHT), state
