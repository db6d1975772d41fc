"""Deterministic grid world: colored blocks, a continuous agent, stacking goals.

States are value types; `step` is a pure function. Tasks ask the agent to
rebuild scattered blocks into an anchored layered arrangement, e.g.
"stack at 2 3 layer red green layer blue" puts red/green side by side at
cells (2,3),(3,3) and blue on top of red.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ifm.blockworld.grammar import COLOR_NAMES
from ifm.errors import DataError, ParameterError
from ifm.numerics.random import RngStream

# See render(): palette is in [0,1] and mapped to [-1,1] pixel space.
_PALETTE = np.array(
    [
        [0.90, 0.15, 0.15],  # red
        [0.15, 0.80, 0.20],  # green
        [0.20, 0.35, 0.95],  # blue
        [0.95, 0.90, 0.20],  # yellow
        [0.95, 0.55, 0.15],  # orange
        [0.60, 0.25, 0.85],  # purple
    ],
    dtype=np.float32,
)
_BACKGROUND = np.array([0.08, 0.08, 0.08], dtype=np.float32)
_AGENT_OPEN = np.array([1.0, 1.0, 1.0], dtype=np.float32)
_AGENT_CLOSED = np.array([0.55, 0.55, 0.55], dtype=np.float32)

DIFFICULTIES = ("easy", "middle", "hard")

# (total block count, layer sizes bottom-up); layer sizes are non-increasing.
_PARTITIONS = {
    "easy": [(2, (2,)), (2, (1, 1)), (3, (3,)), (3, (2, 1))],
    "middle": [(3, (2, 1)), (4, (3, 1)), (4, (2, 2))],
    "hard": [(3, (1, 1, 1)), (4, (2, 1, 1)), (5, (3, 1, 1)), (5, (2, 2, 1))],
}


@dataclass(frozen=True)
class GridConfig:
    width: int = 8
    height: int = 8
    pixels_per_cell: int = 2
    num_colors: int = 6
    horizon: int = 8  # action-chunk length
    pickup_radius: float = 0.5

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.height * self.pixels_per_cell, self.width * self.pixels_per_cell, 3)


@dataclass(frozen=True)
class Block:
    color: int
    cell: tuple[int, int] | None  # None while held
    level: int = 0


@dataclass(frozen=True)
class Goal:
    """Layered arrangement anchored at a cell; layers list colors left-to-right."""

    layers: tuple[tuple[int, ...], ...]
    anchor: tuple[int, int]

    @property
    def block_count(self) -> int:
        return sum(len(layer) for layer in self.layers)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def strip_cells(self) -> list[tuple[int, int]]:
        ax, ay = self.anchor
        return [(ax + i, ay) for i in range(len(self.layers[0]))]

    def column_height(self, i: int) -> int:
        return sum(1 for layer in self.layers if len(layer) > i)


@dataclass(frozen=True)
class Placement:
    color: int
    cell: tuple[int, int]
    level: int
    support: int | None  # color id directly beneath, None for the table


@dataclass
class WorldState:
    cfg: GridConfig
    blocks: list[Block]
    agent_pos: tuple[float, float]
    gripper_closed: bool
    held: int | None
    goal: Goal

    def copy(self) -> "WorldState":
        return WorldState(self.cfg, list(self.blocks), self.agent_pos, self.gripper_closed, self.held, self.goal)

    def stack_at(self, cell: tuple[int, int]) -> list[int]:
        """Block indices in the cell, bottom to top."""
        members = [(b.level, i) for i, b in enumerate(self.blocks) if b.cell == cell]
        return [i for _, i in sorted(members)]

    def block_of_color(self, color: int) -> int:
        for i, b in enumerate(self.blocks):
            if b.color == color:
                return i
        raise DataError(f"no block of color {COLOR_NAMES[color]}")

    def agent_cell(self) -> tuple[int, int]:
        return (int(self.agent_pos[0]), int(self.agent_pos[1]))


# -- goal text ----------------------------------------------------------------


def instruction_words(goal: Goal) -> list[str]:
    words = ["stack", "at", str(goal.anchor[0]), str(goal.anchor[1])]
    for layer in goal.layers:
        words.append("layer")
        words.extend(COLOR_NAMES[c] for c in layer)
    return words


def parse_instruction(words: list[str]) -> Goal:
    if len(words) < 6 or words[0] != "stack" or words[1] != "at":
        raise DataError(f"malformed instruction: {words}")
    try:
        anchor = (int(words[2]), int(words[3]))
    except ValueError as e:
        raise DataError(f"malformed anchor in instruction: {words}") from e
    layers: list[tuple[int, ...]] = []
    current: list[int] | None = None
    for w in words[4:]:
        if w == "layer":
            if current is not None:
                layers.append(tuple(current))
            current = []
        elif w in COLOR_NAMES:
            if current is None:
                raise DataError(f"color before first layer: {words}")
            current.append(COLOR_NAMES.index(w))
        else:
            raise DataError(f"unexpected word {w!r} in instruction")
    if current:
        layers.append(tuple(current))
    if not layers or any(not layer for layer in layers):
        raise DataError(f"instruction has an empty layer: {words}")
    return Goal(tuple(layers), anchor)


def placements(goal: Goal) -> list[Placement]:
    """Build order: layer by layer, left to right."""
    out = []
    ax, ay = goal.anchor
    for level, layer in enumerate(goal.layers):
        for i, color in enumerate(layer):
            support = goal.layers[level - 1][i] if level > 0 else None
            out.append(Placement(color, (ax + i, ay), level, support))
    return out


# -- task sampling --------------------------------------------------------------


def sample_task(rng: RngStream, difficulty: str, cfg: GridConfig | None = None, color_pool=None) -> WorldState:
    """A fresh solvable task; identical (rng, difficulty) gives identical states."""
    if difficulty not in _PARTITIONS:
        raise ParameterError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    cfg = cfg or GridConfig()
    pool = list(range(cfg.num_colors)) if color_pool is None else list(color_pool)
    options = [(n, layers) for n, layers in _PARTITIONS[difficulty] if n <= len(pool)]
    if not options:
        raise ParameterError(f"color pool of {len(pool)} too small for {difficulty} tasks")
    n, layer_sizes = options[int(rng.integers(0, len(options)))]
    colors = [pool[i] for i in rng.choice(len(pool), size=n, replace=False)]
    layers, k = [], 0
    for size in layer_sizes:
        layers.append(tuple(colors[k : k + size]))
        k += size
    n1 = layer_sizes[0]
    anchor = (int(rng.integers(0, cfg.width - n1 + 1)), int(rng.integers(0, cfg.height)))
    goal = Goal(tuple(layers), anchor)
    strip = set(goal.strip_cells())
    free = [(x, y) for y in range(cfg.height) for x in range(cfg.width) if (x, y) not in strip]
    spots = rng.choice(len(free), size=n, replace=False)
    blocks = [Block(color=c, cell=free[int(s)], level=0) for c, s in zip(colors, spots)]
    agent = (float(rng.uniform((), 0.0, cfg.width - 1e-3)), float(rng.uniform((), 0.0, cfg.height - 1e-3)))
    return WorldState(cfg, blocks, agent, gripper_closed=False, held=None, goal=goal)


# -- dynamics -------------------------------------------------------------------


def step(state: WorldState, action) -> WorldState:
    """Apply one (dx, dy, grip) action. Pure; illegal pickups are no-ops."""
    cfg = state.cfg
    a = np.asarray(action, dtype=np.float32)
    dx = float(np.clip(a[0], -1.0, 1.0))
    dy = float(np.clip(a[1], -1.0, 1.0))
    close = bool(a[2] > 0)
    nx = float(np.clip(state.agent_pos[0] + dx, 0.0, cfg.width - 1e-3))
    ny = float(np.clip(state.agent_pos[1] + dy, 0.0, cfg.height - 1e-3))
    blocks = list(state.blocks)
    held = state.held
    cell = (int(nx), int(ny))
    center = (cell[0] + 0.5, cell[1] + 0.5)
    within = math.hypot(nx - center[0], ny - center[1]) <= cfg.pickup_radius
    if close and not state.gripper_closed and held is None and within:
        stack = state.stack_at(cell)
        if stack:
            top = stack[-1]
            blocks[top] = replace(blocks[top], cell=None, level=0)
            held = top
    elif not close and state.gripper_closed and held is not None:
        height = len(state.stack_at(cell))
        blocks[held] = replace(blocks[held], cell=cell, level=height)
        held = None
    return WorldState(cfg, blocks, (nx, ny), close, held, state.goal)


def proprio(state: WorldState) -> np.ndarray:
    """(x, y, grip) normalized into [-1, 1]."""
    cfg = state.cfg
    return np.array(
        [
            state.agent_pos[0] / cfg.width * 2.0 - 1.0,
            state.agent_pos[1] / cfg.height * 2.0 - 1.0,
            1.0 if state.gripper_closed else -1.0,
        ],
        dtype=np.float32,
    )


def render(state: WorldState) -> np.ndarray:
    """RGB image in [-1, 1], one flat color per stack, brightness with height."""
    cfg = state.cfg
    ppc = cfg.pixels_per_cell
    img = np.empty(cfg.image_shape, dtype=np.float32)
    img[:] = _BACKGROUND
    occupied: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for b in state.blocks:
        if b.cell is not None:
            occupied.setdefault(b.cell, []).append((b.level, b.color))
    for (cx, cy), members in occupied.items():
        height = len(members)
        top_color = max(members)[1]
        brightness = min(0.6 + 0.15 * (height - 1), 1.0)
        img[cy * ppc : (cy + 1) * ppc, cx * ppc : (cx + 1) * ppc] = _PALETTE[top_color] * brightness
    px = min(int(state.agent_pos[0] * ppc), cfg.width * ppc - 1)
    py = min(int(state.agent_pos[1] * ppc), cfg.height * ppc - 1)
    img[py, px] = _AGENT_CLOSED if state.gripper_closed else _AGENT_OPEN
    return img * 2.0 - 1.0


# -- predicates -----------------------------------------------------------------


def success(state: WorldState, goal: Goal | None = None) -> bool:
    """Exact match of the anchored layered arrangement."""
    goal = goal or state.goal
    ax, ay = goal.anchor
    for i in range(len(goal.layers[0])):
        cell = (ax + i, ay)
        stack = state.stack_at(cell)
        if len(stack) != goal.column_height(i):
            return False
        for level, layer in enumerate(goal.layers):
            if len(layer) > i and state.blocks[stack[level]].color != layer[i]:
                return False
    return True


def subtask_done(state: WorldState, words: list[str], goal: Goal | None = None) -> bool:
    """Postcondition of one subtask phrase."""
    if not words:
        return False
    if words[0] == "done":
        return success(state, goal)
    if words[0] == "pick" and len(words) == 2 and words[1] in COLOR_NAMES:
        if state.held is None:
            return False
        return state.blocks[state.held].color == COLOR_NAMES.index(words[1])
    if words[0] == "place" and len(words) == 4 and words[2] == "on":
        try:
            idx = state.block_of_color(COLOR_NAMES.index(words[1]))
        except (DataError, ValueError):
            return False
        block = state.blocks[idx]
        if block.cell is None:
            return False
        if words[3] == "table":
            return block.level == 0
        if words[3] in COLOR_NAMES:
            try:
                sup = state.blocks[state.block_of_color(COLOR_NAMES.index(words[3]))]
            except DataError:
                return False
            return sup.cell == block.cell and block.level == sup.level + 1
    return False


def plan_lower_bound(state: WorldState, goal: Goal | None = None) -> float:
    """Manhattan travel bound for the remaining build, plus terminal steps."""
    goal = goal or state.goal
    pos = state.agent_pos
    total = 0.0
    for p in placements(goal):
        idx = state.block_of_color(p.color)
        block = state.blocks[idx]
        stack = state.stack_at(p.cell)
        if block.cell == p.cell and len(stack) > p.level and stack[p.level] == idx:
            continue
        src = block.cell if block.cell is not None else (int(pos[0]), int(pos[1]))
        sc = (src[0] + 0.5, src[1] + 0.5)
        tc = (p.cell[0] + 0.5, p.cell[1] + 0.5)
        total += abs(pos[0] - sc[0]) + abs(pos[1] - sc[1])
        total += abs(sc[0] - tc[0]) + abs(sc[1] - tc[1])
        pos = tc
    return total + 2.0


# -- QA probes (language co-training) -------------------------------------------


def make_qa(state: WorldState, rng: RngStream) -> tuple[list[str], list[str]]:
    """A 'what color at x y' question about the rendered scene."""
    cfg = state.cfg
    x = int(rng.integers(0, cfg.width))
    y = int(rng.integers(0, cfg.height))
    stack = state.stack_at((x, y))
    answer = [COLOR_NAMES[state.blocks[stack[-1]].color]] if stack else ["empty"]
    return ["what", "color", "at", str(x), str(y)], answer
