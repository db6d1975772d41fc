"""Closed-loop scripted expert and episode generation.

The expert replans from the current state every step, so action jitter
cannot break it, and the same next-subtask oracle doubles as the
planning-accuracy reference during policy evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ifm.blockworld.grammar import COLOR_NAMES
from ifm.blockworld.world import Goal, WorldState, placements, proprio, render, step, success
from ifm.errors import GenerationError
from ifm.numerics.random import RngStream

_PICK_RADIUS = 0.42
_PLACE_RADIUS = 0.35


@dataclass(frozen=True)
class Move:
    words: tuple[str, ...]
    target: tuple[float, float] | None  # cell center to travel to
    kind: str  # "pick" | "place" | "done"


def next_move(state: WorldState, goal: Goal | None = None) -> Move:
    """The expert's current objective: subtask phrase plus concrete target."""
    goal = goal or state.goal
    strip = set(goal.strip_cells())
    for p in placements(goal):
        idx = state.block_of_color(p.color)
        block = state.blocks[idx]
        stack = state.stack_at(p.cell)
        if block.cell == p.cell and len(stack) > p.level and stack[p.level] == idx:
            continue
        if state.held is not None:
            held_color = state.blocks[state.held].color
            if state.held == idx:
                support = "table" if p.support is None else COLOR_NAMES[p.support]
                return Move(("place", COLOR_NAMES[p.color], "on", support), _center(p.cell), "place")
            # Holding the wrong block: park it on a free cell off the strip.
            park = _parking_cell(state, strip)
            return Move(("place", COLOR_NAMES[held_color], "on", "table"), _center(park), "place")
        if block.cell is not None:
            stack_here = state.stack_at(block.cell)
            if stack_here[-1] != idx:
                # Buried: clear whatever sits on top first.
                top_color = state.blocks[stack_here[-1]].color
                return Move(("pick", COLOR_NAMES[top_color]), _center(block.cell), "pick")
            return Move(("pick", COLOR_NAMES[p.color]), _center(block.cell), "pick")
        return Move(("pick", COLOR_NAMES[p.color]), _center(state.agent_cell()), "pick")
    return Move(("done",), None, "done")


def next_subtask_words(state: WorldState, goal: Goal | None = None) -> list[str]:
    return list(next_move(state, goal).words)


def _center(cell: tuple[int, int]) -> tuple[float, float]:
    return (cell[0] + 0.5, cell[1] + 0.5)


def _parking_cell(state: WorldState, strip: set) -> tuple[int, int]:
    for y in range(state.cfg.height):
        for x in range(state.cfg.width):
            cell = (x, y)
            if cell not in strip and not state.stack_at(cell):
                return cell
    raise GenerationError("no free cell to park a block")


def expert_action(state: WorldState, goal: Goal | None = None, rng: RngStream | None = None, jitter: float = 0.0) -> np.ndarray:
    """One action toward the current objective, with optional motion jitter."""
    cfg = state.cfg
    move = next_move(state, goal)
    if move.kind == "done":
        return np.array([0.0, 0.0, -1.0], dtype=np.float32)
    tx, ty = move.target
    dx = np.clip(tx - state.agent_pos[0], -1.0, 1.0)
    dy = np.clip(ty - state.agent_pos[1], -1.0, 1.0)
    if jitter > 0.0 and rng is not None:
        noise = rng.normal((2,), sigma=jitter)
        dx = np.clip(dx + noise[0], -1.0, 1.0)
        dy = np.clip(dy + noise[1], -1.0, 1.0)
    # Mirror the environment kinematics so the grip decision matches where
    # the agent will actually land.
    nx = float(np.clip(state.agent_pos[0] + dx, 0.0, cfg.width - 1e-3))
    ny = float(np.clip(state.agent_pos[1] + dy, 0.0, cfg.height - 1e-3))
    dist = np.hypot(nx - tx, ny - ty)
    if move.kind == "pick":
        if state.gripper_closed and state.held is None:
            grip = -1.0  # recover from a failed pickup: reopen first
        else:
            grip = 1.0 if dist <= _PICK_RADIUS else -1.0
    else:  # place
        grip = -1.0 if dist <= _PLACE_RADIUS else 1.0
    return np.array([dx, dy, grip], dtype=np.float32)


@dataclass
class Trace:
    """Raw rollout of the expert before tokenization."""

    frames: list[np.ndarray]
    proprios: list[np.ndarray]
    actions: list[np.ndarray]
    labels: list[tuple[str, ...]]
    goal: Goal


def run_expert(state: WorldState, rng: RngStream | None = None, jitter: float = 0.0, max_steps: int = 400) -> Trace:
    """Roll the expert to success, then two terminal 'done' steps."""
    goal = state.goal
    frames, proprios, actions, labels = [], [], [], []
    t = 0
    while not success(state, goal):
        if t >= max_steps:
            raise GenerationError(f"expert exceeded {max_steps} steps")
        labels.append(next_move(state, goal).words)
        frames.append(render(state))
        proprios.append(proprio(state))
        action = expert_action(state, goal, rng, jitter)
        actions.append(action)
        state = step(state, action)
        t += 1
    noop = np.array([0.0, 0.0, -1.0], dtype=np.float32)
    for _ in range(2):
        labels.append(("done",))
        frames.append(render(state))
        proprios.append(proprio(state))
        actions.append(noop.copy())
        state = step(state, noop)
    return Trace(frames, proprios, actions, labels, goal)


def segment_runs(labels: list[tuple[str, ...]]) -> list[tuple[tuple[str, ...], int, int, int]]:
    """Turn per-step objective labels into (words, start, end, keyframe) spans.

    Each span stretches one step past its objective's completing action, so
    the last frame inside the span (the keyframe) shows the completed
    subtask. The final 'done' run keeps its own last frame.
    """
    runs: list[tuple[tuple[str, ...], int, int]] = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append((labels[start], start, i))
            start = i
    segments = []
    prev = 0
    for j, (words, _, stop) in enumerate(runs):
        end = len(labels) if j == len(runs) - 1 else stop + 1
        segments.append((words, prev, end, end - 1))
        prev = end
    return segments
