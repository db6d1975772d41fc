"""Closed-loop interleaved inference: decode the subtask, build the keyframe
rows per conditioning scheme, denoise an action chunk, execute, repeat.

The heavy context (instruction, images, decoded subtask, keyframe rows) is
cached; between refreshes only the proprio row is re-appended and the
action block re-denoised, which is what makes asynchronous execution pay.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ifm.blockworld import (
    Goal,
    WorldState,
    expert_action,
    next_subtask_words,
    proprio,
    render,
    step,
    subtask_done,
    success,
)
from ifm.encoding import Vocabulary
from ifm.errors import CapacityError, ContractError, ParameterError
from ifm.flowmatch import SamplerPlan, init_image_noise, sample_actions, sample_joint, sample_keyframe
from ifm.mot import KVCache, Model
from ifm.numerics.random import RngStream
from ifm.sequence import SegmentKind, layout


@dataclass
class InferencePlans:
    image_steps: int = 50  # N1: full keyframe denoise
    action_steps: int = 10  # N2: action denoise
    joint_steps: int = 50  # N: shared grid for the joint scheme


@dataclass
class PlanResult:
    subtask_words: list[str]
    keyframe: np.ndarray | None
    actions: np.ndarray
    latency_ms: dict[str, float]
    refreshed: bool


@dataclass
class PolicyContext:
    """Cached context plus the refresh schedule driving chunked control."""

    model: Model
    scheme: str = "single"
    init_mode: str = "rfg"
    plans: InferencePlans = field(default_factory=InferencePlans)
    refresh_every: int = 1
    use_env_trigger: bool = True
    horizon: int = 8
    sigma_rfg: float = 1.0
    zero_noise: bool = False
    decode_keyframe: bool = False
    include_subtask: bool = True
    include_keyframe: bool = True
    max_subtask_words: int = 8
    rng: RngStream = field(default_factory=lambda: RngStream(0))

    cache: KVCache | None = None
    chunks_since_refresh: int = 0
    refresh_count: int = 0
    chunk_count: int = 0
    last_subtask: list[str] = field(default_factory=list)
    last_image_x0: np.ndarray | None = None
    last_anchor: np.ndarray | None = None
    last_eps: np.ndarray | None = None
    _pre_proprio_rows: int = 0
    _force_refresh: bool = True

    def __post_init__(self):
        if self.refresh_every < 1:
            raise ParameterError(f"refresh cadence must be >= 1, got {self.refresh_every}")
        if self.scheme == "complete" and not self.include_keyframe:
            raise ContractError("complete scheme requires keyframe rows")

    def force_refresh(self) -> None:
        self._force_refresh = True

    def refresh_due(self) -> bool:
        return self._force_refresh or self.cache is None or self.chunks_since_refresh >= self.refresh_every


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, (time.perf_counter() - start) * 1e3


def refresh_context(model: Model, image: np.ndarray, instruction_ids: list[int], ctx: PolicyContext) -> float:
    """Rebuild the cached context from the current observation: commit the
    instruction and both visual pathways, decode the subtask, and lay out
    canonical position slots for every later segment. Returns elapsed ms."""
    cfg = model.cfg
    started = time.perf_counter()
    ctx.cache = model.new_cache(ctx.scheme)
    ctx.refresh_count += 1
    ctx.chunks_since_refresh = 0
    ctx._force_refresh = False
    anchor = model.encoders.encode_gen(image)
    ctx.last_anchor = anchor
    context_spec = [
        (SegmentKind.INSTR, len(instruction_ids), None),
        (SegmentKind.UND_IMG, cfg.patches, None),
        (SegmentKind.GEN_IMG_CTX, cfg.patches, None),
    ]
    slices = layout(context_spec)
    contents = [
        model.encoders.embed_tokens(instruction_ids),
        model.encoders.encode_und(image),
        model.encoders.project_gen(anchor),
    ]
    model.extend(ctx.cache, slices, contents, commit=True)
    subtask_pos = len(instruction_ids) + 2 * cfg.patches
    if ctx.include_subtask:
        ids = model.decode_subtask(ctx.cache, subtask_pos, max_words=ctx.max_subtask_words)
        ctx.last_subtask = model.vocab.detokenize(ids).split()
        subtask_len = len(ids)
    else:
        ctx.last_subtask = []
        subtask_len = 0

    # Canonical slots for everything that follows the decoded subtask.
    pos = subtask_pos + subtask_len
    eph: dict[SegmentKind, np.ndarray] = {}
    if ctx.include_keyframe:
        eph[SegmentKind.NOISY_KEY] = np.arange(pos, pos + cfg.patches)
        pos += cfg.patches
        if ctx.scheme == "complete":
            eph[SegmentKind.GT_KEY] = np.arange(pos, pos + cfg.patches)
            pos += cfg.patches
    eph[SegmentKind.PROPRIO] = np.arange(pos, pos + 1)
    pos += 1
    eph[SegmentKind.NOISY_ACT] = np.arange(pos, pos + ctx.horizon)
    pos += ctx.horizon
    if pos > cfg.max_len:
        raise CapacityError(f"chunk layout of {pos} rows exceeds max length {cfg.max_len}")
    ctx.cache.ephemeral_positions = eph
    return (time.perf_counter() - started) * 1e3


def plan_step(model: Model, image: np.ndarray, prop: np.ndarray, instruction_ids: list[int], ctx: PolicyContext) -> PlanResult:
    """One interleaved planning step over the current observation."""
    cfg = model.cfg
    refreshed = ctx.refresh_due()
    ms_text = ms_image = ms_action = 0.0
    keyframe_img: np.ndarray | None = None

    if refreshed:
        ms_text = refresh_context(model, image, instruction_ids, ctx)
        anchor = ctx.last_anchor
        if ctx.include_keyframe:
            started = time.perf_counter()
            ctx.last_eps = (
                np.zeros((cfg.patches, cfg.latent_dim), np.float32)
                if ctx.zero_noise
                else ctx.rng.child(f"noise-{ctx.refresh_count}").normal((cfg.patches, cfg.latent_dim), sigma=ctx.sigma_rfg)
            )
            x0 = (anchor + ctx.last_eps).astype(np.float32) if ctx.init_mode == "rfg" else ctx.last_eps
            ctx.last_image_x0 = x0
            if ctx.scheme == "single":
                model.commit_noisy_key(ctx.cache, x0, tau=0.0)
            elif ctx.scheme == "complete":
                plan = SamplerPlan(ctx.plans.image_steps, ctx.scheme, ctx.init_mode)
                latent = sample_keyframe(model, ctx.cache, plan, x0)
                keyframe_img = np.clip(model.encoders.decode_gen(latent), -1.0, 1.0)
                model.commit_gt_key(ctx.cache, latent)
            ms_image = (time.perf_counter() - started) * 1e3
        ctx._pre_proprio_rows = ctx.cache.rows
    else:
        ctx.cache.truncate(ctx._pre_proprio_rows)

    (_, ms_prop) = _timed(lambda: model.commit_proprio(ctx.cache, prop))
    ms_action += ms_prop

    started = time.perf_counter()
    if ctx.scheme == "joint":
        x0 = ctx.last_image_x0
        plan = SamplerPlan(ctx.plans.joint_steps, ctx.scheme, ctx.init_mode)
        actions, latent = sample_joint(model, ctx.cache, plan, ctx.rng.child(f"act-{ctx.chunk_count}"), x0, ctx.horizon)
        keyframe_img = np.clip(model.encoders.decode_gen(latent), -1.0, 1.0)
    else:
        plan = SamplerPlan(ctx.plans.action_steps, ctx.scheme, ctx.init_mode)
        actions = sample_actions(model, ctx.cache, plan, ctx.rng.child(f"act-{ctx.chunk_count}"), ctx.horizon)
    ms_action += (time.perf_counter() - started) * 1e3

    if ctx.scheme == "single" and ctx.decode_keyframe and ctx.include_keyframe:
        started = time.perf_counter()
        plan = SamplerPlan(ctx.plans.image_steps, ctx.scheme, ctx.init_mode)
        latent = sample_keyframe(model, ctx.cache, plan, ctx.last_image_x0)
        keyframe_img = np.clip(model.encoders.decode_gen(latent), -1.0, 1.0)
        ms_image += (time.perf_counter() - started) * 1e3

    ctx.chunk_count += 1
    ctx.chunks_since_refresh += 1
    return PlanResult(
        subtask_words=list(ctx.last_subtask),
        keyframe=keyframe_img,
        actions=actions,
        latency_ms={"text": ms_text, "image": ms_image, "action": ms_action},
        refreshed=refreshed,
    )


# -- closed-loop evaluation ----------------------------------------------------------


@dataclass
class RolloutResult:
    success: bool
    steps: int
    chunks: int
    refreshes: int
    planning_samples: list[tuple[list[str], list[str]]]  # (decoded, oracle)
    wallclock_s: float
    trace: list[dict]

    @property
    def planning_accuracy(self) -> float:
        if not self.planning_samples:
            return 0.0
        hits = sum(1 for got, want in self.planning_samples if got == want)
        return hits / len(self.planning_samples)

    @property
    def actions_per_second(self) -> float:
        return self.steps / self.wallclock_s if self.wallclock_s > 0 else 0.0


def rollout(
    model: Model,
    state: WorldState,
    ctx: PolicyContext,
    max_steps: int = 200,
    instruction_ids: list[int] | None = None,
) -> RolloutResult:
    """plan -> execute chunk -> check, until success, 'done', or max steps."""
    from ifm.blockworld import instruction_words

    goal = state.goal
    vocab = model.vocab
    if instruction_ids is None:
        instruction_ids = vocab.tokenize(instruction_words(goal))
    samples: list[tuple[list[str], list[str]]] = []
    trace: list[dict] = []
    steps = 0
    started = time.perf_counter()
    done = success(state, goal)
    while steps < max_steps and not done:
        plan = plan_step(model, render(state), proprio(state), instruction_ids, ctx)
        oracle = next_subtask_words(state, goal)
        samples.append((plan.subtask_words, oracle))
        trace_row = {
            "chunk": ctx.chunk_count,
            "subtask": " ".join(plan.subtask_words),
            "oracle": " ".join(oracle),
            "refreshed": plan.refreshed,
            **{f"ms_{k}": v for k, v in plan.latency_ms.items()},
        }
        if plan.subtask_words == ["done"] and ctx.include_subtask:
            done = success(state, goal)
            trace_row["success"] = done
            trace.append(trace_row)
            break
        for action in plan.actions:
            state = step(state, action)
            steps += 1
            if success(state, goal):
                done = True
                break
            if steps >= max_steps:
                break
        if ctx.use_env_trigger and plan.subtask_words and subtask_done(state, plan.subtask_words, goal):
            ctx.force_refresh()
        trace_row["success"] = done
        trace.append(trace_row)
    wall = time.perf_counter() - started
    return RolloutResult(
        success=done,
        steps=steps,
        chunks=ctx.chunk_count,
        refreshes=ctx.refresh_count,
        planning_samples=samples,
        wallclock_s=wall,
        trace=trace,
    )


def async_rollout(
    model: Model,
    state: WorldState,
    ctx: PolicyContext,
    max_steps: int = 200,
) -> tuple[RolloutResult, float]:
    """Rollout with cache refreshed every ctx.refresh_every chunks; returns
    the result plus effective executed actions per second."""
    if ctx.refresh_every < 1:
        raise ParameterError("refresh cadence must be >= 1")
    result = rollout(model, state, ctx, max_steps=max_steps)
    return result, result.actions_per_second


def expert_rollout(state: WorldState, max_steps: int = 400, horizon: int = 8, rng: RngStream | None = None, jitter: float = 0.0) -> RolloutResult:
    """Scripted-expert playback through the same chunked harness."""
    goal = state.goal
    steps = 0
    chunks = 0
    samples = []
    started = time.perf_counter()
    done = success(state, goal)
    while steps < max_steps and not done:
        words = next_subtask_words(state, goal)
        samples.append((words, words))
        if words == ["done"]:
            break
        chunks += 1
        for _ in range(horizon):
            state = step(state, expert_action(state, goal, rng, jitter))
            steps += 1
            if success(state, goal):
                done = True
                break
            if steps >= max_steps:
                break
    wall = time.perf_counter() - started
    return RolloutResult(done, steps, chunks, 0, samples, wall, [])


# -- latency benchmarking --------------------------------------------------------------


@dataclass
class LatencyRow:
    scheme: str
    mean_ms: float
    std_ms: float
    trials: int
    image_forwards: int
    action_forwards: int


def bench_latency(
    model: Model,
    schemes: tuple[str, ...] = ("single", "joint", "complete"),
    plans: InferencePlans | None = None,
    trials: int = 20,
    init_mode: str = "rfg",
    horizon: int = 8,
    seed: int = 0,
) -> list[LatencyRow]:
    """Mean/std per-chunk wallclock per scheme on one fixed observation."""
    from ifm.blockworld import instruction_words, sample_task

    if trials < 1:
        raise ParameterError("need at least one trial")
    plans = plans or InferencePlans()
    state = sample_task(RngStream(seed).child("bench-task"), "easy")
    image, prop = render(state), proprio(state)
    instruction_ids = model.vocab.tokenize(instruction_words(state.goal))
    rows = []
    for scheme in schemes:
        times = []
        counters = (0, 0)
        for trial in range(trials + 1):  # first iteration warms caches and is dropped
            ctx = PolicyContext(
                model,
                scheme=scheme,
                init_mode=init_mode,
                plans=plans,
                horizon=horizon,
                rng=RngStream(seed).child(f"bench-{scheme}-{trial}"),
            )
            model.reset_counters()
            started = time.perf_counter()
            plan_step(model, image, prop, instruction_ids, ctx)
            elapsed = (time.perf_counter() - started) * 1e3
            counters = (model.denoise_forwards["image"], model.denoise_forwards["action"])
            if trial > 0:
                times.append(elapsed)
        times = np.asarray(times)
        rows.append(
            LatencyRow(
                scheme=scheme,
                mean_ms=float(times.mean()),
                std_ms=float(times.std()),
                trials=trials,
                image_forwards=counters[0],
                action_forwards=counters[1],
            )
        )
    return rows
