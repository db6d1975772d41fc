"""Two-stage training, total-objective assembly, and checkpointing.

Stage 1 trains subtask prediction and keyframe forecasting only (no action
rows are built, action-pathway parameters provably untouched). Stage 2
trains all three objectives jointly under one conditioning scheme and
applies the async-execution augmentation: with probability p_async the
context frame is replaced by an earlier frame while proprio stays current.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from ifm.blockworld import (
    Episode,
    GridConfig,
    SegmentAnnotation,
    Step,
    instruction_words,
    make_qa,
    render,
    run_expert,
    sample_task,
    segment_runs,
)
from ifm.encoding import Vocabulary
from ifm.errors import CompatibilityError, DataError, FormatError, ParameterError
from ifm.flowmatch import INIT_MODES, SCHEMES, action_velocity_loss, image_velocity_loss
from ifm.mot import Model, MoTConfig
from ifm.numerics import AdamW, Array, GradientTape, add, cross_entropy_logits, gather_rows, scale, weighted_sum
from ifm.numerics.random import RngStream
from ifm.sequence import PackedSequence, TrainingSlice, build_training_sequence, pack_batch

CKPT_MAGIC = b"IFMC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    stage: int = 2
    scheme: str = "single"
    noise_init: str = "rfg"
    lambda_l: float = 1.0
    lambda_v: float = 1.0
    lambda_a: float = 1.0
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    p_async: float = 0.5
    delta_max: int = 8
    dataset: str = ""
    lr: float = 3e-4
    weight_decay: float = 0.01
    qa_weight: float = 0.0
    horizon: int = 8
    width: int = 64
    layers: int = 4
    heads: int = 4
    max_len: int = 256
    tau_dim: int = 32
    image_side: int = 16
    patch: int = 4
    include_subtask: bool = True
    include_keyframe: bool = True
    sigma_rfg: float = 1.0
    max_rows: int = 8192
    metrics_csv: str = ""
    init_checkpoint: str = ""

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ParameterError(f"stage must be 1 or 2, got {self.stage}")
        if self.scheme not in SCHEMES:
            raise ParameterError(f"unknown scheme {self.scheme!r}")
        if self.noise_init not in INIT_MODES:
            raise ParameterError(f"unknown noise init {self.noise_init!r}")
        if min(self.lambda_l, self.lambda_v, self.lambda_a) < 0:
            raise ParameterError("loss weights must be >= 0")
        if self.stage == 1:
            self.lambda_a = 0.0

    def mot_config(self, vocab_size: int) -> MoTConfig:
        return MoTConfig(
            width=self.width,
            layers=self.layers,
            heads=self.heads,
            max_len=self.max_len,
            tau_dim=self.tau_dim,
            vocab_size=vocab_size,
            image_side=self.image_side,
            patch=self.patch,
        )

    def to_file(self, path: str) -> None:
        with open(path, "w") as f:
            for fld in dataclasses.fields(self):
                f.write(f"{fld.name} = {getattr(self, fld.name)}\n")

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        kwargs = {}
        types = {fld.name: fld.type for fld in dataclasses.fields(cls)}
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise FormatError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                if key not in types:
                    raise ParameterError(f"{path}:{lineno}: unknown config key {key!r}")
                kind = types[key]
                if kind in ("int", int):
                    kwargs[key] = int(value)
                elif kind in ("float", float):
                    kwargs[key] = float(value)
                elif kind in ("bool", bool):
                    kwargs[key] = value.lower() in ("1", "true", "yes")
                else:
                    kwargs[key] = value
        return cls(**kwargs)


# -- demonstration data -------------------------------------------------------------


def make_episode(trace, vocab: Vocabulary) -> Episode:
    """Tokenize an expert trace into a stored episode."""
    segments = [
        SegmentAnnotation(tokens=vocab.tokenize(list(words)), start=start, keyframe=keyframe)
        for words, start, _end, keyframe in segment_runs(trace.labels)
    ]
    steps = [Step(f, p, a) for f, p, a in zip(trace.frames, trace.proprios, trace.actions)]
    ep = Episode(
        instruction=vocab.tokenize(instruction_words(trace.goal)),
        steps=steps,
        segments=segments,
        success=True,
    )
    ep.validate()
    return ep


def generate_episodes(
    count: int,
    seed: int,
    difficulty: str = "mixed",
    grid: GridConfig | None = None,
    color_pool=None,
    jitter: float = 0.05,
    vocab: Vocabulary | None = None,
) -> list[Episode]:
    """Scripted-expert demonstrations; 'mixed' difficulty cycles all tiers."""
    vocab = vocab or Vocabulary()
    root = RngStream(seed).child("gen-data")
    tiers = ("easy", "middle", "hard") if difficulty == "mixed" else (difficulty,)
    episodes = []
    for i in range(count):
        rng = root.child(f"ep{i}")
        task = sample_task(rng.child("task"), tiers[i % len(tiers)], grid, color_pool)
        trace = run_expert(task, rng.child("expert"), jitter=jitter)
        episodes.append(make_episode(trace, vocab))
    return episodes


# -- data slicing -----------------------------------------------------------------


def slice_episode(
    ep: Episode,
    t: int,
    horizon: int,
    rng: RngStream | None = None,
    p_async: float = 0.0,
    delta_max: int = 1,
) -> TrainingSlice:
    """Build the supervised sample anchored at step t.

    The async augmentation swaps only the context frame for an earlier one;
    proprio and the action chunk stay at t, matching asynchronous inference
    where image context refreshes lag proprio.
    """
    seg_i = ep.segment_of(t)
    seg = ep.segments[seg_i]
    ctx_t = t
    if p_async > 0.0 and rng is not None and float(rng.uniform(())) < p_async:
        delta = int(rng.integers(1, delta_max + 1))
        ctx_t = max(0, t - delta)
    pad = np.array([0.0, 0.0, -1.0], dtype=np.float32)
    actions = [ep.steps[j].action if j < len(ep.steps) else pad for j in range(t, t + horizon)]
    return TrainingSlice(
        instruction=list(ep.instruction),
        context_image=ep.steps[ctx_t].image,
        subtask=list(seg.tokens),
        keyframe_image=ep.steps[seg.keyframe].image,
        proprio=ep.steps[t].proprio,
        actions=np.stack(actions),
    )


def ce_loss(model: Model, packed: PackedSequence, hidden: Array) -> Array | None:
    """Mean-over-samples autoregressive cross entropy on subtask rows."""
    if packed.ce_rows.size == 0:
        return None
    logits = model.text_logits(gather_rows(hidden, packed.ce_rows))
    return weighted_sum(cross_entropy_logits(logits, packed.ce_targets), packed.ce_weights)


def total_objective(model: Model, packed: PackedSequence, cfg: TrainConfig) -> tuple[Array, dict]:
    """Weighted sum of the three losses; the parts are reported exactly."""
    hidden = model.forward_full(packed)
    parts: dict[str, float] = {"ce": 0.0, "lv": 0.0, "la": 0.0}
    total: Array | None = None

    def accumulate(term: Array | None, weight: float, name: str):
        nonlocal total
        if term is None:
            return
        parts[name] = term.item()
        if weight == 0.0:
            return
        weighted = scale(term, weight)
        total = weighted if total is None else add(total, weighted)

    accumulate(ce_loss(model, packed, hidden), cfg.lambda_l, "ce")
    if packed.image_target is not None:
        accumulate(image_velocity_loss(model, packed, hidden), cfg.lambda_v, "lv")
    if packed.action_target is not None:
        accumulate(action_velocity_loss(model, packed, hidden), cfg.lambda_a, "la")
    if total is None:
        raise DataError("no loss term active; check config weights and data")
    parts["total"] = total.item()
    return total, parts


class Trainer:
    """Owns the model, optimizer, data order, and metrics stream."""

    def __init__(self, cfg: TrainConfig, episodes: list[Episode], vocab: Vocabulary | None = None, model: Model | None = None):
        self.cfg = cfg
        self.vocab = model.vocab if model is not None else (vocab or Vocabulary())
        self.model = model or Model(cfg.mot_config(len(self.vocab)), self.vocab, seed=cfg.seed)
        self.episodes = episodes
        self.opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = RngStream(cfg.seed).child("trainer")
        self.step_count = 0
        self.history: list[dict] = []
        frozen = self.model.action_parameter_names() if cfg.stage == 1 else set()
        self.trainable = {n: p for n, p in self.model.named_parameters().items() if n not in frozen}
        if not episodes and cfg.stage != 1:
            raise DataError("stage-2 training needs episodes with action labels")

    def _qa_slice(self, rng: RngStream) -> TrainingSlice:
        state = sample_task(rng.child("qa-task"), "easy", color_pool=None)
        question, answer = make_qa(state, rng.child("qa-q"))
        return TrainingSlice(
            instruction=self.vocab.tokenize(question),
            context_image=render(state),
            subtask=self.vocab.tokenize(answer),
            keyframe_image=None,
            proprio=None,
            actions=None,
        )

    def _sample_sequences(self) -> list:
        cfg = self.cfg
        seqs = []
        for b in range(cfg.batch_size):
            rng = self.rng.child(f"step{self.step_count}-b{b}")
            if cfg.stage == 1 and cfg.qa_weight > 0 and float(rng.uniform(())) < cfg.qa_weight:
                sample = self._qa_slice(rng)
                seqs.append(
                    build_training_sequence(
                        self.model.encoders, sample, cfg.scheme, cfg.noise_init, rng.child("seq"),
                        include_actions=False, include_keyframe=False,
                    )
                )
                continue
            ep = self.episodes[int(rng.integers(0, len(self.episodes)))]
            t = int(rng.integers(0, len(ep.steps)))
            sample = slice_episode(
                ep, t, cfg.horizon, rng.child("lag"),
                p_async=cfg.p_async if cfg.stage == 2 else 0.0,
                delta_max=cfg.delta_max,
            )
            seqs.append(
                build_training_sequence(
                    self.model.encoders, sample, cfg.scheme, cfg.noise_init, rng.child("seq"),
                    include_actions=cfg.stage == 2,
                    include_keyframe=cfg.include_keyframe,
                    include_subtask=cfg.include_subtask,
                    sigma_rfg=cfg.sigma_rfg,
                )
            )
        return seqs

    def train_step(self) -> dict:
        started = time.perf_counter()
        packed = pack_batch(self._sample_sequences(), max_rows=self.cfg.max_rows)
        with GradientTape() as tape:
            total, parts = total_objective(self.model, packed, self.cfg)
        tape.gradients(total)
        touched = {n: p for n, p in self.trainable.items() if p.grad is not None}
        self.opt.step(touched)
        for p in self.trainable.values():
            p.grad = None
        self.step_count += 1
        parts["step"] = self.step_count
        parts["wallclock_ms"] = (time.perf_counter() - started) * 1e3
        self.history.append(parts)
        return parts

    def run(self) -> list[dict]:
        writer = None
        if self.cfg.metrics_csv:
            writer = open(self.cfg.metrics_csv, "a")
            if writer.tell() == 0:
                writer.write("step,ce,lv,la,total,wallclock_ms\n")
        try:
            for _ in range(self.cfg.steps):
                m = self.train_step()
                if writer:
                    writer.write(
                        f"{m['step']},{m['ce']:.6f},{m['lv']:.6f},{m['la']:.6f},{m['total']:.6f},{m['wallclock_ms']:.2f}\n"
                    )
        finally:
            if writer:
                writer.close()
        return self.history

    # -- persistence ---------------------------------------------------------------

    def state_extras(self) -> dict:
        return {"rng": self.rng.state_dict(), "step_count": self.step_count}

    def restore_extras(self, extras: dict) -> None:
        self.rng.load_state_dict(extras["rng"])
        self.step_count = extras["step_count"]


def train_stage1(cfg: TrainConfig, episodes: list[Episode], vocab: Vocabulary | None = None) -> Trainer:
    if cfg.stage != 1:
        cfg = dataclasses.replace(cfg, stage=1)
    for ep in episodes:
        if not ep.segments:
            raise DataError("stage-1 data needs subtask and keyframe annotations")
    trainer = Trainer(cfg, episodes, vocab)
    before = {n: trainer.model.named_parameters()[n].data.copy() for n in trainer.model.action_parameter_names()}
    trainer.run()
    after = trainer.model.named_parameters()
    for name, data in before.items():
        if not np.array_equal(after[name].data, data):
            raise DataError(f"stage-1 touched action parameter {name}")
    return trainer

def train_stage2(cfg: TrainConfig, episodes: list[Episode], vocab: Vocabulary | None = None, model: Model | None = None) -> Trainer:
    if cfg.stage != 2:
        cfg = dataclasses.replace(cfg, stage=2)
    if model is None and cfg.init_checkpoint:
        bundle = load_checkpoint(cfg.init_checkpoint)
        model, vocab = bundle.model, bundle.model.vocab
    return_trainer = Trainer(cfg, episodes, vocab, model=model)
    return_trainer.run()
    return return_trainer


# -- checkpoints -------------------------------------------------------------------


@dataclass
class CheckpointBundle:
    model: Model
    optimizer_state: dict | None
    extras: dict
    meta: dict


def save_checkpoint(path: str, model: Model, optimizer: AdamW | None = None, extras: dict | None = None, meta: dict | None = None) -> None:
    """Named float32 little-endian blobs plus a JSON header; bitwise round trip."""
    names = sorted(model.named_parameters())
    params = model.named_parameters()
    manifest = [[n, list(params[n].shape)] for n in names]
    opt_state = None
    opt_manifest = []
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        for n in sorted(opt_state["m"]):
            opt_manifest.append([n, list(opt_state["m"][n].shape)])
    header = {
        "config": model.cfg.to_dict(),
        "vocab": list(model.vocab.words),
        "config_hash": model.config_hash(),
        "manifest": manifest,
        "opt_manifest": opt_manifest,
        "opt_scalars": (
            {k: opt_state[k] for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step_count")}
            if opt_state
            else None
        ),
        "extras": extras or {},
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<H", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())
        if opt_state:
            for n, _ in opt_manifest:
                f.write(np.ascontiguousarray(opt_state["m"][n], dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(opt_state["v"][n], dtype="<f4").tobytes())


def load_checkpoint(path: str, expected_hash: str | None = None) -> CheckpointBundle:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", _read(f, 2))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read(f, 4))
        header = json.loads(_read(f, hlen))
        cfg = MoTConfig(**header["config"])
        vocab = Vocabulary(tuple(header["vocab"]))
        model = Model(cfg, vocab, seed=0)
        if model.config_hash() != header["config_hash"]:
            raise CompatibilityError("checkpoint config hash does not match its stored configuration")
        if expected_hash is not None and header["config_hash"] != expected_hash:
            raise CompatibilityError("checkpoint was produced under a different configuration")
        params = model.named_parameters()
        if sorted(n for n, _ in header["manifest"]) != sorted(params):
            raise FormatError("checkpoint manifest does not cover the model parameters")
        for name, shape in header["manifest"]:
            want = params[name]
            if tuple(shape) != want.shape:
                raise FormatError(f"checkpoint blob {name} has shape {shape}, expected {want.shape}")
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(shape).copy()
            want.data = data
        opt_state = None
        if header["opt_scalars"] is not None:
            m, v = {}, {}
            for name, shape in header["opt_manifest"]:
                count = int(np.prod(shape)) if shape else 1
                m[name] = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(shape).copy()
                v[name] = np.frombuffer(_read(f, 4 * count), dtype="<f4").reshape(shape).copy()
            opt_state = dict(header["opt_scalars"], m=m, v=v)
        trailing = f.read(1)
        if trailing:
            raise FormatError("checkpoint has trailing bytes")
    return CheckpointBundle(model=model, optimizer_state=opt_state, extras=header["extras"], meta=header["meta"])


def _read(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data
