"""Unified interleaved sequence assembly and the multi-task attention masks.

One training sample is laid out as ordered segments:

    INSTR . UND_IMG(v) . GEN_IMG_CTX(v) . SUBTASK . NOISY_KEY
    [. GT_KEY when scheme=complete] . PROPRIO . NOISY_ACT

The mask rules are the minimal set that realizes each conditioning scheme
with no target leakage; exclusion is exact (masked positions contribute a
hard zero inside attention, not a small weight).
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from ifm.encoding import Encoders
from ifm.errors import CapacityError, ContractError, DataError, ParameterError
from ifm.flowmatch import SCHEMES, FlowSample, make_flow_sample
from ifm.numerics import Array, concat
from ifm.numerics.random import RngStream


class SegmentKind(enum.IntEnum):
    INSTR = 0
    UND_IMG = 1
    GEN_IMG_CTX = 2
    SUBTASK = 3
    NOISY_KEY = 4
    GT_KEY = 5
    PROPRIO = 6
    NOISY_ACT = 7


UND, GEN, ACT = 0, 1, 2

OWNER_OF = {
    SegmentKind.INSTR: UND,
    SegmentKind.UND_IMG: UND,
    SegmentKind.SUBTASK: UND,
    SegmentKind.GEN_IMG_CTX: GEN,
    SegmentKind.NOISY_KEY: GEN,
    SegmentKind.GT_KEY: GEN,
    SegmentKind.PROPRIO: ACT,
    SegmentKind.NOISY_ACT: ACT,
}

_CONTEXT = (SegmentKind.INSTR, SegmentKind.UND_IMG, SegmentKind.GEN_IMG_CTX, SegmentKind.SUBTASK)
_CAUSAL_KINDS = (SegmentKind.INSTR, SegmentKind.SUBTASK)

_uid_counter = itertools.count(1)


@dataclass(frozen=True)
class SegmentSlice:
    """A contiguous run of rows belonging to one logical segment.

    `uid` identifies the logical segment (a segment may be split between a
    cache and an extension); `offset` is the first row's index within it.
    `positions` are canonical sequence positions for the position table.
    """

    kind: SegmentKind
    length: int
    uid: int
    offset: int = 0
    tau: float | None = None
    positions: np.ndarray | None = None

    @property
    def owner(self) -> int:
        return OWNER_OF[self.kind]


def new_segment(kind: SegmentKind, length: int, tau: float | None = None, position_start: int | None = None) -> SegmentSlice:
    positions = None if position_start is None else np.arange(position_start, position_start + length, dtype=np.int64)
    return SegmentSlice(kind, length, uid=next(_uid_counter), tau=tau, positions=positions)


def layout(kinds_lengths_taus: list[tuple[SegmentKind, int, float | None]]) -> list[SegmentSlice]:
    """Assign canonical consecutive positions to an ordered segment list."""
    slices = []
    pos = 0
    for kind, length, tau in kinds_lengths_taus:
        slices.append(new_segment(kind, length, tau, position_start=pos))
        pos += length
    return slices


# -- mask rules -----------------------------------------------------------------


def _attends(q: SegmentSlice, k: SegmentSlice, scheme: str) -> str:
    """'full' | 'causal' | 'none' for query segment q over key segment k."""
    if q.uid == k.uid:
        return "causal" if q.kind in _CAUSAL_KINDS else "full"
    qk, kk = q.kind, k.kind
    if kk == SegmentKind.NOISY_ACT:
        return "none"  # nothing attends into the action block
    if qk in _CONTEXT:
        return "full" if kk in _CONTEXT and kk < qk else "none"  # block-causal context
    if qk == SegmentKind.NOISY_KEY:
        return "full" if kk in _CONTEXT else "none"  # never the GT keyframe
    if qk == SegmentKind.GT_KEY:
        return "full" if kk in _CONTEXT else "none"
    if qk == SegmentKind.PROPRIO:
        return "full" if kk in _CONTEXT else "none"
    if qk == SegmentKind.NOISY_ACT:
        if kk in _CONTEXT or kk == SegmentKind.PROPRIO:
            return "full"
        if scheme == "complete" and kk == SegmentKind.GT_KEY:
            return "full"
        if scheme in ("joint", "single") and kk == SegmentKind.NOISY_KEY:
            return "full"
        return "none"
    raise ParameterError(f"unhandled segment kind {qk}")


def build_mask_rows(queries: list[SegmentSlice], keys: list[SegmentSlice], scheme: str) -> np.ndarray:
    """Boolean mask (query rows x key rows) under rules for `scheme`."""
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown scheme {scheme!r}")
    nq = sum(s.length for s in queries)
    nk = sum(s.length for s in keys)
    mask = np.zeros((nq, nk), dtype=bool)
    qr = 0
    for qs in queries:
        kr = 0
        for ks in keys:
            rule = _attends(qs, ks, scheme)
            if rule == "full":
                mask[qr : qr + qs.length, kr : kr + ks.length] = True
            elif rule == "causal":
                qi = qs.offset + np.arange(qs.length)[:, None]
                ki = ks.offset + np.arange(ks.length)[None, :]
                mask[qr : qr + qs.length, kr : kr + ks.length] = ki <= qi
            kr += ks.length
        qr += qs.length
    return mask


def build_mask(segments: list[SegmentSlice], scheme: str) -> np.ndarray:
    """Full self-attention mask for one assembled sequence."""
    mask = build_mask_rows(segments, segments, scheme)
    n = mask.shape[0]
    if n and not np.all(mask[np.arange(n), np.arange(n)]):
        raise ContractError("every row must attend itself")
    return mask


def write_mask_pgm(mask: np.ndarray, path: str) -> None:
    """Binary PGM (P5) debug dump; white = may attend."""
    img = np.where(mask, 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


# -- assembled sequences -----------------------------------------------------------


@dataclass
class PackedSequence:
    """Embedded rows plus everything needed to run and supervise them."""

    rows: Array  # (N, d)
    mask: np.ndarray  # (N, N) bool
    segments: list[SegmentSlice]
    positions: np.ndarray  # (N,)
    taus: np.ndarray  # (N,) float32, NaN where the row carries no tau
    owners: np.ndarray  # (N,) int8
    scheme: str
    ce_rows: np.ndarray  # row indices that predict a next token
    ce_targets: np.ndarray  # aligned token ids
    ce_weights: np.ndarray  # aligned weights; sum of weights = 1 over the batch
    image_target: np.ndarray | None  # velocity target over NOISY_KEY rows
    action_target: np.ndarray | None  # velocity target over NOISY_ACT rows
    flow_image: FlowSample | None = None
    flow_action: FlowSample | None = None
    n_samples: int = 1

    @property
    def n_rows(self) -> int:
        return int(self.positions.shape[0])

    def segment_rows(self) -> list[tuple[SegmentSlice, int]]:
        out, r = [], 0
        for s in self.segments:
            out.append((s, r))
            r += s.length
        return out

    def rows_of(self, kind: SegmentKind) -> np.ndarray:
        idx = []
        for s, start in self.segment_rows():
            if s.kind == kind:
                idx.append(np.arange(start, start + s.length))
        return np.concatenate(idx) if idx else np.array([], dtype=np.int64)


def segment_arrays(slices: list[SegmentSlice]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    positions, taus, owners = [], [], []
    for s in slices:
        if s.positions is None or len(s.positions) != s.length:
            raise ContractError(f"segment {s.kind.name} missing positions")
        positions.append(s.positions)
        taus.append(np.full(s.length, np.nan if s.tau is None else s.tau, dtype=np.float32))
        owners.append(np.full(s.length, s.owner, dtype=np.int8))
    if not positions:
        raise ContractError("no segments")
    return np.concatenate(positions), np.concatenate(taus), np.concatenate(owners)


@dataclass
class TrainingSlice:
    """One supervised sample drawn from an episode."""

    instruction: list[int]
    context_image: np.ndarray
    subtask: list[int]
    keyframe_image: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray  # (horizon, 3)


def build_training_sequence(
    encoders: Encoders,
    sample: TrainingSlice,
    scheme: str,
    noise_init: str,
    rng: RngStream,
    include_actions: bool = True,
    include_keyframe: bool = True,
    include_subtask: bool = True,
    zero_noise: bool = False,
    sigma_rfg: float = 1.0,
) -> PackedSequence:
    """Assemble one sample under one conditioning scheme.

    Stage-1 samples are built with include_actions=False (no proprio/action
    rows, image tau drawn from its training distribution regardless of
    scheme). The ablation switches drop the subtask or keyframe segments.
    """
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown scheme {scheme!r}")
    if include_keyframe and sample.keyframe_image is None:
        raise DataError("sample lacks a keyframe annotation")
    if include_subtask and sample.subtask is None:
        raise DataError("sample lacks a subtask annotation")

    subtask_ids = list(sample.subtask) if include_subtask else []
    instr_ids = list(sample.instruction)

    tau_img: float | None = None
    tau_act: float | None = None
    if include_actions:
        if scheme == "joint":
            shared = float(rng.logit_normal(0.0, 1.0, ()))
            tau_img, tau_act = shared, shared
        else:
            tau_act = float(rng.beta(1.5, 1.0, ()))
            tau_img = 0.0 if scheme == "single" else float(rng.logit_normal(0.0, 1.0, ()))
    elif include_keyframe:
        tau_img = float(rng.logit_normal(0.0, 1.0, ()))

    flow_image = flow_action = None
    spec: list[tuple[SegmentKind, int, float | None]] = [
        (SegmentKind.INSTR, len(instr_ids), None),
        (SegmentKind.UND_IMG, encoders.cfg.patches, None),
        (SegmentKind.GEN_IMG_CTX, encoders.cfg.patches, None),
        (SegmentKind.SUBTASK, len(subtask_ids), None),
    ]
    anchor = encoders.encode_gen(sample.context_image)
    if include_keyframe:
        flow_image = make_flow_sample(
            encoders.encode_gen(sample.keyframe_image),
            tau_img,
            noise_init,
            anchor=anchor,
            rng=rng,
            sigma=sigma_rfg,
            zero_noise=zero_noise,
        )
        spec.append((SegmentKind.NOISY_KEY, encoders.cfg.patches, tau_img))
        if scheme == "complete" and include_actions:
            spec.append((SegmentKind.GT_KEY, encoders.cfg.patches, 1.0))
    if include_actions:
        if sample.actions is None:
            raise DataError("sample lacks action labels")
        flow_action = make_flow_sample(np.asarray(sample.actions, np.float32), tau_act, "naive", rng=rng)
        spec.append((SegmentKind.PROPRIO, 1, None))
        spec.append((SegmentKind.NOISY_ACT, flow_action.x1.shape[0], tau_act))

    slices = layout(spec)

    contents: list[Array] = [
        encoders.embed_tokens(instr_ids),
        encoders.encode_und(sample.context_image),
        encoders.project_gen(anchor),
        encoders.embed_tokens(subtask_ids),
    ]
    if include_keyframe:
        contents.append(encoders.project_gen(flow_image.interp))
        if scheme == "complete" and include_actions:
            contents.append(encoders.project_gen(flow_image.x1))
    if include_actions:
        contents.append(encoders.embed_proprio(sample.proprio))
        contents.append(encoders.embed_actions(flow_action.interp))

    # Drop zero-length segments (e.g. an ablated subtask block).
    keep = [i for i, s in enumerate(slices) if s.length > 0]
    slices = [slices[i] for i in keep]
    contents = [contents[i] for i in keep]

    rows = concat(contents, axis=0) if len(contents) > 1 else contents[0]
    mask = build_mask(slices, scheme)
    positions, taus, owners = segment_arrays(slices)

    ce_rows = np.array([], dtype=np.int64)
    ce_targets = np.array([], dtype=np.int64)
    if len(subtask_ids) >= 2:
        start = sum(s.length for s in slices[:3])  # rows before SUBTASK
        ce_rows = np.arange(start, start + len(subtask_ids) - 1)
        ce_targets = np.asarray(subtask_ids[1:], dtype=np.int64)
    ce_weights = (
        np.full(ce_rows.shape[0], 1.0 / ce_rows.shape[0], dtype=np.float32)
        if ce_rows.size
        else np.array([], dtype=np.float32)
    )

    return PackedSequence(
        rows=rows,
        mask=mask,
        segments=slices,
        positions=positions,
        taus=taus,
        owners=owners,
        scheme=scheme,
        ce_rows=ce_rows,
        ce_targets=ce_targets,
        ce_weights=ce_weights,
        image_target=flow_image.velocity if flow_image is not None else None,
        action_target=flow_action.velocity if flow_action is not None else None,
        flow_image=flow_image,
        flow_action=flow_action,
    )


def pack_batch(sequences: list[PackedSequence], max_rows: int | None = None) -> PackedSequence:
    """Concatenate samples with a block-diagonal mask; loss slices remapped
    so the packed loss equals the mean of per-sample losses."""
    if not sequences:
        raise ContractError("pack_batch needs at least one sequence")
    if len({s.scheme for s in sequences}) != 1:
        raise ContractError("cannot pack sequences built under different schemes")
    total = sum(s.n_rows for s in sequences)
    if max_rows is not None and total > max_rows:
        raise CapacityError(f"packed batch of {total} rows exceeds maximum {max_rows}")
    if len(sequences) == 1:
        return sequences[0]
    mask = np.zeros((total, total), dtype=bool)
    segments: list[SegmentSlice] = []
    ce_rows, ce_targets, ce_weights = [], [], []
    image_targets, action_targets = [], []
    offset = 0
    n_with_ce = sum(1 for s in sequences if s.ce_rows.size)
    for s in sequences:
        n = s.n_rows
        mask[offset : offset + n, offset : offset + n] = s.mask
        segments.extend(s.segments)
        if s.ce_rows.size:
            ce_rows.append(s.ce_rows + offset)
            ce_targets.append(s.ce_targets)
            ce_weights.append(np.full(s.ce_rows.shape[0], 1.0 / (s.ce_rows.shape[0] * n_with_ce), np.float32))
        if s.image_target is not None:
            image_targets.append(s.image_target)
        if s.action_target is not None:
            action_targets.append(s.action_target)
        offset += n
    rows = concat([s.rows for s in sequences], axis=0)
    return PackedSequence(
        rows=rows,
        mask=mask,
        segments=segments,
        positions=np.concatenate([s.positions for s in sequences]),
        taus=np.concatenate([s.taus for s in sequences]),
        owners=np.concatenate([s.owners for s in sequences]),
        scheme=sequences[0].scheme,
        ce_rows=np.concatenate(ce_rows) if ce_rows else np.array([], dtype=np.int64),
        ce_targets=np.concatenate(ce_targets) if ce_targets else np.array([], dtype=np.int64),
        ce_weights=np.concatenate(ce_weights) if ce_weights else np.array([], dtype=np.float32),
        image_target=np.concatenate(image_targets) if image_targets else None,
        action_target=np.concatenate(action_targets) if action_targets else None,
        n_samples=len(sequences),
    )
