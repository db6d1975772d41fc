"""Episode container and the binary dataset format.

Layout (all little-endian):
    magic "IFMD" | version u16 | episode count u32 | img h,w,c u16 each
    per episode:
        instruction token count u16, token ids u16[]
        step count u32
        per step: image f32[h*w*c], proprio f32[3], action f32[3]
        segment count u16
        per segment: token count u16, token ids u16[], start u32, keyframe u32
        success u8
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from ifm.errors import DataError, FormatError

MAGIC = b"IFMD"
VERSION = 1


@dataclass
class Step:
    image: np.ndarray  # (h, w, 3) float32 in [-1, 1]
    proprio: np.ndarray  # (3,)
    action: np.ndarray  # (3,)


@dataclass
class SegmentAnnotation:
    tokens: list[int]  # subtask token ids, BOS/EOS framed
    start: int
    keyframe: int


@dataclass
class Episode:
    instruction: list[int]  # token ids, BOS/EOS framed
    steps: list[Step]
    segments: list[SegmentAnnotation]
    success: bool

    def __len__(self) -> int:
        return len(self.steps)

    def segment_end(self, i: int) -> int:
        return self.segments[i + 1].start if i + 1 < len(self.segments) else len(self.steps)

    def segment_of(self, t: int) -> int:
        for i, seg in enumerate(self.segments):
            if seg.start <= t < self.segment_end(i):
                return i
        raise DataError(f"step {t} outside all segments")

    def validate(self) -> None:
        if not self.segments or self.segments[0].start != 0:
            raise DataError("segments must start at 0")
        for i, seg in enumerate(self.segments):
            end = self.segment_end(i)
            if not (seg.start < end):
                raise DataError(f"segment {i} is empty")
            if not (seg.start <= seg.keyframe < end):
                raise DataError(f"keyframe {seg.keyframe} outside segment [{seg.start},{end})")
        if self.segment_end(len(self.segments) - 1) != len(self.steps):
            raise DataError("segments do not tile the episode")


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise OSError(f"truncated dataset file: wanted {n} bytes, got {len(data)}")
    return data


def _write_tokens(f, tokens: list[int]) -> None:
    f.write(struct.pack("<H", len(tokens)))
    f.write(struct.pack(f"<{len(tokens)}H", *tokens))


def _read_tokens(f) -> list[int]:
    (count,) = struct.unpack("<H", _read_exact(f, 2))
    return list(struct.unpack(f"<{count}H", _read_exact(f, 2 * count)))


def write_dataset(episodes: Iterable[Episode], path: str) -> int:
    """Write episodes; returns the count. Episodes may be a generator."""
    count = 0
    img_shape: tuple[int, int, int] | None = None
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        count_pos = f.tell()
        f.write(struct.pack("<I", 0))
        shape_pos = f.tell()
        f.write(struct.pack("<HHH", 0, 0, 0))
        for ep in episodes:
            if img_shape is None:
                img_shape = tuple(ep.steps[0].image.shape)
            _write_tokens(f, ep.instruction)
            f.write(struct.pack("<I", len(ep.steps)))
            for s in ep.steps:
                if tuple(s.image.shape) != img_shape:
                    raise DataError(f"inconsistent image shape {s.image.shape} vs {img_shape}")
                f.write(np.ascontiguousarray(s.image, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.proprio, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(s.action, dtype="<f4").tobytes())
            f.write(struct.pack("<H", len(ep.segments)))
            for seg in ep.segments:
                _write_tokens(f, seg.tokens)
                f.write(struct.pack("<II", seg.start, seg.keyframe))
            f.write(struct.pack("<B", 1 if ep.success else 0))
            count += 1
        f.seek(count_pos)
        f.write(struct.pack("<I", count))
        if img_shape is not None:
            f.seek(shape_pos)
            f.write(struct.pack("<HHH", *img_shape))
    return count


def stream_dataset(path: str) -> Iterator[Episode]:
    """Yield episodes one at a time without holding the whole file."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        h, w, c = struct.unpack("<HHH", _read_exact(f, 6))
        img_floats = h * w * c
        for _ in range(count):
            instruction = _read_tokens(f)
            (steps_n,) = struct.unpack("<I", _read_exact(f, 4))
            steps = []
            for _ in range(steps_n):
                image = np.frombuffer(_read_exact(f, 4 * img_floats), dtype="<f4").reshape(h, w, c).copy()
                prop = np.frombuffer(_read_exact(f, 12), dtype="<f4").copy()
                action = np.frombuffer(_read_exact(f, 12), dtype="<f4").copy()
                steps.append(Step(image, prop, action))
            (seg_n,) = struct.unpack("<H", _read_exact(f, 2))
            segments = []
            for _ in range(seg_n):
                tokens = _read_tokens(f)
                start, keyframe = struct.unpack("<II", _read_exact(f, 8))
                segments.append(SegmentAnnotation(tokens, start, keyframe))
            (ok,) = struct.unpack("<B", _read_exact(f, 1))
            yield Episode(instruction, steps, segments, bool(ok))


def read_dataset(path: str) -> list[Episode]:
    return list(stream_dataset(path))
