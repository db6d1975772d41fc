"""Tokenization and the dual visual pathways.

Understanding rows come from a learned linear map over image patches plus a
learned 2D positional embedding. Generation latents are the raw normalized
pixels of each patch (an identity latent, exactly invertible by
unpatchify); a separate learned map projects them to model width when they
enter the sequence. The two pathways share no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ifm.blockworld.grammar import ALL_WORDS
from ifm.errors import DimensionError, VocabularyError
from ifm.numerics import Array, add, embedding, matmul, parameter
from ifm.numerics.random import RngStream

PAD, BOS, EOS, SEP = 0, 1, 2, 3
SPECIAL_WORDS = ("<pad>", "<bos>", "<eos>", "<sep>")


class Vocabulary:
    """Closed word-level vocabulary with fixed special ids 0-3."""

    def __init__(self, words: tuple[str, ...] | None = None):
        words = tuple(words) if words is not None else SPECIAL_WORDS + ALL_WORDS
        if words[:4] != SPECIAL_WORDS:
            raise VocabularyError("vocabulary must start with the four special tokens")
        if len(words) != len(set(words)):
            raise VocabularyError("duplicate words in vocabulary")
        if len(words) > 128:
            raise VocabularyError(f"vocabulary too large: {len(words)}")
        self.words = words
        self._ids = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, text) -> list[int]:
        """Words (or a whitespace-joined string) -> BOS ... EOS ids."""
        words = text.split() if isinstance(text, str) else list(text)
        ids = [BOS]
        for w in words:
            i = self._ids.get(w)
            if i is None:
                raise VocabularyError(f"unknown word {w!r}")
            ids.append(i)
        ids.append(EOS)
        return ids

    def detokenize(self, ids) -> str:
        words = []
        for i in ids:
            if i in (PAD, BOS, SEP):
                continue
            if i == EOS:
                break
            if not 0 <= i < len(self.words):
                raise VocabularyError(f"token id {i} out of range")
            words.append(self.words[i])
        return " ".join(words)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(S, S, 3) -> (P, patch*patch*3), row-major patches."""
    h, w, c = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {image.shape} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(gh, patch, gw, patch, c)
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4)).reshape(gh * gw, patch * patch * c)


def unpatchify(latent: np.ndarray, patch: int, side: int) -> np.ndarray:
    """Exact inverse of patchify for square images."""
    g = side // patch
    if latent.shape != (g * g, patch * patch * 3):
        raise DimensionError(f"latent {latent.shape} does not match side {side}, patch {patch}")
    x = latent.reshape(g, g, patch, patch, 3)
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4)).reshape(side, side, 3)


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 16
    patch: int = 4
    width: int = 64
    vocab_size: int = len(SPECIAL_WORDS + ALL_WORDS)
    proprio_dim: int = 3
    action_dim: int = 3

    @property
    def grid(self) -> int:
        return self.image_side // self.patch

    @property
    def patches(self) -> int:
        return self.grid * self.grid

    @property
    def latent_dim(self) -> int:
        return self.patch * self.patch * 3


class Encoders:
    """All learned input maps: text, dual visual pathways, proprio, actions."""

    def __init__(self, cfg: EncoderConfig, rng: RngStream):
        self.cfg = cfg
        d, lat, g = cfg.width, cfg.latent_dim, cfg.grid

        def init(tag, shape, s=0.02):
            return parameter(rng.child(tag).normal(shape, sigma=s))

        self.params: dict[str, Array] = {
            "enc.tok": init("tok", (cfg.vocab_size, d)),
            "enc.und.w": init("und.w", (lat, d)),
            "enc.und.b": parameter(np.zeros(d, np.float32)),
            "enc.und.pos_row": init("und.pr", (g, d), 0.01),
            "enc.und.pos_col": init("und.pc", (g, d), 0.01),
            "enc.gen.w": init("gen.w", (lat, d)),
            "enc.gen.b": parameter(np.zeros(d, np.float32)),
            "enc.gen.pos_row": init("gen.pr", (g, d), 0.01),
            "enc.gen.pos_col": init("gen.pc", (g, d), 0.01),
            "enc.proprio.w": init("prop.w", (cfg.proprio_dim, d)),
            "enc.proprio.b": parameter(np.zeros(d, np.float32)),
            "enc.action.w": init("act.w", (cfg.action_dim, d)),
            "enc.action.b": parameter(np.zeros(d, np.float32)),
        }
        rows = np.arange(cfg.patches) // g
        cols = np.arange(cfg.patches) % g
        self._patch_rows = rows
        self._patch_cols = cols

    def embed_tokens(self, ids) -> Array:
        return embedding(self.params["enc.tok"], np.asarray(ids, dtype=np.int64))

    def _check_image(self, image: np.ndarray) -> None:
        side = self.cfg.image_side
        if image.shape != (side, side, 3):
            raise DimensionError(f"expected image ({side},{side},3), got {image.shape}")

    def encode_und(self, image: np.ndarray) -> Array:
        """Understanding rows: learned patch projection + 2D positions."""
        self._check_image(image)
        patches = Array(patchify(image.astype(np.float32), self.cfg.patch))
        out = add(matmul(patches, self.params["enc.und.w"]), self.params["enc.und.b"])
        pos = add(
            embedding(self.params["enc.und.pos_row"], self._patch_rows),
            embedding(self.params["enc.und.pos_col"], self._patch_cols),
        )
        return add(out, pos)

    def encode_gen(self, image: np.ndarray) -> np.ndarray:
        """Generation latent: identity patchify, decodable by unpatchify alone."""
        self._check_image(image)
        return patchify(image.astype(np.float32), self.cfg.patch)

    def decode_gen(self, latent: np.ndarray) -> np.ndarray:
        return unpatchify(latent, self.cfg.patch, self.cfg.image_side)

    def project_gen(self, latent) -> Array:
        """Latent rows -> model width, with the generation pathway's positions."""
        latent = latent if isinstance(latent, Array) else Array(np.asarray(latent, dtype=np.float32))
        if latent.shape != (self.cfg.patches, self.cfg.latent_dim):
            raise DimensionError(f"latent shape {latent.shape} unexpected")
        out = add(matmul(latent, self.params["enc.gen.w"]), self.params["enc.gen.b"])
        pos = add(
            embedding(self.params["enc.gen.pos_row"], self._patch_rows),
            embedding(self.params["enc.gen.pos_col"], self._patch_cols),
        )
        return add(out, pos)

    def embed_proprio(self, vec: np.ndarray) -> Array:
        v = Array(np.asarray(vec, dtype=np.float32).reshape(1, self.cfg.proprio_dim))
        return add(matmul(v, self.params["enc.proprio.w"]), self.params["enc.proprio.b"])

    def embed_actions(self, chunk) -> Array:
        chunk = chunk if isinstance(chunk, Array) else Array(np.asarray(chunk, dtype=np.float32))
        if chunk.ndim != 2 or chunk.shape[1] != self.cfg.action_dim:
            raise DimensionError(f"action chunk shape {chunk.shape} unexpected")
        return add(matmul(chunk, self.params["enc.action.w"]), self.params["enc.action.b"])
