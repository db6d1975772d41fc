"""Mixture-of-transformers backbone: shared self-attention over the unified
sequence with per-token expert parameters, plus an append-only KV cache.

Three experts (understanding / generation / action) own disjoint rows.
Attention is computed jointly: queries, keys and values are produced by the
owning expert's projections, then mixed in one masked softmax. The action
expert's FFN is narrowed to width*1 vs width*5.29 for the other two.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from ifm.encoding import BOS, EOS, EncoderConfig, Encoders, Vocabulary
from ifm.errors import CacheError, CapacityError, ContractError, DimensionError
from ifm.numerics import (
    Array,
    add,
    add_rows,
    concat,
    gather_rows,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    parameter,
    reshape,
    scale,
    split,
    transpose,
)
from ifm.numerics.random import RngStream
from ifm.sequence import (
    ACT,
    GEN,
    UND,
    PackedSequence,
    SegmentKind,
    SegmentSlice,
    build_mask_rows,
    new_segment,
    segment_arrays,
)

EXPERT_NAMES = ("und", "gen", "act")


@dataclass(frozen=True)
class MoTConfig:
    width: int = 64
    layers: int = 4
    heads: int = 4
    max_len: int = 256
    tau_dim: int = 32
    vocab_size: int = 35
    image_side: int = 16
    patch: int = 4
    action_dim: int = 3
    proprio_dim: int = 3
    ffn_mult: float = 5.29  # understanding/generation FFN ratio; action uses 1.0

    def __post_init__(self):
        if self.width % self.heads:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")
        if self.tau_dim % 2:
            raise DimensionError("tau_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def ffn_width(self, expert: int) -> int:
        return self.width if expert == ACT else math.ceil(self.ffn_mult * self.width)

    @property
    def latent_dim(self) -> int:
        return self.patch * self.patch * 3

    @property
    def patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_side=self.image_side,
            patch=self.patch,
            width=self.width,
            vocab_size=self.vocab_size,
            proprio_dim=self.proprio_dim,
            action_dim=self.action_dim,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def tau_features(taus: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of denoising time in [0, 1]."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half)).astype(np.float32)
    ang = np.asarray(taus, np.float32)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


class KVCache:
    """Per-layer keys/values for a frozen row prefix. Append-only; truncation
    returns to an earlier watermark by copying, never by mutating entries."""

    def __init__(self, config_hash: str, n_layers: int, scheme: str):
        self.config_hash = config_hash
        self.scheme = scheme
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers
        self.rows = 0
        self.segments: list[SegmentSlice] = []
        # Canonical positions for rows that are appended/re-evaluated later
        # in the chunk (noisy keyframe, proprio, noisy actions).
        self.ephemeral_positions: dict[SegmentKind, np.ndarray] = {}

    def append(self, ks: list[np.ndarray], vs: list[np.ndarray], slices: list[SegmentSlice]) -> None:
        n = sum(s.length for s in slices)
        for layer, (kn, vn) in enumerate(zip(ks, vs)):
            if self.k[layer] is None:
                self.k[layer], self.v[layer] = kn, vn
            else:
                self.k[layer] = np.concatenate([self.k[layer], kn], axis=1)
                self.v[layer] = np.concatenate([self.v[layer], vn], axis=1)
        self.segments.extend(slices)
        self.rows += n

    def truncate(self, n_rows: int) -> None:
        if n_rows > self.rows:
            raise CacheError(f"cannot truncate cache of {self.rows} rows to {n_rows}")
        if n_rows == self.rows:
            return
        for layer in range(len(self.k)):
            if self.k[layer] is not None:
                self.k[layer] = self.k[layer][:, :n_rows].copy()
                self.v[layer] = self.v[layer][:, :n_rows].copy()
        kept, acc = [], 0
        for s in self.segments:
            if acc + s.length <= n_rows:
                kept.append(s)
                acc += s.length
            elif acc < n_rows:
                keep_n = n_rows - acc
                kept.append(replace(s, length=keep_n, positions=s.positions[:keep_n]))
                acc = n_rows
        self.segments = kept
        self.rows = n_rows


class Model:
    """Encoders + expert banks + output heads over the unified sequence."""

    def __init__(self, cfg: MoTConfig, vocab: Vocabulary, seed: int = 0):
        if len(vocab) != cfg.vocab_size:
            raise DimensionError(f"vocab size {len(vocab)} != config {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        rng = RngStream(seed).child("model-init")
        self.encoders = Encoders(cfg.encoder_config(), rng.child("encoders"))
        d = cfg.width
        resid_scale = 0.02 / math.sqrt(2 * cfg.layers)

        def init(tag, shape, s=0.02):
            return parameter(rng.child(tag).normal(shape, sigma=s))

        p: dict[str, Array] = {"mot.pos": init("pos", (cfg.max_len, d), 0.01)}
        for e, name in enumerate(EXPERT_NAMES):
            ffn = cfg.ffn_width(e)
            for layer in range(cfg.layers):
                base = f"mot.{name}.{layer}"
                p[f"{base}.qkv.w"] = init(f"{base}.qkv", (d, 3 * d))
                p[f"{base}.qkv.b"] = parameter(np.zeros(3 * d, np.float32))
                p[f"{base}.out.w"] = init(f"{base}.out", (d, d), resid_scale)
                p[f"{base}.out.b"] = parameter(np.zeros(d, np.float32))
                p[f"{base}.ln1.g"] = parameter(np.ones(d, np.float32))
                p[f"{base}.ln1.b"] = parameter(np.zeros(d, np.float32))
                p[f"{base}.ln2.g"] = parameter(np.ones(d, np.float32))
                p[f"{base}.ln2.b"] = parameter(np.zeros(d, np.float32))
                p[f"{base}.ffn.w1"] = init(f"{base}.ffn1", (d, ffn))
                p[f"{base}.ffn.b1"] = parameter(np.zeros(ffn, np.float32))
                p[f"{base}.ffn.w2"] = init(f"{base}.ffn2", (ffn, d), resid_scale)
                p[f"{base}.ffn.b2"] = parameter(np.zeros(d, np.float32))
            p[f"mot.{name}.lnf.g"] = parameter(np.ones(d, np.float32))
            p[f"mot.{name}.lnf.b"] = parameter(np.zeros(d, np.float32))
            p[f"mot.{name}.tau.w"] = init(f"mot.{name}.tau", (cfg.tau_dim, d))
            p[f"mot.{name}.tau.b"] = parameter(np.zeros(d, np.float32))
        p["head.text.w"] = init("head.text", (d, cfg.vocab_size))
        p["head.text.b"] = parameter(np.zeros(cfg.vocab_size, np.float32))
        p["head.img.w"] = init("head.img", (d, cfg.latent_dim))
        p["head.img.b"] = parameter(np.zeros(cfg.latent_dim, np.float32))
        p["head.act.w"] = init("head.act", (d, cfg.action_dim))
        p["head.act.b"] = parameter(np.zeros(cfg.action_dim, np.float32))
        self.params = p
        self.denoise_forwards = {"image": 0, "action": 0}
        self._hash: str | None = None

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self) -> dict[str, Array]:
        merged = dict(self.encoders.params)
        merged.update(self.params)
        return merged

    def action_parameter_names(self) -> set[str]:
        """Everything only the action pathway touches (frozen in stage 1)."""
        return {
            name
            for name in self.named_parameters()
            if name.startswith(("mot.act.", "enc.proprio.", "enc.action.", "head.act."))
        }

    def expert_parameter_count(self, expert: int) -> int:
        prefix = f"mot.{EXPERT_NAMES[expert]}."
        return sum(p.size for n, p in self.params.items() if n.startswith(prefix))

    def config_hash(self) -> str:
        if self._hash is None:
            payload = json.dumps({"cfg": self.cfg.to_dict(), "vocab": self.vocab.words}, sort_keys=True)
            self._hash = hashlib.blake2s(payload.encode()).hexdigest()[:16]
        return self._hash

    def reset_counters(self) -> None:
        self.denoise_forwards = {"image": 0, "action": 0}

    def new_cache(self, scheme: str) -> KVCache:
        return KVCache(self.config_hash(), self.cfg.layers, scheme)

    # -- forward core -----------------------------------------------------------

    def _core(
        self,
        x: Array,
        owners: np.ndarray,
        positions: np.ndarray,
        taus: np.ndarray,
        mask: np.ndarray,
        cache: KVCache | None = None,
        commit_slices: list[SegmentSlice] | None = None,
    ) -> Array:
        commit = commit_slices is not None
        cfg = self.cfg
        p = self.params
        n = x.shape[0]
        if positions.size and positions.max() >= cfg.max_len:
            raise CapacityError(f"position {positions.max()} exceeds max length {cfg.max_len}")
        if mask.shape[0] != n:
            raise DimensionError(f"mask rows {mask.shape[0]} != input rows {n}")

        x = add(x, gather_rows(p["mot.pos"], positions))

        tau_rows = np.where(np.isfinite(taus))[0]
        if tau_rows.size:
            feats = tau_features(taus[tau_rows], cfg.tau_dim)
            for e, name in enumerate(EXPERT_NAMES):
                mine = tau_rows[owners[tau_rows] == e]
                if mine.size:
                    emb = add(
                        matmul(Array(feats[owners[tau_rows] == e]), p[f"mot.{name}.tau.w"]),
                        p[f"mot.{name}.tau.b"],
                    )
                    x = add_rows(x, emb, mine)

        idx = [np.where(owners == e)[0] for e in range(3)]
        present = [e for e in range(3) if idx[e].size]
        order = np.concatenate([idx[e] for e in present])
        ordered = bool(np.array_equal(order, np.arange(n)))
        sizes = [idx[e].size for e in present]
        if not ordered:
            inv = np.empty(n, dtype=np.int64)
            inv[order] = np.arange(n)

        if len(present) == 1:
            # One expert owns every row (typical for cached extensions).
            only = EXPERT_NAMES[present[0]]

            def per_expert(rows: Array, f) -> Array:
                return f(rows, only)

        elif ordered:
            # Rows are grouped by owner in order: route by slicing.
            def per_expert(rows: Array, f) -> Array:
                pieces = split(rows, sizes, axis=0)
                return concat([f(piece, EXPERT_NAMES[e]) for piece, e in zip(pieces, present)], axis=0)

        else:

            def per_expert(rows: Array, f) -> Array:
                pieces = [f(gather_rows(rows, idx[e]), EXPERT_NAMES[e]) for e in present]
                return gather_rows(concat(pieces, axis=0), inv)

        new_ks: list[np.ndarray] = []
        new_vs: list[np.ndarray] = []
        scale_f = 1.0 / math.sqrt(cfg.head_dim)
        for layer in range(cfg.layers):

            def attn_proj(rows, name, layer=layer):
                normed = layer_norm(rows, p[f"mot.{name}.{layer}.ln1.g"], p[f"mot.{name}.{layer}.ln1.b"])
                return add(matmul(normed, p[f"mot.{name}.{layer}.qkv.w"]), p[f"mot.{name}.{layer}.qkv.b"])

            qkv = per_expert(x, attn_proj)
            q, k, v = split(qkv, [cfg.width] * 3, axis=1)

            def heads_first(t: Array) -> Array:
                return transpose(reshape(t, (n, cfg.heads, cfg.head_dim)), (1, 0, 2))

            q, k_new, v_new = heads_first(q), heads_first(k), heads_first(v)
            if cache is not None and cache.rows:
                k_all = concat([Array(cache.k[layer]), k_new], axis=1)
                v_all = concat([Array(cache.v[layer]), v_new], axis=1)
            else:
                k_all, v_all = k_new, v_new
            if commit:
                new_ks.append(k_new.data)
                new_vs.append(v_new.data)
            scores = scale(matmul(q, transpose(k_all, (0, 2, 1))), scale_f)
            att = masked_softmax(scores, mask[None, :, :])
            ctx = matmul(att, v_all)
            ctx = reshape(transpose(ctx, (1, 0, 2)), (n, cfg.width))

            def out_proj(rows, name, layer=layer):
                return add(matmul(rows, p[f"mot.{name}.{layer}.out.w"]), p[f"mot.{name}.{layer}.out.b"])

            x = add(x, per_expert(ctx, out_proj))

            def ffn(rows, name, layer=layer):
                normed = layer_norm(rows, p[f"mot.{name}.{layer}.ln2.g"], p[f"mot.{name}.{layer}.ln2.b"])
                h = gelu(add(matmul(normed, p[f"mot.{name}.{layer}.ffn.w1"]), p[f"mot.{name}.{layer}.ffn.b1"]))
                return add(matmul(h, p[f"mot.{name}.{layer}.ffn.w2"]), p[f"mot.{name}.{layer}.ffn.b2"])

            x = add(x, per_expert(x, ffn))

        def final_norm(rows, name):
            return layer_norm(rows, p[f"mot.{name}.lnf.g"], p[f"mot.{name}.lnf.b"])

        hidden = per_expert(x, final_norm)
        if commit:
            assert cache is not None
            cache.append(new_ks, new_vs, commit_slices)
        return hidden

    def forward_full(self, packed: PackedSequence) -> Array:
        """Uncached forward over an assembled sequence; returns hidden rows."""
        return self._core(packed.rows, packed.owners, packed.positions, packed.taus, packed.mask)

    def extend(self, cache: KVCache, slices: list[SegmentSlice], contents: list[Array], commit: bool = False) -> Array:
        """Run new rows against the cache; optionally append their K/V."""
        if cache.config_hash != self.config_hash():
            raise CacheError("cache was built for a different model configuration")
        kinds = {s.kind for s in slices}
        if SegmentKind.NOISY_KEY in kinds:
            self.denoise_forwards["image"] += 1
        if SegmentKind.NOISY_ACT in kinds:
            self.denoise_forwards["action"] += 1
        x = concat(contents, axis=0) if len(contents) > 1 else contents[0]
        positions, taus, owners = segment_arrays(slices)
        mask = build_mask_rows(slices, cache.segments + list(slices), cache.scheme)
        return self._core(
            x, owners, positions, taus, mask, cache=cache, commit_slices=list(slices) if commit else None
        )

    # -- heads -------------------------------------------------------------------

    def text_logits(self, rows: Array) -> Array:
        return add(matmul(rows, self.params["head.text.w"]), self.params["head.text.b"])

    def image_velocity(self, rows: Array) -> Array:
        return add(matmul(rows, self.params["head.img.w"]), self.params["head.img.b"])

    def action_velocity(self, rows: Array) -> Array:
        return add(matmul(rows, self.params["head.act.w"]), self.params["head.act.b"])

    # -- autoregressive subtask decoding ------------------------------------------

    def decode_subtask(self, cache: KVCache, position_start: int, max_words: int = 8) -> list[int]:
        """Greedy decode; always BOS ... EOS, committed to the cache."""
        uid_slice = new_segment(SegmentKind.SUBTASK, 1)
        ids = [BOS]
        offset = 0
        while True:
            slc = SegmentSlice(
                SegmentKind.SUBTASK,
                1,
                uid=uid_slice.uid,
                offset=offset,
                positions=np.array([position_start + offset], dtype=np.int64),
            )
            hidden = self.extend(cache, [slc], [self.encoders.embed_tokens([ids[offset]])], commit=True)
            if ids[offset] == EOS:
                break
            if offset + 1 > max_words:
                nxt = EOS
            else:
                nxt = int(np.argmax(self.text_logits(hidden).data[0]))
                if nxt == BOS:  # never emit a second BOS
                    nxt = EOS
            ids.append(nxt)
            offset += 1
        return ids

    # -- denoise-row evaluation over a frozen cache ---------------------------------

    def _key_slice(self, cache: KVCache, tau: float) -> SegmentSlice:
        pos = cache.ephemeral_positions.get(SegmentKind.NOISY_KEY)
        if pos is None:
            raise CacheError("cache has no layout slot for noisy keyframe rows")
        return replace(new_segment(SegmentKind.NOISY_KEY, self.cfg.patches, tau), positions=pos)

    def _act_slice(self, cache: KVCache, length: int, tau: float) -> SegmentSlice:
        pos = cache.ephemeral_positions.get(SegmentKind.NOISY_ACT)
        if pos is None:
            raise CacheError("cache has no layout slot for action rows")
        return replace(new_segment(SegmentKind.NOISY_ACT, length, tau), positions=pos[:length])

    def commit_noisy_key(self, cache: KVCache, latent: np.ndarray, tau: float) -> None:
        self.extend(cache, [self._key_slice(cache, tau)], [self.encoders.project_gen(latent)], commit=True)

    def commit_gt_key(self, cache: KVCache, latent: np.ndarray) -> None:
        pos = cache.ephemeral_positions.get(SegmentKind.GT_KEY)
        if pos is None:
            raise CacheError("cache has no layout slot for the denoised keyframe")
        slc = replace(new_segment(SegmentKind.GT_KEY, self.cfg.patches, 1.0), positions=pos)
        self.extend(cache, [slc], [self.encoders.project_gen(latent)], commit=True)

    def commit_proprio(self, cache: KVCache, vec: np.ndarray) -> None:
        pos = cache.ephemeral_positions.get(SegmentKind.PROPRIO)
        if pos is None:
            raise CacheError("cache has no layout slot for proprio rows")
        slc = replace(new_segment(SegmentKind.PROPRIO, 1), positions=pos)
        self.extend(cache, [slc], [self.encoders.embed_proprio(vec)], commit=True)

    def image_velocity_rows(self, cache: KVCache, latent: np.ndarray, tau: float) -> np.ndarray:
        hidden = self.extend(cache, [self._key_slice(cache, tau)], [self.encoders.project_gen(latent)])
        return self.image_velocity(hidden).data

    def action_velocity_rows(self, cache: KVCache, actions: np.ndarray, tau: float) -> np.ndarray:
        slc = self._act_slice(cache, actions.shape[0], tau)
        hidden = self.extend(cache, [slc], [self.encoders.embed_actions(actions)])
        return self.action_velocity(hidden).data

    def joint_velocity_rows(
        self, cache: KVCache, latent: np.ndarray, actions: np.ndarray, tau: float
    ) -> tuple[np.ndarray, np.ndarray]:
        """One fused pass over [noisy image rows; noisy action rows]."""
        key = self._key_slice(cache, tau)
        act = self._act_slice(cache, actions.shape[0], tau)
        hidden = self.extend(
            cache, [key, act], [self.encoders.project_gen(latent), self.encoders.embed_actions(actions)]
        )
        img_rows, act_rows = split(hidden, [key.length, act.length], axis=0)
        return self.image_velocity(img_rows).data, self.action_velocity(act_rows).data
