"""Shared-weight Transformer trunk.

One parameter set serves two roles: a bidirectional encoder over the
dialogue/state sequence, and a left-to-right decoder whose attention keys
and values are the concatenation of re-used per-layer encoder states and
the decoder's own hidden states. There is no separate cross-attention
stack; layer l of the decoder attends into layer l-1 of the encoder
(level 0 being the embedding output).

Blocks are post-LN: h = LN(x + attn), out = LN(h + ffn(h)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_INF, Parameter, Tensor
from .errors import ContractError, DimensionError, InvalidMaskError, VocabularyError


@dataclass(frozen=True)
class ModelConfig:
    """Trunk hyperparameters. Frozen so a config can key a checkpoint."""

    vocab_size: int
    d_hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_positions: int = 128
    n_token_types: int = 2
    layer_norm_eps: float = 1e-5
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for field in ("vocab_size", "d_hidden", "n_layers", "n_heads", "d_ff",
                      "max_positions", "n_token_types"):
            if getattr(self, field) <= 0:
                raise ContractError(f"{field} must be positive, got {getattr(self, field)}")
        if self.d_hidden % self.n_heads != 0:
            raise ContractError(
                f"d_hidden ({self.d_hidden}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.layer_norm_eps <= 0 or self.init_std <= 0:
            raise ContractError("layer_norm_eps and init_std must be positive")

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_hidden": self.d_hidden,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_positions": self.max_positions,
            "n_token_types": self.n_token_types,
            "layer_norm_eps": self.layer_norm_eps,
            "init_std": self.init_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class AttentionMask:
    """Immutable additive mask: 0.0 marks a visible entry, NEG_INF a hidden one."""

    __slots__ = ("values",)

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidMaskError(f"mask must be 2-D, got shape {arr.shape}")
        if not np.isin(arr, (0.0, NEG_INF)).all():
            raise InvalidMaskError("mask entries must be exactly 0 or the NEG_INF constant")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("AttentionMask is immutable")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def visible(self) -> np.ndarray:
        """Boolean view: True where attention is allowed."""
        return self.values == 0.0


def build_encoder_mask(n: int) -> AttentionMask:
    """Fully bidirectional: every position sees every position."""
    if n <= 0:
        raise ContractError(f"encoder mask length must be positive, got {n}")
    return AttentionMask(np.zeros((n, n)))


def build_decoder_mask(n_reuse: int, n_dec: int) -> AttentionMask:
    """Decoder rows over [reused states | decoder states] columns.

    Re-used encoder states are visible to every decoder position. Within
    the decoder block, coordinates are decoder-relative: row i sees
    decoder column j iff j <= i.
    """
    if n_dec <= 0:
        raise ContractError(f"decoder length must be positive, got {n_dec}")
    if n_reuse < 0:
        raise ContractError(f"re-use length must be non-negative, got {n_reuse}")
    m = np.full((n_dec, n_reuse + n_dec), NEG_INF)
    m[:, :n_reuse] = 0.0
    rows, cols = np.tril_indices(n_dec)
    m[rows, n_reuse + cols] = 0.0
    return AttentionMask(m)


def _linear(x: Tensor, w: Parameter, b: Parameter | None = None) -> Tensor:
    out = ad.matmul(x, w.tensor)
    return ad.add(out, b.tensor) if b is not None else out


def multi_head_attention(
    query_src: Tensor,
    kv_src: Tensor,
    heads: list[tuple[Parameter, Parameter, Parameter]],
    w_out: Parameter,
    b_out: Parameter,
    mask: AttentionMask,
    d_head: int,
) -> Tensor:
    """Scaled dot-product attention with per-head projection matrices.

    Queries come from `query_src`, keys/values from `kv_src` (identical for
    self-attention; decoder passes a concatenated matrix). The mask must
    cover exactly (len(query_src), len(kv_src)).
    """
    if mask.shape != (query_src.shape[0], kv_src.shape[0]):
        raise DimensionError(
            f"mask shape {mask.shape} does not cover queries {query_src.shape[0]} "
            f"x keys {kv_src.shape[0]}"
        )
    inv_sqrt_dk = 1.0 / np.sqrt(d_head)
    outputs = []
    for wq, wk, wv in heads:
        q = _linear(query_src, wq)
        k = _linear(kv_src, wk)
        v = _linear(kv_src, wv)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt_dk)
        att = ad.masked_softmax(scores, mask)
        outputs.append(ad.matmul(att, v))
    return _linear(ad.concat_cols(outputs), w_out, b_out)


class TransformerBlock:
    """One post-LN block: masked attention then a GELU feed-forward."""

    def __init__(self, config: ModelConfig, index: int, rng: np.random.Generator):
        d, dk, ff = config.d_hidden, config.d_head, config.d_ff
        std = config.init_std
        pre = f"block{index}"

        def normal(name, shape):
            return Parameter(name, rng.normal(0.0, std, shape))

        self.heads = [
            (
                normal(f"{pre}.attn.q{h}", (d, dk)),
                normal(f"{pre}.attn.k{h}", (d, dk)),
                normal(f"{pre}.attn.v{h}", (d, dk)),
            )
            for h in range(config.n_heads)
        ]
        self.w_out = normal(f"{pre}.attn.out.w", (d, d))
        self.b_out = Parameter(f"{pre}.attn.out.b", np.zeros(d))
        self.ln_attn_gain = Parameter(f"{pre}.ln_attn.gain", np.ones(d))
        self.ln_attn_bias = Parameter(f"{pre}.ln_attn.bias", np.zeros(d))
        self.w1 = normal(f"{pre}.ffn.w1", (d, ff))
        self.b1 = Parameter(f"{pre}.ffn.b1", np.zeros(ff))
        self.w2 = normal(f"{pre}.ffn.w2", (ff, d))
        self.b2 = Parameter(f"{pre}.ffn.b2", np.zeros(d))
        self.ln_ffn_gain = Parameter(f"{pre}.ln_ffn.gain", np.ones(d))
        self.ln_ffn_bias = Parameter(f"{pre}.ln_ffn.bias", np.zeros(d))
        self.eps = config.layer_norm_eps
        self.d_head = dk

    def parameters(self) -> list[Parameter]:
        out = []
        for wq, wk, wv in self.heads:
            out += [wq, wk, wv]
        out += [self.w_out, self.b_out, self.ln_attn_gain, self.ln_attn_bias,
                self.w1, self.b1, self.w2, self.b2, self.ln_ffn_gain, self.ln_ffn_bias]
        return out

    def __call__(self, x: Tensor, mask: AttentionMask, kv_prefix: Tensor | None = None) -> Tensor:
        kv = x if kv_prefix is None else ad.concat_rows([kv_prefix, x])
        att = multi_head_attention(x, kv, self.heads, self.w_out, self.b_out, mask, self.d_head)
        h = ad.layer_norm(ad.add(x, att), self.ln_attn_gain.tensor, self.ln_attn_bias.tensor,
                          self.eps)
        ff = _linear(ad.gelu(_linear(h, self.w1, self.b1)), self.w2, self.b2)
        return ad.layer_norm(ad.add(h, ff), self.ln_ffn_gain.tensor, self.ln_ffn_bias.tensor,
                             self.eps)


class SharedTransformer:
    """Embedding tables plus a stack of blocks, driven in two modes.

    `encoder_pass` runs bidirectionally and returns every intermediate
    state (levels 0..n_layers, level 0 = embedding output) so a decoder
    can re-attend into them. `decoder_pass` runs the same blocks
    left-to-right, each layer prepending its matching encoder level to
    the keys/values.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        std = config.init_std
        d = config.d_hidden
        self.token_emb = Parameter("embed.token", rng.normal(0.0, std, (config.vocab_size, d)))
        self.pos_emb = Parameter("embed.position", rng.normal(0.0, std, (config.max_positions, d)))
        self.type_emb = Parameter("embed.type", rng.normal(0.0, std, (config.n_token_types, d)))
        self.embed_ln_gain = Parameter("embed.ln.gain", np.ones(d))
        self.embed_ln_bias = Parameter("embed.ln.bias", np.zeros(d))
        self.blocks = [TransformerBlock(config, i, rng) for i in range(config.n_layers)]

    def parameters(self) -> list[Parameter]:
        out = [self.token_emb, self.pos_emb, self.type_emb,
               self.embed_ln_gain, self.embed_ln_bias]
        for b in self.blocks:
            out += b.parameters()
        return out

    def embed_input(self, token_ids, position_ids, type_ids) -> Tensor:
        tok = np.asarray(token_ids, dtype=np.intp)
        pos = np.asarray(position_ids, dtype=np.intp)
        typ = np.asarray(type_ids, dtype=np.intp)
        if not (tok.shape == pos.shape == typ.shape) or tok.ndim != 1 or tok.size == 0:
            raise ContractError(
                f"id sequences must be equal-length non-empty 1-D: "
                f"{tok.shape}, {pos.shape}, {typ.shape}"
            )
        cfg = self.config
        for name, ids, limit in (("token", tok, cfg.vocab_size),
                                 ("position", pos, cfg.max_positions),
                                 ("type", typ, cfg.n_token_types)):
            if ids.min() < 0 or ids.max() >= limit:
                bad = ids[(ids < 0) | (ids >= limit)][0]
                raise VocabularyError(f"{name} id {bad} outside [0, {limit})")
        e = ad.add(
            ad.add(ad.gather_rows(self.token_emb.tensor, tok),
                   ad.gather_rows(self.pos_emb.tensor, pos)),
            ad.gather_rows(self.type_emb.tensor, typ),
        )
        return ad.layer_norm(e, self.embed_ln_gain.tensor, self.embed_ln_bias.tensor,
                             self.config.layer_norm_eps)

    def encoder_pass(self, x: Tensor, mask: AttentionMask) -> list[Tensor]:
        """Run all blocks bidirectionally; returns n_layers + 1 states."""
        states = [x]
        for block in self.blocks:
            states.append(block(states[-1], mask))
        return states

    def decoder_pass(self, y: Tensor, reuse_states: list[Tensor], mask: AttentionMask) -> Tensor:
        """Run all blocks causally; block i prepends reuse_states[i] to its kv.

        `reuse_states` holds the re-used encoder levels 0..n_layers-1, each
        already restricted to the selected positions. All entries must share
        one row count, and the mask covers (n_dec, n_reuse + n_dec).
        """
        if len(reuse_states) != len(self.blocks):
            raise ContractError(
                f"need one re-use state per layer: got {len(reuse_states)}, "
                f"expected {len(self.blocks)}"
            )
        n_reuse = reuse_states[0].shape[0]
        for i, s in enumerate(reuse_states):
            if s.shape[0] != n_reuse:
                raise DimensionError(
                    f"re-use state {i} has {s.shape[0]} rows, expected {n_reuse}"
                )
        h = y
        for block, prefix in zip(self.blocks, reuse_states):
            h = block(h, mask, kv_prefix=prefix)
        return h
