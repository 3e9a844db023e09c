"""Compact encoder-decoder transformer with a keyword scoring head.

Encoder: stride-2 frame downsampling (a kernel-2 convolution realized as
reshape + matmul), sinusoidal positions, pre-norm self-attention blocks.
Decoder: token embeddings plus optional learned soft-prefix rows, causal
self-attention over [prefix, prompt, text], cross-attention to the
encoder output, and an output projection.  The keyword head pools the
keyword's token embeddings into a query, attends over the encoder
output, and scores presence with a small MLP.

Parameters live in four plain name->Tensor dicts (encoder / decoder /
kws / prefix) so training regimes can freeze each group independently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import KwbiasError
from .rng import stream
from .text import N_RESERVED


class ModelError(KwbiasError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 256
    vocab_size: int = 200
    n_mels: int = 80
    max_src_frames: int = 1024
    max_tgt_len: int = 128

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 1:
                raise ModelError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size <= N_RESERVED:
            raise ModelError(f"vocab_size {self.vocab_size} leaves no room for text units")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: dict[str, Tensor]
    decoder: dict[str, Tensor]
    kws: dict[str, Tensor]
    prefix: dict[str, Tensor] = field(default_factory=dict)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {"encoder": self.encoder, "decoder": self.decoder, "kws": self.kws, "prefix": self.prefix}

    def all_tensors(self):
        for gname, group in self.groups().items():
            for name, t in sorted(group.items()):
                yield f"{gname}.{name}", t


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, std: float | None = None) -> np.ndarray:
    s = (1.0 / np.sqrt(fan_in)) if std is None else std
    return rng.normal(0.0, s, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameter groups; every tensor gets its own named rng stream."""

    def make(group: str, name: str, build) -> tuple[str, Tensor]:
        return name, Tensor(build(stream(seed, "init", group, name)))

    d, ff, v = config.d_model, config.d_ff, config.vocab_size

    encoder: dict[str, Tensor] = {}
    encoder.update([make("encoder", "in_w", lambda r: _linear_init(r, 2 * config.n_mels, d))])
    encoder.update([make("encoder", "in_b", lambda r: np.zeros(d))])
    for i in range(config.n_enc_layers):
        p = f"l{i}"
        for w in ("wq", "wk", "wv", "wo"):
            encoder.update([make("encoder", f"{p}.attn.{w}", lambda r: _linear_init(r, d, d))])
            if w != "wk":  # key bias cancels inside the softmax
                encoder.update([make("encoder", f"{p}.attn.b{w[-1]}", lambda r: np.zeros(d))])
        encoder.update(
            [
                make("encoder", f"{p}.ln1.g", lambda r: np.ones(d)),
                make("encoder", f"{p}.ln1.b", lambda r: np.zeros(d)),
                make("encoder", f"{p}.ff.w1", lambda r: _linear_init(r, d, ff)),
                make("encoder", f"{p}.ff.b1", lambda r: np.zeros(ff)),
                make("encoder", f"{p}.ff.w2", lambda r: _linear_init(r, ff, d)),
                make("encoder", f"{p}.ff.b2", lambda r: np.zeros(d)),
                make("encoder", f"{p}.ln2.g", lambda r: np.ones(d)),
                make("encoder", f"{p}.ln2.b", lambda r: np.zeros(d)),
            ]
        )
    encoder.update(
        [
            make("encoder", "ln_out.g", lambda r: np.ones(d)),
            make("encoder", "ln_out.b", lambda r: np.zeros(d)),
        ]
    )

    decoder: dict[str, Tensor] = {}
    decoder.update([make("decoder", "embed", lambda r: r.normal(0.0, 1.0, size=(v, d)))])
    for i in range(config.n_dec_layers):
        p = f"l{i}"
        for section in ("attn", "cross"):
            for w in ("wq", "wk", "wv", "wo"):
                decoder.update([make("decoder", f"{p}.{section}.{w}", lambda r: _linear_init(r, d, d))])
                if w != "wk":
                    decoder.update([make("decoder", f"{p}.{section}.b{w[-1]}", lambda r: np.zeros(d))])
        decoder.update(
            [
                make("decoder", f"{p}.ln1.g", lambda r: np.ones(d)),
                make("decoder", f"{p}.ln1.b", lambda r: np.zeros(d)),
                make("decoder", f"{p}.ln2.g", lambda r: np.ones(d)),
                make("decoder", f"{p}.ln2.b", lambda r: np.zeros(d)),
                make("decoder", f"{p}.ff.w1", lambda r: _linear_init(r, d, ff)),
                make("decoder", f"{p}.ff.b1", lambda r: np.zeros(ff)),
                make("decoder", f"{p}.ff.w2", lambda r: _linear_init(r, ff, d)),
                make("decoder", f"{p}.ff.b2", lambda r: np.zeros(d)),
                make("decoder", f"{p}.ln3.g", lambda r: np.ones(d)),
                make("decoder", f"{p}.ln3.b", lambda r: np.zeros(d)),
            ]
        )
    decoder.update(
        [
            make("decoder", "ln_out.g", lambda r: np.ones(d)),
            make("decoder", "ln_out.b", lambda r: np.zeros(d)),
            # readout ties to the embedding table; the bias starts the
            # output distribution near uniform
            make("decoder", "out_b", lambda r: np.zeros(v)),
        ]
    )

    kws: dict[str, Tensor] = {}
    kws.update(
        [
            make("kws", "wq", lambda r: _linear_init(r, d, d)),
            make("kws", "bq", lambda r: np.zeros(d)),
            make("kws", "wk", lambda r: _linear_init(r, d, d)),
            make("kws", "wv", lambda r: _linear_init(r, d, d)),
            make("kws", "w1", lambda r: _linear_init(r, 2 * d, d)),
            make("kws", "b1", lambda r: np.zeros(d)),
            make("kws", "w2", lambda r: _linear_init(r, d, 1, std=0.01)),
            make("kws", "b2", lambda r: np.zeros(1)),
        ]
    )

    return ModelParams(config=config, encoder=encoder, decoder=decoder, kws=kws, prefix={})


def init_prefix(params: ModelParams, n_tokens: int, seed: int) -> Tensor:
    """Soft prompt rows, each a copy of a random non-reserved token embedding."""
    if n_tokens < 1:
        raise ModelError(f"prefix length must be >= 1, got {n_tokens}")
    rng = stream(seed, "prefix-init")
    v = params.config.vocab_size
    ids = rng.integers(N_RESERVED, v, size=n_tokens)
    q = Tensor(params.decoder["embed"].data[ids].copy())
    params.prefix = {"q": q}
    return q


def sinusoid_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    dim = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * dim / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


@lru_cache(maxsize=256)
def _positions_tensor(n: int, d: int) -> Tensor:
    return Tensor(sinusoid_positions(n, d))


@lru_cache(maxsize=256)
def _causal_mask(n: int) -> Tensor:
    return Tensor(np.triu(np.full((n, n), -1e30), k=1))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    length, d = x.shape
    return ad.swap_axes(ad.reshape(x, (length, n_heads, d // n_heads)), 0, 1)


def _merge_heads(x: Tensor) -> Tensor:
    h, length, hd = x.shape
    return ad.reshape(ad.swap_axes(x, 0, 1), (length, h * hd))


def _attention(
    p: dict[str, Tensor],
    prefix: str,
    x: Tensor,
    kv: Tensor,
    n_heads: int,
    mask: Tensor | None = None,
    collect: list | None = None,
) -> Tensor:
    q = ad.add(ad.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = ad.matmul(kv, p[f"{prefix}.wk"])
    v = ad.add(ad.matmul(kv, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    head_dim = x.shape[-1] // n_heads
    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)
    scores = ad.scale(ad.matmul(qh, ad.swap_axes(kh, -1, -2)), 1.0 / np.sqrt(head_dim))
    if mask is not None:
        scores = ad.add(scores, mask)
    att = ad.softmax(scores, axis=-1)
    if collect is not None:
        collect.append(att.data.mean(axis=0))
    ctx = _merge_heads(ad.matmul(att, vh))
    return ad.add(ad.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def _feed_forward(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def _ln(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def encode(params: ModelParams, frames: np.ndarray) -> Tensor:
    """Encoder output u with shape (floor(T/2), d_model)."""
    cfg = params.config
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cfg.n_mels:
        raise ModelError(f"expected (T, {cfg.n_mels}) features, got {frames.shape}")
    n = frames.shape[0]
    if n > cfg.max_src_frames:
        raise ModelError(f"input of {n} frames exceeds max_src_frames {cfg.max_src_frames}")
    if n < 2:
        raise ModelError("need at least 2 feature frames")
    p = params.encoder
    half = n // 2
    x = Tensor(frames[: 2 * half].reshape(half, 2 * cfg.n_mels))
    h = ad.gelu(ad.add(ad.matmul(x, p["in_w"]), p["in_b"]))
    h = ad.add(h, _positions_tensor(half, cfg.d_model))
    for i in range(cfg.n_enc_layers):
        normed = _ln(p, f"l{i}.ln1", h)
        h = ad.add(h, _attention(p, f"l{i}.attn", normed, normed, cfg.n_heads))
        h = ad.add(h, _feed_forward(p, f"l{i}.ff", _ln(p, f"l{i}.ln2", h)))
    return _ln(p, "ln_out", h)


def _decoder_hidden(
    params: ModelParams,
    u: Tensor,
    cond_ids: Sequence[int],
    t_ids: Sequence[int],
    prefix: Tensor | None,
    collect: list | None = None,
) -> Tensor:
    cfg = params.config
    p = params.decoder
    n_prefix = prefix.shape[0] if prefix is not None else 0
    total = n_prefix + len(cond_ids) + len(t_ids)
    if total > cfg.max_tgt_len:
        raise ModelError(f"conditioning length {total} exceeds max_tgt_len {cfg.max_tgt_len}")
    if not cond_ids:
        raise ModelError("conditioning must contain at least the transcript-start token")
    emb = ad.embedding(p["embed"], list(cond_ids) + list(t_ids))
    if prefix is not None:
        emb = ad.concat([prefix, emb], axis=0)
    # Soft prefix rows take positional encodings exactly like token positions.
    h = ad.add(emb, _positions_tensor(total, cfg.d_model))
    mask = _causal_mask(total)
    for i in range(cfg.n_dec_layers):
        normed = _ln(p, f"l{i}.ln1", h)
        h = ad.add(h, _attention(p, f"l{i}.attn", normed, normed, cfg.n_heads, mask=mask, collect=collect))
        h = ad.add(h, _attention(p, f"l{i}.cross", _ln(p, f"l{i}.ln2", h), u, cfg.n_heads))
        h = ad.add(h, _feed_forward(p, f"l{i}.ff", _ln(p, f"l{i}.ln3", h)))
    return _ln(p, "ln_out", h)


def _readout(params: ModelParams, rows: Tensor) -> Tensor:
    # tied to the embedding table, 1/d scaling keeps init logits small
    p = params.decoder
    scores = ad.scale(ad.matmul(rows, ad.swap_axes(p["embed"], 0, 1)), 1.0 / params.config.d_model)
    return ad.add(scores, p["out_b"])


def teacher_forced_logits(
    params: ModelParams,
    u: Tensor,
    cond_ids: Sequence[int],
    t_ids: Sequence[int],
    prefix: Tensor | None,
) -> Tensor:
    """Logits for the len(t)+1 positions that predict t plus end-of-text."""
    n_prefix = prefix.shape[0] if prefix is not None else 0
    h = _decoder_hidden(params, u, cond_ids, t_ids, prefix)
    start = n_prefix + len(cond_ids) - 1
    rows = ad.narrow(h, 0, start, len(t_ids) + 1)
    return _readout(params, rows)


def decode_next(
    params: ModelParams,
    u: Tensor,
    cond_ids: Sequence[int],
    t_prev: Sequence[int],
    prefix: Tensor | None,
) -> np.ndarray:
    """Distribution over the vocabulary for the next token."""
    h = _decoder_hidden(params, u, cond_ids, t_prev, prefix)
    last = ad.narrow(h, 0, h.shape[0] - 1, 1)
    return ad.softmax(_readout(params, last), axis=-1).data[0]


def transcribe_greedy(
    params: ModelParams,
    u: Tensor,
    cond_ids: Sequence[int],
    prefix: Tensor | None,
    eot_id: int,
    max_len: int,
) -> list[int]:
    """Greedy decode; argmax ties break to the lowest token id."""
    out: list[int] = []
    for _ in range(max_len):
        probs = decode_next(params, u, cond_ids, out, prefix)
        nxt = int(np.argmax(probs))
        if nxt == eot_id:
            break
        out.append(nxt)
    return out


@dataclass(frozen=True)
class KwsPrediction:
    probabilities: np.ndarray
    decisions: np.ndarray
    threshold: float

    def __len__(self) -> int:
        return len(self.probabilities)


def kws_logits(params: ModelParams, u: Tensor, keyword_tokens: Sequence[Sequence[int]]) -> Tensor:
    """One presence logit per keyword; shape (len(keywords),)."""
    cfg = params.config
    p = params.kws
    rows: list[Tensor] = []
    for tokens in keyword_tokens:
        if not 1 <= len(tokens) <= 4:
            raise ModelError(f"keyword must have 1..4 tokens, got {len(tokens)}")
        emb = ad.embedding(params.decoder["embed"], list(tokens))
        pooled = ad.scale(ad.matmul(Tensor(np.ones((1, len(tokens)))), emb), 1.0 / len(tokens))
        query = ad.add(ad.matmul(pooled, p["wq"]), p["bq"])
        keys = ad.matmul(u, p["wk"])
        values = ad.matmul(u, p["wv"])
        att = ad.softmax(ad.scale(ad.matmul(query, ad.swap_axes(keys, 0, 1)), 1.0 / np.sqrt(cfg.d_model)), axis=-1)
        ctx = ad.matmul(att, values)
        feat = ad.concat([ctx, query], axis=1)
        hidden = ad.gelu(ad.add(ad.matmul(feat, p["w1"]), p["b1"]))
        rows.append(ad.add(ad.matmul(hidden, p["w2"]), p["b2"]))
    if not rows:
        return Tensor(np.zeros((0,)))
    return ad.reshape(ad.concat(rows, axis=0), (len(rows),))


def kws_detect(
    params: ModelParams,
    u: Tensor,
    keyword_tokens: Sequence[Sequence[int]],
    threshold: float = 0.5,
) -> KwsPrediction:
    if not keyword_tokens:
        return KwsPrediction(np.zeros(0), np.zeros(0, dtype=bool), threshold)
    logits = kws_logits(params, u, keyword_tokens)
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    return KwsPrediction(probs, probs >= threshold, threshold)


def prompt_attention_block(
    params: ModelParams,
    u: Tensor,
    cond_ids: Sequence[int],
    t_ids: Sequence[int],
    prefix: Tensor | None,
    layer: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Head-averaged attention from generating positions onto prompt tokens.

    Returns (block, row_sums): block[r, c] is the attention that the
    position emitting t[c] pays to prompt token r; row_sums[c] is that
    position's attention total over all attended positions (1 up to
    rounding, since it comes from one softmax row).
    """
    cfg = params.config
    if not -cfg.n_dec_layers <= layer < cfg.n_dec_layers:
        raise ModelError(f"layer {layer} out of range for {cfg.n_dec_layers} decoder layers")
    layer = layer % cfg.n_dec_layers
    collect: list[np.ndarray] = []
    _decoder_hidden(params, u, cond_ids, t_ids, prefix, collect=collect)
    attn = collect[layer]
    n_prefix = prefix.shape[0] if prefix is not None else 0
    n_cond = len(cond_ids)
    emit_positions = [n_prefix + n_cond - 1 + i for i in range(len(t_ids))]
    prompt_positions = list(range(n_prefix, n_prefix + n_cond))
    block = attn[np.ix_(emit_positions, prompt_positions)].T.copy()
    row_sums = attn[emit_positions].sum(axis=1)
    return block, row_sums


def param_count(group: dict[str, Tensor]) -> int:
    return sum(t.data.size for t in group.values())


def param_group_hash(group: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(group):
        t = group[name]
        h.update(name.encode("utf-8"))
        h.update(str(t.data.shape).encode("utf-8"))
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
