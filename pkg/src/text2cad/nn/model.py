"""Text-conditioned autoregressive decoder over CAD token pairs.

Data flow::

    text ids -> embedding + positions -> encoder layer -> adaptive layer = T_adapt
    CAD tokens -> W^x[x] + W^y[y] + positions = F^0
    F^l = block_l(F^(l-1), T_adapt)      l = 1..L
    logits_x, logits_y = heads(F^L)

A decoder block runs causal self-attention with residual and layer norm.
Blocks after the first ``cross_attention_skip_blocks`` then project
``T_adapt`` with their own ``W_adapt`` (d_p -> d) and cross-attend to it.
Each block ends with ``LN(FFN(.))``.  With ``ffn_residual`` the FFN gets a
residual connection too.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..codec import MAX_TOKENS, PAD, SEQ, VOCAB_SIZE, CadSequence
from ..errors import ConfigError, ShapeMismatch, TokenOutOfRange
from . import autograd as ag
from .autograd import Tensor
from .text import PAD as TEXT_PAD


@dataclass(frozen=True)
class ModelConfig:
    L: int = 4
    heads: int = 4
    d: int = 128
    d_p: int = 128
    N_p: int = 512
    N_c: int = MAX_TOKENS
    vocab_cad: int = VOCAB_SIZE
    vocab_text: int = 0
    dropout: float = 0.1
    cross_attention_skip_blocks: int = 2
    ffn_multiplier: int = 4
    ffn_residual: bool = False
    # token tables start at this std; much smaller values let the sinusoidal
    # positions swamp token identity and training crawls
    embed_init_std: float = 1.0
    external_text: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d % self.heads or self.d_p % self.heads:
            raise ConfigError("d and d_p must be divisible by heads")
        if not 0 <= self.cross_attention_skip_blocks < self.L:
            raise ConfigError("cross_attention_skip_blocks must be in [0, L)")
        if not self.external_text and self.vocab_text < 4:
            raise ConfigError("vocab_text must be set when the built-in text encoder is used")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**doc)

    def has_cross(self, block: int) -> bool:
        """``block`` counts from 1."""
        return block > self.cross_attention_skip_blocks


# -- parameters -------------------------------------------------------------


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for m in "qkvo":
        out[f"{prefix}.w{m}"] = (d, d)
        out[f"{prefix}.b{m}"] = (d,)
    return out


def _ffn_shapes(prefix: str, d: int, mult: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (d, mult * d), f"{prefix}.b1": (mult * d,), f"{prefix}.w2": (mult * d, d), f"{prefix}.b2": (d,)}


def _ln_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _encoder_shapes(prefix: str, d: int, mult: int) -> dict[str, tuple[int, ...]]:
    return {
        **_attn_shapes(f"{prefix}.attn", d),
        **_ln_shapes(f"{prefix}.ln1", d),
        **_ffn_shapes(f"{prefix}.ffn", d, mult),
        **_ln_shapes(f"{prefix}.ln2", d),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if not cfg.external_text:
        shapes["text.embed"] = (cfg.vocab_text, cfg.d_p)
        shapes.update(_encoder_shapes("text.encoder", cfg.d_p, cfg.ffn_multiplier))
    shapes.update(_encoder_shapes("text.adaptive", cfg.d_p, cfg.ffn_multiplier))
    shapes["cad.wx"] = (cfg.vocab_cad, cfg.d)
    shapes["cad.wy"] = (cfg.vocab_cad, cfg.d)
    for blk in range(1, cfg.L + 1):
        p = f"blocks.{blk}"
        shapes.update(_attn_shapes(f"{p}.self", cfg.d))
        shapes.update(_ln_shapes(f"{p}.ln_self", cfg.d))
        if cfg.has_cross(blk):
            shapes[f"{p}.adapt.w"] = (cfg.d_p, cfg.d)
            shapes.update(_attn_shapes(f"{p}.cross", cfg.d))
            shapes.update(_ln_shapes(f"{p}.ln_cross", cfg.d))
        shapes.update(_ffn_shapes(f"{p}.ffn", cfg.d, cfg.ffn_multiplier))
        shapes.update(_ln_shapes(f"{p}.ln_ffn", cfg.d))
    for head in "xy":
        shapes[f"head.{head}.w"] = (cfg.d, cfg.vocab_cad)
        shapes[f"head.{head}.b"] = (cfg.vocab_cad,)
    return shapes


def param_family(name: str) -> str:
    """Group name used by gradient checks: the name with block numbers removed."""
    parts = name.split(".")
    if parts[0] == "blocks":
        parts = ["blocks"] + parts[2:]
    return ".".join(parts[:-1]) if len(parts) > 2 else name


class ModelParameters:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        shapes = param_shapes(config)
        if set(shapes) != set(arrays):
            missing, extra = set(shapes) - set(arrays), set(arrays) - set(shapes)
            raise ShapeMismatch(f"parameter names differ (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
        for name, shape in shapes.items():
            if tuple(arrays[name].shape) != shape:
                raise ShapeMismatch(f"{name}: shape {arrays[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: Tensor(arrays[name], requires_grad=True) for name in shapes}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParameters:
    """Glorot-uniform linear maps, N(0, embed_init_std) embeddings, unit/zero norms and biases."""
    rng = np.random.default_rng([cfg.seed, 17])
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("text.embed", "cad.wx", "cad.wy"):
            a = rng.normal(0.0, cfg.embed_init_std, size=shape)
        elif leaf == "g":
            a = np.ones(shape)
        elif len(shape) == 1:
            a = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            a = rng.uniform(-limit, limit, size=shape)
        arrays[name] = a.astype(dtype)
    return ModelParameters(cfg, arrays)


def sinusoidal(n: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out.astype(dtype)


# -- building blocks --------------------------------------------------------


class _Ctx:
    """Per-call settings: training flag, dropout stream, attention capture."""

    def __init__(self, cfg: ModelConfig, training: bool, rng: np.random.Generator | None, capture: bool = False):
        self.cfg = cfg
        self.training = training
        self.rng = rng
        self.captured: list[tuple[str, np.ndarray]] | None = [] if capture else None

    def drop(self, x: Tensor) -> Tensor:
        return ag.dropout(x, self.cfg.dropout, self.rng, self.training)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ag.transpose(ag.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _mha(P, prefix: str, xq: Tensor, xkv: Tensor | None, mask, ctx: _Ctx, cache: dict | None = None,
         kv: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Multi-head attention; ``kv`` supplies precomputed split keys/values.

    With ``cache`` (self-attention during generation) the new keys and
    values are appended to ``cache["k"]``/``cache["v"]``.
    """
    h = ctx.cfg.heads
    q = _split_heads(ag.linear(xq, P[f"{prefix}.wq"], P[f"{prefix}.bq"]), h)
    if kv is None:
        k = _split_heads(ag.linear(xkv, P[f"{prefix}.wk"], P[f"{prefix}.bk"]), h)
        v = _split_heads(ag.linear(xkv, P[f"{prefix}.wv"], P[f"{prefix}.bv"]), h)
    else:
        k, v = kv
    if cache is not None:
        t, n = cache["t"], k.shape[2]
        cache["k"][:, :, t : t + n] = k.data
        cache["v"][:, :, t : t + n] = v.data
        k = Tensor(cache["k"][:, :, : t + n])
        v = Tensor(cache["v"][:, :, : t + n])
    a = ag.attention(q, k, v, mask)
    if ctx.captured is not None:
        ctx.captured.append((prefix, a.extra))
    return ag.linear(_merge_heads(a), P[f"{prefix}.wo"], P[f"{prefix}.bo"])


def _ffn(P, prefix: str, x: Tensor) -> Tensor:
    hid = ag.gelu(ag.linear(x, P[f"{prefix}.w1"], P[f"{prefix}.b1"]))
    return ag.linear(hid, P[f"{prefix}.w2"], P[f"{prefix}.b2"])


def _ln(P, prefix: str, x: Tensor) -> Tensor:
    return ag.layer_norm(x, P[f"{prefix}.g"], P[f"{prefix}.b"])


def _encoder_layer(P, prefix: str, x: Tensor, key_mask: np.ndarray, ctx: _Ctx) -> Tensor:
    mask = key_mask[:, None, None, :]
    x = _ln(P, f"{prefix}.ln1", ag.add(x, ctx.drop(_mha(P, f"{prefix}.attn", x, x, mask, ctx))))
    return _ln(P, f"{prefix}.ln2", ag.add(x, ctx.drop(_ffn(P, f"{prefix}.ffn", x))))


# -- public pieces ----------------------------------------------------------


def text_mask(ids: np.ndarray) -> np.ndarray:
    return np.asarray(ids) != TEXT_PAD


def encode_text(
    ids: np.ndarray | None,
    params: ModelParameters,
    *,
    embeddings: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    pad_to: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    _ctx: _Ctx | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Text ids (B, n) -> (T_adapt of shape (B, N, d_p), key mask (B, N)).

    ``N`` is ``pad_to`` when given (the config's ``N_p`` is the usual
    choice), else ``n``.  In external-text mode pass ``embeddings`` of shape
    (B, n, d_p) instead of ids; only the adaptive layer runs.
    """
    cfg = params.config
    ctx = _ctx or _Ctx(cfg, training, rng)
    P = params.tensors
    if cfg.external_text:
        if embeddings is None:
            raise ShapeMismatch("external-text mode needs precomputed embeddings")
        emb = np.asarray(embeddings, dtype=P["cad.wx"].data.dtype)
        if emb.ndim != 3 or emb.shape[2] != cfg.d_p:
            raise ShapeMismatch(f"embeddings must have shape (B, n, {cfg.d_p})")
        if mask is None:
            mask = np.ones(emb.shape[:2], dtype=bool)
        n = emb.shape[1]
        if pad_to is not None and pad_to > n:
            emb = np.concatenate([emb, np.zeros((emb.shape[0], pad_to - n, cfg.d_p), emb.dtype)], axis=1)
            mask = np.concatenate([mask, np.zeros((mask.shape[0], pad_to - n), bool)], axis=1)
        x = Tensor(emb)
    else:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ShapeMismatch("text ids must have shape (B, n)")
        if ids.shape[1] > cfg.N_p:
            ids = ids[:, : cfg.N_p]
        if pad_to is not None and pad_to > ids.shape[1]:
            ids = np.concatenate([ids, np.full((ids.shape[0], pad_to - ids.shape[1]), TEXT_PAD)], axis=1)
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_text):
            raise TokenOutOfRange("text id outside the vocabulary")
        mask = text_mask(ids)
        pos = sinusoidal(ids.shape[1], cfg.d_p, P["text.embed"].data.dtype)
        x = ag.add(ag.embedding(P["text.embed"], ids), pos)
        x = _encoder_layer(P, "text.encoder", ctx.drop(x), mask, ctx)
    return _encoder_layer(P, "text.adaptive", x, mask, ctx), mask


def _check_tokens(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 3 or tokens.shape[2] != 2:
        raise ShapeMismatch("CAD tokens must have shape (B, N, 2)")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_cad):
        raise TokenOutOfRange(f"CAD token outside [0, {cfg.vocab_cad - 1}]")
    if tokens.shape[1] > cfg.N_c:
        raise ShapeMismatch(f"more than N_c={cfg.N_c} CAD tokens")
    return tokens


def embed_cad(tokens: np.ndarray, params: ModelParameters, offset: int = 0) -> Tensor:
    """F^0 = W^x[x] + W^y[y] + P for token pairs of shape (B, N, 2)."""
    cfg = params.config
    tokens = _check_tokens(tokens, cfg)
    P = params.tensors
    pos = sinusoidal(offset + tokens.shape[1], cfg.d, P["cad.wx"].data.dtype)[offset:]
    return ag.add(ag.add(ag.embedding(P["cad.wx"], tokens[..., 0]), ag.embedding(P["cad.wy"], tokens[..., 1])), pos)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def project_text(params: ModelParameters, block: int, t_adapt: Tensor) -> Tensor:
    """T^l_adapt = T_adapt W^l_adapt."""
    return ag.matmul(t_adapt, params[f"blocks.{block}.adapt.w"])


def decoder_block(
    F: Tensor,
    t_adapt: Tensor | None,
    block: int,
    params: ModelParameters,
    text_keys: np.ndarray | None,
    self_mask: np.ndarray | None = None,
    *,
    _ctx: _Ctx | None = None,
    cache: dict | None = None,
    cross_kv: tuple[Tensor, Tensor] | None = None,
) -> Tensor:
    """One decoder block (``block`` counts from 1).

    ``self_mask`` defaults to the causal mask.  ``text_keys`` is the (B, N_text)
    key mask for the text.  Blocks without cross-attention never read
    ``t_adapt``.
    """
    cfg = params.config
    ctx = _ctx or _Ctx(cfg, False, None)
    P = params.tensors
    p = f"blocks.{block}"
    if F.shape[-1] != cfg.d:
        raise ShapeMismatch(f"decoder input width {F.shape[-1]} != d={cfg.d}")
    if self_mask is None and cache is None:
        self_mask = causal_mask(F.shape[1])
    x = _ln(P, f"{p}.ln_self", ag.add(F, ctx.drop(_mha(P, f"{p}.self", F, F, self_mask, ctx, cache=cache))))
    if cfg.has_cross(block):
        mask = text_keys[:, None, None, :]
        if cross_kv is None:
            if t_adapt is None or t_adapt.shape[-1] != cfg.d_p:
                raise ShapeMismatch("cross-attention block needs T_adapt of width d_p")
            tl = project_text(params, block, t_adapt)
            a = _mha(P, f"{p}.cross", x, tl, mask, ctx)
        else:
            a = _mha(P, f"{p}.cross", x, None, mask, ctx, kv=cross_kv)
        x = _ln(P, f"{p}.ln_cross", ag.add(x, ctx.drop(a)))
    y = _ffn(P, f"{p}.ffn", x)
    if cfg.ffn_residual:
        y = ag.add(x, ctx.drop(y))
    return _ln(P, f"{p}.ln_ffn", y)


def _heads(P, F: Tensor) -> tuple[Tensor, Tensor]:
    return ag.linear(F, P["head.x.w"], P["head.x.b"]), ag.linear(F, P["head.y.w"], P["head.y.b"])


def forward(
    text_ids: np.ndarray | None,
    cad_tokens: np.ndarray,
    params: ModelParameters,
    *,
    embeddings: np.ndarray | None = None,
    text_keys: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    capture: bool = False,
) -> tuple[Tensor, Tensor, list]:
    """Logits ``(B, N, 267)`` for x and y; position t predicts token t+1.

    The third value lists ``(layer name, attention weights)`` when
    ``capture`` is set.
    """
    cfg = params.config
    ctx = _Ctx(cfg, training, rng, capture)
    t_adapt, keys = encode_text(text_ids, params, embeddings=embeddings, mask=text_keys, _ctx=ctx)
    F = ctx.drop(embed_cad(cad_tokens, params))
    mask = causal_mask(F.shape[1])
    for blk in range(1, cfg.L + 1):
        F = decoder_block(F, t_adapt, blk, params, keys, mask, _ctx=ctx)
    lx, ly = _heads(params.tensors, F)
    return lx, ly, ctx.captured or []


def logits(text_ids, cad_tokens, params, **kw) -> np.ndarray:
    """Stacked logits of shape (B, N, 2, 267), evaluation mode."""
    with ag.no_grad():
        lx, ly, _ = forward(text_ids, cad_tokens, params, **kw)
    return np.stack([lx.data, ly.data], axis=2)


def target_weights(targets: np.ndarray) -> np.ndarray:
    """1 for real target tokens, 0 for pad (0, 0)."""
    return (np.asarray(targets) != PAD).any(axis=-1).astype(np.float64)


def loss(lx: Tensor, ly: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over non-pad targets of CE(x) + CE(y)."""
    targets = np.asarray(targets)
    if lx.shape[:2] != targets.shape[:2] or ly.shape != lx.shape or targets.shape[-1] != 2:
        raise ShapeMismatch(f"logits {lx.shape} do not align with targets {targets.shape}")
    w = target_weights(targets).astype(lx.data.dtype)
    denom = float(w.sum())
    return ag.add(ag.cross_entropy(lx, targets[..., 0], w, denom), ag.cross_entropy(ly, targets[..., 1], w, denom))


def token_hits(lx: np.ndarray, ly: np.ndarray, targets: np.ndarray) -> tuple[int, int]:
    """(positions where both argmaxes match, non-pad positions)."""
    w = target_weights(targets) > 0
    ok = (lx.argmax(-1) == targets[..., 0]) & (ly.argmax(-1) == targets[..., 1])
    return int((ok & w).sum()), int(w.sum())


# -- generation -------------------------------------------------------------


def generate(
    params: ModelParameters,
    text_ids: np.ndarray | None = None,
    *,
    embeddings: np.ndarray | None = None,
    text_keys: np.ndarray | None = None,
    max_len: int | None = None,
) -> list[CadSequence]:
    """Greedy decoding for a batch of prompts (ties go to the lowest id).

    Every sequence starts with (1, 0) and ends at the first emitted token
    whose x value is 1, or at ``N_c`` tokens.
    """
    cfg = params.config
    P = params.tensors
    max_len = min(max_len or cfg.N_c, cfg.N_c)
    ctx = _Ctx(cfg, False, None)
    with ag.no_grad():
        t_adapt, keys = encode_text(text_ids, params, embeddings=embeddings, mask=text_keys, _ctx=ctx)
        B = t_adapt.shape[0]
        dtype = t_adapt.data.dtype
        dh = cfg.d // cfg.heads
        cross = {}
        for blk in range(1, cfg.L + 1):
            if cfg.has_cross(blk):
                tl = project_text(params, blk, t_adapt)
                k = _split_heads(ag.linear(tl, P[f"blocks.{blk}.cross.wk"], P[f"blocks.{blk}.cross.bk"]), cfg.heads)
                v = _split_heads(ag.linear(tl, P[f"blocks.{blk}.cross.wv"], P[f"blocks.{blk}.cross.bv"]), cfg.heads)
                cross[blk] = (k, v)
        caches = {
            blk: {"k": np.zeros((B, cfg.heads, max_len, dh), dtype), "v": np.zeros((B, cfg.heads, max_len, dh), dtype), "t": 0}
            for blk in range(1, cfg.L + 1)
        }
        out = np.zeros((B, max_len, 2), dtype=np.int64)
        out[:, 0] = (SEQ, 0)
        length = np.full(B, max_len)
        done = np.zeros(B, dtype=bool)
        for t in range(max_len - 1):
            F = embed_cad(out[:, t : t + 1], params, offset=t)
            for blk in range(1, cfg.L + 1):
                caches[blk]["t"] = t
                F = decoder_block(F, None, blk, params, keys, None, _ctx=ctx, cache=caches[blk], cross_kv=cross.get(blk))
            lx, ly = _heads(P, F)
            nxt = np.stack([lx.data[:, 0].argmax(-1), ly.data[:, 0].argmax(-1)], axis=-1)
            nxt[done] = 0
            out[:, t + 1] = nxt
            ended = ~done & (nxt[:, 0] == SEQ)
            length[ended] = t + 2
            done |= ended
            if done.all():
                break
    return [CadSequence(out[b, : length[b]]) for b in range(B)]
