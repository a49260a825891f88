"""Encoder-decoder transformer predicting geocell token sequences.

The encoder reads one sequence of slots per query: a learned CLS vector,
the projected query embedding, then for each retrieved neighbor its
projected embedding followed by the neighbor's token-sequence embeddings.
The decoder emits the query's own tokens autoregressively, one of six
face tokens first and quadrant tokens after, with per-step validity
masks over a single shared six-entry vocabulary table.

Training runs through the autodiff tape in :mod:`geotoken.nn`; decoding
uses a plain-numpy float64 mirror of the same forward pass with cached
self-attention state so candidate pools stay cheap.  A cross-check test
holds the two paths together.
"""

from __future__ import annotations

import csv
import math
import pathlib
from dataclasses import dataclass

import numpy as np

from .align import normalized_rows
from .checkpoints import SEQMODEL_MAGIC, load_tensors, save_tensors
from .errors import ConfigError, DataFormatError, InvalidInputError, NumericalError
from .geocell import DEFAULT_LEVELS, FACES
from .nn import (AdamW, Tensor, concat, embedding, glorot_uniform, log_softmax,
                 layer_norm, ones_param, softmax, take_last_axis, zeros_param)

# additive mask value: finite, but exp() underflows to exactly 0.0
MASK_NEG = -1e30
CONFIG_DOC_VERSION = 1
QUADRANTS = 4


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale configuration; :meth:`paper_scale` holds
    the full-size preset.  `include_query_metadata` appends the query's
    own token and text slots to the encoder input, which only exist at
    training time; it is off by default because those inputs are absent
    for real queries.
    """

    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ffn: int = 128
    L: int = DEFAULT_LEVELS
    M: int = 15
    vocab: int = FACES
    input_dims: int = 128
    include_query_metadata: bool = False
    text_dims: int = 32

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab < FACES:
            raise ConfigError(f"vocab {self.vocab} < {FACES}")
        for name in ("d_model", "n_heads", "n_layers_enc", "n_layers_dec",
                     "d_ffn", "L", "M", "input_dims"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def n_slots(self) -> int:
        base = 2 + self.M * (1 + self.L)
        if self.include_query_metadata:
            base += 1 + self.L
        return base

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=512, n_heads=8, n_layers_enc=10, n_layers_dec=10, d_ffn=1024)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    dtype: str = "float64"
    retrieval_workers: int = 1

    def __post_init__(self) -> None:
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 \
                or self.retrieval_workers < 1:
            raise ConfigError("lr must be positive; batch_size, epochs, and "
                              "retrieval_workers must be >= 1")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(lr=5e-5, batch_size=2048)
        base.update(overrides)
        return cls(**base)


@dataclass
class EncoderInput:
    """One query's encoder slots, before embedding.

    `query_tokens` and `query_text_embedding` are only consulted when the
    model was configured with metadata slots.
    """

    query_embedding: np.ndarray
    neighbor_embeddings: np.ndarray
    neighbor_tokens: np.ndarray
    query_tokens: np.ndarray | None = None
    query_text_embedding: np.ndarray | None = None


@dataclass
class SequenceBatch:
    """Stacked encoder inputs plus teacher-forcing targets."""

    query_embeddings: np.ndarray       # (B, input_dims)
    neighbor_embeddings: np.ndarray    # (B, M, input_dims)
    neighbor_tokens: np.ndarray        # (B, M, L)
    targets: np.ndarray                # (B, L)
    query_tokens: np.ndarray | None = None
    query_text_embeddings: np.ndarray | None = None

    def __len__(self) -> int:
        return self.targets.shape[0]


@dataclass
class StepDistribution:
    """Raw next-token logits plus the step's validity mask."""

    logits: np.ndarray
    valid_mask: np.ndarray

    def masked_logits(self) -> np.ndarray:
        return np.where(self.valid_mask, self.logits, -np.inf)

    def log_probs(self) -> np.ndarray:
        return masked_log_softmax(self.masked_logits())

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())


def masked_log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized log-softmax that tolerates -inf entries."""

    z = logits - np.max(logits, axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def valid_token_mask(config: ModelConfig) -> np.ndarray:
    """(L, vocab) bool: six faces at step 0, four quadrants after."""

    mask = np.zeros((config.L, config.vocab), dtype=bool)
    mask[0, :FACES] = True
    mask[1:, :QUADRANTS] = True
    return mask


def position_weights(L: int) -> np.ndarray:
    """Linearly decaying loss weights w_t = 2 - t/20, normalized to sum 1."""

    w = 2.0 - np.arange(L) / 20.0
    return w / w.sum()


# --- parameters -------------------------------------------------------------


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Fresh parameter dict; glorot-uniform matrices, zero biases, unit gains."""

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(301,)))
    d, ffn = config.d_model, config.d_ffn
    p: dict[str, Tensor] = {}

    def mat(name: str, fan_in: int, fan_out: int, shape=None) -> None:
        p[name] = glorot_uniform(rng, fan_in, fan_out, shape=shape, dtype=dtype)

    def vec(name: str) -> None:
        # learned single slots behave like 1 x d matrices
        mat(name, 1, d, shape=(d,))

    def attn_block(prefix: str) -> None:
        # no key bias: it shifts every score equally and cancels in softmax
        for w in ("wq", "wk", "wv", "wo"):
            mat(prefix + w, d, d)
        for b in ("bq", "bv", "bo"):
            p[prefix + b] = zeros_param((d,), dtype=dtype)

    def ln_block(prefix: str) -> None:
        p[prefix + "g"] = ones_param((d,), dtype=dtype)
        p[prefix + "b"] = zeros_param((d,), dtype=dtype)

    def ffn_block(prefix: str) -> None:
        mat(prefix + "w1", d, ffn)
        p[prefix + "b1"] = zeros_param((ffn,), dtype=dtype)
        mat(prefix + "w2", ffn, d)
        p[prefix + "b2"] = zeros_param((d,), dtype=dtype)

    mat("token_embedding", config.vocab, d)
    mat("image_proj.w", config.input_dims, d)
    p["image_proj.b"] = zeros_param((d,), dtype=dtype)
    vec("cls")
    vec("start")
    mat("enc_pos", config.n_slots, d)
    mat("dec_pos", config.L, d)
    for i in range(config.n_layers_enc):
        ln_block(f"enc{i}.ln1.")
        attn_block(f"enc{i}.attn.")
        ln_block(f"enc{i}.ln2.")
        ffn_block(f"enc{i}.ffn.")
    for i in range(config.n_layers_dec):
        ln_block(f"dec{i}.ln1.")
        attn_block(f"dec{i}.self.")
        ln_block(f"dec{i}.ln2.")
        attn_block(f"dec{i}.cross.")
        ln_block(f"dec{i}.ln3.")
        ffn_block(f"dec{i}.ffn.")
    mat("head.w", d, config.vocab)
    p["head.b"] = zeros_param((config.vocab,), dtype=dtype)
    if config.include_query_metadata:
        mat("meta_text.w", config.text_dims, d)
        p["meta_text.b"] = zeros_param((d,), dtype=dtype)
    return p


def _check_tokens(tokens: np.ndarray, what: str) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        return tokens.astype(np.int64)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InvalidInputError(f"{what} must be integers")
    first = tokens[..., 0]
    rest = tokens[..., 1:]
    if first.min(initial=0) < 0 or first.max(initial=0) >= FACES:
        raise InvalidInputError(f"{what}: leading token outside [0, {FACES})")
    if rest.size and (rest.min() < 0 or rest.max() >= QUADRANTS):
        raise InvalidInputError(f"{what}: tail token outside [0, {QUADRANTS})")
    return tokens.astype(np.int64)


def _batch_arrays(batch: SequenceBatch, config: ModelConfig):
    q = np.asarray(batch.query_embeddings)
    nb = np.asarray(batch.neighbor_embeddings)
    nt = _check_tokens(batch.neighbor_tokens, "neighbor tokens")
    tgt = _check_tokens(batch.targets, "targets")
    if q.ndim != 2 or q.shape[1] != config.input_dims:
        raise InvalidInputError(f"query embeddings must be (B, {config.input_dims})")
    B = q.shape[0]
    if nb.shape != (B, config.M, config.input_dims):
        raise InvalidInputError(f"neighbor embeddings must be (B, {config.M}, {config.input_dims})")
    if nt.shape != (B, config.M, config.L):
        raise InvalidInputError(f"neighbor tokens must be (B, {config.M}, {config.L})")
    if tgt.shape != (B, config.L):
        raise InvalidInputError(f"targets must be (B, {config.L})")
    qt = qtx = None
    if config.include_query_metadata:
        if batch.query_tokens is None or batch.query_text_embeddings is None:
            raise InvalidInputError("metadata slots configured but batch carries none")
        qt = _check_tokens(batch.query_tokens, "query tokens")
        qtx = np.asarray(batch.query_text_embeddings)
        if qt.shape != (B, config.L) or qtx.shape != (B, config.text_dims):
            raise InvalidInputError("metadata arrays have wrong shape")
    return q, nb, nt, tgt, qt, qtx


# --- training-path forward (autodiff tensors) -------------------------------


def _tile_rows(vecp: Tensor, B: int, dtype) -> Tensor:
    return vecp.reshape(1, 1, -1) + Tensor(np.zeros((B, 1, 1), dtype=dtype))


def _mha(x_q: Tensor, x_kv: Tensor, p: dict, prefix: str, n_heads: int,
         mask: np.ndarray | None = None) -> Tensor:
    B, Sq, d = x_q.shape
    Sk = x_kv.shape[1]
    hd = d // n_heads
    q = (x_q @ p[prefix + "wq"] + p[prefix + "bq"]).reshape(B, Sq, n_heads, hd).swapaxes(1, 2)
    k = (x_kv @ p[prefix + "wk"]).reshape(B, Sk, n_heads, hd).swapaxes(1, 2)
    v = (x_kv @ p[prefix + "wv"] + p[prefix + "bv"]).reshape(B, Sk, n_heads, hd).swapaxes(1, 2)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(hd))
    if mask is not None:
        scores = scores + Tensor(mask)
    out = (softmax(scores, axis=-1) @ v).swapaxes(1, 2).reshape(B, Sq, d)
    return out @ p[prefix + "wo"] + p[prefix + "bo"]


def _pre_ln(x: Tensor, p: dict, prefix: str) -> Tensor:
    return layer_norm(x, p[prefix + "g"], p[prefix + "b"])


def _ffn(x: Tensor, p: dict, prefix: str) -> Tensor:
    return (x @ p[prefix + "w1"] + p[prefix + "b1"]).relu() @ p[prefix + "w2"] + p[prefix + "b2"]


def _embed_slots_graph(p: dict, config: ModelConfig, q: np.ndarray, nb: np.ndarray,
                       nt: np.ndarray, qt, qtx, dtype) -> Tensor:
    B = q.shape[0]
    vq = (Tensor(q.astype(dtype)) @ p["image_proj.w"] + p["image_proj.b"]).reshape(B, 1, -1)
    vn = Tensor(nb.astype(dtype)) @ p["image_proj.w"] + p["image_proj.b"]
    tn = embedding(p["token_embedding"], nt)          # (B, M, L, d)
    blocks = concat([vn.reshape(B, config.M, 1, -1), tn], axis=2)
    blocks = blocks.reshape(B, config.M * (1 + config.L), -1)
    parts = [_tile_rows(p["cls"], B, dtype), vq, blocks]
    if config.include_query_metadata:
        mtx = (Tensor(qtx.astype(dtype)) @ p["meta_text.w"] + p["meta_text.b"]).reshape(B, 1, -1)
        parts += [mtx, embedding(p["token_embedding"], qt)]
    return concat(parts, axis=1) + p["enc_pos"]


def _encode_graph(p: dict, config: ModelConfig, slots: Tensor) -> Tensor:
    x = slots
    for i in range(config.n_layers_enc):
        h = _pre_ln(x, p, f"enc{i}.ln1.")
        x = x + _mha(h, h, p, f"enc{i}.attn.", config.n_heads)
        x = x + _ffn(_pre_ln(x, p, f"enc{i}.ln2."), p, f"enc{i}.ffn.")
    return x


def _decode_graph(p: dict, config: ModelConfig, memory: Tensor,
                  targets: np.ndarray, dtype) -> Tensor:
    """Teacher-forced decoder stack; returns step-masked logits (B, L, vocab)."""

    B, L = targets.shape
    start = _tile_rows(p["start"], B, dtype)
    if L > 1:
        tok_in = embedding(p["token_embedding"], targets[:, :L - 1])
        x = concat([start, tok_in], axis=1) + p["dec_pos"]
    else:
        x = start + p["dec_pos"]
    causal = np.triu(np.full((L, L), MASK_NEG, dtype=dtype), k=1)
    for i in range(config.n_layers_dec):
        h = _pre_ln(x, p, f"dec{i}.ln1.")
        x = x + _mha(h, h, p, f"dec{i}.self.", config.n_heads, mask=causal)
        x = x + _mha(_pre_ln(x, p, f"dec{i}.ln2."), memory, p, f"dec{i}.cross.",
                     config.n_heads)
        x = x + _ffn(_pre_ln(x, p, f"dec{i}.ln3."), p, f"dec{i}.ffn.")
    logits = x @ p["head.w"] + p["head.b"]
    step_mask = np.where(valid_token_mask(config), 0.0, MASK_NEG).astype(dtype)
    return logits + Tensor(step_mask)


def sequence_logits_graph(batch: SequenceBatch, params: dict,
                          config: ModelConfig) -> Tensor:
    """Full teacher-forced forward on the autodiff tape; (B, L, vocab) logits."""

    dtype = params["token_embedding"].dtype
    q, nb, nt, tgt, qt, qtx = _batch_arrays(batch, config)
    slots = _embed_slots_graph(params, config, q, nb, nt, qt, qtx, dtype)
    memory = _encode_graph(params, config, slots)
    return _decode_graph(params, config, memory, tgt, dtype)


def sequence_loss_graph(batch: SequenceBatch, params: dict,
                        config: ModelConfig) -> Tensor:
    """Position-weighted cross-entropy as a scalar graph node."""

    logits = sequence_logits_graph(batch, params, config)
    logp = take_last_axis(log_softmax(logits, axis=-1), batch.targets)
    w = Tensor(position_weights(config.L).astype(logits.dtype))
    return -((logp * w).sum(axis=1)).mean()


def sequence_loss(batch: SequenceBatch, params: dict,
                  config: ModelConfig) -> tuple[float, dict]:
    """Loss value and gradients for one teacher-forced batch."""

    for p in params.values():
        p.grad = None
    loss = sequence_loss_graph(batch, params, config)
    if not np.isfinite(loss.data):
        raise NumericalError("sequence loss is not finite")
    loss.backward()
    grads = {k: p.grad for k, p in params.items()}
    return float(loss.data), grads


# --- inference path (plain numpy, float64) ----------------------------------


def params_as_arrays(params: dict, dtype=np.float64) -> dict[str, np.ndarray]:
    out = {}
    for k, v in params.items():
        a = v.data if isinstance(v, Tensor) else np.asarray(v)
        out[k] = np.ascontiguousarray(a, dtype=dtype)
    return out


def _np_ln(x, p, prefix, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * p[prefix + "g"] + p[prefix + "b"]


def _np_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _np_heads(x, n_heads):
    B, S, d = x.shape
    return x.reshape(B, S, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _np_mha(x_q, x_kv, p, prefix, n_heads, mask=None):
    B, Sq, d = x_q.shape
    q = _np_heads(x_q @ p[prefix + "wq"] + p[prefix + "bq"], n_heads)
    k = _np_heads(x_kv @ p[prefix + "wk"], n_heads)
    v = _np_heads(x_kv @ p[prefix + "wv"] + p[prefix + "bv"], n_heads)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // n_heads))
    if mask is not None:
        scores = scores + mask
    out = (_np_softmax(scores) @ v).transpose(0, 2, 1, 3).reshape(B, Sq, d)
    return out @ p[prefix + "wo"] + p[prefix + "bo"]


def _np_ffn(x, p, prefix):
    return np.maximum(x @ p[prefix + "w1"] + p[prefix + "b1"], 0.0) @ p[prefix + "w2"] + p[prefix + "b2"]


def _stack_inputs(inputs, config: ModelConfig):
    single = isinstance(inputs, EncoderInput)
    seq = [inputs] if single else list(inputs)
    if not seq:
        raise InvalidInputError("encode needs at least one input")
    q = np.stack([np.asarray(i.query_embedding, dtype=np.float64) for i in seq])
    nb = np.stack([np.asarray(i.neighbor_embeddings, dtype=np.float64) for i in seq])
    nt = np.stack([np.asarray(i.neighbor_tokens) for i in seq])
    qt = qtx = None
    if config.include_query_metadata:
        if any(i.query_tokens is None or i.query_text_embedding is None for i in seq):
            raise InvalidInputError("metadata slots configured but input carries none")
        qt = np.stack([np.asarray(i.query_tokens) for i in seq])
        qtx = np.stack([np.asarray(i.query_text_embedding, dtype=np.float64) for i in seq])
    return single, q, nb, nt, qt, qtx


def embed_encoder_slots(inputs, params: dict, config: ModelConfig) -> np.ndarray:
    """Slot embeddings plus positional terms, before any encoder layer."""

    p = params_as_arrays(params)
    single, q, nb, nt, qt, qtx = _stack_inputs(inputs, config)
    slots = _np_embed_slots(p, config, q, nb, nt, qt, qtx)
    return slots[0] if single else slots


def _np_embed_slots(p, config: ModelConfig, q, nb, nt, qt, qtx) -> np.ndarray:
    B = q.shape[0]
    if q.shape[1] != config.input_dims or nb.shape != (B, config.M, config.input_dims):
        raise InvalidInputError("embedding dims do not match the model config")
    nt = _check_tokens(nt, "neighbor tokens")
    if nt.shape != (B, config.M, config.L):
        raise InvalidInputError(f"neighbor tokens must be (M, {config.L})")
    vq = (q @ p["image_proj.w"] + p["image_proj.b"])[:, None, :]
    vn = nb @ p["image_proj.w"] + p["image_proj.b"]
    tn = p["token_embedding"][nt]
    blocks = np.concatenate([vn[:, :, None, :], tn], axis=2)
    blocks = blocks.reshape(B, config.M * (1 + config.L), -1)
    cls = np.broadcast_to(p["cls"], (B, 1, config.d_model))
    parts = [cls, vq, blocks]
    if config.include_query_metadata:
        mtx = (qtx @ p["meta_text.w"] + p["meta_text.b"])[:, None, :]
        parts += [mtx, p["token_embedding"][_check_tokens(qt, "query tokens")]]
    return np.concatenate(parts, axis=1) + p["enc_pos"]


def encode(inputs, params: dict, config: ModelConfig) -> np.ndarray:
    """Encoder memory in float64: (n_slots, d_model), batched if given a list."""

    p = params_as_arrays(params)
    single, q, nb, nt, qt, qtx = _stack_inputs(inputs, config)
    x = _np_embed_slots(p, config, q, nb, nt, qt, qtx)
    for i in range(config.n_layers_enc):
        h = _np_ln(x, p, f"enc{i}.ln1.")
        x = x + _np_mha(h, h, p, f"enc{i}.attn.", config.n_heads)
        x = x + _np_ffn(_np_ln(x, p, f"enc{i}.ln2."), p, f"enc{i}.ffn.")
    return x[0] if single else x


class DecoderSession:
    """Incremental decoding over R rows with cached attention state.

    All rows advance in lockstep, one token per call.  Rows may share one
    memory (candidate pools, beams) or carry one memory each (batched
    greedy evaluation); pass memory with a leading row axis either way.
    """

    def __init__(self, memory: np.ndarray, params: dict, config: ModelConfig) -> None:
        mem = np.asarray(memory, dtype=np.float64)
        if mem.ndim == 2:
            mem = mem[None]
        if mem.ndim != 3 or mem.shape[2] != config.d_model:
            raise InvalidInputError("memory must be (rows, slots, d_model)")
        self.config = config
        self.p = params_as_arrays(params)
        self.t = 0
        h, hd = config.n_heads, config.d_model // config.n_heads
        R = mem.shape[0]
        self._k_cross, self._v_cross = [], []
        for i in range(config.n_layers_dec):
            pre = f"dec{i}.cross."
            self._k_cross.append(_np_heads(mem @ self.p[pre + "wk"], h))
            self._v_cross.append(_np_heads(mem @ self.p[pre + "wv"] + self.p[pre + "bv"], h))
        self._k_self = [np.empty((R, h, 0, hd)) for _ in range(config.n_layers_dec)]
        self._v_self = [np.empty((R, h, 0, hd)) for _ in range(config.n_layers_dec)]
        self._neg_inf_mask = np.where(valid_token_mask(config), 0.0, -np.inf)

    @property
    def n_rows(self) -> int:
        return self._k_cross[0].shape[0]

    def select(self, rows: np.ndarray) -> None:
        """Reorder cached state to the given row indices (beam reshuffle)."""

        rows = np.asarray(rows, dtype=np.int64)
        self._k_self = [k[rows] for k in self._k_self]
        self._v_self = [v[rows] for v in self._v_self]
        self._k_cross = [k[rows] for k in self._k_cross]
        self._v_cross = [v[rows] for v in self._v_cross]

    def step(self, prev_tokens: np.ndarray | None = None) -> np.ndarray:
        """Advance one step; returns (R, vocab) logits, invalid entries -inf.

        `prev_tokens` is the token each row emitted at the previous step,
        or None at step 0.
        """

        cfg = self.config
        if self.t >= cfg.L:
            raise InvalidInputError(f"sequence already complete at {cfg.L} tokens")
        R = self.n_rows
        p = self.p
        if self.t == 0:
            if prev_tokens is not None:
                raise InvalidInputError("step 0 takes no previous token")
            x = np.broadcast_to(p["start"], (R, cfg.d_model)).copy()
        else:
            if prev_tokens is None:
                raise InvalidInputError("steps past 0 need the previous token")
            prev = np.asarray(prev_tokens, dtype=np.int64)
            if prev.shape != (R,):
                raise InvalidInputError(f"expected {R} previous tokens")
            x = p["token_embedding"][prev].copy()
        x += p["dec_pos"][self.t]
        x = x[:, None, :]                          # (R, 1, d)
        h, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        inv_scale = 1.0 / math.sqrt(hd)
        for i in range(cfg.n_layers_dec):
            hin = _np_ln(x, p, f"dec{i}.ln1.")
            pre = f"dec{i}.self."
            q = _np_heads(hin @ p[pre + "wq"] + p[pre + "bq"], h)
            k_new = _np_heads(hin @ p[pre + "wk"], h)
            v_new = _np_heads(hin @ p[pre + "wv"] + p[pre + "bv"], h)
            self._k_self[i] = np.concatenate([self._k_self[i], k_new], axis=2)
            self._v_self[i] = np.concatenate([self._v_self[i], v_new], axis=2)
            scores = (q @ self._k_self[i].swapaxes(-1, -2)) * inv_scale
            att = (_np_softmax(scores) @ self._v_self[i]).transpose(0, 2, 1, 3).reshape(R, 1, -1)
            x = x + att @ p[pre + "wo"] + p[pre + "bo"]

            hin = _np_ln(x, p, f"dec{i}.ln2.")
            pre = f"dec{i}.cross."
            q = _np_heads(hin @ p[pre + "wq"] + p[pre + "bq"], h)
            scores = (q @ self._k_cross[i].swapaxes(-1, -2)) * inv_scale
            att = (_np_softmax(scores) @ self._v_cross[i]).transpose(0, 2, 1, 3).reshape(R, 1, -1)
            x = x + att @ p[pre + "wo"] + p[pre + "bo"]

            x = x + _np_ffn(_np_ln(x, p, f"dec{i}.ln3."), p, f"dec{i}.ffn.")
        logits = (x[:, 0, :] @ p["head.w"] + p["head.b"]) + self._neg_inf_mask[self.t]
        self.t += 1
        return logits


def decode_step(prefix, memory: np.ndarray, params: dict,
                config: ModelConfig) -> StepDistribution:
    """Next-token distribution after `prefix`, recomputed from scratch."""

    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.ndim != 1 and prefix.size > 0:
        raise InvalidInputError("prefix must be a flat token sequence")
    s = int(prefix.size)
    if s >= config.L:
        raise InvalidInputError(f"prefix length {s} leaves no token to predict")
    if s:
        _check_tokens(prefix, "prefix")
    mem = np.asarray(memory, dtype=np.float64)
    if mem.ndim != 2:
        raise InvalidInputError("decode_step takes a single query memory")
    session = DecoderSession(mem[None], params, config)
    logits = session.step(None)
    for i in range(s):
        logits = session.step(prefix[i:i + 1])
    mask = valid_token_mask(config)[s]
    raw = np.where(mask, logits[0], 0.0)           # strip the -inf padding
    return StepDistribution(logits=raw, valid_mask=mask)


# --- training loop ----------------------------------------------------------


def neighbor_context(gallery, query_embeddings, m: int, exclude_ids=None,
                     workers: int = 1):
    """Unit-normalized queries plus their top-m neighbor arrays.

    The gallery stores unit rows, so model inputs go through the same
    normalization.  Returns (queries, neighbor embeddings, neighbor tokens).
    """

    qn = normalized_rows(np.asarray(query_embeddings, dtype=np.float64))
    rows, _ = gallery.top_m_batch(qn, m=m, exclude_self=exclude_ids, workers=workers)
    return qn, gallery.embeddings[rows], gallery.tokens[rows]


def train(ids: np.ndarray, query_embeddings: np.ndarray, targets: np.ndarray,
          gallery, config: ModelConfig | None = None,
          train_config: TrainConfig | None = None,
          checkpoint_path=None, curve_path=None) -> tuple[dict, list]:
    """Minibatch teacher-forced training with per-example retrieval context.

    Each example's neighbors come from the gallery with its own id
    excluded; query embeddings are unit-normalized to match the stored
    gallery rows.  Returns (params, curve) where curve is (step, loss)
    pairs; optionally persists a checkpoint (with its config document)
    and the curve as CSV.
    """

    config = config or ModelConfig()
    tc = train_config or TrainConfig()
    ids = np.asarray(ids)
    q = np.asarray(query_embeddings)
    tgt = _check_tokens(targets, "targets")
    n = ids.shape[0]
    if n == 0:
        raise InvalidInputError("train needs a nonempty dataset")
    if q.shape != (n, config.input_dims) or tgt.shape != (n, config.L):
        raise InvalidInputError("dataset arrays disagree with the model config")
    dtype = np.dtype(tc.dtype).type
    qn = normalized_rows(q.astype(np.float64))
    rows, _ = gallery.top_m_batch(qn, m=config.M, exclude_self=ids,
                                  workers=tc.retrieval_workers)
    gal_emb = gallery.embeddings
    gal_tok = gallery.tokens
    params = init_params(config, seed=tc.seed, dtype=dtype)
    opt = AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=tc.seed, spawn_key=(302,)))
    curve = []
    step = 0
    qd = qn.astype(dtype)
    for _epoch in range(tc.epochs):
        order = rng.permutation(n)
        for start in range(0, n, tc.batch_size):
            idx = order[start:start + tc.batch_size]
            r = rows[idx]
            batch = SequenceBatch(
                query_embeddings=qd[idx],
                neighbor_embeddings=gal_emb[r].astype(dtype),
                neighbor_tokens=gal_tok[r],
                targets=tgt[idx])
            opt.zero_grad()
            loss = sequence_loss_graph(batch, params, config)
            if not np.isfinite(loss.data):
                raise NumericalError(f"training loss diverged at step {step}")
            loss.backward()
            opt.step()
            curve.append((step, float(loss.data)))
            step += 1
    if curve_path is not None:
        with open(curve_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "loss"])
            w.writerows(curve)
    if checkpoint_path is not None:
        save_model(checkpoint_path, params, config)
    return params, curve


# --- persistence ------------------------------------------------------------


def config_doc_path(checkpoint_path) -> pathlib.Path:
    return pathlib.Path(str(checkpoint_path) + ".config.txt")


_CONFIG_FIELDS = ("d_model", "n_heads", "n_layers_enc", "n_layers_dec", "d_ffn",
                  "L", "M", "vocab", "input_dims", "include_query_metadata",
                  "text_dims")


def write_config_doc(path, config: ModelConfig) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"version = {CONFIG_DOC_VERSION}\n")
        for name in _CONFIG_FIELDS:
            v = getattr(config, name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            f.write(f"{name} = {v}\n")


def read_config_doc(path) -> ModelConfig:
    path = pathlib.Path(path)
    kv = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{ln}: expected 'key = value'")
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    if kv.pop("version", None) != str(CONFIG_DOC_VERSION):
        raise DataFormatError(f"{path}: missing or unsupported config version")
    unknown = set(kv) - set(_CONFIG_FIELDS)
    if unknown:
        raise DataFormatError(f"{path}: unknown keys {sorted(unknown)}")
    missing = set(_CONFIG_FIELDS) - set(kv)
    if missing:
        raise DataFormatError(f"{path}: missing keys {sorted(missing)}")
    args = {}
    for name in _CONFIG_FIELDS:
        raw = kv[name]
        if name == "include_query_metadata":
            if raw not in ("true", "false"):
                raise DataFormatError(f"{path}: {name} must be true or false")
            args[name] = raw == "true"
        else:
            try:
                args[name] = int(raw)
            except ValueError:
                raise DataFormatError(f"{path}: {name} must be an integer") from None
    return ModelConfig(**args)


def save_model(path, params: dict, config: ModelConfig) -> None:
    save_tensors(path, SEQMODEL_MAGIC, {k: p.data for k, p in params.items()})
    write_config_doc(config_doc_path(path), config)


def load_model(path, dtype=np.float64) -> tuple[dict, ModelConfig]:
    config = read_config_doc(config_doc_path(path))
    _, arrays = load_tensors(path, SEQMODEL_MAGIC)
    expect = {k: p.shape for k, p in init_params(config, seed=0).items()}
    if set(arrays) != set(expect):
        raise DataFormatError(f"{path}: parameter names disagree with the config")
    for k, a in arrays.items():
        if a.shape != expect[k]:
            raise DataFormatError(f"{path}: {k} has shape {a.shape}, expected {expect[k]}")
    params = {k: Tensor(a.astype(dtype), requires_grad=True) for k, a in arrays.items()}
    return params, config
