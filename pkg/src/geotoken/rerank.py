"""Pick one location out of a pool of decoded candidates.

Five selectors share the same shape: given the candidates sampled for a
query, return one of them (the judge in free mode may return a fresh
coordinate instead).  The local selectors are pure functions and break
score ties toward the lowest candidate index; the judge selector talks
to an external vision-language endpoint through a pluggable transport
and falls back to the log-probability selector whenever the call or the
reply parse fails, tagging the result so callers can count fallbacks.

The learned selector is a two-bin linear classifier over per-candidate
features: the one-hot token sequence, the model log-probability, and for
each prefix length the fraction of the query's retrieved neighbors that
agree with the candidate up to that length.
"""

from __future__ import annotations

import base64
import json
import os
import pathlib
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np
import requests

from .align import (Embedding, GpsEncoderParams, gps_forward, mercator_xy,
                    normalized_rows, rff_features)
from .checkpoints import REWARD_MAGIC, load_tensors, save_tensors
from .decode import sample_pool
from .errors import ConfigError, DataFormatError, InvalidInputError
from .geocell import DEFAULT_LEVELS, FACES, LatLon, common_prefix_len_batch
from .geodesy import haversine_km_batch
from .nn import AdamW, Tensor, log_softmax, take_last_axis, zeros_param
from .seqmodel import EncoderInput, encode, neighbor_context

JUDGE_URL_ENV = "GEOTOKEN_JUDGE_URL"
POOL_SELECTION = "pool_selection"
FREE_GENERATION = "free_generation"
JUDGE_MODES = (POOL_SELECTION, FREE_GENERATION)

# coordinates must echo within this tolerance to count as a pool member
POOL_MATCH_TOL_DEG = 1e-6


def _require_pool(pool) -> tuple:
    cands = tuple(pool)
    if not cands:
        raise InvalidInputError("selector needs a nonempty candidate pool")
    return cands


# --- candidate features -----------------------------------------------------


def candidate_features(tokens, logprob: float, neighbor_tokens,
                       vocab: int = FACES) -> np.ndarray:
    """Feature vector for one candidate given its query's neighbor tokens.

    Layout: flattened one-hot tokens (L * vocab), the sequence
    log-probability (1), then for each prefix length 1..L the fraction
    of neighbors sharing at least that prefix with the candidate (L).
    """

    toks = np.asarray(tokens, dtype=np.int64)
    nt = np.asarray(neighbor_tokens)
    if toks.ndim != 1 or toks.size == 0:
        raise InvalidInputError("candidate tokens must be a flat nonempty sequence")
    L = toks.shape[0]
    if nt.ndim != 2 or nt.shape[1] != L:
        raise InvalidInputError(
            f"neighbor tokens must be (m, {L}), got {nt.shape}")
    if toks.min() < 0 or toks.max() >= vocab:
        raise InvalidInputError("candidate token outside the vocabulary")
    onehot = np.zeros((L, vocab))
    onehot[np.arange(L), toks] = 1.0
    m = nt.shape[0]
    if m:
        lens = common_prefix_len_batch(np.broadcast_to(toks, nt.shape), nt)
        agree = (lens[:, None] >= np.arange(1, L + 1)).mean(axis=0)
    else:
        agree = np.zeros(L)
    return np.concatenate([onehot.ravel(), [float(logprob)], agree])


def pool_features(pool, neighbor_tokens, vocab: int = FACES) -> np.ndarray:
    """Stacked candidate_features rows for a whole pool, in pool order."""
    cands = _require_pool(pool)
    return np.stack([candidate_features(c.tokens.to_array(), c.logprob,
                                        neighbor_tokens, vocab)
                     for c in cands])


def reward_feature_dim(L: int = DEFAULT_LEVELS, vocab: int = FACES) -> int:
    return L * vocab + 1 + L


# --- learned two-bin classifier ---------------------------------------------


@dataclass(frozen=True)
class RewardModelParams:
    """Linear classifier scoring candidates into close / far error bins.

    Bin 0 collects candidates landing strictly inside `threshold_km` of
    the truth; everything at or beyond the threshold is bin 1.  Features
    are standardized with the stored training moments before the linear
    map.
    """

    w: np.ndarray              # (n_features, 2)
    b: np.ndarray              # (2,)
    mu: np.ndarray             # (n_features,) training means
    sd: np.ndarray             # (n_features,) training scales, floored
    L: int = DEFAULT_LEVELS
    vocab: int = FACES
    threshold_km: float = 200.0

    @property
    def n_features(self) -> int:
        return reward_feature_dim(self.L, self.vocab)


@dataclass(frozen=True)
class RewardTrainConfig:
    """Pool sampling and classifier fitting settings.

    `n_queries` caps how many training queries contribute pools; None
    uses the whole split.
    """

    pool_size: int = 30
    temperature: float = 0.7
    threshold_km: float = 200.0
    lr: float = 0.05
    weight_decay: float = 0.0
    epochs: int = 40
    batch_size: int = 256
    seed: int = 0
    workers: int = 1
    n_queries: int | None = None

    def __post_init__(self) -> None:
        if self.pool_size < 1 or self.epochs < 1 or self.batch_size < 1 \
                or self.workers < 1:
            raise ConfigError("pool_size, epochs, batch_size, and workers "
                              "must be >= 1")
        if self.temperature <= 0 or self.threshold_km <= 0 or self.lr <= 0:
            raise ConfigError("temperature, threshold_km, and lr must be positive")
        if self.n_queries is not None and self.n_queries < 1:
            raise ConfigError("n_queries must be >= 1 when set")


def reward_probs(rm: RewardModelParams, features) -> np.ndarray:
    """Per-candidate (close, far) probabilities; each row sums to one."""
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != rm.n_features:
        raise InvalidInputError(
            f"expected {rm.n_features} features, got {x.shape[1]}")
    logits = ((x - rm.mu) / rm.sd) @ rm.w + rm.b
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if single else p


def fit_reward_classifier(features, labels, config: RewardTrainConfig | None = None,
                          L: int = DEFAULT_LEVELS,
                          vocab: int = FACES) -> RewardModelParams:
    """Cross-entropy fit of the two-bin classifier on labeled candidates.

    Labels are 0 (close) or 1 (far); a single-class label set cannot
    calibrate a two-bin model and is rejected with a diagnostic.
    """

    cfg = config or RewardTrainConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise InvalidInputError(
            f"features {x.shape} and labels {y.shape} do not line up")
    if x.shape[0] == 0:
        raise InvalidInputError("no candidates to fit on")
    if x.shape[1] != reward_feature_dim(L, vocab):
        raise InvalidInputError(
            f"expected {reward_feature_dim(L, vocab)} features, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite feature values")
    y = y.astype(np.int64)
    if np.any((y < 0) | (y > 1)):
        raise InvalidInputError("labels must be 0 (close) or 1 (far)")
    counts = np.bincount(y, minlength=2)
    if counts.min() == 0:
        raise InvalidInputError(
            f"degenerate labels: {int(counts[0])} candidates under "
            f"{cfg.threshold_km} km and {int(counts[1])} at or beyond; "
            "both bins are needed to fit the classifier")

    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    z = (x - mu) / sd
    w = zeros_param((x.shape[1], 2))
    b = zeros_param((2,))
    opt = AdamW({"w": w, "b": b}, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed,
                                                       spawn_key=(402,)))
    n = x.shape[0]
    for _epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = Tensor(z[idx]) @ w + b
            loss = -(take_last_axis(log_softmax(logits), y[idx])).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
    return RewardModelParams(w=w.data.copy(), b=b.data.copy(), mu=mu, sd=sd,
                             L=L, vocab=vocab, threshold_km=cfg.threshold_km)


def _pool_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(403, index))
    return int(ss.generate_state(1)[0])


def train_reward_model(ids, query_embeddings, lat, lon, gallery, params,
                       model_config, config: RewardTrainConfig | None = None,
                       checkpoint_path=None) -> RewardModelParams:
    """Fit the classifier on pools sampled from a trained sequence model.

    For each training query: retrieve its neighbor context (own id
    excluded), sample a candidate pool, label every candidate by whether
    its detokenized location lands inside `threshold_km` of the truth,
    then fit on the union of all labeled candidates.
    """

    cfg = config or RewardTrainConfig()
    ids = np.asarray(ids)
    query_embeddings = np.asarray(query_embeddings)
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    n = ids.shape[0]
    if n == 0:
        raise InvalidInputError("reward training needs a nonempty split")
    if lat.shape != (n,) or lon.shape != (n,):
        raise InvalidInputError("ids and coordinates do not line up")
    if cfg.n_queries is not None and cfg.n_queries < n:
        pick_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(404,)))
        keep = np.sort(pick_rng.permutation(n)[:cfg.n_queries])
        ids, lat, lon = ids[keep], lat[keep], lon[keep]
        query_embeddings = query_embeddings[keep]
        n = cfg.n_queries
    qn, nb, nt = neighbor_context(gallery, query_embeddings, m=model_config.M,
                                  exclude_ids=ids, workers=cfg.workers)
    feats = []
    labels = []
    chunk = 128
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        mems = encode([EncoderInput(qn[i], nb[i], nt[i])
                       for i in range(start, stop)], params, model_config)
        for j, i in enumerate(range(start, stop)):
            pool = sample_pool(mems[j], params, model_config, cfg.temperature,
                               cfg.pool_size, seed=_pool_seed(cfg.seed, i))
            clat = np.asarray([c.location.lat_deg for c in pool])
            clon = np.asarray([c.location.lon_deg for c in pool])
            err = haversine_km_batch(clat, clon, lat[i], lon[i])
            labels.append((err >= cfg.threshold_km).astype(np.int64))
            for c in pool:
                feats.append(candidate_features(c.tokens.to_array(), c.logprob,
                                                nt[i], vocab=model_config.vocab))
    rm = fit_reward_classifier(np.stack(feats), np.concatenate(labels), cfg,
                               L=model_config.L, vocab=model_config.vocab)
    if checkpoint_path is not None:
        save_reward_model(checkpoint_path, rm)
    return rm


_REWARD_KEYS = frozenset({"w", "b", "mu", "sd", "meta"})


def save_reward_model(path, rm: RewardModelParams) -> None:
    meta = np.asarray([rm.L, rm.vocab, rm.threshold_km], dtype=np.float64)
    save_tensors(path, REWARD_MAGIC, {"w": rm.w, "b": rm.b, "mu": rm.mu,
                                      "sd": rm.sd, "meta": meta})


def load_reward_model(path) -> RewardModelParams:
    _, tensors = load_tensors(path, REWARD_MAGIC)
    if set(tensors) != _REWARD_KEYS:
        raise DataFormatError(
            f"{path}: unexpected tensor names {sorted(tensors)}")
    meta = tensors["meta"]
    if meta.shape != (3,):
        raise DataFormatError(f"{path}: malformed meta record")
    L, vocab = int(round(float(meta[0]))), int(round(float(meta[1])))
    nf = reward_feature_dim(L, vocab)
    shapes = {"w": (nf, 2), "b": (2,), "mu": (nf,), "sd": (nf,)}
    for name, want in shapes.items():
        if tensors[name].shape != want:
            raise DataFormatError(
                f"{path}: {name} has shape {tensors[name].shape}, expected {want}")
    return RewardModelParams(
        w=tensors["w"].astype(np.float64), b=tensors["b"].astype(np.float64),
        mu=tensors["mu"].astype(np.float64), sd=tensors["sd"].astype(np.float64),
        L=L, vocab=vocab, threshold_km=float(meta[2]))


# --- local selectors --------------------------------------------------------


def select_logprob(pool):
    """Candidate with the highest model log-probability."""
    cands = _require_pool(pool)
    scores = np.asarray([c.logprob for c in cands])
    return cands[int(np.argmax(scores))]


def select_reward(pool, rm: RewardModelParams, neighbor_tokens):
    """Candidate the classifier rates most likely to land in the close bin."""
    cands = _require_pool(pool)
    probs = reward_probs(rm, pool_features(cands, neighbor_tokens, rm.vocab))
    return cands[int(np.argmax(probs[:, 0]))]


def _gps_embed_locations(locations, gps: GpsEncoderParams) -> np.ndarray:
    lat = np.asarray([p.lat_deg for p in locations])
    lon = np.asarray([p.lon_deg for p in locations])
    feats = rff_features(mercator_xy(lat, lon), gps.rff_frequencies,
                         gps.rff_phases)
    return gps_forward(gps.ffn_weights, feats).data


def select_similarity(pool, query_embedding, gps_encoder):
    """Candidate whose location embeds closest to the query's image view.

    `query_embedding` is the image embedding component trained against
    GPS; `gps_encoder` is the matching location tower (either the
    parameter bundle or an encoder exposing `gps_params()`).  Scores are
    cosine similarities between unit vectors.
    """

    cands = _require_pool(pool)
    if hasattr(gps_encoder, "gps_params"):
        gps_encoder = gps_encoder.gps_params
    q = query_embedding.values if isinstance(query_embedding, Embedding) \
        else np.asarray(query_embedding)
    if q.ndim != 1:
        raise InvalidInputError("query embedding must be a flat vector")
    e = _gps_embed_locations([c.location for c in cands], gps_encoder)
    if e.shape[1] != q.shape[0]:
        raise InvalidInputError(
            f"query dim {q.shape[0]} != location embedding dim {e.shape[1]}")
    sims = normalized_rows(e) @ normalized_rows(q[None, :])[0]
    return cands[int(np.argmax(sims))]


def select_ideal(pool, truth: LatLon):
    """Candidate geodesically closest to the true location.

    An oracle: no live selector that returns pool members can beat it.
    """

    cands = _require_pool(pool)
    lat = np.asarray([c.location.lat_deg for c in cands])
    lon = np.asarray([c.location.lon_deg for c in cands])
    err = haversine_km_batch(lat, lon, truth.lat_deg, truth.lon_deg)
    return cands[int(np.argmin(err))]


# --- external judge ---------------------------------------------------------


_NUM = r"[+-]?(?:\d+(?:\.\d+)?|\.\d+)"
_COORD_RE = re.compile(rf"({_NUM})\s*,\s*({_NUM})")

_PROMPT_FILES = {POOL_SELECTION: "pool_selection_v1.txt",
                 FREE_GENERATION: "free_generation_v1.txt"}


def load_prompt_template(mode: str) -> str:
    """Packaged prompt text for a judge mode; versioned by file name."""
    if mode not in _PROMPT_FILES:
        raise ConfigError(f"unknown judge mode {mode!r}")
    return (resources.files("geotoken") / "prompts"
            / _PROMPT_FILES[mode]).read_text()


def format_candidate_list(pool) -> str:
    """Numbered 'lat, lon' lines, six decimals, in pool order."""
    return "\n".join(
        f"{i + 1}. {c.location.lat_deg:.6f}, {c.location.lon_deg:.6f}"
        for i, c in enumerate(pool))


def parse_judge_reply(text: str) -> LatLon | None:
    """First 'lat, lon' pair of signed decimals found anywhere in the text."""
    m = _COORD_RE.search(text)
    if m is None:
        return None
    try:
        return LatLon(float(m.group(1)), float(m.group(2)))
    except InvalidInputError:
        return None


def match_pool_member(loc: LatLon, pool, tol: float = POOL_MATCH_TOL_DEG) -> int | None:
    """Lowest pool index whose location agrees with loc within tol degrees."""
    for i, c in enumerate(pool):
        dlat = abs(loc.lat_deg - c.location.lat_deg)
        dlon = abs(loc.lon_deg - c.location.lon_deg) % 360.0
        dlon = min(dlon, 360.0 - dlon)
        if dlat <= tol and dlon <= tol:
            return i
    return None


@dataclass(frozen=True)
class JudgeConfig:
    """How to reach the external judge and which protocol to speak.

    `endpoint` falls back to the GEOTOKEN_JUDGE_URL environment variable;
    it only has to resolve when a live HTTP transport is actually used.
    Prompt overrides replace the packaged template text for their mode.
    """

    endpoint: str | None = None
    model: str = "judge"
    mode: str = POOL_SELECTION
    timeout_s: float = 30.0
    retries: int = 2
    prompt_pool: str | None = None
    prompt_free: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in JUDGE_MODES:
            raise ConfigError(
                f"judge mode must be one of {JUDGE_MODES}, got {self.mode!r}")
        if self.timeout_s <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout_s}")
        if self.retries < 0:
            raise ConfigError(f"retry count must be >= 0, got {self.retries}")


@dataclass(frozen=True)
class JudgeResult:
    """One judged query: the location plus how it was obtained.

    `fallback` is set when the transport or the reply parse failed and
    the log-probability selector answered instead.  `selected_index` is
    the pool member the location came from, when there is one.
    """

    location: LatLon
    fallback: bool
    mode: str
    selected_index: int | None = None
    response: str | None = None
    reason: str = "ok"


class JudgeTransport:
    """Sends one request body to the judge; returns the raw reply text."""

    def post(self, url: str, body: dict, timeout: float) -> str:
        raise NotImplementedError


class HttpJudgeTransport(JudgeTransport):
    """JSON POST over HTTP; non-2xx responses raise and count as failures."""

    def post(self, url: str, body: dict, timeout: float) -> str:
        r = requests.post(url, json=body, timeout=timeout)
        r.raise_for_status()
        return r.text


class RecordedJudgeTransport(JudgeTransport):
    """Replays scripted replies in call order and records every request.

    A reply that is an Exception instance is raised instead of returned,
    which lets tests script timeouts and transport failures.
    """

    def __init__(self, replies) -> None:
        self.replies = list(replies)
        self.requests: list = []
        self._next = 0
        self._lock = threading.Lock()

    def post(self, url: str, body: dict, timeout: float) -> str:
        with self._lock:
            i = self._next
            self._next += 1
            self.requests.append({"url": url, "body": body, "timeout": timeout})
        if i >= len(self.replies):
            raise InvalidInputError("recorded transport ran out of replies")
        reply = self.replies[i]
        if isinstance(reply, Exception):
            raise reply
        return reply


_TRANSPORT_ERRORS = (requests.RequestException, TimeoutError, OSError)


def _image_payload(image_ref) -> str:
    if isinstance(image_ref, bytes):
        return base64.b64encode(image_ref).decode("ascii")
    if isinstance(image_ref, pathlib.Path):
        return base64.b64encode(image_ref.read_bytes()).decode("ascii")
    if isinstance(image_ref, str):
        if os.path.isfile(image_ref):
            return base64.b64encode(
                pathlib.Path(image_ref).read_bytes()).decode("ascii")
        return image_ref                    # already encoded or opaque
    raise InvalidInputError(
        f"image reference must be bytes, a path, or a string, got {type(image_ref)}")


class JudgeClient:
    """Judge calls over one transport, with retries, fallback, and audit.

    Each query sends at most one request at a time; `select_batch` may
    run several queries in parallel but never overlaps requests for the
    same query.  When `audit_path` is set every call appends one JSON
    line recording the raw reply and the outcome.
    """

    def __init__(self, config: JudgeConfig, transport: JudgeTransport | None = None,
                 audit_path=None) -> None:
        self.config = config
        endpoint = config.endpoint or os.environ.get(JUDGE_URL_ENV)
        if transport is None:
            if not endpoint:
                raise ConfigError(
                    f"no judge endpoint: set JudgeConfig.endpoint or {JUDGE_URL_ENV}")
            transport = HttpJudgeTransport()
        self.endpoint = endpoint or "fixture:judge"
        self.transport = transport
        self.audit_path = audit_path
        self._audit_lock = threading.Lock()
        self._templates = {
            POOL_SELECTION: config.prompt_pool or load_prompt_template(POOL_SELECTION),
            FREE_GENERATION: config.prompt_free or load_prompt_template(FREE_GENERATION),
        }

    def build_prompt(self, pool) -> str:
        return self._templates[self.config.mode].replace(
            "{candidate_list}", format_candidate_list(pool))

    def _audit(self, record: dict) -> None:
        if self.audit_path is None:
            return
        line = json.dumps(record, separators=(",", ":")) + "\n"
        with self._audit_lock:
            with open(self.audit_path, "a") as f:
                f.write(line)

    def select(self, pool, image_ref=None, query_id=None) -> JudgeResult:
        cands = _require_pool(pool)
        cfg = self.config
        body = {"model": cfg.model, "prompt": self.build_prompt(cands)}
        if image_ref is not None:
            body["image_base64"] = _image_payload(image_ref)

        reply = None
        attempts = 0
        for _ in range(cfg.retries + 1):
            attempts += 1
            try:
                reply = self.transport.post(self.endpoint, body, cfg.timeout_s)
                break
            except _TRANSPORT_ERRORS:
                continue

        if reply is None:
            result = self._fallback(cands, None, "transport_error")
        else:
            loc = parse_judge_reply(reply)
            if loc is None:
                result = self._fallback(cands, reply, "parse_error")
            elif cfg.mode == POOL_SELECTION:
                idx = match_pool_member(loc, cands)
                if idx is None:
                    result = self._fallback(cands, reply, "parse_error")
                else:
                    result = JudgeResult(cands[idx].location, False, cfg.mode,
                                         selected_index=idx, response=reply)
            else:
                idx = match_pool_member(loc, cands)
                result = JudgeResult(loc, False, cfg.mode,
                                     selected_index=idx, response=reply)

        self._audit({
            "query_id": query_id, "mode": cfg.mode, "model": cfg.model,
            "endpoint": self.endpoint, "attempts": attempts,
            "response": result.response, "fallback": result.fallback,
            "reason": result.reason, "lat": result.location.lat_deg,
            "lon": result.location.lon_deg,
            "selected_index": result.selected_index,
        })
        return result

    def _fallback(self, cands, reply, reason: str) -> JudgeResult:
        best = select_logprob(cands)
        idx = next(i for i, c in enumerate(cands) if c is best)
        return JudgeResult(best.location, True, self.config.mode,
                           selected_index=idx, response=reply, reason=reason)

    def select_batch(self, pools, image_refs=None, query_ids=None,
                     workers: int = 1) -> list:
        """Judge many pools; results come back in input order."""
        pools = list(pools)
        n = len(pools)
        refs = list(image_refs) if image_refs is not None else [None] * n
        qids = list(query_ids) if query_ids is not None else list(range(n))
        if len(refs) != n or len(qids) != n:
            raise InvalidInputError("pools, image refs, and ids do not line up")
        if workers <= 1 or n <= 1:
            return [self.select(p, r, q) for p, r, q in zip(pools, refs, qids)]
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(self.select, p, r, q)
                    for p, r, q in zip(pools, refs, qids)]
            return [f.result() for f in futs]


def select_judge(pool, image_ref, config: JudgeConfig,
                 transport: JudgeTransport | None = None,
                 audit_path=None, query_id=None) -> JudgeResult:
    """One-shot judge call; see JudgeClient for the full protocol."""
    client = JudgeClient(config, transport=transport, audit_path=audit_path)
    return client.select(pool, image_ref, query_id=query_id)
