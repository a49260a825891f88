"""Autoregressive decoding: greedy, temperature sampling, beams, pools.

Every decoder walks the same cached session from :mod:`geotoken.seqmodel`
and records cumulative natural log-probabilities under the model's raw
(unscaled) step distributions; temperature only reshapes the sampling
distribution, never the bookkeeping.
"""

from __future__ import annotations

import json
import pathlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, InvalidInputError
from .geocell import LatLon, TokenSequence, detokenize
from .seqmodel import DecoderSession, ModelConfig, masked_log_softmax


@dataclass(frozen=True)
class Candidate:
    """One decoded sequence with its model log-probability."""

    tokens: TokenSequence
    logprob: float
    location: LatLon


@dataclass(frozen=True)
class CandidatePool:
    """Independent samples from one memory, in draw order."""

    candidates: tuple
    seed: int
    temperature: float

    def __len__(self) -> int:
        return len(self.candidates)

    def __getitem__(self, i) -> Candidate:
        return self.candidates[i]

    def __iter__(self):
        return iter(self.candidates)


def _as_memory(memory: np.ndarray) -> np.ndarray:
    mem = np.asarray(memory, dtype=np.float64)
    if mem.ndim != 2:
        raise InvalidInputError("decoding works on a single query memory")
    return mem


def _candidate(tokens: np.ndarray, logprob: float) -> Candidate:
    seq = TokenSequence.from_array(tokens)
    return Candidate(tokens=seq, logprob=float(logprob), location=detokenize(seq))


def greedy_batch(memories: np.ndarray, params: dict,
                 config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Greedy tokens and logprobs for a batch of memories at once."""

    mem = np.asarray(memories, dtype=np.float64)
    if mem.ndim == 2:
        mem = mem[None]
    R = mem.shape[0]
    session = DecoderSession(mem, params, config)
    tokens = np.zeros((R, config.L), dtype=np.int64)
    logprob = np.zeros(R)
    prev = None
    for s in range(config.L):
        logits = session.step(prev)
        lp = masked_log_softmax(logits)
        prev = np.argmax(logits, axis=1)        # first max wins: lowest index
        tokens[:, s] = prev
        logprob += lp[np.arange(R), prev]
    return tokens, logprob


def greedy(memory: np.ndarray, params: dict, config: ModelConfig) -> Candidate:
    """Highest-probability token at each step; ties to the lowest index."""

    tokens, logprob = greedy_batch(_as_memory(memory), params, config)
    return _candidate(tokens[0], logprob[0])


def _sample_rows(memory: np.ndarray, params: dict, config: ModelConfig,
                 temperature: float, rngs: list) -> tuple[np.ndarray, np.ndarray]:
    """Lockstep sampling for several candidates sharing one memory.

    Each row draws exactly one uniform per step from its own generator,
    so results do not depend on how rows are grouped into batches.
    """

    R = len(rngs)
    session = DecoderSession(np.broadcast_to(memory, (R,) + memory.shape),
                             params, config)
    tokens = np.zeros((R, config.L), dtype=np.int64)
    logprob = np.zeros(R)
    prev = None
    for s in range(config.L):
        logits = session.step(prev)
        lp_raw = masked_log_softmax(logits)
        probs = np.exp(masked_log_softmax(logits / temperature))
        cdf = np.cumsum(probs, axis=1)
        u = np.array([rng.random() for rng in rngs])
        prev = np.empty(R, dtype=np.int64)
        for r in range(R):
            t = int(np.searchsorted(cdf[r], u[r], side="right"))
            if t >= config.vocab or probs[r, t] == 0.0:
                t = int(np.flatnonzero(probs[r] > 0)[-1])   # rounding tail
            prev[r] = t
        tokens[:, s] = prev
        logprob += lp_raw[np.arange(R), prev]
    return tokens, logprob


def sample(memory: np.ndarray, params: dict, config: ModelConfig,
           temperature: float, rng: np.random.Generator) -> Candidate:
    """One sequence drawn from the temperature-scaled step distributions."""

    if temperature <= 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    tokens, logprob = _sample_rows(_as_memory(memory), params, config,
                                   float(temperature), [rng])
    return _candidate(tokens[0], logprob[0])


def candidate_rng(seed: int, index: int) -> np.random.Generator:
    """The private stream for pool candidate `index` under `seed`."""

    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(401, index)))


def sample_pool(memory: np.ndarray, params: dict, config: ModelConfig,
                temperature: float, k: int, seed: int,
                workers: int = 1) -> CandidatePool:
    """K independent samples in draw order; duplicates are kept.

    Candidate i always uses the stream derived from (seed, i), so the
    pool is identical however the work is split across workers.
    """

    if temperature <= 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    if k < 1:
        raise InvalidInputError(f"pool size must be >= 1, got {k}")
    mem = _as_memory(memory)
    temperature = float(temperature)

    def run(indices: range) -> tuple[np.ndarray, np.ndarray]:
        return _sample_rows(mem, params, config, temperature,
                            [candidate_rng(seed, i) for i in indices])

    if workers > 1:
        spans = [range(a, min(a + (k + workers - 1) // workers, k))
                 for a in range(0, k, (k + workers - 1) // workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, spans))
        tokens = np.concatenate([p[0] for p in parts])
        logprob = np.concatenate([p[1] for p in parts])
    else:
        tokens, logprob = run(range(k))
    cands = tuple(_candidate(tokens[i], logprob[i]) for i in range(k))
    return CandidatePool(candidates=cands, seed=seed, temperature=temperature)


def beam_search(memory: np.ndarray, params: dict, config: ModelConfig,
                width: int) -> list[Candidate]:
    """Width-B beam over all L steps, no length normalization.

    Returns up to B candidates sorted by logprob descending, exact ties
    broken by lexicographic token order.  A width larger than the number
    of distinct paths is clamped, never an error.
    """

    if width < 1:
        raise InvalidInputError(f"beam width must be >= 1, got {width}")
    mem = _as_memory(memory)
    session = DecoderSession(mem[None], params, config)
    tokens = np.zeros((1, 0), dtype=np.int64)
    scores = np.zeros(1)
    prev = None
    for s in range(config.L):
        logits = session.step(prev)
        lp = masked_log_softmax(logits)                      # (R, vocab)
        total = scores[:, None] + lp
        beam_idx, tok_idx = np.nonzero(np.isfinite(total))
        cand_scores = total[beam_idx, tok_idx]
        cand_tokens = np.concatenate(
            [tokens[beam_idx], tok_idx[:, None]], axis=1)
        keys = [cand_tokens[:, j] for j in range(s, -1, -1)] + [-cand_scores]
        order = np.lexsort(keys)[:width]
        tokens = cand_tokens[order]
        scores = cand_scores[order]
        session.select(beam_idx[order])
        prev = tokens[:, -1]
    return [_candidate(tokens[i], scores[i]) for i in range(tokens.shape[0])]


# --- pool persistence -------------------------------------------------------


def dump_pools(path, pools) -> None:
    """JSON Lines dump: one candidate per line, ranked within its pool.

    `pools` is an iterable of (query_id, pool-or-candidate-list) pairs.
    """

    with open(path, "w", newline="\n") as f:
        for query_id, pool in pools:
            cands = pool.candidates if isinstance(pool, CandidatePool) else pool
            for rank, c in enumerate(cands):
                f.write(json.dumps({
                    "query_id": int(query_id),
                    "rank": rank,
                    "tokens": str(c.tokens),
                    "lat": c.location.lat_deg,
                    "lon": c.location.lon_deg,
                    "logprob": c.logprob,
                }, separators=(",", ":")) + "\n")


def load_pool_dump(path) -> dict:
    """Read a dump back as {query_id: [Candidate, ...]} in rank order."""

    path = pathlib.Path(path)
    rows: dict[int, list] = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            qid = int(rec["query_id"])
            rank = int(rec["rank"])
            cand = Candidate(tokens=TokenSequence.from_string(rec["tokens"]),
                             logprob=float(rec["logprob"]),
                             location=LatLon(float(rec["lat"]), float(rec["lon"])))
        except (KeyError, ValueError, json.JSONDecodeError) as e:
            raise DataFormatError(f"{path}:{ln}: bad pool record ({e})") from None
        rows.setdefault(qid, []).append((rank, cand))
    out = {}
    for qid, ranked in rows.items():
        ranked.sort(key=lambda rc: rc[0])
        if [r for r, _ in ranked] != list(range(len(ranked))):
            raise DataFormatError(f"{path}: query {qid} has gaps in rank order")
        out[qid] = [c for _, c in ranked]
    return out
