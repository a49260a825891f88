"""Exact top-M cosine retrieval over the training exemplars.

Brute-force scan, optionally parallel over contiguous gallery chunks; chunk
results merge deterministically so parallelism never changes the answer.
Ties are broken by ascending entry id everywhere.
"""

from __future__ import annotations

import pathlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .align import Embedding
from .errors import DataFormatError, InvalidInputError
from .geocell import DEFAULT_LEVELS, LatLon, TokenSequence, tokenize_batch

GALLERY_MAGIC = b"GTGL"
GALLERY_VERSION = 1
DEFAULT_M = 15


@dataclass
class GalleryEntry:
    id: int
    embedding: Embedding
    tokens: TokenSequence
    location: LatLon


@dataclass
class RetrievalResult:
    """Ordered (entry id, cosine similarity) pairs, best first."""

    ids: np.ndarray
    sims: np.ndarray

    @property
    def neighbors(self) -> list:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.sims)]

    def __len__(self) -> int:
        return len(self.ids)


def _select_top(sims: np.ndarray, ids: np.ndarray, m: int) -> np.ndarray:
    """Indices of the exact top-m rows by (similarity desc, id asc).

    Includes the whole tie group at the cutoff before ordering, so the
    result matches a full sort of the entire array.
    """
    n = sims.shape[0]
    if m >= n:
        cand = np.arange(n)
    else:
        kth = np.partition(sims, n - m)[n - m]
        cand = np.flatnonzero(sims >= kth)
    order = np.lexsort((ids[cand], -sims[cand]))
    return cand[order[:m]]


class Gallery:
    """Immutable exemplar store answering exact cosine top-M queries."""

    def __init__(self, ids, lat, lon, tokens, embeddings) -> None:
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.lat = np.asarray(lat, dtype=np.float64)
        self.lon = np.asarray(lon, dtype=np.float64)
        self.tokens = np.asarray(tokens, dtype=np.uint8)
        self.embeddings = np.asarray(embeddings, dtype=np.float32)
        self._row_of = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row_of) != len(self.ids):
            raise InvalidInputError("duplicate gallery ids")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def levels(self) -> int:
        return self.tokens.shape[1]

    @classmethod
    def build(cls, entries: list, levels: int = DEFAULT_LEVELS) -> "Gallery":
        """Validate, normalize, and pack entries into contiguous arrays."""
        if not entries:
            raise InvalidInputError("gallery needs at least one entry")
        dim = entries[0].embedding.dim
        ids, lat, lon, toks, embs = [], [], [], [], []
        for e in entries:
            if e.embedding.dim != dim:
                raise InvalidInputError(
                    f"embedding dim {e.embedding.dim} != {dim} for entry {e.id}")
            if len(e.tokens) != levels:
                raise InvalidInputError(
                    f"token length {len(e.tokens)} != {levels} for entry {e.id}")
            ids.append(e.id)
            lat.append(e.location.lat_deg)
            lon.append(e.location.lon_deg)
            toks.append(e.tokens.to_array())
            embs.append(np.asarray(e.embedding.values, dtype=np.float32))
        emb = np.stack(embs)
        norms = np.sqrt((emb.astype(np.float64) ** 2).sum(axis=1))
        if np.any(norms == 0):
            bad = ids[int(np.argmin(norms))]
            raise InvalidInputError(f"zero-norm embedding for entry {bad}")
        emb = (emb / norms[:, None]).astype(np.float32)
        toks = np.stack(toks)
        expect = tokenize_batch(np.asarray(lat), np.asarray(lon), levels)
        if not np.array_equal(toks, expect):
            bad = ids[int(np.flatnonzero((toks != expect).any(axis=1))[0])]
            raise InvalidInputError(f"tokens do not match location for entry {bad}")
        return cls(ids, lat, lon, toks, emb)

    # --- queries --------------------------------------------------------

    def _normalize_query(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=np.float32)
        n = np.sqrt((q.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
        n = np.where(n == 0, 1.0, n)
        return (q / n).astype(np.float32)

    def top_m(self, query, m: int = DEFAULT_M, exclude=None) -> RetrievalResult:
        """Exact top-m neighbors of one query; excluded ids never returned."""
        q = query.values if isinstance(query, Embedding) else np.asarray(query)
        if q.shape[-1] != self.dim:
            raise InvalidInputError(f"query dim {q.shape[-1]} != gallery dim {self.dim}")
        excluded_rows = None
        if exclude:
            excluded_rows = [self._row_of[i] for i in exclude if int(i) in self._row_of]
        avail = len(self) - (len(excluded_rows) if excluded_rows else 0)
        if m < 1:
            raise InvalidInputError("m must be >= 1")
        if m > avail:
            raise InvalidInputError(f"m={m} exceeds available entries {avail}")
        sims = self.embeddings @ self._normalize_query(q)
        if excluded_rows:
            sims = sims.copy()
            sims[excluded_rows] = -np.inf
        rows = _select_top(sims, self.ids, m)
        return RetrievalResult(ids=self.ids[rows], sims=sims[rows])

    def top_m_batch(self, queries: np.ndarray, m: int = DEFAULT_M,
                    exclude_self: np.ndarray | None = None,
                    workers: int = 1, chunk_size: int = 8192,
                    query_block: int = 2048) -> tuple[np.ndarray, np.ndarray]:
        """Top-m rows for many queries at once.

        `exclude_self` gives one entry id per query to mask out (the usual
        no-self-retrieval rule).  Returns (row indices (n, m), sims (n, m));
        ids follow as gallery.ids[rows].  Scans gallery chunks per block of
        queries so peak memory stays near workers * query_block * chunk_size
        similarities; with workers > 1 chunks run on a thread pool but the
        merge is exact either way.
        """
        q = self._normalize_query(np.atleast_2d(queries))
        if q.shape[1] != self.dim:
            raise InvalidInputError(f"query dim {q.shape[1]} != gallery dim {self.dim}")
        avail = len(self) - (1 if exclude_self is not None else 0)
        if not 1 <= m <= avail:
            raise InvalidInputError(f"m={m} outside [1, {avail}]")
        excl_rows = None
        if exclude_self is not None:
            excl_rows = np.asarray(
                [self._row_of.get(int(i), -1) for i in exclude_self], dtype=np.int64)

        starts = list(range(0, len(self), chunk_size))
        final_rows = np.empty((q.shape[0], m), dtype=np.int64)
        final_sims = np.empty((q.shape[0], m), dtype=np.float32)

        def scan(qb: np.ndarray, eb, start: int):
            stop = min(start + chunk_size, len(self))
            sims = qb @ self.embeddings[start:stop].T
            if eb is not None:
                hit = (eb >= start) & (eb < stop)
                sims[hit, eb[hit] - start] = -np.inf
            k = min(m, stop - start)
            out_rows = np.empty((qb.shape[0], k), dtype=np.int64)
            out_sims = np.empty((qb.shape[0], k), dtype=np.float32)
            for r in range(qb.shape[0]):
                # keep the whole cutoff tie group so the global merge is exact
                row = sims[r]
                if k < row.shape[0]:
                    kth = np.partition(row, row.shape[0] - k)[row.shape[0] - k]
                    cand = np.flatnonzero(row >= kth)
                else:
                    cand = np.arange(row.shape[0])
                order = np.lexsort((self.ids[start + cand], -row[cand]))[:k]
                sel = cand[order]
                out_rows[r] = start + sel
                out_sims[r] = row[sel]
            return out_rows, out_sims

        for qa in range(0, q.shape[0], query_block):
            qz = min(qa + query_block, q.shape[0])
            qb = q[qa:qz]
            eb = excl_rows[qa:qz] if excl_rows is not None else None
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    parts = list(pool.map(lambda s: scan(qb, eb, s), starts))
            else:
                parts = [scan(qb, eb, s) for s in starts]
            all_rows = np.concatenate([p[0] for p in parts], axis=1)
            all_sims = np.concatenate([p[1] for p in parts], axis=1)
            for r in range(qb.shape[0]):
                order = np.lexsort((self.ids[all_rows[r]], -all_sims[r]))[:m]
                final_rows[qa + r] = all_rows[r][order]
                final_sims[qa + r] = all_sims[r][order]
        return final_rows, final_sims

    # --- persistence ----------------------------------------------------

    def save(self, path) -> None:
        path = pathlib.Path(path)
        n, d, L = len(self), self.dim, self.levels
        with open(path, "wb") as f:
            f.write(GALLERY_MAGIC)
            f.write(struct.pack("<IQII", GALLERY_VERSION, n, d, L))
            emb = np.ascontiguousarray(self.embeddings, dtype="<f4")
            for r in range(n):
                f.write(struct.pack("<Qdd", int(self.ids[r]),
                                    float(self.lat[r]), float(self.lon[r])))
                f.write(self.tokens[r].tobytes())
                f.write(emb[r].tobytes())

    @classmethod
    def load(cls, path) -> "Gallery":
        path = pathlib.Path(path)
        blob = path.read_bytes()
        if len(blob) < 24 or blob[:4] != GALLERY_MAGIC:
            raise DataFormatError(f"{path}: not a gallery file")
        version, n, d, L = struct.unpack_from("<IQII", blob, 4)
        if version != GALLERY_VERSION:
            raise DataFormatError(f"{path}: unsupported gallery version {version}")
        rec = 8 + 8 + 8 + L + 4 * d
        off = 24
        if len(blob) != off + rec * n:
            raise DataFormatError(
                f"{path}: size {len(blob)} != header promise {off + rec * n}")
        ids = np.empty(n, dtype=np.uint64)
        lat = np.empty(n)
        lon = np.empty(n)
        toks = np.empty((n, L), dtype=np.uint8)
        emb = np.empty((n, d), dtype=np.float32)
        for r in range(n):
            ids[r], lat[r], lon[r] = struct.unpack_from("<Qdd", blob, off)
            off += 24
            toks[r] = np.frombuffer(blob, dtype=np.uint8, count=L, offset=off)
            off += L
            emb[r] = np.frombuffer(blob, dtype="<f4", count=d, offset=off)
            off += 4 * d
        return cls(ids, lat, lon, toks, emb)

    # --- per-id accessors (used by the sequence model) ------------------

    def rows_for_ids(self, ids) -> np.ndarray:
        try:
            return np.asarray([self._row_of[int(i)] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise InvalidInputError(f"unknown gallery id {e.args[0]}") from None
