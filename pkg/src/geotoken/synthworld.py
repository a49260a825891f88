"""Deterministic synthetic world: clustered locations on the sphere with
smooth location-derived features, plus the kNN baseline.

Cluster sizes follow a bounded power law to mimic heavy photo-density
imbalance; features are a fixed seeded random projection of a multi-frequency
encoding of the sample's position, with Gaussian noise as the difficulty dial.
"""

from __future__ import annotations

import json
import pathlib
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataFormatError, InvalidInputError
from .geocell import EARTH_RADIUS_KM, LatLon
from .gallery import Gallery

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_ENC_FREQS = (1.0, 2.0, 4.0, 8.0, 16.0)


@dataclass(frozen=True)
class WorldConfig:
    n_clusters: int = 2000
    size_alpha: float = 2.0          # power-law exponent of cluster sizes
    size_min: int = 5
    size_max: int = 500
    spread_km: float = 10.0
    feature_dim: int = 64
    noise_sigma: float = 0.35
    seed: int = 0
    n_samples: int | None = None     # exact total; trims the final clusters

    def __post_init__(self) -> None:
        if self.n_clusters < 1 or self.size_min < 1 or self.size_max < self.size_min:
            raise InvalidInputError("cluster counts must be >= 1 and max >= min")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if self.feature_dim < 1:
            raise InvalidInputError("feature_dim must be >= 1")


@dataclass
class SynthSample:
    id: int
    lat: float
    lon: float
    text: str
    feat: np.ndarray

    @property
    def location(self) -> LatLon:
        return LatLon(self.lat, self.lon)


def _seq(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def syllable_name(index: int, syllables: int = 3) -> str:
    """Deterministic pronounceable name for an index."""
    out = []
    n = index
    for _ in range(syllables):
        out.append(_CONSONANTS[n % len(_CONSONANTS)])
        n //= len(_CONSONANTS)
        out.append(_VOWELS[n % len(_VOWELS)])
        n //= len(_VOWELS)
    return "".join(out)


def power_law_pmf(cfg: WorldConfig) -> np.ndarray:
    sizes = np.arange(cfg.size_min, cfg.size_max + 1, dtype=np.float64)
    w = sizes ** (-cfg.size_alpha)
    return w / w.sum()


def draw_cluster_sizes(cfg: WorldConfig) -> np.ndarray:
    """IID bounded power-law sizes via inverse CDF."""
    pmf = power_law_pmf(cfg)
    cdf = np.cumsum(pmf)
    u = _seq(cfg.seed, 210).uniform(size=cfg.n_clusters)
    return cfg.size_min + np.searchsorted(cdf, u, side="right").astype(np.int64)


def _cluster_centers(cfg: WorldConfig) -> np.ndarray:
    rng = _seq(cfg.seed, 211)
    z = rng.uniform(-1.0, 1.0, size=cfg.n_clusters)
    lon = rng.uniform(-np.pi, np.pi, size=cfg.n_clusters)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(lon), r * np.sin(lon), z], axis=1)


def _tangent_basis(c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    up = np.array([0.0, 0.0, 1.0])
    if abs(c[2]) > 1.0 - 1e-9:
        up = np.array([1.0, 0.0, 0.0])
    e = np.cross(up, c)
    e /= np.linalg.norm(e)
    return e, np.cross(c, e)


def _encoding_matrix(cfg: WorldConfig) -> np.ndarray:
    base_dim = 6 * len(_ENC_FREQS)
    proj = _seq(cfg.seed, 212).normal(size=(base_dim, cfg.feature_dim))
    return (proj / np.sqrt(base_dim)).astype(np.float64)


def location_encoding(xyz: np.ndarray) -> np.ndarray:
    """Smooth multi-frequency encoding of unit positions (..., 3) -> (..., 30)."""
    parts = []
    for f in _ENC_FREQS:
        parts.append(np.sin(f * xyz))
        parts.append(np.cos(f * xyz))
    return np.concatenate(parts, axis=-1)


def _split_by_id_hash(samples: list) -> tuple[list, list]:
    """Test split = the floor(n/10) samples with the smallest id hashes."""
    keys = [(zlib.crc32(int(s.id).to_bytes(8, "little")), s.id) for s in samples]
    order = np.lexsort(([k[1] for k in keys], [k[0] for k in keys]))
    n_test = len(samples) // 10
    test_idx = set(int(i) for i in order[:n_test])
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return train, test


def generate(cfg: WorldConfig) -> tuple[list, list]:
    """Build the world and return (train, test) sample lists."""
    sizes = draw_cluster_sizes(cfg)
    if cfg.n_samples is not None:
        total = int(sizes.sum())
        if total < cfg.n_samples:
            # deterministically grow the largest cluster to reach the target
            sizes[int(np.argmax(sizes))] += cfg.n_samples - total
        else:
            cum = np.cumsum(sizes)
            cut = int(np.searchsorted(cum, cfg.n_samples))
            sizes = sizes[:cut + 1].copy()
            sizes[cut] -= int(cum[cut]) - cfg.n_samples
            sizes = sizes[sizes > 0]
    centers = _cluster_centers(cfg)[:len(sizes)]
    proj = _encoding_matrix(cfg)
    region_of = _region_names(centers)

    samples: list[SynthSample] = []
    sid = 0
    sigma_rad = cfg.spread_km / EARTH_RADIUS_KM
    for ci, size in enumerate(sizes):
        c = centers[ci]
        e, n = _tangent_basis(c)
        text = f"{syllable_name(ci)}, {region_of[ci]}"
        for _ in range(int(size)):
            rng = _seq(cfg.seed, 213, sid)
            dx, dy = rng.normal(0.0, sigma_rad, size=2)
            r = float(np.hypot(dx, dy))
            if r > 0:
                t = (dx * e + dy * n) / r
                p = np.cos(r) * c + np.sin(r) * t
            else:
                p = c
            p = p / np.linalg.norm(p)
            enc = location_encoding(p)
            feat = enc @ proj
            if cfg.noise_sigma > 0:
                feat = feat + rng.normal(0.0, cfg.noise_sigma, size=cfg.feature_dim)
            lat = float(np.degrees(np.arcsin(np.clip(p[2], -1.0, 1.0))))
            lon = float(np.degrees(np.arctan2(p[1], p[0])))
            samples.append(SynthSample(id=sid, lat=lat, lon=LatLon(lat, lon).lon_deg,
                                       text=text, feat=feat.astype(np.float32)))
            sid += 1
    return _split_by_id_hash(samples)


def _region_names(centers: np.ndarray) -> list:
    """Coarse geographic region label shared by nearby clusters."""
    from .geocell import tokenize_batch
    lat = np.degrees(np.arcsin(np.clip(centers[:, 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(centers[:, 1], centers[:, 0]))
    toks = tokenize_batch(lat, lon, levels=3)
    return [f"{syllable_name(int(t[0]) * 16 + int(t[1]) * 4 + int(t[2]), 2)} region"
            for t in toks]


# --- persistence -------------------------------------------------------------


def save_jsonl(samples: list, path) -> None:
    path = pathlib.Path(path)
    with open(path, "w") as f:
        for s in samples:
            rec = {"id": int(s.id), "lat": float(s.lat), "lon": float(s.lon),
                   "text": s.text, "feat": [float(x) for x in np.asarray(s.feat, dtype=np.float32)]}
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_jsonl(path) -> list:
    path = pathlib.Path(path)
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(SynthSample(
                    id=int(rec["id"]), lat=float(rec["lat"]), lon=float(rec["lon"]),
                    text=str(rec["text"]),
                    feat=np.asarray(rec["feat"], dtype=np.float32)))
            except (KeyError, ValueError, TypeError) as e:
                raise DataFormatError(f"{path}:{ln}: bad dataset record ({e})") from None
    return out


# --- kNN baseline ------------------------------------------------------------


def spherical_centroid(lat_deg: np.ndarray, lon_deg: np.ndarray,
                       weights: np.ndarray | None = None) -> LatLon:
    """Weighted mean of unit vectors, renormalized and converted back."""
    lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
    lon = np.radians(np.asarray(lon_deg, dtype=np.float64))
    xyz = np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon),
                    np.sin(lat)], axis=1)
    if weights is None:
        m = xyz.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=np.float64)
        m = (xyz * w[:, None]).sum(axis=0) / w.sum()
    norm = np.linalg.norm(m)
    if norm < 1e-12:
        # antipodal degenerate mean: fall back to the first point
        return LatLon(float(lat_deg[0]), float(lon_deg[0]))
    m /= norm
    return LatLon(float(np.degrees(np.arcsin(np.clip(m[2], -1, 1)))),
                  float(np.degrees(np.arctan2(m[1], m[0]))))


def knn_baseline(gallery: Gallery, query_embedding, k: int,
                 weighted: bool = False, kernel_sigma: float = 4.0) -> LatLon:
    """Location estimate from the k nearest gallery neighbors.

    Unweighted spherical mean by default; the optional Gaussian variant
    weights neighbors by exp(-d^2 / (2 sigma^2)) over embedding distance.
    """
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    res = gallery.top_m(query_embedding, m=k)
    rows = gallery.rows_for_ids(res.ids)
    lat = gallery.lat[rows]
    lon = gallery.lon[rows]
    if k == 1 or (np.all(lat == lat[0]) and np.all(lon == lon[0])):
        return LatLon(float(lat[0]), float(lon[0]))
    weights = None
    if weighted:
        d2 = np.maximum(0.0, 2.0 - 2.0 * res.sims.astype(np.float64))
        weights = np.exp(-d2 / (2.0 * kernel_sigma ** 2))
    return spherical_centroid(lat, lon, weights)


def knn_baseline_batch(gallery: Gallery, queries: np.ndarray, k: int,
                       weighted: bool = False, kernel_sigma: float = 4.0,
                       workers: int = 1) -> list:
    """Vectorized retrieval, per-query centroid; order matches `queries`."""
    rows, sims = gallery.top_m_batch(queries, m=k, workers=workers)
    out = []
    for r in range(rows.shape[0]):
        lat = gallery.lat[rows[r]]
        lon = gallery.lon[rows[r]]
        if k == 1 or (np.all(lat == lat[0]) and np.all(lon == lon[0])):
            out.append(LatLon(float(lat[0]), float(lon[0])))
            continue
        weights = None
        if weighted:
            d2 = np.maximum(0.0, 2.0 - 2.0 * sims[r].astype(np.float64))
            weights = np.exp(-d2 / (2.0 * kernel_sigma ** 2))
        out.append(spherical_centroid(lat, lon, weights))
    return out


def to_gallery_entries(samples: list, encoder, levels: int | None = None) -> list:
    """Project sample features through the alignment encoder into entries."""
    from .align import Embedding
    from .geocell import DEFAULT_LEVELS, TokenSequence, tokenize_batch
    levels = levels or DEFAULT_LEVELS
    feats = np.asarray([s.feat for s in samples], dtype=np.float32)
    _, _, e_img = encoder.project_image_batch(feats)
    lat = np.asarray([s.lat for s in samples])
    lon = np.asarray([s.lon for s in samples])
    toks = tokenize_batch(lat, lon, levels)
    from .gallery import GalleryEntry
    return [GalleryEntry(id=int(s.id), embedding=Embedding(e_img[i]),
                         tokens=TokenSequence.from_array(toks[i]),
                         location=LatLon(float(lat[i]), float(lon[i])))
            for i, s in enumerate(samples)]
