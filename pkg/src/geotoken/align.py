"""Geo-aligned embeddings: GPS, text, and image-feature encoders trained
with a symmetric InfoNCE objective.

The GPS path is Mercator projection then multi-scale random Fourier features
then a small feed-forward net.  The text path is hashed character 3-grams
with a trainable projection.  Image features get two trainable projections
whose outputs are concatenated onto the raw feature to form the final image
embedding used for retrieval and as model input.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoints import ALIGN_MAGIC, load_tensors, save_tensors
from .errors import InvalidInputError, NumericalError
from .geocell import LatLon
from .nn import AdamW, Tensor

MERCATOR_MAX_LAT_DEG = 85.05113


@dataclass
class Embedding:
    """Fixed-length real vector; normalized copies are made on demand."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def normalized(self) -> np.ndarray:
        return normalized_rows(self.values)


def normalized_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Row-wise L2 normalization; zero rows stay zero."""
    x = np.asarray(x)
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True) + eps)
    return x / n


@dataclass
class AlignConfig:
    raw_dim: int = 64
    proj_dim: int = 32
    rff_scales: tuple = (1.0, 4.0, 16.0, 64.0)
    rff_per_scale: int = 32
    gps_hidden: int = 128
    text_buckets: int = 4096
    temperature: float = 0.07
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0

    @property
    def rff_dim(self) -> int:
        return 2 * self.rff_per_scale * len(self.rff_scales)

    @property
    def image_dim(self) -> int:
        return self.raw_dim + 2 * self.proj_dim


@dataclass
class GpsEncoderParams:
    """Frozen Fourier-feature bank plus the trainable feed-forward weights."""

    scales: tuple
    rff_frequencies: list      # per scale: (2, m) float32, drawn once
    rff_phases: list           # per scale: (m,) float32 in [0, 2pi)
    ffn_weights: dict          # w1, b1, w2, b2 as Tensors


# --- deterministic raw feature paths ---------------------------------------


def mercator_xy(lat_deg, lon_deg) -> np.ndarray:
    """Web-Mercator coordinates in radians, latitude clamped to +/-85.05113."""
    lat = np.clip(np.asarray(lat_deg, dtype=np.float64),
                  -MERCATOR_MAX_LAT_DEG, MERCATOR_MAX_LAT_DEG)
    lon = np.asarray(lon_deg, dtype=np.float64)
    x = np.radians(lon)
    y = np.log(np.tan(0.25 * np.pi + 0.5 * np.radians(lat)))
    return np.stack([x, y], axis=-1)


def make_rff_bank(config: AlignConfig, seed: int) -> tuple[list, list]:
    """Per-scale frequency/phase draws; std 1/sigma, never resampled."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    freqs, phases = [], []
    for sigma in config.rff_scales:
        w = rng.normal(0.0, 1.0 / sigma, size=(2, config.rff_per_scale))
        b = rng.uniform(0.0, 2.0 * np.pi, size=config.rff_per_scale)
        freqs.append(w.astype(np.float32))
        phases.append(b.astype(np.float32))
    return freqs, phases


def rff_features(xy: np.ndarray, freqs: list, phases: list,
                 dtype=np.float32) -> np.ndarray:
    """Multi-scale [cos(xW+b), sin(xW+b)] features, scales concatenated."""
    xy = np.asarray(xy, dtype=np.float64)
    parts = []
    for w, b in zip(freqs, phases):
        z = xy @ w.astype(np.float64) + b.astype(np.float64)
        parts.append(np.cos(z))
        parts.append(np.sin(z))
    return np.concatenate(parts, axis=-1).astype(dtype)


def _normalize_text(s: str) -> str:
    return " ".join(s.split())


def hashed_ngram_features(texts: list, buckets: int = 4096,
                          dtype=np.float32) -> np.ndarray:
    """Hashed character 3-gram counts, L2-normalized; empty text stays zero."""
    cache: dict[str, np.ndarray] = {}
    rows = np.zeros((len(texts), buckets), dtype=dtype)
    for i, raw in enumerate(texts):
        key = _normalize_text(raw)
        row = cache.get(key)
        if row is None:
            row = np.zeros(buckets, dtype=dtype)
            data = key.encode("utf-8")
            for j in range(len(data) - 2):
                row[zlib.crc32(data[j:j + 3]) % buckets] += 1.0
            norm = float(np.sqrt((row * row).sum()))
            if norm > 0:
                row /= norm
            cache[key] = row
        rows[i] = row
    return rows


# --- parameterized forward passes (autodiff graph) --------------------------


def _param_dtype(params: dict) -> np.dtype:
    return next(iter(params.values())).data.dtype


def _const(x, dtype) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def gps_forward(params: dict, rff_feats: np.ndarray) -> Tensor:
    """Feed-forward head over precomputed Fourier features."""
    dt = _param_dtype(params)
    h = _const(rff_feats, dt) @ params["gps_w1"] + params["gps_b1"]
    return h.relu() @ params["gps_w2"] + params["gps_b2"]


def text_forward(params: dict, text_feats: np.ndarray) -> Tensor:
    dt = _param_dtype(params)
    return _const(text_feats, dt) @ params["text_w"] + params["text_b"]


def image_forward(params: dict, raw: np.ndarray) -> tuple[Tensor, Tensor]:
    dt = _param_dtype(params)
    r = _const(raw, dt)
    e_it = r @ params["img_text_w"] + params["img_text_b"]
    e_ig = r @ params["img_gps_w"] + params["img_gps_b"]
    return e_it, e_ig


def _l2norm(t: Tensor, eps: float = 1e-12) -> Tensor:
    n2 = (t * t).sum(axis=-1, keepdims=True)
    return t / (n2 + eps).sqrt()


def infonce_symmetric(a: Tensor, b: Tensor, temperature: float) -> Tensor:
    """Mean of both directional cross-entropies over the a/b similarity grid.

    Rows of a and b are already L2-normalized matched pairs; returns
    (L_ab + L_ba) / 2 where each term is mean CE with the diagonal as target.
    """
    n = a.shape[0]
    if n < 2:
        raise InvalidInputError("contrastive loss needs a batch of at least 2")
    sims = (a @ b.swapaxes(0, 1)) * (1.0 / temperature)
    diag = np.arange(n)
    l_ab = -nn.take_last_axis(nn.log_softmax(sims, axis=-1), diag).mean()
    l_ba = -nn.take_last_axis(nn.log_softmax(sims.swapaxes(0, 1), axis=-1), diag).mean()
    return (l_ab + l_ba) * 0.5


def alignment_loss_from_feats(params: dict, raw: np.ndarray,
                              rff_feats: np.ndarray, text_feats: np.ndarray,
                              temperature: float) -> Tensor:
    """Symmetric InfoNCE over the image/text and image/gps pairings."""
    e_it, e_ig = image_forward(params, raw)
    e_t = text_forward(params, text_feats)
    e_g = gps_forward(params, rff_feats)
    l_text = infonce_symmetric(_l2norm(e_it), _l2norm(e_t), temperature)
    l_gps = infonce_symmetric(_l2norm(e_ig), _l2norm(e_g), temperature)
    # half of the four directional terms = sum of the two symmetric averages
    return l_text + l_gps


@dataclass
class AlignBatch:
    image_feats: np.ndarray
    gps: list
    texts: list

    def __post_init__(self) -> None:
        self.image_feats = np.asarray(self.image_feats)
        if not (len(self.image_feats) == len(self.gps) == len(self.texts)):
            raise InvalidInputError("alignment batch fields must have equal lengths")


class AlignEncoder:
    """Trainable encoder stack plus its frozen Fourier bank."""

    def __init__(self, config: AlignConfig | None = None, seed: int | None = None) -> None:
        self.config = config or AlignConfig()
        if seed is None:
            seed = self.config.seed
        self.seed = seed
        c = self.config
        self.rff_freqs, self.rff_phases = make_rff_bank(c, seed)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(102,)))
        self.params: dict[str, Tensor] = {
            "gps_w1": nn.glorot_uniform(rng, c.rff_dim, c.gps_hidden),
            "gps_b1": nn.zeros_param((c.gps_hidden,)),
            "gps_w2": nn.glorot_uniform(rng, c.gps_hidden, c.proj_dim),
            "gps_b2": nn.zeros_param((c.proj_dim,)),
            "text_w": nn.glorot_uniform(rng, c.text_buckets, c.proj_dim),
            "text_b": nn.zeros_param((c.proj_dim,)),
            "img_text_w": nn.glorot_uniform(rng, c.raw_dim, c.proj_dim),
            "img_text_b": nn.zeros_param((c.proj_dim,)),
            "img_gps_w": nn.glorot_uniform(rng, c.raw_dim, c.proj_dim),
            "img_gps_b": nn.zeros_param((c.proj_dim,)),
        }

    # --- inference (plain arrays) --------------------------------------

    @property
    def gps_params(self) -> GpsEncoderParams:
        return GpsEncoderParams(
            scales=self.config.rff_scales,
            rff_frequencies=self.rff_freqs,
            rff_phases=self.rff_phases,
            ffn_weights={k: self.params[k] for k in ("gps_w1", "gps_b1", "gps_w2", "gps_b2")},
        )

    def encode_gps_batch(self, lat_deg, lon_deg) -> np.ndarray:
        feats = rff_features(mercator_xy(lat_deg, lon_deg),
                             self.rff_freqs, self.rff_phases)
        return gps_forward(self.params, feats).data

    def encode_text_batch(self, texts: list) -> np.ndarray:
        feats = hashed_ngram_features(texts, self.config.text_buckets)
        return text_forward(self.params, feats).data

    def encode_text(self, s: str) -> Embedding:
        return Embedding(self.encode_text_batch([s])[0])

    def project_image_batch(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raw = np.asarray(raw)
        if raw.shape[-1] != self.config.raw_dim:
            raise InvalidInputError(
                f"raw feature dim {raw.shape[-1]} != configured {self.config.raw_dim}")
        e_it, e_ig = image_forward(self.params, raw)
        e_image = np.concatenate([raw.astype(e_it.data.dtype), e_it.data, e_ig.data], axis=-1)
        return e_it.data, e_ig.data, e_image

    def project_image(self, raw) -> tuple[Embedding, Embedding, Embedding]:
        arr = raw.values if isinstance(raw, Embedding) else np.asarray(raw)
        e_it, e_ig, e_img = self.project_image_batch(arr[None, :])
        return Embedding(e_it[0]), Embedding(e_ig[0]), Embedding(e_img[0])

    # --- persistence ----------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        for i, (w, b) in enumerate(zip(self.rff_freqs, self.rff_phases)):
            out[f"rff_freq_{i}"] = w
            out[f"rff_phase_{i}"] = b
        out["rff_scales"] = np.asarray(self.config.rff_scales, dtype=np.float32)
        return out

    def save(self, path) -> None:
        save_tensors(path, ALIGN_MAGIC, self.state_tensors())

    @classmethod
    def load(cls, path, config: AlignConfig | None = None) -> "AlignEncoder":
        _, tensors = load_tensors(path, ALIGN_MAGIC)
        scales = tuple(float(s) for s in tensors["rff_scales"])
        c = config or AlignConfig()
        nscales = len(scales)
        c = AlignConfig(**{**c.__dict__, "rff_scales": scales,
                           "rff_per_scale": tensors["rff_freq_0"].shape[1],
                           "raw_dim": tensors["img_text_w"].shape[0],
                           "proj_dim": tensors["img_text_w"].shape[1],
                           "gps_hidden": tensors["gps_w1"].shape[1],
                           "text_buckets": tensors["text_w"].shape[0]})
        enc = cls(c)
        enc.rff_freqs = [tensors[f"rff_freq_{i}"] for i in range(nscales)]
        enc.rff_phases = [tensors[f"rff_phase_{i}"] for i in range(nscales)]
        for k in enc.params:
            enc.params[k] = Tensor(tensors[k].copy(), requires_grad=True)
        return enc


def encode_gps(p: LatLon, params: GpsEncoderParams) -> Embedding:
    """Single-point GPS embedding through the Fourier-feature feed-forward."""
    feats = rff_features(mercator_xy([p.lat_deg], [p.lon_deg]),
                         params.rff_frequencies, params.rff_phases)
    return Embedding(gps_forward(params.ffn_weights, feats).data[0])


def geoalign_loss(batch: AlignBatch, encoder: AlignEncoder,
                  temperature: float | None = None) -> tuple[float, dict]:
    """Loss and parameter gradients for one alignment batch."""
    if len(batch.gps) < 2:
        raise InvalidInputError("contrastive loss needs a batch of at least 2")
    if temperature is None:
        temperature = encoder.config.temperature
    lat = np.asarray([p.lat_deg for p in batch.gps])
    lon = np.asarray([p.lon_deg for p in batch.gps])
    rff = rff_features(mercator_xy(lat, lon), encoder.rff_freqs, encoder.rff_phases)
    tf = hashed_ngram_features(batch.texts, encoder.config.text_buckets)
    for p in encoder.params.values():
        p.grad = None
    loss = alignment_loss_from_feats(encoder.params, batch.image_feats, rff, tf, temperature)
    loss.backward()
    grads = {k: p.grad for k, p in encoder.params.items()}
    return float(loss.data), grads


def train_align(dataset, config: AlignConfig | None = None,
                checkpoint_path=None, curve_path=None) -> AlignEncoder:
    """Minibatch optimization of the alignment loss over (feat, gps, text) rows.

    `dataset` is a sequence of samples with `feat`, `lat`, `lon`, `text`
    attributes or keys.  Returns the trained encoder; optionally persists the
    checkpoint and a (step, loss) CSV curve.
    """
    config = config or AlignConfig()
    if len(dataset) == 0:
        raise InvalidInputError("train_align needs a nonempty dataset")
    feats, lat, lon, texts = _dataset_columns(dataset)
    enc = AlignEncoder(config)
    rff = rff_features(mercator_xy(lat, lon), enc.rff_freqs, enc.rff_phases)
    tf = hashed_ngram_features(texts, config.text_buckets)
    opt = AdamW(enc.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(103,)))
    curve = []
    step = 0
    n = len(texts)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if idx.size < 2:
                continue
            opt.zero_grad()
            loss = alignment_loss_from_feats(
                enc.params, feats[idx], rff[idx], tf[idx], config.temperature)
            if not np.isfinite(loss.data):
                raise NumericalError(f"alignment loss diverged at step {step}")
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
        enc.save(checkpoint_path)
    return enc


def _dataset_columns(dataset):
    def col(s, k):
        return s[k] if isinstance(s, dict) else getattr(s, k)
    feats = np.asarray([col(s, "feat") for s in dataset], dtype=np.float32)
    lat = np.asarray([col(s, "lat") for s in dataset], dtype=np.float64)
    lon = np.asarray([col(s, "lon") for s in dataset], dtype=np.float64)
    texts = [col(s, "text") for s in dataset]
    return feats, lat, lon, texts
