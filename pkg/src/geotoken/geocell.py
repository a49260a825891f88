"""Hierarchical geocell tokenization on the S2 cube-sphere grid.

A location is represented as a coarse-to-fine sequence of tokens: one cube-face
token in {0..5} followed by one quadrant token in {0..3} per subdivision level.
The sequence of length L addresses the cell at level L-1, and the token bits are
exactly the 2-bit groups of the canonical 64-bit S2 cell id, so any conforming
S2 implementation can serve as an external check.

All transforms use the canonical quadratic ST<->UV projection and the
position-dependent Hilbert-curve child ordering; this is required for
bit-compatibility with reference cell ids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

MAX_LEVEL = 30
MAX_SIZE = 1 << MAX_LEVEL          # leaf-grid resolution per face axis
POS_BITS = 2 * MAX_LEVEL + 1       # position bits in a cell id, incl. trailing 1
DEFAULT_LEVELS = 21                # face token + 20 quadrant tokens
FACES = 6

# Max geodesic diagonal of a level-0 cell in radians under the quadratic
# projection; halves with each level.  (Max over face position of the cell
# diagonal; the standard S2 "MaxDiag" length-metric coefficient.)
_MAX_DIAG_RAD = 2.438654594434021032

EARTH_RADIUS_KM = 6371.0

# ---------------------------------------------------------------------------
# Hilbert-curve lookup tables.  The curve traversal order and orientation
# transitions below reproduce the canonical S2 cell numbering.

_LOOKUP_BITS = 4
_SWAP = 0x01
_INVERT = 0x02

_POS_TO_IJ = ((0, 1, 3, 2),
              (0, 2, 3, 1),
              (3, 2, 0, 1),
              (3, 1, 0, 2))
_POS_TO_ORIENTATION = (_SWAP, 0, 0, _INVERT | _SWAP)

_LOOKUP_POS = np.zeros(1 << (2 * _LOOKUP_BITS + 2), dtype=np.uint64)
_LOOKUP_IJ = np.zeros(1 << (2 * _LOOKUP_BITS + 2), dtype=np.uint64)


def _init_lookup(level: int, i: int, j: int, orig_orientation: int,
                 pos: int, orientation: int) -> None:
    if level == _LOOKUP_BITS:
        ij = (i << _LOOKUP_BITS) + j
        _LOOKUP_POS[(ij << 2) + orig_orientation] = (pos << 2) + orientation
        _LOOKUP_IJ[(pos << 2) + orig_orientation] = (ij << 2) + orientation
        return
    level += 1
    i <<= 1
    j <<= 1
    pos <<= 2
    r = _POS_TO_IJ[orientation]
    for index in range(4):
        _init_lookup(level, i + (r[index] >> 1), j + (r[index] & 1),
                     orig_orientation, pos + index,
                     orientation ^ _POS_TO_ORIENTATION[index])


for _orient in (0, _SWAP, _INVERT, _SWAP | _INVERT):
    _init_lookup(0, 0, 0, _orient, 0, _orient)


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class LatLon:
    """A geodetic coordinate in degrees.

    Latitude must lie in [-90, +90]; longitude is wrapped into [-180, +180).
    Out-of-range latitude raises rather than clamping, so caller bugs surface.
    """

    lat_deg: float
    lon_deg: float

    def __post_init__(self) -> None:
        lat = float(self.lat_deg)
        lon = float(self.lon_deg)
        if not np.isfinite(lat) or not np.isfinite(lon):
            raise InvalidInputError(f"non-finite coordinate ({lat}, {lon})")
        if lat < -90.0 or lat > 90.0:
            raise InvalidInputError(f"latitude {lat} outside [-90, 90]")
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", _wrap_lon(lon))


def _wrap_lon(lon: float) -> float:
    wrapped = (lon + 180.0) % 360.0 - 180.0
    # % can return 360.0 for inputs just below a wrap boundary
    return -180.0 if wrapped >= 180.0 else wrapped


class TokenSequence:
    """An ordered hierarchical token path: face token, then quadrant tokens.

    The canonical text form is a bare digit string, e.g. "2" followed by
    20 digits in {0..3} for the default 21-token sequence.
    """

    __slots__ = ("tokens",)

    def __init__(self, tokens) -> None:
        toks = tuple(int(t) for t in tokens)
        if len(toks) < 1 or len(toks) > MAX_LEVEL + 1:
            raise InvalidInputError(f"token count {len(toks)} outside [1, {MAX_LEVEL + 1}]")
        if not 0 <= toks[0] <= 5:
            raise InvalidInputError(f"face token {toks[0]} outside [0, 5]")
        for t in toks[1:]:
            if not 0 <= t <= 3:
                raise InvalidInputError(f"quadrant token {t} outside [0, 3]")
        object.__setattr__(self, "tokens", toks)

    def __setattr__(self, name, value):  # immutable
        raise AttributeError("TokenSequence is immutable")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, idx):
        return self.tokens[idx]

    def __iter__(self):
        return iter(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenSequence) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def __repr__(self) -> str:
        return f"TokenSequence({self.tokens})"

    def __str__(self) -> str:
        return "".join(str(t) for t in self.tokens)

    @classmethod
    def from_string(cls, text: str) -> "TokenSequence":
        text = text.strip()
        if not text.isdigit():
            raise InvalidInputError(f"token string {text!r} is not a digit string")
        return cls(int(c) for c in text)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.tokens, dtype=np.uint8)

    @classmethod
    def from_array(cls, arr) -> "TokenSequence":
        return cls(np.asarray(arr).tolist())

    @property
    def level(self) -> int:
        """S2 level addressed by the full sequence (= len - 1)."""
        return len(self.tokens) - 1


@dataclass(frozen=True)
class CellId:
    """Bridge between token sequences and canonical 64-bit S2 cell ids.

    `hilbert_pos` packs the quadrant tokens two bits per level, coarsest first.
    """

    face: int
    level: int
    hilbert_pos: int

    def __post_init__(self) -> None:
        if not 0 <= self.face <= 5:
            raise InvalidInputError(f"face {self.face} outside [0, 5]")
        if not 0 <= self.level <= MAX_LEVEL:
            raise InvalidInputError(f"level {self.level} outside [0, {MAX_LEVEL}]")
        if not 0 <= self.hilbert_pos < (1 << (2 * self.level)):
            raise InvalidInputError("hilbert_pos out of range for level")

    @property
    def id(self) -> int:
        """Canonical 64-bit S2 cell id (trailing-1 bit layout)."""
        shift = POS_BITS - 2 * self.level
        return (self.face << POS_BITS) | (self.hilbert_pos << shift) | (1 << (shift - 1))

    @classmethod
    def from_id(cls, cell_id: int) -> "CellId":
        if cell_id <= 0 or cell_id >> 64:
            raise InvalidInputError(f"cell id {cell_id} is not a valid 64-bit id")
        lsb = cell_id & -cell_id
        if not lsb & 0x1555555555555555:
            raise InvalidInputError(f"cell id {cell_id:#x} has an invalid trailing bit")
        face = cell_id >> POS_BITS
        if face > 5:
            raise InvalidInputError(f"cell id {cell_id:#x} has face {face} > 5")
        level = (POS_BITS - lsb.bit_length()) // 2
        pos = (cell_id >> (POS_BITS - 2 * level)) & ((1 << (2 * level)) - 1)
        return cls(face=face, level=level, hilbert_pos=pos)

    @classmethod
    def from_tokens(cls, t: TokenSequence) -> "CellId":
        pos = 0
        for tok in t.tokens[1:]:
            pos = (pos << 2) | tok
        return cls(face=t.tokens[0], level=t.level, hilbert_pos=pos)

    def to_tokens(self) -> TokenSequence:
        toks = [self.face]
        for i in range(self.level):
            toks.append((self.hilbert_pos >> (2 * (self.level - 1 - i))) & 0x3)
        return TokenSequence(toks)


# ---------------------------------------------------------------------------
# Coordinate transforms (vectorized; scalars wrap the batch path)


def _latlon_to_xyz(lat_deg: np.ndarray, lon_deg: np.ndarray):
    lat = np.radians(lat_deg)
    lon = np.radians(lon_deg)
    cos_lat = np.cos(lat)
    return np.cos(lon) * cos_lat, np.sin(lon) * cos_lat, np.sin(lat)


def _xyz_to_face_uv(x, y, z):
    ax, ay, az = np.abs(x), np.abs(y), np.abs(z)
    face = np.where(ax > ay, np.where(ax > az, 0, 2), np.where(ay > az, 1, 2))
    major = np.choose(face, (x, y, z))
    face = np.where(major < 0, face + 3, face)
    # per-face (u, v) from the two minor axes; np.choose evaluates every
    # branch, so silence the divides that the selection discards
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.choose(face, (y / x, -x / y, -x / z, z / x, z / y, -y / z))
        v = np.choose(face, (z / x, z / y, -y / z, y / x, -x / y, -x / z))
    return face.astype(np.int64), u, v


def _face_uv_to_xyz(face, u, v):
    x = np.choose(face, (np.ones_like(u), -u, -u, -np.ones_like(u), v, v))
    y = np.choose(face, (u, np.ones_like(u), -v, -v, -np.ones_like(u), u))
    z = np.choose(face, (v, v, np.ones_like(u), -u, -u, -np.ones_like(u)))
    return x, y, z


def _uv_to_st(u):
    with np.errstate(invalid="ignore"):
        return np.where(u >= 0, 0.5 * np.sqrt(1.0 + 3.0 * u),
                        1.0 - 0.5 * np.sqrt(1.0 - 3.0 * u))


def _st_to_uv(s):
    return np.where(s >= 0.5, (1.0 / 3.0) * (4.0 * s * s - 1.0),
                    (1.0 / 3.0) * (1.0 - 4.0 * (1.0 - s) * (1.0 - s)))


def _st_to_ij(s):
    return np.clip(np.floor(MAX_SIZE * s), 0, MAX_SIZE - 1).astype(np.int64)


def _face_ij_to_leaf_id(face, i, j):
    """Interleave (i, j) along the Hilbert curve into a leaf cell id."""
    face = face.astype(np.uint64)
    i = i.astype(np.uint64)
    j = j.astype(np.uint64)
    n = face << np.uint64(POS_BITS - 1)
    bits = face & np.uint64(_SWAP)
    nibble_mask = np.uint64((1 << _LOOKUP_BITS) - 1)
    for k in range(7, -1, -1):
        ks = np.uint64(k * _LOOKUP_BITS)
        bits += ((i >> ks) & nibble_mask) << np.uint64(_LOOKUP_BITS + 2)
        bits += ((j >> ks) & nibble_mask) << np.uint64(2)
        bits = _LOOKUP_POS[bits]
        n |= (bits >> np.uint64(2)) << np.uint64(k * 2 * _LOOKUP_BITS)
        bits &= np.uint64(_SWAP | _INVERT)
    return n * np.uint64(2) + np.uint64(1)


def _leaf_id_from_latlon(lat_deg, lon_deg):
    x, y, z = _latlon_to_xyz(lat_deg, lon_deg)
    face, u, v = _xyz_to_face_uv(x, y, z)
    i = _st_to_ij(_uv_to_st(u))
    j = _st_to_ij(_uv_to_st(v))
    return _face_ij_to_leaf_id(face, i, j)


def _parent_id(cell_id: np.ndarray, level: int) -> np.ndarray:
    lsb = np.uint64(1 << (2 * (MAX_LEVEL - level)))
    return (cell_id & (~(lsb - np.uint64(1)))) | lsb


def _id_to_face_ij_orientation(cell_id: np.ndarray):
    cell_id = cell_id.astype(np.uint64)
    face = (cell_id >> np.uint64(POS_BITS)).astype(np.int64)
    bits = (face.astype(np.uint64)) & np.uint64(_SWAP)
    i = np.zeros_like(cell_id)
    j = np.zeros_like(cell_id)
    for k in range(7, -1, -1):
        nbits = MAX_LEVEL - 7 * _LOOKUP_BITS if k == 7 else _LOOKUP_BITS
        mask = np.uint64((1 << (2 * nbits)) - 1)
        bits += ((cell_id >> np.uint64(k * 2 * _LOOKUP_BITS + 1)) & mask) << np.uint64(2)
        bits = _LOOKUP_IJ[bits]
        i += (bits >> np.uint64(_LOOKUP_BITS + 2)) << np.uint64(k * _LOOKUP_BITS)
        j += ((bits >> np.uint64(2)) & np.uint64((1 << _LOOKUP_BITS) - 1)) << np.uint64(k * _LOOKUP_BITS)
        bits &= np.uint64(_SWAP | _INVERT)
    # cells at odd levels have the i/j axes swapped relative to the curve
    lsb = cell_id & (~cell_id + np.uint64(1))
    swap = (lsb & np.uint64(0x1111111111111110)) != 0
    orientation = bits ^ np.where(swap, np.uint64(_SWAP), np.uint64(0))
    return face, i.astype(np.int64), j.astype(np.int64), orientation


def _id_center_latlon(cell_id: np.ndarray):
    cell_id = cell_id.astype(np.uint64)
    face, i, j, _ = _id_to_face_ij_orientation(cell_id)
    is_leaf = (cell_id & np.uint64(1)) != 0
    delta = np.where(is_leaf, 1,
                     np.where(((i ^ (cell_id >> np.uint64(2)).astype(np.int64)) & 1) != 0, 2, 0))
    si = 2 * i + delta
    ti = 2 * j + delta
    u = _st_to_uv((0.5 / MAX_SIZE) * si)
    v = _st_to_uv((0.5 / MAX_SIZE) * ti)
    x, y, z = _face_uv_to_xyz(face, u, v)
    lat = np.degrees(np.arctan2(z, np.hypot(x, y)))
    lon = np.degrees(np.arctan2(y, x))
    return lat, lon


def _ids_to_tokens(cell_id: np.ndarray, levels: int) -> np.ndarray:
    cell_id = cell_id.astype(np.uint64)
    out = np.empty(cell_id.shape + (levels,), dtype=np.uint8)
    out[..., 0] = (cell_id >> np.uint64(POS_BITS)).astype(np.uint8)
    for idx in range(1, levels):
        shift = np.uint64(POS_BITS - 2 * idx)
        out[..., idx] = ((cell_id >> shift) & np.uint64(3)).astype(np.uint8)
    return out


def _tokens_to_ids(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.uint64)
    levels = tokens.shape[-1]
    level = levels - 1
    pos = np.zeros(tokens.shape[:-1], dtype=np.uint64)
    for idx in range(1, levels):
        pos = (pos << np.uint64(2)) | tokens[..., idx]
    shift = np.uint64(POS_BITS - 2 * level)
    return ((tokens[..., 0] << np.uint64(POS_BITS)) | (pos << shift)
            | np.uint64(1 << (POS_BITS - 2 * level - 1)))


# ---------------------------------------------------------------------------
# Public operations


def tokenize_batch(lat_deg, lon_deg, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Tokenize arrays of coordinates; returns a uint8 array (..., levels)."""
    if not 1 <= levels <= MAX_LEVEL + 1:
        raise InvalidInputError(f"levels {levels} outside [1, {MAX_LEVEL + 1}]")
    lat_deg = np.asarray(lat_deg, dtype=np.float64)
    lon_deg = np.asarray(lon_deg, dtype=np.float64)
    if not np.all(np.isfinite(lat_deg)) or not np.all(np.isfinite(lon_deg)):
        raise InvalidInputError("non-finite coordinates")
    if np.any(lat_deg < -90.0) or np.any(lat_deg > 90.0):
        raise InvalidInputError("latitude outside [-90, 90]")
    leaf = _leaf_id_from_latlon(lat_deg, lon_deg)
    cell = _parent_id(leaf, levels - 1)
    return _ids_to_tokens(cell, levels)


def tokenize(p: LatLon, levels: int = DEFAULT_LEVELS) -> TokenSequence:
    """Convert a coordinate into its coarse-to-fine token sequence."""
    arr = tokenize_batch(np.asarray([p.lat_deg]), np.asarray([p.lon_deg]), levels)
    return TokenSequence.from_array(arr[0])


def detokenize_batch(tokens) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center coordinates for an array (..., levels) of token sequences."""
    tokens = np.asarray(tokens)
    if tokens.shape[-1] < 1:
        raise InvalidInputError("empty token sequence")
    if np.any(tokens[..., 0] > 5) or (tokens.shape[-1] > 1 and np.any(tokens[..., 1:] > 3)):
        raise InvalidInputError("token out of range")
    return _id_center_latlon(_tokens_to_ids(tokens))


def detokenize(t: TokenSequence) -> LatLon:
    """Center of the cell addressed by the full token sequence."""
    lat, lon = detokenize_batch(t.to_array()[None, :])
    return LatLon(float(lat[0]), float(lon[0]))


def cell_id_of(t: TokenSequence) -> int:
    """Canonical 64-bit S2 cell id for a token sequence."""
    return CellId.from_tokens(t).id


def common_prefix_len(a: TokenSequence, b: TokenSequence) -> int:
    """Longest shared leading token run; requires equal lengths."""
    if len(a) != len(b):
        raise InvalidInputError(f"length mismatch {len(a)} != {len(b)}")
    n = 0
    for x, y in zip(a.tokens, b.tokens):
        if x != y:
            break
        n += 1
    return n


def common_prefix_len_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise common prefix lengths of two equal-shape token arrays."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} != {b.shape}")
    neq = a != b
    first = np.argmax(neq, axis=-1)
    return np.where(neq.any(axis=-1), first, a.shape[-1])


def cell_diagonal_km(level: int) -> float:
    """Upper bound on the geodesic diameter of any cell at `level`, in km."""
    if not 0 <= level <= MAX_LEVEL:
        raise InvalidInputError(f"level {level} outside [0, {MAX_LEVEL}]")
    return _MAX_DIAG_RAD * (0.5 ** level) * EARTH_RADIUS_KM
