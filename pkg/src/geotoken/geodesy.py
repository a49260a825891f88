"""Great-circle distance and the accuracy/median evaluation report."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .geocell import EARTH_RADIUS_KM, LatLon


def haversine_km(a: LatLon, b: LatLon) -> float:
    """Great-circle distance in km on a sphere of mean radius 6371 km."""
    return float(haversine_km_batch(np.asarray([a.lat_deg]), np.asarray([a.lon_deg]),
                                    np.asarray([b.lat_deg]), np.asarray([b.lon_deg]))[0])


def haversine_km_batch(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Element-wise haversine distance over coordinate arrays (degrees)."""
    lat1 = np.radians(np.asarray(lat1, dtype=np.float64))
    lon1 = np.radians(np.asarray(lon1, dtype=np.float64))
    lat2 = np.radians(np.asarray(lat2, dtype=np.float64))
    lon2 = np.radians(np.asarray(lon2, dtype=np.float64))
    sdlat = np.sin(0.5 * (lat2 - lat1))
    sdlon = np.sin(0.5 * (lon2 - lon1))
    h = sdlat * sdlat + np.cos(lat1) * np.cos(lat2) * sdlon * sdlon
    return 2.0 * EARTH_RADIUS_KM * np.arctan2(np.sqrt(h), np.sqrt(np.maximum(0.0, 1.0 - h)))


DEFAULT_THRESHOLDS_KM = (1.0, 25.0, 200.0, 750.0, 2500.0)


@dataclass
class AccuracyReport:
    """Fraction of queries within each distance threshold, plus median error."""

    acc_at_km: dict[float, float]
    median_error_km: float
    n: int
    errors_km: np.ndarray = field(repr=False, default=None)

    def to_csv(self, config_hash: str | None = None) -> str:
        """Flat record: one row per threshold plus the median and count."""
        buf = io.StringIO()
        if config_hash is not None:
            buf.write(f"# config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for tau in sorted(self.acc_at_km):
            w.writerow([f"acc_at_{tau:g}_km", f"{self.acc_at_km[tau]:.6f}"])
        w.writerow(["median_error_km", f"{self.median_error_km:.6f}"])
        w.writerow(["n", str(self.n)])
        return buf.getvalue()


def evaluate(preds: list[LatLon], truths: list[LatLon],
             thresholds=DEFAULT_THRESHOLDS_KM) -> AccuracyReport:
    """Accuracy at each threshold (inclusive <=) and the median geodesic error.

    The median of an even-length error list is the mean of the two central
    values, so reports are reproducible bit-for-bit.
    """
    if len(preds) == 0 or len(truths) == 0:
        raise InvalidInputError("evaluate requires at least one prediction")
    if len(preds) != len(truths):
        raise InvalidInputError(f"length mismatch: {len(preds)} preds vs {len(truths)} truths")
    plat = np.asarray([p.lat_deg for p in preds])
    plon = np.asarray([p.lon_deg for p in preds])
    tlat = np.asarray([t.lat_deg for t in truths])
    tlon = np.asarray([t.lon_deg for t in truths])
    return evaluate_errors(haversine_km_batch(plat, plon, tlat, tlon), thresholds)


def evaluate_errors(errors_km: np.ndarray, thresholds=DEFAULT_THRESHOLDS_KM) -> AccuracyReport:
    """Build a report from precomputed per-query geodesic errors."""
    errors_km = np.asarray(errors_km, dtype=np.float64)
    if errors_km.size == 0:
        raise InvalidInputError("evaluate requires at least one prediction")
    acc = {float(t): float(np.mean(errors_km <= t)) for t in thresholds}
    srt = np.sort(errors_km)
    n = srt.size
    if n % 2 == 1:
        median = float(srt[n // 2])
    else:
        median = float(0.5 * (srt[n // 2 - 1] + srt[n // 2]))
    return AccuracyReport(acc_at_km=acc, median_error_km=median, n=n, errors_km=errors_km)
