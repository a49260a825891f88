"""One-off generator for the frozen S2 reference vectors used by the tests.

Loads the vendored sphere geometry source from the examples corpus (stripping
its python-2 compat imports), computes canonical cell ids for a mix of random
and adversarial coordinates across levels 0-20, and freezes them to
tests/data/s2_reference_vectors.csv.  Tests consume only the CSV; this script
is not needed at test time.
"""

from __future__ import annotations

import csv
import pathlib
import sys
import types

import numpy as np

CORPUS = pathlib.Path("/root/pkg/examples/s2_geometry_cell_id_hilbert_curve_implementation/r001__sidewalklabs__s2sphere__sphere.py")
OUT = pathlib.Path("/root/pkg/tests/data/s2_reference_vectors.csv")


def load_oracle() -> types.ModuleType:
    src = CORPUS.read_text()
    src = src.replace("from future.builtins import int\n", "")
    src = src.replace("from future.builtins import range\n", "")
    mod = types.ModuleType("s2oracle")
    exec(compile(src, str(CORPUS), "exec"), mod.__dict__)
    return mod


def main() -> None:
    s2 = load_oracle()
    rng = np.random.default_rng(20240817)

    cases: list[tuple[float, float]] = []
    # random global coverage
    lat = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, size=400)))
    lon = rng.uniform(-180.0, 180.0, size=400)
    cases.extend(zip(lat.tolist(), lon.tolist()))
    # edge cases: poles, antimeridian, equator/meridian crossings, face centers
    for p in [(90.0, 0.0), (-90.0, 0.0), (90.0, 123.0), (-90.0, -45.0),
              (0.0, 180.0), (0.0, -180.0), (45.0, 180.0), (-45.0, -179.999999),
              (0.0, 0.0), (0.0, 90.0), (0.0, -90.0), (90.0, 0.0), (0.0, 179.999999),
              (35.6762, 139.6503), (40.7128, -74.006), (-33.8688, 151.2093),
              (51.5074, -0.1278), (-1e-12, 1e-12), (89.999999, 0.0)]:
        cases.append(p)
    # near face boundaries (u or v close to 0 / ±1)
    for _ in range(60):
        base = rng.choice([0.0, 45.0, -45.0])
        cases.append((float(base + rng.normal(0, 1e-7)),
                      float(rng.uniform(-180, 180))))

    rows = []
    levels = list(range(0, 21))
    for lat_deg, lon_deg in cases:
        ll = s2.LatLon.from_degrees(lat_deg, lon_deg)
        leaf = s2.CellId.from_lat_lon(ll)
        for level in levels:
            cid = leaf.parent(level)
            center = cid.to_lat_lon()
            rows.append((f"{lat_deg!r}", f"{lon_deg!r}", level, cid.id(),
                         f"{center.lat().degrees!r}", f"{center.lon().degrees!r}"))

    OUT.parent.mkdir(parents=True, exist_ok=True)
    with OUT.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["lat_deg", "lon_deg", "level", "cell_id", "center_lat_deg", "center_lon_deg"])
        w.writerows(rows)
    print(f"wrote {len(rows)} vectors ({len(cases)} points x {len(levels)} levels) to {OUT}")


if __name__ == "__main__":
    sys.exit(main())
