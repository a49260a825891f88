# A point on the sphere becomes a coarse-to-fine token sequence.
# The first token picks one of six cube faces, every later token one
# quadrant of the parent cell, so each prefix addresses a real cell.

import numpy as np

from geotoken import (LatLon, cell_diagonal_km, cell_id_of, detokenize,
                      detokenize_batch, haversine_km_batch, tokenize,
                      tokenize_batch)

paris = LatLon(48.8566, 2.3522)
toks = tokenize(paris)                      # 21 tokens: face + 20 quadrants
print("Paris ->", toks)
print("as cell id:", hex(cell_id_of(toks)))

# every prefix is a usable address at its own resolution
for lvl in (0, 2, 5, 10, 20):
    prefix = tokenize(paris, levels=lvl + 1)
    center = detokenize(prefix)
    print(f"level {lvl:2d}: cell ~{cell_diagonal_km(lvl):12.3f} km across, "
          f"center ({center.lat_deg:9.4f}, {center.lon_deg:9.4f})")

# round trip: decode back the leaf center, never further than the leaf diagonal
rng = np.random.default_rng(0)
lat = np.degrees(np.arcsin(rng.uniform(-1, 1, 5000)))
lon = rng.uniform(-180, 180, 5000)
back_lat, back_lon = detokenize_batch(tokenize_batch(lat, lon))
err = haversine_km_batch(lat, lon, back_lat, back_lon)
print(f"\n5000 random points, round-trip error: "
      f"median {np.median(err) * 1000:.2f} m, max {err.max() * 1000:.2f} m "
      f"(leaf diagonal {cell_diagonal_km(20) * 1000:.2f} m)")
