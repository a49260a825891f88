# Contrastive alignment puts three views of a place — image features,
# caption text, and GPS — into one embedding space.  The payoff is
# cross-modal matching, plus geographically tight nearest neighbors for
# the sequence model to feed on.

import numpy as np

from geotoken import (AlignConfig, Gallery, WorldConfig, encode_gps, generate,
                      haversine_km_batch, train_align)
from geotoken.align import normalized_rows
from geotoken.synthworld import to_gallery_entries

world = WorldConfig(n_clusters=200, size_min=5, size_max=40, spread_km=10.0,
                    feature_dim=64, noise_sigma=0.35, seed=7)
train, test = generate(world)
print(f"world: {len(train)} train / {len(test)} test samples")
print("a sample:", train[0].text, "@", f"({train[0].lat:.3f}, {train[0].lon:.3f})")

cfg = AlignConfig(raw_dim=world.feature_dim, proj_dim=32, epochs=12,
                  batch_size=256, seed=7)
enc = train_align(train, cfg)

# cross-modal check over 250 held-out candidates: does each test image
# point at the right caption, and at a location in the right place?
# Same-cluster samples share captions, so score at cluster granularity.
feats = np.asarray([s.feat for s in test], dtype=np.float32)
e_it, e_ig, e_img = enc.project_image_batch(feats)
e_text = enc.encode_text_batch([s.text for s in test])
e_gps = np.stack([encode_gps(s.location, enc.gps_params).values for s in test])

pick_t = (normalized_rows(e_it) @ normalized_rows(e_text).T).argmax(1)
pick_g = (normalized_rows(e_ig) @ normalized_rows(e_gps).T).argmax(1)
cap_ok = np.mean([test[i].text == test[j].text
                  for i, j in enumerate(pick_t)])
gps_err = haversine_km_batch(
    np.asarray([s.lat for s in test]), np.asarray([s.lon for s in test]),
    np.asarray([test[j].lat for j in pick_g]),
    np.asarray([test[j].lon for j in pick_g]))
print(f"\nimage->caption picks the right caption: {cap_ok:.2f} "
      f"(chance {np.mean([s.text == test[0].text for s in test]):.3f})")
print(f"image->gps picks a spot within 2x cluster spread: "
      f"{(gps_err <= 2 * world.spread_km).mean():.2f}")

# retrieval: how far away do the top-5 gallery neighbors live?
gallery = Gallery.build(to_gallery_entries(train, enc))
rows, _ = gallery.top_m_batch(e_img, m=5)
qlat = np.repeat([s.lat for s in test], 5)
qlon = np.repeat([s.lon for s in test], 5)
d = haversine_km_batch(qlat, qlon, gallery.lat[rows].ravel(),
                       gallery.lon[rows].ravel())
print(f"top-5 neighbor distance: median {np.median(d):.1f} km "
      f"(clusters are {world.spread_km} km wide)")
