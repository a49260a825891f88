import numpy as np
import pytest

from geotoken import LatLon, nn
from geotoken.align import (
    AlignBatch,
    AlignConfig,
    AlignEncoder,
    Embedding,
    alignment_loss_from_feats,
    encode_gps,
    geoalign_loss,
    hashed_ngram_features,
    infonce_symmetric,
    mercator_xy,
    normalized_rows,
    rff_features,
    train_align,
)
from geotoken.errors import InvalidInputError
from geotoken.nn import Tensor

SMALL = AlignConfig(raw_dim=8, proj_dim=8, rff_per_scale=4, gps_hidden=16,
                    text_buckets=256, epochs=2, batch_size=32, seed=5)


def synthetic_rows(rng, n, raw_dim=8):
    proj = rng.normal(size=(3, raw_dim))
    lat = np.degrees(np.arcsin(rng.uniform(-1, 1, n)))
    lon = rng.uniform(-180, 180, n)
    xyz = np.stack([np.cos(np.radians(lat)) * np.cos(np.radians(lon)),
                    np.cos(np.radians(lat)) * np.sin(np.radians(lon)),
                    np.sin(np.radians(lat))], axis=1)
    feats = xyz @ proj + 0.05 * rng.normal(size=(n, raw_dim))
    texts = [f"cluster-{i % 7}, region-{i % 3}" for i in range(n)]
    return [{"feat": feats[i], "lat": lat[i], "lon": lon[i], "text": texts[i]}
            for i in range(n)]


class TestMercatorAndRff:
    def test_mercator_clamps_poles(self):
        xy = mercator_xy([90.0, -90.0, 85.05113], [0.0, 0.0, 0.0])
        assert np.isfinite(xy).all()
        assert xy[0, 1] == xy[2, 1]
        assert xy[1, 1] == pytest.approx(-xy[0, 1], rel=1e-12)
        # the clamp bound maps to the web-mercator square edge, about +/- pi
        assert xy[0, 1] == pytest.approx(np.pi, abs=1e-5)

    def test_rff_deterministic_for_seed(self):
        a = AlignEncoder(SMALL, seed=9)
        b = AlignEncoder(SMALL, seed=9)
        c = AlignEncoder(SMALL, seed=10)
        for wa, wb in zip(a.rff_freqs, b.rff_freqs):
            assert np.array_equal(wa, wb)
        assert not np.array_equal(a.rff_freqs[0], c.rff_freqs[0])

    def test_rff_scale_bandwidth(self):
        # wider sigma -> narrower frequency spread
        enc = AlignEncoder(AlignConfig(rff_per_scale=512), seed=0)
        stds = [w.std() for w in enc.rff_freqs]
        assert stds[0] > stds[1] > stds[2] > stds[3]
        assert stds[0] == pytest.approx(1.0, rel=0.15)

    def test_rff_feature_shape_and_range(self):
        enc = AlignEncoder(SMALL)
        f = rff_features(mercator_xy([10.0], [20.0]), enc.rff_freqs, enc.rff_phases)
        assert f.shape == (1, SMALL.rff_dim)
        assert np.abs(f).max() <= 1.0


class TestEncodeGps:
    def test_same_point_same_embedding(self):
        enc = AlignEncoder(SMALL)
        p = LatLon(48.85, 2.35)
        a = encode_gps(p, enc.gps_params)
        b = encode_gps(p, enc.gps_params)
        assert np.array_equal(a.values, b.values)
        assert a.dim == SMALL.proj_dim

    def test_zero_ffn_weights_zero_embedding(self):
        enc = AlignEncoder(SMALL)
        for k in ("gps_w1", "gps_b1", "gps_w2", "gps_b2"):
            enc.params[k].data = np.zeros_like(enc.params[k].data)
        e = encode_gps(LatLon(-33.0, 151.0), enc.gps_params)
        assert not e.values.any()

    def test_batch_matches_single(self):
        enc = AlignEncoder(SMALL)
        pts = [LatLon(1.0, 2.0), LatLon(-40.0, 100.0)]
        batch = enc.encode_gps_batch([p.lat_deg for p in pts], [p.lon_deg for p in pts])
        for i, p in enumerate(pts):
            assert np.allclose(batch[i], encode_gps(p, enc.gps_params).values)

    def test_nearby_points_more_similar_after_training(self):
        rng = np.random.default_rng(21)
        data = synthetic_rows(rng, 256)
        enc = train_align(data, AlignConfig(**{**SMALL.__dict__, "epochs": 8}))
        base = LatLon(40.0, -74.0)
        near = LatLon(40.000009, -74.0)      # about 1 m
        far = LatLon(40.0, -64.0)            # about 850 km
        eb = normalized_rows(enc.encode_gps_batch(
            [base.lat_deg, near.lat_deg, far.lat_deg],
            [base.lon_deg, near.lon_deg, far.lon_deg]))
        sim_near = float(eb[0] @ eb[1])
        sim_far = float(eb[0] @ eb[2])
        assert sim_near > sim_far


class TestEncodeText:
    def test_identical_strings_identical(self):
        enc = AlignEncoder(SMALL)
        a = enc.encode_text("Vestland, Norway")
        b = enc.encode_text("Vestland, Norway")
        assert np.array_equal(a.values, b.values)

    def test_whitespace_normalized(self):
        enc = AlignEncoder(SMALL)
        a = enc.encode_text("Vestland, Norway")
        b = enc.encode_text("  Vestland,   Norway ")
        assert np.array_equal(a.values, b.values)

    def test_empty_string_zero_features(self):
        f = hashed_ngram_features(["", "ab"], buckets=64)
        assert not f.any()

    def test_disjoint_alphabet_low_bucket_overlap(self):
        # realistic-length strings from disjoint alphabets share buckets only
        # through hash collisions; measured over many pairs, well under 5%
        rng = np.random.default_rng(99)
        letters_a = np.array(list("abcdefghijklmnop"))
        letters_b = np.array(list("0123456789+/*=&%"))
        inter = union = 0
        for _ in range(100):
            sa = "".join(rng.choice(letters_a, size=24))
            sb = "".join(rng.choice(letters_b, size=24))
            fa, fb = hashed_ngram_features([sa, sb], buckets=4096)
            inter += np.count_nonzero((fa > 0) & (fb > 0))
            union += np.count_nonzero((fa > 0) | (fb > 0))
        assert inter / union < 0.05


class TestProjectImage:
    def test_output_dims(self):
        enc = AlignEncoder(SMALL)
        e_it, e_ig, e_img = enc.project_image(np.ones(SMALL.raw_dim, dtype=np.float32))
        assert e_it.dim == SMALL.proj_dim
        assert e_ig.dim == SMALL.proj_dim
        assert e_img.dim == SMALL.raw_dim + 2 * SMALL.proj_dim

    def test_dim_mismatch_rejected(self):
        enc = AlignEncoder(SMALL)
        with pytest.raises(InvalidInputError):
            enc.project_image(np.ones(SMALL.raw_dim + 1))

    def test_identity_projection_copies_raw(self):
        cfg = AlignConfig(**{**SMALL.__dict__, "raw_dim": 8, "proj_dim": 8})
        enc = AlignEncoder(cfg)
        for k in ("img_text_w", "img_gps_w"):
            enc.params[k].data = np.eye(8, dtype=np.float32)
        for k in ("img_text_b", "img_gps_b"):
            enc.params[k].data = np.zeros(8, dtype=np.float32)
        raw = np.arange(8, dtype=np.float32)
        _, _, e_img = enc.project_image(raw)
        assert np.array_equal(e_img.values, np.concatenate([raw, raw, raw]))


class TestGeoalignLoss:
    def test_orthogonal_pairs_closed_form(self):
        # orthonormal matched pairs: every directional term has the closed form
        n, tau = 8, 0.07
        eye = Tensor(np.eye(n))
        loss = infonce_symmetric(eye, eye, tau)
        expected = -np.log(np.exp(1.0 / tau) / (np.exp(1.0 / tau) + (n - 1)))
        assert float(loss.data) == pytest.approx(expected, rel=1e-12)

    def test_full_loss_orthogonal_construction(self):
        # make raw features the identity and set the graph up so every
        # encoder output is the same orthonormal frame
        n = 6
        tau = 0.07
        params = {
            "img_text_w": Tensor(np.eye(n), requires_grad=True),
            "img_text_b": Tensor(np.zeros(n), requires_grad=True),
            "img_gps_w": Tensor(np.eye(n), requires_grad=True),
            "img_gps_b": Tensor(np.zeros(n), requires_grad=True),
            "text_w": Tensor(np.eye(n), requires_grad=True),
            "text_b": Tensor(np.zeros(n), requires_grad=True),
            "gps_w1": Tensor(np.eye(n), requires_grad=True),
            "gps_b1": Tensor(np.zeros(n), requires_grad=True),
            "gps_w2": Tensor(np.eye(n), requires_grad=True),
            "gps_b2": Tensor(np.zeros(n), requires_grad=True),
        }
        eye = np.eye(n)
        loss = alignment_loss_from_feats(params, eye, eye, eye, tau)
        per_term = -np.log(np.exp(1.0 / tau) / (np.exp(1.0 / tau) + (n - 1)))
        assert float(loss.data) == pytest.approx(2.0 * per_term, rel=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(33)
        data = synthetic_rows(rng, 32)
        enc = AlignEncoder(SMALL)
        batch = AlignBatch(
            image_feats=np.array([d["feat"] for d in data]),
            gps=[LatLon(d["lat"], d["lon"]) for d in data],
            texts=[d["text"] for d in data])
        l1, _ = geoalign_loss(batch, enc)
        perm = rng.permutation(32)
        batch2 = AlignBatch(
            image_feats=batch.image_feats[perm],
            gps=[batch.gps[i] for i in perm],
            texts=[batch.texts[i] for i in perm])
        l2, _ = geoalign_loss(batch2, enc)
        assert l1 == pytest.approx(l2, rel=1e-6)

    def test_batch_of_one_rejected(self):
        enc = AlignEncoder(SMALL)
        batch = AlignBatch(image_feats=np.ones((1, 8)), gps=[LatLon(0, 0)], texts=["x"])
        with pytest.raises(InvalidInputError):
            geoalign_loss(batch, enc)

    def test_directional_terms_nonnegative(self):
        rng = np.random.default_rng(35)
        a = Tensor(normalized_rows(rng.normal(size=(16, 8))))
        b = Tensor(normalized_rows(rng.normal(size=(16, 8))))
        assert float(infonce_symmetric(a, b, 0.07).data) >= 0.0

    def test_normalization_scale_invariance(self):
        rng = np.random.default_rng(37)
        e = rng.normal(size=(12, 8))
        from geotoken.align import _l2norm
        la = infonce_symmetric(_l2norm(Tensor(e)), _l2norm(Tensor(e * 1.0)), 0.07)
        lb = infonce_symmetric(_l2norm(Tensor(e * 37.5)), _l2norm(Tensor(e * 0.25)), 0.07)
        assert float(la.data) == pytest.approx(float(lb.data), rel=1e-9)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(39)
        data = synthetic_rows(rng, 12)
        enc = AlignEncoder(AlignConfig(raw_dim=8, proj_dim=4, rff_per_scale=2,
                                       gps_hidden=6, text_buckets=64))
        params64 = nn.clone_params_as(enc.params, np.float64)
        feats = np.array([d["feat"] for d in data])
        rff = rff_features(
            mercator_xy([d["lat"] for d in data], [d["lon"] for d in data]),
            enc.rff_freqs, enc.rff_phases, dtype=np.float64)
        tf = hashed_ngram_features([d["text"] for d in data], 64, dtype=np.float64)
        def loss():
            return alignment_loss_from_feats(params64, feats, rff, tf, 0.07)
        errs = nn.finite_difference_check(loss, params64, n_coords=200)
        assert max(errs.values()) < 1e-4

    def test_loss_decreases_over_200_steps(self):
        rng = np.random.default_rng(41)
        data = synthetic_rows(rng, 256)
        enc = AlignEncoder(SMALL)
        feats, lat, lon, texts = (np.array([d["feat"] for d in data]),
                                  [d["lat"] for d in data],
                                  [d["lon"] for d in data],
                                  [d["text"] for d in data])
        rff = rff_features(mercator_xy(lat, lon), enc.rff_freqs, enc.rff_phases)
        tf = hashed_ngram_features(texts, SMALL.text_buckets)
        opt = nn.AdamW(enc.params, lr=1e-3, weight_decay=1e-6)
        losses = []
        for _ in range(200):
            opt.zero_grad()
            loss = alignment_loss_from_feats(enc.params, feats, rff, tf, 0.07)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        assert losses[-1] < losses[0]
        assert losses[-1] < min(losses[:5])


class TestTrainAlign:
    def test_zero_epochs_unchanged(self):
        rng = np.random.default_rng(43)
        data = synthetic_rows(rng, 32)
        cfg = AlignConfig(**{**SMALL.__dict__, "epochs": 0})
        enc = train_align(data, cfg)
        fresh = AlignEncoder(cfg)
        for k in enc.params:
            assert np.array_equal(enc.params[k].data, fresh.params[k].data)

    def test_empty_dataset_rejected(self):
        with pytest.raises(InvalidInputError):
            train_align([], SMALL)

    def test_fixed_seed_bit_identical_checkpoint(self, tmp_path):
        rng = np.random.default_rng(45)
        data = synthetic_rows(rng, 64)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        train_align(data, SMALL, checkpoint_path=p1)
        train_align(data, SMALL, checkpoint_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(47)
        data = synthetic_rows(rng, 64)
        path = tmp_path / "align.ckpt"
        enc = train_align(data, SMALL, checkpoint_path=path)
        loaded = AlignEncoder.load(path)
        assert loaded.config.raw_dim == SMALL.raw_dim
        for k in enc.params:
            assert np.array_equal(enc.params[k].data, loaded.params[k].data)
        pts = ([10.0, -20.0], [30.0, 40.0])
        assert np.array_equal(enc.encode_gps_batch(*pts), loaded.encode_gps_batch(*pts))

    def test_curve_csv_written(self, tmp_path):
        rng = np.random.default_rng(49)
        data = synthetic_rows(rng, 64)
        curve = tmp_path / "curve.csv"
        train_align(data, SMALL, curve_path=curve)
        lines = curve.read_text().strip().split("\n")
        assert lines[0] == "step,loss"
        assert len(lines) > 1

    def test_retrieval_beats_random_baseline(self):
        rng = np.random.default_rng(51)
        data = synthetic_rows(rng, 320)
        train_rows, held = data[:256], data[256:]
        enc = train_align(train_rows, AlignConfig(**{**SMALL.__dict__, "epochs": 10}))
        feats = np.array([d["feat"] for d in held])
        _, e_ig, _ = enc.project_image_batch(feats)
        e_g = enc.encode_gps_batch([d["lat"] for d in held], [d["lon"] for d in held])
        sims = normalized_rows(e_ig) @ normalized_rows(e_g).T
        top1 = float(np.mean(np.argmax(sims, axis=1) == np.arange(len(held))))
        assert top1 > 1.0 / len(held)
