import numpy as np
import pytest

from geotoken import (
    DEFAULT_LEVELS,
    CellId,
    InvalidInputError,
    LatLon,
    TokenSequence,
    cell_diagonal_km,
    cell_id_of,
    common_prefix_len,
    common_prefix_len_batch,
    detokenize,
    detokenize_batch,
    haversine_km,
    haversine_km_batch,
    tokenize,
    tokenize_batch,
)


def random_points(rng, n):
    lat = np.degrees(np.arcsin(rng.uniform(-1.0, 1.0, size=n)))
    lon = rng.uniform(-180.0, 180.0, size=n)
    return lat, lon


class TestLatLon:
    def test_latitude_bounds_enforced(self):
        LatLon(90.0, 0.0)
        LatLon(-90.0, 0.0)
        with pytest.raises(InvalidInputError):
            LatLon(90.0001, 0.0)
        with pytest.raises(InvalidInputError):
            LatLon(-91.0, 0.0)

    def test_longitude_wraps_never_errors(self):
        assert LatLon(0.0, 180.0).lon_deg == -180.0
        assert LatLon(0.0, -180.0).lon_deg == -180.0
        assert LatLon(0.0, 540.0).lon_deg == -180.0
        assert LatLon(0.0, 370.0).lon_deg == pytest.approx(10.0)
        assert LatLon(0.0, -190.0).lon_deg == pytest.approx(170.0)
        assert -180.0 <= LatLon(0.0, 179.9999).lon_deg < 180.0


class TestTokenSequence:
    def test_token_ranges_enforced(self):
        TokenSequence((5, 3, 0))
        with pytest.raises(InvalidInputError):
            TokenSequence((6, 0))
        with pytest.raises(InvalidInputError):
            TokenSequence((0, 4))
        with pytest.raises(InvalidInputError):
            TokenSequence(())

    def test_text_form_is_bare_digit_string(self):
        t = tokenize(LatLon(48.8566, 2.3522))
        s = str(t)
        assert len(s) == DEFAULT_LEVELS
        assert s[0] in "012345"
        assert all(c in "0123" for c in s[1:])
        assert TokenSequence.from_string(s) == t

    def test_from_string_rejects_garbage(self):
        with pytest.raises(InvalidInputError):
            TokenSequence.from_string("7000")
        with pytest.raises(InvalidInputError):
            TokenSequence.from_string("0a12")
        with pytest.raises(InvalidInputError):
            TokenSequence.from_string("")

    def test_array_round_trip(self):
        t = tokenize(LatLon(-12.0, 77.0))
        assert TokenSequence.from_array(t.to_array()) == t

    def test_immutable_and_hashable(self):
        t = tokenize(LatLon(10.0, 10.0))
        with pytest.raises(AttributeError):
            t.tokens = (0,)
        assert t in {t}
        assert t.level == DEFAULT_LEVELS - 1


class TestTokenize:
    def test_origin_face_token(self):
        # +X axis lies on face 0
        assert tokenize(LatLon(0.0, 0.0), levels=1).tokens == (0,)

    def test_origin_matches_reference_cell_id(self, s2_vectors):
        m = (s2_vectors["lat"] == 0.0) & (s2_vectors["lon"] == 0.0) & (s2_vectors["level"] == 20)
        assert m.any()
        expected = int(s2_vectors["cell_id"][m][0])
        t = tokenize(LatLon(0.0, 0.0), levels=21)
        assert cell_id_of(t) == expected

    def test_levels_bounds(self):
        with pytest.raises(InvalidInputError):
            tokenize(LatLon(0.0, 0.0), levels=0)
        with pytest.raises(InvalidInputError):
            tokenize(LatLon(0.0, 0.0), levels=32)
        assert len(tokenize(LatLon(0.0, 0.0), levels=31)) == 31

    def test_batch_agrees_with_scalar(self):
        rng = np.random.default_rng(7)
        lat, lon = random_points(rng, 50)
        batch = tokenize_batch(lat, lon)
        for i in range(50):
            t = tokenize(LatLon(float(lat[i]), float(lon[i])))
            assert tuple(int(x) for x in batch[i]) == t.tokens

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(11)
        lat, lon = random_points(rng, 500)
        a = tokenize_batch(lat, lon)
        b = tokenize_batch(lat.copy(), lon.copy())
        assert np.array_equal(a, b)

    def test_rejects_bad_latitude(self):
        with pytest.raises(InvalidInputError):
            tokenize_batch(np.array([0.0, 95.0]), np.array([0.0, 0.0]))
        with pytest.raises(InvalidInputError):
            tokenize_batch(np.array([np.nan]), np.array([0.0]))


class TestDetokenize:
    def test_face_centers(self):
        # face centers sit on the coordinate axes; pole longitudes follow the
        # reference implementation's signed-zero atan2 convention
        expected = {0: (0.0, 0.0), 1: (0.0, 90.0), 2: (90.0, -180.0),
                    3: (0.0, -180.0), 4: (0.0, -90.0), 5: (-90.0, 0.0)}
        for f, (lat, lon) in expected.items():
            c = detokenize(TokenSequence((f,)))
            assert c.lat_deg == pytest.approx(lat, abs=1e-12)
            assert c.lon_deg == pytest.approx(lon, abs=1e-12)

    def test_round_trip_tokens_fixed_point(self):
        rng = np.random.default_rng(3)
        lat, lon = random_points(rng, 200)
        for i in range(200):
            t = tokenize(LatLon(float(lat[i]), float(lon[i])))
            assert tokenize(detokenize(t)) == t

    def test_round_trip_containment(self):
        rng = np.random.default_rng(5)
        lat, lon = random_points(rng, 2000)
        toks = tokenize_batch(lat, lon)
        clat, clon = detokenize_batch(toks)
        err = haversine_km_batch(lat, lon, clat, clon)
        assert float(err.max()) <= cell_diagonal_km(DEFAULT_LEVELS - 1)

    def test_rejects_bad_tokens(self):
        with pytest.raises(InvalidInputError):
            detokenize_batch(np.array([[6, 0, 0]]))
        with pytest.raises(InvalidInputError):
            detokenize_batch(np.array([[0, 4, 0]]))
        with pytest.raises(InvalidInputError):
            detokenize_batch(np.zeros((1, 0), dtype=np.uint8))

    def test_reference_centers(self, s2_vectors):
        # cell centers must match the reference implementation's to ~1e-12 deg
        toks = tokenize_batch(s2_vectors["lat"], s2_vectors["lon"], levels=21)
        for lvl in (0, 5, 12, 20):
            m = s2_vectors["level"] == lvl
            clat, clon = detokenize_batch(toks[m][:, : lvl + 1])
            assert np.abs(clat - s2_vectors["center_lat"][m]).max() < 1e-9
            dlon = np.abs((clon - s2_vectors["center_lon"][m] + 180.0) % 360.0 - 180.0)
            assert dlon.max() < 1e-9


class TestCellId:
    def test_reference_vectors_bit_for_bit(self, s2_vectors):
        toks = tokenize_batch(s2_vectors["lat"], s2_vectors["lon"], levels=21)
        for i in range(len(s2_vectors["level"])):
            lvl = int(s2_vectors["level"][i])
            t = TokenSequence.from_array(toks[i, : lvl + 1])
            assert cell_id_of(t) == int(s2_vectors["cell_id"][i])

    def test_id_token_round_trip(self):
        rng = np.random.default_rng(13)
        lat, lon = random_points(rng, 100)
        for i in range(100):
            t = tokenize(LatLon(float(lat[i]), float(lon[i])))
            cid = CellId.from_tokens(t)
            assert cid.to_tokens() == t
            assert CellId.from_id(cid.id) == cid

    def test_from_id_rejects_invalid(self):
        with pytest.raises(InvalidInputError):
            CellId.from_id(0)  # no trailing set bit
        with pytest.raises(InvalidInputError):
            CellId.from_id((6 << 61) | 1)  # face 6


class TestCommonPrefix:
    def test_identical_and_yields_length(self):
        t = tokenize(LatLon(1.0, 1.0))
        assert common_prefix_len(t, t) == len(t)

    def test_differ_at_face(self):
        a = tokenize(LatLon(0.0, 0.0))    # face 0
        b = tokenize(LatLon(0.0, 90.0))   # face 1
        assert common_prefix_len(a, b) == 0

    def test_length_mismatch_errors(self):
        with pytest.raises(InvalidInputError):
            common_prefix_len(TokenSequence((0, 1)), TokenSequence((0, 1, 2)))

    def test_near_points_share_longer_prefix(self):
        rng = np.random.default_rng(17)
        wins = 0
        trials = 40
        for _ in range(trials):
            lat = float(np.degrees(np.arcsin(rng.uniform(-0.9, 0.9))))
            lon = float(rng.uniform(-170, 170))
            base = LatLon(lat, lon)
            near = LatLon(lat + 0.0009, lon)                  # ~100 m
            far_lat = max(-89.0, min(89.0, lat + 9.0))        # ~1000 km
            far = LatLon(far_lat, lon)
            p_near = common_prefix_len(tokenize(base), tokenize(near))
            p_far = common_prefix_len(tokenize(base), tokenize(far))
            if p_near > p_far:
                wins += 1
        assert wins == trials

    def test_prefix_containment_duality(self):
        # sharing a prefix of length l <=> same cell at level l-1
        rng = np.random.default_rng(19)
        lat, lon = random_points(rng, 300)
        toks = tokenize_batch(lat, lon)
        a, b = toks[:150], toks[150:]
        plen = common_prefix_len_batch(a, b)
        for i in range(150):
            l = int(plen[i])
            ta = TokenSequence.from_array(a[i])
            tb = TokenSequence.from_array(b[i])
            for probe in {1, max(1, l), min(len(ta), l + 1)}:
                same_cell = (cell_id_of(TokenSequence.from_array(a[i][:probe]))
                             == cell_id_of(TokenSequence.from_array(b[i][:probe])))
                assert same_cell == (l >= probe)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(23)
        lat, lon = random_points(rng, 60)
        toks = tokenize_batch(lat, lon)
        a, b = toks[:30], toks[30:]
        batch = common_prefix_len_batch(a, b)
        for i in range(30):
            assert batch[i] == common_prefix_len(
                TokenSequence.from_array(a[i]), TokenSequence.from_array(b[i]))


class TestCellDiagonal:
    def test_monotone_non_increasing(self):
        vals = [cell_diagonal_km(l) for l in range(31)]
        assert all(x >= y for x, y in zip(vals, vals[1:]))

    def test_level0_at_least_face_diagonal(self):
        # cube face diagonal projected to sphere spans over a quarter turn
        assert cell_diagonal_km(0) >= np.radians(90.0) * 6371.0

    def test_halves_each_level(self):
        for l in range(30):
            assert cell_diagonal_km(l + 1) == pytest.approx(cell_diagonal_km(l) / 2)

    def test_level_bounds(self):
        with pytest.raises(InvalidInputError):
            cell_diagonal_km(-1)
        with pytest.raises(InvalidInputError):
            cell_diagonal_km(31)

    def test_level20_consistent_with_monte_carlo(self):
        rng = np.random.default_rng(29)
        lat, lon = random_points(rng, 100_000)
        toks = tokenize_batch(lat, lon)
        clat, clon = detokenize_batch(toks)
        worst = float(haversine_km_batch(lat, lon, clat, clon).max())
        bound = cell_diagonal_km(20)
        assert worst <= bound
        # the bound is tight: the worst observed error is the same order
        assert worst > 0.1 * bound
