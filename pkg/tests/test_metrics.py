import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phonovis.metrics import (EPS, LandmarkError, LandmarkSequence, convex_hull, convex_hull_area, evaluate_pair,
                              feature_correlations, lse_d, mouth_features, normalize_landmarks, pearson, tmdc,
                              write_metrics_csv)
from phonovis.synthcorpus import ellipse_landmarks


def random_mouths(T, seed):
    rng = np.random.default_rng(seed)
    wh = np.column_stack([rng.uniform(1.0, 2.5, T), rng.uniform(0.2, 1.5, T)])
    seq = ellipse_landmarks(wh)
    return seq.with_coords(seq.coords + rng.normal(0, 0.02, seq.coords.shape))


def brute_hull_area(points):
    """O(n^3) oracle: an ordered pair is a hull edge when no point lies strictly to its right."""
    pts = np.unique(np.asarray(points, float), axis=0)
    verts = set()
    n = len(pts)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a, b = pts[i], pts[j]
            side = [(b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) for p in pts]
            if all(s >= 0 for s in side) and any(s > 0 for s in side):
                verts.update([i, j])
    if len(verts) < 3:
        return 0.0
    v = pts[sorted(verts)]
    c = v.mean(axis=0)
    v = v[np.argsort(np.arctan2(v[:, 1] - c[1], v[:, 0] - c[0]))]
    # triangle fan from the first vertex
    return sum(abs((v[k][0] - v[0][0]) * (v[k + 1][1] - v[0][1]) - (v[k][1] - v[0][1]) * (v[k + 1][0] - v[0][0])) / 2
               for k in range(1, len(v) - 1))


class TestSequence:
    def test_rejects_wrong_shape(self):
        with pytest.raises(LandmarkError):
            LandmarkSequence(np.zeros((3, 25, 2)))

    def test_reports_bad_frame(self):
        c = np.zeros((4, 26, 2))
        c[2, 5, 0] = np.nan
        with pytest.raises(LandmarkError, match="frame 2"):
            LandmarkSequence(c)

    def test_json_roundtrip(self, tmp_path):
        seq = random_mouths(5, 0)
        seq.save(tmp_path / "a.json")
        back = LandmarkSequence.load(tmp_path / "a.json")
        assert back.coords.tobytes() == seq.coords.tobytes() and back.anchors == seq.anchors

    def test_bad_json_frame(self):
        data = {"frames": [[[0, 0]] * 26, [[0, 0]] * 25]}
        with pytest.raises(LandmarkError, match="at frame 1"):
            LandmarkSequence.from_json(data, source="x.json")


class TestNormalize:
    def test_idempotent(self):
        once = normalize_landmarks(random_mouths(6, 1))
        assert np.allclose(normalize_landmarks(once).coords, once.coords, atol=1e-12)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.1, 10))
    def test_similarity_invariance(self, dx, dy, s):
        seq = random_mouths(4, 2)
        moved = seq.with_coords(seq.coords * s + [dx, dy])
        assert np.allclose(normalize_landmarks(moved).coords, normalize_landmarks(seq).coords, atol=1e-9)

    def test_zero_width_frame(self):
        seq = random_mouths(3, 3)
        c = seq.coords.copy()
        c[1, 13] = c[1, 0]
        with pytest.raises(LandmarkError, match="frame 1"):
            normalize_landmarks(seq.with_coords(c))


class TestLSED:
    def test_self_is_zero(self):
        a = random_mouths(8, 4)
        assert lse_d(a, a) == 0.0

    def test_three_four_shift(self):
        a = random_mouths(8, 5)
        assert lse_d(a, a.with_coords(a.coords + [3.0, 4.0])) == 5.0

    def test_two_loop_oracle(self):
        a, b = random_mouths(4, 6), random_mouths(4, 7)
        per_frame = [sum(math.dist(a.coords[t, i], b.coords[t, i]) for i in range(26)) / 26 for t in range(4)]
        assert lse_d(a, b) == pytest.approx(sum(per_frame) / 4, abs=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            lse_d(random_mouths(3, 0), random_mouths(4, 0))


class TestHull:
    def test_square_with_interior(self, rng):
        pts = np.vstack([[[0, 0], [1, 0], [1, 1], [0, 1]], rng.uniform(0.05, 0.95, (22, 2))])
        assert convex_hull_area(pts) == pytest.approx(1.0, abs=1e-15)

    def test_degenerate(self):
        assert convex_hull_area(np.ones((26, 2))) == 0.0
        assert convex_hull_area(np.column_stack([np.arange(26.0), 2 * np.arange(26.0)])) == 0.0

    def test_counter_clockwise_without_collinear(self):
        hull = convex_hull([[0, 0], [2, 0], [1, 0], [2, 2], [0, 2], [1, 1]])
        assert hull == [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)]

    @given(arrays(float, (26, 2), elements=st.floats(-5, 5)))
    def test_matches_brute_force(self, pts):
        assert convex_hull_area(pts) == pytest.approx(brute_hull_area(pts), rel=1e-9, abs=1e-9)


class TestMouthFeatures:
    def test_symmetric_mouth(self):
        seq = ellipse_landmarks([[2.0, 2.0]])
        seq = seq.with_coords(seq.coords + [1.0, 0.0])
        assert seq.anchor("left")[0].tolist() == [0.0, 0.0] and seq.anchor("top")[0].tolist() == [1.0, 1.0]
        f = mouth_features(seq)
        assert f.row("width")[0] == 2.0 and f.row("height")[0] == 2.0
        assert f.row("aspect_ratio")[0] == pytest.approx(1.0) and f.row("openness")[0] == pytest.approx(1.0)

    def test_closed_mouth(self):
        c = ellipse_landmarks([[2.0, 1.0]]).coords.copy()
        c[0, :, 1] = 0.0
        f = mouth_features(LandmarkSequence(c))
        assert f.row("height")[0] == 0.0 and f.row("openness")[0] == 0.0
        assert f.row("aspect_ratio")[0] == pytest.approx(2.0 / EPS) and np.isfinite(f.row("aspect_ratio")[0])

    def test_aspect_times_openness(self):
        f = mouth_features(random_mouths(50, 8))
        assert np.allclose(f.row("aspect_ratio") * f.row("openness"), 1.0, atol=1e-6)


class TestPearsonTMDC:
    def test_examples(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        with pytest.warns(RuntimeWarning):
            assert pearson([1, 2, 3], [5, 5, 5]) == 0.0
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])

    def test_self_is_one(self):
        a = random_mouths(40, 9)
        assert abs(tmdc(a, a) - 1.0) <= 1e-9

    def test_affine_invariance(self):
        # scaling all coordinates by s and translating maps every feature to a positive affine image
        a = random_mouths(40, 10)
        b = a.with_coords(a.coords * 1.7 + [4.0, -2.0])
        assert np.allclose(feature_correlations(a, b), 1.0, atol=1e-12)

    @given(arrays(float, 30, elements=st.floats(-5, 5)), st.floats(0.1, 10), st.floats(-10, 10))
    def test_pearson_affine(self, x, s, t):
        if np.ptp(x) < 1e-3:
            return
        assert pearson(x, s * x + t) == pytest.approx(1.0, abs=1e-9)

    def test_independent_null(self):
        assert abs(tmdc(random_mouths(500, 11), random_mouths(500, 12))) < 0.15

    def test_frozen_mouth_scores_zero(self):
        a = random_mouths(10, 13)
        frozen = a.with_coords(np.repeat(a.coords[:1], 10, axis=0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert tmdc(a, frozen) == 0.0


def test_metrics_csv_layout():
    a = random_mouths(5, 14)
    rows = [(f"pair{i}", evaluate_pair(a, a)) for i in range(10)]
    buf = io.StringIO()
    write_metrics_csv(buf, rows)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 11
    assert lines[0] == "id,LSE-D,TMDC,r_1,r_2,r_3,r_4,r_5"
