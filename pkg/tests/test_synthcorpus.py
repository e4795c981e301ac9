import math

import numpy as np
import pytest

from phonovis import synthcorpus as sc
from phonovis.generator import temporal_diff
from phonovis.metrics import convex_hull_area, mouth_features
from phonovis.prototypes import PrototypeBank, hard_assign


def small_corpus(seed=0, sigma=0.5, n_utt=3):
    u = sc.make_universe(8, 16, 12, seed, sigma)
    specs = sc.default_language_specs(5, 8, 6, 10, n_utt, sigma, sigma, seed)
    return u, [sc.generate_language(s, u) for s in specs]


class TestUniverse:
    def test_two_classes_without_noise(self):
        u = sc.make_universe(2, 3, 3, 0, 0.0)
        assert u.K == 2 and sorted(u.correspondence.tolist()) == [0, 1]
        assert np.linalg.norm(u.phoneme_archetypes[0] - u.phoneme_archetypes[1]) > 0

    @pytest.mark.parametrize("seed", range(4))
    def test_separation_by_exhaustive_scan(self, seed):
        u = sc.make_universe(8, 16, 12, seed, 0.5)
        for A in (u.phoneme_archetypes, u.viseme_archetypes):
            for i in range(8):
                for j in range(i + 1, 8):
                    assert np.linalg.norm(A[i] - A[j]) >= 3.0

    def test_unreachable_separation(self):
        with pytest.raises(ValueError, match="lower K_true or sigma"):
            sc.make_universe(8, 2, 2, 0, 5.0, max_draws=20)

    def test_json_roundtrip(self):
        u = sc.make_universe(4, 3, 2, 1, 0.3)
        back = sc.Universe.from_json(u.to_json())
        assert all(np.array_equal(getattr(u, k), getattr(back, k)) for k in
                   ("phoneme_archetypes", "viseme_archetypes", "correspondence", "mouth_params"))


class TestSequences:
    def test_identity_transition_is_constant(self, rng):
        s = sc.markov_chain(np.eye(5), 40, rng)
        assert len(set(s.tolist())) == 1

    def test_uniform_transition_frequencies(self):
        n = 6
        s = sc.markov_chain(np.full((n, n), 1 / n), 10000, np.random.default_rng(8))
        freq = np.bincount(s, minlength=n) / len(s)
        assert np.abs(freq - 1 / n).max() < 0.03

    def test_sticky_rows_are_distributions(self, rng):
        m = sc.sticky_transition(5, rng, stay=0.6)
        assert np.allclose(m.sum(1), 1) and np.allclose(np.diag(m), 0.6)

    def test_bad_language_spec(self):
        with pytest.raises(ValueError):
            sc.LanguageSpec("X", [0, 1], np.array([[0.5, 0.6], [0.5, 0.5]]))


class TestMouths:
    def test_ellipse_area(self):
        seq = sc.render_landmarks([2.0, 1.0], T=1)
        area = convex_hull_area(seq.coords[0])
        a, b = 1.0, 0.5
        dtheta = np.diff(np.append(sc.ANGLES, sc.ANGLES[0] + 2 * math.pi))
        oracle = 0.5 * a * b * np.sin(dtheta).sum()
        assert area == pytest.approx(oracle, abs=1e-12)
        assert abs(area - math.pi * a * b) < 0.05

    def test_anchors_give_width_and_height(self):
        f = mouth_features(sc.render_landmarks([1.6, 0.7], T=2))
        assert f.row("width")[0] == pytest.approx(1.6) and f.row("height")[0] == pytest.approx(0.7)

    def test_constant_viseme_is_static(self):
        seq = sc.render_landmarks(np.tile([1.4, 0.9], (6, 1)))
        assert not np.diff(seq.coords, axis=0).any()
        assert not temporal_diff(sc.rasterize(seq)).any()

    def test_transitions_are_smooth(self):
        seq = sc.render_landmarks(np.array([[1.0, 0.5]] * 3 + [[2.0, 1.0]] * 5))
        w = mouth_features(seq).row("width")
        assert np.allclose(w[2:6], [1.0, 1 + 1 / 3, 1 + 2 / 3, 2.0])

    def test_nonpositive_params(self):
        with pytest.raises(ValueError):
            sc.render_landmarks([0.0, 1.0], T=3)

    def test_fitter_recovers_grid_mouths(self):
        fitter = sc.MouthFitter()
        wh = fitter.params[[10, 500, 2000]]
        assert np.array_equal(fitter.fit(sc.rasterize(sc.ellipse_landmarks(wh))), wh)


class TestSplits:
    def test_four_one_split(self):
        _, langs = small_corpus()
        seen, unseen = sc.split_seen_unseen(langs, ["L4"])
        assert [l.name for l in seen] == ["L0", "L1", "L2", "L3"] and [l.name for l in unseen] == ["L4"]

    def test_empty_unseen(self):
        _, langs = small_corpus()
        seen, unseen = sc.split_seen_unseen(langs, [])
        assert len(seen) == 5 and unseen == []

    def test_unknown_name(self):
        _, langs = small_corpus()
        with pytest.raises(ValueError, match="unknown"):
            sc.split_seen_unseen(langs, ["L9"])

    def test_unseen_outside_universe(self):
        u, langs = small_corpus()
        langs[4].spec.phonemes[0] = 99
        with pytest.raises(ValueError, match="outside the universe"):
            sc.split_seen_unseen(langs, ["L4"], u)

    def test_seen_languages_cover_universe(self):
        specs = sc.default_language_specs(5, 8, 6)
        assert set().union(*(s.phonemes for s in specs[:4])) == set(range(8))


def test_noise_free_features_recover_correspondence():
    u, langs = small_corpus(sigma=0.0, n_utt=4)
    bank_p = PrototypeBank(u.phoneme_archetypes)
    bank_v = PrototypeBank(u.viseme_archetypes, "viseme")
    for lang in langs:
        for utt in lang.utterances:
            p, v = hard_assign(utt.z_p, bank_p), hard_assign(utt.z_v, bank_v)
            assert np.array_equal(p, utt.ids)
            assert np.array_equal(u.correspondence[p], v)


class TestDisk:
    def test_roundtrip_and_validation(self, tmp_path):
        u, langs = small_corpus()
        manifest = sc.save_corpus(tmp_path / "c", u, langs, ["L4"])
        assert sorted(p.name for p in (tmp_path / "c").iterdir() if p.is_dir()) == ["L0", "L1", "L2", "L3", "L4"]
        u2, langs2, unseen = sc.load_corpus(tmp_path / "c")
        assert unseen == ["L4"] and sc.validate_corpus(u2, langs2) == []
        assert manifest["n_files"] == 1 + 5 * (1 + 3 * 3)
        a, b = langs[2].utterances[1], langs2[2].utterances[1]
        assert a.z_p.tobytes() == b.z_p.tobytes() and a.frames.tobytes() == b.frames.tobytes()

    def test_same_config_same_bytes(self, tmp_path):
        m1 = sc.save_corpus(tmp_path / "a", *small_corpus(4), [])
        m2 = sc.save_corpus(tmp_path / "b", *small_corpus(4), [])
        assert m1["content_hash"] == m2["content_hash"]
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()

    def test_tampering_detected(self, tmp_path):
        sc.save_corpus(tmp_path / "c", *small_corpus(), [])
        (tmp_path / "c/L1/utt0000.frames.bin").write_bytes(b"\0" * 8)
        with pytest.raises(ValueError, match="hash mismatch"):
            sc.load_corpus(tmp_path / "c")

    def test_validation_flags_problems(self):
        u, langs = small_corpus()
        langs[0].utterances[0].ids[0] = 7 if 7 not in langs[0].spec.phonemes else 0
        langs[0].spec.phonemes = [p for p in langs[0].spec.phonemes if p != langs[0].utterances[0].ids[0]]
        assert any("outside the phoneme subset" in p for p in sc.validate_corpus(u, langs))
