import math

import numpy as np
import pytest

from phonovis import generator, training
from phonovis.training import (CorrespondenceMap, Model, NumericalAbort, RunReport, make_corpus,
                               normalized_mutual_info, split_corpus, train)


def entropy(labels):
    _, c = np.unique(labels, return_counts=True)
    p = c / c.sum()
    return -float((p * np.log(p)).sum())


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    from phonovis.config import ExperimentConfig

    root = tmp_path_factory.mktemp("tiny")
    cfg = ExperimentConfig(seed=3, utterances=12, T=12, n_languages=3, unseen=["L2"], epochs=2, batch=4,
                           kmeans_restarts=2, refit_period=1, corpus=str(root / "corpus"), output=str(root / "run"))
    universe, languages = make_corpus(cfg)
    return cfg, universe, languages


class TestNMI:
    def test_identical_and_relabelled(self):
        a = np.array([0, 0, 1, 1, 2, 2, 2])
        assert normalized_mutual_info(a, a) == pytest.approx(1.0)
        assert normalized_mutual_info(a, (a + 1) % 3 * 10) == pytest.approx(1.0)

    def test_independent_is_zero(self):
        a = np.repeat([0, 1], 4)
        b = np.tile([0, 1], 4)
        assert normalized_mutual_info(a, b) == pytest.approx(0.0, abs=1e-15)

    def test_constant_is_zero(self):
        assert normalized_mutual_info([1, 1, 1], [0, 1, 2]) == 0.0

    def test_hand_example(self):
        a = np.array([0, 0, 0, 1, 1, 1])
        b = np.array([0, 0, 1, 1, 1, 1])
        joint = {(0, 0): 2 / 6, (0, 1): 1 / 6, (1, 1): 3 / 6}
        pa, pb = {0: 0.5, 1: 0.5}, {0: 2 / 6, 1: 4 / 6}
        mi = sum(p * math.log(p / (pa[i] * pb[j])) for (i, j), p in joint.items())
        assert normalized_mutual_info(a, b) == pytest.approx(mi / ((entropy(a) + entropy(b)) / 2), abs=1e-14)


class TestCorrespondence:
    def test_permuted_codes_are_recovered(self, rng):
        corr = rng.permutation(5)
        ids = rng.integers(5, size=300)
        pmap, vmap = rng.permutation(5), rng.permutation(5)
        p_codes, v_codes = pmap[ids], vmap[corr[ids]]
        cmap = CorrespondenceMap.fit(p_codes, v_codes, corr[ids], 5, 5)
        assert cmap.accuracy(p_codes, ids, corr) == 1.0

    def test_extra_codes_fall_back_to_argmax(self):
        table = np.array([[5.0, 0.0], [0.0, 5.0], [1.0, 3.0]])
        assert training.hungarian_map(table).tolist() == [0, 1, 1]


def test_split_is_disjoint_and_complete(tiny):
    cfg, _, languages = tiny
    tr, held, zero = split_corpus(languages, cfg.unseen, cfg.holdout, cfg.seed)
    assert set(zero.languages) == {"L2"} and "L2" not in set(tr.languages) | set(held.languages)
    assert len(tr) + len(held) == 2 * cfg.utterances and len(held) == 2
    assert len(zero) == cfg.utterances


def test_unknown_unseen_language():
    from phonovis.config import ExperimentConfig

    with pytest.raises(ValueError, match="not among"):
        make_corpus(ExperimentConfig(utterances=2, T=4, n_languages=2, unseen=["L7"]))


class TestTrain:
    def test_report_shape(self, tiny):
        cfg, universe, languages = tiny
        report, model = train(cfg, universe, languages, cfg.unseen)
        assert [e["epoch"] for e in report.epochs] == [1, 2]
        assert 0.0 <= report.alignment_accuracy <= 1.0 and 0.0 <= report.routing_nmi <= 1.0
        assert set(report.final_metrics) == {"held_out", "zero_shot"}
        assert report.parameter_count == model.parameter_count() > 0
        assert sum(report.expert_usage) == 2 * cfg.T * cfg.S
        assert RunReport.from_json(report.to_json()).deterministic_view() == report.deterministic_view()

    def test_zero_epochs(self, tiny):
        cfg, universe, languages = tiny
        report, _ = train(cfg.replace(epochs=0), universe, languages, cfg.unseen, with_metrics=False)
        assert report.epochs == [] and report.status == "ok"
        assert math.isfinite(report.alignment_accuracy) and math.isfinite(report.zero_shot_accuracy)

    def test_disable_pv_align(self, tiny):
        cfg, universe, languages = tiny
        report, _ = train(cfg.replace(disable_pv_align=True), universe, languages, cfg.unseen, with_metrics=False)
        assert all(e["align"] == 0.0 for e in report.epochs)

    def test_disable_moe_uses_one_expert(self, tiny):
        cfg, universe, languages = tiny
        report, model = train(cfg.replace(disable_moe=True, epochs=1), universe, languages, cfg.unseen,
                              with_metrics=False)
        assert len(model.experts) == 1 and all(e["router"] == 0.0 for e in report.epochs)

    def test_deterministic(self, tiny, tmp_path):
        cfg, universe, languages = tiny
        r1, _ = train(cfg, universe, languages, cfg.unseen, checkpoint_dir=tmp_path / "a", with_metrics=False)
        r2, _ = train(cfg, universe, languages, cfg.unseen, checkpoint_dir=tmp_path / "b", with_metrics=False)
        assert r1.deterministic_view() == r2.deterministic_view()
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_only_selected_experts_run(self, tiny):
        cfg, universe, languages = tiny
        tr, _, _ = split_corpus(languages, cfg.unseen, cfg.holdout, cfg.seed)
        model = Model(cfg)
        rng = np.random.default_rng(0)
        model.init_banks(tr, rng)
        _, usage = model.train_step(tr.z_p[:4], tr.z_v[:4], tr.frames[:4], rng)
        assert np.array_equal(model.expert_calls, usage)
        assert model.expert_calls.sum() == 4 * cfg.T * cfg.S

    def test_step_work_grows_with_expert_count(self, tiny):
        cfg, universe, languages = tiny
        tr, _, _ = split_corpus(languages, cfg.unseen, cfg.holdout, cfg.seed)
        sizes, rows = [], []
        for M in range(2, 7):
            model = Model(cfg.replace(M=M, S=2))
            rng = np.random.default_rng(0)
            model.init_banks(tr, rng)
            model.train_step(tr.z_p[:2], tr.z_v[:2], tr.frames[:2], rng)
            sizes.append(model.parameter_count())
            rows.append(int(model.expert_calls.sum()))
        assert all(b > a for a, b in zip(sizes, sizes[1:]))
        assert rows == [2 * cfg.T * 2] * 5

    def test_non_finite_loss_aborts_with_report(self, tiny, monkeypatch):
        cfg, universe, languages = tiny
        real = generator.generation_loss
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            out = real(*args, **kwargs)
            return out * float("nan") if calls["n"] > 6 else out

        monkeypatch.setattr(training, "generation_loss", flaky)
        with pytest.raises(NumericalAbort) as info:
            train(cfg, universe, languages, cfg.unseen, with_metrics=False)
        report = info.value.report
        assert report is not None and report.status == "aborted: non-finite loss after epoch 1"
        assert len(report.epochs) == 1
