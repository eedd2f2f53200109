"""Bank construction, purification, and the closed-form classifier fit."""

import numpy as np
import numpy.testing as npt
import pytest

from piaa import pvcl, store
from piaa.errors import FitError
from piaa.pvcl import (
    CovarianceEstimate,
    MemoryBank,
    bootstrap_banks,
    fit_final,
    fit_preliminary,
    purify_banks,
    run_pvcl,
    shrinkage_precision,
    vision_scores,
)
from piaa.zeroshot import predictive_entropy, text_align_probs


def worked_case():
    """2-class, d=2 set with banks {(1,1),(1,-1)} and {(-1,1),(-1,-1)}."""
    patches = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
    es = store.make_embedding_set([4], patches, np.array([[1.0, 0.0]]), normalize=False)
    bank = MemoryBank(members=(np.array([0, 1]), np.array([2, 3])),
                      stage="bootstrap", capacity=4)
    return es, bank


def random_fit(rng, num_classes=3, dim=5, per_class=20):
    x = np.concatenate([rng.normal(loc=3 * rng.normal(size=dim), size=(per_class, dim))
                        for _ in range(num_classes)])
    es = store.make_embedding_set([len(x)], x, rng.normal(size=(1, dim)), normalize=False)
    members = tuple(np.arange(c * per_class, (c + 1) * per_class) for c in range(num_classes))
    bank = MemoryBank(members=members, stage="bootstrap", capacity=per_class)
    return es, bank


class TestBootstrapBanks:
    def test_three_patch_example(self):
        probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.4, 0.6]])
        h = predictive_entropy(probs)
        bank = bootstrap_banks(probs, h, k=1)
        npt.assert_array_equal(bank.members[0], [0])   # lowest entropy among argmax-0
        npt.assert_array_equal(bank.members[1], [2])
        assert bank.stage == "bootstrap"

    def test_capacity_not_binding_keeps_all(self):
        probs = np.array([[0.9, 0.1], [0.7, 0.3], [0.6, 0.4]])
        bank = bootstrap_banks(probs, predictive_entropy(probs), k=10)
        npt.assert_array_equal(bank.members[0], [0, 1, 2])
        assert len(bank.members[1]) == 0

    def test_entropy_tie_breaks_by_ascending_index(self):
        probs = np.array([[0.8, 0.2], [0.8, 0.2], [0.3, 0.7]])
        bank = bootstrap_banks(probs, predictive_entropy(probs), k=1)
        npt.assert_array_equal(bank.members[0], [0])

    def test_members_argmax_consistent(self):
        rng = np.random.default_rng(0)
        probs = rng.dirichlet(np.ones(4), size=200)
        bank = bootstrap_banks(probs, predictive_entropy(probs), k=17)
        argmax = probs.argmax(axis=1)
        for c, m in enumerate(bank.members):
            assert len(m) <= 17
            assert np.all(argmax[m] == c)


class TestFitPreliminary:
    def test_worked_case_exact(self):
        es, bank = worked_case()
        clf = fit_preliminary(es, bank)
        npt.assert_allclose(clf.prototypes, [[1, 0], [-1, 0]], atol=1e-12)
        npt.assert_allclose(clf.precision, np.diag([2.0, 0.5]), atol=1e-12)
        npt.assert_allclose(clf.weights, [[2, 0], [-2, 0]], atol=1e-12)
        npt.assert_allclose(clf.biases, [-1.0, -1.0], atol=1e-12)
        assert clf.provenance == "preliminary"
        assert not clf.fallback_classes

    def test_duplicated_point_triggers_floor(self):
        # zero scatter -> precision = (d / eps_floor) * I
        patches = np.array([[1.0, 0.0], [1.0, 0.0]])
        es = store.make_embedding_set([2], patches, np.array([[1.0, 0.0]]), normalize=False)
        bank = MemoryBank(members=(np.array([0, 1]),), stage="bootstrap", capacity=2)
        clf = fit_preliminary(es, bank)
        npt.assert_allclose(clf.prototypes, [[1.0, 0.0]], atol=1e-15)
        npt.assert_allclose(clf.precision, (2.0 / pvcl.EPS_TRACE_FLOOR) * np.eye(2))

    def test_all_banks_empty_is_unrecoverable(self):
        es, _ = worked_case()
        empty = MemoryBank(members=(np.empty(0, dtype=np.int64),) * 2,
                           stage="bootstrap", capacity=4)
        with pytest.raises(FitError, match="no confident patches"):
            fit_preliminary(es, empty)

    def test_empty_class_needs_prototypes(self):
        es, _ = worked_case()
        bank = MemoryBank(members=(np.array([0, 1]), np.empty(0, dtype=np.int64)),
                          stage="bootstrap", capacity=4)
        with pytest.raises(FitError, match="fallback"):
            fit_preliminary(es, bank)
        tp = store.make_text_prototypes(np.eye(2), ["a", "b"])
        clf = fit_preliminary(es, bank, tp)
        assert clf.fallback_classes == {1}
        # fallback prototype = unit text direction * mean member norm (sqrt(2))
        npt.assert_allclose(clf.prototypes[1], [0.0, np.sqrt(2)], atol=1e-12)

    def test_class_permutation_permutes_rows(self):
        rng = np.random.default_rng(1)
        es, bank = random_fit(rng)
        perm = [2, 0, 1]
        permuted = MemoryBank(members=tuple(bank.members[i] for i in perm),
                              stage="bootstrap", capacity=bank.capacity)
        a = fit_preliminary(es, bank)
        b = fit_preliminary(es, permuted)
        npt.assert_allclose(b.weights, a.weights[perm], atol=1e-12)
        npt.assert_allclose(b.biases, a.biases[perm], atol=1e-12)
        npt.assert_allclose(b.precision, a.precision, atol=1e-12)

    def test_stage1_no_shrinkage_inverts_pooled_covariance(self):
        rng = np.random.default_rng(2)
        es, bank = random_fit(rng, num_classes=2, dim=3, per_class=40)
        clf = fit_preliminary(es, bank, shrinkage=False)
        mu = clf.prototypes
        dev = [es.patches[m].astype(np.float64) - mu[c] for c, m in enumerate(bank.members)]
        sigma = sum(d.T @ d for d in dev) / bank.total()
        npt.assert_allclose(clf.precision @ sigma, np.eye(3), atol=1e-9)

    def test_no_shrinkage_singular_covariance_raises(self):
        patches = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        es = store.make_embedding_set([3], patches, np.array([[1.0, 0.0]]), normalize=False)
        bank = MemoryBank(members=(np.arange(3),), stage="bootstrap", capacity=3)
        with pytest.raises(FitError, match="singular"):
            fit_preliminary(es, bank, shrinkage=False)


class TestVisionScores:
    def test_equal_logits_give_uniform_rows(self):
        es, _ = worked_case()
        clf = pvcl.GdaClassifier(weights=np.zeros((3, 2)), biases=np.zeros(3),
                                 prototypes=np.zeros((3, 2)), precision=np.eye(2),
                                 provenance="final", fallback_classes=frozenset())
        q = vision_scores(clf, es, np.arange(4))
        npt.assert_allclose(q, 1.0 / 3.0, atol=1e-12)

    def test_binary_softmax_is_logistic(self):
        es, bank = worked_case()
        clf = fit_preliminary(es, bank)
        q = vision_scores(clf, es, np.arange(4))
        logits = clf.patch_logits(es.patches.astype(np.float64))
        gap = logits[:, 0] - logits[:, 1]
        npt.assert_allclose(q[:, 0], 1.0 / (1.0 + np.exp(-gap)), atol=1e-12)

    def test_worked_case_patch_probability(self):
        es, bank = worked_case()
        clf = fit_preliminary(es, bank)
        q = vision_scores(clf, es, np.array([0]))
        npt.assert_allclose(q[0], [0.98201379, 0.01798621], atol=1e-8)

    def test_out_of_range_index(self):
        es, bank = worked_case()
        clf = fit_preliminary(es, bank)
        with pytest.raises(FitError, match="out of range"):
            vision_scores(clf, es, np.array([99]))


class TestPurifyBanks:
    def test_identical_scores_all_retained(self):
        bank = MemoryBank(members=(np.array([0, 1, 2]),), stage="bootstrap", capacity=3)
        q = np.full((3, 1), 0.3)
        out = purify_banks(bank, q)
        npt.assert_array_equal(out.members[0], [0, 1, 2])
        assert out.stage == "purified"

    def test_one_strong_member_survives(self):
        # {0.1, 0.1, 0.9}: mean ~ 0.3667, population std ~ 0.3771, threshold ~ 0.7438
        bank = MemoryBank(members=(np.array([0, 1, 2]),), stage="bootstrap", capacity=3)
        q = np.array([[0.1], [0.1], [0.9]])
        out = purify_banks(bank, q)
        npt.assert_array_equal(out.members[0], [2])

    def test_singleton_always_retained(self):
        bank = MemoryBank(members=(np.array([5]),), stage="bootstrap", capacity=1)
        q = np.full((6, 1), 0.2)
        out = purify_banks(bank, q)
        npt.assert_array_equal(out.members[0], [5])

    def test_emptying_threshold_keeps_best_member(self):
        # left-skewed scores: threshold above max would empty the bank
        vals = np.array([0.1, 0.2, 0.9, 0.91, 0.92])
        thr = vals.mean() + vals.std()
        assert thr > vals.max()  # construction check
        bank = MemoryBank(members=(np.arange(5),), stage="bootstrap", capacity=5)
        out = purify_banks(bank, vals[:, None])
        npt.assert_array_equal(out.members[0], [4])

    def test_subset_of_bootstrap(self):
        rng = np.random.default_rng(3)
        members = np.sort(rng.choice(100, size=30, replace=False))
        bank = MemoryBank(members=(members,), stage="bootstrap", capacity=30)
        q = rng.random((100, 1))
        out = purify_banks(bank, q)
        assert set(out.members[0]) <= set(members)

    def test_requires_bootstrap_stage(self):
        bank = MemoryBank(members=(np.array([0]),), stage="purified", capacity=1)
        with pytest.raises(FitError, match="bootstrap"):
            purify_banks(bank, np.ones((1, 1)))


class TestFitFinal:
    def test_uniform_confidence_reduces_to_preliminary(self):
        es, bank = worked_case()
        pre = fit_preliminary(es, bank)
        purified = MemoryBank(members=bank.members, stage="purified", capacity=4)
        tp = store.make_text_prototypes(np.eye(2), ["a", "b"])
        fin = fit_final(es, purified, np.full((4, 2), 0.5), tp)
        npt.assert_allclose(fin.weights, pre.weights, atol=1e-12)
        npt.assert_allclose(fin.biases, pre.biases, atol=1e-12)
        npt.assert_allclose(fin.precision, pre.precision, atol=1e-12)
        assert fin.provenance == "final"

    def test_confidence_weights_shift_the_mean(self):
        patches = np.array([[0.0, 1.0], [2.0, 1.0]])
        es = store.make_embedding_set([2], patches, np.array([[1.0, 0.0]]), normalize=False)
        bank = MemoryBank(members=(np.array([0, 1]),), stage="purified", capacity=2)
        tp = store.make_text_prototypes(np.eye(2)[:1], ["a"])
        q = np.array([[0.25], [0.75]])
        clf = fit_final(es, bank, q, tp)
        npt.assert_allclose(clf.prototypes[0], [1.5, 1.0], atol=1e-12)

    def test_insufficient_samples(self):
        es, _ = worked_case()
        bank = MemoryBank(members=(np.array([0]), np.empty(0, dtype=np.int64)),
                          stage="purified", capacity=1)
        tp = store.make_text_prototypes(np.eye(2), ["a", "b"])
        with pytest.raises(FitError, match="insufficient purified samples"):
            fit_final(es, bank, np.ones((4, 2)), tp)

    def test_non_finite_features_rejected(self):
        patches = np.array([[1.0, 0.0], [np.inf, 1.0]])
        es = store.make_embedding_set([2], patches, np.array([[1.0, 0.0]]), normalize=False)
        bank = MemoryBank(members=(np.array([0, 1]),), stage="purified", capacity=2)
        tp = store.make_text_prototypes(np.eye(2)[:1], ["a"])
        with pytest.raises(FitError, match="non-finite"):
            fit_final(es, bank, np.ones((2, 1)), tp)

    def test_requires_purified_stage(self):
        es, bank = worked_case()
        tp = store.make_text_prototypes(np.eye(2), ["a", "b"])
        with pytest.raises(FitError, match="purified"):
            fit_final(es, bank, np.ones((4, 2)), tp)


class TestShrinkagePrecision:
    def test_spd_for_any_psd_input(self):
        rng = np.random.default_rng(4)
        for _ in range(25):
            d = int(rng.integers(2, 10))
            a = rng.normal(size=(d, d))
            sigma = a @ a.T / d
            est = CovarianceEstimate(sigma_hat=sigma, n=int(rng.integers(2, 50)),
                                     trace=float(np.trace(sigma)))
            p = shrinkage_precision(est)
            npt.assert_allclose(p, p.T, atol=0)
            assert np.linalg.eigvalsh(p).min() > 0

    def test_rank_deficient_input_still_spd(self):
        v = np.array([[1.0, 2.0, 3.0]])
        sigma = v.T @ v   # rank 1
        est = CovarianceEstimate(sigma_hat=sigma, n=10, trace=float(np.trace(sigma)))
        p = shrinkage_precision(est)
        assert np.linalg.eigvalsh(p).min() > 0

    def test_self_consistent_uses_unbiased_scatter(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 4))
        dev = x - x.mean(axis=0)
        scatter = dev.T @ dev
        n = 30
        est = CovarianceEstimate(sigma_hat=scatter / n, n=n, trace=float(np.trace(scatter / n)))
        p = shrinkage_precision(est, self_consistent=True)
        expected = 4 * np.linalg.inv(scatter + (np.trace(scatter) / (n - 1)) * np.eye(4))
        npt.assert_allclose(p, expected, rtol=1e-10)


class TestRunPvcl:
    def _toy(self, rng, n_img=40, m=16, num_classes=3, dim=8):
        from piaa import synth
        spec = synth.make_spec(num_classes=num_classes, dim=dim, images=n_img,
                               patches_per_image=m, cov_scale=0.05,
                               rotation_deg=20.0, offset=0.1, seed=int(rng.integers(1e6)))
        data = synth.generate(spec)
        return data.embeddings, data.prototypes

    def test_deterministic_across_runs_and_threads(self):
        rng = np.random.default_rng(6)
        es, tp = self._toy(rng)
        a, _ = run_pvcl(es, tp, k=32, threads=1)
        b, _ = run_pvcl(es, tp, k=32, threads=4, chunk=128)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.biases, b.biases)
        assert np.array_equal(a.precision, b.precision)

    def test_subset_chain_and_report(self):
        rng = np.random.default_rng(7)
        es, tp = self._toy(rng)
        clf, report = run_pvcl(es, tp, k=32)
        probs = text_align_probs(es.patches, tp)
        h = predictive_entropy(probs)
        bank0 = bootstrap_banks(probs, h, 32)
        argmax = probs.argmax(axis=1)
        for c in range(tp.num_classes):
            assert report.purified_sizes[c] <= report.bootstrap_sizes[c]
            assert np.all(argmax[bank0.members[c]] == c)
        assert clf.provenance == "final"
        assert report.seconds >= 0

    def test_matches_manual_stage_composition(self):
        rng = np.random.default_rng(8)
        es, tp = self._toy(rng)
        clf, _ = run_pvcl(es, tp, k=32)
        probs = text_align_probs(es.patches, tp)
        h = predictive_entropy(probs)
        bank0 = bootstrap_banks(probs, h, 32)
        pre = fit_preliminary(es, bank0, tp)
        q = vision_scores(pre, es, np.arange(es.num_patches))
        bank = purify_banks(bank0, q)
        manual = fit_final(es, bank, q, tp)
        npt.assert_allclose(clf.weights, manual.weights, atol=1e-12)
        npt.assert_allclose(clf.biases, manual.biases, atol=1e-12)

    def test_weights_match_precision_times_prototypes(self):
        rng = np.random.default_rng(9)
        es, tp = self._toy(rng)
        clf, _ = run_pvcl(es, tp, k=32)
        npt.assert_allclose(clf.weights, clf.prototypes @ clf.precision.T,
                            rtol=1e-8, atol=1e-12)
        npt.assert_allclose(clf.biases,
                            -0.5 * np.einsum("cd,cd->c", clf.prototypes,
                                             clf.prototypes @ clf.precision.T),
                            rtol=1e-8, atol=1e-12)
        assert np.abs(clf.precision - clf.precision.T).max() <= 1e-9
        assert np.linalg.eigvalsh(clf.precision).min() > 0

    def test_score_differences_are_affine(self):
        # linear discriminant: class-score gaps along a line have vanishing
        # second differences
        rng = np.random.default_rng(10)
        es, tp = self._toy(rng)
        clf, _ = run_pvcl(es, tp, k=32)
        a, v = rng.normal(size=8), rng.normal(size=8)
        t = np.linspace(-2, 2, 9)[:, None]
        line = a + t * v
        logits = clf.patch_logits(line)
        diff = logits[:, 0] - logits[:, 1]
        second = np.diff(diff, n=2)
        npt.assert_allclose(second, 0.0, atol=1e-9 * max(1.0, np.abs(diff).max()))


class TestClassifierFile:
    def test_round_trip_with_metadata(self, tmp_path):
        es, bank = worked_case()
        clf = fit_preliminary(es, bank)
        path = tmp_path / "c.piac"
        pvcl.write_classifier_file(clf, path, metadata={"k": 4})
        back, md = pvcl.read_classifier_file(path)
        npt.assert_array_equal(back.weights, clf.weights)
        npt.assert_array_equal(back.biases, clf.biases)
        npt.assert_array_equal(back.prototypes, clf.prototypes)
        npt.assert_array_equal(back.precision, clf.precision)
        assert back.provenance == "preliminary"
        assert back.fallback_classes == clf.fallback_classes
        assert md["k"] == 4

    def test_writes_are_byte_deterministic(self, tmp_path):
        es, bank = worked_case()
        clf = fit_preliminary(es, bank)
        p1, p2 = tmp_path / "a.piac", tmp_path / "b.piac"
        pvcl.write_classifier_file(clf, p1, metadata={"x": 1})
        pvcl.write_classifier_file(clf, p2, metadata={"x": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_fallback_bitmap_round_trips(self, tmp_path):
        es, _ = worked_case()
        bank = MemoryBank(members=(np.array([0, 1]), np.empty(0, dtype=np.int64)),
                          stage="bootstrap", capacity=4)
        tp = store.make_text_prototypes(np.eye(2), ["a", "b"])
        clf = fit_preliminary(es, bank, tp)
        path = tmp_path / "fb.piac"
        pvcl.write_classifier_file(clf, path)
        back, _ = pvcl.read_classifier_file(path)
        assert back.fallback_classes == {1}
