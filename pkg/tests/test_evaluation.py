import math
from collections import Counter

import numpy as np
import pytest
import torch

from partdiscover.core import EmptyForegroundError, PartMask, ProbabilityMap
from partdiscover.evaluation import (
    LandmarkSet,
    ari,
    evaluate_dataset,
    fg_metrics,
    fit_regressor,
    nme,
    nmi,
    part_centroids,
)


# ---------------------------------------------------------------------------
# Independent oracles: contingency-table NMI/ARI from first principles.
# ---------------------------------------------------------------------------
def oracle_nmi(a, b) -> float:
    n = len(a)
    na, nb, nij = Counter(a), Counter(b), Counter(zip(a, b))
    mi = sum(c / n * math.log(n * c / (na[i] * nb[j])) for (i, j), c in nij.items())
    ha = -sum(c / n * math.log(c / n) for c in na.values())
    hb = -sum(c / n * math.log(c / n) for c in nb.values())
    denom = (ha + hb) / 2
    return mi / denom if denom > 0 else 0.0


def oracle_ari(a, b) -> float:
    comb2 = lambda x: x * (x - 1) / 2.0
    n = len(a)
    na, nb, nij = Counter(a), Counter(b), Counter(zip(a, b))
    index = sum(comb2(c) for c in nij.values())
    sum_a = sum(comb2(c) for c in na.values())
    sum_b = sum(comb2(c) for c in nb.values())
    expected = sum_a * sum_b / comb2(n)
    maximum = (sum_a + sum_b) / 2.0
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)


FIXED_CASES = [
    ([0, 0, 1, 1], [0, 1, 1, 1]),
    ([0, 1, 2, 0, 1, 2], [0, 1, 2, 0, 1, 2]),
    ([0, 0, 0, 1, 1, 1], [1, 1, 0, 0, 2, 2]),
    ([0, 1, 0, 1], [1, 0, 1, 0]),
    ([0, 0, 1, 1, 2, 2], [0, 0, 0, 1, 1, 1]),
]


class TestClusteringMetrics:
    @pytest.mark.parametrize("a,b", FIXED_CASES)
    def test_matches_contingency_oracle(self, a, b):
        assert nmi(a, b) == pytest.approx(oracle_nmi(a, b), abs=1e-9)
        assert ari(a, b) == pytest.approx(oracle_ari(a, b), abs=1e-9)

    def test_identical_labelings_score_one(self):
        labels = [0, 1, 2, 0, 1, 2, 2]
        assert nmi(labels, labels) == pytest.approx(1.0)
        assert ari(labels, labels) == pytest.approx(1.0)

    def test_constant_labeling_scores_zero(self):
        assert nmi([0] * 6, [0, 1, 2, 0, 1, 2]) == 0.0
        assert ari([0] * 6, [0, 1, 2, 0, 1, 2]) == 0.0

    def test_symmetry_and_permutation_invariance(self, rng):
        for _ in range(10):
            a = torch.randint(0, 4, (200,), generator=rng).tolist()
            b = torch.randint(0, 3, (200,), generator=rng).tolist()
            assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)
            assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)
            relabeled = [(x + 2) % 4 for x in a]
            assert nmi(relabeled, b) == pytest.approx(nmi(a, b), abs=1e-12)
            assert ari(relabeled, b) == pytest.approx(ari(a, b), abs=1e-12)

    def test_random_labelings_concentrate_near_zero(self):
        values = []
        for seed in range(100):
            gen = torch.Generator().manual_seed(seed)
            a = torch.randint(0, 5, (10_000,), generator=gen).numpy()
            b = torch.randint(0, 5, (10_000,), generator=gen).numpy()
            values.append(ari(a, b))
        assert abs(float(np.mean(values))) < 0.02

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            nmi([0, 1], [0, 1, 2])
        with pytest.raises(ValueError):
            ari([0, 1], [0, 1, 2])


class TestPartCentroids:
    def test_point_mass(self):
        v = torch.zeros(8, 8, 2, dtype=torch.float64)
        v[..., -1] = 1.0
        v[3, 5, 0], v[3, 5, 1] = 1.0, 0.0
        centers, masses = part_centroids(v)
        assert torch.allclose(centers[0], torch.tensor([3.0, 5.0], dtype=torch.float64), atol=1e-5)
        assert masses[0] == pytest.approx(1.0, abs=1e-5)

    def test_uniform_block(self):
        v = torch.zeros(4, 4, 2, dtype=torch.float64)
        v[..., -1] = 1.0
        v[1:3, 1:3, 0], v[1:3, 1:3, 1] = 1.0, 0.0
        centers, _ = part_centroids(v)
        assert torch.allclose(centers[0], torch.tensor([1.5, 1.5], dtype=torch.float64), atol=1e-6)

    def test_matches_brute_force(self, rng):
        v = torch.softmax(torch.randn(4, 4, 3, dtype=torch.float64, generator=rng), dim=-1)
        centers, masses = part_centroids(v, epsilon=1e-6)
        for k in range(2):
            z = float(v[..., k].sum()) + 1e-6
            ci = sum(i * float(v[i, j, k]) for i in range(4) for j in range(4)) / z
            cj = sum(j * float(v[i, j, k]) for i in range(4) for j in range(4)) / z
            assert centers[k, 0] == pytest.approx(ci, abs=1e-12)
            assert centers[k, 1] == pytest.approx(cj, abs=1e-12)

    def test_accepts_hard_mask(self):
        labels = torch.zeros(6, 6, dtype=torch.long)
        labels[0:2, 0:2] = 1
        labels[4:6, 4:6] = 2
        centers, masses = part_centroids(PartMask(labels=labels))
        assert torch.allclose(centers[0], torch.tensor([0.5, 0.5], dtype=torch.float64), atol=1e-5)
        assert torch.allclose(centers[1], torch.tensor([4.5, 4.5], dtype=torch.float64), atol=1e-5)
        assert masses[0] == pytest.approx(4.0, abs=1e-5)


class TestRegressor:
    def test_identity_when_landmarks_equal_centroids(self, rng):
        x = torch.randn(20, 6, generator=rng).double().numpy()
        reg = fit_regressor(x, x)
        assert reg.residual < 1e-16
        assert np.allclose(reg.predict(x), x, atol=1e-8)

    def test_recovers_exact_linear_map(self, rng):
        x = torch.randn(30, 4, generator=rng).double().numpy()
        a = torch.randn(4, 6, generator=rng).double().numpy()
        b = torch.randn(6, generator=rng).double().numpy()
        y = x @ a + b
        reg = fit_regressor(x, y)
        assert np.allclose(reg.weight, a, atol=1e-8)
        assert np.allclose(reg.bias, b, atol=1e-8)

    def test_noise_residual_near_target_variance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2000, 4))
        y = rng.normal(size=(2000, 2))
        reg = fit_regressor(x, y)
        assert reg.residual == pytest.approx(1.0, rel=0.1)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError, match="samples"):
            fit_regressor(np.zeros((4, 6)), np.zeros((4, 2)))

    def test_rank_deficiency_triggers_ridge(self):
        x = np.zeros((10, 3))
        x[:, 0] = np.arange(10)
        x[:, 1] = 2 * np.arange(10)  # collinear
        y = np.stack([np.arange(10), np.ones(10)], axis=1).astype(float)
        reg = fit_regressor(x, y)
        assert reg.used_ridge
        assert np.isfinite(reg.predict(x)).all()

    def test_exact_linearity_under_input_scaling(self, rng):
        x = torch.randn(25, 4, generator=rng).double().numpy()
        a = torch.randn(4, 2, generator=rng).double().numpy()
        y = x @ a
        reg1 = fit_regressor(x, y)
        reg2 = fit_regressor(2 * x, y)
        assert np.allclose(reg2.weight, reg1.weight / 2, atol=1e-8)


class TestNme:
    def test_zero_for_exact_prediction(self):
        pts = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
        gt = LandmarkSet(points=pts, norm_kind="bbox_diag", norm_value=10.0)
        assert nme(pts.numpy(), gt) == 0.0

    def test_single_landmark_offset_by_norm(self):
        pts = torch.tensor([[0.0, 0.0], [5.0, 5.0]])
        pred = pts.clone().numpy()
        pred[0] += np.array([10.0, 0.0])
        gt = LandmarkSet(points=pts, norm_kind="bbox_diag", norm_value=10.0)
        assert nme(pred, gt) == pytest.approx(100.0 / 2)

    def test_three_four_offset_case(self):
        pts = torch.tensor([[0.0, 0.0], [7.0, 7.0]])
        pred = pts.clone().numpy()
        pred[0] += np.array([3.0, 4.0])
        gt = LandmarkSet(points=pts, norm_kind="inter_ocular", norm_value=10.0)
        assert nme(pred, gt) == pytest.approx(25.0)

    def test_rigid_transform_covariance(self, rng):
        pts = torch.rand(5, 2, generator=rng).double() * 50
        pred = (pts + torch.randn(5, 2, generator=rng).double()).numpy()
        gt = LandmarkSet(points=pts, norm_kind="bbox_diag", norm_value=12.0)
        base = nme(pred, gt)
        theta = 0.35
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        shift = np.array([3.0, -7.0])
        pred_t = pred @ rot.T + shift
        gt_t = LandmarkSet(
            points=torch.from_numpy(pts.numpy() @ rot.T + shift), norm_kind="bbox_diag", norm_value=12.0
        )
        assert nme(pred_t, gt_t) == pytest.approx(base, abs=1e-9)

    def test_invalid_norm_rejected(self):
        with pytest.raises(ValueError):
            LandmarkSet(points=torch.zeros(3, 2), norm_kind="bbox_diag", norm_value=0.0)


class TestFgMetrics:
    def test_perfect_on_foreground(self):
        gt = np.array([[0, 0, 1, 1], [0, 0, 2, 2], [0, 0, 1, 2], [0, 0, 0, 0]])
        pred = np.where(gt > 0, gt, 7)  # garbage on background
        fn, fa = fg_metrics(pred, gt)
        assert fn == pytest.approx(1.0)
        assert fa == pytest.approx(1.0)

    def test_constant_prediction_scores_zero(self):
        gt = np.array([[0, 1, 2], [0, 1, 2]])
        pred = np.ones_like(gt)
        fn, fa = fg_metrics(pred, gt)
        assert fn == 0.0

    def test_matches_restriction_oracle(self):
        gt = np.array([[0, 1, 1, 0], [2, 2, 0, 0], [0, 1, 2, 2], [1, 0, 0, 2]])
        pred = np.array([[3, 1, 2, 0], [2, 1, 0, 1], [2, 1, 1, 2], [2, 0, 3, 2]])
        fg = gt != 0
        fn, fa = fg_metrics(pred, gt)
        assert fn == pytest.approx(nmi(pred[fg], gt[fg]), abs=1e-12)
        assert fa == pytest.approx(ari(pred[fg], gt[fg]), abs=1e-12)

    def test_empty_foreground_rejected(self):
        with pytest.raises(EmptyForegroundError):
            fg_metrics(np.zeros((3, 3), dtype=int), np.zeros((3, 3), dtype=int))


@pytest.fixture(scope="module")
def dataset():
    from partdiscover.data import SyntheticDataset
    from partdiscover.synth import SyntheticSpec

    return SyntheticDataset(SyntheticSpec(k_parts=3, canvas=(32, 32), count=40, seed=5))


class TestEvaluateDataset:

    def test_oracle_predictor_scores_ari_one(self, dataset):
        def oracle(chw, class_id):
            i = self._lookup(dataset, chw)
            return PartMask(labels=dataset.mask(i))

        report = evaluate_dataset(oracle, dataset, protocol="masks")
        assert report["ari"] == pytest.approx(1.0)
        assert report["fg_ari"] == pytest.approx(1.0)
        assert report["protocol"] == "masks"

    def test_random_predictor_scores_near_zero(self, dataset):
        gen = torch.Generator().manual_seed(0)

        def noisy(chw, class_id):
            return PartMask(labels=torch.randint(0, 4, (32, 32), generator=gen))

        report = evaluate_dataset(noisy, dataset, protocol="masks")
        assert abs(report["ari"]) < 0.05

    def test_report_contains_every_key(self, dataset):
        def oracle(chw, class_id):
            i = self._lookup(dataset, chw)
            return PartMask(labels=dataset.mask(i))

        report = evaluate_dataset(oracle, dataset, protocol="masks", config_hash="abc123")
        for key in ("nme_pct", "nmi", "ari", "fg_nmi", "fg_ari", "n_images", "protocol", "config_hash"):
            assert key in report
        assert report["config_hash"] == "abc123"
        assert report["n_images"] == len(dataset.ids("test"))

    def test_landmark_protocol_with_oracle_centroids(self, dataset):
        def oracle(chw, class_id):
            i = self._lookup(dataset, chw)
            return PartMask(labels=dataset.mask(i))

        report = evaluate_dataset(oracle, dataset, protocol="landmarks", norm_kind="canvas_diag")
        assert report["nme_pct"] < 2.0  # centroids regress almost exactly onto centroid landmarks
        assert report["nmi"] > 0.99

    def test_protocol_mismatch_rejected(self, dataset):
        from partdiscover.core import ConfigError

        class NoLandmarks:
            has_landmarks = False
            has_masks = True

            def ids(self, split):
                return [0]

        with pytest.raises(ConfigError):
            evaluate_dataset(lambda c, k: None, NoLandmarks(), protocol="landmarks")

    @staticmethod
    def _lookup(dataset, chw):
        for i in range(dataset.spec.count):
            if torch.equal(dataset.image(i), chw):
                return i
        raise AssertionError("image not found")
