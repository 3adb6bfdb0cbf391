import math

import numpy as np
import pytest

from larvae import data, metrics


@pytest.fixture(scope="module")
def dsprites():
    return data.generate_dsprites_mini()


def brute_force_mi(codes_a, codes_b):
    """Independent oracle: plain-python contingency count and sum."""
    pairs = {}
    for a, b in zip(codes_a.tolist(), codes_b.tolist()):
        pairs[(a, b)] = pairs.get((a, b), 0) + 1
    n = len(codes_a)
    pa, pb = {}, {}
    for (a, b), c in pairs.items():
        pa[a] = pa.get(a, 0) + c
        pb[b] = pb.get(b, 0) + c
    total = 0.0
    for (a, b), c in pairs.items():
        p = c / n
        total += p * math.log(p / ((pa[a] / n) * (pb[b] / n)))
    return total


class TestMiMatrix:
    def test_deterministic_bijection_reaches_entropy(self, dsprites):
        # latent j == factor k's index exactly -> MI == H(factor)
        lat = dsprites.factor_index.astype(np.float64)
        mi = metrics.mi_matrix(lat, dsprites.factor_index, bins=20)
        ent = metrics.factor_entropies(dsprites.factor_index)
        for k in range(4):
            assert mi[k, k] == pytest.approx(ent[k], abs=1e-12)

    def test_hand_built_contingency_matches_brute_force(self):
        # 2 latents x 2 factors over a fixed 4x4 joint
        rng = np.random.default_rng(0)
        codes = rng.integers(0, 4, size=(200, 2))
        lat = codes.astype(np.float64) + rng.uniform(0, 0.2, (200, 2))
        mi = metrics.mi_matrix(lat, codes, bins=4)
        for j in range(2):
            lat_codes = ((lat[:, j] - lat[:, j].min())
                         / (lat[:, j].max() - lat[:, j].min()) * 4).astype(int).clip(0, 3)
            for k in range(2):
                assert mi[j, k] == pytest.approx(
                    brute_force_mi(lat_codes, codes[:, k]), abs=1e-12)

    def test_noise_latents_have_small_mi(self, dsprites):
        ent = metrics.factor_entropies(dsprites.factor_index)
        lat = np.random.default_rng(5).standard_normal((768, 4))
        mi = metrics.mi_matrix(lat, dsprites.factor_index, bins=20)
        assert (mi < 0.05 * ent[None, :]).all()

    def test_constant_latent_gives_zero(self, dsprites):
        lat = np.column_stack([np.full(768, 3.3),
                               dsprites.factor_index[:, 0].astype(float)])
        mi = metrics.mi_matrix(lat, dsprites.factor_index, bins=20)
        assert (mi[0] == 0.0).all()
        assert mi[1, 0] > 0.5

    def test_bounded_by_factor_entropy(self, dsprites):
        rng = np.random.default_rng(1)
        lat = dsprites.labels + 0.05 * rng.standard_normal((768, 4))
        mi = metrics.mi_matrix(lat, dsprites.factor_index, bins=20)
        ent = metrics.factor_entropies(dsprites.factor_index)
        assert (mi <= ent[None, :] + 1e-9).all()

    def test_symmetric_under_value_relabeling(self, dsprites):
        lat = np.random.default_rng(2).standard_normal((768, 3))
        idx = dsprites.factor_index.copy()
        perm = np.array([2, 0, 1])  # relabel the 3 shape values
        relabeled = idx.copy()
        relabeled[:, 0] = perm[idx[:, 0]]
        a = metrics.mi_matrix(lat, idx, bins=20)
        b = metrics.mi_matrix(lat, relabeled, bins=20)
        assert np.allclose(a, b, atol=1e-12)

    def test_affine_rescaling_invariance(self):
        rng = np.random.default_rng(3)
        lat = rng.uniform(size=(500, 2))
        idx = rng.integers(0, 3, size=(500, 2))
        a = metrics.mi_matrix(lat, idx, bins=20)
        b = metrics.mi_matrix(3.7 * lat + 11.0, idx, bins=20)
        assert np.array_equal(a, b)


class TestMig:
    def test_perfect_code_is_one(self, dsprites):
        lat = dsprites.factor_index.astype(np.float64)
        mi = metrics.mi_matrix(lat, dsprites.factor_index, bins=20)
        ent = metrics.factor_entropies(dsprites.factor_index)
        assert metrics.mig(mi, ent) == pytest.approx(1.0, abs=1e-9)

    def test_noise_code_near_zero(self, dsprites):
        lat = np.random.default_rng(7).standard_normal((768, 6))
        mi = metrics.mi_matrix(lat, dsprites.factor_index, bins=20)
        ent = metrics.factor_entropies(dsprites.factor_index)
        assert metrics.mig(mi, ent) < 0.05

    def test_duplicated_top_latent_zeroes_gap(self, dsprites):
        lat = np.column_stack([dsprites.factor_index[:, 0],
                               dsprites.factor_index[:, 0]]).astype(np.float64)
        mi = metrics.mi_matrix(lat, dsprites.factor_index[:, :1], bins=20)
        ent = metrics.factor_entropies(dsprites.factor_index[:, :1])
        assert metrics.mig(mi, ent) == pytest.approx(0.0, abs=1e-12)

    def test_pure_function_of_matrix(self):
        mi = np.array([[0.5, 0.1], [0.2, 0.6]])
        ent = np.array([1.0, 1.5])
        expect = np.mean([(0.5 - 0.2) / 1.0, (0.6 - 0.1) / 1.5])
        assert metrics.mig(mi, ent) == pytest.approx(expect, rel=1e-12)
        assert metrics.mig(mi, ent) == metrics.mig(mi, ent)

    def test_zero_entropy_rejected(self):
        with pytest.raises(ValueError):
            metrics.mig(np.ones((2, 1)), np.array([0.0]))


class TestL2Score:
    def test_zero_at_match(self):
        y = np.random.default_rng(0).uniform(-1, 1, (10, 4))
        assert metrics.l2_score(y, y) == 0.0

    def test_single_item_residual(self):
        assert metrics.l2_score(np.array([[1.0, 1.0]]),
                                np.array([[0.0, 0.0]])) == pytest.approx(math.sqrt(2))

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        mu = rng.normal(size=(50, 3))
        y = rng.normal(size=(50, 3))
        perm = rng.permutation(50)
        assert metrics.l2_score(mu, y) == pytest.approx(
            metrics.l2_score(mu[perm], y[perm]), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.l2_score(np.zeros((2, 3)), np.zeros((3, 2)))


class TestFactorVaeScore:
    def test_oracle_encoder_scores_one(self, dsprites):
        lat = dsprites.factor_index.astype(np.float64)
        score = metrics.factorvae_score(lat, dsprites, votes=200,
                                        rng=np.random.default_rng(0))
        assert score == 1.0

    def test_noise_encoder_near_chance(self, dsprites):
        lat = np.random.default_rng(3).standard_normal((768, 4))
        score = metrics.factorvae_score(lat, dsprites, votes=500,
                                        rng=np.random.default_rng(1))
        assert abs(score - 1.0 / 4.0) <= 0.1

    def test_bit_exact_reproducibility(self, dsprites):
        lat = np.random.default_rng(4).standard_normal((768, 6))
        a = metrics.factorvae_score(lat, dsprites, votes=100, rng=np.random.default_rng(9))
        b = metrics.factorvae_score(lat, dsprites, votes=100, rng=np.random.default_rng(9))
        assert a == b

    def test_collapsed_dimensions_excluded(self, dsprites):
        lat = np.column_stack([np.full(768, 2.0),
                               dsprites.factor_index.astype(np.float64)])
        score = metrics.factorvae_score(lat, dsprites, votes=200,
                                        rng=np.random.default_rng(2))
        assert score == 1.0

    def test_all_collapsed_rejected(self, dsprites):
        with pytest.raises(ValueError, match="collapsed"):
            metrics.factorvae_score(np.ones((768, 3)), dsprites, votes=10,
                                    rng=np.random.default_rng(0))


class TestReportOutput:
    def test_report_csv_rows(self, tmp_path, dsprites):
        report = metrics.MetricsReport(
            mig=0.5, l2=0.25, factorvae_score=0.9,
            mi_matrix=np.ones((6, 4)), entropies=np.ones(4))
        metrics.write_report(report, tmp_path)
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert lines[0] == "metric,value"
        assert len(lines) == 4  # header + 3 scalar metrics
        side = (tmp_path / "mi_matrix.csv").read_text().strip().splitlines()
        assert len(side) == 6
        assert len(side[0].split(",")) == 4
