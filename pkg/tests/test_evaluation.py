import numpy as np
import pytest
from scipy.linalg import sqrtm

from latent_bridge.base_models import IdentityBase, LatentBank
from latent_bridge.bridge import BridgeConfig, BridgingVae
from latent_bridge.datasets import LabeledVectorDataset, SyntheticConfig, gen_synthetic_domains
from latent_bridge.errors import DegenerateCovariance, EmptyDataset, MissingMapping, ZeroVector
from latent_bridge.evaluation import (
    TransferSetup,
    ablation_sweep,
    data_efficiency_sweep,
    frechet_distance,
    interpolation_sweep,
    read_pgm,
    reconstruction_accuracy,
    slerp,
    slerp_path,
    spike_ratio,
    transfer,
    transfer_accuracy,
    transfer_latent,
    write_pgm,
)


class IdentityBridge:
    """Shared space equals the base latent space in both domains."""

    def encode(self, z, domain, rng=None):
        z = np.asarray(z, dtype=np.float64)
        return z, z, np.ones_like(z)

    def decode(self, zp, domain):
        return np.asarray(zp, dtype=np.float64)


class SignClassifier:
    """Class 1 when the first coordinate is positive."""

    num_classes = 2

    def predict(self, x):
        return (np.asarray(x)[:, 0] > 0).astype(int)


def two_class_data(n=200, seed=0, domain=1):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 2)) * 0.2 + np.where(labels[:, None] == 1, 1.0, -1.0) * np.array([1.0, 0.0])
    return LabeledVectorDataset(x, labels, domain)


def oracle_frechet(mu1, s1, mu2, s2):
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * np.real(sqrtm(s1 @ s2))))


class TestFrechet:
    def test_identical(self):
        a = np.random.default_rng(0).normal(size=(500, 4))
        assert abs(frechet_distance(a, a)) < 1e-8

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(300, 3)), rng.normal(size=(400, 3)) * 2 + 1
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-8)

    def test_matches_sqrtm_oracle_on_sample_moments(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.normal(size=(200, 3)) @ rng.normal(size=(3, 3))
            b = rng.normal(size=(150, 3)) @ rng.normal(size=(3, 3)) + rng.normal(size=3)
            expected = oracle_frechet(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))
            assert frechet_distance(a, b) == pytest.approx(expected, rel=1e-7, abs=1e-9)

    def test_known_gaussians(self):
        rng = np.random.default_rng(3)
        L1, L2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        m1, m2 = np.zeros(3), np.array([1.0, -0.5, 2.0])
        truth = oracle_frechet(m1, L1 @ L1.T, m2, L2 @ L2.T)
        n = 100_000
        a = rng.normal(size=(n, 3)) @ L1.T + m1
        b = rng.normal(size=(n, 3)) @ L2.T + m2
        assert frechet_distance(a, b) == pytest.approx(truth, rel=0.03)

    def test_one_dim_unit_gap(self):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=100_000), rng.normal(size=100_000) + 1.0
        assert abs(frechet_distance(a, b) - 1.0) < 0.05

    def test_degenerate_warns(self):
        rng = np.random.default_rng(5)
        with pytest.warns(DegenerateCovariance):
            d = frechet_distance(rng.normal(size=(3, 5)), rng.normal(size=(4, 5)))
        assert np.isfinite(d)

    def test_errors(self):
        with pytest.raises(EmptyDataset):
            frechet_distance(np.ones((1, 2)), np.ones((3, 2)))


class TestSlerp:
    def test_endpoints_exact(self):
        rng = np.random.default_rng(0)
        p0, p1 = rng.normal(size=5), rng.normal(size=5)
        assert np.array_equal(slerp(p0, p1, 0.0), p0)
        assert np.array_equal(slerp(p0, p1, 1.0), p1)

    def test_constant_norm(self):
        rng = np.random.default_rng(1)
        p0 = rng.normal(size=6)
        p1 = rng.normal(size=6)
        p1 *= np.linalg.norm(p0) / np.linalg.norm(p1)
        norms = [np.linalg.norm(slerp(p0, p1, t)) for t in np.linspace(0, 1, 101)]
        assert np.max(np.abs(np.array(norms) - np.linalg.norm(p0))) < 1e-9

    def test_parallel_falls_back_to_linear(self):
        p0 = np.array([1.0, 0.0])
        assert np.allclose(slerp(p0, 2 * p0, 0.5), [1.5, 0.0])

    def test_orthogonal_midpoint(self):
        out = slerp(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.5)
        assert np.allclose(out, [np.sqrt(0.5), np.sqrt(0.5)])

    def test_errors(self):
        with pytest.raises(ZeroVector):
            slerp(np.zeros(2), np.ones(2), 0.5)
        with pytest.raises(ValueError):
            slerp(np.ones(2), np.ones(2), 1.5)

    def test_path_passes_through_fixed_points(self):
        pts = np.random.default_rng(2).normal(size=(3, 4))
        path = slerp_path(pts, 9)
        assert path.shape == (9, 4)
        assert np.array_equal(path[0], pts[0]) and np.array_equal(path[4], pts[1])
        assert np.array_equal(path[-1], pts[2])


class TestAccuracy:
    def test_identity_models_reconstruct_perfectly(self):
        ds = two_class_data()
        assert reconstruction_accuracy(IdentityBase(2), IdentityBridge(), ds, SignClassifier()) == 1.0

    def test_oracle_transfer(self):
        ds = two_class_data()
        assert transfer_accuracy(IdentityBase(2), IdentityBridge(), IdentityBase(2), ds, SignClassifier()) == 1.0

    def test_shuffled_mapping_is_chance(self):
        ds = two_class_data(2000)
        acc = transfer_accuracy(IdentityBase(2), IdentityBridge(), IdentityBase(2), ds, SignClassifier(),
                                {0: 1, 1: 0})
        assert acc == 0.0
        rng = np.random.default_rng(0)
        shuffled = LabeledVectorDataset(ds.vectors, rng.permutation(ds.labels))
        acc = transfer_accuracy(IdentityBase(2), IdentityBridge(), IdentityBase(2), shuffled, SignClassifier())
        assert abs(acc - 0.5) < 0.05

    def test_transfer_equals_reconstruction_same_domain(self):
        ds = two_class_data()
        bridge = BridgingVae(2, 2, 2, (8,), rng=np.random.default_rng(0))
        rec = reconstruction_accuracy(IdentityBase(2), bridge, ds, SignClassifier())
        # labels equal predictions here, so both metrics compare the same quantities
        ds.labels = SignClassifier().predict(ds.vectors)
        acc = transfer_accuracy(IdentityBase(2), bridge, IdentityBase(2), ds, SignClassifier(), target=1)
        assert acc == rec

    def test_untrained_bridge_near_chance(self):
        ds = two_class_data(1000)
        bridge = BridgingVae(2, 2, 2, (8, 8), rng=np.random.default_rng(3))
        acc = reconstruction_accuracy(IdentityBase(2), bridge, ds, SignClassifier())
        assert 0.3 <= acc <= 0.7

    def test_missing_mapping(self):
        with pytest.raises(MissingMapping):
            transfer_accuracy(IdentityBase(2), IdentityBridge(), IdentityBase(2), two_class_data(), SignClassifier(),
                              {0: 0})

    def test_empty(self):
        empty = LabeledVectorDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), num_classes=2)
        with pytest.raises(EmptyDataset):
            reconstruction_accuracy(IdentityBase(2), IdentityBridge(), empty, SignClassifier())

    def test_sampling_path_is_seeded(self):
        ds = two_class_data(20)
        bridge = BridgingVae(2, 2, 2, (8,), rng=np.random.default_rng(0))
        a = transfer(IdentityBase(2), bridge, IdentityBase(2), ds.vectors, rng=5)
        b = transfer(IdentityBase(2), bridge, IdentityBase(2), ds.vectors, rng=5)
        mean = transfer(IdentityBase(2), bridge, IdentityBase(2), ds.vectors)
        assert np.array_equal(a, b) and not np.array_equal(a, mean)


class TestInterpolation:
    def test_rows_and_shared_endpoints(self):
        bridge = BridgingVae(2, 2, 2, (8,), rng=np.random.default_rng(0))
        fixed = np.array([[1.0, 0.5], [-0.3, 1.2], [0.7, -1.0]])
        sweep = interpolation_sweep(IdentityBase(2), bridge, IdentityBase(2), fixed, 7)
        assert len(sweep.rows()) == 3 and all(r.shape == (7, 2) for r in sweep.rows())
        moved = transfer_latent(bridge, fixed[[0, -1]])
        assert np.array_equal(sweep.target[0], moved[0]) and np.array_equal(sweep.target[-1], moved[1])
        assert np.array_equal(sweep.transfer[[0, -1]], moved)
        assert np.array_equal(sweep.source_data, sweep.source)

    def test_spike_ratio(self):
        assert spike_ratio(np.linspace(0, 1, 10)[:, None]) == pytest.approx(1.0)
        path = np.array([[0.0], [1.0], [2.0], [10.0], [11.0]])
        assert spike_ratio(path) == pytest.approx(8.0)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (5, 784)) / 255.0
    images[0, :4] = [9 / 255, 10 / 255, 32 / 255, 13 / 255]  # whitespace byte values
    write_pgm(tmp_path / "g.pgm", images, cols=3)
    canvas = read_pgm(tmp_path / "g.pgm")
    assert canvas.shape == (56, 84)
    assert np.allclose(canvas[:28, :28].ravel(), images[0])
    assert np.allclose(canvas[28:, 28:56].ravel(), images[4])


@pytest.fixture(scope="module")
def setup():
    d1, d2 = gen_synthetic_domains(SyntheticConfig(samples_per_class=60))
    banks = LatentBank(d1.vectors, d1.labels), LatentBank(d2.vectors, d2.labels)
    cfg = BridgeConfig(shared_dim=2, hidden=(8,), batch_size=16, total_steps=5, num_projections=4)
    return banks, cfg, TransferSetup(IdentityBase(2), IdentityBase(2), d1, SignClassifier())


class TestSweeps:
    def test_label_sweep_rows(self, setup):
        banks, cfg, ts = setup
        rows = data_efficiency_sweep(*banks, cfg, [0, 1, None], ts)
        assert [r[0] for r in rows] == ["0", "1", "all"]
        assert rows[0][2] == 0.0 and rows[2][2] > 0
        assert all(0 <= r[1] <= 1 for r in rows)
        with pytest.raises(ValueError):
            data_efficiency_sweep(*banks, cfg, [None, 0], ts)

    def test_ablation_rows(self, setup):
        banks, cfg, ts = setup
        rows = ablation_sweep(*banks, cfg, ts)
        assert [r[0] for r in rows] == ["unconditional", "conditional", "conditional+swd", "full"]

    def test_threads_do_not_change_results(self, setup, monkeypatch):
        banks, cfg, ts = setup
        monkeypatch.setenv("LTBR_THREADS", "1")
        serial = ablation_sweep(*banks, cfg, ts)
        monkeypatch.setenv("LTBR_THREADS", "3")
        assert ablation_sweep(*banks, cfg, ts) == serial
