from dataclasses import replace

import numpy as np
import pytest

from latent_bridge.base_models import LatentBank
from latent_bridge.bridge import BridgeConfig, BridgingVae, ablation_variants, label_mask, train_bridge
from latent_bridge.datasets import SyntheticConfig, gen_synthetic_domains
from latent_bridge.errors import BadDomain, EmptyBank, NonFiniteLoss, ShapeMismatch
from latent_bridge.losses import LossWeights
from latent_bridge.store import load_model, save_model

TINY = BridgeConfig(shared_dim=2, hidden=(16, 16), batch_size=32, total_steps=30, num_projections=10)


@pytest.fixture(scope="module")
def banks():
    d1, d2 = gen_synthetic_domains(SyntheticConfig(samples_per_class=100))
    return LatentBank(d1.vectors, d1.labels), LatentBank(d2.vectors, d2.labels)


def kl_of(model, bank, domain):
    _, mu, sigma = model.encode(bank.latents, domain)
    return float(np.mean(0.5 * np.sum(mu**2 + sigma**2 - 2 * np.log(sigma) - 1, axis=1)))


class TestModel:
    def test_shapes(self):
        m = BridgingVae(3, 2, 4, (8, 8), rng=np.random.default_rng(0))
        zp, mu, sigma = m.encode(np.ones((5, 3)), 1, np.random.default_rng(0))
        assert zp.shape == mu.shape == sigma.shape == (5, 2)
        assert np.all((sigma > 0) & (sigma < 1))
        assert m.decode(zp, 2).shape == (5, 3)

    def test_bad_domain_and_width(self):
        m = BridgingVae(3, 2, 2, (8,), rng=np.random.default_rng(0))
        with pytest.raises(BadDomain):
            m.encode(np.ones((1, 3)), 3)
        with pytest.raises(ShapeMismatch):
            m.encode(np.ones((1, 4)), 1)
        with pytest.raises(ShapeMismatch):
            m.decode(np.ones((1, 3)), 1)

    def test_conditioning_is_live(self):
        m = BridgingVae(3, 2, 2, (8, 8), rng=np.random.default_rng(1))
        z = np.random.default_rng(2).normal(size=(4, 3))
        assert not np.allclose(m.encode_mean(z, 1), m.encode_mean(z, 2))
        assert not np.allclose(m.decode(z[:, :2], 1), m.decode(z[:, :2], 2))

    def test_unconditional_ignores_domain(self):
        m = BridgingVae(3, 2, 2, (8, 8), conditional=False, rng=np.random.default_rng(1))
        z = np.random.default_rng(2).normal(size=(4, 3))
        assert np.array_equal(m.encode_mean(z, 1), m.encode_mean(z, 2))
        assert np.array_equal(m.decode(z[:, :2], 1), m.decode(z[:, :2], 2))

    def test_checkpoint_round_trip(self, tmp_path):
        m = BridgingVae(3, 2, 2, (8, 8), conditional=False, rng=np.random.default_rng(1))
        save_model(tmp_path / "b.ltbr", m)
        back = load_model(tmp_path / "b.ltbr")
        z = np.random.default_rng(2).normal(size=(4, 3))
        assert back.conditional is False
        assert np.array_equal(back.encode_mean(z, 1), m.encode_mean(z, 1))


class TestVariants:
    def test_four_variants(self):
        cfg = replace(TINY, weights=LossWeights(0.1, 2.0, 0.3))
        variants = ablation_variants(cfg)
        assert [n for n, _ in variants] == ["unconditional", "conditional", "conditional+swd", "full"]
        named = dict(variants)
        assert named["full"] == cfg
        assert named["unconditional"].conditional is False
        assert (named["conditional"].weights.beta_swd, named["conditional"].weights.beta_cls) == (0, 0)
        assert named["conditional+swd"].weights.beta_swd == 2.0
        assert named["conditional+swd"].weights.beta_cls == 0
        assert all(c.weights.beta_kl == 0.1 for _, c in variants)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BridgeConfig(shared_dim=0)
        with pytest.raises(ValueError):
            BridgeConfig(labels_per_class=-1)


class TestLabelMask:
    def test_balanced(self):
        labels = np.repeat([0, 1, 2], 10)
        mask = label_mask(labels, 3, 4, np.random.default_rng(0))
        assert np.bincount(labels[mask]).tolist() == [4, 4, 4]
        assert label_mask(labels, 3, None, None).all()
        assert not label_mask(labels, 3, 0, np.random.default_rng(0)).any()


class TestTraining:
    def test_trace_shape_and_signs(self, banks):
        _, trace = train_bridge(*banks, TINY)
        assert len(trace) == 30 and [r.step for r in trace] == list(range(30))
        for r in trace:
            assert min(r.elbo1, r.elbo2, r.swd, r.cls1, r.cls2) >= 0
            w = TINY.weights
            assert r.total == pytest.approx(r.elbo1 + r.elbo2 + w.beta_swd * r.swd + w.beta_cls * (r.cls1 + r.cls2))

    def test_reproducible(self, banks):
        _, a = train_bridge(*banks, TINY)
        _, b = train_bridge(*banks, TINY)
        assert a == b
        _, c = train_bridge(*banks, replace(TINY, seed=1))
        assert a != c

    def test_unlabelled_leaves_classifier_untouched(self, banks):
        cfg = replace(TINY, labels_per_class=0)
        model, trace = train_bridge(*banks, cfg)
        assert all(r.cls1 == 0.0 and r.cls2 == 0.0 for r in trace)
        fresh = BridgingVae(2, 2, 2, cfg.hidden, True, np.random.default_rng(np.random.SeedSequence(0).spawn(5)[0]))
        assert np.array_equal(model.latent_classifier.weight.data, fresh.latent_classifier.weight.data)
        assert np.array_equal(model.latent_classifier.bias.data, fresh.latent_classifier.bias.data)

    def test_plain_conditional_vae_learns(self, banks):
        b1 = banks[0]
        cfg = replace(TINY, total_steps=300, weights=LossWeights(beta_swd=0.0, beta_cls=0.0))
        _, trace = train_bridge(b1, b1, cfg)
        first = np.mean([r.elbo1 for r in trace[:20]])
        last = np.mean([r.elbo1 for r in trace[-20:]])
        assert last < first

    def test_kl_weight_orders_kl(self, banks):
        kls = {}
        for beta in (0.001, 1.0):
            cfg = replace(TINY, total_steps=300, weights=LossWeights(beta_kl=beta, beta_swd=0.0, beta_cls=0.0))
            model, _ = train_bridge(*banks, cfg)
            kls[beta] = kl_of(model, banks[0], 1)
        assert kls[1.0] < kls[0.001]

    def test_on_step_callback(self, banks):
        seen = []
        train_bridge(*banks, replace(TINY, total_steps=3), on_step=seen.append)
        assert [r.step for r in seen] == [0, 1, 2]

    def test_batch_clamped_to_bank(self):
        small = LatentBank(np.random.default_rng(0).normal(size=(6, 2)), [0, 1] * 3)
        _, trace = train_bridge(small, small, replace(TINY, total_steps=2, batch_size=64))
        assert len(trace) == 2

    def test_errors(self, banks):
        empty = LatentBank(np.zeros((0, 2)), np.zeros(0, dtype=int), num_classes=2)
        with pytest.raises(EmptyBank):
            train_bridge(empty, banks[1], TINY)
        wide = LatentBank(np.zeros((4, 3)), [0, 1, 0, 1])
        with pytest.raises(ShapeMismatch):
            train_bridge(wide, banks[1], TINY)

    def test_non_finite_abort_carries_state(self, banks):
        bad = LatentBank(banks[0].latents.copy(), banks[0].labels)
        bad.latents[:] = np.nan
        with pytest.raises(NonFiniteLoss) as info:
            train_bridge(bad, banks[1], TINY)
        assert info.value.trace == []
        assert set(info.value.last_good) == set(BridgingVae(2, 2, 2, (16, 16)).named_parameters())
