import math

import numpy as np
import pytest

from dualcycon.engine import Tensor
from dualcycon.engine.gradcheck import max_rel_error, numeric_grad
from dualcycon.errors import InputTooSmall, PeakAxisMismatch
from dualcycon.model import (HEADS, DualCyConNet, ForwardOutputs, ModelConfig,
                             compute_losses, make_batch, model_shapes, predict)
from dualcycon.signal_io import MeasurementFeatures


def random_features(cfg, n, seed=0, same_halves=False):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        tp = rng.uniform(-1, 1, (cfg.n_peaks, cfg.w_t))
        fp = rng.uniform(0, 1, (cfg.n_peaks, cfg.f_bins))
        tn = tp.copy() if same_halves else rng.uniform(-1, 1, tp.shape)
        fn = fp.copy() if same_halves else rng.uniform(0, 1, fp.shape)
        out.append(MeasurementFeatures(tp, tn, fp, fn, label=i % 2))
    return out


def trained_a_bit(cfg, seed=0):
    """Model whose BN running stats are not at their identity initial values."""
    model = DualCyConNet(cfg, seed=seed)
    model(make_batch(random_features(cfg, 4, seed=seed + 50)), training=True)
    return model


def fixed_outputs(values):
    logits = {k: Tensor([math.log(p / (1 - p))]) for k, p in zip(HEADS, values)}
    return ForwardOutputs(logits, {})


class TestShapes:
    def test_default_contract(self):
        s = model_shapes(ModelConfig())
        assert s["td"] == (32, 11, 27)
        assert s["fd"] == (32, 27, 27)
        assert s["concat"] == (32, 38, 27)
        assert s["joint"] == (64, 16, 11)
        assert [b[:2] for b in s["td_blocks"]] == [(8, 61), (16, 28), (32, 11)]

    def test_se_sizes(self):
        assert model_shapes(ModelConfig())["se"] == (54, 6, 27)
        assert model_shapes(ModelConfig(attention="channel"))["se"] == (64, 8, 32)
        assert model_shapes(ModelConfig(attention="feature"))["se"] == (38, 9, 38)
        assert "se" not in model_shapes(ModelConfig(attention="none"))

    def test_default_forward_shapes(self):
        cfg = ModelConfig()
        model = DualCyConNet(cfg, seed=0)
        out = model(make_batch(random_features(cfg, 1)), training=False)
        assert out.maps["tpg"].shape == (1, 32, 11, 27)
        assert out.maps["fng"].shape == (1, 32, 27, 27)
        assert out.vectors["d_jp"].shape == (1, 64)
        assert out.attention["u_p"].shape == (1, 27)

    def test_too_few_peaks(self):
        with pytest.raises(InputTooSmall):
            DualCyConNet(ModelConfig(n_peaks=16))

    def test_too_short_window(self):
        with pytest.raises(InputTooSmall):
            DualCyConNet(ModelConfig(w_t=20))

    def test_peak_axis_mismatch(self):
        model = DualCyConNet(ModelConfig.reduced(), seed=0)
        with pytest.raises(PeakAxisMismatch):
            model.ddam_forward(Tensor(np.zeros((1, 8, 26, 10))), Tensor(np.zeros((1, 8, 27, 9))))

    def test_zero_input_zero_output_eval(self):
        cfg = ModelConfig.reduced()
        model = DualCyConNet(cfg, seed=0)
        x = np.zeros((1, 1, cfg.w_t, cfg.n_peaks))
        out = model.branch_forward(x, "td", training=False)
        assert not out.data.any()


class TestForward:
    @pytest.fixture(scope="class")
    @classmethod
    def setup(cls):
        cfg = ModelConfig.reduced()
        return cfg, trained_a_bit(cfg)

    def test_probabilities_in_range(self, setup):
        cfg, model = setup
        out = model(make_batch(random_features(cfg, 3, seed=1)))
        for p in out.probs.values():
            assert np.all((p > 0) & (p < 1))
        assert list(out.logits) == list(HEADS)

    def test_swap_symmetry(self, setup):
        cfg, model = setup
        batch = make_batch(random_features(cfg, 3, seed=2))
        a, b = model(batch), model(batch.swapped())
        pa, pb = a.probs, b.probs
        for x, y in (("tp", "tn"), ("fp", "fn"), ("jp", "jn")):
            np.testing.assert_allclose(pa[x], pb[y], rtol=0, atol=1e-12)
            np.testing.assert_allclose(pa[y], pb[x], rtol=0, atol=1e-12)
        np.testing.assert_allclose(predict(a), predict(b), rtol=0, atol=1e-12)

    def test_identical_halves(self, setup):
        cfg, model = setup
        out = model(make_batch(random_features(cfg, 2, seed=3, same_halves=True)))
        p = out.probs
        np.testing.assert_allclose(p["tp"], p["tn"], rtol=0, atol=1e-12)
        np.testing.assert_allclose(p["fp"], p["fn"], rtol=0, atol=1e-12)
        np.testing.assert_allclose(p["jp"], p["jn"], rtol=0, atol=1e-12)
        losses = compute_losses(out, [1, 0], lam=1.0)
        assert losses.l_ct == 0.0 and losses.l_cf == 0.0

    def test_eval_mode_batch_independent(self, setup):
        cfg, model = setup
        feats = random_features(cfg, 3, seed=4)
        together = predict(model(make_batch(feats)))
        alone = np.concatenate([predict(model(make_batch([f]))) for f in feats])
        np.testing.assert_allclose(together, alone, atol=1e-12)

    def test_eval_does_not_touch_running_stats(self, setup):
        cfg, model = setup
        before = {k: v.copy() for k, v in model.buffers.items()}
        model(make_batch(random_features(cfg, 2, seed=5)), training=False)
        for k, v in model.buffers.items():
            np.testing.assert_array_equal(v, before[k])

    @pytest.mark.parametrize("attention", ["peak", "channel", "feature", "none"])
    def test_attention_variants(self, attention):
        cfg = ModelConfig.reduced(attention=attention)
        model = DualCyConNet(cfg, seed=0)
        batch = make_batch(random_features(cfg, 2, seed=6))
        losses = compute_losses(model(batch, training=True), batch.labels)
        losses.total.backward()
        assert np.isfinite(losses.l_total)
        assert ("ddam.fc1.weight" in model.params) == (attention != "none")

    def test_peak_attention_scales_peak_axis(self, setup):
        cfg, model = setup
        out = model(make_batch(random_features(cfg, 2, seed=7)))
        u = out.attention["u_p"]
        assert u.shape == (2, cfg.n_peaks - 6)
        assert np.all((u > 0) & (u < 1))

    @pytest.mark.parametrize("domains,heads", [("td", ("tp", "tn")), ("fd", ("fp", "fn"))])
    def test_single_domain(self, domains, heads):
        cfg = ModelConfig.reduced(domains=domains)
        model = DualCyConNet(cfg, seed=0)
        assert not any(k.startswith("ddam") for k in model.params)
        out = model(make_batch(random_features(cfg, 2)), training=True)
        assert tuple(out.logits) == heads

    def test_block_order_flag(self):
        cfg = ModelConfig.reduced(block_order="conv_bn_relu")
        model = DualCyConNet(cfg, seed=0)
        out = model.branch_forward(np.random.default_rng(0).normal(size=(2, 1, cfg.w_t, 16)),
                                   "td", training=True)
        assert out.data.min() >= 0

    def test_state_roundtrip(self, setup):
        cfg, model = setup
        other = DualCyConNet(cfg, seed=99)
        other.load_state_dict(model.state_dict())
        batch = make_batch(random_features(cfg, 2, seed=8))
        np.testing.assert_array_equal(predict(model(batch)), predict(other(batch)))


class TestLosses:
    def test_cls_at_half(self):
        out = fixed_outputs([0.5] * 6)
        losses = compute_losses(out, [1], lam=1.0)
        assert losses.l_cls == pytest.approx(6 * math.log(2), abs=1e-12)
        assert losses.l_cls == pytest.approx(4.1589, abs=1e-4)

    def test_lambda_zero(self):
        cfg = ModelConfig.reduced()
        model = DualCyConNet(cfg, seed=0)
        out = model(make_batch(random_features(cfg, 2)), training=True)
        losses = compute_losses(out, [1, 0], lam=0.0)
        assert losses.l_total == losses.l_cls
        assert losses.l_c > 0

    def test_total_composition(self):
        cfg = ModelConfig.reduced()
        model = DualCyConNet(cfg, seed=0)
        out = model(make_batch(random_features(cfg, 2)), training=True)
        losses = compute_losses(out, [1, 0], lam=0.7)
        assert losses.l_total == pytest.approx(losses.l_cls + 0.7 * (losses.l_ct + losses.l_cf),
                                               rel=1e-12)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            compute_losses(fixed_outputs([0.5] * 6), [1], lam=-1)


class TestPredict:
    def test_examples(self):
        assert predict(fixed_outputs([0.9] * 6))[0] == pytest.approx(0.9, abs=1e-12)
        assert predict(fixed_outputs([1 - 1e-9] * 3 + [1e-9] * 3))[0] == pytest.approx(0.5)
        p = predict(fixed_outputs([0.8, 0.7, 0.9, 0.6, 0.75, 0.85]))[0]
        assert p == pytest.approx(0.7667, abs=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_gradient(seed):
    """L_total gradients of every parameter against central differences.

    The error is relative to the whole sampled gradient vector: some bias
    gradients are ~1e-7 where difference roundoff alone is ~1e-4 relative.
    A small step keeps perturbations from flipping ReLUs whose inputs sit
    within ~1e-5 of zero.
    """
    cfg = ModelConfig.reduced(channels=(2, 3, 4), joint_channels=3)
    model = DualCyConNet(cfg, seed=seed)
    batch = make_batch(random_features(cfg, 2, seed=seed + 100))

    def loss():
        return compute_losses(model(batch, training=True), batch.labels, lam=1.0).total

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    f = lambda: float(loss().data)
    ana, num = [], []
    for p in model.params.values():
        flat = rng.choice(p.data.size, size=min(4, p.data.size), replace=False)
        num.append(numeric_grad(f, p.tensor.data, h=1e-6, indices=flat).ravel()[flat])
        ana.append(p.tensor.grad.ravel()[flat])
    assert max_rel_error(np.concatenate(ana), np.concatenate(num)) <= 1e-4
