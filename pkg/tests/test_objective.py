import numpy as np
import pytest

from copad import diffcore as dc
from copad import objective as obj


def cfg(**kw):
    return obj.LossConfig(**{"margin": 1.0, "anomaly_weight": 0.5, **kw})


class TestMuNorm:
    def test_batch_mean(self):
        assert obj.mu_norm([-1.0, -3.0], cfg()) == -2.0

    def test_ema_update(self):
        c = cfg(mu_norm_mode="ema", ema_decay=0.9)
        assert obj.mu_norm([-4.0], c, ema_state=-2.0) == pytest.approx(-2.2)

    def test_empty_batch_falls_back_to_state(self):
        assert obj.mu_norm([], cfg(), ema_state=-2.5) == -2.5

    def test_unavailable_raises(self):
        with pytest.raises(obj.MuNormUnavailableError):
            obj.mu_norm([], cfg())


class TestContrastiveLoss:
    def test_hand_evaluation(self):
        out = obj.contrastive_loss([-1.0, -3.0], [-2.5], cfg(), mu_norm_value=-2.0)
        assert out.normal_term == 4.0
        assert out.anomaly_term == pytest.approx(0.5)
        assert out.total == pytest.approx(4.25)
        assert out.hinge_active == [True]
        assert out.total == pytest.approx(out.normal_term + 0.5 * out.anomaly_term)

    def test_hinge_boundary_zero(self):
        out = obj.contrastive_loss([-1.0], [-3.0], cfg(), mu_norm_value=-2.0)
        assert out.anomaly_term == 0.0
        assert out.hinge_active == [False]

    def test_zero_weight_ignores_anomalies(self):
        out = obj.contrastive_loss([-1.0, -2.0], [5.0], cfg(anomaly_weight=0.0), -2.0)
        assert out.total == out.normal_term == 3.0

    def test_nonfinite_input_names_index(self):
        with pytest.raises(ValueError, match="index 1"):
            obj.contrastive_loss([-1.0, np.inf], [], cfg(), -2.0)

    def test_nondecreasing_in_margin(self):
        rng = np.random.default_rng(0)
        normals = list(rng.normal(-3, 1, 5))
        anoms = list(rng.normal(-4, 1, 5))
        mu = float(np.mean(normals))
        totals = [obj.contrastive_loss(normals, anoms, cfg(margin=m), mu).total
                  for m in [0.5, 1.0, 2.0, 4.0]]
        # a larger margin lowers the bar, so each hinge can only grow
        assert all(a <= b for a, b in zip(totals, totals[1:]))


class TestTensorLoss:
    def test_matches_plain_evaluation(self):
        logc = dc.Tensor(np.array([-1.0, -3.0, -2.5]), requires_grad=True)
        labels = np.array([0.0, 0.0, 1.0])
        total, br = obj.contrastive_loss_tensor(logc, labels, cfg(), -2.0)
        assert br.total == pytest.approx(4.25)
        assert total.item() == pytest.approx(4.25)

    def test_gradient_structure(self):
        # d total / d logc_n = -1; d total / d logc_a = alpha * 1[hinge active]
        logc = dc.Tensor(np.array([-1.0, -3.0, -2.5, -9.0]), requires_grad=True)
        labels = np.array([0.0, 0.0, 1.0, 1.0])
        with dc.Tape():
            total, _ = obj.contrastive_loss_tensor(logc, labels, cfg(), -2.0)
        dc.backward(total)
        assert np.allclose(logc.grad, [-1.0, -1.0, 0.5, 0.0])

    def test_gradient_matches_finite_difference_away_from_kink(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(-3, 1, 6)
        labels = (rng.random(6) < 0.5).astype(float)
        leaf = dc.Tensor(vals, requires_grad=True)

        def f(leaf):
            total, _ = obj.contrastive_loss_tensor(leaf, labels, cfg(), -2.0)
            return total

        report = dc.gradcheck(f, [leaf], eps=1e-6, rel_tol=1e-6)
        assert report.passed, report.max_rel_err
