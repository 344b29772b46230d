import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiertax.nnet import (
    Adam,
    Backbone,
    LinearLayer,
    LrSchedule,
    NnetError,
    grad_check,
    lr_at_epoch,
    relu,
    softmax,
    weighted_ce,
)
from hiertax.rng import SplitMix64


class TestLinearAndBackbone:
    def test_zero_weights_zero_output(self):
        bb = Backbone(4, [3, 2], dense_connectivity=True, stream=None)
        x = np.random.default_rng(0).standard_normal((5, 4))
        feats, _ = bb.forward(x)
        assert (feats == 0).all()

    def test_identity_block_passthrough(self):
        layer = LinearLayer(3, 3, stream=None)
        layer.W[:] = np.eye(3)
        x = np.abs(np.random.default_rng(1).standard_normal((4, 3)))
        assert (relu(layer.forward(x)) == x).all()

    def test_dense_input_widths(self):
        bb = Backbone(3, [2, 2], dense_connectivity=True, stream=SplitMix64(0))
        assert bb.blocks[0].n_in == 3
        assert bb.blocks[1].n_in == 5
        plain = Backbone(3, [2, 2], dense_connectivity=False, stream=SplitMix64(0))
        assert plain.blocks[1].n_in == 2

    def test_init_bounds_and_determinism(self):
        a = LinearLayer(50, 40, SplitMix64(9))
        b = LinearLayer(50, 40, SplitMix64(9))
        assert (a.W == b.W).all()
        limit = math.sqrt(6.0 / 90.0)
        assert np.abs(a.W).max() <= limit
        assert (a.b == 0).all()

    def test_shape_mismatch(self):
        layer = LinearLayer(3, 2, stream=None)
        with pytest.raises(NnetError, match="expected"):
            layer.forward(np.zeros((1, 4)))


class TestWeightedCE:
    def test_uniform_two_class(self):
        loss, _ = weighted_ce(np.zeros((1, 2)), [0], np.ones(2))
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_linear_in_weight(self):
        loss, _ = weighted_ce(np.zeros((1, 2)), [0], np.array([2.0, 1.0]))
        assert loss == pytest.approx(2.0 * math.log(2.0), abs=1e-12)

    def test_closed_form_three_class(self):
        loss, _ = weighted_ce(np.array([[5.0, 0.0, 0.0]]), [0], np.ones(3))
        assert loss == pytest.approx(math.log(1.0 + 2.0 * math.exp(-5.0)), abs=1e-12)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((6, 4))
        targets = rng.integers(0, 4, size=6)
        weights = rng.uniform(0.5, 2.0, size=4)
        _, grad = weighted_ce(logits, targets, weights)
        h = 1e-6
        for i in range(6):
            for k in range(4):
                lp = logits.copy(); lp[i, k] += h
                lm = logits.copy(); lm[i, k] -= h
                num = (weighted_ce(lp, targets, weights)[0]
                       - weighted_ce(lm, targets, weights)[0]) / (2 * h)
                assert grad[i, k] == pytest.approx(num, abs=1e-8)

    def test_rejects_non_finite(self):
        with pytest.raises(NnetError, match="non-finite"):
            weighted_ce(np.array([[np.inf, 0.0]]), [0], np.ones(2))

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
           st.floats(-50, 50))
    @settings(max_examples=200, deadline=None)
    def test_softmax_shift_invariance(self, row, shift):
        z = np.array([row])
        p1 = softmax(z)
        p2 = softmax(z + shift)
        assert np.abs(p1 - p2).max() <= 1e-12
        assert abs(p1.sum() - 1.0) <= 1e-12


class TestAdam:
    def test_zero_gradient_no_move(self):
        p = np.array([1.0, -2.0])
        g = np.zeros(2)
        opt = Adam([(p, g)])
        opt.step(0.1)
        assert (p == np.array([1.0, -2.0])).all()
        assert opt.t == 1

    def test_first_step_magnitude(self):
        # bias-corrected first step moves ~lr against the gradient sign
        for g0 in (0.5, -3.0, 1e-3):
            p = np.array([0.0])
            g = np.array([g0])
            opt = Adam([(p, g)])
            opt.step(0.01)
            expected = -0.01 * g0 / (abs(g0) + 1e-8)
            assert p[0] == pytest.approx(expected, rel=1e-6)

    def test_zero_lr(self):
        p = np.array([3.0])
        opt = Adam([(p, np.array([1.0]))])
        opt.step(0.0)
        assert p[0] == 3.0

    def test_non_finite_gradient(self):
        p = np.array([0.0])
        opt = Adam([(p, np.array([np.nan]))])
        with pytest.raises(NnetError, match="non-finite"):
            opt.step(0.1)


class TestLrSchedule:
    def test_step_decay_recipe_values(self):
        s = LrSchedule()
        assert lr_at_epoch(s, 0) == 0.01
        assert lr_at_epoch(s, 19) == 0.01
        assert lr_at_epoch(s, 20) == pytest.approx(0.01 / 3.0, rel=1e-12)
        assert lr_at_epoch(s, 40) == pytest.approx(0.01 / 9.0, rel=1e-12)
        assert lr_at_epoch(s, 45) == pytest.approx(0.01 / 9.0, rel=1e-12)


class _TinyModel:
    """Linear softmax classifier exposing the grad_check protocol."""

    def __init__(self):
        self.layer = LinearLayer(3, 4, SplitMix64(5))

    def parameters(self):
        return self.layer.parameters()

    def loss(self, batch):
        x, y, w = batch
        logits = self.layer.forward(x)
        return weighted_ce(logits, y, w)[0]

    def loss_and_backward(self, batch):
        x, y, w = batch
        self.layer.zero_grad()
        logits = self.layer.forward(x)
        loss, dlg = weighted_ce(logits, y, w)
        self.layer.backward(x, dlg)
        return loss


def _tiny_batch():
    rng = np.random.default_rng(7)
    return (rng.standard_normal((5, 3)), rng.integers(0, 4, 5), rng.uniform(0.5, 2, 4))


class TestGradCheck:
    def test_linear_model_passes(self):
        assert grad_check(_TinyModel(), _tiny_batch()) <= 1e-6

    def test_detects_corrupted_gradient(self):
        model = _TinyModel()

        original = model.loss_and_backward

        def corrupted(batch):
            loss = original(batch)
            model.layer.gW *= 2.0
            return loss

        model.loss_and_backward = corrupted
        err = grad_check(model, _tiny_batch())
        assert err == pytest.approx(0.5, abs=0.01)

    def test_zero_gradient_parameter_is_exact(self):
        # bias of an unused output class has zero analytic and numeric... not quite;
        # instead: parameter with no effect -> both gradients zero -> error 0
        model = _TinyModel()
        x, y, w = _tiny_batch()
        w = w.copy()
        # make class 3 absent from targets and zero-weighted: its bias only
        # moves the softmax denominator, so keep it simple: check the guard
        err = grad_check(model, (x, np.zeros(5, dtype=int), np.array([1.0, 0, 0, 0])))
        assert err <= 1e-6
