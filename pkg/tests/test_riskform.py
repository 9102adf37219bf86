import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progrisk.riskform import (Formulation, PairLabels, bce_terms, log1mexp, pair_loss, predict_baseline_pair,
                               predict_first, predict_pair, predict_pair_form1, predict_pair_form2, predict_single)

from oracles import central_difference, mp_bce, mp_form1, mp_form2, mp_sigmoid, relative_error

logits = st.floats(-40, 40, allow_nan=False)


class TestSigmoid:
    def test_midpoint(self):
        assert predict_single(0.0) == 0.5

    def test_one(self):
        assert predict_single(1.0) == pytest.approx(float(mp_sigmoid(1)), abs=1e-15)
        assert predict_single(1.0) == pytest.approx(0.7310586, abs=1e-7)

    def test_deep_negative_positive(self):
        p = predict_single(-50.0)
        assert 0.0 < p < 1e-20

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            predict_single(np.nan)


class TestForm1:
    def test_zero_zero(self):
        pred = predict_pair_form1(0.0, 0.0)
        assert (pred.y1_hat, pred.y2_hat) == (0.5, 0.75)

    def test_spot_value(self):
        pred = predict_pair_form1(1.0, -1.0)
        assert pred.y2_hat == pytest.approx(float(mp_form1(1, -1)), abs=1e-15)
        assert pred.y2_hat == pytest.approx(0.8033882, abs=1e-6)

    @given(logits, logits)
    @settings(max_examples=200)
    def test_symmetric(self, a, b):
        assert predict_pair_form1(a, b).y2_hat == predict_pair_form1(b, a).y2_hat

    @given(logits, logits)
    @settings(max_examples=200)
    def test_matches_high_precision(self, a, b):
        assert predict_pair_form1(a, b).y2_hat == pytest.approx(float(mp_form1(a, b)), rel=1e-13)


class TestForm2:
    def test_zero_zero(self):
        pred = predict_pair_form2(0.0, 0.0)
        assert (pred.y1_hat, pred.y2_hat) == (0.5, 0.75)

    def test_limits(self):
        assert abs(predict_pair_form2(0.0, 30.0).y2_hat - 0.5) < 1e-9
        assert abs(predict_pair_form2(0.0, -30.0).y2_hat - 1.0) < 1e-9

    @given(logits, logits)
    @settings(max_examples=200)
    def test_matches_high_precision(self, a, g):
        assert predict_pair_form2(a, g).y2_hat == pytest.approx(float(mp_form2(a, g)), rel=1e-13)

    @given(logits, logits)
    @settings(max_examples=300)
    def test_never_below_first(self, a, g):
        pred = predict_pair_form2(a, g)
        assert pred.y2_hat >= pred.y1_hat


class TestBaselinePair:
    def test_zero_zero(self):
        pred = predict_baseline_pair(0.0, 0.0)
        assert (pred.y1_hat, pred.y2_hat) == (0.5, 0.5)

    def test_violation_permitted(self):
        pred = predict_baseline_pair(2.0, -2.0)
        assert pred.y2_hat < pred.y1_hat

    def test_spot_value(self):
        pred = predict_baseline_pair(-1.0, 1.0)
        assert pred.y1_hat == pytest.approx(0.2689414, abs=1e-7)
        assert pred.y2_hat == pytest.approx(0.7310586, abs=1e-7)


class TestStability:
    @pytest.mark.parametrize("kind", list(Formulation))
    @pytest.mark.parametrize("z1,z2", [(500.0, 500.0), (-500.0, -500.0), (500.0, -500.0), (-500.0, 500.0)])
    def test_extreme_logits_finite(self, kind, z1, z2):
        pred = predict_pair(kind, z1, z2)
        for y1 in (0, 1):
            for y2 in (y1, 1):
                loss, grad = pair_loss(pred, PairLabels(y1, y2))
                assert np.isfinite(loss)
                assert np.all(np.isfinite(grad))

    def test_log_space_values(self):
        # log(1 - y2_hat) for Form1 at (-500, -500) is about -2 exp(-500), far beyond float resolution near 1
        pred = predict_pair_form1(-500.0, -500.0)
        assert pred.log_y2_hat == pytest.approx(np.log(2.0) - 500.0, rel=1e-12)

    def test_log1mexp_branches(self):
        c = np.array([-1e-10, -0.1, -np.log(2.0), -5.0, -800.0])
        expected = [float(mpmath.log(1 - mpmath.exp(v))) for v in c]
        np.testing.assert_allclose(log1mexp(c), expected, rtol=1e-12)


class TestLoss:
    def test_single_scan_bce(self):
        loss, grad = pair_loss(predict_first(0.0), PairLabels(1))
        assert loss == pytest.approx(0.6931472, abs=1e-7)
        assert grad.shape == (1,)

    def test_form1_total(self):
        loss, _ = pair_loss(predict_pair_form1(0.0, 0.0), PairLabels(0, 1))
        oracle = float(mp_bce(0, mp_sigmoid(0)) + mp_bce(1, mp_form1(0, 0)))
        assert loss == pytest.approx(oracle, abs=1e-12)
        assert loss == pytest.approx(0.9808293, abs=1e-6)

    def test_mismatched_labels(self):
        with pytest.raises(ValueError):
            pair_loss(predict_first(0.0), PairLabels(0, 1))
        with pytest.raises(ValueError):
            PairLabels(0, 1, horizon_years=3)

    @pytest.mark.parametrize("kind", list(Formulation))
    def test_gradients_finite_differences(self, kind):
        rng = np.random.default_rng(21)
        for _ in range(100):
            z = rng.uniform(-6, 6, size=2)
            y1 = int(rng.integers(2))
            y2 = int(rng.integers(y1, 2))
            _, d1, d2 = bce_terms(kind, z[0], z[1], y1, y2)
            numeric = central_difference(lambda v: float(bce_terms(kind, v[0], v[1], y1, y2)[0]), z)
            assert relative_error([d1, d2], numeric) < 1e-4

    def test_array_inputs(self):
        z1 = np.array([0.0, 1.0, -2.0])
        z2 = np.array([0.5, -1.0, 3.0])
        pred = predict_pair_form2(z1, z2)
        assert pred.y2_hat.shape == (3,)
        loss, grad = pair_loss(pred, PairLabels(np.zeros(3), np.ones(3)))
        assert grad.shape == (2, 3)
        singles = [pair_loss(predict_pair_form2(a, b), PairLabels(0, 1))[0] for a, b in zip(z1, z2)]
        assert loss == pytest.approx(sum(singles), rel=1e-14)
