"""Integrated gradients against closed-form oracles, plus rendering checks."""

import json

import numpy as np
import pytest

from beamsight import attribution as attr
from beamsight import resnet as rn
from beamsight import tensorcore as tc


class LinearModel:
    """F(x) = w . x + c; gradients are constant so any m integrates exactly."""

    def __init__(self, w, c=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.c = c

    def logit_gradients(self, batch, target):
        vals = np.tensordot(batch.astype(np.float64), self.w,
                            axes=([1, 2, 3], [0, 1, 2])) + self.c
        grads = np.broadcast_to(self.w[None], batch.shape).copy()
        return vals, grads


class TwoClassLinear:
    """Two affine logits over the input, for the target-sensitivity property."""

    def __init__(self, w0, w1):
        self.w = [np.asarray(w0, dtype=np.float64), np.asarray(w1, dtype=np.float64)]

    def logit_gradients(self, batch, target):
        w = self.w[target]
        vals = np.tensordot(batch.astype(np.float64), w, axes=([1, 2, 3], [0, 1, 2]))
        return vals, np.broadcast_to(w[None], batch.shape).copy()


class QuadraticModel:
    """F(x) = sum x^2; exact path integral from black is sum x_i^2."""

    def logit_gradients(self, batch, target):
        b = batch.astype(np.float64)
        return (b ** 2).sum(axis=(1, 2, 3)), 2.0 * b


class TestIntegratedGradients:
    def test_linear_model_exact(self):
        # F(x) = 2 x0 - x1 at x = (0.5, 0.5) from the black baseline
        w = np.array([[[2.0, -1.0]]])
        model = LinearModel(w)
        x = np.array([[[0.5, 0.5]]], dtype=np.float32)
        for m in (1, 2, 5, 64):
            amap = attr.integrated_gradients(attr.AttributionRequest(model=model, x=x, steps=m))
            assert np.allclose(amap.attributions, [[[1.0, -0.5]]], atol=1e-12)
            assert amap.completeness_residual < 1e-12
            assert amap.f_input - amap.f_baseline == pytest.approx(0.5, abs=1e-9)

    def test_null_path(self):
        model = LinearModel(np.ones((1, 3, 3)))
        x = np.random.default_rng(0).random((1, 3, 3)).astype(np.float32)
        amap = attr.integrated_gradients(
            attr.AttributionRequest(model=model, x=x, baseline=x, steps=8))
        assert np.all(amap.attributions == 0.0)
        assert amap.completeness_residual == 0.0

    def test_quadratic_closed_form(self):
        # gradient 2*alpha*x is linear along the path, so midpoint is exact;
        # the oracle integral of 2 alpha x^2 over [0,1] is x^2
        model = QuadraticModel()
        x = np.full((1, 1, 1), 1.0, dtype=np.float32)
        for m in (4, 16):
            amap = attr.integrated_gradients(attr.AttributionRequest(model=model, x=x, steps=m))
            assert float(amap.attributions.sum()) == pytest.approx(1.0, abs=1e-6)

    def test_midpoint_refinement_on_smooth_model(self):
        class SineModel:
            def logit_gradients(self, batch, target):
                return np.sin(batch.astype(np.float64)).sum(axis=(1, 2, 3)), np.cos(batch)

        x = np.random.default_rng(1).uniform(0.5, 2.8, (1, 4, 4)).astype(np.float32)
        residuals = {}
        for m in (8, 256):
            amap = attr.integrated_gradients(
                attr.AttributionRequest(model=SineModel(), x=x, steps=m))
            residuals[m] = amap.completeness_residual
        assert residuals[256] <= residuals[8] + 1e-9

    def test_shape_mismatch(self):
        model = LinearModel(np.ones((1, 2, 2)))
        with pytest.raises(tc.ShapeMismatch):
            attr.integrated_gradients(attr.AttributionRequest(
                model=model, x=np.ones((1, 2, 2), np.float32),
                baseline=np.zeros((1, 3, 3), np.float32)))

    def test_invalid_steps(self):
        model = LinearModel(np.ones((1, 2, 2)))
        with pytest.raises(ValueError):
            attr.integrated_gradients(attr.AttributionRequest(
                model=model, x=np.ones((1, 2, 2), np.float32), steps=0))

    def test_target_sensitivity_on_linear_pair(self):
        # per-pixel, IG(class0) - IG(class1) equals IG of the logit difference
        rng = np.random.default_rng(5)
        w0, w1 = rng.normal(size=(2, 1, 3, 3))
        model = TwoClassLinear(w0, w1)
        x = rng.random((1, 3, 3)).astype(np.float32)
        a0 = attr.integrated_gradients(attr.AttributionRequest(model=model, x=x, steps=4, target=0))
        a1 = attr.integrated_gradients(attr.AttributionRequest(model=model, x=x, steps=4, target=1))
        diff_model = LinearModel(w0 - w1)
        ad = attr.integrated_gradients(attr.AttributionRequest(model=diff_model, x=x, steps=4))
        assert np.allclose(a0.attributions - a1.attributions, ad.attributions, atol=1e-10)

    def test_resnet_model_attribution_runs(self):
        cfg = rn.ModelConfig(input_size=32, stem_channels=8, blocks_per_stage=(1, 1))
        model = rn.build_model(cfg, seed=0)
        x = np.random.default_rng(2).random((1, 32, 32)).astype(np.float32)
        amap = attr.integrated_gradients(attr.AttributionRequest(model=model, x=x, steps=16))
        assert amap.attributions.shape == (1, 32, 32)
        assert np.isfinite(amap.attributions).all()


class TestCompletenessCheck:
    def test_linear_passes_any_tolerance(self):
        model = LinearModel(np.ones((1, 2, 2)))
        x = np.random.default_rng(1).random((1, 2, 2)).astype(np.float32)
        amap = attr.integrated_gradients(attr.AttributionRequest(model=model, x=x, steps=3))
        assert attr.completeness_check(amap, tol_fraction=0.0)  # residual is exactly 0 here

    def test_zero_tolerance_with_residual_fails(self):
        amap = attr.AttributionMap(attributions=np.ones((1, 2, 2)), f_input=1.0,
                                   f_baseline=0.0, completeness_residual=0.5, steps=4)
        assert not attr.completeness_check(amap, tol_fraction=0.0)
        assert attr.completeness_check(amap, tol_fraction=0.51)


class TestBeamAlignment:
    def _map_with(self, attributions):
        return attr.AttributionMap(attributions=attributions, f_input=1.0, f_baseline=0.0,
                                   completeness_residual=0.0, steps=1)

    def test_full_mask_scores_one(self):
        amap = self._map_with(np.random.default_rng(0).normal(size=(1, 8, 8)))
        assert attr.beam_alignment_score(amap, np.ones((8, 8), bool)) == 1.0

    def test_all_zero_attributions_score_zero(self):
        amap = self._map_with(np.zeros((1, 8, 8)))
        assert attr.beam_alignment_score(amap, np.ones((8, 8), bool)) == 0.0

    def test_uniform_mass_matches_area_fraction(self):
        # a 30%-of-pixels mask under uniform |attribution| scores 0.30;
        # use zero dilation so the area is exact
        mask = np.zeros((10, 10), bool)
        mask.ravel()[:30] = True
        amap = self._map_with(np.ones((1, 10, 10)))
        assert attr.beam_alignment_score(amap, mask, dilation=0) == pytest.approx(0.30, abs=1e-6)

    def test_missing_mask(self):
        amap = self._map_with(np.ones((1, 4, 4)))
        with pytest.raises(attr.MissingMask):
            attr.beam_alignment_score(amap, None)

    def test_dilation_grows_area(self):
        mask = np.zeros((16, 16), bool)
        mask[8, 8] = True
        assert attr.mask_area_fraction(mask, dilation=2) > attr.mask_area_fraction(mask, dilation=0)


class TestRenderHeatmap:
    def _amap(self, attributions):
        return attr.AttributionMap(attributions=attributions, f_input=2.5, f_baseline=-0.5,
                                   completeness_residual=0.0125, steps=64)

    def test_zero_map_renders_neutral_gray(self, tmp_path):
        underlay = np.random.default_rng(0).random((8, 8, 1))
        p = attr.render_heatmap(self._amap(np.zeros((1, 8, 8))), underlay, tmp_path / "z.png")
        from PIL import Image

        rgb = np.asarray(Image.open(p))
        assert np.array_equal(rgb[..., 0], rgb[..., 1])
        assert np.array_equal(rgb[..., 1], rgb[..., 2])

    def test_sidecar_passthrough(self, tmp_path):
        amap = self._amap(np.random.default_rng(1).normal(size=(1, 8, 8)))
        p = attr.render_heatmap(amap, np.zeros((8, 8, 1)), tmp_path / "h.png")
        sidecar = json.loads(p.with_suffix(".json").read_text())
        assert sidecar["completeness_residual"] == amap.completeness_residual
        assert sidecar["f_input"] == amap.f_input
        assert sidecar["f_baseline"] == amap.f_baseline
        assert sidecar["steps"] == 64

    def test_rendering_is_byte_deterministic(self, tmp_path):
        amap = self._amap(np.random.default_rng(2).normal(size=(1, 12, 12)))
        underlay = np.random.default_rng(3).random((12, 12, 1))
        p1 = attr.render_heatmap(amap, underlay, tmp_path / "a.png")
        p2 = attr.render_heatmap(amap, underlay, tmp_path / "b.png")
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.with_suffix(".json").read_text() == p2.with_suffix(".json").read_text()
