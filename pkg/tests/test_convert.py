"""Conversion planning, model substitution, and fidelity evaluation."""

import numpy as np
import pytest

from polyformer.convert import (
    ConversionPlan,
    DegreeConfig,
    convert,
    fidelity_report,
    graph_inputs_for,
    plan_conversion,
    trace_model,
)
from polyformer.datasets import make_dataset
from polyformer.errors import ArchitectureError, DomainError
from polyformer.model import AttentionConfig, ModelConfig, NormConfig, TransformerModel
from polyformer.polygraph import depth_report, verify_polynomial
from polyformer.rangemin import RangeRecorder, TrainConfig, record_ranges, train


DEGREES = DegreeConfig(gelu_degree=9, relu_sign_degrees=(7, 7), invsqrt_seed_degree=7,
                       invsqrt_newton_steps=2)


def small_dataset():
    return make_dataset("char_lm", 0, context=16)


def trained_sigma_model(ds, norm_kind="layernorm", sigma="gelu", steps=40, seed=21):
    cfg = ModelConfig(
        depth=1, d_model=16, context=16, vocab=ds.vocab_size, seed=seed,
        attention=AttentionConfig(kind="sigma", sigma_activation=sigma, head_count=2),
        norm=NormConfig(kind=norm_kind),
    )
    model = TransformerModel(cfg)
    hp = TrainConfig(epochs=1, steps_per_epoch=steps, batch_size=8, lr=2e-3, eval_batches=1)
    train(model, ds, "baseline", hp, seed=seed)
    return model


def recorded(model, ds, batches=3):
    rec = RangeRecorder()
    for batch in ds.test_batches(8, limit=batches):
        record_ranges(model, batch, recorder=rec)
    return rec


@pytest.fixture(scope="module")
def lm_fixture():
    ds = small_dataset()
    model = trained_sigma_model(ds)
    rec = recorded(model, ds)
    return ds, model, rec


class TestPlan:
    def test_zero_margin_domains_equal_recorded(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, margin=0.0, degrees=DEGREES)
        entry = plan.entries["block0.mlp.act"]
        assert entry.domain == pytest.approx(entry.recorded)

    def test_margin_widens_by_span_fraction(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, margin=0.25, degrees=DEGREES)
        entry = plan.entries["block0.mlp.act"]
        lo, hi = entry.recorded
        span = hi - lo
        assert entry.domain[0] == pytest.approx(lo - 0.25 * span)
        assert entry.domain[1] == pytest.approx(hi + 0.25 * span)

    def test_batchnorm_model_plan_has_only_activation_entries(self):
        ds = small_dataset()
        model = trained_sigma_model(ds, norm_kind="batchnorm", seed=22)
        rec = recorded(model, ds)
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        assert set(plan.entries) == {"block0.attn.act", "block0.mlp.act"}

    def test_missing_range_rejected(self, lm_fixture):
        ds, model, rec = lm_fixture
        with pytest.raises(DomainError):
            plan_conversion(model, {}, rec.variances, degrees=DEGREES)

    def test_inv_sqrt_domain_positive(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        for entry in plan.entries.values():
            if entry.target == "inv_sqrt":
                assert entry.domain[0] > 0

    def test_plan_sites_golden(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        assert set(plan.entries) == {
            "block0.attn.act", "block0.mlp.act",
            "block0.norm1.var", "block0.norm2.var", "final_norm.var",
        }
        targets = {e.site: e.target for e in plan.entries.values()}
        assert targets["block0.attn.act"] == "gelu"
        assert targets["block0.norm1.var"] == "inv_sqrt"

    def test_plan_json_round_trip(self, lm_fixture, tmp_path):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        plan.save(tmp_path / "plan.json")
        back = ConversionPlan.from_json((tmp_path / "plan.json").read_text())
        assert set(back.entries) == set(plan.entries)
        site = "block0.mlp.act"
        xs = np.linspace(*plan.entries[site].domain, 33)
        np.testing.assert_array_equal(back.entries[site].poly(xs), plan.entries[site].poly(xs))


class TestConvert:
    def test_softmax_model_rejected(self):
        ds = small_dataset()
        cfg = ModelConfig(depth=1, d_model=16, context=16, vocab=ds.vocab_size, seed=1,
                          attention=AttentionConfig(kind="softmax", head_count=2))
        model = TransformerModel(cfg)
        with pytest.raises(ArchitectureError):
            convert(model, ConversionPlan({}, 0.1))

    def test_converted_passes_verification(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        poly = convert(model, plan)
        x, _ = next(ds.test_batches(1, limit=1))
        graph = trace_model(poly, x)
        result = verify_polynomial(graph)
        assert result.passed, result.to_text()

    def test_original_fails_verification(self, lm_fixture):
        ds, model, rec = lm_fixture
        x, _ = next(ds.test_batches(1, limit=1))
        graph = trace_model(model, x)
        result = verify_polynomial(graph)
        kinds = {v["kind"] for v in result.violations}
        assert not result.passed
        assert "gelu" in kinds and "power" in kinds

    def test_converted_close_to_original_in_range(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        poly = convert(model, plan)
        x, _ = next(ds.test_batches(2, limit=1))
        a = model.lm_logits(x).data
        b = poly.lm_logits(x).data
        assert np.max(np.abs(a - b)) < 1e-2

    def test_conversion_does_not_mutate_original(self, lm_fixture):
        ds, model, rec = lm_fixture
        before = [p.data.copy() for _, p in model.parameters()]
        kinds_before = [l.kind for l in model.norm_layers()]
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        convert(model, plan)
        for (name, p), b in zip(model.parameters(), before):
            np.testing.assert_array_equal(p.data, b)
        assert [l.kind for l in model.norm_layers()] == kinds_before
        assert model.blocks[0].attn.cfg.sigma_activation == "gelu"

    def test_out_of_range_probe_strict_mode(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, margin=0.0, degrees=DEGREES)
        poly = convert(model, plan)
        poly.poly_domain_mode = "strict"
        # scale the embedding so activations overshoot the recorded range
        poly.token_table.data = poly.token_table.data * 40.0
        x, _ = next(ds.test_batches(1, limit=1))
        with pytest.raises(DomainError) as exc:
            poly.lm_logits(x)
        assert exc.value.site is not None

    def test_already_polynomial_model_identity_conversion(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        poly = convert(model, plan)
        again = convert(poly, ConversionPlan({}, 0.0))
        x, _ = next(ds.test_batches(1, limit=1))
        np.testing.assert_array_equal(poly.lm_logits(x).data, again.lm_logits(x).data)

    def test_batchnorm_fold_identity(self):
        ds = small_dataset()
        model = trained_sigma_model(ds, norm_kind="batchnorm", seed=23)
        rec = recorded(model, ds)
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        poly = convert(model, plan)
        # the fold itself must be exact: compare eval-mode batchnorm layers
        x, _ = next(ds.test_batches(2, limit=1))
        from polyformer import tensor as T

        h = np.random.default_rng(0).standard_normal((2, 16, 16))
        orig_out = model.blocks[0].norm1(T.tensor(h), mode="eval").data
        poly_out = poly.blocks[0].norm1(T.tensor(h)).data
        assert np.max(np.abs(orig_out - poly_out)) < 1e-12


class TestDepthOfConvertedModel:
    def test_depth_reported_and_bootstraps_consistent(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        poly = convert(model, plan)
        x, _ = next(ds.test_batches(1, limit=1))
        graph = trace_model(poly, x)
        rep = depth_report(graph)
        assert rep.max_depth > 10
        assert (rep.bootstraps == 0) == (rep.max_depth <= rep.budget.mults_before_bootstrap)

    def test_graph_eval_matches_model_forward(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        poly = convert(model, plan)
        x, _ = next(ds.test_batches(1, limit=1))
        graph = trace_model(poly, x)
        out = graph.eval(graph_inputs_for(poly, x))
        np.testing.assert_allclose(out, poly.lm_logits(x).data, atol=1e-12)


class TestFidelity:
    def test_identical_models_zero_deviation(self, lm_fixture):
        ds, model, rec = lm_fixture
        rep = fidelity_report(model, model, ds, batches=1, batch_size=4)
        assert rep["max_output_deviation"] == 0.0
        assert rep["agreement"] == 1.0
        assert rep["metric_delta"] == 0.0

    def test_converted_fidelity_high(self, lm_fixture):
        ds, model, rec = lm_fixture
        plan = plan_conversion(model, rec.ranges, rec.variances, degrees=DEGREES)
        poly = convert(model, plan)
        rep = fidelity_report(model, poly, ds, batches=2, batch_size=4)
        assert rep["agreement"] >= 0.95
        assert rep["metric_name"] == "perplexity"

    def test_fidelity_degrades_as_domains_narrow(self, lm_fixture):
        # artificially narrow conversion domains below the recorded ranges
        ds, model, rec = lm_fixture
        devs = []
        for shrink in (1.0, 0.25, 0.05):
            ranges = {}
            for site, r in rec.ranges.items():
                mid = 0.5 * (r.min_value + r.max_value)
                half = 0.5 * (r.max_value - r.min_value) * shrink
                import dataclasses

                ranges[site] = dataclasses.replace(
                    r, min_value=mid - half, max_value=mid + half,
                    min_tensor=None, max_tensor=None,
                )
            plan = plan_conversion(model, ranges, rec.variances, margin=0.0, degrees=DEGREES)
            poly = convert(model, plan)
            rep = fidelity_report(model, poly, ds, batches=1, batch_size=4)
            devs.append(rep["max_output_deviation"])
        assert devs[0] <= devs[1] <= devs[2]
        assert devs[2] > devs[0]

    def test_out_of_range_hits_reported(self, lm_fixture):
        ds, model, rec = lm_fixture
        ranges = {}
        import dataclasses

        for site, r in rec.ranges.items():
            mid = 0.5 * (r.min_value + r.max_value)
            half = 0.25 * (r.max_value - r.min_value)
            ranges[site] = dataclasses.replace(
                r, min_value=mid - half, max_value=mid + half,
                min_tensor=None, max_tensor=None,
            )
        plan = plan_conversion(model, ranges, rec.variances, margin=0.0, degrees=DEGREES)
        poly = convert(model, plan)
        rep = fidelity_report(model, poly, ds, batches=1, batch_size=4)
        assert sum(rep["out_of_range_hits"].values()) > 0
        assert rep["in_range_fraction"] < 1.0
