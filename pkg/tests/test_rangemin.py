"""Range-minimization instrumentation, losses, and the training loop."""

import math

import numpy as np
import pytest

from polyformer import tensor as T
from polyformer.datasets import make_dataset
from polyformer.model import AttentionConfig, ModelConfig, Taps, TransformerModel
from polyformer.rangemin import (
    AdamW,
    ObjectiveWeights,
    RangeRecord,
    RangeRecorder,
    TrainConfig,
    VarianceRecord,
    batch_records,
    combined_objective,
    cosine_warmup_lr,
    evaluate_metric,
    loss_activation_range,
    loss_variance,
    record_ranges,
    train,
)


def tiny_model(**overrides):
    base = dict(depth=1, d_model=16, context=8, vocab=11, seed=3,
                attention=AttentionConfig(head_count=2))
    base.update(overrides)
    return TransformerModel(ModelConfig(**base))


def fake_range(site, lo, hi):
    return RangeRecord(site, "mlp_activation", lo, hi,
                       min_tensor=T.tensor(float(lo)), max_tensor=T.tensor(float(hi)))


def fake_variance(site, vmax, vmean=0.0):
    return VarianceRecord(site, vmax, vmean, max_tensor=T.tensor(float(vmax)))


class TestLosses:
    def test_zero_inputs_zero_range_loss(self):
        assert loss_activation_range([fake_range("a", 0.0, 0.0)]).item() == 0.0

    def test_max_of_absolutes(self):
        assert loss_activation_range([fake_range("a", -3.0, 2.0)]).item() == 3.0

    def test_range_loss_sums_layers(self):
        recs = [fake_range("a", -1.0, 4.0), fake_range("b", -5.0, 2.0)]
        assert loss_activation_range(recs).item() == 9.0

    def test_variance_max_within_layer(self):
        var = T.tensor(np.array([1.0, 4.0]))
        taps = Taps()
        taps.add_variance("n.var", var)
        _, vrecs = batch_records(taps)
        assert loss_variance(vrecs).item() == 4.0

    def test_variance_zero_for_constant(self):
        assert loss_variance([fake_variance("n", 0.0)]).item() == 0.0

    def test_variance_sums_layers(self):
        recs = [fake_variance("a", 2.5), fake_variance("b", 7.0)]
        assert loss_variance(recs).item() == 9.5

    def test_combined_objective_identity_when_weights_zero(self):
        orig = T.tensor(1.234)
        out = combined_objective(orig, T.tensor(999.0), T.tensor(999.0),
                                 ObjectiveWeights(0.0, 0.0))
        assert out is orig  # bit-equal: same node

    def test_combined_objective_arithmetic(self):
        out = combined_objective(T.tensor(2.0), T.tensor(3.0), T.tensor(0.0),
                                 ObjectiveWeights(1.0, 0.0))
        assert out.item() == 5.0

    def test_combined_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        data = rng.standard_normal(6)
        w = ObjectiveWeights(alpha=0.7, beta=0.3)

        def objective(t):
            orig = T.reduce("mean", T.mul(t, t))
            mx, mn = T.reduce("max", t), T.reduce("min", t)
            rng_loss = T.maximum(T.absolute(mx), T.absolute(mn))
            var = T.reduce("var", t)
            return combined_objective(orig, rng_loss, var, w)

        err = T.grad_check(objective, T.tensor(data))
        assert err < 1e-6

    def test_range_gradient_flows_only_through_extremes(self):
        x = T.tensor(np.array([0.5, -2.0, 1.0, 1.5]), requires_grad=True)
        with T.Tape() as tape:
            taps = Taps()
            taps.add_activation("s", "mlp_activation", x)
            ranges, _ = batch_records(taps)
            loss = loss_activation_range(ranges)
        T.backward(tape, loss)
        # |min| = 2 beats |max| = 1.5: gradient only at index 1
        np.testing.assert_array_equal(x.grad, [0.0, -1.0, 0.0, 0.0])

    def test_missing_tensor_rejected(self):
        with pytest.raises(ValueError):
            loss_activation_range([RangeRecord("a", "mlp_activation", -1.0, 1.0)])


class TestRecorder:
    def test_monotone_window(self):
        rec = RangeRecorder()
        rng = np.random.default_rng(1)
        prev_min, prev_max = math.inf, -math.inf
        for _ in range(5):
            taps = Taps()
            taps.add_activation("s", "mlp_activation", T.tensor(rng.standard_normal(20)))
            rec.observe(taps)
            r = rec.ranges["s"]
            assert r.min_value <= prev_min or prev_min == math.inf
            assert r.max_value >= prev_max or prev_max == -math.inf
            prev_min, prev_max = r.min_value, r.max_value

    def test_variance_running_mean(self):
        rec = RangeRecorder()
        for data in ([1.0, 1.0], [3.0, 3.0]):
            taps = Taps()
            taps.add_variance("n.var", T.tensor(np.array(data)))
            rec.observe(taps)
        assert rec.variances["n.var"].var_mean == 2.0
        assert rec.variances["n.var"].var_max == 3.0

    def test_history_csv(self, tmp_path):
        rec = RangeRecorder()
        taps = Taps()
        taps.add_activation("s", "mlp_activation", T.tensor(np.array([1.0, -2.0])))
        taps.add_variance("n.var", T.tensor(np.array([0.5])))
        rec.observe(taps)
        rec.snapshot(0)
        path = tmp_path / "history.csv"
        rec.write_history_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,layer_id,role,min,max,var_mean,var_max"
        assert len(lines) == 3

    def test_record_ranges_matches_hand_instrumented_oracle(self):
        model = tiny_model()
        rng = np.random.default_rng(2)
        x = rng.integers(0, 11, (2, 8))
        y = rng.integers(0, 11, (2, 8))
        ranges, variances = record_ranges(model, (x, y))

        # oracle: duplicate forward with explicit taps, compare extremes
        taps = Taps()
        model.lm_loss(x, y, mode="eval", taps=taps)
        by_site = {site: t for site, role, t in taps.activations}
        for r in ranges:
            want = by_site[r.layer_id].data
            assert r.min_value == want.min() and r.max_value == want.max()
        var_sites = {site: t for site, t in taps.variances}
        for v in variances:
            assert v.var_max == var_sites[v.layer_id].data.max()

    def test_zero_model_zero_ranges(self):
        model = tiny_model()
        for _, p in model.parameters():
            p.data = np.zeros_like(p.data)
        x = np.zeros((1, 8), dtype=np.int64)
        ranges, variances = record_ranges(model, (x, x))
        for r in ranges:
            assert r.min_value == 0.0 and r.max_value == 0.0
        for v in variances:
            assert v.var_max == 0.0


class TestOptimizer:
    def test_zero_lr_leaves_parameters(self):
        model = tiny_model()
        before = [p.data.copy() for _, p in model.parameters()]
        ds = make_dataset("char_lm", 0, context=8)
        # vocab must match the dataset for a real step; use a matching model
        model = TransformerModel(ModelConfig(
            depth=1, d_model=16, context=8, vocab=ds.vocab_size, seed=3,
            attention=AttentionConfig(head_count=2)))
        before = [p.data.copy() for _, p in model.parameters()]
        hp = TrainConfig(epochs=1, steps_per_epoch=3, batch_size=4, lr=0.0,
                         warmup_frac=0.0, eval_batches=1)
        train(model, ds, "baseline", hp, seed=0)
        for (name, p), b in zip(model.parameters(), before):
            np.testing.assert_array_equal(p.data, b)

    def test_adamw_decoupled_decay(self):
        p = T.Tensor(np.array([10.0]), requires_grad=True)
        p.grad = np.array([0.0])
        opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
        opt.step()
        # zero gradient: only decay acts, p -= lr * wd * p
        np.testing.assert_allclose(p.data, [10.0 - 0.1 * 0.5 * 10.0])

    def test_schedule_shape(self):
        base = 1.0
        lrs = [cosine_warmup_lr(s, base, 10, 100) for s in range(100)]
        assert lrs[0] == pytest.approx(0.1)
        assert lrs[9] == pytest.approx(1.0)
        assert max(lrs) == pytest.approx(1.0)
        assert lrs[-1] < 0.01
        assert all(a >= b - 1e-12 for a, b in zip(lrs[10:], lrs[11:]))


class TestTraining:
    def test_single_batch_overfit_loss_decreases(self):
        ds = make_dataset("char_lm", 0, context=8)
        model = TransformerModel(ModelConfig(
            depth=1, d_model=16, context=8, vocab=ds.vocab_size, seed=1,
            attention=AttentionConfig(head_count=2)))
        hp = TrainConfig(epochs=1, steps_per_epoch=20, batch_size=4, lr=3e-3,
                         warmup_frac=0.0, eval_batches=1)
        result = train(model, ds, "baseline", hp, seed=7)
        first = np.mean(result.loss_curve[:5])
        last = np.mean(result.loss_curve[-5:])
        assert last < first

    def test_range_min_requires_known_stage(self):
        ds = make_dataset("char_lm", 0, context=8)
        model = TransformerModel(ModelConfig(
            depth=1, d_model=16, context=8, vocab=ds.vocab_size, seed=1,
            attention=AttentionConfig(head_count=2)))
        with pytest.raises(ValueError):
            train(model, ds, "finetune", TrainConfig(epochs=1, steps_per_epoch=1), seed=0)

    def test_determinism(self):
        ds = make_dataset("char_lm", 0, context=8)

        def run():
            model = TransformerModel(ModelConfig(
                depth=1, d_model=16, context=8, vocab=ds.vocab_size, seed=2,
                attention=AttentionConfig(head_count=2)))
            hp = TrainConfig(epochs=1, steps_per_epoch=8, batch_size=4, lr=1e-3,
                             eval_batches=1)
            return train(model, ds, "range_min", hp, seed=3)

        a, b = run(), run()
        assert a.loss_curve == b.loss_curve
        assert a.final_metric == b.final_metric


def test_evaluate_metric_image_accuracy():
    ds = make_dataset("synth_image", 0, num_classes=2)
    model = TransformerModel(ModelConfig(
        depth=1, d_model=16, context=16, num_classes=2, patch_size=4, seed=0,
        attention=AttentionConfig(head_count=2)))
    acc, name = evaluate_metric(model, ds, batches=2, batch_size=8)
    assert name == "accuracy"
    assert 0.0 <= acc <= 1.0
