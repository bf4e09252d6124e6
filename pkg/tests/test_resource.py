"""Resource models, the barrier loss, the target schedule and latency fitting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dms import autodiff as ad
from dms.network import build_supernet, count_discrete_resource, export_pruned
from dms.resource import (DEFAULT_LATENCY_COEF, LatencyFit, LatencySample, LatencyTable, ResourceModel,
                          current_consumption, discrete_consumption, fit_latency_model, fit_layer,
                          read_latency_table, resource_loss, supernet_consumption, synthesize_latency_table,
                          target_schedule, write_latency_table)

LONE = {"input_dim": 100, "input_search": {}, "layers": [{"kind": "linear", "out": 200, "search": {}}]}

RESIDUAL = {"input_dim": 6, "input_search": {}, "layers": [
    {"kind": "linear", "out": 8, "act": "none", "search": {}},
    {"kind": "stage", "blocks": 3, "hidden": 10, "depth": {}, "hidden_search": {}},
    {"kind": "linear", "out": 2, "act": "none"}]}

TRANSFORMER = {"input_dim": 5, "seq_len": 4, "layers": [
    {"kind": "linear", "out": 8, "search": {}},
    {"kind": "stage", "blocks": 2, "block": "transformer", "hidden": 6, "heads": 3, "head_dim": 4,
     "depth": {}, "hidden_search": {}, "head_search": {}, "qk_search": {}, "v_search": {}},
    {"kind": "meanpool"},
    {"kind": "linear", "out": 3, "act": "none"}]}


def randomize(model, seed):
    rng = np.random.default_rng(seed)
    for op in model.ops.values():
        op.importance = rng.random(op.units)
        op.set_ratio(rng.uniform(0, op.a_max))


class TestConsumption:
    def test_lone_linear_full_cost(self):
        model = build_supernet(LONE)
        assert current_consumption(model, ResourceModel("macs")).item() == 20_000

    def test_pruned_input_removes_the_layer(self):
        model = build_supernet(LONE)
        model.ops["input"].set_ratio(1.0)
        assert current_consumption(model, ResourceModel("macs")).item() == 0.0

    def test_gradient_by_hand(self):
        model = build_supernet(LONE)
        model.ops["input"].set_ratio(0.3)
        model.ops["layers.0"].set_ratio(0.6)
        r_c = current_consumption(model, ResourceModel("macs"))
        np.testing.assert_allclose(r_c.item(), 0.7 * 100 * 0.4 * 200)
        ad.backward(r_c)
        np.testing.assert_allclose(model.ops["input"].a.grad, [-100 * 0.4 * 200])
        np.testing.assert_allclose(model.ops["layers.0"].a.grad, [-0.7 * 100 * 200])

    @pytest.mark.parametrize("kind", ["macs", "params"])
    @pytest.mark.parametrize("spec", [LONE, RESIDUAL, TRANSFORMER], ids=["lone", "residual", "transformer"])
    def test_zero_ratio_equals_supernet_count(self, spec, kind):
        model = build_supernet(spec)
        rm = ResourceModel(kind)
        desc, _ = export_pruned(model)
        assert current_consumption(model, rm).item() == pytest.approx(supernet_consumption(model, rm), rel=1e-12)
        assert supernet_consumption(model, rm) == pytest.approx(count_discrete_resource(desc, kind), rel=1e-12)

    @pytest.mark.parametrize("kind", ["macs", "params"])
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_discrete_formula_matches_exact_count(self, kind, seed):
        model = build_supernet(TRANSFORMER)
        randomize(model, seed)
        desc, _ = export_pruned(model)
        assert discrete_consumption(desc, ResourceModel(kind)) == pytest.approx(
            count_discrete_resource(desc, kind), rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_monotone_pressure(self, seed):
        """Consumption never increases with any pruning ratio."""
        model = build_supernet(RESIDUAL)
        randomize(model, seed)
        ad.backward(current_consumption(model, ResourceModel("macs")))
        for op in model.ops.values():
            assert op.a.grad[0] <= 0.0

    def test_latency_needs_fits(self):
        with pytest.raises(ValueError):
            current_consumption(build_supernet(LONE), ResourceModel("latency"))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ResourceModel("energy")


class TestResourceLoss:
    def test_at_target(self):
        assert resource_loss(ad.Tensor([5.0]), 5.0).item() == 0.0

    def test_natural_log(self):
        assert resource_loss(ad.Tensor([math.e * 3.0]), 3.0).item() == pytest.approx(1.0)

    def test_below_target_has_no_gradient(self):
        r_c = ad.Tensor([2.0], requires_grad=True)
        loss = resource_loss(r_c, 3.0)
        assert loss.item() == 0.0
        assert not loss.requires_grad

    def test_gradient_above_target(self):
        r_c = ad.Tensor([6.0], requires_grad=True)
        ad.backward(resource_loss(r_c, 3.0))
        np.testing.assert_allclose(r_c.grad, [1 / 6.0])

    @pytest.mark.parametrize("r_c,r_t", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_nonpositive_rejected(self, r_c, r_t):
        with pytest.raises(ValueError):
            resource_loss(ad.Tensor([r_c]), r_t)


class TestTargetSchedule:
    def test_endpoints_exact(self):
        assert target_schedule(0, 9, 0.25, 1.0) == 1.0
        assert target_schedule(9, 9, 123.0, 1000.0) == 123.0

    def test_midpoint(self):
        assert target_schedule(5, 10, 25.0, 100.0) == pytest.approx(50.0, rel=1e-15)

    def test_degenerate_rejected(self):
        with pytest.raises(ValueError):
            target_schedule(1, 10, 100.0, 100.0)

    @given(st.integers(1, 200), st.floats(0.01, 0.99), st.floats(1.0, 1e9))
    def test_monotone_and_bounded(self, epochs, ratio, r_super):
        trace = [target_schedule(e, epochs, ratio * r_super, r_super) for e in range(epochs + 1)]
        assert trace[0] == r_super and trace[-1] == ratio * r_super
        assert all(a > b for a, b in zip(trace, trace[1:]))

    @given(st.integers(1, 200), st.floats(0.01, 0.99))
    def test_closed_form(self, epochs, ratio):
        for e in range(epochs + 1):
            expected = ratio ** (e / epochs)
            assert target_schedule(e, epochs, ratio, 1.0) == pytest.approx(expected, rel=1e-12)


def quadratic_table(coef, n=30, seed=0, noise=0.0, base=1e-3):
    rng = np.random.default_rng(seed)
    a_in = np.concatenate([[0.0], rng.uniform(0, 1, n - 1)])
    a_out = np.concatenate([[0.0], rng.uniform(0, 1, n - 1)])
    x = np.stack([np.ones(n), a_in, a_out, a_in ** 2, a_in * a_out, a_out ** 2], axis=1)
    lat = base * (x @ coef) * (1 + noise * rng.standard_normal(n))
    return [LatencySample("l", float(i), float(o), float(v)) for i, o, v in zip(a_in, a_out, lat)]


class TestLatencyFit:
    def test_exact_recovery(self):
        coef = np.array([1.0, -0.5, -0.3, 0.1, 0.2, -0.05])
        fit = fit_layer(quadratic_table(coef))
        np.testing.assert_allclose(fit.coef, coef, atol=1e-8)
        assert fit.latency_max == pytest.approx(1e-3)
        assert fit.r2 == pytest.approx(1.0, abs=1e-12)

    def test_noisy_fit_r2(self):
        """Multiplicative 1% noise keeps R^2 above 0.95 in every one of 20 seeds."""
        r2 = [fit_layer(quadratic_table(DEFAULT_LATENCY_COEF, n=24, seed=s, noise=0.01)).r2 for s in range(20)]
        assert min(r2) > 0.95

    def test_constant_table(self):
        fit = fit_layer(quadratic_table(np.array([1.0, 0, 0, 0, 0, 0])))
        np.testing.assert_allclose(fit.coef, [1, 0, 0, 0, 0, 0], atol=1e-9)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 6"):
            fit_layer(quadratic_table(DEFAULT_LATENCY_COEF, n=5))

    def test_rank_deficient(self):
        samples = [LatencySample("l", t, t, 1.0 + t) for t in np.linspace(0, 1, 10)]
        with pytest.raises(ValueError, match="rank"):
            fit_layer(samples)

    def test_nonpositive_latency(self):
        samples = quadratic_table(DEFAULT_LATENCY_COEF)
        samples[3] = LatencySample("l", 0.5, 0.5, 0.0)
        with pytest.raises(ValueError, match="positive"):
            fit_layer(samples)

    def test_fit_serialization(self):
        fit = fit_layer(quadratic_table(DEFAULT_LATENCY_COEF))
        back = LatencyFit.from_dict(fit.to_dict())
        np.testing.assert_array_equal(back.coef, fit.coef)
        assert back.ratio(0.3, 0.6) == fit.ratio(0.3, 0.6)

    def test_table_round_trip(self, tmp_path):
        table = synthesize_latency_table(build_supernet(RESIDUAL), seed=4)
        write_latency_table(tmp_path / "t.csv", table)
        assert read_latency_table(tmp_path / "t.csv") == table

    def test_table_bad_header(self, tmp_path):
        (tmp_path / "t.csv").write_text("layer,a,b,c\nx,0,0,1\n")
        with pytest.raises(ValueError, match="header"):
            read_latency_table(tmp_path / "t.csv")

    def test_table_bad_number(self, tmp_path):
        (tmp_path / "t.csv").write_text("layer_id,a_in,a_out,latency_seconds\nx,0,zero,1\n")
        with pytest.raises(ValueError, match=":2:"):
            read_latency_table(tmp_path / "t.csv")

    def test_latency_consumption_at_full_size(self):
        model = build_supernet(RESIDUAL)
        fits = fit_latency_model(synthesize_latency_table(model, noise=0.0))
        rm = ResourceModel("latency", fits)
        expected = sum(f.latency_max * f.ratio(0.0, 0.0) for f in fits.values())
        assert current_consumption(model, rm).item() == pytest.approx(expected, rel=1e-12)
        assert len(fits) == len([t for t in model.terms() if t.kind == "linear"])

    def test_latency_consumption_is_differentiable(self):
        model = build_supernet(RESIDUAL)
        randomize(model, 1)
        rm = ResourceModel("latency", fit_latency_model(synthesize_latency_table(model, noise=0.0)))
        names = list(model.ops)

        def f(vec):
            saved = {n: model.ops[n].a for n in names}
            try:
                for i, n in enumerate(names):
                    model.ops[n].a = ad.slice_(vec, slice(i, i + 1))
                return current_consumption(model, rm)
            finally:
                for n in names:
                    model.ops[n].a = saved[n]

        a0 = np.array([model.ops[n].ratio for n in names])
        assert ad.grad_check(lambda v: ad.scale(f(v), 1e4), a0) < 1e-6


class TestLatencyTable:
    def test_layers_and_lookup(self):
        table = LatencyTable([LatencySample("b", 0, 0, 1.0), LatencySample("a", 0, 0, 2.0),
                              LatencySample("b", 0.5, 0, 0.5)])
        assert table.layers() == ["a", "b"]
        assert len(table.for_layer("b")) == 2
