import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from idflow.data import LinearIdEncoder
from idflow.errors import ConfigurationError, DegenerateVectorError, DimensionError, DivergenceError
from idflow.flow import (SamplerConfig, estimate_x0, flow_matching_loss, forward_diffuse,
                         guided_velocity, id_guidance, id_loss, interpolate_path, sample_euler,
                         total_loss)
from idflow.gradcheck import MINIMAL_CONFIG
from idflow.model import VelocityModel, init_params
from idflow.numerics import cosine, finite_diff_grad, relative_error
from idflow.schedules import ScheduleParams, guidance_weight

SHAPE = (4, 8)


class Stub:
    """Velocity ``fn(x, t, c)``; vjp assumes the field is linear in x with matrix ``jac``."""

    def __init__(self, fn, jac=None):
        self.fn = fn
        self.jac = jac
        self.calls = []

    def __call__(self, x_t, t, c, id_tokens, noise_tokens=None):
        self.calls.append((t, None if noise_tokens is None else np.array(noise_tokens)))
        return self.fn(np.asarray(x_t), t, c)

    def vjp_x(self, x_t, t, c, id_tokens, upstream, noise_tokens=None):
        if self.jac is None:
            return np.zeros_like(upstream)
        return upstream * self.jac


def small_model(seed=0):
    rng = np.random.default_rng(seed)
    p = init_params(MINIMAL_CONFIG, seed)
    p = p.replace({n: rng.standard_normal(p[n].shape) * 0.3 for n in p.tensors
                   if n.endswith("id_attn.w_out")})
    return VelocityModel(p, alpha0=0.8)


def small_case(rng):
    cfg = MINIMAL_CONFIG
    return dict(c=rng.standard_normal((3, cfg.cond_dim)),
                id_tokens=rng.standard_normal((cfg.id_token_count, cfg.id_dim)),
                enc=LinearIdEncoder(rng.standard_normal((cfg.token_count * cfg.dim, 5))),
                e_ref=rng.standard_normal(5))


class TestPaths:
    def test_forward_diffuse_endpoints(self, rng):
        x0, eps = rng.standard_normal((2,) + SHAPE)
        assert np.array_equal(forward_diffuse(x0, eps, 0.0), x0)
        assert np.array_equal(forward_diffuse(x0, eps, 1.0), eps)
        np.testing.assert_allclose(forward_diffuse(x0, eps, 0.5), 0.5 * x0 + 0.5 * eps, atol=1e-15)

    @given(st.floats(0, 1))
    def test_forward_diffuse_affine(self, t):
        rng = np.random.default_rng(1)
        x0, eps = rng.standard_normal((2,) + SHAPE)
        ones = forward_diffuse(np.ones(SHAPE), np.ones(SHAPE), t)
        np.testing.assert_allclose(ones, 1.0, atol=1e-12)
        lin = forward_diffuse(2 * x0, 2 * eps, t)
        np.testing.assert_allclose(lin, 2 * forward_diffuse(x0, eps, t), atol=1e-12)

    def test_interpolate_path(self, rng):
        x0, x1 = rng.standard_normal((2,) + SHAPE)
        assert np.array_equal(interpolate_path(x0, x1, 0.0), x0)
        assert np.array_equal(interpolate_path(x0, x1, 1.0), x1)
        np.testing.assert_allclose(interpolate_path(x0, x1, 0.25), 0.75 * x0 + 0.25 * x1,
                                   atol=1e-15)

    def test_per_sample_times(self, rng):
        x0, x1 = rng.standard_normal((2, 3) + SHAPE)
        t = np.array([0.0, 0.5, 1.0])
        out = interpolate_path(x0, x1, t)
        for b in range(3):
            np.testing.assert_allclose(out[b], interpolate_path(x0[b], x1[b], t[b]), atol=1e-15)

    def test_shape_and_domain_errors(self):
        with pytest.raises(DimensionError):
            interpolate_path(np.zeros(3), np.zeros(4), 0.5)
        with pytest.raises(DimensionError):
            forward_diffuse(np.zeros(3), np.zeros(4), 0.5)
        with pytest.raises(ValueError):
            interpolate_path(np.zeros(3), np.zeros(3), 1.5)

    def test_estimate_x0(self, rng):
        x0, x1 = rng.standard_normal((2,) + SHAPE)
        x_t = interpolate_path(x0, x1, 0.3)
        np.testing.assert_allclose(estimate_x0(x_t, 0.3, x1 - x0), x0, atol=1e-12)
        assert np.array_equal(estimate_x0(x_t, 0.0, x1 - x0), x_t)
        assert np.array_equal(estimate_x0(x_t, 0.7, np.zeros(SHAPE)), x_t)


class TestLosses:
    def test_perfect_predictor(self, rng):
        x0, x1 = rng.standard_normal((2,) + SHAPE)
        stub = Stub(lambda x, t, c: x1 - x0)
        assert flow_matching_loss(stub, x0, x1, 0.4, None, None) == 0.0

    def test_offset_predictor(self, rng):
        x0, x1 = rng.standard_normal((2,) + SHAPE)
        u = np.full(SHAPE, 0.5)
        stub = Stub(lambda x, t, c: x1 - x0 + u)
        assert flow_matching_loss(stub, x0, x1, 0.4, None, None) == pytest.approx(0.25, abs=1e-15)

    def test_direct_formula(self, rng):
        x0, x1, w = rng.standard_normal((3,) + SHAPE)
        stub = Stub(lambda x, t, c: np.tanh(x * w) + t)
        t = 0.35
        x_t = (1 - t) * x0 + t * x1
        oracle = np.mean((np.tanh(x_t * w) + t - (x1 - x0)) ** 2)
        assert abs(flow_matching_loss(stub, x0, x1, t, None, None) - oracle) <= 1e-12

    @pytest.mark.parametrize("direction, expected", [([2.0, 0.0], 0.0), ([0.0, 3.0], 1.0),
                                                     ([-1.0, 0.0], 2.0)])
    def test_id_loss_reference(self, direction, expected):
        enc = LinearIdEncoder(np.eye(2))
        assert id_loss(np.array(direction), np.array([1.0, 0.0]), enc) == pytest.approx(expected)

    @given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
           st.lists(st.floats(-5, 5), min_size=3, max_size=3))
    def test_id_loss_range(self, a, b):
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        assert 0.0 <= id_loss(np.array(a), np.array(b), LinearIdEncoder(np.eye(3))) <= 2.0

    def test_id_loss_degenerate(self):
        with pytest.raises(DegenerateVectorError):
            id_loss(np.zeros(2), np.array([1.0, 0.0]), LinearIdEncoder(np.eye(2)))

    def test_total_loss(self):
        assert total_loss(0.7, 0.3, 0.0) == 0.7
        assert total_loss(0.2, 0.4, 0.5) == pytest.approx(0.4)
        assert total_loss(0.9, 0.0, 0.5) == 0.9

    @given(st.floats(0, 10), st.floats(0, 2), st.floats(0, 5), st.floats(0, 1))
    def test_total_loss_monotone(self, d, i, lam, bump):
        base = total_loss(d, i, lam)
        assert base >= 0
        assert total_loss(d + bump, i, lam) >= base
        assert total_loss(d, i + bump, lam) >= base


class TestGuidance:
    def test_fixed_point_gives_zero_gradient(self, rng):
        x = rng.standard_normal(SHAPE)
        enc = LinearIdEncoder(rng.standard_normal((32, 6)))
        e_ref = 3.0 * enc(x)
        g = id_guidance(x, 0.5, e_ref, Stub(lambda x, t, c: np.zeros_like(x)), enc, None, None)
        assert np.linalg.norm(g) < 1e-6

    def test_closed_form_with_model_bypass(self, rng):
        x = rng.standard_normal(SHAPE)
        E = rng.standard_normal((32, 6))
        e_ref = rng.standard_normal(6)
        y = x.ravel() @ E
        yh, eh = y / np.linalg.norm(y), e_ref / np.linalg.norm(e_ref)
        c = yh @ eh
        closed = (E @ ((eh - c * yh) / np.linalg.norm(y))).reshape(SHAPE)
        g = id_guidance(x, 0.5, e_ref, Stub(lambda x, t, c: np.zeros_like(x)),
                        LinearIdEncoder(E), None, None)
        np.testing.assert_allclose(g, closed, atol=1e-12)

    def test_matches_finite_differences_through_model(self, rng):
        model = small_model()
        case = small_case(rng)
        x = rng.standard_normal((MINIMAL_CONFIG.token_count, MINIMAL_CONFIG.dim))
        t = 0.6
        g = id_guidance(x, t, case["e_ref"], model, case["enc"], case["c"], case["id_tokens"])

        def objective(y):
            x0_hat = estimate_x0(y, t, model(y, t, case["c"], case["id_tokens"]))
            return cosine(case["enc"](x0_hat), case["e_ref"])

        assert relative_error(g, finite_diff_grad(objective, x)) < 1e-4

    def test_ascent_property(self, rng):
        model = small_model(3)
        case = small_case(rng)
        x = rng.standard_normal((MINIMAL_CONFIG.token_count, MINIMAL_CONFIG.dim))
        t = 0.4

        def objective(y):
            x0_hat = estimate_x0(y, t, model(y, t, case["c"], case["id_tokens"]))
            return cosine(case["enc"](x0_hat), case["e_ref"])

        g = id_guidance(x, t, case["e_ref"], model, case["enc"], case["c"], case["id_tokens"])
        assert objective(x + 1e-4 * g) >= objective(x) - 1e-6

    def test_cap_clips_and_warns(self, rng, caplog):
        x = rng.standard_normal(SHAPE)
        enc = LinearIdEncoder(rng.standard_normal((32, 6)) * 1e-3)
        stub = Stub(lambda x, t, c: np.zeros_like(x))
        raw = id_guidance(x, 0.5, rng.standard_normal(6), stub, enc, None, None, cap=1e9)
        with caplog.at_level(logging.WARNING, logger="idflow.flow"):
            capped = id_guidance(x, 0.5, rng.standard_normal(6), stub, enc, None, None,
                                 cap=np.linalg.norm(raw) / 10)
        assert np.linalg.norm(capped) == pytest.approx(np.linalg.norm(raw) / 10, rel=0.5)
        assert "exceeds cap" in caplog.text

    def test_batched_cap_is_per_trajectory(self, rng):
        x = rng.standard_normal((2,) + SHAPE)
        x[1] *= 1e-4  # tiny embedding norm blows up the second gradient only
        enc = LinearIdEncoder(rng.standard_normal((32, 6)))
        stub = Stub(lambda x, t, c: np.zeros_like(x))
        e = rng.standard_normal(6)
        g = id_guidance(x, 0.5, e, stub, enc, None, None, cap=50.0)
        free = id_guidance(x[0], 0.5, e, stub, enc, None, None, cap=50.0)
        np.testing.assert_allclose(g[0], free, atol=1e-12)
        assert np.linalg.norm(g[1]) == pytest.approx(50.0)


class TestSampler:
    def test_defaults(self):
        cfg = SamplerConfig()
        assert (cfg.steps, cfg.cfg_scale, cfg.guidance_scale, cfg.method) == (20, 1.0, 3.5, "euler")
        assert cfg.beta0 == 0.1

    @pytest.mark.parametrize("kw", [{"steps": 0}, {"steps": 2.5}, {"cfg_scale": -1.0},
                                    {"beta0": float("inf")}, {"method": "heun"},
                                    {"qnoise_source": "other"}])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            SamplerConfig(**kw)

    def test_unguided_reduces_to_plain_euler(self, rng):
        model = small_model()
        case = small_case(rng)
        x1 = rng.standard_normal((MINIMAL_CONFIG.token_count, MINIMAL_CONFIG.dim))
        got = sample_euler(model, x1, case["c"], case["id_tokens"], case["e_ref"],
                           SamplerConfig(steps=7, beta0=0.0), id_encoder=case["enc"])
        x = x1.copy()
        for k in range(7):
            t = 1.0 - k / 7
            x = x - (1.0 / 7) * model(x, t, case["c"], case["id_tokens"])
        assert np.array_equal(got, x)

    def test_single_step(self, rng):
        f = lambda x, t, c: np.sin(x) * t
        x1 = rng.standard_normal(SHAPE)
        got = sample_euler(Stub(f), x1, None, None, None, SamplerConfig(steps=1, beta0=0.0))
        assert np.array_equal(got, x1 - f(x1, 1.0, None))

    def test_first_order_on_linear_ode(self):
        x1 = np.array([[1.0, -2.0]])
        errs = []
        for steps in (10, 20, 40, 80):
            x = sample_euler(Stub(lambda x, t, c: -x), x1, None, None, None,
                             SamplerConfig(steps=steps, beta0=0.0))
            errs.append(np.abs(x - x1 * math.e).max())
        ratios = [errs[i] / errs[i + 1] for i in range(3)]
        assert all(1.7 <= r <= 2.3 for r in ratios), ratios

    def test_guided_step_uses_beta_schedule(self, rng):
        x1 = rng.standard_normal(SHAPE)
        E = rng.standard_normal((32, 6))
        e_ref = rng.standard_normal(6)
        enc = LinearIdEncoder(E)
        stub = Stub(lambda x, t, c: 0.1 * x, jac=0.1)
        cfg = SamplerConfig(steps=2, beta0=0.5)
        got = sample_euler(stub, x1, None, None, e_ref, cfg, id_encoder=enc)
        x = x1.copy()
        for k in range(2):
            t = 1.0 - k / 2
            g = id_guidance(x, t, e_ref, stub, enc, None, None)
            beta = guidance_weight(k / 2, ScheduleParams(beta0=0.5))
            x = x - 0.5 * (0.1 * x) + 0.5 * beta * g
        np.testing.assert_allclose(got, x, atol=1e-14)

    def test_guidance_requires_encoder(self, rng):
        with pytest.raises(ConfigurationError):
            sample_euler(Stub(lambda x, t, c: x), rng.standard_normal(SHAPE), None, None,
                         np.ones(6), SamplerConfig(beta0=0.1))

    def test_cfg_mixing(self, rng):
        f = lambda x, t, c: x * (1.0 if c is None else float(np.sum(c)))
        stub = Stub(f)
        x = rng.standard_normal(SHAPE)
        c = np.full((2, 2), 0.5)
        cfg = SamplerConfig(cfg_scale=3.0)
        v = guided_velocity(stub, x, 0.5, c, None, cfg, null_c=np.zeros((2, 2)))
        np.testing.assert_allclose(v, 0.0 * x + 3.0 * (2.0 * x - 0.0 * x))
        assert np.array_equal(guided_velocity(stub, x, 0.5, c, None, SamplerConfig()), f(x, 0.5, c))

    def test_divergence_reports_step(self, rng):
        stub = Stub(lambda x, t, c: x * (1e308 if t < 0.7 else 1.0))
        with pytest.raises(DivergenceError) as info, np.errstate(over="ignore", invalid="ignore"):
            sample_euler(stub, rng.standard_normal(SHAPE), None, None, None,
                         SamplerConfig(steps=10, beta0=0.0))
        assert info.value.step is not None and info.value.step >= 3

    def test_qnoise_source(self, rng):
        x1 = rng.standard_normal(SHAPE)
        stub = Stub(lambda x, t, c: x)
        sample_euler(stub, x1, None, None, None, SamplerConfig(steps=3, beta0=0.0))
        assert all(nt is None for _, nt in stub.calls)
        stub = Stub(lambda x, t, c: x)
        sample_euler(stub, x1, None, None, None,
                     SamplerConfig(steps=3, beta0=0.0, qnoise_source="initial"))
        assert all(np.array_equal(nt, x1) for _, nt in stub.calls)

    def test_time_grid(self, rng):
        stub = Stub(lambda x, t, c: x)
        sample_euler(stub, rng.standard_normal(SHAPE), None, None, None,
                     SamplerConfig(steps=4, beta0=0.0))
        assert [t for t, _ in stub.calls] == [1.0, 0.75, 0.5, 0.25]

    def test_does_not_mutate_noise(self, rng):
        x1 = rng.standard_normal(SHAPE)
        keep = x1.copy()
        sample_euler(Stub(lambda x, t, c: x), x1, None, None, None, SamplerConfig(beta0=0.0))
        assert np.array_equal(x1, keep)
