import math

import numpy as np
import pytest

from idflow.errors import ConfigurationError, DimensionError, DomainError
from idflow.gradcheck import MINIMAL_CONFIG, TOLERANCE, run_gradcheck
from idflow.model import (ModelParams, ToyDiTConfig, VelocityModel, backward, forward,
                          init_params, is_id_attn, predict_velocity)
from idflow.numerics import finite_diff_grad, relative_error

CFG = MINIMAL_CONFIG


def inputs(rng, cfg=CFG, batch=None):
    lead = () if batch is None else (batch,)
    return dict(x_t=rng.standard_normal(lead + (cfg.token_count, cfg.dim)),
                c=rng.standard_normal(lead + (3, cfg.cond_dim)),
                id_tokens=rng.standard_normal(lead + (cfg.id_token_count, cfg.id_dim)))


def with_id_out(params, rng):
    return params.replace({n: rng.standard_normal(params[n].shape) for n in params.tensors
                           if n.endswith("id_attn.w_out")})


class TestConfig:
    def test_defaults(self):
        c = ToyDiTConfig()
        assert (c.token_count, c.dim, c.id_token_count, c.id_dim, c.cond_dim, c.heads, c.blocks,
                c.time_embed_dim) == (16, 32, 4, 16, 8, 4, 2, 8)
        assert c.id_blocks == (0, 1)
        assert c.block_order == ("self", "text", "id", "ffn")

    @pytest.mark.parametrize("kw", [{"dim": 30, "heads": 4}, {"blocks": 0}, {"id_blocks": (2,)},
                                    {"block_order": ("self", "text", "ffn")}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            ToyDiTConfig(**kw)

    def test_round_trip(self):
        c = ToyDiTConfig(id_blocks=(1,))
        assert ToyDiTConfig.from_dict(c.to_dict()) == c


class TestParams:
    def test_names_and_freeze_mask(self):
        p = init_params(ToyDiTConfig(), 0)
        assert set(p.freeze_mask) == set(p.tensors)
        assert set(p.trainable) == {n for n in p.tensors if is_id_attn(n)}
        for i in range(2):
            for leaf in ("w_q", "w_k", "w_v", "w_qnoise", "w_out"):
                assert f"block{i}.id_attn.{leaf}" in p.tensors
            assert f"block{i}.self.w_q" in p.tensors and f"block{i}.text.w_v" in p.tensors
            assert f"block{i}.ffn.w1" in p.tensors
        assert any(n.startswith("time_embed") for n in p.tensors)
        assert any(n.startswith("head") for n in p.tensors)

    def test_id_block_mask(self):
        p = init_params(ToyDiTConfig(id_blocks=(1,)), 0)
        assert not any(n.startswith("block0.id_attn") for n in p.tensors)
        assert "block1.id_attn.w_q" in p.tensors

    def test_bad_freeze_mask(self):
        p = init_params(CFG, 0)
        mask = dict(p.freeze_mask)
        mask.pop(next(iter(mask)))
        with pytest.raises(ConfigurationError):
            ModelParams(CFG, p.tensors, mask)

    def test_deterministic(self):
        a, b = init_params(CFG, 7), init_params(CFG, 7)
        assert all(np.array_equal(a[n], b[n]) for n in a.tensors)
        c = init_params(CFG, 8)
        assert not np.array_equal(a["head.w"], c["head.w"])

    def test_fan_in_scaling(self):
        p = init_params(ToyDiTConfig(dim=128, heads=4, ffn_mult=2), 0)
        pooled = []
        for name, arr in p.tensors.items():
            leaf = name.rsplit(".", 1)[-1]
            if arr.ndim == 2 and name not in ("time_embed.table", "pos_embed") \
                    and not name.endswith("id_attn.w_out"):
                pooled.append((arr * math.sqrt(arr.shape[0])).ravel())
        pooled = np.concatenate(pooled)
        assert pooled.size >= 10_000
        assert abs(pooled.std() - 1.0) < 0.1

    def test_zero_id_output_at_init(self):
        p = init_params(CFG, 0)
        assert all(not p[n].any() for n in p.tensors if n.endswith("id_attn.w_out"))

    def test_replace_keeps_original(self):
        p = init_params(CFG, 0)
        q = p.replace({"head.b": np.ones_like(p["head.b"])})
        assert not p["head.b"].any() and q["head.b"].all()
        with pytest.raises(ConfigurationError):
            p.replace({"nope": np.zeros(1)})


class TestForward:
    def test_null_head(self, rng):
        p = init_params(CFG, 0)
        p = p.replace({"head.w": np.zeros_like(p["head.w"]), "head.b": np.zeros_like(p["head.b"])})
        v = predict_velocity(p, t=0.3, alpha=0.5, **inputs(rng))
        assert not v.any()

    def test_alpha_and_id_tokens_inert_with_zero_out(self, rng):
        p = init_params(CFG, 0)
        x = inputs(rng)
        v0 = predict_velocity(p, t=0.3, alpha=0.0, **x)
        v1 = predict_velocity(p, t=0.3, alpha=1.0, **x)
        x2 = dict(x, id_tokens=rng.standard_normal(x["id_tokens"].shape))
        assert np.array_equal(v0, v1)
        assert np.array_equal(v0, predict_velocity(p, t=0.3, alpha=0.4, **x2))

    def test_alpha_matters_once_id_blocks_are_live(self, rng):
        p = with_id_out(init_params(CFG, 0), rng)
        x = inputs(rng)
        assert not np.array_equal(predict_velocity(p, t=0.3, alpha=0.0, **x),
                                  predict_velocity(p, t=0.3, alpha=1.0, **x))

    def test_repeatable(self, rng):
        p = with_id_out(init_params(CFG, 1), rng)
        x = inputs(rng)
        first = predict_velocity(p, t=0.42, alpha=0.3, **x)
        for _ in range(100):
            assert np.array_equal(predict_velocity(p, t=0.42, alpha=0.3, **x), first)

    def test_batched_matches_single(self, rng):
        p = with_id_out(init_params(CFG, 1), rng)
        x = inputs(rng, batch=3)
        t = np.array([0.1, 0.5, 0.9])
        alpha = 0.8 * t
        v = predict_velocity(p, x["x_t"], t, x["c"], x["id_tokens"], alpha)
        for b in range(3):
            single = predict_velocity(p, x["x_t"][b], t[b], x["c"][b], x["id_tokens"][b], alpha[b])
            np.testing.assert_allclose(v[b], single, atol=1e-13)

    def test_shape_errors(self, rng):
        p = init_params(CFG, 0)
        x = inputs(rng)
        with pytest.raises(DimensionError):
            predict_velocity(p, x["x_t"][:, :-1], 0.5, x["c"], x["id_tokens"], 0.5)
        with pytest.raises(DimensionError):
            predict_velocity(p, x["x_t"], 0.5, x["c"][:, :-1], x["id_tokens"], 0.5)
        with pytest.raises(DomainError):
            predict_velocity(p, x["x_t"], 1.5, x["c"], x["id_tokens"], 0.5)

    def test_time_embedding_interpolates(self, rng):
        p = init_params(CFG, 0)
        x = inputs(rng)
        # on-grid and off-grid times both work and the map is continuous
        a = predict_velocity(p, t=0.5, alpha=0.0, **x)
        b = predict_velocity(p, t=0.5 + 1e-9, alpha=0.0, **x)
        assert np.abs(a - b).max() < 1e-6


class TestBackward:
    def test_zero_upstream(self, rng):
        p = with_id_out(init_params(CFG, 0), rng)
        x = inputs(rng)
        _, cache = forward(p, t=0.3, alpha=0.4, **x)
        g = backward(p, cache, np.zeros((CFG.token_count, CFG.dim)))
        assert all(not v.any() for v in g.params.values())
        assert not g.x_t.any()

    def test_frozen_entries_flagged(self, rng):
        p = init_params(CFG, 0)
        _, cache = forward(p, t=0.3, alpha=0.4, **inputs(rng))
        g = backward(p, cache, rng.standard_normal((CFG.token_count, CFG.dim)))
        assert set(g.params) == set(p.tensors)
        assert g.frozen == frozenset(p.frozen)

    def test_input_gradient(self, rng):
        p = with_id_out(init_params(CFG, 2), rng)
        x = inputs(rng)
        up = rng.standard_normal((CFG.token_count, CFG.dim))
        _, cache = forward(p, t=0.6, alpha=0.48, **x)
        g = backward(p, cache, up)
        f = lambda y: float((predict_velocity(p, y, 0.6, x["c"], x["id_tokens"], 0.48) * up).sum())
        assert relative_error(g.x_t, finite_diff_grad(f, x["x_t"])) < 1e-4

    def test_noise_tokens_gradient_flows_to_x_t_only_when_shared(self, rng):
        p = with_id_out(init_params(CFG, 2), rng)
        x = inputs(rng)
        nt = rng.standard_normal(x["x_t"].shape)
        up = rng.standard_normal(x["x_t"].shape)
        _, cache = forward(p, t=0.6, alpha=0.2, noise_tokens=nt, **x)
        g = backward(p, cache, up)
        f = lambda y: float((predict_velocity(p, y, 0.6, x["c"], x["id_tokens"], 0.2, nt) * up).sum())
        assert relative_error(g.x_t, finite_diff_grad(f, x["x_t"])) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1])
    def test_parameter_gradients(self, seed):
        result = run_gradcheck(seed)
        name, err = result.worst
        assert err < TOLERANCE, (name, err)

    def test_velocity_model_vjp(self, rng):
        p = with_id_out(init_params(CFG, 4), rng)
        m = VelocityModel(p, alpha0=0.7)
        x = inputs(rng)
        up = rng.standard_normal(x["x_t"].shape)
        g = m.vjp_x(x["x_t"], 0.3, x["c"], x["id_tokens"], up)
        f = lambda y: float((m(y, 0.3, x["c"], x["id_tokens"]) * up).sum())
        assert relative_error(g, finite_diff_grad(f, x["x_t"])) < 1e-4
        assert m.alpha(0.5) == pytest.approx(0.35)
