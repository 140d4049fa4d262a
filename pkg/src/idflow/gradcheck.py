"""Analytic-vs-finite-difference check of the joint training loss.

Builds a minimal two-block model, evaluates ``L_total`` and its hand-derived
gradients, and compares every parameter tensor (and the noisy input) with
central differences.
"""

from dataclasses import dataclass

import numpy as np

from .data import LinearIdEncoder
from .flow import interpolate_path
from .model import ModelParams, ToyDiTConfig, backward, forward, init_params
from .numerics import finite_diff_grad, relative_error
from .training import batch_losses

TOLERANCE = 1e-4

MINIMAL_CONFIG = ToyDiTConfig(
    token_count=4, dim=8, id_token_count=2, id_dim=4, cond_dim=4, heads=2, blocks=2,
    time_embed_dim=4, time_grid=4, ffn_mult=2,
)


@dataclass(frozen=True)
class GradcheckResult:
    seed: int
    errors: dict

    @property
    def worst(self):
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self):
        return self.worst[1] < TOLERANCE


def _problem(seed, config):
    rng = np.random.default_rng([seed, 0x6C])
    params = init_params(config, seed)
    # ID output projections start at zero; perturb them so every path carries gradient
    params = params.replace({
        n: rng.standard_normal(params[n].shape) * 0.3
        for n in params.tensors if n.endswith("id_attn.w_out")
    })
    B, n, d = 2, config.token_count, config.dim
    emb = 6
    case = dict(
        x0=rng.standard_normal((B, n, d)),
        x1=rng.standard_normal((B, n, d)),
        t=rng.uniform(0.2, 0.8, size=B),
        c=rng.standard_normal((B, 3, config.cond_dim)),
        id_tok=rng.standard_normal((B, config.id_token_count, config.id_dim)),
        e_ref=rng.standard_normal((B, emb)),
        encoder=LinearIdEncoder(rng.standard_normal((n * d, emb)) / np.sqrt(n * d)),
    )
    return params, case


def _loss(params, case, lambda_id, alpha0, need_grad):
    return batch_losses(params, case["x0"], case["x1"], case["t"], case["c"], case["id_tok"],
                        case["e_ref"], lambda_id, alpha0, encoder=case["encoder"],
                        need_grad=need_grad)


def run_gradcheck(seed=0, config=MINIMAL_CONFIG, lambda_id=0.5, alpha0=0.8, h=1e-5, fault=None):
    """Relative error per tensor for one seed.

    ``fault`` names a tensor whose analytic gradient is deliberately scaled
    by 1.1 before comparison; used to prove the check catches errors.
    """
    params, case = _problem(seed, config)
    grads = _loss(params, case, lambda_id, alpha0, True)[3]
    analytic = dict(grads.params)
    if fault is not None:
        if fault not in analytic:
            raise KeyError(f"unknown tensor {fault!r}")
        analytic[fault] = analytic[fault] * 1.1
    errors = {}
    for name in sorted(params.tensors):
        def f(value, name=name):
            tensors = dict(params.tensors)
            tensors[name] = value
            return _loss(ModelParams(config, tensors, params.freeze_mask), case,
                         lambda_id, alpha0, False)[2]
        errors[name] = relative_error(analytic[name], finite_diff_grad(f, params[name], h))

    errors.update(_input_errors(params, case, alpha0, h))
    return GradcheckResult(seed, errors)


def _input_errors(params, case, alpha0, h):
    """Model input gradients (x_t, prompt, ID tokens) against a random upstream."""
    rng = np.random.default_rng(0x1F)
    t = case["t"]
    x_t = interpolate_path(case["x0"], case["x1"], t)
    alpha = alpha0 * t
    inputs = {"x_t": x_t, "c": case["c"], "id_tokens": case["id_tok"]}
    v, cache = forward(params, x_t, t, case["c"], case["id_tok"], alpha)
    up = rng.standard_normal(v.shape)
    g = backward(params, cache, up)
    out = {}
    for key in inputs:
        def f(value, key=key):
            args = dict(inputs, **{key: value})
            y = forward(params, args["x_t"], t, args["c"], args["id_tokens"], alpha)[0]
            return float((y * up).sum())
        out[f"<input {key}>"] = relative_error(getattr(g, key), finite_diff_grad(f, inputs[key], h))
    return out


def gradcheck_suite(seeds, **kw):
    return [run_gradcheck(s, **kw) for s in seeds]
