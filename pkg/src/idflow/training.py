"""Joint flow/ID-loss training of the ID-integration weights, variants and fusion.

``pretrain_base`` first fits the non-ID tensors on identity-free data as a
stand-in for a pre-trained backbone.  Fine-tuning then updates only the
parameters left unfrozen by the freeze mask (the ``*.id_attn.*`` tensors).
"""

import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import data as D
from . import io
from .errors import ConfigurationError, DivergenceError, FormatError, FusionError
from .flow import SamplerConfig, estimate_x0, interpolate_path, sample_euler
from .id_attention import FusionSpec, fuse_weights
from .model import ModelParams, ToyDiTConfig, VelocityModel, backward, forward, is_id_attn
from .schedules import ScheduleParams, id_strength_progress, lr_cosine, progress_from_flow_time

log = logging.getLogger(__name__)

VARIANT_PRESETS = {
    "A": {"lambda_id": 1.0},
    "B": {"lambda_id": 0.25, "alpha0": 0.4},
}


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 16
    lambda_id: float = 0.5
    alpha0: float = 0.8
    T: int = 20
    lr0: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    variant_tag: str = ""

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigurationError("total_steps and batch_size must be positive")
        if self.lambda_id < 0 or self.weight_decay < 0:
            raise ConfigurationError("lambda_id and weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("invalid AdamW hyper-parameters")
        self.schedule  # validates alpha0 / T / lr range

    @property
    def schedule(self):
        return ScheduleParams(alpha0=self.alpha0, T=self.T, lambda_id=self.lambda_id,
                              lr0=self.lr0, lr_min=self.lr_min)

    @classmethod
    def preset(cls, tag, **overrides):
        if tag not in VARIANT_PRESETS:
            raise ConfigurationError(f"unknown variant {tag!r}; known: {sorted(VARIANT_PRESETS)}")
        kw = dict(VARIANT_PRESETS[tag])
        kw.update(overrides)
        kw["variant_tag"] = tag
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LossRecord:
    step: int
    l_diff: float
    l_id: float
    l_total: float
    lr: float


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params):
        names = params.trainable
        return cls(m={n: np.zeros_like(params[n]) for n in names},
                   v={n: np.zeros_like(params[n]) for n in names})


def adamw_update(param, grad, state, lr, hyper):
    """One bias-corrected AdamW step with decoupled weight decay.

    ``state`` is ``(m, v, t)`` with ``t`` the number of updates already taken;
    returns the new parameter and ``(m, v, t + 1)``.
    """
    beta1, beta2, eps, wd = hyper
    m, v, t = state
    if grad.shape != param.shape:
        from .errors import DimensionError
        raise DimensionError(f"adamw_update: grad {grad.shape} vs param {param.shape}")
    t = t + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = param - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * param)
    return new, (m, v, t)


def batch_losses(params, x0, x1, t, c, id_tok, e_ref, lambda_id, alpha0, encoder=None,
                 need_grad=True):
    """Mean joint loss over a batch and, optionally, its gradients.

    Returns ``(l_diff, l_id, l_total, grads)``; ``grads`` is ``None`` when
    ``need_grad`` is false.
    """
    encoder = D.id_encoder() if encoder is None else encoder
    B = x0.shape[0]
    x_t = interpolate_path(x0, x1, t)
    alpha = np.array([id_strength_progress(progress_from_flow_time(ti),
                                           ScheduleParams(alpha0=alpha0)) for ti in t])
    v, cache = forward(params, x_t, t, c, id_tok, alpha)
    resid = v - (x1 - x0)
    per_diff = (resid * resid).reshape(B, -1).mean(axis=1)
    x0_hat = estimate_x0(x_t, t, v)
    cos, g_hat = encoder.cosine_and_grad(x0_hat, e_ref)
    per_id = 1.0 - cos
    l_diff = float(per_diff.mean())
    l_id = float(per_id.mean())
    l_total = l_diff + lambda_id * l_id
    if not need_grad:
        return l_diff, l_id, l_total, None
    n = resid[0].size
    dv = (2.0 / (n * B)) * resid
    dv += (lambda_id / B) * t[:, None, None] * g_hat
    return l_diff, l_id, l_total, backward(params, cache, dv)


def _check_finite(values, step, batch_idx):
    for name, val in values.items():
        if not math.isfinite(val):
            raise DivergenceError(
                f"{name} is non-finite at step {step} (batch samples {list(batch_idx)})",
                step=step, sample=list(batch_idx),
            )


def train_step(params, opt, batch, cfg, step, rng):
    """One AdamW step on the joint loss; frozen tensors are passed through untouched.

    ``batch`` is a dict of stacked arrays ``x0, c, id_tokens, e_ref`` (plus
    ``index`` for error reports).  ``rng`` draws the time steps and noise.
    """
    x0 = batch["x0"]
    B = x0.shape[0]
    t = rng.uniform(0.0, 1.0, size=B)
    x1 = rng.standard_normal(x0.shape)
    l_diff, l_id, l_total, grads = batch_losses(
        params, x0, x1, t, batch["c"], batch["id_tokens"], batch["e_ref"],
        cfg.lambda_id, cfg.alpha0,
    )
    lr = lr_cosine(step, cfg.total_steps, cfg.schedule)
    _check_finite({"l_diff": l_diff, "l_id": l_id}, step, batch.get("index", range(B)))
    hyper = (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    updates, m, v = {}, dict(opt.m), dict(opt.v)
    for name in params.trainable:
        new, (m[name], v[name], _) = adamw_update(
            params[name], grads.params[name], (opt.m[name], opt.v[name], opt.step), lr, hyper
        )
        updates[name] = new
    return (params.replace(updates), OptimizerState(m, v, opt.step + 1),
            LossRecord(step, l_diff, l_id, l_total, lr))


def make_batch(dataset, idx):
    ident = dataset.identity[idx]
    e_ref = dataset.e_ref[ident]
    return {"x0": dataset.x0[idx], "c": dataset.c[idx], "e_ref": e_ref,
            "id_tokens": D.id_tokens(e_ref), "index": idx}


def probe_losses(params, dataset, lambda_id, alpha0, split="val", times=8, seed=12345):
    """Deterministic loss estimate on a fixed grid of times and a fixed noise draw."""
    idx = dataset.split_indices(split)
    rng = np.random.default_rng(seed)
    batch = make_batch(dataset, idx)
    ts = (np.arange(times) + 0.5) / times
    out = np.zeros(3)
    for t in ts:
        x1 = rng.standard_normal(batch["x0"].shape)
        tt = np.full(len(idx), t)
        out += batch_losses(params, batch["x0"], x1, tt, batch["c"], batch["id_tokens"],
                            batch["e_ref"], lambda_id, alpha0, need_grad=False)[:3]
    l_diff, l_id, l_total = out / times
    return {"l_diff": l_diff, "l_id": l_id, "l_total": l_total}


def _train_loop(params, dataset, cfg, rng, callback=None):
    train_idx = dataset.split_indices("train")
    opt = OptimizerState.for_params(params)
    history = []
    for step in range(cfg.total_steps):
        idx = np.sort(rng.choice(train_idx, size=cfg.batch_size, replace=False))
        params, opt, rec = train_step(params, opt, make_batch(dataset, idx), cfg, step, rng)
        history.append(rec)
        if callback is not None:
            callback(rec)
    return params, history


def base_corpus(size=2048, seed=0):
    """Identity-free data for fitting the base model: ``G(0, z_attr)`` with prompts."""
    rng = np.random.default_rng([seed, 0xC0])
    z_attr = rng.standard_normal((size, D.ATTR_LATENT))
    x0 = D.generate(np.zeros((size, D.ID_LATENT)), z_attr)
    return x0, D.encode_prompt(z_attr)


def pretrain_base(params, steps=1000, seed=0, lr0=2e-3, batch_size=16, corpus_size=2048):
    """Fit every non-ID tensor by flow matching on the identity-free corpus.

    Toy stand-in for a pre-trained text-to-image backbone: it learns to
    denoise and follow prompts but has never seen a specific identity.  The
    ID blocks must be inert (zero ``w_out``) and are left untouched.
    """
    for name in params.tensors:
        if name.endswith("id_attn.w_out") and np.any(params[name]):
            raise ConfigurationError("pretrain_base expects inert ID blocks (zero w_out)")
    x0_all, c_all = base_corpus(corpus_size, seed)
    names = [n for n in params.tensors if not is_id_attn(n)]
    P = dict(params.tensors)
    m = {n: np.zeros_like(P[n]) for n in names}
    v = {n: np.zeros_like(P[n]) for n in names}
    sched = ScheduleParams(lr0=lr0)
    rng = np.random.default_rng([seed, 0xBA5E])
    id_tok = np.zeros((batch_size, params.config.id_token_count, params.config.id_dim))
    for step in range(steps):
        idx = np.sort(rng.choice(corpus_size, size=batch_size, replace=False))
        x0 = x0_all[idx]
        t = rng.uniform(0.0, 1.0, size=batch_size)
        x1 = rng.standard_normal(x0.shape)
        work = ModelParams(params.config, P, params.freeze_mask)
        vel, cache = forward(work, interpolate_path(x0, x1, t), t, c_all[idx], id_tok, 0.0)
        resid = vel - (x1 - x0)
        if not np.all(np.isfinite(resid)):
            raise DivergenceError(f"base fitting diverged at step {step}", step=step)
        grads = backward(work, cache, (2.0 / resid.size) * resid).params
        lr = lr_cosine(step, steps, sched)
        for n in names:
            P[n], (m[n], v[n], _) = adamw_update(P[n], grads[n], (m[n], v[n], step), lr,
                                                 (0.9, 0.999, 1e-8, 0.0))
    return ModelParams(params.config, P, {n: not is_id_attn(n) for n in P})


# -- checkpoints -----------------------------------------------------------

CHECKPOINT_KIND = "checkpoint"


@dataclass
class Checkpoint:
    params: ModelParams
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def variant_tag(self):
        return self.meta.get("train", {}).get("variant_tag", "")

    def save(self, path):
        meta = dict(self.meta)
        meta["model"] = self.params.config.to_dict()
        meta["freeze_mask"] = {n: bool(f) for n, f in self.params.freeze_mask.items()}
        io.save(path, CHECKPOINT_KIND, meta, self.params.tensors)

    @classmethod
    def load(cls, path):
        header, tensors = io.load(path, kind=CHECKPOINT_KIND)
        meta = header["meta"]
        cfg = ToyDiTConfig.from_dict(meta["model"])
        params = ModelParams(cfg, tensors, {n: bool(f) for n, f in meta["freeze_mask"].items()})
        return cls(params, meta)


def tensor_digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def train_variant(dataset, base, cfg, callback=None):
    """Full fine-tuning run of the ID weights starting from ``base``."""
    rng = np.random.default_rng(cfg.seed)
    before = probe_losses(base, dataset, cfg.lambda_id, cfg.alpha0)
    params, history = _train_loop(base, dataset, cfg, rng, callback)
    after = probe_losses(params, dataset, cfg.lambda_id, cfg.alpha0)
    meta = {
        "train": cfg.to_dict(),
        "schedule": cfg.schedule.to_dict(),
        "dataset": dataset.summary(),
        "rng": {"generator": "numpy.PCG64", "seed": cfg.seed},
        "probe_initial": before,
        "probe_final": after,
        "history_tail": asdict(history[-1]) if history else None,
        "frozen_digest": {n: tensor_digest(base[n]) for n in base.frozen},
    }
    return Checkpoint(params, meta, history)


def write_losses_csv(path, history):
    lines = ["step,l_diff,l_id,l_total,lr"]
    for r in history:
        lines.append(f"{r.step},{r.l_diff!r},{r.l_id!r},{r.l_total!r},{r.lr!r}")
    io.write_atomic(path, ("\n".join(lines) + "\n").encode())


# -- validation sampling and fusion search ---------------------------------

def validation_requests(dataset, prompts_per_id=4):
    """(identity, sample index) pairs: the first few validation prompts of each identity."""
    val = dataset.split_indices("val")
    out = []
    for ident in range(dataset.num_ids):
        rows = val[dataset.identity[val] == ident][:prompts_per_id]
        out.extend((ident, int(j)) for j in rows)
    if not out:
        raise ValueError("validation split is empty")
    return out


def generate_for_requests(params, dataset, requests, sampler, alpha0, seed=777):
    """Run the sampler for ``(identity, sample_index)`` requests; returns eval pairs."""
    ident = np.array([i for i, _ in requests])
    rows = np.array([j for _, j in requests])
    e_ref = dataset.e_ref[ident]
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((len(requests), D.TOKENS, D.WIDTH))
    model = VelocityModel(params, alpha0)
    null_c = np.broadcast_to(D.null_prompt(), dataset.c[rows].shape)
    gens = sample_euler(model, x1, dataset.c[rows], D.id_tokens(e_ref), e_ref, sampler,
                        id_encoder=D.id_encoder(), null_c=null_c)
    return [(D.GenerationRequest(int(i), dataset.z_attr[j]), g)
            for i, j, g in zip(ident, rows, gens)]


def validation_metrics(params, dataset, sampler=None, alpha0=0.8, prompts_per_id=4, seed=777):
    sampler = SamplerConfig() if sampler is None else sampler
    reqs = validation_requests(dataset, prompts_per_id)
    return D.eval_metrics(generate_for_requests(params, dataset, reqs, sampler, alpha0, seed),
                          dataset)


def harmonic_score(facesim, editdiv_norm):
    f = max(facesim, 0.0)
    e = max(editdiv_norm, 0.0)
    return 0.0 if f + e == 0 else 2.0 * f * e / (f + e)


def score_candidates(reports):
    """Harmonic mean of facesim and min-max normalized editdiv across candidates."""
    ed = np.array([r.editdiv for r in reports])
    lo, hi = ed.min(), ed.max()
    norm = np.ones_like(ed) if hi == lo else (ed - lo) / (hi - lo)
    return [harmonic_score(r.facesim, e) for r, e in zip(reports, norm)]


def simplex_grid(n, grid_step):
    """Convex coefficient vectors on a grid, in lexicographically descending order."""
    k = round(1.0 / grid_step)
    if k < 1 or abs(k * grid_step - 1.0) > 1e-9:
        raise ConfigurationError(f"grid_step {grid_step} must divide 1 evenly")
    out = []
    for combo in itertools.product(range(k, -1, -1), repeat=n - 1):
        if sum(combo) <= k:
            out.append(tuple(c / k for c in combo) + ((k - sum(combo)) / k,))
    return out


def fuse_params(variants, spec):
    """Fuse the ID weights of full checkpoints; all other tensors must be identical."""
    base = variants[0].params
    for i, ck in enumerate(variants[1:], start=1):
        p = ck.params
        if p.config != base.config or set(p.tensors) != set(base.tensors):
            raise FusionError(f"variant {i} has a different model layout")
        for name in base.frozen:
            if not np.array_equal(p[name], base[name]):
                raise FusionError(f"variant {i} differs from variant 0 in frozen tensor {name}")
    updates = {}
    for b in base.config.id_blocks:
        fused = fuse_weights([ck.params.id_attn(b) for ck in variants], spec)
        updates.update(fused.tensors(prefix=f"block{b}.id_attn."))
    return base.replace(updates)


def variant_alpha0(ck, default=0.8):
    return float(ck.meta.get("train", {}).get("alpha0", default))


def fused_alpha0(variants, coefficients):
    """Sampling-time alpha0 of a fused checkpoint: the same convex mix of the variants'."""
    return math.fsum(w * variant_alpha0(ck) for w, ck in zip(coefficients, variants))


def search_fusion_coefficients(variants, dataset, grid_step=0.1, sampler=None, alpha0=None,
                               prompts_per_id=4, seed=777, return_table=False):
    """Exhaustive convex-grid search of fusion coefficients on validation samples.

    The first grid point with the best score wins; the grid starts at full
    weight on the first variant.  Unless ``alpha0`` is given, each candidate
    samples with the coefficient-weighted mix of the variants' alpha0.
    """
    ids = [ck.meta.get("name") or ck.variant_tag or f"v{i}" for i, ck in enumerate(variants)]
    if len(variants) == 1:
        spec = FusionSpec((1.0,), tuple(ids))
        return (spec, []) if return_table else spec
    if len(dataset.split_indices("val")) == 0:
        raise ValueError("search_fusion_coefficients: empty validation split")
    grid = simplex_grid(len(variants), grid_step)
    reports = []
    for coeffs in grid:
        params = fuse_params(variants, FusionSpec(coeffs, tuple(ids)))
        a0 = fused_alpha0(variants, coeffs) if alpha0 is None else alpha0
        reports.append(validation_metrics(params, dataset, sampler, a0, prompts_per_id, seed))
    scores = score_candidates(reports)
    best = int(np.argmax(scores))
    spec = FusionSpec(grid[best], tuple(ids))
    table = [{"coefficients": list(g), "facesim": r.facesim, "editdiv": r.editdiv,
              "score": s} for g, r, s in zip(grid, reports, scores)]
    return (spec, table) if return_table else spec
