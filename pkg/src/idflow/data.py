"""Synthetic few-identity / many-attribute dataset and the fixed toy encoders.

A fixed procedural generator ``G(z_id, z_attr)`` maps an identity latent and
an attribute latent to an observation of shape (16, 32): a fixed template
plus two token-shared codes, one from a random tanh identity pathway and one
from a smaller attribute pathway.  The two codes share the same 32 channels,
so attribute content leaks into what the ID encoder sees.  Weights come from
``WORLD_SEED``, not from the dataset seed, so every dataset lives in the same
world.

The ID encoder and the attribute readout are linear least-squares inverses
of ``G`` fitted once on a fixed calibration draw; neither is ever trained.
"""

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import io
from .errors import ConfigurationError, DegenerateVectorError, DimensionError
from .numerics import as_tensor, cosine_and_grad

WORLD_SEED = 0x1D_F10
TOKENS = 16
WIDTH = 32
ID_LATENT = 8
ATTR_LATENT = 4
EMBED_DIM = ID_LATENT
ID_HIDDEN = 48
ATTR_HIDDEN = 16
COND_TOKENS = 4
COND_DIM = 8
ID_TOKENS = 4
ID_TOKEN_DIM = 16
ID_SCALE = 0.9
ATTR_SCALE = 0.3
TEMPLATE_SCALE = 0.5
CALIBRATION = 8192


@dataclass(frozen=True)
class World:
    """Fixed weights of the generator, the prompt encoder and the ID tokenizer."""

    id_in: np.ndarray
    id_out: np.ndarray
    attr_in: np.ndarray
    attr_out: np.ndarray
    template: np.ndarray
    cond_map: np.ndarray
    cond_bias: np.ndarray
    id_token_map: np.ndarray


@functools.lru_cache(maxsize=None)
def world():
    rng = np.random.default_rng(WORLD_SEED)
    d = TOKENS * WIDTH
    return World(
        id_in=rng.standard_normal((ID_LATENT, ID_HIDDEN)) / math.sqrt(ID_LATENT),
        id_out=rng.standard_normal((ID_HIDDEN, WIDTH)) * ID_SCALE / math.sqrt(ID_HIDDEN * 0.4),
        attr_in=rng.standard_normal((ATTR_LATENT, ATTR_HIDDEN)) * 0.5 / math.sqrt(ATTR_LATENT),
        attr_out=rng.standard_normal((ATTR_HIDDEN, WIDTH)) * ATTR_SCALE / math.sqrt(ATTR_HIDDEN * 0.2),
        cond_map=rng.standard_normal((ATTR_LATENT, COND_TOKENS * COND_DIM)) / math.sqrt(ATTR_LATENT),
        cond_bias=rng.standard_normal(COND_TOKENS * COND_DIM) * 0.1,
        id_token_map=rng.standard_normal((EMBED_DIM, ID_TOKENS * ID_TOKEN_DIM)),
        template=rng.standard_normal((TOKENS, WIDTH)) * TEMPLATE_SCALE,
    )


def generate(z_id, z_attr):
    """Observation ``G(z_id, z_attr)``; batch axes broadcast, output (..., 16, 32)."""
    w = world()
    z_id, z_attr = as_tensor(z_id), as_tensor(z_attr)
    code = np.tanh(z_id @ w.id_in) @ w.id_out
    attr = np.tanh(z_attr @ w.attr_in) @ w.attr_out
    # both codes are shared by every token, so attributes overlap the identity subspace
    return w.template + (code + attr)[..., None, :]


def encode_prompt(z_attr):
    """Affine prompt embedding of the attribute latent, shape (..., 4, 8)."""
    w = world()
    flat = as_tensor(z_attr) @ w.cond_map + w.cond_bias
    return flat.reshape(flat.shape[:-1] + (COND_TOKENS, COND_DIM))


def null_prompt():
    return np.zeros((COND_TOKENS, COND_DIM))


def id_tokens(e_ref):
    """ID feature tokens (..., 4, 16) extracted from a reference embedding."""
    flat = as_tensor(e_ref) @ world().id_token_map
    return flat.reshape(flat.shape[:-1] + (ID_TOKENS, ID_TOKEN_DIM))


@functools.lru_cache(maxsize=None)
def _calibration():
    rng = np.random.default_rng(WORLD_SEED + 1)
    z_id = rng.standard_normal((CALIBRATION, ID_LATENT))
    z_attr = rng.standard_normal((CALIBRATION, ATTR_LATENT))
    x = generate(z_id, z_attr).reshape(CALIBRATION, -1)
    return x, z_id, z_attr


@functools.lru_cache(maxsize=None)
def _readout_maps():
    x, z_id, z_attr = _calibration()
    # identity map inverts the identity pathway alone (attributes held at zero),
    # so it is not explicitly decorrelated from attribute content
    x_id = generate(z_id, np.zeros_like(z_attr)).reshape(CALIBRATION, -1)
    id_map = np.linalg.lstsq(x_id, z_id, rcond=None)[0]
    attr_map = np.linalg.lstsq(x, z_attr, rcond=None)[0]
    return id_map, attr_map


class LinearIdEncoder:
    """``x -> normalize(flatten(x) @ matrix)``; fixed, never trained."""

    def __init__(self, matrix):
        self.matrix = np.asarray(matrix, dtype=np.float64)

    @property
    def dim(self):
        return self.matrix.shape[1]

    def project(self, x):
        x = as_tensor(x)
        n = self.matrix.shape[0]
        if x.shape[-1:] != (n,):
            if x.ndim < 2 or x.shape[-2] * x.shape[-1] != n:
                raise DimensionError(f"encoder expects {n} features per sample, got {x.shape}")
            x = x.reshape(x.shape[:-2] + (n,))
        return x @ self.matrix

    def __call__(self, x):
        y = self.project(x)
        norm = np.linalg.norm(y, axis=-1, keepdims=True)
        if np.any(norm == 0.0):
            raise DegenerateVectorError("ID embedding has zero norm")
        return y / norm

    def cosine_and_grad(self, x, e_ref):
        """Cosine between the embedding of ``x`` and ``e_ref``, and its gradient in ``x``."""
        x = as_tensor(x)
        cos, gy = cosine_and_grad(self.project(x), e_ref)
        return cos, (gy @ self.matrix.T).reshape(x.shape)


@functools.lru_cache(maxsize=None)
def id_encoder():
    return LinearIdEncoder(_readout_maps()[0])


def id_encode(x):
    return id_encoder()(x)


def attr_readout(x):
    """Linear least-squares estimate of the attribute latent from an observation."""
    x = as_tensor(x)
    return x.reshape(x.shape[:-2] + (-1,)) @ _readout_maps()[1]


def reference_embedding(z_id):
    """Embedding of the canonical sample (attributes at zero) of an identity."""
    z_id = as_tensor(z_id)
    return id_encode(generate(z_id, np.zeros(z_id.shape[:-1] + (ATTR_LATENT,))))


def separability_rate(trials=1000, seed=0):
    """Fraction of triples where two samples of one identity embed closer than a stranger.

    Pre-build gate for the encoder construction; expected to be >= 0.95.
    """
    rng = np.random.default_rng(seed)
    z_same = rng.standard_normal((trials, ID_LATENT))
    z_other = rng.standard_normal((trials, ID_LATENT))
    a, b, c = (rng.standard_normal((trials, ATTR_LATENT)) for _ in range(3))
    e1 = id_encode(generate(z_same, a))
    e2 = id_encode(generate(z_same, b))
    e3 = id_encode(generate(z_other, c))
    return float(np.mean((e1 * e2).sum(-1) > (e1 * e3).sum(-1)))


def readout_r2(samples=1000, seed=0):
    """Coefficient of determination of ``attr_readout`` on fresh draws; gate is > 0.9."""
    rng = np.random.default_rng(seed)
    z_attr = rng.standard_normal((samples, ATTR_LATENT))
    est = attr_readout(generate(rng.standard_normal((samples, ID_LATENT)), z_attr))
    resid = ((est - z_attr) ** 2).sum()
    total = ((z_attr - z_attr.mean(axis=0)) ** 2).sum()
    return float(1.0 - resid / total)


@dataclass(frozen=True)
class IdentityRecord:
    id_code: int
    z_id: np.ndarray
    e_ref: np.ndarray


@dataclass(frozen=True)
class Sample:
    identity: int
    z_attr: np.ndarray
    c: np.ndarray
    x0: np.ndarray


@dataclass
class Dataset:
    """Column-oriented dataset; ``samples``/``identities`` build record views."""

    z_id: np.ndarray
    e_ref: np.ndarray
    identity: np.ndarray
    z_attr: np.ndarray
    c: np.ndarray
    x0: np.ndarray
    is_val: np.ndarray
    seed: int

    @property
    def num_ids(self):
        return self.z_id.shape[0]

    def __len__(self):
        return self.identity.shape[0]

    @property
    def identities(self):
        return [IdentityRecord(i, self.z_id[i], self.e_ref[i]) for i in range(self.num_ids)]

    @property
    def samples(self):
        return [Sample(int(self.identity[j]), self.z_attr[j], self.c[j], self.x0[j])
                for j in range(len(self))]

    def split_indices(self, split):
        mask = self.is_val if split == "val" else ~self.is_val
        return np.flatnonzero(mask)

    def id_tokens(self, identity):
        return id_tokens(self.e_ref[np.asarray(identity)])

    def summary(self):
        counts = np.bincount(self.identity, minlength=self.num_ids)
        return {
            "num_ids": int(self.num_ids),
            "num_samples": int(len(self)),
            "per_id": [int(c) for c in counts],
            "num_val": int(self.is_val.sum()),
            "seed": int(self.seed),
            "world_seed": WORLD_SEED,
        }

    def save(self, path):
        tensors = {
            "z_id": self.z_id, "e_ref": self.e_ref, "identity": self.identity.astype(float),
            "z_attr": self.z_attr, "c": self.c, "x0": self.x0, "is_val": self.is_val.astype(float),
        }
        io.save(path, "dataset", {"schema": 1, **self.summary()}, tensors)

    @classmethod
    def load(cls, path):
        header, t = io.load(path, kind="dataset")
        meta = header["meta"]
        if meta.get("world_seed") != WORLD_SEED:
            raise ConfigurationError("dataset was generated in a different world")
        return cls(
            z_id=t["z_id"], e_ref=t["e_ref"], identity=t["identity"].astype(int),
            z_attr=t["z_attr"], c=t["c"], x0=t["x0"], is_val=t["is_val"].astype(bool),
            seed=int(meta["seed"]),
        )


def gen_dataset(num_ids, per_id, seed, val_per_id=None):
    """Few identities with many attribute variations each.

    Every identity gets exactly ``per_id`` samples; the last ``val_per_id``
    of them (default ``max(1, per_id // 8)``) form the validation split.
    """
    if num_ids < 2 or per_id < 2:
        raise ConfigurationError(f"need num_ids >= 2 and per_id >= 2, got {num_ids}, {per_id}")
    val_per_id = max(1, per_id // 8) if val_per_id is None else val_per_id
    if not 1 <= val_per_id < per_id:
        raise ConfigurationError(f"val_per_id must be in [1, {per_id - 1}]")
    rng = np.random.default_rng(seed)
    z_id = rng.standard_normal((num_ids, ID_LATENT))
    z_attr = rng.standard_normal((num_ids * per_id, ATTR_LATENT))
    identity = np.repeat(np.arange(num_ids), per_id)
    is_val = np.tile(np.arange(per_id) >= per_id - val_per_id, num_ids)
    return Dataset(
        z_id=z_id,
        e_ref=reference_embedding(z_id),
        identity=identity,
        z_attr=z_attr,
        c=encode_prompt(z_attr),
        x0=generate(z_id[identity], z_attr),
        is_val=is_val,
        seed=int(seed),
    )


# -- toy evaluation metrics ------------------------------------------------

@dataclass(frozen=True)
class GenerationRequest:
    identity: int
    z_attr: np.ndarray


@dataclass
class MetricsReport:
    facesim: float
    editdiv: float
    promptfollow: float
    per_identity: dict
    count: int

    def rows(self):
        out = [("all", self.facesim, self.editdiv, self.promptfollow)]
        for ident in sorted(self.per_identity):
            m = self.per_identity[ident]
            out.append((str(ident), m["facesim"], m["editdiv"], m["promptfollow"]))
        return out

    def to_dict(self):
        return {
            "facesim": self.facesim, "editdiv": self.editdiv, "promptfollow": self.promptfollow,
            "count": self.count,
            "per_identity": {str(k): v for k, v in sorted(self.per_identity.items())},
        }


def _row_cos(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    return np.clip((a * b).sum(axis=-1) / (na * nb), -1.0, 1.0)


def _mean_pairwise_distance(points):
    if len(points) < 2:
        return 0.0
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    iu = np.triu_indices(len(points), k=1)
    return float(dist[iu].mean())


def eval_metrics(generated, dataset):
    """Toy identity-similarity, edit-diversity and prompt-following scores.

    ``generated`` is a sequence of ``(GenerationRequest, observation)`` pairs.
    Edit diversity is the mean pairwise distance between attribute readouts of
    one identity's generations, averaged over identities with two or more.
    """
    if len(generated) == 0:
        raise ValueError("eval_metrics: no generations to evaluate")
    ident = np.array([int(r.identity) for r, _ in generated])
    if ident.min() < 0 or ident.max() >= dataset.num_ids:
        raise ConfigurationError("generation refers to an identity missing from the dataset")
    xs = np.stack([as_tensor(x) for _, x in generated])
    asked = np.stack([as_tensor(r.z_attr) for r, _ in generated])
    face = _row_cos(id_encode(xs), dataset.e_ref[ident])
    attrs = attr_readout(xs)
    follow = _row_cos(attrs, asked)
    per = {}
    for i in sorted(set(ident.tolist())):
        m = ident == i
        per[i] = {
            "facesim": float(face[m].mean()),
            "editdiv": _mean_pairwise_distance(attrs[m]),
            "promptfollow": float(follow[m].mean()),
            "count": int(m.sum()),
        }
    multi = [v["editdiv"] for v in per.values() if v["count"] >= 2]
    return MetricsReport(
        facesim=float(face.mean()),
        editdiv=float(np.mean(multi)) if multi else 0.0,
        promptfollow=float(follow.mean()),
        per_identity=per,
        count=len(generated),
    )
