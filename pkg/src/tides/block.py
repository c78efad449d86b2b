"""Residual SSM blocks and the stacked sequence model.

Each block computes

    z = Dropout(GLU(Dropout(GELU(SSM(BN(x)))))) + x

with an affine-free BatchNorm and one shared dropout rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ssm import SSMConfig, glu_stack, init_ssm_params, ssm_forward, ssm_param_count

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BatchStats:
    """Running per-channel statistics used by BatchNorm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BatchStats":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm_no_affine(x, eps: float = BN_EPS, stats: BatchStats | None = None, train: bool = True):
    """Normalize each channel over the joint batch-time axes.

    Training mode uses the batch statistics and, when ``stats`` is given,
    folds them into its running averages. Eval mode reads ``stats``.
    """
    x = ad.as_tensor(x)
    if not train:
        if stats is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        return (x - stats.mean) * (1.0 / np.sqrt(stats.var + eps))
    axes = tuple(range(x.ndim - 1))
    count = int(np.prod(x.shape[:-1]))
    if count < 2:
        raise ValueError("batchnorm needs at least two batch-time elements per channel")
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = ad.square(centered).mean(axis=axes, keepdims=True)
    if stats is not None:
        flat_mean = mean.data.reshape(-1)
        flat_var = var.data.reshape(-1)
        stats.mean = (1 - BN_MOMENTUM) * stats.mean + BN_MOMENTUM * flat_mean
        stats.var = (1 - BN_MOMENTUM) * stats.var + BN_MOMENTUM * flat_var
    return centered / ad.sqrt(var + eps)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask


def glu_ff(x, p: dict):
    """W_out((x W1 + b1) * sigmoid(x W2 + b2)) + b_out."""
    if x.shape[-1] != p["w1"].shape[0]:
        raise ValueError(f"glu_ff: input width {x.shape[-1]} does not match weights {p['w1'].shape}")
    hidden = (x @ p["w1"] + p["b1"]) * ad.sigmoid(x @ p["w2"] + p["b2"])
    return hidden @ p["w_out"] + p["b_out"]


def gelu(x):
    return ad.gelu(x)


def residual_add(z, x):
    return z + x


def _sub(p: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix + ".")}


@dataclass(frozen=True)
class ModelConfig:
    d_input: int
    H: int = 16
    layers: int = 1
    d_enc: int = 0
    d_lambda: int = 0
    bc_rank: int = 4
    ssm_b: int = 1
    ssm_mult: int = 16
    bidir: bool = False
    disc: str = "zoh"
    reparam: str = "standard"
    clip_eigs: bool = True
    normalize: bool = False
    id_re_lambda: bool = True
    id_im_lambda: bool = False
    id_bc: bool = True
    delta_mode: str = "physical"
    drop_rate: float = 0.0
    ff_mult: float = 1.0
    task: str = "classification"
    n_out: int = 2

    def __post_init__(self):
        if min(self.d_input, self.H, self.ssm_b, self.ssm_mult, self.n_out) < 1 or self.layers < 0:
            raise ValueError("model extents must be positive")
        if self.d_enc < 0 or self.d_lambda < 0:
            raise ValueError("projector depths must be non-negative")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.ff_inner < 1:
            raise ValueError("ff_mult * H must round to at least 1")

    @property
    def ff_inner(self) -> int:
        return int(math.floor(self.ff_mult * self.H + 0.5))

    def ssm_config(self) -> SSMConfig:
        return SSMConfig(
            H=self.H,
            P=self.ssm_b * self.ssm_mult,
            ssm_b=self.ssm_b,
            bidir=self.bidir,
            disc=self.disc,
            reparam=self.reparam,
            clip_eigs=self.clip_eigs,
            id_re_lambda=self.id_re_lambda,
            id_im_lambda=self.id_im_lambda,
            id_bc=self.id_bc,
            delta_mode=self.delta_mode,
            bc_rank=self.bc_rank,
            d_lambda=self.d_lambda,
            normalize=self.normalize,
        )


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    din, H, inner = cfg.d_input, cfg.H, cfg.ff_inner
    for i in range(cfg.d_enc):
        p[f"enc.glu{i}.w1"] = rng.normal(0.0, 1.0 / math.sqrt(din), (din, din))
        p[f"enc.glu{i}.w2"] = rng.normal(0.0, 1.0 / math.sqrt(din), (din, din))
    p["enc.w_out"] = rng.normal(0.0, 1.0 / math.sqrt(din), (din, H))
    scfg = cfg.ssm_config()
    for layer in range(cfg.layers):
        for k, v in init_ssm_params(scfg, rng).items():
            p[f"block{layer}.ssm.{k}"] = v
        p[f"block{layer}.ff.w1"] = rng.normal(0.0, 1.0 / math.sqrt(H), (H, inner))
        p[f"block{layer}.ff.w2"] = rng.normal(0.0, 1.0 / math.sqrt(H), (H, inner))
        p[f"block{layer}.ff.b1"] = np.zeros(inner)
        p[f"block{layer}.ff.b2"] = np.zeros(inner)
        p[f"block{layer}.ff.w_out"] = rng.normal(0.0, 1.0 / math.sqrt(inner), (inner, H))
        p[f"block{layer}.ff.b_out"] = np.zeros(H)
    p["head.w"] = rng.normal(0.0, 1.0 / math.sqrt(H), (H, cfg.n_out))
    p["head.b"] = np.zeros(cfg.n_out)
    return p


def model_param_count(cfg: ModelConfig) -> int:
    din, H, inner = cfg.d_input, cfg.H, cfg.ff_inner
    enc = 2 * cfg.d_enc * din * din + din * H
    block = ssm_param_count(cfg.ssm_config()) + 3 * H * inner + 2 * inner + H
    return enc + cfg.layers * block + H * cfg.n_out + cfg.n_out


def block_forward(
    cfg: ModelConfig,
    p: dict,
    x,
    delta,
    train: bool = False,
    rng: np.random.Generator | None = None,
    stats: BatchStats | None = None,
):
    if x.shape[-1] != cfg.H:
        raise ValueError(f"block_forward: expected {cfg.H} channels, got {x.shape[-1]}")
    h = batchnorm_no_affine(x, stats=stats, train=train)
    h = ssm_forward(cfg.ssm_config(), _sub(p, "ssm"), h, delta)
    h = gelu(h)
    h = dropout(h, cfg.drop_rate, rng, train)
    h = glu_ff(h, _sub(p, "ff"))
    h = dropout(h, cfg.drop_rate, rng, train)
    return residual_add(h, x)


def encode(cfg: ModelConfig, p: dict, u):
    u = ad.as_tensor(u)
    if u.shape[-1] != cfg.d_input:
        raise ValueError(f"encoder expects {cfg.d_input} input channels, got {u.shape[-1]}")
    return glu_stack(_sub(p, "enc"), cfg.d_enc, u) @ p["enc.w_out"]


def model_forward(
    cfg: ModelConfig,
    p: dict,
    u,
    delta,
    train: bool = False,
    rng: np.random.Generator | None = None,
    stats: list[BatchStats] | None = None,
):
    """Encoder, ``cfg.layers`` blocks, then the task head.

    Classification pools by the sequence mean and returns (batch, n_out)
    logits; regression returns per-step outputs (batch, L, n_out).
    """
    x = encode(cfg, p, u)
    for layer in range(cfg.layers):
        st = stats[layer] if stats is not None else None
        x = block_forward(cfg, _sub(p, f"block{layer}"), x, delta, train, rng, st)
    if cfg.task == "classification":
        x = x.mean(axis=-2)
    return x @ p["head.w"] + p["head.b"]


def log_softmax(logits):
    shift = logits.data.max(axis=-1, keepdims=True)
    z = logits - shift
    return z - ad.log(ad.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, labels: np.ndarray):
    onehot = np.eye(logits.shape[-1])[np.asarray(labels)]
    return -(log_softmax(logits) * onehot).sum() * (1.0 / len(labels))


class SequenceModel:
    """Config, parameters and the running BatchNorm statistics of one model."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = init_model_params(cfg, rng)
        self.stats = [BatchStats.fresh(cfg.H) for _ in range(cfg.layers)]

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def __call__(self, params, u, delta, train=False, rng=None):
        return model_forward(self.cfg, params, u, delta, train, rng, self.stats)
