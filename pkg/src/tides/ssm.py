"""Diagonal selective SSM layer: spectra, selectivity heads, discretization, scan.

Complex quantities are (re, im) pairs in a trailing axis of size 2. A
real-diagonal layer (``complex_state=False``) keeps the same pipeline with
imaginary parts fixed at zero and no imaginary parameters.

State convention: the scan is inclusive, x_k = a_k x_{k-1} + b_k u_k with
x_0 = 0, and the readout y_k = Re(C_k x_k) + D u_k sees the state after
step k has been absorbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, scan_kernel

REPARAMS = ("standard", "stable", "exp", "softplus")
EIG_FLOOR = -1e-5
RMS_EPS = 1e-8
_GATE_BIAS = math.log(math.e - 1.0)  # softplus^-1(1)


# --------------------------------------------------------------------------
# spectrum

def reparameterize(theta, kind: str):
    """Map an unconstrained value to Re(lambda).

    standard: theta, exp: -exp(theta), stable: -1/(theta^2 + 1/2),
    softplus: -softplus(theta). Works on arrays and on taped tensors.
    """
    if kind == "standard":
        return theta
    if kind == "exp":
        return -ad.exp(theta)
    if kind == "stable":
        return -ad.reciprocal(ad.square(theta) + 0.5)
    if kind == "softplus":
        return -ad.softplus(theta)
    raise ValueError(f"unknown reparameterization {kind!r}; expected one of {REPARAMS}")


def reparam_preimage(value: float, kind: str) -> float:
    """Inverse of :func:`reparameterize` for a negative target value."""
    if kind == "standard":
        return value
    if value >= 0:
        raise ValueError(f"{kind} reparameterization only reaches negative values, got {value}")
    if kind == "exp":
        return math.log(-value)
    if kind == "stable":
        sq = -1.0 / value - 0.5
        if sq < 0:
            raise ValueError(f"stable reparameterization cannot reach {value} (needs >= -2)")
        return math.sqrt(sq)
    if kind == "softplus":
        return math.log(math.expm1(-value))
    raise ValueError(f"unknown reparameterization {kind!r}")


def clip_eigenvalues(re, floor: float = EIG_FLOOR):
    """Elementwise min(re, floor)."""
    if floor >= 0:
        raise ValueError("eigenvalue floor must be negative")
    if isinstance(re, Tensor):
        return ad.clamp(re, hi=floor)
    return np.minimum(np.asarray(re, dtype=np.float64), floor)


@dataclass
class DiagonalSpectrum:
    theta: np.ndarray
    lambda_im: np.ndarray
    log_step: np.ndarray
    reparam: str = "standard"
    clip_eigs: bool = True

    @property
    def P(self) -> int:
        return self.theta.size

    def lambda_re(self) -> np.ndarray:
        re = np.asarray(reparameterize(Tensor(self.theta), self.reparam).data)
        return clip_eigenvalues(re) if self.clip_eigs else re

    def eigenvalues(self) -> np.ndarray:
        return self.lambda_re() + 1j * self.lambda_im


def hippo_init(P: int, rng: np.random.Generator, reparam: str = "standard", clip_eigs: bool = True) -> DiagonalSpectrum:
    """Diagonal HiPPO-LegS approximation: lambda_p = -1/2 + i pi p.

    Per-mode timescales are drawn log-uniformly so exp(log_step) lies in
    [0.001, 0.1].
    """
    if P < 1:
        raise ValueError("hippo_init needs at least one mode")
    theta = np.full(P, reparam_preimage(-0.5, reparam))
    lambda_im = math.pi * np.arange(P, dtype=np.float64)
    log_step = rng.uniform(math.log(0.001), math.log(0.1), size=P)
    return DiagonalSpectrum(theta, lambda_im, log_step, reparam, clip_eigs)


# --------------------------------------------------------------------------
# selectivity heads

@dataclass(frozen=True)
class SelectivityHead:
    """Bias plus an (optionally deep, optionally low-rank) projection of u_k.

    Weights are stored input-major: ``w_full`` is (in_dim, out_dim),
    ``w_down`` is (in_dim, rank) and ``w_up`` is (rank, out_dim), so the
    effective dense weight is ``w_down @ w_up``. ``pairs`` marks outputs
    that are complex (re, im) pairs, which changes what RMS normalization
    measures.
    """

    target: str
    in_dim: int
    out_dim: int
    rank: int | None = None
    depth: int = 0
    normalize: bool = False
    pairs: bool = False

    def init_params(self, rng: np.random.Generator, bias: np.ndarray) -> dict[str, np.ndarray]:
        bias = np.asarray(bias, dtype=np.float64).reshape(self.out_dim)
        p = {"bias": bias.copy()}
        scale = 1.0 / math.sqrt(self.in_dim)
        for i in range(self.depth):
            p[f"glu{i}.w1"] = rng.normal(0.0, scale, (self.in_dim, self.in_dim))
            p[f"glu{i}.w2"] = rng.normal(0.0, scale, (self.in_dim, self.in_dim))
        if self.rank is None:
            p["w_full"] = np.zeros((self.in_dim, self.out_dim))
        else:
            p["w_down"] = rng.normal(0.0, scale, (self.in_dim, self.rank))
            p["w_up"] = np.zeros((self.rank, self.out_dim))
        return p

    def n_params(self) -> int:
        n = self.out_dim + 2 * self.depth * self.in_dim**2
        if self.rank is None:
            return n + self.in_dim * self.out_dim
        return n + self.rank * (self.in_dim + self.out_dim)

    @property
    def entries(self) -> int:
        return self.out_dim // 2 if self.pairs else self.out_dim


def glu_stack(p: dict, depth: int, x):
    """Residual GLU blocks x + (x W1) * sigmoid(x W2), applied ``depth`` times."""
    for i in range(depth):
        x = x + (x @ p[f"glu{i}.w1"]) * ad.sigmoid(x @ p[f"glu{i}.w2"])
    return x


def _rms(delta, entries: int):
    # root-mean-square of entry magnitudes over the last axis; pairs count once
    return ad.sqrt(ad.square(delta).sum(axis=-1, keepdims=True) * (1.0 / entries) + RMS_EPS)


def apply_head(head: SelectivityHead, p: dict, u):
    """Per-step head value: bias + project(g(u)), shape (..., out_dim)."""
    if u.shape[-1] != head.in_dim:
        raise ValueError(f"{head.target} head expects {head.in_dim} input channels, got {u.shape[-1]}")
    x = glu_stack(p, head.depth, u)
    if head.rank is None:
        delta = x @ p["w_full"]
    else:
        delta = (x @ p["w_down"]) @ p["w_up"]
    if head.normalize:
        delta = delta / _rms(delta, head.entries)
    return delta + p["bias"]


def _lowrank_rms(p: dict, z, entries: int):
    # rms of reshape(z @ w_up) without materializing it: z^T (w_up w_up^T) z
    gram = p["w_up"] @ ad.primitive_forward("transpose", [p["w_up"]])
    sq = ((z @ gram) * z).sum(axis=-1, keepdims=True)
    return ad.sqrt(sq * (1.0 / entries) + RMS_EPS)


def head_input_product(head: SelectivityHead, p: dict, u, n_modes: int, c: int):
    """B_k u_k for a B head with output layout (P, H, c), shape (..., P*c).

    A head without rank is LTI and contributes its bias only.

    Contracts the low-rank factors against u directly so the per-step
    (P, H) matrix is never formed.
    """
    H = head.in_dim
    if u.shape[-1] != H:
        raise ValueError(f"B head expects {H} input channels, got {u.shape[-1]}")
    b0 = p["bias"].reshape(n_modes, H, c).transpose(1, 0, 2).reshape(H, n_modes * c)
    out = u @ b0
    if head.rank is None:
        return out  # LTI: bias only
    r = head.rank
    z = u @ p["w_down"]
    w = p["w_up"].reshape(r, n_modes, H, c).transpose(2, 0, 1, 3).reshape(H, r, n_modes * c)
    delta = ad.bilinear(u, z, w)
    if head.normalize:
        delta = delta / _lowrank_rms(p, z, head.entries)
    return out + delta


def head_readout(head: SelectivityHead, p: dict, u, x, out_dim: int, n_modes: int, c: int):
    """Re(C_k x_k) for a C head with output layout (out_dim, n_modes, c).

    ``x`` has shape (..., n_modes, c); the imaginary channel of C enters
    with a minus sign.
    """
    sign = np.array([1.0, -1.0][:c])
    xf = x.reshape(*x.shape[:-2], n_modes * c)
    c0 = (p["bias"].reshape(out_dim, n_modes, c) * sign).transpose(1, 2, 0).reshape(n_modes * c, out_dim)
    y = xf @ c0
    if head.rank is None:
        return y
    r = head.rank
    z = u @ p["w_down"]
    w = (p["w_up"].reshape(r, out_dim, n_modes, c) * sign).transpose(2, 3, 0, 1).reshape(n_modes * c, r, out_dim)
    delta = ad.bilinear(xf, z, w)
    if head.normalize:
        delta = delta / _lowrank_rms(p, z, head.entries)
    return y + delta


# --------------------------------------------------------------------------
# discretization

def _as_pairs(lam):
    if isinstance(lam, Tensor):
        return lam
    lam = np.asarray(lam)
    if np.iscomplexobj(lam):
        return Tensor(np.stack([lam.real, lam.imag], axis=-1))
    return Tensor(np.stack([lam, np.zeros_like(lam)], axis=-1))


def effective_step(delta, log_step=None):
    """Per-mode step exp(log_step_p) * delta; ``delta`` must be positive."""
    d = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    if np.any(d <= 0):
        raise ValueError("discretization step must be positive")
    if log_step is None:
        return delta
    return ad.exp(log_step) * delta


def _expand(step):
    step = ad.as_tensor(step)
    return step.reshape(*step.shape, 1)


def zoh_coefficients(lam, step):
    """(a_bar, gain) with a_bar = exp(lam step), gain = (a_bar - 1)/lam.

    ``lam`` is (..., P, 2), ``step`` broadcasts against (..., P). The gain
    is evaluated as step * phi1(lam step), which has a series branch for
    |lam step| < 1e-8.
    """
    s = _expand(step)
    z = lam * s
    return ad.complex_exp(z), ad.complex_phi1(z) * s


_CONJ = np.array([1.0, -1.0])
_ONE = np.array([1.0, 0.0])


def _complex_reciprocal(w):
    mag2 = ad.square(w).sum(axis=-1, keepdims=True)
    return (w * _CONJ) / mag2


def bilinear_coefficients(lam, step):
    """Tustin: a_bar = (1 + z/2)/(1 - z/2), gain = step/(1 - z/2), z = lam step."""
    s = _expand(step)
    z = lam * s
    den = z * -0.5 + _ONE
    mag = np.sqrt((den.data**2).sum(-1))
    if np.any(mag < 1e-12):
        bad = tuple(int(i) for i in np.argwhere(mag < 1e-12)[0])
        raise ZeroDivisionError(f"bilinear discretization is singular at mode index {bad}")
    inv = _complex_reciprocal(den)
    return ad.complex_mul(z * 0.5 + _ONE, inv), inv * s


def _discretize(coeffs, lambda_k, B_k, delta_k, log_step):
    lam = _as_pairs(lambda_k)
    Bp = _as_pairs(B_k)
    step = effective_step(ad.as_tensor(delta_k), None if log_step is None else ad.as_tensor(log_step))
    step = ad.as_tensor(step) * np.ones(lam.shape[:-1])
    a_bar, gain = coeffs(lam, step)
    b_bar = ad.complex_mul(gain.reshape(*gain.shape[:-1], 1, 2), Bp)
    return a_bar, b_bar


def discretize_zoh(lambda_k, B_k, delta_k, log_step=None):
    """ZOH pair (a_bar (P, 2), b_bar (P, H, 2)) for one step.

    ``lambda_k`` and ``B_k`` may be complex numpy arrays or paired tensors.
    """
    return _discretize(zoh_coefficients, lambda_k, B_k, delta_k, log_step)


def discretize_bilinear(lambda_k, B_k, delta_k, log_step=None):
    return _discretize(bilinear_coefficients, lambda_k, B_k, delta_k, log_step)


# --------------------------------------------------------------------------
# scan

@dataclass
class ScanElement:
    a: np.ndarray
    b: np.ndarray


def scan_combine(e_i: ScanElement, e_j: ScanElement) -> ScanElement:
    """(a_i, b_i) + (a_j, b_j) = (a_j a_i, b_j + a_j b_i)."""
    a_i, b_i = np.asarray(e_i.a), np.asarray(e_i.b)
    a_j, b_j = np.asarray(e_j.a), np.asarray(e_j.b)
    if a_i.shape != a_j.shape or b_i.shape != b_j.shape:
        raise ValueError(f"scan_combine: mismatched element shapes {a_i.shape} and {a_j.shape}")
    return ScanElement(a_j * a_i, b_j + a_j * b_i)


def parallel_scan(a, b=None) -> np.ndarray:
    """States x_1..x_L of x_k = a_k x_{k-1} + b_k, x_0 = 0, along axis 0.

    Accepts either a sequence of :class:`ScanElement` or two complex arrays.
    """
    if b is None:
        elements = list(a)
        if not elements:
            raise ValueError("parallel_scan: empty sequence")
        a = np.stack([np.asarray(e.a) for e in elements])
        b = np.stack([np.asarray(e.b) for e in elements])
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.shape[0] == 0:
        raise ValueError("parallel_scan: empty sequence")
    return scan_kernel(np.broadcast_to(a, b.shape).copy(), b)


# --------------------------------------------------------------------------
# layer

@dataclass(frozen=True)
class SSMConfig:
    """Static description of one SSM layer.

    ``out_dim`` None means the layer maps H -> H with diagonal feedthrough;
    an integer selects a dense (H, out_dim) feedthrough instead.
    ``fixed_timescale`` drops the per-mode log-step so the effective step is
    exactly the supplied delta.
    """

    H: int
    P: int
    ssm_b: int = 1
    out_dim: int | None = None
    bidir: bool = False
    disc: str = "zoh"
    reparam: str = "standard"
    clip_eigs: bool = True
    id_re_lambda: bool = True
    id_im_lambda: bool = False
    id_bc: bool = True
    delta_mode: str = "physical"
    bc_rank: int = 4
    d_lambda: int = 0
    normalize: bool = False
    complex_state: bool = True
    fixed_timescale: bool = False

    def __post_init__(self):
        if self.H < 1 or self.P < 1 or self.ssm_b < 1:
            raise ValueError("H, P and ssm_b must be positive")
        if self.P % self.ssm_b:
            raise ValueError(f"P={self.P} is not divisible into ssm_b={self.ssm_b} groups")
        if self.disc not in ("zoh", "bilinear"):
            raise ValueError(f"unknown discretization {self.disc!r}")
        if self.reparam not in REPARAMS:
            raise ValueError(f"unknown reparameterization {self.reparam!r}")
        if self.delta_mode not in ("physical", "learned"):
            raise ValueError(f"unknown delta_mode {self.delta_mode!r}")
        if self.id_im_lambda and not self.complex_state:
            raise ValueError("input-dependent Im(lambda) needs a complex state")

    @property
    def ssm_mult(self) -> int:
        return self.P // self.ssm_b

    @property
    def Y(self) -> int:
        return self.H if self.out_dim is None else self.out_dim

    @property
    def c(self) -> int:
        return 2 if self.complex_state else 1

    def heads(self) -> dict[str, SelectivityHead]:
        m, H, c = self.ssm_mult, self.H, self.c
        readout_modes = 2 * m if self.bidir else m
        rank = self.bc_rank if self.id_bc else None
        heads = {
            "B": SelectivityHead("B", H, m * H * c, rank, 0, self.normalize, c == 2),
            "C": SelectivityHead("C", H, self.Y * readout_modes * c, rank, 0, self.normalize, c == 2),
        }
        if self.id_re_lambda:
            heads["lambda_re"] = SelectivityHead("lambda_re", H, m, None, self.d_lambda, self.normalize)
        if self.id_im_lambda:
            heads["lambda_im"] = SelectivityHead("lambda_im", H, m, None, 0, self.normalize)
        return heads


def init_ssm_params(cfg: SSMConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    m, H, c, Y = cfg.ssm_mult, cfg.H, cfg.c, cfg.Y
    params: dict[str, np.ndarray] = {}
    thetas, ims, steps = [], [], []
    heads = cfg.heads()
    readout_modes = 2 * m if cfg.bidir else m
    for g in range(cfg.ssm_b):
        spec = hippo_init(m, rng, cfg.reparam, cfg.clip_eigs)
        thetas.append(spec.theta)
        ims.append(spec.lambda_im)
        steps.append(spec.log_step)
        b0 = rng.normal(0.0, 1.0 / math.sqrt(cfg.P), (m, H, c))
        c0 = rng.normal(0.0, 1.0 / math.sqrt(cfg.P), (Y, readout_modes, c))
        for name, bias in (("B", b0), ("C", c0)):
            for k, v in heads[name].init_params(rng, bias).items():
                if heads[name].rank is None and k == "w_full":
                    continue  # LTI projection: bias only
                params[f"g{g}.{name}.{k}"] = v
        if "lambda_re" in heads:
            for k, v in heads["lambda_re"].init_params(rng, spec.theta).items():
                if k != "bias":
                    params[f"g{g}.lambda_re.{k}"] = v
        if "lambda_im" in heads:
            for k, v in heads["lambda_im"].init_params(rng, spec.lambda_im).items():
                if k != "bias":
                    params[f"g{g}.lambda_im.{k}"] = v
        if cfg.delta_mode == "learned":
            params[f"g{g}.gate.w"] = np.zeros((H + 1, m))
            params[f"g{g}.gate.b"] = np.full(m, _GATE_BIAS)
    params["theta"] = np.concatenate(thetas)
    if cfg.complex_state:
        params["lambda_im"] = np.concatenate(ims)
    if not cfg.fixed_timescale:
        params["log_step"] = np.concatenate(steps)
    params["D"] = np.ones(H) if cfg.out_dim is None else np.zeros((H, cfg.out_dim))
    return params


def ssm_param_count(cfg: SSMConfig) -> int:
    """Analytic parameter count of :func:`init_ssm_params`."""
    m, H, c = cfg.ssm_mult, cfg.H, cfg.c
    heads = cfg.heads()
    per_group = 0
    for name in ("B", "C"):
        h = heads[name]
        per_group += h.out_dim + (h.rank * (h.in_dim + h.out_dim) if h.rank is not None else 0)
    for name in ("lambda_re", "lambda_im"):
        if name in heads:
            per_group += heads[name].n_params() - heads[name].out_dim  # bias lives in the spectrum
    if cfg.delta_mode == "learned":
        per_group += (H + 1) * m + m
    n = cfg.ssm_b * per_group + cfg.P  # theta
    n += cfg.P if cfg.complex_state else 0
    n += 0 if cfg.fixed_timescale else cfg.P
    n += H if cfg.out_dim is None else H * cfg.out_dim
    return n


def group_split(params: dict, cfg: SSMConfig) -> list[dict]:
    """Per-group parameter views; spectrum arrays are sliced to the group."""
    m = cfg.ssm_mult
    groups = []
    for g in range(cfg.ssm_b):
        sl = slice(g * m, (g + 1) * m)
        view = {k[len(f"g{g}.") :]: v for k, v in params.items() if k.startswith(f"g{g}.")}
        for k in ("theta", "lambda_im", "log_step"):
            if k in params:
                view[k] = params[k][sl]
        groups.append(view)
    return groups


def _sub(p: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix + ".")}


def _check_finite(name: str, t) -> None:
    if np.isnan(t.data).any():
        raise FloatingPointError(f"{name} head produced NaN")


_RE = np.array([1.0, 0.0])
_IM = np.array([0.0, 1.0])


def _group_states(cfg: SSMConfig, p: dict, heads: dict, u, delta) -> Tensor:
    """Scanned states (..., L, modes, 2) for one group."""
    m, c = cfg.ssm_mult, cfg.c
    if "lambda_re" in heads:
        lp = _sub(p, "lambda_re")
        lp["bias"] = p["theta"]
        re = apply_head(heads["lambda_re"], lp, u)
        _check_finite("lambda_re", re)
    else:
        re = p["theta"]
    re = reparameterize(ad.as_tensor(re), cfg.reparam)
    if cfg.clip_eigs:
        re = clip_eigenvalues(re)
    lam = re.reshape(*re.shape, 1) * _RE
    if "lambda_im" in heads:
        ip = _sub(p, "lambda_im")
        ip["bias"] = p["lambda_im"]
        im = apply_head(heads["lambda_im"], ip, u)
        _check_finite("lambda_im", im)
        lam = lam + im.reshape(*im.shape, 1) * _IM
    elif cfg.complex_state:
        lam = lam + p["lambda_im"].reshape(m, 1) * _IM

    if cfg.delta_mode == "learned":
        gate_in = ad.concat([u, delta.reshape(*delta.shape, 1)], axis=-1)
        dt = ad.softplus(gate_in @ p["gate.w"] + p["gate.b"])
    else:
        dt = delta.reshape(*delta.shape, 1) * np.ones(m)
    step = dt if "log_step" not in p else ad.exp(p["log_step"]) * dt
    coeffs = zoh_coefficients if cfg.disc == "zoh" else bilinear_coefficients
    a_bar, gain = coeffs(lam, step)

    bu = head_input_product(heads["B"], _sub(p, "B"), u, m, c)
    _check_finite("B", bu)
    bu = bu.reshape(*bu.shape[:-1], m, c)
    if c == 1:
        bu = bu * _RE
    b = ad.complex_mul(gain, bu)
    if a_bar.ndim < b.ndim or a_bar.shape != b.shape:
        a_bar = a_bar + np.zeros(b.shape)
    seq_axis = b.ndim - 3
    x = ad.linear_scan(a_bar, b, axis=seq_axis)
    if cfg.bidir:
        xb = ad.linear_scan(a_bar, b, axis=seq_axis, reverse=True)
        x = ad.concat([x, xb], axis=-2)
    return x


def ssm_forward(cfg: SSMConfig, params: dict, u, delta) -> Tensor:
    """Run the layer on u (..., L, H) with per-step times delta (..., L).

    In physical mode delta enters only the discretization. In learned mode
    the step is softplus([u_k, delta_k] W + b) and delta may be any real.
    """
    u = ad.as_tensor(u)
    delta = ad.as_tensor(delta)
    if u.shape[-1] != cfg.H:
        raise ValueError(f"ssm_forward: expected {cfg.H} channels, got {u.shape[-1]}")
    if delta.shape != u.shape[:-1]:
        raise ValueError(f"ssm_forward: delta shape {delta.shape} does not match sequence shape {u.shape[:-1]}")
    if cfg.delta_mode == "physical" and np.any(delta.data <= 0):
        raise ValueError("ssm_forward: physical time steps must be positive")
    heads = cfg.heads()
    modes = 2 * cfg.ssm_mult if cfg.bidir else cfg.ssm_mult
    y = None
    for g, gp in enumerate(group_split(params, cfg)):
        x = _group_states(cfg, gp, heads, u, delta)
        if cfg.c == 1:
            x = x[..., 0:1]
        yg = head_readout(heads["C"], _sub(gp, "C"), u, x, cfg.Y, modes, cfg.c)
        _check_finite("C", yg)
        y = yg if y is None else y + yg
    D = params["D"]
    return y + (u * D if cfg.out_dim is None else u @ D)
