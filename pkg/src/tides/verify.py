"""Runtime invariant suite behind ``tides verify``.

Each property returns (passed, detail). They are deliberately small so the
whole suite runs in well under a minute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import finite_difference_check, rng_stream, value_and_grad
from .fading_flash import LENGTH, RATES, FlashSequence, build_toy_model, compute_target, generate_sequence
from .ssm import SSMConfig, discretize_zoh, init_ssm_params, parallel_scan, ssm_forward

TOL = {
    "scan_rel": 1e-6,
    "grad_rel": 1e-4,
    "zoh_abs": 1e-10,
    "semigroup_abs": 1e-12,
    "zero_init_abs": 1e-12,
    "target_abs": 1e-12,
}


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _sequential(a, b):
    x = np.zeros(b.shape[1:], dtype=np.complex128)
    out = np.empty_like(b)
    for k in range(b.shape[0]):
        x = a[k] * x + b[k]
        out[k] = x
    return out


def check_scan(seed: int = 0):
    rng = rng_stream(seed, "verify", "scan")
    worst = 0.0
    for L in (1, 2, 3, 17, 1024):
        for _ in range(3):
            a = rng.uniform(0.5, 0.99, L) * np.exp(1j * rng.uniform(-np.pi, np.pi, L))
            b = rng.normal(size=L) + 1j * rng.normal(size=L)
            ref = _sequential(a, b)
            got = parallel_scan(a, b)
            worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12))))
    return worst < TOL["scan_rel"], f"max relative error {worst:.2e}"


def check_gradients(seed: int = 0):
    rng = rng_stream(seed, "verify", "grad")
    model = build_toy_model("tides", rng, hidden=4, states=3, rank=2)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in model.params.items()}
    u = np.concatenate([rng.integers(0, 2, (2, 6, 1)), np.eye(3)[rng.integers(0, 3, (2, 6))]], axis=-1).astype(float)
    deltas = rng.uniform(0.5, 1.5, 2)
    target = rng.normal(size=(2, 6))

    def loss(p):
        return ad.square(model.forward(p, u, deltas) - target).mean()

    _, grads = value_and_grad(loss, params)
    keys = sorted(params)
    shapes = [params[k].shape for k in keys]
    flat = np.concatenate([params[k].ravel() for k in keys])
    analytic = np.concatenate([grads[k].ravel() for k in keys])

    def unflatten(vec):
        out, i = {}, 0
        for k, s in zip(keys, shapes):
            n = int(np.prod(s))
            out[k] = vec[i : i + n].reshape(s)
            i += n
        return out

    err = finite_difference_check(lambda v: float(loss(unflatten(v)).data), flat, analytic)
    return err < TOL["grad_rel"], f"max relative error {err:.2e}"


def _zoh(lam: complex, step: float) -> tuple[complex, complex]:
    a, b = discretize_zoh(np.array([lam]), np.ones((1, 1)), step)
    return complex(*a.data[0]), complex(*b.data[0, 0])


def check_zoh(seed: int = 0):
    rng = rng_stream(seed, "verify", "zoh")
    worst = semigroup = 0.0
    for _ in range(20):
        lam = complex(-rng.uniform(0.05, 3.0), rng.uniform(-5, 5))
        steps = rng.uniform(0.01, 1.0, 12)
        inputs = rng.normal(size=12)
        x = exact = 0j
        for k in range(12):
            a, g = _zoh(lam, steps[k])
            x = a * x + g * inputs[k]
            decay = np.exp(lam * steps[k])
            exact = decay * exact + (decay - 1) / lam * inputs[k]
        worst = max(worst, abs(x - exact))
        d1, d2 = rng.uniform(0.01, 1.0, 2)
        semigroup = max(semigroup, abs(_zoh(lam, d1)[0] * _zoh(lam, d2)[0] - _zoh(lam, d1 + d2)[0]))
    ok = worst < TOL["zoh_abs"] and semigroup < TOL["semigroup_abs"]
    return ok, f"recurrence error {worst:.1e}, semigroup error {semigroup:.1e}"


def check_zero_init(seed: int = 0):
    rng = rng_stream(seed, "verify", "zero-init")
    cfg = SSMConfig(H=5, P=4, id_re_lambda=True, id_bc=True, bc_rank=2)
    lti = replace(cfg, id_re_lambda=False, id_bc=False)
    params = init_ssm_params(cfg, rng)
    for k in params:
        if k.endswith(("w_up", "w_full")):
            params[k] = np.zeros_like(params[k])
    lti_params = {k: v for k, v in params.items() if k in init_ssm_params(lti, rng_stream(0, "names"))}
    u = rng.normal(size=(3, 9, 5))
    delta = rng.uniform(0.1, 1.0, (3, 9))
    diff = float(np.max(np.abs(ssm_forward(cfg, params, u, delta).data - ssm_forward(lti, lti_params, u, delta).data)))
    return diff < TOL["zero_init_abs"], f"max deviation {diff:.1e}"


def check_generator(seed: int = 0):
    rng = rng_stream(seed, "verify", "generator")
    for i in range(500):
        seq = generate_sequence(rng, float(rng.uniform(0.1, 2.0)))
        spans = np.diff(seq.zone_edges)
        rates = seq.zones[seq.zone_edges[:-1]]
        if not (2 <= seq.flashes.sum() <= 4 and len(spans) in (2, 3) and spans.min() >= 4):
            return False, f"draw {i} violates layout constraints"
        if np.any(rates[1:] == rates[:-1]):
            return False, f"draw {i} repeats a rate in adjacent zones"
    flashes = np.zeros(LENGTH)
    flashes[3] = 1.0
    worst = 0.0
    for z, lam in enumerate(RATES):
        seq = FlashSequence(flashes, np.full(LENGTH, z), np.array([0, LENGTH]), 0.7)
        alpha = np.exp(-lam * 0.7)
        ref = np.where(np.arange(LENGTH) >= 3, (1 - alpha) / lam * alpha ** np.maximum(np.arange(LENGTH) - 3, 0), 0.0)
        worst = max(worst, float(np.max(np.abs(compute_target(seq) - ref))))
    return worst < TOL["target_abs"], f"target deviation {worst:.1e}"


PROPERTIES: dict[str, Callable[[int], tuple[bool, str]]] = {
    "scan_oracle": check_scan,
    "gradient_check": check_gradients,
    "zoh_exactness": check_zoh,
    "zero_init_reduction": check_zero_init,
    "generator_consistency": check_generator,
}


def run_properties(seed: int = 0, names=None) -> list[PropertyResult]:
    results = []
    for name, fn in PROPERTIES.items():
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing property is a failing property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(PropertyResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
