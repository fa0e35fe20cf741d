"""Finite-difference validation of analytic gradients."""
from __future__ import annotations

import numpy as np

from .params import ParamStore
from .tensor import Tensor, no_grad


def _rel_err(a: float, n: float, floor: float) -> float:
    """|a - n| relative to the larger magnitude, with an absolute floor.

    The floor makes near-zero gradient pairs (both below atol) compare
    absolutely instead of amplifying finite-difference roundoff.
    """
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    fn, params, step: float = 1e-5, tolerance: float = 1e-6, atol: float = 1e-9
) -> dict:
    """Compare analytic gradients of a scalar ``fn()`` against central
    differences, element by element.

    ``params``: ParamStore or list of Tensors. ``fn`` must be deterministic
    at fixed parameters. Returns a report with the max relative error per
    parameter tensor and an overall pass flag.
    """
    tensors = _tensor_list(params)
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    floor = atol / tolerance
    per_param = []
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        max_err = 0.0
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_plus = fn().item()
                flat[i] = orig - step
                f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            max_err = max(max_err, _rel_err(gflat[i], numeric, floor))
        per_param.append(max_err)
        worst = max(worst, max_err)
    return {
        "max_rel_err": worst,
        "per_param": per_param,
        "passed": worst < tolerance,
        "tolerance": tolerance,
    }


def grad_check_directions(
    fn,
    params,
    n_directions: int,
    rng: np.random.Generator,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    atol: float = 1e-9,
) -> dict:
    """Directional finite-difference check.

    Compares the analytic directional derivative g . d against the central
    difference of ``fn`` along ``n_directions`` random unit directions in
    the joint parameter space. Far cheaper than the elementwise check for
    large models; this is the whole-pipeline acceptance oracle.
    """
    tensors = _tensor_list(params)
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    errs = np.empty(n_directions)
    for k in range(n_directions):
        ds = [rng.normal(size=t.data.shape) for t in tensors]
        norm = np.sqrt(sum((d * d).sum() for d in ds))
        ds = [d / norm for d in ds]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, ds))
        with no_grad():
            for t, d in zip(tensors, ds):
                t.data = t.data + step * d
            f_plus = fn().item()
            for t, d in zip(tensors, ds):
                t.data = t.data - 2 * step * d
            f_minus = fn().item()
            for t, d in zip(tensors, ds):
                t.data = t.data + step * d
        numeric = (f_plus - f_minus) / (2 * step)
        errs[k] = _rel_err(analytic, numeric, atol / tolerance)
    return {
        "max_rel_err": float(errs.max()),
        "median_rel_err": float(np.median(errs)),
        "n_directions": n_directions,
        "passed": bool(errs.max() < tolerance),
        "tolerance": tolerance,
    }


def _tensor_list(params) -> list[Tensor]:
    if isinstance(params, ParamStore):
        return params.tensors()
    return list(params)
