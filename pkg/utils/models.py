"""
Named built-in models. Every model is stored in generator form: the PDE is
    du/dt = sum_ij a_ij d2u/dx_i dx_j + sum_j V0_j du/dx_j,   a = sigma sigma^T
with sigma the diffusion columns V_1..V_m.
"""
from __future__ import annotations

import functools
import logging
import math
from typing import Any, Callable, Dict, Optional, Sequence

import numpy as np

import utils.dual as dual
from utils.fields import Box, VectorFieldSet, load_polynomial_fields
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)


def _square_box(half_width: float, dim: int) -> Box:
    return tuple((-float(half_width), float(half_width)) for _ in range(dim))


def kolmogorov(lambda2: float = 1.0, mu1: float = 1.0, box: Optional[Box] = None, order: int = 4) -> VectorFieldSet:
    """
    du/dt = lambda2 d2u/dx2^2 - mu1 x2 du/dx1. One diffusion column in x2,
    transport in x1 driven by x2.
    """
    if lambda2 <= 0 or mu1 <= 0:
        raise HypokernelError("kolmogorov needs lambda2 > 0 and mu1 > 0")
    root = math.sqrt(lambda2)
    return VectorFieldSet(
        dim=2,
        evaluators=[
            lambda x: (-mu1 * x[1], 0.0),
            lambda x: (0.0, root),
        ],
        box=box or _square_box(10.0, 2),
        order=order,
        name="kolmogorov",
        params={"lambda2": lambda2, "mu1": mu1},
        linear_drift=np.array([[0.0, -mu1], [0.0, 0.0]]),
    )


def grushin(box: Optional[Box] = None, order: int = 4) -> VectorFieldSet:
    """V1 = (1, 0), V2 = (0, x1), no drift. Diffusion degenerates on x1 = 0"""
    return VectorFieldSet(
        dim=2,
        evaluators=[
            lambda x: (0.0, 0.0),
            lambda x: (1.0, 0.0),
            lambda x: (0.0, x[0]),
        ],
        box=box or _square_box(2.0, 2),
        order=order,
        name="grushin",
    )


def elliptic_ou(c: float = 1.0, theta: float = 0.0, dim: int = 2, box: Optional[Box] = None, order: int = 4) -> VectorFieldSet:
    """Constant diffusion a = c I and linear drift -theta x"""
    if c <= 0:
        raise HypokernelError("elliptic_ou needs c > 0")
    root = math.sqrt(c)

    def column(k):
        return lambda x: tuple(root if r == k else 0.0 for r in range(dim))

    return VectorFieldSet(
        dim=dim,
        evaluators=[lambda x: tuple(-theta * x[r] for r in range(dim))]
        + [column(k) for k in range(dim)],
        box=box or _square_box(10.0, dim),
        order=order,
        name="elliptic_ou",
        params={"c": c, "theta": theta},
        linear_drift=-theta * np.eye(dim),
    )


def weak_lipschitz(lambda2: float = 1.0, mu1: float = 1.0, kappa: float = 0.5, box: Optional[Box] = None, order: int = 4) -> VectorFieldSet:
    """
    Kolmogorov-type model with the globally Lipschitz drift
    V0 = (-mu1 (x2 + kappa |x2|), 0). The drift is smooth off the line x2 = 0
    and kappa < 1 keeps the bracket [V1, V0] non-zero on both sides.
    """
    if not 0 <= kappa < 1:
        raise HypokernelError("weak_lipschitz needs 0 <= kappa < 1")
    root = math.sqrt(lambda2)
    return VectorFieldSet(
        dim=2,
        evaluators=[
            lambda x: (-mu1 * (x[1] + kappa * dual.fabs(x[1])), 0.0),
            lambda x: (0.0, root),
        ],
        box=box or _square_box(10.0, 2),
        order=order,
        smoothness="lipschitz",
        smooth_at=lambda x: abs(x[1]) > 1e-12,
        name="weak_lipschitz",
        params={"lambda2": lambda2, "mu1": mu1, "kappa": kappa},
    )


def sine_1d(eps: float = 0.1, box: Optional[Box] = None, order: int = 4) -> VectorFieldSet:
    """du/dt = (1 + eps sin x) d2u/dx2"""
    if not 0 <= eps < 1:
        raise HypokernelError("sine_1d needs 0 <= eps < 1")
    return VectorFieldSet(
        dim=1,
        evaluators=[
            lambda x: (0.0,),
            lambda x: (dual.sqrt(1.0 + eps * dual.sin(x[0])),),
        ],
        box=box or _square_box(10.0, 1),
        order=order,
        name="sine_1d",
        params={"eps": eps},
    )


def zero(dim: int = 2, box: Optional[Box] = None, order: int = 4) -> VectorFieldSet:
    """Identically zero drift and a single zero column"""
    return VectorFieldSet(
        dim=dim,
        evaluators=[lambda x: (0.0,) * dim, lambda x: (0.0,) * dim],
        box=box or _square_box(1.0, dim),
        order=order,
        name="zero",
        linear_drift=np.zeros((dim, dim)),
    )


MODEL_REGISTRY: Dict[str, Callable[..., VectorFieldSet]] = {
    "kolmogorov": kolmogorov,
    "grushin": grushin,
    "elliptic_ou": elliptic_ou,
    "weak_lipschitz": weak_lipschitz,
    "sine_1d": sine_1d,
    "zero": zero,
}

# parameters each built-in accepts, used to validate configuration
MODEL_PARAMETERS: Dict[str, Sequence[str]] = {
    "kolmogorov": ("lambda2", "mu1"),
    "grushin": (),
    "elliptic_ou": ("c", "theta", "dim"),
    "weak_lipschitz": ("lambda2", "mu1", "kappa"),
    "sine_1d": ("eps",),
    "zero": ("dim",),
}


def build_model(name: str, params: Optional[Dict[str, Any]] = None, box: Optional[Box] = None, order: int = 4) -> VectorFieldSet:
    """
    Build a named model.
    Raises:
        HypokernelError: unknown model name or a parameter the model does not take
    """
    if name not in MODEL_REGISTRY:
        raise HypokernelError(
            "unknown model {}, known models are {}".format(name, sorted(MODEL_REGISTRY))
        )
    params = params or {}
    accepted = MODEL_PARAMETERS[name]
    kwargs = {}
    for key, value in params.items():
        if key not in accepted:
            raise HypokernelError(
                "model {} has no parameter {}; accepted: {}".format(name, key, ", ".join(accepted) or "none")
            )
        if value is None:
            continue
        kwargs[key] = int(value) if key == "dim" else float(value)
    return MODEL_REGISTRY[name](box=box, order=order, **kwargs)


def load_model_file(path: str, box: Box, order: int = 4) -> VectorFieldSet:
    """Load a polynomial coefficient table from a file"""
    with open(path, "r") as f:
        text = f.read()
    return load_polynomial_fields(text, box=box, order=order, name="polynomial")
