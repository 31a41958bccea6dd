"""Relay model: a frozen random transformation layer plus a closed-form
ridge-regression readout and temperature-calibrated prediction.

The transformation weights are never trained; they are resampled from
their seeded distribution each outer condensation iteration.  The readout
solves the small dual system, so fitting means one Cholesky factorization
of an N' x N' matrix rather than any inner optimization loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class RelayParams:
    """Seeded random layer weights; regenerable bit-exactly from (seed, d, b)."""

    weight: np.ndarray  # d x b
    seed: int
    b: int


def sample_relay(seed: int, d: int, b: int) -> RelayParams:
    """Draw i.i.d. zero-mean Gaussian weights with variance 2/d.

    Uses numpy's PCG64 generator, so identical (seed, d, b) reproduces the
    matrix bitwise on any platform.
    """
    if b < 1:
        raise ValueError("hidden width b must be >= 1")
    rng = np.random.default_rng(seed)
    weight = rng.normal(0.0, math.sqrt(2.0 / d), size=(d, b))
    return RelayParams(weight=weight, seed=seed, b=b)


def transform(theta: RelayParams, H):
    """P = relu(H @ weight).  Accepts an array or a tape node."""
    return ad.relu(ad.matmul(H, theta.weight))


def krr_fit(P, Yp, lam: float):
    """Closed-form ridge readout W = P^T (P P^T + lam I)^{-1} Yp.

    The inverted system is only N' x N'.  When P is a tape node the
    result is differentiable with respect to P through the solve.
    """
    if lam <= 0:
        raise ValueError("ridge constant must be positive")
    n = ad._val(P).shape[0]
    pt = ad.transpose(P)
    gram = ad.add(ad.matmul(P, pt), lam * np.eye(n))
    return ad.matmul(pt, ad.spd_solve(gram, Yp))


def predict_logprobs(theta: RelayParams, W, H, tau: float):
    """Row log-probabilities: log-softmax of (relu(H weight) W) / tau."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = ad.matmul(transform(theta, H), W)
    return ad.log_softmax(logits, math.log(tau))
