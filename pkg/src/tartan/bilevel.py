"""Exact and approximate hypergradients on analytic quadratic bilevel problems.

Each task i carries a quadratic loss L_i(theta) = 0.5 theta' A_i theta - b_i' theta,
so the weighted inner problem has a closed-form optimum theta*(w) solving
A(w) theta = b(w), the total Hessian is A(w) itself, and the derivative of the
validation loss with respect to a task weight has an exact implicit-function
form. That makes these instances a reference against which the cheaper
approximations (identity Hessian, truncated Neumann series, one-step lookahead)
can be measured without any approximation error in the reference itself.

Sign convention: the exact hypergradient carries the standard implicit-function
minus sign, d L_val / d w_i = -g_val' H^{-1} g_i, verified here against central
finite differences. All approximations are reported in this same convention so
their errors are directly comparable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .prng import substream

PROXY_MODES = ("exact", "meta_head")


@dataclass(frozen=True)
class QuadraticTaskSet:
    """Tasks 0..n (0 is the end task), a validation pair, and positive weights."""

    a_mats: Tuple[np.ndarray, ...]
    b_vecs: Tuple[np.ndarray, ...]
    a_val: np.ndarray
    b_val: np.ndarray
    weights: Tuple[float, ...]

    def __post_init__(self):
        mats = tuple(np.asarray(a, dtype=np.float64) for a in self.a_mats)
        vecs = tuple(np.asarray(b, dtype=np.float64) for b in self.b_vecs)
        object.__setattr__(self, "a_mats", mats)
        object.__setattr__(self, "b_vecs", vecs)
        object.__setattr__(self, "a_val", np.asarray(self.a_val, dtype=np.float64))
        object.__setattr__(self, "b_val", np.asarray(self.b_val, dtype=np.float64))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        d = self.dimension
        if len(mats) != len(vecs) or len(mats) != len(self.weights):
            raise ValueError("need one (A, b, w) triple per task")
        if len(mats) < 1:
            raise ValueError("need at least the end task")
        for a, b in [*zip(mats, vecs), (self.a_val, self.b_val)]:
            if a.shape != (d, d) or b.shape != (d,):
                raise ValueError(f"inconsistent shapes: A {a.shape}, b {b.shape}, d={d}")
            if np.max(np.abs(a - a.T)) > 1e-12:
                raise ValueError("task matrix not symmetric within 1e-12")
        if any(w <= 0 for w in self.weights):
            raise ValueError("weights must be positive")
        eig_min = float(np.linalg.eigvalsh(total_matrix(self, self.weights)).min())
        if eig_min <= 1e-9:
            raise ValueError(f"weighted total matrix not positive definite (min eig {eig_min:.3e})")

    @property
    def dimension(self) -> int:
        return self.a_mats[0].shape[0]

    @property
    def num_tasks(self) -> int:
        return len(self.a_mats)


def total_matrix(q: QuadraticTaskSet, w: Sequence[float]) -> np.ndarray:
    out = np.zeros((q.dimension, q.dimension))
    for wi, a in zip(w, q.a_mats):
        out += wi * a
    return out


def total_vector(q: QuadraticTaskSet, w: Sequence[float]) -> np.ndarray:
    out = np.zeros(q.dimension)
    for wi, b in zip(w, q.b_vecs):
        out += wi * b
    return out


def task_gradient(q: QuadraticTaskSet, i: int, theta: np.ndarray) -> np.ndarray:
    return q.a_mats[i] @ theta - q.b_vecs[i]


def val_gradient(q: QuadraticTaskSet, theta: np.ndarray) -> np.ndarray:
    return q.a_val @ theta - q.b_val


def val_loss(q: QuadraticTaskSet, theta: np.ndarray) -> float:
    return float(0.5 * theta @ q.a_val @ theta - q.b_val @ theta)


def solve_inner(q: QuadraticTaskSet, w: Optional[Sequence[float]] = None) -> np.ndarray:
    """theta*(w): unique minimizer of the weighted total loss."""
    w = q.weights if w is None else tuple(float(x) for x in w)
    a = total_matrix(q, w)
    eigs = np.linalg.eigvalsh(a)
    if eigs.min() <= 1e-9:
        raise ValueError(f"total matrix not positive definite at these weights (min eig {eigs.min():.3e})")
    cond = eigs.max() / eigs.min()
    if cond > 1e12:
        raise ValueError(f"ill-conditioned system (condition estimate {cond:.3e})")
    b = total_vector(q, w)
    theta = np.linalg.solve(a, b)
    residual = np.linalg.norm(a @ theta - b)
    if residual > 1e-10 * max(1.0, np.linalg.norm(b)):
        raise ValueError(f"inner solve residual too large: {residual:.3e}")
    return theta


def exact_hypergradient(q: QuadraticTaskSet, w: Sequence[float], i: int) -> float:
    """d L_val(theta*(w)) / d w_i via the implicit function theorem."""
    theta = solve_inner(q, w)
    h = total_matrix(q, w)
    x = np.linalg.solve(h, task_gradient(q, i, theta))
    return float(-val_gradient(q, theta) @ x)


def finite_difference_hypergradient(q: QuadraticTaskSet, w: Sequence[float], i: int,
                                    h: float = 1e-5) -> float:
    """Central difference of L_val(theta*(w)) in the i-th weight."""
    if h <= 0:
        raise ValueError("h must be positive")
    for sign in (+1.0, -1.0):
        wp = list(w)
        wp[i] += sign * h
        eigs = np.linalg.eigvalsh(total_matrix(q, wp))
        if eigs.min() <= 1e-9:
            raise ValueError("perturbed weights leave the positive-definite region")
    w_plus = list(w)
    w_plus[i] += h
    w_minus = list(w)
    w_minus[i] -= h
    f_plus = val_loss(q, solve_inner(q, w_plus))
    f_minus = val_loss(q, solve_inner(q, w_minus))
    return (f_plus - f_minus) / (2.0 * h)


def _proxy_point(q: QuadraticTaskSet, w: Sequence[float], proxy_mode: str,
                 inner_steps: int, seed: int) -> np.ndarray:
    if proxy_mode == "exact":
        return solve_inner(q, w)
    if proxy_mode != "meta_head":
        raise ValueError(f"unknown proxy mode {proxy_mode!r}; expected one of {PROXY_MODES}")
    # Partially-converged inner point: a few descent steps from a seeded start,
    # standing in for the briefly-trained-head proxy used during training.
    a = total_matrix(q, w)
    b = total_vector(q, w)
    lr = 1.0 / float(np.linalg.eigvalsh(a).max())
    theta = substream(seed, "init", "bilevel-proxy-start").standard_normal(q.dimension)
    for _ in range(inner_steps):
        theta = theta - lr * (a @ theta - b)
    return theta


def identity_hessian_approx(q: QuadraticTaskSet, w: Sequence[float], i: int,
                            proxy_mode: str = "exact", inner_steps: int = 25,
                            seed: int = 0) -> float:
    """Hypergradient with the inverse Hessian replaced by the identity.

    Reported as -g_val' g_i so that it sits in the same sign convention as
    exact_hypergradient.
    """
    theta = _proxy_point(q, w, proxy_mode, inner_steps, seed)
    return float(-val_gradient(q, theta) @ task_gradient(q, i, theta))


def one_step_approx(q: QuadraticTaskSet, w: Sequence[float], theta_t: np.ndarray,
                    i: int, beta: float) -> float:
    """One-step lookahead value at an arbitrary iterate: -beta g_i(theta_t)' g_val(theta_t)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    theta_t = np.asarray(theta_t, dtype=np.float64)
    return float(-beta * (task_gradient(q, i, theta_t) @ val_gradient(q, theta_t)))


def neumann_inverse(h: np.ndarray, k: int) -> np.ndarray:
    """Truncated Neumann series sum_{j=0}^{k} (I - H)^j.

    k = 0 is the identity approximation; the series converges to H^{-1} iff
    every eigenvalue of H lies in (0, 2). Divergence outside that region is a
    measured outcome, not an error.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("H must be square")
    if np.max(np.abs(h - h.T)) > 1e-12:
        raise ValueError("H must be symmetric")
    if k < 0:
        raise ValueError("k must be >= 0")
    d = h.shape[0]
    m = np.eye(d) - h
    total = np.eye(d)
    power = np.eye(d)
    for _ in range(k):
        power = power @ m
        total = total + power
    return total


def random_instance(seed: int, dim: int, n_aux: int,
                    eig_range: Tuple[float, float] = (0.5, 2.0),
                    weight_range: Tuple[float, float] = (0.2, 1.0)) -> QuadraticTaskSet:
    """Well-conditioned random instance: rotated spectra in eig_range per task."""
    rng = substream(seed, "init", "quad-instance")

    def psd(local_rng) -> np.ndarray:
        qmat, _ = np.linalg.qr(local_rng.standard_normal((dim, dim)))
        eigs = local_rng.uniform(eig_range[0], eig_range[1], size=dim)
        a = (qmat * eigs) @ qmat.T
        return (a + a.T) / 2.0

    mats = tuple(psd(rng) for _ in range(n_aux + 1))
    vecs = tuple(rng.standard_normal(dim) for _ in range(n_aux + 1))
    a_val = psd(rng)
    b_val = rng.standard_normal(dim)
    w = tuple(rng.uniform(weight_range[0], weight_range[1], size=n_aux + 1).tolist())
    return QuadraticTaskSet(a_mats=mats, b_vecs=vecs, a_val=a_val, b_val=b_val, weights=w)


def one_dim_instance(a: float, c: float, v: float, w_end: float, w_aux: float) -> QuadraticTaskSet:
    """1-D instance with L* = (theta-a)^2, L_1 = (theta-c)^2, L_val = (theta-v)^2."""
    return QuadraticTaskSet(
        a_mats=(np.array([[2.0]]), np.array([[2.0]])),
        b_vecs=(np.array([2.0 * a]), np.array([2.0 * c])),
        a_val=np.array([[2.0]]),
        b_val=np.array([2.0 * v]),
        weights=(w_end, w_aux),
    )
