"""CLF-CBF quadratic program used as a comparison baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .controller import StepResult
from .errors import ParameterError
from .qp import QpProblem, solve


def circle_barrier(center, radius):
    """h(x) = |x - o|^2 - r^2, positive outside the disk."""
    o = np.asarray(center, dtype=float)

    def h(x):
        d = np.asarray(x[: len(o)]) - o
        grad = np.zeros(len(x))
        grad[: len(o)] = 2.0 * d
        return float(d @ d) - radius**2, grad

    return h


def quadratic_lyapunov(target, P=None):
    """V(x) = (x - x_T)' P (x - x_T)."""
    xt = np.asarray(target, dtype=float)
    P = np.eye(len(xt)) if P is None else np.asarray(P, dtype=float)

    def V(x):
        d = np.asarray(x) - xt
        Pd = P @ d
        return float(d @ Pd), 2.0 * Pd

    return V


@dataclass(frozen=True)
class CbfConfig:
    e1: float
    e2: float
    barrier: Callable
    lyapunov: Callable
    relaxation: float | None = 1e3

    def __post_init__(self):
        if not (self.e1 > 0 and self.e2 > 0):
            raise ParameterError("e1 and e2 must be positive")
        if self.relaxation is not None and self.relaxation <= 0:
            raise ParameterError("relaxation weight must be positive")


def step_cbf(model, cfg: CbfConfig, x) -> StepResult:
    """min |u|^2 (+ w s^2) s.t. hdot >= -e1 h and Vdot <= -e2 V (+ s)."""
    x = np.asarray(x, dtype=float)
    m = model.m
    f = model.drift(x)
    G = model.input_matrix(x)
    h, gh = cfg.barrier(x)
    V, gV = cfg.lyapunov(x)
    slack = cfg.relaxation is not None
    nv = m + (1 if slack else 0)
    H = np.eye(nv)
    if slack:
        H[-1, -1] = cfg.relaxation
    # barrier: gh.(f + G u) >= -e1 h
    r1 = np.zeros(nv)
    r1[:m] = gh @ G
    b1 = -cfg.e1 * h - float(gh @ f)
    # Lyapunov: -gV.(f + G u) + s >= e2 V
    r2 = np.zeros(nv)
    r2[:m] = -(gV @ G)
    if slack:
        r2[-1] = 1.0
    b2 = cfg.e2 * V + float(gV @ f)
    A = np.array([r1, r2])
    b = np.array([b1, b2])
    s = solve(QpProblem(H, np.zeros(nv), A, b))
    w = s.u_star
    return StepResult(u=w[:m], zeta=float(w[-1]) if slack else float("nan"),
                      constraint_values=A @ w, rhs=b, active_set=s.active_set)
