"""Analytic navigation density rho(x) = Psi(x) / D(x)**alpha.

Each obstacle contributes an inverse bump Psi_k built from two level-set
functions: c_k (unsafe where c_k <= 0) and b_k (sensing region where
b_k <= 0). D is the P-weighted squared distance to the target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GeometryError, SingularityError

M_CLAMP = 1e-12

INSIDE = "inside-obstacle"
TRANSITION = "transition"
FREE = "free"


def _sgn(v):
    # sgn(0) = 0 keeps the lane-keeping level sets continuous at x2 = 0
    return int(v > 0) - int(v < 0)


@dataclass(frozen=True)
class ObstacleSpec:
    """One obstacle and its sensing band.

    ``circle``: c = |p - center|^2 - r1^2, b = |p - center|^2 - r2^2 on the
    first ``len(center)`` states, so r2 > r1.

    ``lk-band``: one lane edge, c = r1 - side*(x1 + x2|x2| / (2 a_max)) and
    the same with r2; ``side`` = +1 for the upper edge, -1 for the lower one.
    Here r2 < r1.
    """

    kind: str
    r1: float
    r2: float
    center: tuple = ()
    a_max: float | None = None
    side: int = 1

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.kind == "circle":
            if not self.center:
                raise GeometryError("circle obstacle needs a center")
            if not (self.r2 > self.r1 > 0):
                raise GeometryError(f"circle needs r2 > r1 > 0, got r1={self.r1}, r2={self.r2}")
        elif self.kind == "lk-band":
            if self.a_max is None or self.a_max <= 0:
                raise GeometryError("lk-band needs a_max > 0")
            if not (self.r1 > self.r2):
                raise GeometryError(f"lk-band needs r1 > r2, got r1={self.r1}, r2={self.r2}")
            if self.side not in (1, -1):
                raise GeometryError("lk-band side must be +1 or -1")
        else:
            raise GeometryError(f"unknown obstacle kind {self.kind!r}")

    def level_sets(self, x):
        """Return (c, b, grad_c, grad_b) at state ``x``."""
        n = len(x)
        grad = np.zeros(n)
        if self.kind == "circle":
            k = len(self.center)
            d = x[:k] - np.asarray(self.center)
            r2 = float(d @ d)
            grad[:k] = 2.0 * d
            return r2 - self.r1**2, r2 - self.r2**2, grad, grad
        x1, x2 = float(x[0]), float(x[1])
        w = self.side * (x1 + 0.5 * _sgn(x2) * x2 * x2 / self.a_max)
        grad[0] = -self.side
        grad[1] = -self.side * abs(x2) / self.a_max
        return self.r1 - w, self.r2 - w, grad, grad

    def clearance(self, x):
        return self.level_sets(np.asarray(x, dtype=float))[0]


@dataclass(frozen=True)
class DensityConfig:
    obstacles: tuple
    target: np.ndarray
    alpha: float = 0.2
    P: np.ndarray | None = None
    eta: float = 0.05

    def __post_init__(self):
        target = np.asarray(self.target, dtype=float)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        P = np.eye(len(target)) if self.P is None else np.asarray(self.P, dtype=float)
        object.__setattr__(self, "P", P)
        if self.alpha <= 0:
            raise GeometryError("alpha must be positive")
        if self.eta <= 0:
            raise GeometryError("eta must be positive")
        if P.shape != (len(target), len(target)) or not np.allclose(P, P.T):
            raise GeometryError("P must be symmetric with the target's dimension")
        if np.linalg.eigvalsh(P).min() <= 0:
            raise GeometryError("P must be positive definite")
        for ob in self.obstacles:
            _, b, _, _ = ob.level_sets(target)
            if b <= 0:
                raise GeometryError(f"target lies inside the sensing region of {ob}")

    @property
    def n(self):
        return len(self.target)


@dataclass
class DensityEval:
    rho: float
    grad_rho: np.ndarray
    psi: float
    dist: float
    region: str
    grad_psi: np.ndarray = field(repr=False, default=None)
    grad_dist: np.ndarray = field(repr=False, default=None)
    log_rho: float = -math.inf
    grad_log_rho: np.ndarray = field(repr=False, default=None)


def eval_bump_scalar(m):
    """Smooth step exp(-1/m) / (exp(-1/m) + exp(-1/(1-m))) on (0, 1)."""
    if not (0.0 < m < 1.0):
        raise DomainError(f"bump argument must lie in (0, 1), got {m}")
    return _bump(m)[0]


def _bump_log(m):
    """Return (log psi, dlog psi/dm) without underflow."""
    m = min(max(m, M_CLAMP), 1.0 - M_CLAMP)
    s = 1.0 / m - 1.0 / (1.0 - m)
    # log psi = -softplus(s)
    log_psi = -(max(s, 0.0) + math.log1p(math.exp(-abs(s))))
    # 1 - psi = sigmoid(s), written so neither branch overflows
    if s >= 0:
        one_minus = 1.0 / (1.0 + math.exp(-s))
    else:
        e = math.exp(s)
        one_minus = e / (1.0 + e)
    return log_psi, one_minus * (1.0 / (m * m) + 1.0 / ((1.0 - m) ** 2))


def _bump(m):
    """Return (psi, dpsi/dm) for m already inside (0, 1)."""
    m = min(max(m, M_CLAMP), 1.0 - M_CLAMP)
    # psi = 1 / (1 + exp(s)) with s = 1/m - 1/(1-m)
    s = 1.0 / m - 1.0 / (1.0 - m)
    if s >= 0:
        e = math.exp(-s) if s < 745 else 0.0
        psi = e / (1.0 + e)
    else:
        e = math.exp(s) if s > -745 else 0.0
        psi = 1.0 / (1.0 + e)
    dpsi = psi * (1.0 - psi) * (1.0 / (m * m) + 1.0 / ((1.0 - m) ** 2))
    return psi, dpsi


def eval_obstacle(ob, x):
    """Return (Psi_k, grad Psi_k, region, c_k) for one obstacle."""
    psi, grad, region, c, _, _ = _eval_obstacle_full(ob, x)
    return psi, grad, region, c


def _eval_obstacle_full(ob, x):
    # also returns log Psi_k and grad log Psi_k
    c, b, gc, gb = ob.level_sets(x)
    n = len(x)
    if c <= 0:
        return 0.0, np.zeros(n), INSIDE, c, -math.inf, np.zeros(n)
    if b > 0:
        return 1.0, np.zeros(n), FREE, c, 0.0, np.zeros(n)
    denom = c - b
    m = c / denom
    grad_m = (gc * denom - c * (gc - gb)) / (denom * denom)
    psi, dpsi = _bump(m)
    log_psi, dlog = _bump_log(m)
    return psi, dpsi * grad_m, TRANSITION, c, log_psi, dlog * grad_m


def distance(cfg, x):
    d = x - cfg.target
    Pd = cfg.P @ d
    return float(d @ Pd), 2.0 * Pd


def eval_density(cfg: DensityConfig, x) -> DensityEval:
    x = np.asarray(x, dtype=float)
    n = len(x)
    psi = 1.0
    grad_psi = np.zeros(n)
    log_psi = 0.0
    grad_log_psi = np.zeros(n)
    region = FREE
    for ob in cfg.obstacles:
        pk, gk, reg, _, lk, glk = _eval_obstacle_full(ob, x)
        log_psi += lk
        grad_log_psi = grad_log_psi + glk
        if reg == INSIDE:
            region = INSIDE
        elif reg == TRANSITION and region == FREE:
            region = TRANSITION
        # product rule: grad(psi * pk) = pk * grad psi + psi * grad pk
        grad_psi = pk * grad_psi + psi * gk
        psi *= pk
    dist, grad_dist = distance(cfg, x)
    if dist <= 0.0:
        raise SingularityError("density is singular at the target point")
    if region == INSIDE:
        return DensityEval(0.0, np.zeros(n), 0.0, dist, INSIDE, np.zeros(n), grad_dist, -math.inf, np.zeros(n))
    log_rho = log_psi - cfg.alpha * math.log(dist)
    grad_log_rho = grad_log_psi - cfg.alpha * grad_dist / dist
    rho = math.exp(log_rho) if log_rho < 709.0 else math.inf
    grad_rho = rho * grad_log_rho if math.isfinite(rho) else np.full(n, math.nan)
    if psi > 0.0 and rho > 0.0 and math.isfinite(rho):
        # direct product form where it is representable
        da = dist ** (-cfg.alpha)
        grad_rho = grad_psi * da - cfg.alpha * rho * grad_dist / dist
    return DensityEval(rho, grad_rho, psi, dist, region, grad_psi, grad_dist, log_rho, grad_log_rho)


def min_clearance(cfg, x):
    """min_k c_k(x); nonpositive means the state is inside an obstacle."""
    if not cfg.obstacles:
        return math.inf
    x = np.asarray(x, dtype=float)
    return min(ob.level_sets(x)[0] for ob in cfg.obstacles)


def density_grid(cfg: DensityConfig, bounds, resolution):
    """Evaluate rho on a regular grid.

    ``bounds`` is a sequence of (lo, hi) per axis and ``resolution`` the point
    count per axis. Returns ``(points, rho)`` in row-major order (last axis
    fastest). A grid point that coincides with the target gets ``inf``.
    """
    bounds = [tuple(map(float, b)) for b in bounds]
    resolution = [int(r) for r in resolution]
    if len(bounds) != cfg.n or len(resolution) != cfg.n:
        raise DomainError("bounds and resolution must match the state dimension")
    if any(r < 2 for r in resolution):
        raise DomainError("resolution must be at least 2 per axis")
    axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(bounds, resolution)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([g.ravel() for g in mesh], axis=1)
    rho = np.empty(len(points))
    for i, p in enumerate(points):
        try:
            rho[i] = eval_density(cfg, p).rho
        except SingularityError:
            rho[i] = math.inf
    return points, rho


def write_grid_csv(path, points, rho):
    n = points.shape[1]
    header = ",".join([f"x{i + 1}" for i in range(n)] + ["rho"])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for p, r in zip(points, rho):
            fh.write(",".join(f"{v:.17g}" for v in (*p, r)) + "\n")
