"""Small dense strictly convex QPs.

    minimize    u' H u + J' u
    subject to  a_i' u >= b_i

Two solvers: the single-constraint closed form (an H-metric projection of the
unconstrained minimizer) and a dual active-set method for the general case.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConstraint, IllConditioned, Infeasible

EIG_FLOOR = 1e-10
FEAS_TOL = 1e-9
DEGENERATE_TOL = 1e-14


@dataclass
class QpProblem:
    H: np.ndarray
    J: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = self.H.shape[0]
        self.J = np.zeros(d) if self.J is None else np.asarray(self.J, dtype=float).reshape(d)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, d)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.H.shape != (d, d) or not np.allclose(self.H, self.H.T, rtol=1e-12, atol=1e-14):
            raise IllConditioned("H must be square and symmetric")
        if len(self.b) != len(self.A):
            raise ValueError("one right-hand side per constraint row")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("constraint rows must be finite")
        if np.linalg.eigvalsh(self.H).min() < EIG_FLOOR:
            raise IllConditioned("H has an eigenvalue below the floor")

    @classmethod
    def from_constraints(cls, H, J, constraints):
        """Build from a list of (a, b) pairs meaning a . u >= b."""
        H = np.atleast_2d(np.asarray(H, dtype=float))
        d = H.shape[0]
        if constraints:
            A = np.array([np.asarray(a, dtype=float) for a, _ in constraints]).reshape(-1, d)
            b = np.array([float(bb) for _, bb in constraints])
        else:
            A, b = np.zeros((0, d)), np.zeros(0)
        return cls(H, J, A, b)

    @property
    def d(self):
        return self.H.shape[0]

    @property
    def constraints(self):
        return list(zip(self.A, self.b))

    def objective(self, u):
        return float(u @ self.H @ u + self.J @ u)

    def violation(self, u):
        """Largest relative shortfall max_i (b_i - a_i u) / (1 + |b_i|), floored at 0."""
        if len(self.b) == 0:
            return 0.0
        return max(0.0, float(np.max((self.b - self.A @ u) / (1.0 + np.abs(self.b)))))

    def to_csv(self, path):
        """Debug dump: one row per line, H rows then J then [a | b] rows."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in self.H:
                fh.write("H," + ",".join(f"{v:.17g}" for v in row) + "\n")
            fh.write("J," + ",".join(f"{v:.17g}" for v in self.J) + "\n")
            for a, bb in zip(self.A, self.b):
                fh.write("a," + ",".join(f"{v:.17g}" for v in a) + f",{bb:.17g}\n")


@dataclass
class QpSolution:
    u_star: np.ndarray
    active_set: tuple
    objective: float
    max_violation: float
    multipliers: np.ndarray | None = field(default=None, repr=False)


def _unconstrained(H, J):
    # gradient 2 H u + J = 0
    return np.linalg.solve(H, -0.5 * J)


def solve_single_constraint_closed_form(H, J, a, b) -> QpSolution:
    """Closed-form minimizer with one constraint a . u >= b.

    With u_hat the unconstrained minimizer, the constraint in shifted form is
    <y, v> <= q where y = -H^{-1} a (H inner product) and q = a . u_hat - b.
    The correction is v* = omega(q) y / <y, y> with omega(r) = min(r, 0).
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    J = np.zeros(H.shape[0]) if J is None else np.asarray(J, dtype=float)
    a = np.asarray(a, dtype=float)
    Hinv_a = np.linalg.solve(H, a)
    yy = float(a @ Hinv_a)
    if yy <= DEGENERATE_TOL:
        raise DegenerateConstraint("a' H^-1 a vanishes")
    u_hat = _unconstrained(H, J)
    q = float(a @ u_hat) - b
    omega = q if q <= 0 else 0.0
    y = -Hinv_a
    u = u_hat + omega * y / yy
    mult = -2.0 * omega / yy
    p = QpProblem(H, J, a.reshape(1, -1), np.array([b]))
    return QpSolution(u, (0,) if omega < 0 else (), p.objective(u), p.violation(u), np.array([mult]))


def solve_active_set(p: QpProblem, max_iter=500) -> QpSolution:
    """Dual active-set method (Goldfarb-Idnani) on the row-normalized problem.

    Starts at the unconstrained minimizer and repeatedly adds the lowest-index
    violated constraint, dropping active ones whose multiplier would turn
    negative. Constraints stay linearly independent in the active set, and the
    fixed index order keeps results deterministic. Iterates live in whitened
    coordinates y = L' u with 2H = L L', where the Hessian is the identity.
    """
    d = p.d
    G = 2.0 * p.H
    L = np.linalg.cholesky(G)
    norms = np.linalg.norm(p.A, axis=1)
    ncon = len(p.b)

    for i in range(ncon):
        if norms[i] == 0.0 and p.b[i] > FEAS_TOL * (1.0 + abs(p.b[i])):
            y = np.zeros(ncon)
            y[i] = 1.0
            raise Infeasible(f"constraint {i} reads 0 >= {p.b[i]}", certificate=y)
    keep = norms > 0
    safe = np.where(keep, norms, 1.0)
    C = p.A / safe[:, None]
    bn = p.b / safe
    # whitened normals: a' u = (L^-1 a)' y
    Cw = np.linalg.solve(L, C.T).T if ncon else np.zeros((0, d))

    y = -np.linalg.solve(L, p.J)
    active: list[int] = []
    mult = np.zeros(0)

    for _ in range(max_iter):
        slack = Cw @ y - bn
        tol = FEAS_TOL * (1.0 + np.abs(bn))
        violated = [i for i in range(ncon) if keep[i] and i not in active and slack[i] < -tol[i]]
        if not violated:
            break
        q = violated[0]
        n_plus = Cw[q]
        mult_plus = np.append(mult, 0.0)
        while True:
            if active:
                Q, R = np.linalg.qr(Cw[active].T)
                proj = Q.T @ n_plus
                r = np.linalg.solve(R, proj)
                z = n_plus - Q @ proj
            else:
                r = np.zeros(0)
                z = n_plus
            dependent = len(active) >= d or np.linalg.norm(z) <= 1e-9 * np.linalg.norm(n_plus)
            # dual step length limited by multipliers that would go negative
            t1, drop = np.inf, -1
            for j in range(len(r)):
                if r[j] > 0:
                    tj = mult_plus[j] / r[j]
                    if tj < t1 - 1e-15:
                        t1, drop = tj, j
            s_q = float(n_plus @ y - bn[q])
            t2 = np.inf if dependent else -s_q / float(z @ z)
            t = min(t1, t2)
            if not np.isfinite(t):
                cert = np.zeros(ncon)
                cert[q] = 1.0 / safe[q]
                for j, idx in enumerate(active):
                    cert[idx] = -r[j] / safe[idx]
                raise Infeasible(f"constraint {q} cannot be satisfied together with {sorted(active)}",
                                 certificate=np.maximum(cert, 0.0))
            if np.isfinite(t2):
                y = y + t * z
            mult_plus[:-1] -= t * r
            mult_plus[-1] += t
            if t == t2:
                active.append(q)
                mult = mult_plus
                break
            del active[drop]
            mult_plus = np.delete(mult_plus, drop)
    else:
        raise IllConditioned("active-set iteration limit reached")

    x = np.linalg.solve(L.T, y)
    if active:
        x, mult = _polish(G, p.J, C, bn, keep, active, x, mult)
    full = np.zeros(ncon)
    for j, idx in enumerate(active):
        full[idx] = max(mult[j], 0.0) / safe[idx]
    order = sorted(range(len(active)), key=lambda j: active[j])
    return QpSolution(x, tuple(active[j] for j in order), p.objective(x), p.violation(x), full)


def _polish(G, J, C, bn, keep, active, x, mult):
    """Re-solve the KKT system of the final active set to remove drift from
    the rank-one updates; keep the iterate if the re-solve is not better."""
    N = C[active].T
    k = len(active)
    K = np.block([[G, -N], [N.T, np.zeros((k, k))]])
    try:
        sol = np.linalg.solve(K, np.concatenate([-J, bn[active]]))
    except np.linalg.LinAlgError:
        return x, mult
    xp, mp = sol[: len(x)], sol[len(x):]
    if not np.all(np.isfinite(sol)) or np.any(mp < -1e-9 * (1.0 + np.abs(mp).max())):
        return x, mult
    tol = FEAS_TOL * (1.0 + np.abs(bn))
    if np.any(((C @ xp - bn) < -tol) & keep):
        return x, mult
    return xp, np.maximum(mp, 0.0)


def solve(p: QpProblem) -> QpSolution:
    """Closed form for a single nondegenerate constraint, active set otherwise."""
    if len(p.b) == 1:
        try:
            return solve_single_constraint_closed_form(p.H, p.J, p.A[0], p.b[0])
        except DegenerateConstraint:
            pass
    return solve_active_set(p)


def kkt_residuals(p: QpProblem, s: QpSolution):
    """Return (stationarity, feasibility, complementarity) in the inf-norm.

    Multipliers come from the solution when present, otherwise from a
    nonnegative least-squares fit over the reported active set.
    """
    u = np.asarray(s.u_star, dtype=float)
    grad = 2.0 * p.H @ u + p.J
    if s.multipliers is not None:
        mu = np.asarray(s.multipliers, dtype=float)
    else:
        mu = np.zeros(len(p.b))
        idx = list(s.active_set)
        if idx:
            from scipy.optimize import nnls

            sol, _ = nnls(p.A[idx].T, grad)
            mu[idx] = sol
    stationarity = float(np.max(np.abs(grad - p.A.T @ mu))) if len(grad) else 0.0
    if len(p.b):
        gap = p.A @ u - p.b
        feasibility = max(0.0, float(np.max(-gap)))
        complementarity = float(np.max(np.abs(mu * gap)))
        stationarity = max(stationarity, float(np.max(np.maximum(-mu, 0.0))))
    else:
        feasibility = complementarity = 0.0
    return stationarity, feasibility, complementarity


def problem_scale(p: QpProblem):
    parts = [np.abs(p.H).max(), np.abs(p.J).max(initial=0.0)]
    if len(p.b):
        parts += [np.abs(p.A).max(), np.abs(p.b).max()]
    return float(max(parts))
