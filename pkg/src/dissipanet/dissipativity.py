"""QSR supply rates, trajectory certificates, and interconnection checks.

A quadratic supply rate w(a, y) = a'S'y - a'Ra - y'Qy measures the energy a
port exchanges per step.  Dissipativity is certified storage-free: along a
trajectory that starts at the rest state, every prefix sum of the supply must
be nonnegative (up to tolerance).  Two structural checks guard the network
guarantee:

  * the cross weights S_nu / S_e must commute with the incidence matrix
    (B'S_nu' - S_e B' = 0), so coupling cross terms cancel exactly;
  * the margin matrices eps_e I + alpha B'B and beta I + delta_e B B' must be
    positive semidefinite, which bounds the whole network's cumulative
    desired-plus-edge supply by a nonpositive quadratic.

Eigenvalues are computed with a cyclic Jacobi sweep; the matrices involved are
small and dense.

Tolerance policy: structural identities 1e-12, spectral checks 1e-10,
trajectory inequalities 1e-8 (rounding accumulated over ~1e4 steps).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRUCTURAL_TOL = 1e-12
SPECTRAL_TOL = 1e-10
TRAJECTORY_TOL = 1e-8


class EigensolverError(RuntimeError):
    """Cyclic Jacobi failed to converge within the sweep budget."""


class QsrSupply:
    """One quadratic supply rate w(a, y) = a'S'y - a'Ra - y'Qy.

    q is the output weight (o x o), s the cross weight (o x m), r the input
    weight (m x m).  q and r are symmetrized at construction so the stored
    matrices satisfy q = q', r = r' exactly.
    """

    def __init__(self, q, s, r):
        q = np.atleast_2d(np.asarray(q, dtype=float))
        s = np.atleast_2d(np.asarray(s, dtype=float))
        r = np.atleast_2d(np.asarray(r, dtype=float))
        if q.shape[0] != q.shape[1]:
            raise ValueError("q must be square")
        if r.shape[0] != r.shape[1]:
            raise ValueError("r must be square")
        if s.shape != (q.shape[0], r.shape[0]):
            raise ValueError(
                f"s must be {q.shape[0]} x {r.shape[0]} (output x input), got {s.shape}"
            )
        self.q = (q + q.T) / 2.0
        self.s = s
        self.r = (r + r.T) / 2.0
        for a in (self.q, self.s, self.r):
            a.setflags(write=False)

    @property
    def input_dim(self):
        return self.r.shape[0]

    @property
    def output_dim(self):
        return self.q.shape[0]

    def __repr__(self):
        return f"QsrSupply(q={self.q.tolist()}, s={self.s.tolist()}, r={self.r.tolist()})"


def eval_supply(spec, a, y):
    """w(a, y) = a'S'y - a'Ra - y'Qy for one port sample."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if a.shape != (spec.input_dim,):
        raise ValueError(f"input has shape {a.shape}, supply expects ({spec.input_dim},)")
    if y.shape != (spec.output_dim,):
        raise ValueError(f"output has shape {y.shape}, supply expects ({spec.output_dim},)")
    return float(a @ spec.s.T @ y - a @ spec.r @ a - y @ spec.q @ y)


def cumulative_supply_check(trace, tol=TRAJECTORY_TOL):
    """Storage-free dissipativity certificate over one realized trace.

    Returns (ok, first_violation): ok iff every prefix sum of the per-step
    supply values is >= -tol; first_violation is the 0-based index of the
    first step whose inclusive prefix sum dips below, or None.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.ndim != 1:
        raise ValueError("trace must be a 1-d sequence of supply values")
    prefixes = np.cumsum(trace)
    bad = np.flatnonzero(prefixes < -tol)
    if bad.size:
        return False, int(bad[0])
    return True, None


def jacobi_eigenvalues(a, tol=1e-14, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.

    Raises EigensolverError if the off-diagonal mass has not vanished after
    max_sweeps full sweeps.
    """
    a = np.array(a, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    n = a.shape[0]
    if n == 0:
        return np.empty(0)
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix must be symmetric")
    a = (a + a.T) / 2.0
    if n == 1:
        return a.diagonal().copy()

    scale = max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off <= tol * scale:
            return np.sort(np.diagonal(a).copy())
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:           # theta^2 would overflow
                    t = 1.0 / (2.0 * theta)
                elif theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
                else:
                    t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                app, aqq = a[p, p], a[q, q]
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for i in range(n):
                    if i == p or i == q:
                        continue
                    aip, aiq = a[i, p], a[i, q]
                    a[i, p] = aip * c - aiq * s
                    a[p, i] = a[i, p]
                    a[i, q] = aiq * c + aip * s
                    a[q, i] = a[i, q]
    raise EigensolverError(f"no convergence after {max_sweeps} sweeps")


def _block_diag(blocks):
    blocks = [np.atleast_2d(np.asarray(b, float)) for b in blocks]
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


@dataclass(frozen=True)
class SupplySpec:
    """Per-port supply rates for a whole network.

    node_control[i] weights the (u, y_u) port of node i, node_coupling[i] the
    (nu, y_nu) port, edge[k] the (mu, omega) port of edge k.  The derived
    scalars are minimum eigenvalues of the stacked block-diagonal weights;
    with block structure this is the minimum over per-block minima.
    """

    node_control: tuple
    node_coupling: tuple
    edge: tuple

    @staticmethod
    def _min_eig(blocks, attr):
        vals = [jacobi_eigenvalues(getattr(b, attr))[0] for b in blocks]
        return float(min(vals)) if vals else 0.0

    @property
    def eps_u(self):
        return self._min_eig(self.node_control, "q")

    @property
    def delta_u(self):
        return self._min_eig(self.node_control, "r")

    @property
    def eps_nu(self):
        return self._min_eig(self.node_coupling, "q")

    @property
    def delta_nu(self):
        return self._min_eig(self.node_coupling, "r")

    @property
    def eps_e(self):
        return self._min_eig(self.edge, "q")

    @property
    def delta_e(self):
        return self._min_eig(self.edge, "r")

    def s_nu_stacked(self):
        return _block_diag([b.s for b in self.node_coupling])

    def s_e_stacked(self):
        return _block_diag([b.s for b in self.edge])


def cross_weight_residual(topo, s_nu, s_e):
    """Max-abs entry of B'S_nu' - S_e B' for stacked cross weights.

    Zero (to 1e-12) means coupling cross terms cancel exactly in the network
    energy balance; the caller asserts the tolerance.
    """
    b = topo.block_incidence()
    s_nu = np.atleast_2d(np.asarray(s_nu, float))
    s_e = np.atleast_2d(np.asarray(s_e, float))
    if s_nu.shape[1] != b.shape[0]:
        raise ValueError(f"s_nu columns {s_nu.shape[1]} do not match stacked node ports {b.shape[0]}")
    if s_e.shape[0] != b.shape[1]:
        raise ValueError(f"s_e rows {s_e.shape[0]} do not match stacked edge ports {b.shape[1]}")
    resid = b.T @ s_nu.T - s_e @ b.T
    return float(np.abs(resid).max()) if resid.size else 0.0


def interconnection_margins(incidence, eps_e, delta_e, alpha, beta):
    """Minimum eigenvalues of the two network margin matrices.

    Returns (lambda_min(eps_e I + alpha B'B), lambda_min(beta I + delta_e B B')).
    Both >= -1e-10 certifies the stability precondition; strictly positive
    values indicate the asymptotic branch.
    """
    b = incidence.block_incidence() if hasattr(incidence, "block_incidence") else np.atleast_2d(np.asarray(incidence, float))
    n, m = b.shape
    if m == 0:
        return float(eps_e), float(beta)
    b_delta = eps_e * np.eye(m) + alpha * (b.T @ b)
    b_eps = beta * np.eye(n) + delta_e * (b @ b.T)
    return float(jacobi_eigenvalues(b_delta)[0]), float(jacobi_eigenvalues(b_eps)[0])


@dataclass(frozen=True)
class SupplyBoundReport:
    """Cumulative network supply bound along one trajectory."""

    lhs: np.ndarray
    rhs: np.ndarray
    ok: bool
    max_violation: float


def network_supply_bound(io_trace, spec, node_cfgs, topo, tol=TRAJECTORY_TOL):
    """Check the cumulative desired-plus-edge supply against its quadratic bound.

    lhs(t) sums the per-node desired supplies and per-edge supplies up to t;
    rhs(t) is minus the accumulated margin norms
    ||omega||^2_{B_delta(alpha)} + ||y_nu||^2_{B_eps(beta)} + beta ||y_u||^2.
    ok iff lhs(t) <= rhs(t) + tol for every prefix.  The inequality follows
    algebraically from the coupling law plus the cross-weight identity, so a
    violation indicates an implementation bug rather than a bad controller.
    """
    from .shield import desired_supply

    alpha = min(c.delta_d for c in node_cfgs)
    beta = min(c.epsilon_d for c in node_cfgs)
    b = topo.block_incidence()
    n, m = b.shape
    b_delta = spec.eps_e * np.eye(m) + alpha * (b.T @ b)
    b_eps = beta * np.eye(n) + spec.delta_e * (b @ b.T)

    steps = len(io_trace)
    lhs_step = np.zeros(steps)
    rhs_step = np.zeros(steps)
    for t, io in enumerate(io_trace):
        total = 0.0
        for i, cfg in enumerate(node_cfgs):
            total += desired_supply(
                io.nu[i], io.y_u[i], io.y_nu[i],
                cfg.delta_d, cfg.epsilon_d, spec.node_coupling[i].s,
            )
        for k in range(len(io.omega)):
            total += eval_supply(spec.edge[k], io.mu[k], io.omega[k])
        lhs_step[t] = total

        omega = io.stacked("omega")
        y_nu = io.stacked("y_nu")
        y_u = io.stacked("y_u")
        rhs_step[t] = -(omega @ b_delta @ omega + y_nu @ b_eps @ y_nu + beta * (y_u @ y_u))

    lhs = np.cumsum(lhs_step)
    rhs = np.cumsum(rhs_step)
    gap = lhs - rhs
    max_violation = float(gap.max()) if steps else 0.0
    return SupplyBoundReport(lhs=lhs, rhs=rhs, ok=bool(np.all(gap <= tol)), max_violation=max_violation)
