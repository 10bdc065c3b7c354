"""Dissipativity-ensuring control: barrier bookkeeping and min-norm projection.

Each node tracks a barrier value b(t), the negative running sum of
w_tilde = w_node - w_desired since the episode started.  Keeping

    -w_tilde(u, nu, y_u, y_nu) + eta * b(t) >= 0

at every step renders b nonnegative forever (comparison with the geometric
recursion X_{t+1} = (1 - eta) X_t), which is exactly the statement that the
closed-loop node remains dissipative with the designer-chosen supply.

Because y_u and y_nu depend on the state only, the constraint is quadratic in
the control:  u'Ru - c'u + K >= 0  with c = S_u' y_u and K collecting every
u-independent term.  The deployed action is the feedforward guess (RL action
plus accumulated past corrections) projected onto the constraint set with
minimum-norm correction.  Two constraint classes are solved exactly in closed
form: affine (R = 0, any control dimension) and scalar with R > 0.  Anything
else raises UnsupportedConstraint rather than silently approximating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dissipativity import eval_supply

FEASIBILITY_TOL = 1e-12


class InfeasibleConstraint(RuntimeError):
    """The constraint set (intersected with the box) is empty at this step."""

    def __init__(self, detail, node=None, t=None):
        self.node = node
        self.t = t
        where = "" if node is None else f" (node {node}, step {t})"
        super().__init__(f"infeasible dissipativity constraint{where}: {detail}")


class UnsupportedConstraint(RuntimeError):
    """Constraint class outside the exactly solvable families."""


@dataclass(frozen=True)
class ShieldConfig:
    """Per-node shield parameters.

    delta_d and epsilon_d weigh the desired supply; eta in [0, 1] sets the
    barrier decay rate; u_min/u_max bound the deployed control in its
    physical units (None disables the box).
    """

    delta_d: float = 0.0
    epsilon_d: float = 0.0
    eta: float = 0.1
    u_min: float | None = None
    u_max: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not np.isfinite(self.delta_d) or not np.isfinite(self.epsilon_d):
            raise ValueError("delta_d and epsilon_d must be finite")
        if (self.u_min is None) != (self.u_max is None):
            raise ValueError("u_min and u_max must be given together")
        if self.u_min is not None and not self.u_min < self.u_max:
            raise ValueError("u_min must be < u_max")

    @property
    def box(self):
        if self.u_min is None:
            return None
        return (self.u_min, self.u_max)


@dataclass(frozen=True)
class BarrierState:
    """Running barrier value; b == 0 at the episode start (empty sum)."""

    b: float = 0.0
    t0: int = 0
    t: int = 0

    @classmethod
    def reset(cls, t0=0):
        return cls(b=0.0, t0=t0, t=t0)


def barrier_update(bs, w_tilde):
    """b <- b - w_tilde; the stored recurrence holds exactly as floats."""
    if not np.isfinite(w_tilde):
        raise ValueError("w_tilde must be finite")
    return BarrierState(b=bs.b - w_tilde, t0=bs.t0, t=bs.t + 1)


def desired_supply(nu, y_u, y_nu, delta_d, epsilon_d, s_nu):
    """Designer supply  nu'S_nu'y_nu - delta_d ||nu||^2 - epsilon_d ||y||^2.

    The output penalty covers the full output y = [y_u; y_nu], so
    ||y||^2 = ||y_u||^2 + ||y_nu||^2.
    """
    nu = np.atleast_1d(np.asarray(nu, float))
    y_u = np.atleast_1d(np.asarray(y_u, float))
    y_nu = np.atleast_1d(np.asarray(y_nu, float))
    s_nu = np.atleast_2d(np.asarray(s_nu, float))
    if s_nu.shape != (y_nu.shape[0], nu.shape[0]):
        raise ValueError(f"s_nu has shape {s_nu.shape}, expected {(y_nu.shape[0], nu.shape[0])}")
    cross = float(nu @ s_nu.T @ y_nu)
    return cross - delta_d * float(nu @ nu) - epsilon_d * (float(y_u @ y_u) + float(y_nu @ y_nu))


@dataclass(frozen=True)
class DissipConstraint:
    """Quadratic admissibility constraint  u'ru - c'u + K >= 0.

    Evaluating at a candidate u reproduces -w_tilde(u, .) + eta * b from the
    raw supplies (to rounding).
    """

    r: np.ndarray
    c: np.ndarray
    k: float

    def evaluate(self, u):
        u = np.atleast_1d(np.asarray(u, float))
        return float(u @ self.r @ u - self.c @ u + self.k)


def build_constraint(w_u, w_nu, cfg, b, nu, y_u, y_nu):
    """Assemble the constraint for the current (nu, y_u, y_nu, b).

    -w_tilde + eta b = u'R_u u - (S_u'y_u)'u
                       + [||y_u||^2_{Q_u} - w_nu(nu, y_nu) + w_d(nu, y) + eta b]
    """
    y_u = np.atleast_1d(np.asarray(y_u, float))
    y_nu = np.atleast_1d(np.asarray(y_nu, float))
    nu = np.atleast_1d(np.asarray(nu, float))
    c = w_u.s.T @ y_u
    k = (
        float(y_u @ w_u.q @ y_u)
        - eval_supply(w_nu, nu, y_nu)
        + desired_supply(nu, y_u, y_nu, cfg.delta_d, cfg.epsilon_d, w_nu.s)
        + cfg.eta * b
    )
    return DissipConstraint(r=w_u.r, c=c, k=k)


def _nudge_feasible(r, c, k, u, lo, hi, direction):
    """Walk u by ulps in `direction` until g(u) = ru^2 - cu + k >= 0."""
    for _ in range(200):
        if r * u * u - c * u + k >= 0.0:
            return u
        nxt = np.nextafter(u, direction)
        nxt = min(max(nxt, lo), hi)
        if nxt == u:
            break
        u = nxt
    if r * u * u - c * u + k >= -FEASIBILITY_TOL * max(1.0, abs(k)):
        return u
    raise InfeasibleConstraint("could not reach the feasible boundary numerically")


def _project_scalar(r, c, k, u_ff, lo, hi):
    """Exact scalar projection onto {u : ru^2 - cu + K >= 0} intersect [lo, hi]."""
    if r < 0.0:
        raise UnsupportedConstraint("negative input weight (bounded feasible set)")

    # feasible set as one or two closed intervals, already intersected with the box
    if r == 0.0:
        if c == 0.0:
            if k >= -FEASIBILITY_TOL * max(1.0, abs(k)):
                intervals = [(lo, hi)]
            else:
                raise InfeasibleConstraint(f"r=0, c=0 and K={k} < 0")
        elif c > 0.0:
            intervals = [(lo, min(hi, k / c))]
        else:
            intervals = [(max(lo, k / c), hi)]
    else:
        disc = c * c - 4.0 * r * k
        if disc <= 0.0:
            intervals = [(lo, hi)]
        else:
            sq = np.sqrt(disc)
            root_lo = (c - sq) / (2.0 * r)
            root_hi = (c + sq) / (2.0 * r)
            intervals = [(lo, min(hi, root_lo)), (max(lo, root_hi), hi)]

    best = None
    for a, b in intervals:
        if a > b:
            continue
        cand = min(max(u_ff, a), b)
        if best is None:
            best = cand
            continue
        dc, db = abs(cand - u_ff), abs(best - u_ff)
        # ties broken toward the larger u for reproducibility
        if dc < db or (dc == db and cand > best):
            best = cand
    if best is None:
        raise InfeasibleConstraint(
            f"box [{lo}, {hi}] does not intersect the admissible set (r={r}, c={c}, K={k})"
        )
    if r * best * best - c * best + k >= 0.0:
        return best
    # rounding landed just outside near a boundary; walk uphill in g by ulps
    grad = 2.0 * r * best - c
    direction = np.inf if grad > 0.0 else -np.inf
    return _nudge_feasible(r, c, k, best, lo, hi, direction)


def project(constraint, u_ff, box=None):
    """Minimum-norm projection of u_ff onto the admissible set.

    Returns (u, a) with a = u - u_ff.  a = 0 whenever u_ff is already
    admissible (and inside the box); the returned u satisfies the constraint
    with residual >= -1e-12.  Affine constraints of any dimension and scalar
    quadratic constraints are solved exactly; multivariate u with a definite
    input weight raises UnsupportedConstraint.
    """
    u_ff = np.atleast_1d(np.asarray(u_ff, float))
    m = u_ff.shape[0]
    if constraint.c.shape != (m,):
        raise ValueError(f"constraint built for control dim {constraint.c.shape[0]}, got {m}")
    r_zero = not np.any(constraint.r)

    if m == 1:
        lo, hi = (box if box is not None else (-np.inf, np.inf))
        u = _project_scalar(float(constraint.r.reshape(())), float(constraint.c[0]),
                            constraint.k, float(u_ff[0]), lo, hi)
        u = np.array([u])
        return u, u - u_ff

    if box is not None:
        raise UnsupportedConstraint("box constraints are only supported for scalar controls")
    if not r_zero:
        raise UnsupportedConstraint("multivariate control with a nonzero input weight")

    # affine case: c'u <= K, closed-form half-space projection
    c = constraint.c
    slack = float(c @ u_ff) - constraint.k
    if slack <= 0.0:
        return u_ff, np.zeros(m)
    cc = float(c @ c)
    if cc == 0.0:
        raise InfeasibleConstraint(f"r=0, c=0 and K={constraint.k} < 0")
    u = u_ff - (slack / cc) * c
    # one ulp-scale inward nudge if rounding left the residual negative
    resid = constraint.evaluate(u)
    if resid < 0.0:
        u = u - (2.0 * abs(resid) / cc + 1e-18) * c
        if constraint.evaluate(u) < -FEASIBILITY_TOL * max(1.0, abs(constraint.k)):
            raise InfeasibleConstraint("projection residual did not converge")
    return u, u - u_ff


def feasibility_fallback(constraint, box):
    """Argmax of the constraint value over the box (scalar controls).

    Used when the admissible set is empty: deploy the least-violating action
    and let the caller mark the episode tainted.
    """
    if box is None:
        raise UnsupportedConstraint("feasibility fallback needs a bounded action box")
    lo, hi = box
    r = float(constraint.r.reshape(())) if constraint.r.size == 1 else None
    if r is None:
        raise UnsupportedConstraint("fallback requires a scalar control")
    candidates = [lo, hi]
    if r < 0.0:
        vertex = float(constraint.c.reshape(())) / (2.0 * r)
        if lo <= vertex <= hi:
            candidates.append(vertex)
    best = max(candidates, key=lambda u: constraint.evaluate(np.array([u])))
    return np.array([best])


class FeedforwardStore:
    """Accumulated past projection corrections, replayed as feedforward.

    Past corrections were pointwise QP solutions, so they are approximated
    from stored (state, correction) pairs.  Modes: 'none' (always zero),
    'knn' (inverse-distance weighted mean of the k nearest stored states),
    'ridge' (linear map with L2 regularization).  Appends during an episode
    land in a pending buffer; the store visible to predict() only changes at
    episode boundaries.
    """

    def __init__(self, obs_dim, control_dim, mode="knn", k=5, ridge_lambda=1e-3,
                 capacity=4096):
        if mode not in ("none", "knn", "ridge"):
            raise ValueError(f"unknown feedforward mode {mode!r}")
        self.obs_dim = obs_dim
        self.control_dim = control_dim
        self.mode = mode
        self.k = int(k)
        self.ridge_lambda = float(ridge_lambda)
        self.capacity = int(capacity)
        self._x = np.empty((0, obs_dim))
        self._u = np.empty((0, control_dim))
        self._pending_x = []
        self._pending_u = []
        self._theta = None

    @property
    def n_stored(self):
        return self._x.shape[0]

    def append(self, x, u_corr):
        self._pending_x.append(np.asarray(x, float).reshape(self.obs_dim))
        self._pending_u.append(np.asarray(u_corr, float).reshape(self.control_dim))

    def end_episode(self):
        """Merge pending pairs, evict to capacity (oldest first), refit."""
        if self._pending_x:
            self._x = np.vstack([self._x, np.array(self._pending_x)])
            self._u = np.vstack([self._u, np.array(self._pending_u)])
            self._pending_x = []
            self._pending_u = []
            if self._x.shape[0] > self.capacity:
                self._x = self._x[-self.capacity:]
                self._u = self._u[-self.capacity:]
        if self.mode == "ridge" and self._x.shape[0] > 0:
            phi = np.hstack([self._x, np.ones((self._x.shape[0], 1))])
            gram = phi.T @ phi + self.ridge_lambda * np.eye(phi.shape[1])
            self._theta = np.linalg.solve(gram, phi.T @ self._u)

    def predict(self, x):
        if self.mode == "none" or self._x.shape[0] == 0:
            return np.zeros(self.control_dim)
        x = np.asarray(x, float).reshape(self.obs_dim)
        if self.mode == "ridge":
            return np.append(x, 1.0) @ self._theta
        d2 = np.sum((self._x - x) ** 2, axis=1)
        k = min(self.k, d2.shape[0])
        idx = np.argpartition(d2, k - 1)[:k]
        d = np.sqrt(d2[idx])
        if np.any(d == 0.0):
            hits = idx[d == 0.0]
            return self._u[hits].mean(axis=0)
        w = 1.0 / d
        return (w @ self._u[idx]) / w.sum()


@dataclass
class ShieldAction:
    """Everything dec_control produced at one step, for logging."""

    u_dec: np.ndarray
    u_rl: np.ndarray
    u_ff: np.ndarray
    u_cbf: np.ndarray
    b_before: float
    w_tilde: float
    constraint: DissipConstraint


def dec_control(x, nu, y_u, y_nu, u_rl, ff_store, bs, cfg, w_u, w_nu):
    """One dissipativity-ensured control decision.

    u_ff = u_rl + accumulated feedforward; u_cbf is the min-norm correction
    into the admissible set; u_dec = u_ff + u_cbf.  The realized
    -w_tilde(u_dec) + eta b is nonnegative by construction, so the barrier
    recursion never dips below (1 - eta)^t b(t0).  Raises InfeasibleConstraint
    when no admissible action exists (the caller decides the fallback).
    """
    u_rl = np.atleast_1d(np.asarray(u_rl, float))
    u_ff = u_rl + ff_store.predict(x)
    constraint = build_constraint(w_u, w_nu, cfg, bs.b, nu, y_u, y_nu)
    u_dec, u_cbf = project(constraint, u_ff, box=cfg.box)
    # the barrier is updated with the constraint's own arithmetic so that
    # b' = (1 - eta) b + g(u_dec) with g >= 0 holds exactly in floats
    g = constraint.evaluate(u_dec)
    w_tilde = cfg.eta * bs.b - g
    return ShieldAction(
        u_dec=u_dec, u_rl=u_rl, u_ff=u_ff, u_cbf=u_cbf,
        b_before=bs.b, w_tilde=w_tilde, constraint=constraint,
    )


class NodeShield:
    """Per-node shield state machine: barrier + feedforward store + config.

    Reads only the owning node's (x, nu, b); safe to evaluate all nodes of a
    timestep in parallel.  A float fast path covers the all-scalar port case
    (it mirrors dec_control exactly; the projection code is shared).
    """

    def __init__(self, node_index, w_u, w_nu, cfg, ff_store):
        self.node_index = node_index
        self.w_u = w_u
        self.w_nu = w_nu
        self.cfg = cfg
        self.ff_store = ff_store
        self.barrier = BarrierState.reset()
        self.episode = 0
        self._scalar = (w_u.input_dim == 1 and w_u.output_dim == 1
                        and w_nu.input_dim == 1 and w_nu.output_dim == 1)
        if self._scalar:
            self._su = float(w_u.s[0, 0])
            self._ru = float(w_u.r[0, 0])
            self._qu = float(w_u.q[0, 0])
            self._sn = float(w_nu.s[0, 0])
            self._rn = float(w_nu.r[0, 0])
            self._qn = float(w_nu.q[0, 0])
            self._lo, self._hi = cfg.box if cfg.box is not None else (-np.inf, np.inf)
            self._r_mat = np.array([[self._ru]])

    def reset_episode(self, t0=0):
        self.barrier = BarrierState.reset(t0)
        self.ff_store.end_episode()
        self.episode += 1

    def _control_scalar(self, x, nu, y_u, y_nu, u_rl):
        b = self.barrier.b
        cfg = self.cfg
        nu_f = float(nu[0])
        yu = float(y_u[0])
        yn = float(y_nu[0])
        u_rl_f = float(u_rl[0])
        ff = float(self.ff_store.predict(x)[0])
        u_ff = u_rl_f + ff
        c = self._su * yu
        cross = nu_f * self._sn * yn
        w_nu_val = cross - self._rn * nu_f * nu_f - self._qn * yn * yn
        w_d_val = cross - cfg.delta_d * nu_f * nu_f - cfg.epsilon_d * (yu * yu + yn * yn)
        k = self._qu * yu * yu - w_nu_val + w_d_val + cfg.eta * b
        u = _project_scalar(self._ru, c, k, u_ff, self._lo, self._hi)
        g = self._ru * u * u - c * u + k
        w_tilde = cfg.eta * b - g
        return ShieldAction(
            u_dec=np.array([u]), u_rl=np.array([u_rl_f]), u_ff=np.array([u_ff]),
            u_cbf=np.array([u - u_ff]), b_before=b, w_tilde=w_tilde,
            constraint=DissipConstraint(r=self._r_mat, c=np.array([c]), k=k),
        )

    def control(self, x, nu, y_u, y_nu, u_rl):
        try:
            if self._scalar:
                act = self._control_scalar(x, nu, y_u, y_nu, u_rl)
            else:
                act = dec_control(x, nu, y_u, y_nu, u_rl, self.ff_store,
                                  self.barrier, self.cfg, self.w_u, self.w_nu)
        except InfeasibleConstraint as err:
            raise InfeasibleConstraint(str(err), node=self.node_index, t=self.barrier.t) from err
        self.barrier = barrier_update(self.barrier, act.w_tilde)
        self.ff_store.append(x, act.u_cbf)
        return act

    def fallback(self, x, nu, y_u, y_nu, u_rl):
        """Deploy the feasibility-maximizing action after an infeasible step."""
        u_rl = np.atleast_1d(np.asarray(u_rl, float))
        u_ff = u_rl + self.ff_store.predict(x)
        constraint = build_constraint(self.w_u, self.w_nu, self.cfg, self.barrier.b, nu, y_u, y_nu)
        u_dec = feasibility_fallback(constraint, self.cfg.box)
        g = constraint.evaluate(u_dec)
        w_tilde = self.cfg.eta * self.barrier.b - g
        act = ShieldAction(u_dec=u_dec, u_rl=u_rl, u_ff=u_ff, u_cbf=u_dec - u_ff,
                           b_before=self.barrier.b, w_tilde=w_tilde, constraint=constraint)
        self.barrier = barrier_update(self.barrier, act.w_tilde)
        self.ff_store.append(x, act.u_cbf)
        return act
