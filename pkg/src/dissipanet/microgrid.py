"""DC microgrid case study: buck-converter nodes on a resistive-inductive ring.

Each node is a DC-DC buck converter feeding a constant-conductance load

    I' = I - (Ts/L) (R I + V - u Vs)        u in (0, 1), duty cycle
    V' = V + (Ts/C) (I - G V + nu)

and each edge is a transmission line

    I_l' = I_l - (Ts/L_l) (R_l I_l + mu),   omega = -(I_l - I_l_eq).

The regulation target V_ref defines a forced equilibrium; simulation runs in
coordinates shifted so that point is the origin.  For the supply accounting
the node's control port is the converter voltage deviation u_volts =
(u - u_eq) Vs rather than the raw duty cycle: with that scaling the shifted
node is exactly lossless in continuous time for the supplies

    w_u  = u_volts * y_u  - R |y_u|^2      (y_u  = I - I_eq)
    w_nu = nu * y_nu      - G |y_nu|^2     (y_nu = V - V_eq)
    w_e  = mu * omega     - R_l |omega|^2

so cumulative supply checks certify the model rather than fight the scaling.

The edge output sign matters: with the head-positive incidence matrix and
the coupling law mu = -B' y_nu, the line state driven by -(R_l I_l + mu)
grows when the head voltage exceeds the tail voltage, so the deviation
current measured toward the head is -(I_l - I_l_eq).  Emitting that as omega
makes mu' omega the physical power entering the line, the interconnection
routes power from higher to lower voltage (anything else is anti-passive and
blows the network up), and the supplies above hold exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dissipativity import QsrSupply, SupplySpec
from .netmodel import EdgeSystem, NetworkTopology, NodeSystem

EQUILIBRIUM_TOL = 1e-10


class InfeasibleReferenceError(ValueError):
    """The requested voltages need a duty cycle outside (0, 1); names the node."""

    def __init__(self, node, duty):
        self.node = node
        self.duty = duty
        super().__init__(f"node {node}: reference requires duty cycle {duty:.6g} outside (0, 1)")


@dataclass(frozen=True)
class DguParams:
    """One converter node.  Units: ohm, henry, farad, siemens, volt, second."""

    r: float
    l: float
    c: float
    g: float
    v_s: float
    t_s: float

    def __post_init__(self):
        for name in ("r", "l", "c", "g", "v_s", "t_s"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        # forward-Euler stability margins
        if self.t_s * self.r / self.l >= 2.0:
            raise ValueError("Ts * R / L must be < 2")
        if self.t_s * self.g / self.c >= 2.0:
            raise ValueError("Ts * G / C must be < 2")


@dataclass(frozen=True)
class LineParams:
    """One transmission line."""

    r_l: float
    l_l: float
    t_s: float

    def __post_init__(self):
        for name in ("r_l", "l_l", "t_s"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.t_s * self.r_l / self.l_l >= 2.0:
            raise ValueError("Ts * R_l / L_l must be < 2")


@dataclass(frozen=True)
class RewardParams:
    """Quadratic voltage-tracking reward weight, 1/V^2."""

    k: float = 1.0

    def __post_init__(self):
        if self.k <= 0.0:
            raise ValueError("k must be positive")


@dataclass(frozen=True)
class EquilibriumPoint:
    """Forced equilibrium of the coupled network for a given voltage reference."""

    i_node: np.ndarray
    v_node: np.ndarray
    u_duty: np.ndarray
    nu: np.ndarray
    i_line: np.ndarray
    mu: np.ndarray


def dgu_step(params, i, v, u, nu):
    """One converter step in absolute coordinates; u is the duty cycle."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"duty cycle {u} outside (0, 1)")
    i_next = i - (params.t_s / params.l) * (params.r * i + v - u * params.v_s)
    v_next = v + (params.t_s / params.c) * (i - params.g * v + nu)
    return i_next, v_next


def line_step(params, i_l, mu):
    """One line step in absolute coordinates."""
    return i_l - (params.t_s / params.l_l) * (params.r_l * i_l + mu)


def compute_equilibrium(v_ref, dgu_params, line_params, topo):
    """Solve the steady-state equations for a voltage reference.

    mu = -B'V and R_l I_l + mu = 0 give I_l = (B'V) / R_l; the equilibrium
    edge output is omega = -I_l, so nu = B omega = -B I_l, then
    I = G V - nu and u = (R I + V) / Vs.  Raises InfeasibleReferenceError
    when a node needs a duty cycle outside (0, 1); both defining residuals
    are verified to 1e-10 before returning.
    """
    v_ref = np.asarray(v_ref, dtype=float)
    b = topo.incidence
    r_l = np.array([p.r_l for p in line_params])
    i_line = (b.T @ v_ref) / r_l
    mu = -(b.T @ v_ref)
    nu = b @ (-i_line)
    g = np.array([p.g for p in dgu_params])
    r = np.array([p.r for p in dgu_params])
    v_s = np.array([p.v_s for p in dgu_params])
    i_node = g * v_ref - nu
    u_duty = (r * i_node + v_ref) / v_s
    for idx, u in enumerate(u_duty):
        if not 0.0 < u < 1.0:
            raise InfeasibleReferenceError(idx, u)

    node_res_i = np.abs(r * i_node + v_ref - u_duty * v_s)
    node_res_v = np.abs(i_node - g * v_ref + nu)
    line_res = np.abs(r_l * i_line + mu)
    worst = max(node_res_i.max(), node_res_v.max(), line_res.max())
    if worst > EQUILIBRIUM_TOL:
        raise ArithmeticError(f"equilibrium residual {worst:.3e} exceeds {EQUILIBRIUM_TOL}")
    return EquilibriumPoint(i_node=i_node, v_node=v_ref.copy(), u_duty=u_duty,
                            nu=nu, i_line=i_line, mu=mu)


def shift_coordinates(values, eq):
    """Subtract the equilibrium elementwise from a dict of named quantities.

    Recognized keys: i_node, v_node, u_duty, nu, i_line, mu.  The inverse is
    unshift_coordinates; shift-then-unshift restores the input bit-exactly
    only where the equilibrium entry is subtracted and re-added unchanged.
    """
    return {k: np.asarray(v, float) - getattr(eq, k) for k, v in values.items()}


def unshift_coordinates(values, eq):
    return {k: np.asarray(v, float) + getattr(eq, k) for k, v in values.items()}


def reward(v, v_ref, k):
    """Instantaneous voltage-tracking reward -k (v - v_ref)^2."""
    if k <= 0.0:
        raise ValueError("k must be positive")
    return -k * (v - v_ref) ** 2


def microgrid_supplies(dgu_params, line_params):
    """Port supply rates certified for the shifted microgrid.

    Node control port (volts input): S_u = 1, R_u = 0, Q_u = R.
    Node coupling port:              S_nu = 1, R_nu = 0, Q_nu = G.
    Edge port:                       S_e = 1, R_e = 0, Q_e = R_l.
    """
    node_control = tuple(QsrSupply(q=p.r, s=1.0, r=0.0) for p in dgu_params)
    node_coupling = tuple(QsrSupply(q=p.g, s=1.0, r=0.0) for p in dgu_params)
    edge = tuple(QsrSupply(q=p.r_l, s=1.0, r=0.0) for p in line_params)
    return SupplySpec(node_control=node_control, node_coupling=node_coupling, edge=edge)


class ShiftedDguNode(NodeSystem):
    """Converter node in shifted coordinates with a volts-valued control port.

    State (I - I_eq, V - V_eq); control input u_volts = (duty - duty_eq) Vs;
    outputs y_u = I - I_eq and y_nu = V - V_eq.  The shifted update is exact
    (it cancels the equilibrium algebraically), so the origin is a bit-exact
    fixed point.  A load change after the coordinates were fixed shows up as
    the constant `bias_v` forcing term.
    """

    state_dim = 2
    control_dim = 1
    coupling_dim = 1
    y_u_dim = 1
    y_nu_dim = 1

    def __init__(self, params, u_eq_duty, bias_v=0.0):
        self.params = params
        self.u_eq_duty = float(u_eq_duty)
        self.bias_v = float(bias_v)
        p = params
        margin = 1e-9
        self.u_volts_min = (margin - self.u_eq_duty) * p.v_s
        self.u_volts_max = (1.0 - margin - self.u_eq_duty) * p.v_s

    def step(self, x, u, nu):
        p = self.params
        i, v = float(x[0]), float(x[1])
        u_volts = float(np.atleast_1d(u)[0])
        duty = self.u_eq_duty + u_volts / p.v_s
        if not 0.0 < duty < 1.0:
            raise ValueError(f"duty cycle {duty} outside (0, 1)")
        nu_val = float(np.atleast_1d(nu)[0])
        i_next = i - (p.t_s / p.l) * (p.r * i + v - u_volts)
        v_next = v + (p.t_s / p.c) * (i - p.g * v + nu_val) + self.bias_v
        return np.array([i_next, v_next])

    def output_u(self, x):
        return np.array([x[0]])

    def output_nu(self, x):
        return np.array([x[1]])


class ShiftedLineEdge(EdgeSystem):
    """Transmission line in shifted coordinates.

    The output is the negated state deviation (current measured toward the
    edge head); see the module docstring for why the sign is forced.
    """

    state_dim = 1
    input_dim = 1
    output_dim = 1

    def __init__(self, params):
        self.params = params

    def step(self, z, mu):
        p = self.params
        z_val = float(np.atleast_1d(z)[0])
        mu_val = float(np.atleast_1d(mu)[0])
        return np.array([z_val - (p.t_s / p.l_l) * (p.r_l * z_val + mu_val)])

    def output(self, z, mu):
        return np.array([-float(np.atleast_1d(z)[0])])


def load_step_bias(params_new, eq, node_index):
    """Constant forcing the old shift coordinates acquire after a load change.

    Exactly (Ts/C)(I_eq - G_new V_eq + nu_eq); zero when G is unchanged.
    """
    p = params_new
    return (p.t_s / p.c) * (eq.i_node[node_index] - p.g * eq.v_node[node_index]
                            + eq.nu[node_index])


def default_dgu_params(t_s=1e-5):
    """Shipped 4-node defaults.

    Chosen so every check in this package holds with margin: forward-Euler
    stability, duty cycles strictly inside (0, 1), and G >= R per node, which
    keeps the shield's constraint offset nonnegative (feasible at zero
    correction) and post-load-step voltage offsets well inside a 1 % band.
    """
    r = [0.10, 0.08, 0.12, 0.06]
    l = [1.8e-3, 2.0e-3, 3.0e-3, 2.2e-3]
    c = [2.2e-3, 1.9e-3, 1.7e-3, 2.5e-3]
    g = [0.20, 0.15, 0.25, 0.10]
    return [DguParams(r=r[i], l=l[i], c=c[i], g=g[i], v_s=100.0, t_s=t_s) for i in range(4)]


def default_line_params(t_s=1e-5):
    r_l = [0.07, 0.05, 0.08, 0.06]
    l_l = [2.1e-6, 2.3e-6, 2.0e-6, 1.8e-6]
    return [LineParams(r_l=r_l[k], l_l=l_l[k], t_s=t_s) for k in range(4)]


def build_microgrid(dgu_params=None, line_params=None, v_ref=None, topo=None):
    """Assemble (topo, nodes, edges, equilibrium, supplies) for simulation."""
    dgu_params = dgu_params or default_dgu_params()
    line_params = line_params or default_line_params()
    n = len(dgu_params)
    topo = topo or NetworkTopology.ring(n)
    if v_ref is None:
        v_ref = np.full(n, 48.0)
    eq = compute_equilibrium(v_ref, dgu_params, line_params, topo)
    nodes = [ShiftedDguNode(dgu_params[i], eq.u_duty[i]) for i in range(n)]
    edges = [ShiftedLineEdge(p) for p in line_params]
    supplies = microgrid_supplies(dgu_params, line_params)
    return topo, nodes, edges, eq, supplies
