"""Node/edge subsystem interfaces and the incidence-coupled network stepper.

A network is a directed graph whose nodes and edges each carry a discrete-time
subsystem.  Nodes expose a control port (input u, output y_u) and a coupling
port (input nu, output y_nu); edges relay coupling signals (input mu, output
omega).  Ports are wired through the signed incidence matrix B:

    nu = B omega        (stacked node coupling inputs)
    mu = -B^T y_nu      (stacked edge inputs)

so the interconnection is lossless: <nu, y_nu> + <mu, omega> = 0 for any pair
of signals.

Supported node systems have no coupling feedthrough (y_nu = h(x) only).  That
restriction makes one synchronous step algebraic-loop free: y_nu is read from
the current node states, mu follows, edge outputs omega = j(z, mu) may feed mu
through, and nu closes the loop before any state advances.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """A stacked signal does not match the topology; names the offending block."""

    def __init__(self, block, expected, got):
        self.block = block
        self.expected = expected
        self.got = got
        super().__init__(f"block {block!r}: expected dimension {expected}, got {got}")


class NumericalDivergenceError(RuntimeError):
    """A subsystem state went non-finite during stepping."""

    def __init__(self, kind, index, t):
        self.kind = kind
        self.index = index
        self.t = t
        super().__init__(f"non-finite state in {kind} {index} at step {t}")


class NodeSystem(abc.ABC):
    """One node subsystem.

    Required attributes: state_dim, control_dim, coupling_dim, y_u_dim,
    y_nu_dim.  The origin must be an equilibrium: step(0, 0, 0) = 0,
    output_u(0) = 0, output_nu(0) = 0.  y_u may not feed through u and y_nu
    may not feed through nu; both are functions of the state alone.
    """

    state_dim: int
    control_dim: int
    coupling_dim: int
    y_u_dim: int
    y_nu_dim: int

    @abc.abstractmethod
    def step(self, x, u, nu):
        """Advance the node state one step."""

    @abc.abstractmethod
    def output_u(self, x):
        """Control-port output y_u(x)."""

    @abc.abstractmethod
    def output_nu(self, x):
        """Coupling-port output y_nu(x)."""


class EdgeSystem(abc.ABC):
    """One edge subsystem.  Origin equilibrium: step(0, 0) = 0, output(0, 0) = 0."""

    state_dim: int
    input_dim: int
    output_dim: int

    @abc.abstractmethod
    def step(self, z, mu):
        """Advance the edge state one step."""

    @abc.abstractmethod
    def output(self, z, mu):
        """Edge output omega(z, mu); feedthrough from mu is allowed."""


class NetworkTopology:
    """Directed graph as a signed node-by-edge incidence matrix.

    Each column has exactly one +1 (head) and one -1 (tail); self-loops are
    rejected.  Ports are scalar by default; uniform vector ports of width
    ``port_dim`` are supported through block lifting (Kronecker with the
    identity).
    """

    def __init__(self, incidence, port_dim=1):
        b = np.asarray(incidence, dtype=float)
        if b.ndim != 2:
            raise ValueError("incidence must be a 2-d array")
        if port_dim < 1:
            raise ValueError("port_dim must be >= 1")
        for k in range(b.shape[1]):
            col = b[:, k]
            pos = np.flatnonzero(col == 1.0)
            neg = np.flatnonzero(col == -1.0)
            rest = np.flatnonzero((col != 0.0) & (col != 1.0) & (col != -1.0))
            if len(pos) != 1 or len(neg) != 1 or len(rest) != 0:
                raise ValueError(
                    f"incidence column {k} must contain exactly one +1 and one -1"
                )
        self._b = b
        self._b.setflags(write=False)
        self.port_dim = int(port_dim)

    @property
    def n_nodes(self):
        return self._b.shape[0]

    @property
    def n_edges(self):
        return self._b.shape[1]

    @property
    def incidence(self):
        """The scalar N x M incidence matrix."""
        return self._b

    def block_incidence(self):
        """Incidence lifted to vector ports: kron(B, I_p)."""
        if self.port_dim == 1:
            return self._b
        return np.kron(self._b, np.eye(self.port_dim))

    @classmethod
    def ring(cls, n, port_dim=1):
        """Directed ring: edge k runs from node k to node (k+1) mod n, head +1."""
        if n < 2:
            raise ValueError("a ring needs at least 2 nodes")
        b = np.zeros((n, n))
        for k in range(n):
            b[k, k] = -1.0
            b[(k + 1) % n, k] = 1.0
        return cls(b, port_dim=port_dim)


@dataclass(frozen=True)
class NetworkState:
    """Stacked network state: per-node states x, per-edge states z, step count t."""

    x: tuple
    z: tuple
    t: int

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("time index must be nonnegative")


@dataclass(frozen=True)
class IoRecord:
    """Port signals realized during one network step, for supply bookkeeping."""

    u: tuple
    nu: tuple
    y_u: tuple
    y_nu: tuple
    mu: tuple
    omega: tuple

    def stacked(self, name):
        return np.concatenate([np.atleast_1d(np.asarray(v, float)) for v in getattr(self, name)])


def _check_stacked(name, vec, expected):
    vec = np.atleast_1d(np.asarray(vec, dtype=float))
    if vec.shape != (expected,):
        raise DimensionError(name, (expected,), vec.shape)
    return vec


def couple(y_nu, omega, topo):
    """Wire coupling outputs through the incidence matrix.

    Returns (nu, mu) with nu = B omega and mu = -B^T y_nu, using the block
    form when topo.port_dim > 1.
    """
    b = topo.block_incidence()
    y_nu = _check_stacked("y_nu", y_nu, b.shape[0])
    omega = _check_stacked("omega", omega, b.shape[1])
    return b @ omega, -(b.T @ y_nu)


def couple_edge_inputs(y_nu, topo):
    """mu = -B^T y_nu (the half of couple() computable before edge outputs)."""
    b = topo.block_incidence()
    y_nu = _check_stacked("y_nu", y_nu, b.shape[0])
    return -(b.T @ y_nu)


def couple_node_inputs(omega, topo):
    """nu = B omega."""
    b = topo.block_incidence()
    omega = _check_stacked("omega", omega, b.shape[1])
    return b @ omega


def _split(vec, width, count):
    return tuple(vec[i * width:(i + 1) * width] for i in range(count))


def network_ports(state, nodes, edges, topo):
    """Port signals implied by the current states, before any state advances.

    Resolution order: y_u and y_nu from node states, mu = -B^T y_nu, edge
    outputs omega = j(z, mu) (feedthrough from mu allowed), nu = B omega.
    Returns (y_u, y_nu, mu, omega, nu) as per-node/per-edge tuples.
    """
    n, m = topo.n_nodes, topo.n_edges
    p = topo.port_dim
    if len(nodes) != n or len(state.x) != n:
        raise DimensionError("x/nodes", n, (len(nodes), len(state.x)))
    if len(edges) != m or len(state.z) != m:
        raise DimensionError("z/edges", m, (len(edges), len(state.z)))

    y_u = tuple(np.atleast_1d(np.asarray(nodes[i].output_u(state.x[i]), float)) for i in range(n))
    y_nu = tuple(np.atleast_1d(np.asarray(nodes[i].output_nu(state.x[i]), float)) for i in range(n))
    for i in range(n):
        if y_nu[i].shape != (p,):
            raise DimensionError(f"y_nu[{i}]", (p,), y_nu[i].shape)

    mu_vec = couple_edge_inputs(np.concatenate(y_nu), topo)
    mu = _split(mu_vec, p, m)
    omega = tuple(np.atleast_1d(np.asarray(edges[k].output(state.z[k], mu[k]), float)) for k in range(m))
    for k in range(m):
        if omega[k].shape != (p,):
            raise DimensionError(f"omega[{k}]", (p,), omega[k].shape)

    nu_vec = couple_node_inputs(np.concatenate(omega), topo)
    nu = _split(nu_vec, p, n)
    return y_u, y_nu, mu, omega, nu


def network_step(state, u, nodes, edges, topo, ports=None):
    """One synchronous step of the coupled network.

    Port signals resolve first (see network_ports), then every node and edge
    state advances with its wired inputs.  Returns the new NetworkState and
    the realized IoRecord.  `ports` short-circuits the port resolution when
    the caller already computed it for the same state.
    """
    n, m = topo.n_nodes, topo.n_edges
    if len(u) != n:
        raise DimensionError("u", n, len(u))
    if ports is None:
        ports = network_ports(state, nodes, edges, topo)
    y_u, y_nu, mu, omega, nu = ports

    u = tuple(np.atleast_1d(np.asarray(u_i, float)) for u_i in u)
    x_next = []
    for i in range(n):
        xi = np.atleast_1d(np.asarray(nodes[i].step(state.x[i], u[i], nu[i]), float))
        if not np.all(np.isfinite(xi)):
            raise NumericalDivergenceError("node", i, state.t)
        x_next.append(xi)
    z_next = []
    for k in range(m):
        zk = np.atleast_1d(np.asarray(edges[k].step(state.z[k], mu[k]), float))
        if not np.all(np.isfinite(zk)):
            raise NumericalDivergenceError("edge", k, state.t)
        z_next.append(zk)

    io = IoRecord(u=u, nu=nu, y_u=y_u, y_nu=y_nu, mu=mu, omega=omega)
    return NetworkState(x=tuple(x_next), z=tuple(z_next), t=state.t + 1), io
