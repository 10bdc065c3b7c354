import numpy as np
import pytest

from dissipanet.microgrid import (
    DguParams,
    LineParams,
    build_microgrid,
    default_dgu_params,
    default_line_params,
)
from dissipanet.netmodel import NetworkTopology


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def dgu_params():
    return default_dgu_params()


@pytest.fixture(scope="session")
def line_params():
    return default_line_params()


@pytest.fixture(scope="session")
def ring4():
    return NetworkTopology.ring(4)


@pytest.fixture(scope="session")
def microgrid():
    """(topo, nodes, edges, eq, supplies) for the default uniform 48 V ring."""
    return build_microgrid()


@pytest.fixture(scope="session")
def microgrid_nonuniform():
    return build_microgrid(v_ref=np.array([48.0, 47.9, 48.1, 48.0]))


def smooth_admissible_inputs(rng, steps, amplitude, dims=1):
    """Random small-signal admissible inputs: step levels held long relative
    to the sampling period plus a slow sinusoid, so the signal looks like a
    physical command rather than white noise."""
    t = np.arange(steps)
    out = np.zeros((steps, dims))
    for d in range(dims):
        n_seg = rng.integers(2, 5)
        edges = np.sort(rng.choice(np.arange(1, steps), size=n_seg - 1, replace=False))
        levels = rng.uniform(-amplitude, amplitude, size=n_seg)
        sig = np.zeros(steps)
        start = 0
        for lvl, end in zip(levels, list(edges) + [steps]):
            sig[start:end] = lvl
            start = end
        freq = rng.uniform(20.0, 200.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        sig = sig + 0.5 * amplitude * np.sin(2 * np.pi * freq * t * 1e-5 + phase)
        out[:, d] = sig
    return out


def coupled_absolute_step(i_node, v_node, i_line, u_duty, dgus, lines, b):
    """Independent transcription of one coupled network step, absolute coords.

    Written from the difference equations directly; used as the oracle for
    network_step.  The node coupling input is the net line inflow -B I_l and
    the edge input is the head-tail voltage difference -B' V.
    """
    mu = -(b.T @ v_node)
    nu = -(b @ i_line)
    i_next = np.empty_like(i_node)
    v_next = np.empty_like(v_node)
    for idx, p in enumerate(dgus):
        i_next[idx] = i_node[idx] - (p.t_s / p.l) * (
            p.r * i_node[idx] + v_node[idx] - u_duty[idx] * p.v_s)
        v_next[idx] = v_node[idx] + (p.t_s / p.c) * (
            i_node[idx] - p.g * v_node[idx] + nu[idx])
    il_next = np.empty_like(i_line)
    for k, p in enumerate(lines):
        il_next[k] = i_line[k] - (p.t_s / p.l_l) * (p.r_l * i_line[k] + mu[k])
    return i_next, v_next, il_next
