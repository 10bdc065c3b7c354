"""Per-node episodic learners: a numpy DDPG-lite and a CEM baseline.

Learners are deliberately self-contained (no autograd framework) so the
gradient path can be checked against finite differences.  Policy iteration is
episodic: observe() only records transitions, and every gradient step happens
inside end_episode().  Different nodes may run different learner kinds; the
shield's guarantee does not depend on the choice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    """One stored step: deployed action, successor state, reward."""

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    r: float
    done: bool = False

    def __post_init__(self):
        if not np.isfinite(self.r):
            raise ValueError("reward must be finite")


class ReplayBuffer:
    """Fixed-capacity FIFO transition store with without-replacement sampling."""

    def __init__(self, capacity, obs_dim, act_dim):
        self.capacity = int(capacity)
        self._x = np.zeros((capacity, obs_dim))
        self._u = np.zeros((capacity, act_dim))
        self._xn = np.zeros((capacity, obs_dim))
        self._r = np.zeros(capacity)
        self._done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def add(self, tr):
        i = self._next
        self._x[i] = tr.x
        self._u[i] = tr.u
        self._xn[i] = tr.x_next
        self._r[i] = tr.r
        self._done[i] = tr.done
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, rng, batch_size):
        if self._size < batch_size:
            raise ValueError("not enough transitions to sample a batch")
        idx = rng.choice(self._size, size=batch_size, replace=False)
        return (self._x[idx], self._u[idx], self._xn[idx], self._r[idx], self._done[idx])


class Mlp:
    """Dense net, tanh hidden layers, linear output, manual backprop."""

    def __init__(self, sizes, rng=None, final_scale=1.0):
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        n_layers = len(sizes) - 1
        for li in range(n_layers):
            fan_in, fan_out = sizes[li], sizes[li + 1]
            bound = 1.0 / np.sqrt(fan_in)
            if li == n_layers - 1:
                bound *= final_scale
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def forward(self, x):
        """Returns (output, cache); x is (batch, in_dim)."""
        h = np.atleast_2d(x)
        pre = []
        post = [h]
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = z if li == last else np.tanh(z)
            post.append(h)
        if not np.all(np.isfinite(h)):
            raise FloatingPointError("non-finite forward pass")
        return h, (pre, post)

    def predict(self, x):
        """Cache-free forward pass for the rollout hot path."""
        h = x
        last = len(self.weights) - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if li != last:
                h = np.tanh(h)
        return h

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Backprop grad_out (batch, out_dim) through the cached pass.

        Returns (weight_grads, bias_grads, grad_input); gradients are summed
        over the batch (callers normalize).
        """
        pre, post = cache
        last = len(self.weights) - 1
        g = np.atleast_2d(grad_out)
        w_grads = [None] * len(self.weights)
        b_grads = [None] * len(self.biases)
        for li in range(last, -1, -1):
            if li != last:
                g = g * (1.0 - np.tanh(pre[li]) ** 2)
            w_grads[li] = post[li].T @ g
            b_grads[li] = g.sum(axis=0)
            g = g @ self.weights[li].T
        return w_grads, b_grads, g

    def params(self):
        return self.weights + self.biases

    def set_params(self, arrays):
        n = len(self.weights)
        for i in range(n):
            self.weights[i] = arrays[i].copy()
            self.biases[i] = arrays[n + i].copy()

    def copy(self):
        other = Mlp(self.sizes)
        other.set_params(self.params())
        return other


class Adam:
    """Standard Adam over a list of parameter arrays."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mh = self.m[i] / b1t
            vh = self.v[i] / b2t
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def advantage(q_value, v_value):
    """A(x, u) = Q(x, u) - V(x); diagnostics only."""
    if not (np.isfinite(q_value) and np.isfinite(v_value)):
        raise ValueError("advantage requires finite inputs")
    return float(q_value) - float(v_value)


class Learner:
    """Interface every per-node learner implements."""

    kind = "abstract"

    def act(self, obs, explore):
        raise NotImplementedError

    def observe(self, transition):
        raise NotImplementedError

    def end_episode(self, episode_return=None):
        raise NotImplementedError

    def state_dict(self):
        raise NotImplementedError

    def load_state_dict(self, state):
        raise NotImplementedError


@dataclass(frozen=True)
class DdpgLiteConfig:
    gamma: float = 0.99
    hidden: tuple = (32, 32)
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    tau: float = 0.01
    buffer_capacity: int = 100_000
    batch_size: int = 64
    noise_frac: float = 0.1          # exploration sigma = noise_frac * box width
    updates_per_episode: int = 250
    actor_final_scale: float = 1e-3
    # L2 pull on the pre-squash actor output.  Keeps the policy anchored at
    # the box midpoint wherever the critic is indifferent and, because it
    # bypasses the tanh, lets a saturated actor recover (the Q-gradient alone
    # dies at the rails).  Small enough that any real value signal wins.
    actor_center_reg: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for name in ("lr_actor", "lr_critic", "tau"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.actor_center_reg < 0.0:
            raise ValueError("actor_center_reg must be >= 0")


def _squash(z, lo, hi):
    return lo + (hi - lo) * (np.tanh(z) + 1.0) / 2.0


def _squash_grad(z, lo, hi):
    return (hi - lo) / 2.0 * (1.0 - np.tanh(z) ** 2)


class DdpgLite(Learner):
    """Deterministic actor-critic with target networks and a replay buffer.

    The actor's linear output is squashed to the action box with an affine
    tanh; exploration adds seeded Gaussian noise after the squash and clips
    back to the box.  Gradient steps run only in end_episode().
    """

    kind = "ddpg"

    def __init__(self, obs_dim, act_low, act_high, cfg=None, seed=0):
        self.cfg = cfg or DdpgLiteConfig()
        self.obs_dim = obs_dim
        self.act_low = np.atleast_1d(np.asarray(act_low, float))
        self.act_high = np.atleast_1d(np.asarray(act_high, float))
        self.act_dim = self.act_low.shape[0]
        self.rng = np.random.default_rng(seed)
        h = list(self.cfg.hidden)
        self.actor = Mlp([obs_dim] + h + [self.act_dim], self.rng,
                         final_scale=self.cfg.actor_final_scale)
        self.critic = Mlp([obs_dim + self.act_dim] + h + [1], self.rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.opt_actor = Adam([p.shape for p in self.actor.params()], self.cfg.lr_actor)
        self.opt_critic = Adam([p.shape for p in self.critic.params()], self.cfg.lr_critic)
        self.replay = ReplayBuffer(self.cfg.buffer_capacity, obs_dim, self.act_dim)
        self.noise_sigma = self.cfg.noise_frac * (self.act_high - self.act_low)

    def act(self, obs, explore=False):
        obs = np.asarray(obs, float)
        if not np.all(np.isfinite(obs)):
            raise ValueError("non-finite observation")
        z = self.actor.predict(obs.reshape(self.obs_dim))
        u = _squash(z, self.act_low, self.act_high)
        if explore:
            u = u + self.rng.normal(0.0, self.noise_sigma, size=self.act_dim)
        return np.clip(u, self.act_low, self.act_high)

    def observe(self, transition):
        self.replay.add(transition)

    def q_value(self, obs, act):
        xu = np.concatenate([np.asarray(obs, float).ravel(), np.asarray(act, float).ravel()])
        return float(self.critic(xu.reshape(1, -1))[0, 0])

    def _critic_loss(self, x, u, target):
        q, _ = self.critic.forward(np.hstack([x, u]))
        return float(np.mean((q[:, 0] - target) ** 2))

    def td_update(self, batch):
        """One critic regression + actor ascent + target soft update.

        Returns the critic loss before and after the parameter step.  Episode
        ends are horizon truncations, not absorbing states, so the bootstrap
        is not masked by done.
        """
        x, u, xn, r, _done = batch
        bsz = x.shape[0]

        zn = self.actor_target(xn)
        un = _squash(zn, self.act_low, self.act_high)
        qn = self.critic_target(np.hstack([xn, un]))[:, 0]
        target = r + self.cfg.gamma * qn

        q, cache = self.critic.forward(np.hstack([x, u]))
        err = q[:, 0] - target
        loss_before = float(np.mean(err ** 2))
        grad_out = (2.0 * err / bsz)[:, None]
        wg, bg, _ = self.critic.backward(cache, grad_out)
        new = self.opt_critic.step(self.critic.params(), wg + bg)
        self.critic.set_params(new)

        # actor ascends Q(x, squash(actor(x))): chain critic grad wrt u back
        # through the squash and the actor; the centering term acts on the
        # pre-squash output directly
        za, cache_a = self.actor.forward(x)
        ua = _squash(za, self.act_low, self.act_high)
        _, cache_q = self.critic.forward(np.hstack([x, ua]))
        ones = np.full((bsz, 1), -1.0 / bsz)   # minimize -mean(Q) + reg*mean(z^2)
        _, _, g_in = self.critic.backward(cache_q, ones)
        g_u = g_in[:, self.obs_dim:]
        g_z = g_u * _squash_grad(za, self.act_low, self.act_high)
        g_z = g_z + (2.0 * self.cfg.actor_center_reg / bsz) * za
        wg_a, bg_a, _ = self.actor.backward(cache_a, g_z)
        new_a = self.opt_actor.step(self.actor.params(), wg_a + bg_a)
        self.actor.set_params(new_a)

        tau = self.cfg.tau
        for net, tgt in ((self.actor, self.actor_target), (self.critic, self.critic_target)):
            tgt.set_params([
                tau * p + (1.0 - tau) * tp
                for p, tp in zip(net.params(), tgt.params())
            ])

        loss_after = self._critic_loss(x, u, target)
        return loss_before, loss_after

    def end_episode(self, episode_return=None):
        if len(self.replay) < self.cfg.batch_size:
            return
        for _ in range(self.cfg.updates_per_episode):
            self.td_update(self.replay.sample(self.rng, self.cfg.batch_size))

    def state_dict(self):
        state = {"kind": self.kind, "obs_dim": self.obs_dim,
                 "act_low": self.act_low, "act_high": self.act_high,
                 "hidden": np.array(self.cfg.hidden)}
        for name, net in (("actor", self.actor), ("critic", self.critic),
                          ("actor_t", self.actor_target), ("critic_t", self.critic_target)):
            for i, p in enumerate(net.params()):
                state[f"{name}.{i}"] = p
        return state

    def load_state_dict(self, state):
        for name, net in (("actor", self.actor), ("critic", self.critic),
                          ("actor_t", self.actor_target), ("critic_t", self.critic_target)):
            n = len(net.params())
            net.set_params([np.asarray(state[f"{name}.{i}"]) for i in range(n)])


@dataclass(frozen=True)
class CemConfig:
    population: int = 16
    elite_frac: float = 0.25
    init_std: float = 1.0
    std_floor: float = 1e-12


class CemLearner(Learner):
    """Cross-entropy search over saturated linear feedback u = clip(W x + b).

    Each episode evaluates one sampled candidate; once the population is
    exhausted, the elite fraction refits the sampling Gaussian.  act() uses
    the candidate under evaluation while exploring and the distribution mean
    otherwise.
    """

    kind = "cem"

    def __init__(self, obs_dim, act_low, act_high, cfg=None, seed=0):
        self.cfg = cfg or CemConfig()
        self.obs_dim = obs_dim
        self.act_low = np.atleast_1d(np.asarray(act_low, float))
        self.act_high = np.atleast_1d(np.asarray(act_high, float))
        self.act_dim = self.act_low.shape[0]
        self.rng = np.random.default_rng(seed)
        self.dim = self.act_dim * (obs_dim + 1)
        self.mean = np.zeros(self.dim)
        self.std = np.full(self.dim, float(self.cfg.init_std))
        self._sample_population()

    def _sample_population(self):
        self.population = self.mean + self.std * self.rng.standard_normal(
            (self.cfg.population, self.dim))
        self.scores = np.full(self.cfg.population, np.nan)
        self.cursor = 0

    def _policy(self, theta, obs):
        w = theta[: self.act_dim * self.obs_dim].reshape(self.act_dim, self.obs_dim)
        b = theta[self.act_dim * self.obs_dim:]
        return np.clip(w @ np.asarray(obs, float).ravel() + b, self.act_low, self.act_high)

    def act(self, obs, explore=False):
        theta = self.population[self.cursor] if explore else self.mean
        return self._policy(theta, obs)

    def observe(self, transition):
        pass

    def end_episode(self, episode_return=None):
        if episode_return is None:
            raise ValueError("CEM needs the episode return to score its candidate")
        cem_end_episode(self, float(episode_return))

    def state_dict(self):
        return {"kind": self.kind, "obs_dim": self.obs_dim,
                "act_low": self.act_low, "act_high": self.act_high,
                "mean": self.mean, "std": self.std}

    def load_state_dict(self, state):
        self.mean = np.asarray(state["mean"], float).copy()
        self.std = np.asarray(state["std"], float).copy()
        self._sample_population()


def cem_end_episode(learner, episode_return):
    """Score the current candidate; refit and resample when the sweep ends."""
    learner.scores[learner.cursor] = episode_return
    learner.cursor += 1
    if learner.cursor < learner.cfg.population:
        return
    n_elite = max(1, int(round(learner.cfg.elite_frac * learner.cfg.population)))
    elite_idx = np.argsort(learner.scores)[-n_elite:]
    elite = learner.population[elite_idx]
    learner.mean = elite.mean(axis=0)
    learner.std = np.maximum(elite.std(axis=0), learner.cfg.std_floor)
    learner._sample_population()


def make_learner(kind, obs_dim, act_low, act_high, seed, ddpg_cfg=None, cem_cfg=None):
    if kind == "ddpg":
        return DdpgLite(obs_dim, act_low, act_high, cfg=ddpg_cfg, seed=seed)
    if kind == "cem":
        return CemLearner(obs_dim, act_low, act_high, cfg=cem_cfg, seed=seed)
    raise ValueError(f"unknown learner kind {kind!r}")


def save_checkpoint(path, learners, extra_meta=None):
    """Serialize per-node learners into one self-describing .npz file.

    Arrays are stored as little-endian float64; a json 'meta' entry records
    kinds and dimensions so evaluate can rebuild the policies.
    """
    arrays = {}
    meta = {"nodes": [], "extra": extra_meta or {}}
    for i, lrn in enumerate(learners):
        state = lrn.state_dict()
        node_meta = {"kind": state.pop("kind"), "obs_dim": int(state.pop("obs_dim")),
                     "arrays": []}
        node_meta["act_low"] = np.asarray(state.pop("act_low")).tolist()
        node_meta["act_high"] = np.asarray(state.pop("act_high")).tolist()
        if "hidden" in state:
            node_meta["hidden"] = np.asarray(state.pop("hidden")).astype(int).tolist()
        for name, arr in state.items():
            key = f"n{i}.{name}"
            arrays[key] = np.asarray(arr, dtype="<f8")
            node_meta["arrays"].append(name)
        meta["nodes"].append(node_meta)
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, ddpg_cfg=None, cem_cfg=None):
    """Rebuild the learners stored by save_checkpoint."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"].tobytes()).decode())
        learners = []
        for i, node_meta in enumerate(meta["nodes"]):
            kind = node_meta["kind"]
            cfg = None
            if kind == "ddpg" and node_meta.get("hidden") is not None:
                base = ddpg_cfg or DdpgLiteConfig()
                cfg = DdpgLiteConfig(**{**base.__dict__, "hidden": tuple(node_meta["hidden"])})
            elif kind == "cem":
                cfg = cem_cfg
            lrn = make_learner(kind, node_meta["obs_dim"], node_meta["act_low"],
                               node_meta["act_high"], seed=0,
                               ddpg_cfg=cfg if kind == "ddpg" else None,
                               cem_cfg=cfg if kind == "cem" else None)
            state = {name: data[f"n{i}.{name}"] for name in node_meta["arrays"]}
            lrn.load_state_dict(state)
            learners.append(lrn)
    return learners, meta["extra"]
