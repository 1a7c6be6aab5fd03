"""Flow-network sampler over DAGs trained with a detailed-balance loss.

The forward policy maps a flattened adjacency matrix to K^2 + 1 action
logits (one per directed edge plus stop); invalid actions are masked to
probability zero, so every trajectory builds a DAG by construction. The
per-transition loss enforces the balance condition

    R(G') P_B(G | G') P(stop | G) = R(G) P(G' | G) P(stop | G')

in log space, scaled by a temperature applied outside the log, with the
backward kernel P_B fixed uniform over the parents of G' (removing any
edge of a DAG yields a DAG, so G' with e edges has exactly e parents).
"""

import math
from dataclasses import dataclass

import numpy as np

from .dag import DagState, _freeze, apply_edge, enumerate_dags, new_empty, valid_actions
from .model import PriorHyper, ScoreCache, VariationalParams

LOSS_MA_WINDOW = 100  # moving-average window for the plateau rule


class TrainingDivergedError(RuntimeError):
    """Inner loss became non-finite."""


@dataclass(frozen=True)
class Transition:
    """One construction step: an edge addition, or stop (action None)."""

    source: DagState
    action: tuple[int, int] | None
    target: DagState | None

    @property
    def is_stop(self) -> bool:
        return self.action is None


@dataclass
class TrainConfig:
    """Knobs of the inner sampler-training loop."""

    temperature: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 64
    exploration_epsilon: float = 0.1
    replay_capacity: int = 10_000
    min_delta_loss: float = 1e-3
    max_inner_steps: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    policy: str = "mlp"
    hidden_sizes: tuple[int, ...] = (128, 128)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.exploration_epsilon <= 1.0:
            raise ValueError("exploration_epsilon must be in [0, 1]")
        if self.policy not in ("mlp", "tabular"):
            raise ValueError("policy must be 'mlp' or 'tabular'")


# ---------------------------------------------------------------------------
# policies


class MlpPolicy:
    """Feed-forward approximator: flattened adjacency -> action logits.

    tanh hidden layers; plain numpy forward/backward so training is
    deterministic under a seeded generator.
    """

    kind = "mlp"

    def __init__(self, K: int, hidden_sizes=(128, 128), rng=None, params=None):
        self.K = K
        self.n_actions = K * K + 1
        self.hidden_sizes = tuple(hidden_sizes)
        if params is not None:
            self.params = [np.asarray(p, dtype=float) for p in params]
            return
        if rng is None:
            rng = np.random.default_rng(0)
        dims = [K * K, *self.hidden_sizes, self.n_actions]
        self.params = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            scale = 1.0 / math.sqrt(d_in)
            self.params.append(rng.uniform(-scale, scale, size=(d_in, d_out)))
            self.params.append(np.zeros(d_out))

    def _features(self, adj_batch: np.ndarray) -> np.ndarray:
        return adj_batch.reshape(adj_batch.shape[0], -1).astype(float)

    def forward_adjacency(self, adj_batch: np.ndarray) -> np.ndarray:
        return self.forward_train(adj_batch)[0]

    def forward_train(self, adj_batch: np.ndarray):
        x = self._features(adj_batch)
        acts = [x]
        h = x
        n_hidden = len(self.hidden_sizes)
        for layer in range(n_hidden):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            h = np.tanh(h @ w + b)
            acts.append(h)
        w, b = self.params[2 * n_hidden], self.params[2 * n_hidden + 1]
        return h @ w + b, acts

    def backward(self, ctx, dlogits: np.ndarray) -> list[np.ndarray]:
        acts = ctx
        n_hidden = len(self.hidden_sizes)
        grads = [None] * len(self.params)
        delta = dlogits
        grads[2 * n_hidden] = acts[-1].T @ delta
        grads[2 * n_hidden + 1] = delta.sum(axis=0)
        for layer in range(n_hidden - 1, -1, -1):
            w_next = self.params[2 * (layer + 1)]
            delta = (delta @ w_next.T) * (1.0 - acts[layer + 1] ** 2)
            grads[2 * layer] = acts[layer].T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
        return grads

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "K": self.K,
            "hidden_sizes": list(self.hidden_sizes),
            "params": self.params,
        }


class TabularPolicy:
    """Exact per-state logits for small K; rows indexed by enumerating
    every DAG, so it can represent the balance solution exactly."""

    kind = "tabular"

    def __init__(self, K: int, params=None):
        self.K = K
        self.n_actions = K * K + 1
        states = enumerate_dags(K)
        self._index = {s.key(): i for i, s in enumerate(states)}
        if params is not None:
            self.params = [np.asarray(params[0], dtype=float)]
        else:
            self.params = [np.zeros((len(states), self.n_actions))]

    def _rows(self, adj_batch: np.ndarray) -> np.ndarray:
        packed = np.packbits(adj_batch.reshape(adj_batch.shape[0], -1), axis=1)
        return np.fromiter(
            (self._index[row.tobytes()] for row in packed),
            dtype=np.int64,
            count=adj_batch.shape[0],
        )

    def forward_adjacency(self, adj_batch: np.ndarray) -> np.ndarray:
        return self.params[0][self._rows(adj_batch)]

    def forward_train(self, adj_batch: np.ndarray):
        rows = self._rows(adj_batch)
        return self.params[0][rows], rows

    def backward(self, ctx, dlogits: np.ndarray) -> list[np.ndarray]:
        grad = np.zeros_like(self.params[0])
        np.add.at(grad, ctx, dlogits)
        return [grad]

    def state_dict(self) -> dict:
        return {"kind": self.kind, "K": self.K, "params": self.params}


def make_policy(kind: str, K: int, hidden_sizes=(128, 128), rng=None):
    if kind == "mlp":
        return MlpPolicy(K, hidden_sizes, rng)
    if kind == "tabular":
        return TabularPolicy(K)
    raise ValueError(f"unknown policy kind {kind!r}")


def policy_from_state_dict(d: dict):
    if d["kind"] == "mlp":
        return MlpPolicy(int(d["K"]), tuple(d["hidden_sizes"]), params=d["params"])
    if d["kind"] == "tabular":
        return TabularPolicy(int(d["K"]), params=d["params"])
    raise ValueError(f"unknown policy kind {d['kind']!r}")


class Adam:
    """Adaptive-moment optimizer over a list of parameter arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


# ---------------------------------------------------------------------------
# masked action distributions


def _flat_masks(states: list[DagState]) -> np.ndarray:
    """Stack valid-action masks, flattened to K^2 + 1 with stop last."""
    K = states[0].K
    out = np.empty((len(states), K * K + 1), dtype=bool)
    for b, s in enumerate(states):
        out[b, : K * K] = valid_actions(s).edge_mask.ravel()
        out[b, K * K] = True
    return out


def _masked_log_softmax(logits: np.ndarray, masks: np.ndarray):
    """Row-wise log-softmax over the valid entries only.

    Returns (logp, probs); invalid entries get logp = -inf and an exact
    probability of zero.
    """
    neg = np.where(masks, logits, -np.inf)
    peak = neg.max(axis=1, keepdims=True)
    expd = np.exp(neg - peak)
    total = expd.sum(axis=1, keepdims=True)
    logp = neg - (peak + np.log(total))
    return logp, expd / total


def forward_distribution(policy, state: DagState) -> np.ndarray:
    """Action probabilities at a state: length K^2 + 1, row-major edge
    actions then stop; invalid actions have probability exactly zero."""
    logits = policy.forward_adjacency(state.adjacency[None, :, :])
    masks = _flat_masks([state])
    _, probs = _masked_log_softmax(logits, masks)
    return probs[0]


# ---------------------------------------------------------------------------
# trajectory sampling


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, probs.size - 1))


def sample_trajectory(policy, cfg: TrainConfig, rng: np.random.Generator, epsilon=None) -> list[Transition]:
    """Roll out one construction run from the empty graph to stop.

    With probability epsilon per step the action is uniform over the
    valid ones (stop included); otherwise it follows the policy.
    """
    eps = cfg.exploration_epsilon if epsilon is None else epsilon
    K = policy.K
    stop_idx = K * K
    state = new_empty(K)
    out = []
    while True:
        masks = _flat_masks([state])
        logits = policy.forward_adjacency(state.adjacency[None, :, :])
        _, probs = _masked_log_softmax(logits, masks)
        if eps > 0.0 and rng.random() < eps:
            options = np.flatnonzero(masks[0])
            action = int(options[rng.integers(options.size)])
        else:
            action = _categorical(probs[0], rng)
        if action == stop_idx:
            out.append(Transition(state, None, None))
            return out
        i, j = divmod(action, K)
        nxt = apply_edge(state, i, j)
        out.append(Transition(state, (i, j), nxt))
        state = nxt


def sample_posterior(policy, M: int, rng: np.random.Generator, chunk: int = 2048) -> list[DagState]:
    """Draw M terminal graphs from the policy with no exploration.

    Vectorized over a chunk of trajectories: each step does one batched
    forward pass and a Gumbel-max draw over the masked logits.
    """
    K = policy.K
    stop_idx = K * K
    eye = np.eye(K, dtype=bool)
    results: list[DagState] = []
    remaining = int(M)
    while remaining > 0:
        B = min(chunk, remaining)
        remaining -= B
        adj = np.zeros((B, K, K), dtype=bool)
        clo = np.zeros((B, K, K), dtype=bool)
        nedges = np.zeros(B, dtype=int)
        alive = np.arange(B)
        done: list[tuple[int, np.ndarray, np.ndarray, int]] = []
        while alive.size:
            a = adj[alive]
            blocked = a | clo[alive].transpose(0, 2, 1) | eye
            masks = np.concatenate(
                [~blocked.reshape(alive.size, K * K), np.ones((alive.size, 1), dtype=bool)],
                axis=1,
            )
            logits = policy.forward_adjacency(a)
            noisy = np.where(masks, logits + rng.gumbel(size=logits.shape), -np.inf)
            choice = noisy.argmax(axis=1)
            stopping = choice == stop_idx
            for b in alive[stopping]:
                done.append((b, adj[b].copy(), clo[b].copy(), int(nedges[b])))
            go = ~stopping
            rows = alive[go]
            ii, jj = np.divmod(choice[go], K)
            adj[rows, ii, jj] = True
            reach_to = clo[rows, :, ii]
            reach_to[np.arange(rows.size), ii] = True
            reach_from = clo[rows, jj, :]
            reach_from[np.arange(rows.size), jj] = True
            clo[rows] |= reach_to[:, :, None] & reach_from[:, None, :]
            nedges[rows] += 1
            alive = rows
        done.sort(key=lambda t: t[0])
        for _, a, c, ne in done:
            results.append(DagState(_freeze(a), _freeze(c), ne))
    return results


# ---------------------------------------------------------------------------
# detailed-balance loss


def _log_pb(target: DagState) -> float:
    # uniform over parents of G': removing any of its e edges is valid
    return -math.log(target.num_edges)


def db_loss(t: Transition, policy, delta: float, Pb: float, cfg: TrainConfig) -> float:
    """Squared temperature-scaled balance residual of one edge transition.

    delta is the log-reward difference for t's edge and Pb the backward
    probability of undoing it.
    """
    if t.is_stop:
        raise ValueError("balance loss is defined for edge transitions only")
    logp_src, _ = _masked_log_softmax(
        policy.forward_adjacency(t.source.adjacency[None]), _flat_masks([t.source])
    )
    logp_tgt, _ = _masked_log_softmax(
        policy.forward_adjacency(t.target.adjacency[None]), _flat_masks([t.target])
    )
    K = policy.K
    a = t.action[0] * K + t.action[1]
    stop = K * K
    if not np.isfinite(logp_src[0, a]):
        raise ValueError("taken action has zero forward probability")
    resid = (
        delta
        + math.log(Pb)
        + logp_src[0, stop]
        - logp_src[0, a]
        - logp_tgt[0, stop]
    )
    return float((cfg.temperature * resid) ** 2)


@dataclass
class _ReplayRow:
    """Pre-extracted transition fields so minibatch assembly is cheap."""

    adj_src: np.ndarray
    adj_tgt: np.ndarray
    mask_src: np.ndarray
    mask_tgt: np.ndarray
    action: int
    delta: float
    log_pb: float


class ReplayBuffer:
    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.rows: list[_ReplayRow] = []
        self._cursor = 0

    def __len__(self):
        return len(self.rows)

    def add(self, row: _ReplayRow):
        if len(self.rows) < self.capacity:
            self.rows.append(row)
        else:
            self.rows[self._cursor] = row
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, size: int, rng: np.random.Generator) -> list[_ReplayRow]:
        idx = rng.integers(len(self.rows), size=size)
        return [self.rows[i] for i in idx]


def _make_row(t: Transition, cache: ScoreCache, h: PriorHyper) -> _ReplayRow:
    i, j = t.action
    return _ReplayRow(
        adj_src=t.source.adjacency,
        adj_tgt=t.target.adjacency,
        mask_src=_flat_masks([t.source])[0],
        mask_tgt=_flat_masks([t.target])[0],
        action=i * t.source.K + j,
        delta=cache.delta_score(t.source, i, j),
        log_pb=_log_pb(t.target),
    )


def _batch_loss_and_grads(policy, rows: list[_ReplayRow], cfg: TrainConfig):
    """Mean squared balance residual over a minibatch plus parameter
    gradients, backpropagating through the three policy log-probs of
    each transition (delta and log P_B are constants)."""
    B = len(rows)
    K = policy.K
    stop = K * K
    adj = np.stack([r.adj_src for r in rows] + [r.adj_tgt for r in rows])
    masks = np.stack([r.mask_src for r in rows] + [r.mask_tgt for r in rows])
    logits, ctx = policy.forward_train(adj)
    logp, probs = _masked_log_softmax(logits, masks)
    actions = np.array([r.action for r in rows])
    consts = np.array([r.delta + r.log_pb for r in rows])
    rows_b = np.arange(B)
    resid = cfg.temperature * (
        consts + logp[rows_b, stop] - logp[rows_b, actions] - logp[B + rows_b, stop]
    )
    if not np.all(np.isfinite(resid)):
        raise TrainingDivergedError("non-finite balance residual")
    loss = float(np.mean(resid**2))
    # d loss / d logp entries, then through the masked log-softmax
    coeff = 2.0 * cfg.temperature * resid / B
    g = np.zeros_like(logp)
    g[rows_b, stop] += coeff
    g[rows_b, actions] -= coeff
    g[B + rows_b, stop] -= coeff
    dlogits = g - probs * g.sum(axis=1, keepdims=True)
    return loss, policy.backward(ctx, dlogits)


def _plateaued(losses: list[float], min_delta: float) -> bool:
    """Plateau rule: change of the trailing moving average below
    min_delta. With less than one full window of history the average
    itself stands in for the change, so min_delta = inf stops at once."""
    w = LOSS_MA_WINDOW
    recent = losses[-w:]
    prev = losses[-2 * w : -w]
    if prev:
        delta = abs(float(np.mean(recent)) - float(np.mean(prev)))
    else:
        delta = abs(float(np.mean(recent)))
    return delta < min_delta


def train_inner(policy, q: VariationalParams, X, h: PriorHyper, cfg: TrainConfig, rng: np.random.Generator):
    """Train the sampler against the reward induced by q until the loss
    plateaus or the step budget runs out.

    Each step rolls out one exploratory trajectory into the replay
    buffer (epsilon decays linearly to zero across the budget) and takes
    one optimizer step on a replayed minibatch. Returns the policy
    (updated in place) and the per-step loss trace.
    """
    cache = ScoreCache(X, h, q)
    replay = ReplayBuffer(cfg.replay_capacity)
    opt = Adam(policy.params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    losses: list[float] = []
    for step in range(cfg.max_inner_steps):
        eps = cfg.exploration_epsilon * (1.0 - step / cfg.max_inner_steps)
        for t in sample_trajectory(policy, cfg, rng, epsilon=eps):
            if not t.is_stop:
                replay.add(_make_row(t, cache, h))
        if len(replay):
            rows = replay.sample(cfg.batch_size, rng)
            loss, grads = _batch_loss_and_grads(policy, rows, cfg)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss diverged at inner step {step}")
            opt.step(grads)
        else:
            loss = 0.0  # no edge transitions yet (e.g. K=1)
        losses.append(loss)
        if _plateaued(losses, cfg.min_delta_loss):
            break
    return policy, np.asarray(losses)
