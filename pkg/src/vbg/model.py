"""Linear-Gaussian likelihood, priors, and the variational machinery.

Each node k follows X_k = sum_i theta_ik X_i + eps over its parents,
eps ~ N(0, sigma^2). Edge weights get a N(mu0, sigma0^2 I) prior and a
shared Gaussian variational posterior per node that is masked by the
parent set of whichever graph it is paired with. This module provides
the expected log-likelihood and KL terms of that posterior, the graph
reward built from them, its one-edge delta, the closed-form coordinate
update, and exact marginal-likelihood / exact-posterior oracles for
small graphs.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dag import (
    DagState,
    MAX_ENUM_NODES,
    enumerate_dags,
    valid_actions,
)

GRAPH_PRIORS = ("uniform", "erdos_renyi")


@dataclass
class Dataset:
    """Observations as an N x K design matrix, plus an optional held-out
    split used only for evaluation."""

    X: np.ndarray
    heldout: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValueError(f"X must be a nonempty N x K matrix, got shape {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains non-finite entries")
        if self.heldout is not None:
            self.heldout = np.asarray(self.heldout, dtype=float)
            if self.heldout.ndim != 2 or self.heldout.shape[1] != self.X.shape[1]:
                raise ValueError("heldout must have the same number of columns as X")
            if not np.all(np.isfinite(self.heldout)):
                raise ValueError("heldout contains non-finite entries")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def save_csv(self, path):
        save_matrix_csv(path, self.X)

    @classmethod
    def load_csv(cls, path, heldout_path=None):
        heldout = load_matrix_csv(heldout_path) if heldout_path else None
        return cls(load_matrix_csv(path), heldout)


def save_matrix_csv(path, X):
    """Headerless CSV with full float precision (round-trips exactly)."""
    np.savetxt(path, np.atleast_2d(X), delimiter=",", fmt="%.17g")


def load_matrix_csv(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


@dataclass(frozen=True)
class PriorHyper:
    """Model hyperparameters: weight prior N(mu0, sigma0_sq I), likelihood
    noise variance sigma_sq, and the prior over graphs.

    Graph priors are kept unnormalized (uniform contributes 0 per graph);
    the constants cancel in the balance loss and in posterior weights.
    """

    mu0: float = 0.0
    sigma0_sq: float = 1.0
    sigma_sq: float = 0.1
    graph_prior: str = "uniform"
    er_edge_prob: float | None = None

    def __post_init__(self):
        if self.sigma0_sq <= 0:
            raise ValueError("sigma0_sq must be positive")
        if self.sigma_sq <= 0:
            raise ValueError("sigma_sq must be positive")
        if self.graph_prior not in GRAPH_PRIORS:
            raise ValueError(f"graph_prior must be one of {GRAPH_PRIORS}")
        if self.graph_prior == "erdos_renyi":
            p = self.er_edge_prob
            if p is None or not 0 < p < 1:
                raise ValueError("erdos_renyi prior needs er_edge_prob in (0, 1)")

    def mu0_vec(self, K: int) -> np.ndarray:
        return np.full(K, float(self.mu0))

    def delta_log_graph_prior(self) -> float:
        """Change in log P(G) from adding one edge."""
        if self.graph_prior == "uniform":
            return 0.0
        p = self.er_edge_prob
        return math.log(p) - math.log(1.0 - p)

    def log_graph_prior(self, state: DagState) -> float:
        return state.num_edges * self.delta_log_graph_prior()


@dataclass
class VariationalParams:
    """Per-node Gaussian posterior over incoming edge weights.

    mu[k] is the K-vector mean and sigma[k] the K x K covariance for
    node k; pairing with a graph masks both down to the parent set.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        K = self.mu.shape[0]
        if self.mu.shape != (K, K) or self.sigma.shape != (K, K, K):
            raise ValueError("expected mu of shape (K, K) and sigma of shape (K, K, K)")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma))):
            raise ValueError("variational parameters contain non-finite entries")

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def prior(cls, K: int, hyper: PriorHyper) -> "VariationalParams":
        mu = np.tile(hyper.mu0_vec(K), (K, 1))
        sigma = np.tile(hyper.sigma0_sq * np.eye(K), (K, 1, 1))
        return cls(mu, sigma)

    def check_spd(self):
        """Cholesky-factorize every covariance; raises LinAlgError if any
        is not symmetric positive-definite."""
        for k in range(self.K):
            if not np.allclose(self.sigma[k], self.sigma[k].T, atol=1e-8):
                raise np.linalg.LinAlgError(f"sigma[{k}] is not symmetric")
            np.linalg.cholesky(self.sigma[k])

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mu.tolist(),
            "covariance": [s.ravel().tolist() for s in self.sigma],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "VariationalParams":
        mu = np.asarray(d["mean"], dtype=float)
        K = mu.shape[0]
        sigma = np.asarray(d["covariance"], dtype=float).reshape(K, K, K)
        return cls(mu, sigma)


@dataclass
class GraphMarginals:
    """Empirical parent and co-parent frequencies under a graph sampler.

    parent_prob[i, k] estimates P(X_i is a parent of X_k); for each node
    k, coparent_prob[k, i, j] estimates P(i and j are both parents of k),
    with the diagonal coparent_prob[k, i, i] = parent_prob[i, k].
    """

    parent_prob: np.ndarray
    coparent_prob: np.ndarray

    @property
    def K(self) -> int:
        return self.parent_prob.shape[0]


# ---------------------------------------------------------------------------
# expected log-likelihood and KL of the masked variational posterior


def _sufficient_stats(X: np.ndarray):
    X = np.asarray(X, dtype=float)
    return X.T @ X, X.shape[0]


def _as_design(X) -> np.ndarray:
    return X.X if isinstance(X, Dataset) else np.asarray(X, dtype=float)


def _logdet_spd(a: np.ndarray) -> float:
    # cholesky raises LinAlgError on non-PD input; never clamp silently
    chol = np.linalg.cholesky(a)
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def _node_loglik(xtx, xkk, xk_dot, n, parents, mu_k, sigma_k, sigma_sq):
    """E_q[log N(X_k; X_S theta_S, sigma^2 I)] from sufficient statistics.

    xkk = ||X_k||^2 and xk_dot = X^T X_k. The trace term accounts for the
    posterior covariance of the weights on the parent block.
    """
    const = -0.5 * n * math.log(2.0 * math.pi * sigma_sq)
    if parents.size == 0:
        return const - 0.5 * xkk / sigma_sq
    mu_s = mu_k[parents]
    m_ss = xtx[np.ix_(parents, parents)]
    rss = xkk - 2.0 * xk_dot[parents] @ mu_s + mu_s @ m_ss @ mu_s
    trace = float(np.sum(m_ss * sigma_k[np.ix_(parents, parents)]))
    return const - 0.5 * (rss + trace) / sigma_sq


def _node_kl(parents, mu_k, sigma_k, mu0, sigma0_sq):
    """KL(q || prior) on the parent-coordinate subvector; 0 if no parents.

    The masked covariance is singular on the full space, so the KL is
    taken between the restrictions to the active coordinates.
    """
    d = parents.size
    if d == 0:
        return 0.0
    mu_s = mu_k[parents]
    s_ss = sigma_k[np.ix_(parents, parents)]
    diff = mu0[parents] - mu_s
    return 0.5 * (
        (diff @ diff + np.trace(s_ss)) / sigma0_sq
        - _logdet_spd(s_ss)
        + d * math.log(sigma0_sq)
        - d
    )


def expected_loglik_node(X, k: int, G: DagState, q: VariationalParams, h: PriorHyper) -> float:
    """Expected log-likelihood of column k under q's masked posterior,
    Gaussian normalizing constant included."""
    Xm = _as_design(X)
    xtx, n = _sufficient_stats(Xm)
    parents = G.parents(k)
    return _node_loglik(
        xtx, xtx[k, k], xtx[:, k], n, parents, q.mu[k], q.sigma[k], h.sigma_sq
    )


def kl_node(k: int, G: DagState, q: VariationalParams, h: PriorHyper) -> float:
    parents = G.parents(k)
    return _node_kl(parents, q.mu[k], q.sigma[k], h.mu0_vec(q.K), h.sigma0_sq)


class ScoreCache:
    """Per-node score table for a fixed (data, hyper, q) triple.

    score(k, S) = E_q[log P(X_k | theta_k, S)] - KL_k(S) depends only on
    the node and its parent set, so graph rewards and one-edge deltas
    reduce to cached lookups. Invalidate by building a new cache whenever
    q changes.
    """

    def __init__(self, X, h: PriorHyper, q: VariationalParams):
        Xm = _as_design(X)
        self.xtx, self.n = _sufficient_stats(Xm)
        self.h = h
        self.q = q
        self.K = Xm.shape[1]
        self.mu0 = h.mu0_vec(self.K)
        self._table: dict[tuple[int, bytes], float] = {}

    def node_score(self, k: int, parents: np.ndarray) -> float:
        key = (k, parents.astype(np.int8).tobytes())
        hit = self._table.get(key)
        if hit is not None:
            return hit
        ll = _node_loglik(
            self.xtx, self.xtx[k, k], self.xtx[:, k], self.n,
            parents, self.q.mu[k], self.q.sigma[k], self.h.sigma_sq,
        )
        kl = _node_kl(parents, self.q.mu[k], self.q.sigma[k], self.mu0, self.h.sigma0_sq)
        val = ll - kl
        self._table[key] = val
        return val

    def log_reward(self, G: DagState) -> float:
        total = self.h.log_graph_prior(G)
        for k in range(self.K):
            total += self.node_score(k, G.parents(k))
        return total

    def delta_score(self, G: DagState, i: int, j: int) -> float:
        """log_reward after adding i -> j minus before; only node j moves."""
        old = G.parents(j)
        new = np.sort(np.append(old, i))
        return (
            self.node_score(j, new)
            - self.node_score(j, old)
            + self.h.delta_log_graph_prior()
        )


def log_reward(G: DagState, q: VariationalParams, X, h: PriorHyper) -> float:
    """Unnormalized log-reward of a graph: per-node expected log-likelihood
    minus KL to the weight prior, plus the graph prior term."""
    return ScoreCache(X, h, q).log_reward(G)


def delta_score(G: DagState, i: int, j: int, q: VariationalParams, X, h: PriorHyper) -> float:
    """Difference in log-rewards from adding edge i -> j to G."""
    if not valid_actions(G).edge_mask[i, j]:
        raise ValueError(f"edge ({i}, {j}) is not a valid action on this graph")
    return ScoreCache(X, h, q).delta_score(G, i, j)


# ---------------------------------------------------------------------------
# coordinate update of the variational posterior


def update_variational(m: GraphMarginals, X, h: PriorHyper) -> VariationalParams:
    """Closed-form maximizer of the variational objective given graph
    marginals: per node, a ridge-style precision built from co-parent
    frequencies and a matching mean.
    """
    Xm = _as_design(X)
    xtx, _ = _sufficient_stats(Xm)
    K = Xm.shape[1]
    if m.parent_prob.shape != (K, K):
        raise ValueError("marginals do not match the data dimension")
    mu0 = h.mu0_vec(K)
    eye = np.eye(K)
    mu = np.empty((K, K))
    sigma = np.empty((K, K, K))
    for k in range(K):
        precision = eye / h.sigma0_sq + (xtx * m.coparent_prob[k]) / h.sigma_sq
        cov = np.linalg.inv(precision)
        cov = 0.5 * (cov + cov.T)
        rhs = mu0 / h.sigma0_sq + (xtx[:, k] * m.parent_prob[:, k]) / h.sigma_sq
        mu[k] = cov @ rhs
        sigma[k] = cov
    return VariationalParams(mu, sigma)


def node_elbo(mu_k: np.ndarray, sigma_k: np.ndarray, k: int, m: GraphMarginals, X, h: PriorHyper) -> float:
    """Variational objective for node k as a function of (mu_k, sigma_k),
    with the graph expectation already reduced to marginals.

    update_variational returns its unique stationary point; tests probe
    this with finite differences.
    """
    Xm = _as_design(X)
    xtx, n = _sufficient_stats(Xm)
    weighted = xtx * m.coparent_prob[k]
    mu0 = h.mu0_vec(Xm.shape[1])
    expected_ll = (
        -0.5 * n * math.log(2.0 * math.pi * h.sigma_sq)
        - 0.5
        * (
            xtx[k, k]
            - 2.0 * (xtx[:, k] * m.parent_prob[:, k]) @ mu_k
            + mu_k @ weighted @ mu_k
            + float(np.sum(weighted * sigma_k))
        )
        / h.sigma_sq
    )
    diff = mu0 - mu_k
    kl = 0.5 * (
        (diff @ diff + np.trace(sigma_k)) / h.sigma0_sq
        - _logdet_spd(sigma_k)
        + mu_k.size * math.log(h.sigma0_sq)
        - mu_k.size
    )
    return expected_ll - kl


# ---------------------------------------------------------------------------
# ELBO diagnostic and exact oracles


def elbo(q_samples: list[DagState], q: VariationalParams, X, h: PriorHyper) -> float:
    """Monte-Carlo estimate of the reward-expectation part of the evidence
    bound, averaged over graph samples.

    The sampler's entropy term is not available in closed form, so the
    returned value omits it; with an unnormalized uniform graph prior the
    omission only tightens the bound (entropy >= 0 over a finite space).
    """
    if not q_samples:
        raise ValueError("need at least one graph sample")
    cache = ScoreCache(X, h, q)
    return float(np.mean([cache.log_reward(G) for G in q_samples]))


def exact_log_marginal_likelihood(G: DagState, X, h: PriorHyper) -> float:
    """Exact log P(D | G) with the edge weights integrated out.

    Per node, X_k | G ~ N(X_S mu0_S, sigma^2 I + sigma0^2 X_S X_S^T);
    evaluated through the Woodbury identity so only |S| x |S| systems
    are solved.
    """
    Xm = _as_design(X)
    xtx, n = _sufficient_stats(Xm)
    mu0 = h.mu0_vec(Xm.shape[1])
    total = 0.0
    for k in range(G.K):
        total += _node_log_marginal(
            Xm, xtx, n, k, G.parents(k), mu0, h.sigma_sq, h.sigma0_sq
        )
    return total


def _node_log_marginal(Xm, xtx, n, k, parents, mu0, sigma_sq, sigma0_sq):
    resid = Xm[:, k]
    if parents.size:
        resid = resid - Xm[:, parents] @ mu0[parents]
    rss = float(resid @ resid)
    logdet = n * math.log(sigma_sq)
    quad = rss / sigma_sq
    if parents.size:
        m_ss = xtx[np.ix_(parents, parents)]
        inner = (sigma_sq / sigma0_sq) * np.eye(parents.size) + m_ss
        v = Xm[:, parents].T @ resid
        logdet += _logdet_spd(np.eye(parents.size) + (sigma0_sq / sigma_sq) * m_ss)
        quad -= float(v @ np.linalg.solve(inner, v)) / sigma_sq
    return -0.5 * (n * math.log(2.0 * math.pi) + logdet + quad)


def exhaustive_log_evidence(X, h: PriorHyper):
    """Exact posterior over every DAG for small K.

    Returns (log_evidence, weights, dags) where weights[i] = P(dags[i] | D)
    and log_evidence = log sum_G P(D|G) P(G) under the module's
    unnormalized graph-prior convention. Per-node scores are tabulated by
    parent set, so the sum over all DAGs costs one lookup per node each.
    """
    Xm = _as_design(X)
    K = Xm.shape[1]
    if K > MAX_ENUM_NODES:
        raise ValueError(f"exhaustive posterior limited to K <= {MAX_ENUM_NODES}")
    xtx, n = _sufficient_stats(Xm)
    mu0 = h.mu0_vec(K)
    dags = enumerate_dags(K)
    table: dict[tuple[int, bytes], float] = {}

    def node_term(k, parents):
        key = (k, parents.astype(np.int8).tobytes())
        hit = table.get(key)
        if hit is None:
            hit = _node_log_marginal(Xm, xtx, n, k, parents, mu0, h.sigma_sq, h.sigma0_sq)
            table[key] = hit
        return hit

    scores = np.empty(len(dags))
    for idx, G in enumerate(dags):
        scores[idx] = h.log_graph_prior(G) + sum(
            node_term(k, G.parents(k)) for k in range(K)
        )
    peak = scores.max()
    log_evidence = peak + math.log(np.exp(scores - peak).sum())
    weights = np.exp(scores - log_evidence)
    return float(log_evidence), weights, dags


def sample_theta(G: DagState, q: VariationalParams, rng: np.random.Generator) -> np.ndarray:
    """Draw a full K x K weight matrix from q masked by G: column k is
    N(mu_k, sigma_k) restricted to the parents of k, zeros elsewhere."""
    K = G.K
    theta = np.zeros((K, K))
    for k in range(K):
        parents = G.parents(k)
        if parents.size == 0:
            continue
        cov = q.sigma[k][np.ix_(parents, parents)]
        chol = np.linalg.cholesky(cov)
        theta[parents, k] = q.mu[k][parents] + chol @ rng.standard_normal(parents.size)
    return theta


def save_variational_json(path, q: VariationalParams):
    with open(path, "w") as fh:
        json.dump(q.to_json_dict(), fh)


def load_variational_json(path) -> VariationalParams:
    with open(path) as fh:
        return VariationalParams.from_json_dict(json.load(fh))
