"""Outer coordinate ascent between the graph sampler and the weight
posterior.

Each iteration trains the sampler against the reward induced by the
current weight posterior, draws fresh graphs, reduces them to parent /
co-parent marginals, and applies the closed-form update. The policy is
warm-started across iterations; the first iteration starts from the
prior, so its reward is the prior-expectation form of the marginal
likelihood score.
"""

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dag import DagState
from .gflownet import (
    TrainConfig,
    make_policy,
    policy_from_state_dict,
    sample_posterior,
    train_inner,
)
from .model import (
    Dataset,
    GraphMarginals,
    PriorHyper,
    ScoreCache,
    VariationalParams,
    update_variational,
)
from .seeding import PHASE_POLICY_INIT, PHASE_SAMPLE, PHASE_TRAIN, rng_stream

CHECKPOINT_PATTERN = re.compile(r"iter_(\d{4})\.npz$")
CHECKPOINT_VERSION = 1


@dataclass
class VbgConfig:
    max_outer_iterations: int = 50
    samples_per_update: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)
    prior: PriorHyper = field(default_factory=PriorHyper)
    seed: int = 0

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("max_outer_iterations must be >= 1")
        if self.samples_per_update < 1:
            raise ValueError("samples_per_update must be >= 1")


@dataclass
class IterationDiagnostics:
    iteration: int
    inner_steps: int
    final_inner_loss: float
    partial_elbo: float
    edge_marginals: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "inner_steps": self.inner_steps,
            "final_inner_loss": self.final_inner_loss,
            "partial_elbo": self.partial_elbo,
            "edge_marginals": self.edge_marginals.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "IterationDiagnostics":
        return cls(
            iteration=int(d["iteration"]),
            inner_steps=int(d["inner_steps"]),
            final_inner_loss=float(d["final_inner_loss"]),
            partial_elbo=float(d["partial_elbo"]),
            edge_marginals=np.asarray(d["edge_marginals"], dtype=float),
        )


@dataclass
class VbgResult:
    policy: object
    variational: VariationalParams
    diagnostics: list[IterationDiagnostics]


def graph_marginals_from_samples(samples: list[DagState]) -> GraphMarginals:
    """Empirical parent and co-parent frequencies of a graph sample.

    Built from indicator products, so every per-node co-parent matrix is
    positive semi-definite and the coordinate update stays well posed.
    """
    if not samples:
        raise ValueError("need at least one graph sample")
    stack = np.stack([s.adjacency for s in samples]).astype(float)
    parent_prob = stack.mean(axis=0)
    coparent = np.einsum("mik,mjk->kij", stack, stack) / len(samples)
    return GraphMarginals(parent_prob=parent_prob, coparent_prob=coparent)


def run_vbg(X, cfg: VbgConfig, checkpoint_dir=None, resume: bool = False) -> VbgResult:
    """Run the full alternating scheme on a dataset.

    Deterministic for a fixed config and seed: every phase of every
    iteration draws from its own keyed stream, so a run resumed from the
    latest checkpoint matches an uninterrupted one bit for bit.
    """
    data = X if isinstance(X, Dataset) else Dataset(np.asarray(X, dtype=float))
    K = data.k
    start = 0
    diagnostics: list[IterationDiagnostics] = []
    policy = None
    q = None
    if resume and checkpoint_dir is not None:
        loaded = load_latest_checkpoint(checkpoint_dir)
        if loaded is not None:
            start, policy, q, diagnostics = loaded
    if policy is None:
        policy = make_policy(
            cfg.train.policy, K, cfg.train.hidden_sizes,
            rng=rng_stream(cfg.seed, PHASE_POLICY_INIT),
        )
        q = VariationalParams.prior(K, cfg.prior)
    for it in range(start, cfg.max_outer_iterations):
        try:
            policy, trace = train_inner(
                policy, q, data, cfg.prior, cfg.train, rng_stream(cfg.seed, PHASE_TRAIN, it)
            )
        except Exception as exc:
            raise RuntimeError(f"inner training failed at outer iteration {it}: {exc}") from exc
        samples = sample_posterior(
            policy, cfg.samples_per_update, rng_stream(cfg.seed, PHASE_SAMPLE, it)
        )
        marginals = graph_marginals_from_samples(samples)
        cache = ScoreCache(data, cfg.prior, q)
        partial_elbo = float(np.mean([cache.log_reward(G) for G in samples]))
        q = update_variational(marginals, data, cfg.prior)
        diagnostics.append(
            IterationDiagnostics(
                iteration=it,
                inner_steps=len(trace),
                final_inner_loss=float(trace[-1]) if len(trace) else 0.0,
                partial_elbo=partial_elbo,
                edge_marginals=marginals.parent_prob,
            )
        )
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, it + 1, policy, q, marginals, diagnostics)
    return VbgResult(policy=policy, variational=q, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, iteration: int, policy, q: VariationalParams,
                    marginals: GraphMarginals, diagnostics: list[IterationDiagnostics]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sd = policy.state_dict()
    arrays = {f"policy_{i}": p for i, p in enumerate(sd["params"])}
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "policy_kind": sd["kind"],
        "K": sd["K"],
        "hidden_sizes": sd.get("hidden_sizes"),
        "diagnostics": [d.to_json_dict() for d in diagnostics],
    }
    np.savez(
        directory / f"iter_{iteration:04d}.npz",
        meta=json.dumps(meta),
        mu=q.mu,
        sigma=q.sigma,
        parent_prob=marginals.parent_prob,
        coparent_prob=marginals.coparent_prob,
        **arrays,
    )


def load_latest_checkpoint(directory):
    """Return (iteration, policy, variational, diagnostics) from the most
    recent checkpoint in the directory, or None if there is none."""
    directory = Path(directory)
    if not directory.is_dir():
        return None
    best = None
    for p in directory.iterdir():
        m = CHECKPOINT_PATTERN.search(p.name)
        if m:
            it = int(m.group(1))
            if best is None or it > best[0]:
                best = (it, p)
    if best is None:
        return None
    with np.load(best[1], allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        params = [z[f"policy_{i}"] for i in range(sum(1 for k in z.files if k.startswith("policy_")))]
        sd = {"kind": meta["policy_kind"], "K": meta["K"], "hidden_sizes": meta["hidden_sizes"], "params": params}
        policy = policy_from_state_dict(sd)
        q = VariationalParams(z["mu"].copy(), z["sigma"].copy())
        diagnostics = [IterationDiagnostics.from_json_dict(d) for d in meta["diagnostics"]]
    return meta["iteration"], policy, q, diagnostics
