"""DAG states for edge-by-edge graph construction.

A state holds the adjacency matrix together with its transitive closure,
so that cycle checks during construction are O(1) lookups and adding an
edge updates the closure incrementally instead of recomputing it.
States are immutable values: ``apply_edge`` returns a new state, which
makes them safe to share across parallel samplers.
"""

import numpy as np
from dataclasses import dataclass, field

# K=6 already has 3.78M DAGs; exhaustive work is capped below that.
MAX_ENUM_NODES = 5


class InvalidActionError(ValueError):
    """Edge addition that is absent from the valid-action mask."""


@dataclass(frozen=True, eq=False)
class DagState:
    """Immutable DAG over nodes 0..K-1.

    adjacency[i, j] is True iff the edge i -> j is present.
    closure[i, j] is True iff a directed path i ~> j exists (irreflexive,
    so an all-False diagonal is equivalent to acyclicity).
    """

    adjacency: np.ndarray
    closure: np.ndarray
    num_edges: int

    @property
    def K(self) -> int:
        return self.adjacency.shape[0]

    def key(self) -> bytes:
        """Hashable identity: adjacency packed row-major into bits."""
        return np.packbits(self.adjacency).tobytes()

    def __eq__(self, other):
        if not isinstance(other, DagState):
            return NotImplemented
        return self.adjacency.shape == other.adjacency.shape and bool(
            np.array_equal(self.adjacency, other.adjacency)
        )

    def __hash__(self):
        return hash(self.key())

    def edges(self) -> list[tuple[int, int]]:
        ii, jj = np.nonzero(self.adjacency)
        return list(zip(ii.tolist(), jj.tolist()))

    def parents(self, k: int) -> np.ndarray:
        """Indices i with an edge i -> k, ascending."""
        return np.flatnonzero(self.adjacency[:, k])

    def __repr__(self):
        return f"DagState(K={self.K}, edges={self.edges()})"


@dataclass(frozen=True)
class ActionMask:
    """Valid moves out of a state: addable edges plus the stop action."""

    edge_mask: np.ndarray
    stop_allowed: bool = field(default=True)

    def num_valid_edges(self) -> int:
        return int(self.edge_mask.sum())


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def new_empty(K: int) -> DagState:
    """Fully disconnected graph over K nodes, the construction root."""
    if K < 1:
        raise ValueError(f"node count must be >= 1, got {K}")
    z = np.zeros((K, K), dtype=bool)
    return DagState(_freeze(z), _freeze(z.copy()), 0)


def valid_actions(state: DagState) -> ActionMask:
    """Mask of edges whose addition keeps the graph acyclic.

    (i, j) is valid iff it is not a self-loop, not already present, and
    there is no existing path j ~> i (which the new edge would close
    into a cycle). Stop is always allowed.
    """
    K = state.K
    blocked = state.adjacency | state.closure.T | np.eye(K, dtype=bool)
    return ActionMask(edge_mask=_freeze(~blocked))


def apply_edge(state: DagState, i: int, j: int) -> DagState:
    """Return the state with edge i -> j added.

    The closure update is O(K^2): every node reaching i now reaches
    everything reachable from j.
    """
    mask = valid_actions(state)
    if not mask.edge_mask[i, j]:
        raise InvalidActionError(f"edge ({i}, {j}) is not a valid action here")
    adjacency = state.adjacency.copy()
    adjacency[i, j] = True
    closure = state.closure.copy()
    reaches_i = closure[:, i].copy()
    reaches_i[i] = True
    reached_from_j = closure[j, :].copy()
    reached_from_j[j] = True
    closure |= np.outer(reaches_i, reached_from_j)
    return DagState(_freeze(adjacency), _freeze(closure), state.num_edges + 1)


def parent_mask(state: DagState, k: int) -> np.ndarray:
    """Diagonal 0/1 matrix selecting the parents of node k."""
    if not 0 <= k < state.K:
        raise ValueError(f"node index {k} out of range for K={state.K}")
    return np.diag(state.adjacency[:, k].astype(float))


def transitive_closure(adjacency: np.ndarray) -> np.ndarray:
    """Irreflexive reachability matrix by Warshall's algorithm."""
    closure = adjacency.astype(bool).copy()
    K = closure.shape[0]
    for k in range(K):
        closure |= np.outer(closure[:, k], closure[k, :])
    return closure


def is_valid(state: DagState) -> bool:
    """Check all state invariants by recomputation."""
    adj = state.adjacency
    if adj.dtype != bool or adj.shape != state.closure.shape:
        return False
    if np.any(np.diag(adj)):
        return False
    closure = transitive_closure(adj)
    if np.any(np.diag(closure)):
        return False
    return bool(
        np.array_equal(closure, state.closure)
        and int(adj.sum()) == state.num_edges
    )


def from_adjacency(adjacency: np.ndarray) -> DagState:
    """Build a state from a 0/1 adjacency matrix, validating acyclicity."""
    adj = np.asarray(adjacency).astype(bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {adj.shape}")
    if np.any(np.diag(adj)):
        raise ValueError("adjacency has self-loops")
    closure = transitive_closure(adj)
    if np.any(np.diag(closure)):
        raise ValueError("adjacency contains a directed cycle")
    return DagState(_freeze(adj.copy()), _freeze(closure), int(adj.sum()))


def to_bit_string(state: DagState) -> str:
    """Row-major K^2-character 0/1 string, the on-disk DAG format."""
    return "".join("1" if v else "0" for v in state.adjacency.ravel())


def from_bit_string(bits: str) -> DagState:
    K = int(round(len(bits) ** 0.5))
    if K * K != len(bits) or not set(bits) <= {"0", "1"}:
        raise ValueError("expected a K^2-character 0/1 string")
    adj = np.frombuffer(bits.encode(), dtype=np.uint8).reshape(K, K) - ord("0")
    return from_adjacency(adj)


def topological_order(state: DagState) -> np.ndarray:
    """A topological order: sort by ancestor count (strictly increasing
    along every edge, so ties are between incomparable nodes)."""
    return np.argsort(state.closure.sum(axis=0), kind="stable")


def enumerate_dags(K: int) -> list[DagState]:
    """All labeled DAGs on K nodes, each exactly once.

    Depth-first over edge additions in lexicographic order: any subset of
    a DAG's edges is acyclic, so every DAG is reached through its sorted
    edge sequence and through no other.
    """
    if K > MAX_ENUM_NODES:
        raise ValueError(
            f"enumeration limited to K <= {MAX_ENUM_NODES}, got {K}"
        )
    root = new_empty(K)
    out = []

    def expand(state, min_flat):
        out.append(state)
        mask = valid_actions(state).edge_mask.ravel()
        for flat in np.flatnonzero(mask[min_flat:]) + min_flat:
            expand(apply_edge(state, flat // K, flat % K), flat + 1)

    expand(root, 0)
    return out
