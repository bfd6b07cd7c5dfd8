"""Grouped directed networks, design matrices and identification checks.

Agents, groups and subnetworks are indexed from 0 internally. CSV readers in
:mod:`peerfx.io` translate external labels into these dense indices.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

LOG = logging.getLogger(__name__)


class NetworkError(ValueError):
    """Raised for structurally invalid network input."""


def row_normalize(A: sp.spmatrix) -> sp.csr_matrix:
    """Row-normalize a nonnegative sparse matrix; all-zero rows stay zero."""
    A = sp.csr_matrix(A, dtype=float)
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    np.divide(1.0, deg, out=inv, where=deg > 0)
    return sp.csr_matrix(sp.diags(inv) @ A)


@dataclass(frozen=True)
class GroupedNetwork:
    """Directed network split by the (own group, friend group) pair.

    ``adj[g][h]`` holds the links from agents of group ``g`` to friends of
    group ``h``; ``weights[g][h]`` is its row-normalized version. ``to_group[h]``
    is the sum over ``g`` of ``weights[g][h]``: since the blocks have disjoint
    row supports, row ``i`` of it is the row of ``W^{g_i h}``.
    """

    groups: np.ndarray
    subnet: np.ndarray
    M: int
    adj: tuple
    weights: tuple
    adj_all: sp.csr_matrix
    weights_all: sp.csr_matrix
    to_group: tuple = field(repr=False)

    @property
    def n(self) -> int:
        return int(self.groups.shape[0])

    @property
    def S(self) -> int:
        return int(self.subnet.max()) + 1 if self.n else 0

    @property
    def out_degree(self) -> np.ndarray:
        return np.asarray(self.adj_all.sum(axis=1)).ravel().astype(int)

    def subnet_index(self) -> list[np.ndarray]:
        """Agent indices of every subnetwork, in subnetwork order."""
        order = np.argsort(self.subnet, kind="stable")
        cuts = np.searchsorted(self.subnet[order], np.arange(1, self.S))
        return np.split(order, cuts)

    def edges(self) -> np.ndarray:
        A = self.adj_all.tocoo()
        idx = np.lexsort((A.col, A.row))
        return np.column_stack([A.row[idx], A.col[idx]])

    def peer_matrix(self, alpha: np.ndarray) -> sp.csr_matrix:
        """Sparse ``sum_{g,h} alpha[g, h] W^{gh}``: the derivative of the peer term."""
        out = sp.csr_matrix((self.n, self.n))
        for g in range(self.M):
            for h in range(self.M):
                if alpha[g, h] != 0.0:
                    out = out + alpha[g, h] * self.weights[g][h]
        return sp.csr_matrix(out)

    def peer_averages(self, u: np.ndarray) -> np.ndarray:
        """n x M matrix whose column ``h`` is friends-in-group-h average of ``u``."""
        return np.column_stack([W @ u for W in self.to_group])

    def with_groups(self, groups) -> "GroupedNetwork":
        """Same friendships, new group labels (group-split weights rebuilt)."""
        return build_network(self.edges(), groups, self.subnet, M=self.M)

    def without_links(self) -> "GroupedNetwork":
        return build_network(np.empty((0, 2), dtype=int), self.groups, self.subnet, M=self.M)


def build_network(edges, groups, subnet=None, M: int | None = None) -> GroupedNetwork:
    """Build a :class:`GroupedNetwork` from directed ``(i, j)`` pairs ("j is a friend of i").

    Raises :class:`NetworkError` on out-of-range indices, self-links,
    duplicated edges and links between different subnetworks.
    """
    groups = np.asarray(groups, dtype=int)
    n = groups.shape[0]
    subnet = np.zeros(n, dtype=int) if subnet is None else np.asarray(subnet, dtype=int)
    if subnet.shape != (n,):
        raise NetworkError("subnet labels must have one entry per agent")
    if n and (groups.min() < 0 or subnet.min() < 0):
        raise NetworkError("group and subnetwork labels must be nonnegative (0-based)")
    M = int(groups.max()) + 1 if M is None and n else (M or 1)
    if n and groups.max() >= M:
        raise NetworkError(f"group label {groups.max()} out of range for M={M}")

    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    src, dst = edges[:, 0], edges[:, 1]
    if edges.size:
        bad = (src < 0) | (src >= n) | (dst < 0) | (dst >= n)
        if bad.any():
            i, j = edges[np.argmax(bad)]
            raise NetworkError(f"edge ({i}, {j}) references an agent outside 0..{n - 1}")
        loops = src == dst
        if loops.any():
            raise NetworkError(f"self-link on agent {src[np.argmax(loops)]}")
        cross = subnet[src] != subnet[dst]
        if cross.any():
            i, j = edges[np.argmax(cross)]
            raise NetworkError(
                f"edge ({i}, {j}) crosses subnetworks {subnet[i]} and {subnet[j]}")
        keys = src.astype(np.int64) * n + dst
        uniq, counts = np.unique(keys, return_counts=True)
        if (counts > 1).any():
            k = uniq[np.argmax(counts > 1)]
            raise NetworkError(f"duplicate edge ({k // n}, {k % n})")

    A = sp.csr_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    adj, weights = [], []
    row_masks = [sp.diags((groups == g).astype(float)) for g in range(M)]
    for g in range(M):
        adj_row, w_row = [], []
        for h in range(M):
            Agh = sp.csr_matrix(row_masks[g] @ A @ row_masks[h])
            Agh.eliminate_zeros()
            adj_row.append(Agh)
            w_row.append(row_normalize(Agh))
        adj.append(tuple(adj_row))
        weights.append(tuple(w_row))
    to_group = tuple(
        sp.csr_matrix(sum((weights[g][h] for g in range(M)), sp.csr_matrix((n, n))))
        for h in range(M))
    return GroupedNetwork(
        groups=groups, subnet=subnet, M=M, adj=tuple(adj), weights=tuple(weights),
        adj_all=A, weights_all=row_normalize(A), to_group=to_group)


@dataclass(frozen=True)
class DesignMatrix:
    """Covariates ``X``, contextual averages ``WX`` and regressors ``Z``.

    ``Z`` is ``[1, X, WX]``, or ``[D, X, WX]`` with ``D`` the subnetwork dummies
    when fixed effects are requested.
    """

    X: np.ndarray
    WX: np.ndarray
    Z: np.ndarray
    fixed_effects: bool = False
    names: tuple = ()

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def n_intercepts(self) -> int:
        return self.Z.shape[1] - 2 * self.K

    def own_column(self, k: int) -> int:
        return self.n_intercepts + k

    def contextual_column(self, k: int) -> int:
        return self.n_intercepts + self.K + k


def build_design(net: GroupedNetwork, X, fixed_effects: bool = False,
                 names=None) -> DesignMatrix:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != net.n:
        raise ValueError(f"X has {X.shape[0]} rows, network has {net.n} agents")
    if not np.isfinite(X).all():
        r = int(np.argwhere(~np.isfinite(X))[0, 0])
        raise ValueError(f"non-finite covariate for agent {r}")
    WX = np.asarray(net.weights_all @ X)
    if fixed_effects:
        lead = np.zeros((net.n, net.S))
        lead[np.arange(net.n), net.subnet] = 1.0
        lead_names = [f"fe_{s}" for s in range(net.S)]
    else:
        lead = np.ones((net.n, 1))
        lead_names = ["intercept"]
    K = X.shape[1]
    names = list(names) if names is not None else [f"x{k + 1}" for k in range(K)]
    col_names = tuple(lead_names + names + [f"bar_{nm}" for nm in names])
    return DesignMatrix(X=X, WX=WX, Z=np.hstack([lead, X, WX]),
                        fixed_effects=fixed_effects, names=col_names)


def compute_pi(net: GroupedNetwork) -> np.ndarray:
    """n x M indicator: friends in group g and a friend's friend who is not a friend.

    Friends' friends are taken on the pooled directed graph and exclude the
    agent itself.
    """
    A = (net.adj_all > 0).astype(np.int64)
    two_step = (A @ A).tocsr()
    two_step.setdiag(0)
    two_step.eliminate_zeros()
    # entries of the 2-step graph that are not direct links
    not_direct = two_step - two_step.multiply(A)
    not_direct.eliminate_zeros()
    has_fof = np.diff(not_direct.indptr) > 0
    pi = np.zeros((net.n, net.M), dtype=int)
    for h in range(net.M):
        deg_h = np.diff(net.to_group[h].tocsr().indptr) > 0
        pi[:, h] = deg_h & has_fof
    return pi


def numerical_rank(A: np.ndarray) -> tuple[int, float]:
    """Rank with threshold ``max(shape) * eps * s_max`` and the 2-norm condition number."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0, np.inf
    s = np.linalg.svd(A, compute_uv=False)
    if s[0] == 0.0:
        return 0, np.inf
    tol = max(A.shape) * np.finfo(float).eps * s[0]
    rank = int((s > tol).sum())
    cond = float(s[0] / s[-1]) if s[-1] > 0 else np.inf
    return rank, cond


@dataclass
class DiagnosticReport:
    verdict: str
    rank_zz: int
    cond_zz: float
    n_regressors: int
    rank_pi: int | None
    M: int
    condition_a: str
    condition_b: str
    condition_c: str
    contextual_index: int | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "condition_A": {"status": self.condition_a, "rank": self.rank_zz,
                            "columns": self.n_regressors, "condition_number": self.cond_zz},
            "condition_B": {"status": self.condition_b, "rank": self.rank_pi, "M": self.M},
            "condition_C": {"status": self.condition_c,
                            "contextual_index": self.contextual_index},
            "notes": list(self.notes),
        }


def identification_diagnostic(net: GroupedNetwork, design: DesignMatrix,
                              contextual_index: int | None = None) -> DiagnosticReport:
    """Check the testable sufficient conditions for full rank of the regressors.

    A: ``sum_i z_i z_i'`` full rank. B: ``sum_i pi_i pi_i'`` full rank
    (only evaluated for M <= 2). C involves the coefficients and is left as a
    post-estimation check: ``beta1[k] * beta2[k] >= 0`` and ``beta2[k] != 0``.
    """
    Z = design.Z
    rank_zz, cond_zz = numerical_rank(Z.T @ Z)
    cond_a = "PASS" if rank_zz == Z.shape[1] else "FAIL"
    notes = []
    if net.M > 2:
        warnings.warn("sufficient identification conditions only cover M <= 2; "
                      "reporting the rank of Z'Z only", stacklevel=2)
        notes.append("M > 2: condition B not evaluated")
        rank_pi, cond_b = None, "NOT_EVALUATED"
    else:
        pi = compute_pi(net).astype(float)
        rank_pi, _ = numerical_rank(pi.T @ pi)
        cond_b = "PASS" if rank_pi == net.M else "FAIL"
    if contextual_index is None:
        cond_c = "NOT_REQUESTED"
    else:
        if not 0 <= contextual_index < design.K:
            raise ValueError(f"contextual_index must be in 0..{design.K - 1}")
        cond_c = "POST_ESTIMATION"
        notes.append(f"condition C: confirm beta1[{contextual_index}]*beta2[{contextual_index}]"
                     " >= 0 and beta2 != 0 after estimation")

    if cond_a == "FAIL" or cond_b == "FAIL":
        verdict = "FAIL"
    elif cond_b == "NOT_EVALUATED":
        verdict = "INDETERMINATE"
    else:
        verdict = "PASS"
    return DiagnosticReport(verdict=verdict, rank_zz=rank_zz, cond_zz=cond_zz,
                            n_regressors=Z.shape[1], rank_pi=rank_pi, M=net.M,
                            condition_a=cond_a, condition_b=cond_b, condition_c=cond_c,
                            contextual_index=contextual_index, notes=notes)


def check_contextual_condition(beta1: float, beta2: float) -> bool:
    return beta1 * beta2 >= 0 and beta2 != 0
