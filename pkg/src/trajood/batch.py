"""Flattened batches of fully connected graphs.

Nodes of all graphs are stacked row-wise. Gathers, scatters and per-graph
means are expressed as constant sparse matrices so the differentiable code only
ever needs a sparse-times-dense product and its transpose.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from trajood.graph import LIGAND


@lru_cache(maxsize=None)
def _pairs(n: int):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = i != j
    return i[mask], j[mask]


@dataclass
class SparseOp:
    M: sp.csr_matrix
    MT: sp.csr_matrix

    @classmethod
    def of(cls, M) -> "SparseOp":
        M = sp.csr_matrix(M)
        return cls(M, M.T.tocsr())


@dataclass
class GraphBatch:
    sizes: np.ndarray
    node_class: np.ndarray
    graph_index: np.ndarray
    offsets: np.ndarray
    edge_diff: SparseOp  # E x N, x_i - x_j
    gather_recv: SparseOp  # E x N
    gather_send: SparseOp  # E x N
    aggregate: SparseOp  # N x E, mean over incoming edges
    node_mean: SparseOp  # N x N, per-graph mean broadcast to nodes
    graph_mean: SparseOp  # B x N
    select_lig: SparseOp  # N_L x N
    select_poc: SparseOp  # N_P x N
    lig_index: np.ndarray
    poc_index: np.ndarray

    @property
    def n_graphs(self) -> int:
        return len(self.sizes)

    @property
    def n_nodes(self) -> int:
        return len(self.node_class)

    @classmethod
    def build(cls, sizes, node_class) -> "GraphBatch":
        sizes = np.asarray(sizes, dtype=np.int64)
        node_class = np.asarray(node_class, dtype=np.int64)
        N = int(sizes.sum())
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        graph_index = np.repeat(np.arange(len(sizes)), sizes)
        rows, cols, deg = [], [], []
        for off, n in zip(offsets, sizes):
            i, j = _pairs(int(n))
            rows.append(i + off)
            cols.append(j + off)
        recv = np.concatenate(rows)
        send = np.concatenate(cols)
        E = len(recv)
        e = np.arange(E)
        ones = np.ones(E)
        G_r = sp.csr_matrix((ones, (e, recv)), shape=(E, N))
        G_s = sp.csr_matrix((ones, (e, send)), shape=(E, N))
        deg = (sizes - 1)[graph_index]
        agg = sp.csr_matrix((1.0 / deg[recv], (recv, e)), shape=(N, E))
        inv_n = 1.0 / sizes[graph_index]
        gm = sp.csr_matrix((inv_n, (graph_index, np.arange(N))), shape=(len(sizes), N))
        bcast = sp.csr_matrix((np.ones(N), (np.arange(N), graph_index)), shape=(N, len(sizes)))
        lig = np.flatnonzero(node_class == LIGAND)
        poc = np.flatnonzero(node_class != LIGAND)
        sel_l = sp.csr_matrix((np.ones(len(lig)), (np.arange(len(lig)), lig)), shape=(len(lig), N))
        sel_p = sp.csr_matrix((np.ones(len(poc)), (np.arange(len(poc)), poc)), shape=(len(poc), N))
        return cls(
            sizes=sizes,
            node_class=node_class,
            graph_index=graph_index,
            offsets=offsets,
            edge_diff=SparseOp.of(G_r - G_s),
            gather_recv=SparseOp.of(G_r),
            gather_send=SparseOp.of(G_s),
            aggregate=SparseOp.of(agg),
            node_mean=SparseOp.of(bcast @ gm),
            graph_mean=SparseOp.of(gm),
            select_lig=SparseOp.of(sel_l),
            select_poc=SparseOp.of(sel_p),
            lig_index=lig,
            poc_index=poc,
        )

    @classmethod
    def from_graphs(cls, graphs) -> "GraphBatch":
        return cls.build([g.n for g in graphs], np.concatenate([g.node_class for g in graphs]))

    def split(self, a: np.ndarray) -> list[np.ndarray]:
        return np.split(a, np.cumsum(self.sizes)[:-1])

    def com_project(self, x: np.ndarray) -> np.ndarray:
        return x - self.node_mean.M @ x

    def graph_sum(self, a: np.ndarray) -> np.ndarray:
        """Sum of per-node rows (any width) within each graph."""
        a = a.reshape(a.shape[0], -1).sum(axis=1)
        return np.bincount(self.graph_index, weights=a, minlength=self.n_graphs)
