"""Two-layer graph convolution encoder with mean readout, plus the softmax
classification head.

Propagation uses symmetric normalization with self-loops,
A_hat = D^{-1/2} (A + I) D^{-1/2}, applied as a constant sparse operator so a
forward/backward pass stays linear in node count for bounded-degree graphs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import gradcore as gc
from .gradcore import Rng, Tensor
from .graphdata import GraphBatch

HIDDEN_DIM = 128


@dataclass
class EncoderParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @staticmethod
    def init(feature_dim: int, hidden: int, rng: Rng) -> "EncoderParams":
        return EncoderParams(
            W1=gc.glorot(rng, feature_dim, hidden),
            b1=gc.zeros(hidden),
            W2=gc.glorot(rng, hidden, hidden),
            b2=gc.zeros(hidden),
        )


def normalize_adjacency(batch: GraphBatch) -> sp.csr_matrix:
    """Block-diagonal D^{-1/2} (A + I) D^{-1/2} over the whole batch.

    Entry values are scaled in COO form; broadcasting against the sparse
    matrix would densify it.
    """
    n = batch.num_nodes
    if batch.edges.size:
        rows = np.concatenate([batch.edges[:, 0], batch.edges[:, 1], np.arange(n)])
        cols = np.concatenate([batch.edges[:, 1], batch.edges[:, 0], np.arange(n)])
    else:
        rows = cols = np.arange(n)
    deg = np.bincount(rows, minlength=n)
    inv_sqrt = 1.0 / np.sqrt(deg.astype(gc.default_dtype()))
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def pooling_matrix(batch: GraphBatch) -> sp.csr_matrix:
    """Constant (num_graphs x num_nodes) mean-readout operator."""
    weights = (1.0 / batch.graph_sizes[batch.membership]).astype(gc.default_dtype())
    return sp.csr_matrix(
        (weights, (batch.membership, np.arange(batch.num_nodes))),
        shape=(batch.num_graphs, batch.num_nodes),
    )


def encode(batch: GraphBatch, params: EncoderParams) -> Tensor:
    """Pooled graph representations: two propagate+transform layers with ReLU,
    then a per-graph mean over node embeddings."""
    x = gc.constant(batch.node_features)
    if x.shape[1] != params.W1.shape[0]:
        raise ValueError(f"encode: feature dim {x.shape[1]} != W1 rows {params.W1.shape[0]}")
    a_hat = normalize_adjacency(batch)
    h1 = gc.relu(gc.add(gc.sparse_matmul(a_hat, gc.matmul(x, params.W1)), params.b1))
    h2 = gc.relu(gc.add(gc.sparse_matmul(a_hat, gc.matmul(h1, params.W2)), params.b2))
    return gc.sparse_matmul(pooling_matrix(batch), h2)


@dataclass
class LinearHead:
    W: Tensor
    b: Tensor

    @staticmethod
    def init(in_dim: int, out_dim: int, rng: Rng) -> "LinearHead":
        return LinearHead(W=gc.glorot(rng, in_dim, out_dim), b=gc.zeros(out_dim))

    def logits(self, x: Tensor) -> Tensor:
        return gc.add(gc.matmul(x, self.W), self.b)


def classify(z: Tensor, head: LinearHead) -> Tensor:
    """Row-wise class probabilities from an affine map; rows sum to 1."""
    if z.shape[1] != head.W.shape[0]:
        raise ValueError(f"classify: input dim {z.shape[1]} != head dim {head.W.shape[0]}")
    return gc.softmax_rows(head.logits(z))
