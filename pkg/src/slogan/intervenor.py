"""Generative intervention: reconstruct z from (z_c, z_s) and swap spurious
parts across domains to break local spurious couplings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import Rng, Tensor
from .disentangler import DisentangledFeatures


@dataclass
class GeneratorParams:
    """Two-layer perceptron mapping concat(z_c, z_s) back to representation space."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @staticmethod
    def init(causal_dim: int, spurious_dim: int, repr_dim: int, rng: Rng,
             hidden: int = 128) -> "GeneratorParams":
        in_dim = causal_dim + spurious_dim
        return GeneratorParams(
            W1=gc.glorot(rng, in_dim, hidden),
            b1=gc.zeros(hidden),
            W2=gc.glorot(rng, hidden, repr_dim),
            b2=gc.zeros(repr_dim),
        )


@dataclass
class SwapPlan:
    """Pairs (source row i, target row k) whose spurious parts are exchanged;
    every source row appears exactly once."""

    pairs: np.ndarray  # (n_source, 2)

    @property
    def source_idx(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target_idx(self) -> np.ndarray:
        return self.pairs[:, 1]


def generate(z_c: Tensor, z_s: Tensor, g: GeneratorParams) -> Tensor:
    if z_c.shape[0] != z_s.shape[0]:
        raise ValueError(f"generate: row counts differ {z_c.shape} vs {z_s.shape}")
    if z_c.shape[1] + z_s.shape[1] != g.W1.shape[0]:
        raise ValueError(
            f"generate: widths {z_c.shape[1]}+{z_s.shape[1]} != generator input {g.W1.shape[0]}"
        )
    h = gc.relu(gc.add(gc.matmul(gc.concat(z_c, z_s), g.W1), g.b1))
    return gc.add(gc.matmul(h, g.W2), g.b2)


def reconstruction_loss(feats: DisentangledFeatures, g: GeneratorParams) -> Tensor:
    """Mean squared L2 distance between z and its reconstruction from (z_c, z_s)."""
    recon = generate(feats.z_c, feats.z_s, g)
    return gc.mean(gc.row_sqdist(feats.z, recon))


def build_swap_plan(n_source: int, n_target: int, rng: Rng) -> SwapPlan:
    """Pair each source row with a uniformly drawn target row (with replacement)."""
    if n_source < 1 or n_target < 1:
        raise ValueError("build_swap_plan: both batches must be non-empty")
    targets = rng.integers(0, n_target, size=n_source)
    return SwapPlan(pairs=np.stack([np.arange(n_source), targets], axis=1))


def invariance_loss(src_feats: DisentangledFeatures, tgt_feats: DisentangledFeatures,
                    plan: SwapPlan, g: GeneratorParams,
                    symmetric: bool = False, stop_gradient_target: bool = False,
                    ) -> tuple[Tensor, dict]:
    """Reconstruction over both batches plus the swap-consistency term.

    The swap term rebuilds each source z from its own causal part and a
    target row's spurious part, and penalizes the squared distance to the
    original source z. ``symmetric`` adds the mirrored target-causal +
    source-spurious term; ``stop_gradient_target`` detaches the consistency
    targets.
    """
    n_src, n_tgt = src_feats.batch_size, tgt_feats.batch_size
    if plan.pairs.size == 0 or plan.source_idx.max() >= n_src or plan.target_idx.max() >= n_tgt:
        raise ValueError("invariance_loss: swap plan does not match batch sizes")

    union = DisentangledFeatures(
        z=gc.concat_rows(src_feats.z, tgt_feats.z),
        z_c=gc.concat_rows(src_feats.z_c, tgt_feats.z_c),
        z_s=gc.concat_rows(src_feats.z_s, tgt_feats.z_s),
    )
    recon = reconstruction_loss(union, g)

    def swap_term(c_feats, s_feats, c_idx, s_idx):
        z_c = gc.gather_rows(c_feats.z_c, c_idx)
        z_s = gc.gather_rows(s_feats.z_s, s_idx)
        target = gc.gather_rows(c_feats.z, c_idx)
        if stop_gradient_target:
            target = target.detach()
        return gc.mean(gc.row_sqdist(generate(z_c, z_s, g), target))

    swapped = swap_term(src_feats, tgt_feats, plan.source_idx, plan.target_idx)
    total = gc.add(recon, swapped)
    if symmetric:
        mirrored = swap_term(tgt_feats, src_feats, plan.target_idx, plan.source_idx)
        total = gc.add(total, mirrored)
    return total, {"reconstruction": recon.item(), "swap": swapped.item()}
