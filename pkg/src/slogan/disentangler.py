"""Causal/spurious feature disentanglement.

Splits pooled graph representations z into learned affine projections z_c
(causal) and z_s (spurious), and scores them with neural mutual-information
bounds: a bilinear contrastive bound ties z_c to labels, a variational
conditional plus a bilinear residual bound control what z_s may carry. All
marginal expectations are approximated by in-batch permutations drawn from the
provided Rng, so a fixed seed gives a bit-identical loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ParamStore, Rng, Tensor
from .encoder import LinearHead


@dataclass
class DisentangleConfig:
    beta: float = 0.5
    causal_dim: int = 64
    spurious_dim: int = 64

    def validate(self, repr_dim: int) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.causal_dim + self.spurious_dim > repr_dim:
            raise ValueError("causal_dim + spurious_dim exceeds representation width")


@dataclass
class DisentangledFeatures:
    z: Tensor    # (B, repr_dim)
    z_c: Tensor  # (B, causal_dim)
    z_s: Tensor  # (B, spurious_dim)

    @property
    def batch_size(self) -> int:
        return self.z.shape[0]

    def detached(self) -> "DisentangledFeatures":
        return DisentangledFeatures(self.z.detach(), self.z_c.detach(), self.z_s.detach())


@dataclass
class ProjectionHeads:
    causal: LinearHead
    spurious: LinearHead

    @staticmethod
    def init(repr_dim: int, causal_dim: int, spurious_dim: int, rng: Rng) -> "ProjectionHeads":
        return ProjectionHeads(
            causal=LinearHead.init(repr_dim, causal_dim, rng),
            spurious=LinearHead.init(repr_dim, spurious_dim, rng),
        )


def split_features(z: Tensor, heads: ProjectionHeads) -> DisentangledFeatures:
    if z.shape[1] != heads.causal.W.shape[0]:
        raise ValueError(f"split_features: width {z.shape[1]} != heads width {heads.causal.W.shape[0]}")
    return DisentangledFeatures(z=z, z_c=heads.causal.logits(z), z_s=heads.spurious.logits(z))


@dataclass
class CriticParams:
    """Estimator parameters: bilinear critics plus the variational conditional."""

    W_causal: Tensor   # (causal_dim, C)
    W_psi: Tensor      # (spurious_dim, repr_dim)
    q_head: LinearHead  # spurious_dim -> C

    @staticmethod
    def init(causal_dim: int, spurious_dim: int, repr_dim: int, num_classes: int,
             rng: Rng) -> "CriticParams":
        return CriticParams(
            W_causal=gc.glorot(rng, causal_dim, num_classes),
            W_psi=gc.glorot(rng, spurious_dim, repr_dim),
            q_head=LinearHead.init(spurious_dim, num_classes, rng),
        )

    def store(self) -> ParamStore:
        s = ParamStore()
        s.add("W_causal", self.W_causal)
        s.add("W_psi", self.W_psi)
        s.add("q_W", self.q_head.W)
        s.add("q_b", self.q_head.b)
        return s


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_batch(feats: DisentangledFeatures) -> None:
    if feats.batch_size < 2:
        raise ValueError("batch of 1: no negatives available for marginal sampling")


def infonce_causal_loss(feats: DisentangledFeatures, labels: np.ndarray,
                        critic: CriticParams, rng: Rng) -> Tensor:
    """Negated contrastive bound between z_c and labels.

    Joint scores pair each z_c with its own label; negatives use an in-batch
    label permutation (derangement preferred). Minimizing the returned value
    maximizes the mutual-information bound.
    """
    _check_batch(feats)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = critic.W_causal.shape[1]
    scores = gc.matmul(feats.z_c, critic.W_causal)  # (B, C)
    y_joint = gc.constant(_one_hot(labels, num_classes))
    perm = rng.derangement(len(labels))
    y_neg = gc.constant(_one_hot(labels[perm], num_classes))
    xi_joint = gc.tsum(gc.mul(scores, y_joint), axis=1)
    xi_neg = gc.tsum(gc.mul(scores, y_neg), axis=1)
    bound = gc.sub(gc.mean(xi_joint), gc.log_mean_exp(xi_neg))
    return gc.mul(bound, -1.0)


def _psi_rows(z_s: Tensor, z: Tensor, critic: CriticParams) -> Tensor:
    return gc.tsum(gc.mul(gc.matmul(z_s, critic.W_psi), z), axis=1)


def spurious_label_mi(feats: DisentangledFeatures, labels: np.ndarray,
                      critic: CriticParams, rng: Rng) -> Tensor:
    """Variational-conditional estimate of the information z_s holds about labels."""
    _check_batch(feats)
    labels = np.asarray(labels, dtype=np.int64)
    log_q = gc.mul(gc.cross_entropy_rows(critic.q_head.logits(feats.z_s), labels), -1.0)
    perm = rng.derangement(len(labels))
    log_q_shuf = gc.mul(gc.cross_entropy_rows(critic.q_head.logits(feats.z_s), labels[perm]), -1.0)
    return gc.sub(gc.mean(log_q), gc.mean(log_q_shuf))


def spurious_repr_mi(feats: DisentangledFeatures, critic: CriticParams, rng: Rng) -> Tensor:
    """Bilinear contrastive estimate of the information z_s retains about z."""
    _check_batch(feats)
    psi_joint = _psi_rows(feats.z_s, feats.z, critic)
    perm = rng.derangement(feats.batch_size)
    psi_shuf = _psi_rows(feats.z_s, gc.gather_rows(feats.z, perm), critic)
    return gc.sub(gc.mean(psi_joint), gc.log_mean_exp(psi_shuf))


def vib_spurious_loss(feats: DisentangledFeatures, labels: np.ndarray,
                      critic: CriticParams, cfg: DisentangleConfig, rng: Rng) -> Tensor:
    """Suppress label information in z_s while keeping residual information
    about z: estimate(z_s;labels) - beta * estimate(z_s;z)."""
    i_sy = spurious_label_mi(feats, labels, critic, rng)
    if cfg.beta == 0.0:
        return i_sy
    i_sz = spurious_repr_mi(feats, critic, rng)
    return gc.sub(i_sy, gc.mul(i_sz, cfg.beta))


def dis_loss(feats: DisentangledFeatures, labels: np.ndarray, critic: CriticParams,
             cfg: DisentangleConfig, rng: Rng) -> tuple[Tensor, dict]:
    """Composite disentanglement objective; returns the tensor and its two
    components as floats for logging."""
    causal = infonce_causal_loss(feats, labels, critic, rng)
    spurious = vib_spurious_loss(feats, labels, critic, cfg, rng)
    total = gc.add(causal, spurious)
    return total, {"causal_mi_loss": causal.item(), "spurious_mi_loss": spurious.item()}


def critic_fit_step(feats: DisentangledFeatures, labels: np.ndarray, critic: CriticParams,
                    critic_store: ParamStore, rng: Rng, lr: float = 0.001) -> None:
    """One Adam step on the estimators with features held constant.

    Tightens both contrastive bounds and fits the variational conditional by
    cross-entropy; fitting q separately keeps the conditional bound away from
    the degenerate constant solution.
    """
    feats = feats.detached()
    labels = np.asarray(labels, dtype=np.int64)
    causal_bound = gc.mul(infonce_causal_loss(feats, labels, critic, rng), -1.0)
    repr_bound = spurious_repr_mi(feats, critic, rng)
    q_ce = gc.mean(gc.cross_entropy_rows(critic.q_head.logits(feats.z_s), labels))
    objective = gc.add(gc.sub(q_ce, causal_bound), gc.mul(repr_bound, -1.0))
    critic_store.zero_grad()
    objective.backward()
    gc.adam_step(critic_store, lr)


def covariance_diagnostic(feats: DisentangledFeatures) -> float:
    """Frobenius norm of the empirical cross-covariance between z_c and z_s
    columns (ddof=1). Reported only, never optimized."""
    if feats.batch_size < 2:
        raise ValueError("covariance diagnostic needs a batch of at least 2")
    zc = feats.z_c.values
    zs = feats.z_s.values
    zc = zc - zc.mean(axis=0, keepdims=True)
    zs = zs - zs.mean(axis=0, keepdims=True)
    cov = zc.T @ zs / (feats.batch_size - 1)
    return float(np.linalg.norm(cov))
