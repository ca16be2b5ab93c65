"""Training orchestration: source warm-up, adaptation with the combined
objective, evaluation, ablations, the error-bound audit, and the scaling
benchmark.

Every random draw comes from named child streams of one seed, so a fixed
(seed, config, data) triple determines every logged number. Target labels are
read only by evaluation; nothing on the gradient path sees them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import gradcore as gc
from .gradcore import Rng, adam_step_active
from .graphdata import Dataset, Graph, GraphBatch, make_batch
from .model import ModelConfig, SloganModel
from .disentangler import DisentangleConfig, DisentangledFeatures, dis_loss, critic_fit_step, spurious_label_mi
from .intervenor import build_swap_plan, generate, invariance_loss, reconstruction_loss
from .calibrator import (
    build_thresholds, score_target, select_confident, source_loss,
    target_loss, sup_loss, write_confident_csv,
)

ABLATION_FLAGS = ("no_dis", "no_inv", "no_sup_target")


@dataclass
class TrainConfig:
    gamma: float = 0.003
    eta: float = 0.1
    tau: float = 0.95
    beta: float = 0.5
    lr: float = 0.001
    batch_size: int = 128
    warmup_epochs: int = 100
    adapt_epochs: int = 30
    seed: int = 0
    no_dis: bool = False
    no_inv: bool = False
    no_sup_target: bool = False
    symmetric_swap: bool = False

    def validate(self) -> None:
        if min(self.gamma, self.eta, self.beta) < 0:
            raise ValueError("gamma, eta, beta must be >= 0")
        if self.warmup_epochs < 0 or self.adapt_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class LossBreakdown:
    l_so: float
    l_ta: float
    l_sup: float
    causal_mi_loss: float
    spurious_mi_loss: float
    l_dis: float
    l_ge: float
    l_inv: float
    total: float


@dataclass
class EpochLog:
    epoch: int
    losses: LossBreakdown
    confident_size: int
    source_acc: float
    target_acc: float


@dataclass
class AdaptResult:
    model: SloganModel
    epochs: list[EpochLog] = field(default_factory=list)
    steps: list[LossBreakdown] = field(default_factory=list)


METRICS_HEADER = ("epoch,l_so,l_ta,l_c_mi,l_s_mi,l_ge,l_inv,total,"
                  "confident_size,source_acc,target_acc")


def _require_labels(ds: Dataset, what: str) -> None:
    if any(g.label is None for g in ds.graphs):
        raise ValueError(f"{what}: dataset contains unlabeled graphs")


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def new_model(source: Dataset, cfg: TrainConfig) -> SloganModel:
    return SloganModel(
        ModelConfig(feature_dim=source.feature_dim, num_classes=source.num_classes),
        Rng(cfg.seed).child("init"),
    )


def warmup(source: Dataset, cfg: TrainConfig, model: SloganModel | None = None) -> SloganModel:
    """Source-only pre-training of the whole stack: cross-entropy through the
    causal projection plus reconstruction through the generator. No target
    data is touched.

    The reconstruction term trains the projections too, so both start
    adaptation as informative summaries of the pooled representation rather
    than random maps.
    """
    cfg.validate()
    if not source.graphs:
        raise ValueError("warmup: empty source dataset")
    _require_labels(source, "warmup")
    if model is None:
        model = new_model(source, cfg)
    order = Rng(cfg.seed).child("warmup-order")
    n = len(source.graphs)
    for _ in range(cfg.warmup_epochs):
        perm = order.permutation(n)
        for idx in _batches(n, cfg.batch_size, perm):
            batch = make_batch([source.graphs[i] for i in idx])
            feats = model.encode_batch(batch)
            l_so = source_loss(model.class_logits(feats.z_c), batch.labels)
            l_ge = reconstruction_loss(feats, model.generator)
            model.store.zero_grad()
            gc.add(l_so, l_ge).backward()
            adam_step_active(model.store, cfg.lr)
    return model


def _confident_rows(batch: GraphBatch, label_by_id: dict[int, int]):
    rows = [i for i, gid in enumerate(batch.ids) if int(gid) in label_by_id]
    pseudo = np.array([label_by_id[int(batch.ids[i])] for i in rows], dtype=np.int64)
    return np.array(rows, dtype=np.int64), pseudo


def _union_feats(src: DisentangledFeatures, tgt: DisentangledFeatures,
                 rows: np.ndarray) -> DisentangledFeatures:
    if rows.size == 0:
        return src
    return DisentangledFeatures(
        z=gc.concat_rows(src.z, gc.gather_rows(tgt.z, rows)),
        z_c=gc.concat_rows(src.z_c, gc.gather_rows(tgt.z_c, rows)),
        z_s=gc.concat_rows(src.z_s, gc.gather_rows(tgt.z_s, rows)),
    )


def adapt(source: Dataset, target: Dataset, cfg: TrainConfig, model: SloganModel,
          out_dir=None, feature_dump_every: int = 0) -> AdaptResult:
    """Adaptation epochs over the combined objective.

    Per epoch the confident target set is refreshed from full-dataset scores.
    Per batch: one estimator step on detached features, then one model step on
    supervision + weighted disentanglement and intervention terms. A term
    whose weight is zero or whose ablation flag is set is never built, so its
    parameters receive no gradient.
    """
    cfg.validate()
    if not target.graphs:
        raise ValueError("adapt: empty target dataset")
    if not source.graphs:
        raise ValueError("adapt: empty source dataset")
    _require_labels(source, "adapt")

    root = Rng(cfg.seed)
    order = root.child("adapt-order")
    dis_rng = root.child("dis-perm")
    critic_rng = root.child("critic-perm")
    swap_rng = root.child("swap")

    dis_on = cfg.gamma > 0 and not cfg.no_dis
    inv_on = cfg.eta > 0 and not cfg.no_inv
    dis_cfg = DisentangleConfig(beta=cfg.beta, causal_dim=model.cfg.causal_dim,
                                spurious_dim=model.cfg.spurious_dim)

    n_so, n_ta = len(source.graphs), len(target.graphs)
    tgt_bs = min(cfg.batch_size, n_ta)
    tgt_ptr = 0
    result = AdaptResult(model=model)
    metrics_rows = []

    target_labeled = all(g.label is not None for g in target.graphs)

    for epoch in range(cfg.adapt_epochs):
        records = score_target(target, model, cfg.batch_size)
        table = build_thresholds(records, cfg.tau, model.cfg.num_classes)
        confident = select_confident(records, table)
        label_by_id = confident.label_of()
        if out_dir is not None:
            import os
            os.makedirs(os.path.join(str(out_dir), "confident"), exist_ok=True)
            write_confident_csv(records, confident,
                                os.path.join(str(out_dir), "confident", f"epoch_{epoch:03d}.csv"))

        epoch_steps = []
        perm = order.permutation(n_so)
        for idx in _batches(n_so, cfg.batch_size, perm):
            tgt_idx = np.arange(tgt_ptr, tgt_ptr + tgt_bs) % n_ta
            tgt_ptr = int((tgt_ptr + tgt_bs) % n_ta)

            src_batch = make_batch([source.graphs[i] for i in idx])
            tgt_batch = make_batch([target.graphs[i] for i in tgt_idx])
            src_feats = model.encode_batch(src_batch)
            tgt_feats = model.encode_batch(tgt_batch)

            l_so = source_loss(model.class_logits(src_feats.z_c), src_batch.labels)
            rows, pseudo = _confident_rows(tgt_batch, label_by_id)
            if rows.size and not cfg.no_sup_target:
                conf_logits = model.class_logits(gc.gather_rows(tgt_feats.z_c, rows))
                l_ta = target_loss(conf_logits, pseudo)
            else:
                l_ta = gc.constant(0.0)
            l_sup = sup_loss(l_so, l_ta)
            total = l_sup

            dis_components = {"causal_mi_loss": 0.0, "spurious_mi_loss": 0.0}
            l_dis_val = 0.0
            if dis_on:
                union = _union_feats(src_feats, tgt_feats, rows)
                union_labels = np.concatenate([src_batch.labels, pseudo]) if rows.size else src_batch.labels
                if union.batch_size >= 2:
                    # estimators learn an order of magnitude faster than the
                    # model, otherwise their bounds lag too far behind to give
                    # the projection heads a useful gradient
                    critic_fit_step(union, union_labels, model.critic, model.critic_store,
                                    critic_rng, 10.0 * cfg.lr)
                    l_dis, dis_components = dis_loss(union, union_labels, model.critic,
                                                     dis_cfg, dis_rng)
                    l_dis_val = l_dis.item()
                    total = gc.add(total, gc.mul(l_dis, cfg.gamma))

            l_ge_val = 0.0
            l_inv_val = 0.0
            if inv_on:
                plan = build_swap_plan(src_feats.batch_size, tgt_feats.batch_size, swap_rng)
                l_inv, inv_components = invariance_loss(src_feats, tgt_feats, plan,
                                                        model.generator,
                                                        symmetric=cfg.symmetric_swap)
                l_ge_val = inv_components["reconstruction"]
                l_inv_val = l_inv.item()
                total = gc.add(total, gc.mul(l_inv, cfg.eta))

            model.store.zero_grad()
            total.backward()
            adam_step_active(model.store, cfg.lr)

            step_log = LossBreakdown(
                l_so=l_so.item(), l_ta=l_ta.item(), l_sup=l_sup.item(),
                causal_mi_loss=dis_components["causal_mi_loss"],
                spurious_mi_loss=dis_components["spurious_mi_loss"],
                l_dis=l_dis_val, l_ge=l_ge_val, l_inv=l_inv_val, total=total.item(),
            )
            epoch_steps.append(step_log)
            result.steps.append(step_log)

        source_acc, _ = evaluate(source, model, cfg.batch_size)
        target_acc = evaluate(target, model, cfg.batch_size)[0] if target_labeled else float("nan")
        log = EpochLog(
            epoch=epoch,
            losses=_mean_breakdown(epoch_steps),
            confident_size=len(confident),
            source_acc=source_acc,
            target_acc=target_acc,
        )
        result.epochs.append(log)
        metrics_rows.append(_metrics_row(log))
        if feature_dump_every and out_dir is not None and (epoch + 1) % feature_dump_every == 0:
            import os
            dump_features(model, source, target,
                          os.path.join(str(out_dir), f"features_{epoch:03d}.csv"),
                          batch_size=cfg.batch_size)

    if out_dir is not None:
        import os
        with open(os.path.join(str(out_dir), "metrics.csv"), "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in metrics_rows:
                fh.write(row + "\n")
    return result


def _mean_breakdown(steps: list[LossBreakdown]) -> LossBreakdown:
    if not steps:
        return LossBreakdown(*([0.0] * 9))
    arr = np.array([[s.l_so, s.l_ta, s.l_sup, s.causal_mi_loss, s.spurious_mi_loss,
                     s.l_dis, s.l_ge, s.l_inv, s.total] for s in steps])
    return LossBreakdown(*arr.mean(axis=0))


def _metrics_row(log: EpochLog) -> str:
    b = log.losses
    vals = [b.l_so, b.l_ta, b.causal_mi_loss, b.spurious_mi_loss, b.l_ge, b.l_inv, b.total]
    nums = ",".join(f"{v:.10g}" for v in vals)
    return (f"{log.epoch},{nums},{log.confident_size},"
            f"{log.source_acc:.10g},{log.target_acc:.10g}")


def evaluate(ds: Dataset, model: SloganModel, batch_size: int = 128,
             ) -> tuple[float, np.ndarray]:
    """Accuracy of argmax predictions from causal features, plus per-class
    accuracy. Labels are consumed here and nowhere on the training path."""
    if not ds.graphs:
        raise ValueError("evaluate: empty dataset")
    _require_labels(ds, "evaluate")
    correct = np.zeros(model.cfg.num_classes)
    counts = np.zeros(model.cfg.num_classes)
    for start in range(0, len(ds.graphs), batch_size):
        chunk = ds.graphs[start:start + batch_size]
        probs = model.predict_probs(make_batch(chunk))
        preds = probs.argmax(axis=1)
        for g, p in zip(chunk, preds):
            counts[g.label] += 1
            correct[g.label] += float(p == g.label)
    per_class = np.divide(correct, counts, out=np.zeros_like(correct), where=counts > 0)
    return float(correct.sum() / counts.sum()), per_class


# ---------------------------------------------------------------------------
# ablations


ABLATION_VARIANTS = {
    "full": {},
    "no_sup_target": {"no_sup_target": True},
    "no_inv": {"no_inv": True},
    "no_dis": {"no_dis": True},
}


def ablate(source: Dataset, target: Dataset, cfg: TrainConfig,
           seeds: list[int] | None = None) -> dict:
    """Run the full objective and each single-component removal with shared
    seeds and a shared warm-up; reports per-seed and mean target accuracy."""
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    per_seed: dict[int, dict[str, float]] = {}
    for seed in seeds:
        base_cfg = replace(cfg, seed=seed)
        warm = warmup(source, base_cfg)
        row = {}
        for variant, flags in ABLATION_VARIANTS.items():
            model = warm.copy()
            adapt(source, target, replace(base_cfg, **flags), model)
            row[variant] = evaluate(target, model, cfg.batch_size)[0]
        per_seed[seed] = row
    mean = {variant: float(np.mean([per_seed[s][variant] for s in seeds]))
            for variant in ABLATION_VARIANTS}
    return {"per_seed": per_seed, "mean": mean}


# ---------------------------------------------------------------------------
# bound audit


@dataclass
class BoundAudit:
    """Measured quantities mirroring the stability conditions of the error
    bound. The bound's constants (C, L, delta, n_S, I_c) are unidentifiable
    from data, so nothing here asserts the inequality itself."""

    source_error: float
    spurious_label_mi: float       # epsilon_1 proxy
    reconstruction_residual: float  # epsilon_2 proxy
    target_error: float | None
    unidentified_constants: tuple[str, ...] = ("C", "L", "delta", "n_S", "I_c")


def _pooled_features(ds: Dataset, model: SloganModel, batch_size: int) -> DisentangledFeatures:
    zs, zcs, zss = [], [], []
    for start in range(0, len(ds.graphs), batch_size):
        feats = model.encode_batch(make_batch(ds.graphs[start:start + batch_size]))
        zs.append(feats.z.values)
        zcs.append(feats.z_c.values)
        zss.append(feats.z_s.values)
    return DisentangledFeatures(
        z=gc.constant(np.concatenate(zs)),
        z_c=gc.constant(np.concatenate(zcs)),
        z_s=gc.constant(np.concatenate(zss)),
    )


def bound_audit(model: SloganModel, source: Dataset, target: Dataset,
                batch_size: int = 128, seed: int = 0) -> BoundAudit:
    """Empirical source error, the spurious-label information estimate under
    the current variational head, and the mean reconstruction residual."""
    source_acc, _ = evaluate(source, model, batch_size)
    src_feats = _pooled_features(source, model, batch_size)
    eps1 = spurious_label_mi(src_feats, source.labels(), model.critic,
                             Rng(seed).child("audit-perm")).item()

    tgt_feats = _pooled_features(target, model, batch_size)
    residuals = []
    for feats in (src_feats, tgt_feats):
        recon = generate(feats.z_c, feats.z_s, model.generator)
        residuals.append(gc.row_sqdist(feats.z, recon).values)
    eps2 = float(np.mean(np.concatenate(residuals)))

    target_error = None
    if all(g.label is not None for g in target.graphs):
        target_error = 1.0 - evaluate(target, model, batch_size)[0]
    return BoundAudit(
        source_error=1.0 - source_acc,
        spurious_label_mi=eps1,
        reconstruction_residual=eps2,
        target_error=target_error,
    )


# ---------------------------------------------------------------------------
# scaling benchmark


DEFAULT_BENCH_SIZES = (100, 200, 400, 800, 1600, 3200)


def _bench_graph(num_nodes: int, rng: Rng) -> Graph:
    """Ring plus skip connections: bounded degree, so edge count grows
    linearly with node count."""
    idx = np.arange(num_nodes)
    edges = np.concatenate([
        np.stack([idx, (idx + 1) % num_nodes], axis=1),
        np.stack([idx, (idx + 2) % num_nodes], axis=1),
    ])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    feats = rng.normal(size=(num_nodes, 4))
    return Graph(node_count=num_nodes, edges=edges, node_features=feats, label=0)


def bench_scaling(sizes=None, repeats: int = 5, seed: int = 0) -> dict:
    """Median forward+backward wall time per graph size and the least-squares
    linear fit of time against node count.

    Runs at a fixed narrow hidden width: node-count scaling is what is being
    measured, and keeping every intermediate under the allocator's mmap
    threshold keeps single timings free of page-fault noise.
    """
    if sizes is None:
        sizes = DEFAULT_BENCH_SIZES
    rng = Rng(seed)
    model = SloganModel(ModelConfig(feature_dim=4, num_classes=2, hidden_dim=32,
                                    causal_dim=16, spurious_dim=16, generator_hidden=32),
                        rng.child("init"))

    rows = []
    for size in sizes:
        graph = _bench_graph(size, rng.child(f"graph-{size}"))
        batch = make_batch([graph])

        def run():
            feats = model.encode_batch(batch)
            loss = source_loss(model.class_logits(feats.z_c), batch.labels)
            model.store.zero_grad()
            loss.backward()

        run()  # untimed warm pass
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        rows.append((size, float(np.median(times))))

    xs = np.array([r[0] for r in rows], dtype=float)
    ys = np.array([r[1] for r in rows], dtype=float)
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r_squared = 1.0 - ss_res / ss_tot
    return {"rows": rows, "slope": float(slope), "intercept": float(intercept),
            "r_squared": r_squared}


# ---------------------------------------------------------------------------
# feature dumps (the artifact's replacement for embedding visualizations)


def dump_features(model: SloganModel, source: Dataset, target: Dataset, path,
                  batch_size: int = 128) -> None:
    dc, ds_dim = model.cfg.causal_dim, model.cfg.spurious_dim
    header = (["id", "domain", "label"]
              + [f"zc{i}" for i in range(dc)] + [f"zs{i}" for i in range(ds_dim)])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for domain, ds in (("source", source), ("target", target)):
            for start in range(0, len(ds.graphs), batch_size):
                chunk = ds.graphs[start:start + batch_size]
                feats = model.encode_batch(make_batch(chunk))
                for g, zc, zs in zip(chunk, feats.z_c.values, feats.z_s.values):
                    label = -1 if g.label is None else g.label
                    coords = ",".join(f"{v:.8g}" for v in np.concatenate([zc, zs]))
                    fh.write(f"{g.id},{domain},{label},{coords}\n")
