"""Acceptance gate: one test per criterion, each printing a PASS line with the
measured quantity (run with -s to see them)."""

import os
from dataclasses import replace

import numpy as np
import pytest

from slogan import gradcore as gc
from slogan.gradcore import Rng, finite_diff_check
from slogan.graphdata import Dataset, Graph, SynthConfig, gen_synthetic_biased, make_batch
from slogan.encoder import EncoderParams, encode
from slogan.disentangler import (
    CriticParams, DisentangleConfig, DisentangledFeatures, critic_fit_step,
    infonce_causal_loss, spurious_label_mi, vib_spurious_loss,
)
from slogan.intervenor import build_swap_plan, invariance_loss, reconstruction_loss
from slogan.calibrator import (
    PredictionRecord, build_thresholds, select_confident, source_loss,
)
from slogan.trainer import TrainConfig, adapt, bench_scaling, evaluate, warmup

from conftest import params_bytes, small_model, tiny_domains

# protocol for the synthetic-shift criteria (5-7): the criteria pin rho_s, the
# domain sizes, the seed count, and the thresholds; batch size 64 doubles the
# optimization steps per epoch relative to the real-data default
PROTOCOL = TrainConfig(batch_size=64)
SEEDS = (0, 1, 2, 3, 4)
N_PER_DOMAIN = 500
RHO = 0.9


def report(criterion, passed, detail):
    line = f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}"
    print(line)
    assert passed, line


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


def eight_graph_batch(seed=0):
    src, _ = tiny_domains(n=8, seed=seed)
    return make_batch(src.graphs), src.labels()


def test_criterion_01_gradient_correctness():
    model = small_model()
    batch, labels = eight_graph_batch()
    dis_cfg = DisentangleConfig(beta=0.5, causal_dim=8, spurious_dim=8)

    def l_so():
        feats = model.encode_batch(batch)
        return source_loss(model.class_logits(feats.z_c), labels)

    def l_c_mi():
        feats = model.encode_batch(batch)
        return infonce_causal_loss(feats, labels, model.critic, Rng(11))

    def l_s_mi():
        feats = model.encode_batch(batch)
        return vib_spurious_loss(feats, labels, model.critic, dis_cfg, Rng(12))

    def l_ge():
        feats = model.encode_batch(batch)
        return reconstruction_loss(feats, model.generator)

    def l_inv():
        feats = model.encode_batch(batch)
        plan = build_swap_plan(4, 4, Rng(13))
        lo, hi = np.arange(0, 4), np.arange(4, 8)
        half = DisentangledFeatures(
            z=gc.gather_rows(feats.z, lo), z_c=gc.gather_rows(feats.z_c, lo),
            z_s=gc.gather_rows(feats.z_s, lo))
        other = DisentangledFeatures(
            z=gc.gather_rows(feats.z, hi), z_c=gc.gather_rows(feats.z_c, hi),
            z_s=gc.gather_rows(feats.z_s, hi))
        return invariance_loss(half, other, plan, model.generator)[0]

    all_params = list(model.store.items()) + list(model.critic_store.items())
    worst = 0.0
    checked = 0
    for loss_name, loss_fn in [("l_so", l_so), ("l_c_mi", l_c_mi), ("l_s_mi", l_s_mi),
                               ("l_ge", l_ge), ("l_inv", l_inv)]:
        for pname, p in all_params:
            rep = finite_diff_check(lambda _t, f=loss_fn: f(), p, tol=1e-3)
            worst = max(worst, rep["max_rel_err"])
            checked += rep["checked"]
            assert rep["passed"], (loss_name, pname, rep)
    report(1, worst < 1e-3,
           f"max relative error {worst:.2e} over {checked} coordinates, all losses, all parameters")


# ---------------------------------------------------------------------------
# criterion 2: structural invariance


def test_criterion_02_structural_invariance():
    rng = Rng(2)
    params = EncoderParams.init(4, 128, rng.child("enc"))
    graphs = []
    for i in range(100):
        n = int(rng.integers(3, 12))
        pairs = [(a, b) for a in range(n) for b in range(a + 1, n)]
        keep = rng.uniform(size=len(pairs)) < 0.35
        edges = np.array([p for p, k in zip(pairs, keep) if k], dtype=np.int64).reshape(-1, 2)
        graphs.append(Graph(node_count=n, edges=edges,
                            node_features=rng.normal(size=(n, 4)), label=0, id=i))

    worst_perm = 0.0
    for g in graphs:
        perm = rng.permutation(g.node_count)
        inv = np.argsort(perm)
        permuted = Graph(node_count=g.node_count,
                         edges=np.sort(inv[g.edges], axis=1) if g.edges.size else g.edges,
                         node_features=g.node_features[perm], label=0, id=g.id)
        z1 = encode(make_batch([g]), params).values
        z2 = encode(make_batch([permuted]), params).values
        worst_perm = max(worst_perm, float(np.abs(z1 - z2).max()))

    z_batch = encode(make_batch(graphs), params).values
    z_single = np.concatenate([encode(make_batch([g]), params).values for g in graphs])
    worst_batch = float(np.abs(z_batch - z_single).max())

    ok = worst_perm < 1e-5 and worst_batch < 1e-5
    report(2, ok, f"permutation deviation {worst_perm:.2e}, batch-vs-single {worst_batch:.2e}")


# ---------------------------------------------------------------------------
# criterion 3: calibration algebra


def _rec(gid, probs):
    probs = np.asarray(probs, dtype=float)
    cls = int(np.argmax(probs))
    return PredictionRecord(gid, probs, float(probs[cls]), cls)


def test_criterion_03_calibration_algebra():
    records = [_rec(0, [0.8, 0.2]), _rec(1, [0.6, 0.4]), _rec(2, [0.1, 0.9])]
    table = build_thresholds(records, tau=0.95, num_classes=2)
    fixture_ok = (np.allclose(table.max_conf, [0.8, 0.9])
                  and np.allclose(table.per_class, [0.76, 0.855]))
    members = select_confident(records, table)
    fixture_ok &= list(members.graph_ids) == [0, 2]

    rng = Rng(3)
    pool = [_rec(i, p / p.sum()) for i, p in enumerate(rng.uniform(0.01, 1, size=(200, 2)))]
    sizes = [len(select_confident(pool, build_thresholds(pool, float(t), 2)))
             for t in np.arange(0.5, 0.995, 0.01)]
    monotone = all(a >= b for a, b in zip(sizes, sizes[1:]))

    class0 = [_rec(i, [c, 1 - c]) for i, c in enumerate([0.99, 0.97, 0.92])]
    class1 = [_rec(10 + i, [1 - 0.8 * c, 0.8 * c]) for i, c in enumerate([0.99, 0.97, 0.92])]
    skewed = class0 + class1
    fixed_admits = {r.predicted for r in skewed if r.confidence > 0.95}
    adaptive = select_confident(skewed, build_thresholds(skewed, 0.95, 2))
    balance = fixed_admits == {0} and set(adaptive.pseudo_labels) == {0, 1}

    report(3, fixture_ok and monotone and balance,
           f"fixture exact={fixture_ok}, monotone in tau={monotone}, adaptive balance={balance}")


# ---------------------------------------------------------------------------
# criterion 4: MI estimator calibration


def test_criterion_04_mi_estimator_calibration():
    rng = Rng(4)
    batch = 512
    labels = rng.integers(0, 2, size=batch)
    z_c = np.zeros((batch, 8))
    z_c[:, 0] = np.where(labels == 1, 1.0, -1.0)
    feats = DisentangledFeatures(
        z=gc.constant(rng.normal(size=(batch, 16))),
        z_c=gc.constant(z_c),
        z_s=gc.constant(rng.normal(size=(batch, 8))),
    )
    critic = CriticParams.init(8, 8, 16, 2, rng.child("critic"))
    store = critic.store()
    fit_rng = Rng(40)
    for _ in range(200):
        critic_fit_step(feats, labels, critic, store, fit_rng, lr=0.05)
    causal_est = -infonce_causal_loss(feats, labels, critic, Rng(41)).item()
    spurious_est = spurious_label_mi(feats, labels, critic, Rng(42)).item()
    ok = causal_est > np.log(2) - 0.2 and spurious_est < 0.2
    report(4, ok, f"causal estimate {causal_est:.3f} (> ln2-0.2 = {np.log(2)-0.2:.3f}), "
                  f"spurious estimate {spurious_est:.3f} (< 0.2)")


# ---------------------------------------------------------------------------
# shared synthetic-shift protocol for criteria 5-7


@pytest.fixture(scope="module")
def protocol_runs():
    runs = []
    for seed in SEEDS:
        src, tgt = gen_synthetic_biased(
            SynthConfig(n_per_domain=N_PER_DOMAIN, rho_s=RHO), Rng(seed).child("synth"))
        cfg = replace(PROTOCOL, seed=seed)
        warm = warmup(src, cfg)
        baseline = evaluate(tgt, warm)[0]
        row = {"seed": seed, "baseline": baseline, "accs": {}, "source": src, "target": tgt}
        for tag, flags in [("full", {}), ("no_dis", {"no_dis": True}),
                           ("no_inv", {"no_inv": True}),
                           ("no_sup_target", {"no_sup_target": True})]:
            model = warm.copy()
            result = adapt(src, tgt, replace(cfg, **flags), model)
            row["accs"][tag] = evaluate(tgt, model)[0]
            if tag == "full":
                row["full_model"] = model
                row["epochs"] = result.epochs
        runs.append(row)
    return runs


def test_criterion_05_directional_adaptation_gain(protocol_runs):
    baselines = [r["baseline"] for r in protocol_runs]
    fulls = [r["accs"]["full"] for r in protocol_runs]
    gain = float(np.mean(fulls) - np.mean(baselines))
    per_seed = ", ".join(f"s{r['seed']}: {b:.3f}->{f:.3f}"
                         for r, b, f in zip(protocol_runs, baselines, fulls))
    report(5, gain >= 0.05,
           f"mean target accuracy gain {gain*100:+.1f} points (need >= +5.0) [{per_seed}]")


def test_criterion_06_ablation_ordering(protocol_runs):
    mean = {tag: float(np.mean([r["accs"][tag] for r in protocol_runs]))
            for tag in ("full", "no_dis", "no_inv", "no_sup_target")}
    ok = all(mean["full"] >= mean[tag] for tag in ("no_dis", "no_inv", "no_sup_target"))
    report(6, ok, "mean target accuracy " +
           " ".join(f"{k}={v:.4f}" for k, v in mean.items()))


def _domain_probe_accuracy(x, domains):
    x = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    rng = np.random.default_rng(0)
    idx = rng.permutation(len(domains))
    ntr = int(0.7 * len(domains))
    tr, te = idx[:ntr], idx[ntr:]
    w, *_ = np.linalg.lstsq(x[tr], 2.0 * domains[tr] - 1.0, rcond=None)
    return float(np.mean((x[te] @ w > 0) == (domains[te] == 1)))


def test_criterion_07_disentanglement_probe(protocol_runs):
    gaps = []
    details = []
    for r in protocol_runs:
        model = r["full_model"]
        zc, zs, dom = [], [], []
        for d, ds in ((0, r["source"]), (1, r["target"])):
            for start in range(0, len(ds.graphs), 128):
                feats = model.encode_batch(make_batch(ds.graphs[start:start + 128]))
                zc.append(feats.z_c.values)
                zs.append(feats.z_s.values)
            dom += [d] * len(ds.graphs)
        dom = np.array(dom)
        acc_c = _domain_probe_accuracy(np.concatenate(zc), dom)
        acc_s = _domain_probe_accuracy(np.concatenate(zs), dom)
        gaps.append(acc_s - acc_c)
        details.append(f"s{r['seed']}: zs={acc_s:.3f} zc={acc_c:.3f}")
    mean_gap = float(np.mean(gaps))
    report(7, mean_gap >= 0.10,
           f"mean domain-probe gap {mean_gap*100:+.1f} points (need >= +10) [{'; '.join(details)}]")


def test_aux_reconstruction_residual_trajectory(protocol_runs):
    # the reconstruction proxy's trailing mean decreases over the first 10
    # adaptation epochs of the full runs
    ok_count = 0
    for r in protocol_runs:
        ge = [e.losses.l_ge for e in r["epochs"][:10]]
        trailing = np.cumsum(ge) / np.arange(1, len(ge) + 1)
        ok_count += int(trailing[-1] <= trailing[1])
    assert ok_count >= 4, f"trailing reconstruction mean decreased in only {ok_count}/5 runs"


# ---------------------------------------------------------------------------
# criterion 8: linear scaling


def test_criterion_08_complexity_linear_in_nodes():
    bench = bench_scaling(repeats=15, seed=8)
    r2 = bench["r_squared"]
    rows = ", ".join(f"{n}:{t*1e3:.1f}ms" for n, t in bench["rows"])
    report(8, r2 >= 0.98, f"linear-fit R^2 = {r2:.4f} over [{rows}]")


# ---------------------------------------------------------------------------
# criterion 9: determinism and the target-label canary


def test_criterion_09_determinism_and_canary():
    src, tgt = tiny_domains(n=32, seed=9)
    cfg = TrainConfig(warmup_epochs=5, adapt_epochs=4, batch_size=16, seed=9)

    def run(target):
        model = warmup(src, cfg, small_model(seed=9))
        res = adapt(src, target, cfg, model)
        return model, [(e.losses.total, e.confident_size) for e in res.epochs]

    m1, log1 = run(tgt)
    m2, log2 = run(tgt)
    identical = params_bytes(m1) == params_bytes(m2) and log1 == log2

    from dataclasses import replace as dc_replace
    flipped = Dataset([dc_replace(g, label=1 - g.label) for g in tgt.graphs],
                      tgt.num_classes, tgt.feature_dim, tgt.feature_kind)
    m3, log3 = run(flipped)
    canary = params_bytes(m1) == params_bytes(m3) and log1 == log3

    report(9, identical and canary,
           f"fixed-seed byte-identical={identical}, scrambled-target-label canary={canary}")


# ---------------------------------------------------------------------------
# criterion 10: report-only real-data run


DATA_ROOT = os.environ.get("SLOGAN_DATASETS", os.path.join(os.path.dirname(__file__), "data"))


@pytest.mark.skipif(
    not (os.path.exists(os.path.join(DATA_ROOT, "PTC_MR", "PTC_MR_A.txt"))
         and os.path.exists(os.path.join(DATA_ROOT, "PTC_MM", "PTC_MM_A.txt"))),
    reason="PTC files not supplied (report-only criterion)")
def test_criterion_10_ptc_cross_dataset_report_only():
    from slogan.graphdata import SOURCE, TARGET, parse_tudataset

    src = parse_tudataset(os.path.join(DATA_ROOT, "PTC_MR"), "PTC_MR").retagged(SOURCE)
    tgt = parse_tudataset(os.path.join(DATA_ROOT, "PTC_MM"), "PTC_MM").retagged(TARGET)
    d = src.feature_dim
    if tgt.feature_dim != d:
        pytest.skip("feature dims differ between PTC sub-datasets as parsed")
    cfg = TrainConfig(seed=0)
    model = warmup(src, cfg)
    adapt(src, tgt, cfg, model)
    acc = evaluate(tgt, model)[0]
    report(10, True, f"PTC MR->MM completed, target accuracy {acc:.3f} (report-only)")
