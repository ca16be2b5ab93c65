"""Command-line entry point wiring datasets, configs, and trainer operations
into reproducible runs.

Every command writes a ``config_echo.json`` with the fully resolved
configuration (re-running from it reproduces outputs byte-identically), and
removes whatever it has written if it fails partway. Config files are flat
JSON objects whose keys mirror flag names; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

from .gradcore import Rng
from .graphdata import (
    SOURCE, TARGET, Dataset, SynthConfig, density_split, gen_synthetic_biased,
    parse_tudataset, write_tudataset,
)
from .model import load_model, save_model
from .trainer import (
    ABLATION_FLAGS, TrainConfig, adapt, ablate, bench_scaling, bound_audit,
    dump_features, evaluate, warmup,
)
from . import plots

COMMANDS = ("gen-synth", "split", "train-source", "adapt", "eval", "ablate",
            "audit-bound", "bench-scaling", "dump-features")


@dataclass
class RunConfig:
    command: str
    dataset_root: str | None = None
    dataset_name: str | None = None
    synthetic: bool = False
    rho_s: float = 0.9
    n_per_domain: int = 500
    parts: int = 4
    source_idx: int = 0
    target_idx: int = 1
    gamma: float = 0.003
    eta: float = 0.1
    tau: float = 0.95
    beta: float = 0.5
    lr: float = 0.001
    batch_size: int = 128
    warmup_epochs: int = 100
    adapt_epochs: int = 30
    seed: int = 0
    ablate: str | None = None
    symmetric_swap: bool = False
    out: str | None = None

    def train_config(self) -> TrainConfig:
        flags = {name: False for name in ABLATION_FLAGS}
        if self.ablate is not None:
            flags[self.ablate] = True
        return TrainConfig(
            gamma=self.gamma, eta=self.eta, tau=self.tau, beta=self.beta, lr=self.lr,
            batch_size=self.batch_size, warmup_epochs=self.warmup_epochs,
            adapt_epochs=self.adapt_epochs, seed=self.seed,
            symmetric_swap=self.symmetric_swap, **flags,
        )


_FLOAT_FLAGS = ("rho-s", "gamma", "eta", "tau", "beta", "lr")
_INT_FLAGS = ("n-per-domain", "parts", "source-idx", "target-idx", "batch-size",
              "warmup-epochs", "adapt-epochs", "seed")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slogan",
        description="Unsupervised graph domain adaptation runs and diagnostics.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat JSON config file; flags override its values")
    parser.add_argument("--dataset-root")
    parser.add_argument("--dataset-name")
    parser.add_argument("--synthetic", action="store_const", const=True, default=None)
    for flag in _FLOAT_FLAGS:
        parser.add_argument(f"--{flag}", type=float)
    for flag in _INT_FLAGS:
        parser.add_argument(f"--{flag}", type=int)
    parser.add_argument("--ablate", choices=ABLATION_FLAGS)
    parser.add_argument("--symmetric-swap", action="store_const", const=True, default=None)
    parser.add_argument("--out")
    return parser


def parse_args_and_config(argv: list[str]) -> RunConfig:
    """Resolve defaults < config file < explicit flags into a validated RunConfig."""
    ns = _build_parser().parse_args(argv)
    values: dict = {}
    if ns.config:
        with open(ns.config) as fh:
            file_values = json.load(fh)
        if not isinstance(file_values, dict):
            raise ValueError("config file must hold a flat JSON object")
        known = {f.name for f in fields(RunConfig)}
        for key, val in file_values.items():
            norm = key.replace("-", "_")
            if norm == "command":
                continue  # config echoes carry the command for the record
            if norm not in known or norm == "config":
                raise ValueError(f"unknown config key {key!r}")
            values[norm] = val
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        flag_val = getattr(ns, f.name, None)
        if flag_val is not None:
            values[f.name] = flag_val
    if values.get("out") is None and os.environ.get("SLOGAN_OUT"):
        values["out"] = os.environ["SLOGAN_OUT"]

    cfg = RunConfig(command=ns.command, **values)
    _validate(cfg)
    return cfg


def _reject(key: str, why: str):
    raise ValueError(f"invalid value for {key!r}: {why}")


def _validate(cfg: RunConfig) -> None:
    has_tud = cfg.dataset_root is not None or cfg.dataset_name is not None
    if cfg.synthetic and has_tud:
        _reject("dataset-root", "conflicts with --synthetic")
    if has_tud and (cfg.dataset_root is None or cfg.dataset_name is None):
        _reject("dataset-name", "dataset-root and dataset-name must be given together")
    if not (0.5 <= cfg.rho_s <= 1.0):
        _reject("rho-s", "must lie in [0.5, 1]")
    if cfg.n_per_domain < 1:
        _reject("n-per-domain", "must be >= 1")
    if cfg.parts < 2:
        _reject("parts", "must be >= 2")
    if not (0 <= cfg.source_idx < cfg.parts):
        _reject("source-idx", f"must lie in [0, {cfg.parts})")
    if not (0 <= cfg.target_idx < cfg.parts):
        _reject("target-idx", f"must lie in [0, {cfg.parts})")
    if not cfg.synthetic and cfg.source_idx == cfg.target_idx:
        _reject("target-idx", "source and target sub-datasets must differ")
    if min(cfg.gamma, cfg.eta, cfg.beta) < 0:
        _reject("gamma", "loss weights must be >= 0")
    if not (0.0 < cfg.tau <= 1.0):
        _reject("tau", "must lie in (0, 1]")
    if cfg.lr <= 0:
        _reject("lr", "must be > 0")
    if cfg.batch_size < 1:
        _reject("batch-size", "must be >= 1")
    if cfg.warmup_epochs < 0 or cfg.adapt_epochs < 0:
        _reject("warmup-epochs", "epoch counts must be >= 0")
    if cfg.ablate is not None and cfg.ablate not in ABLATION_FLAGS:
        _reject("ablate", f"must be one of {ABLATION_FLAGS}")


class _OutputTracker:
    """Records everything a command writes so a failure leaves no partial run."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.paths: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, *parts: str) -> str:
        p = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.paths.append(p)
        return p

    def directory(self, *parts: str) -> str:
        d = os.path.join(self.out_dir, *parts)
        os.makedirs(d, exist_ok=True)
        self.paths.append(d)
        return d

    def cleanup(self) -> None:
        import shutil

        for p in reversed(self.paths):
            if os.path.isdir(p):
                shutil.rmtree(p, ignore_errors=True)
            elif os.path.exists(p):
                os.unlink(p)


def _echo_dict(cfg: RunConfig) -> dict:
    echo = {}
    for key, val in asdict(cfg).items():
        echo[key.replace("_", "-")] = val
    return echo


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def resolve_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Source/target domains from either the synthetic generator or a
    density-split TUDataset."""
    if cfg.synthetic:
        synth = SynthConfig(n_per_domain=cfg.n_per_domain, rho_s=cfg.rho_s)
        return gen_synthetic_biased(synth, Rng(cfg.seed).child("synth"))
    if cfg.dataset_root is None:
        raise ValueError("a dataset spec is required: --synthetic or --dataset-root/--dataset-name")
    ds = parse_tudataset(cfg.dataset_root, cfg.dataset_name)
    chunks = density_split(ds, cfg.parts)
    return (chunks[cfg.source_idx].retagged(SOURCE),
            chunks[cfg.target_idx].retagged(TARGET))


def _chunk_dir_name(name: str, k: int) -> str:
    return f"{name[0].upper()}{k}"


def run(cfg: RunConfig) -> int:
    """Execute one subcommand; artifacts land under the output directory."""
    if cfg.out is None:
        raise ValueError("an output directory is required (--out or SLOGAN_OUT)")
    tracker = _OutputTracker(cfg.out)
    try:
        _write_json(tracker.path("config_echo.json"), _echo_dict(cfg))
        summary = _dispatch(cfg, tracker)
        print(summary)
        return 0
    except Exception:
        tracker.cleanup()
        raise


def _dispatch(cfg: RunConfig, tracker: _OutputTracker) -> str:
    if cfg.command == "gen-synth":
        if not cfg.synthetic:
            _reject("synthetic", "gen-synth requires --synthetic")
        source, target = resolve_datasets(cfg)
        write_tudataset(source, tracker.directory("source"), "SYN")
        write_tudataset(target, tracker.directory("target"), "SYN")
        return (f"gen-synth: wrote {len(source)} source and {len(target)} target graphs "
                f"(rho_s={cfg.rho_s}) under {cfg.out}")

    if cfg.command == "split":
        if cfg.dataset_root is None:
            _reject("dataset-root", "split requires a TUDataset spec")
        ds = parse_tudataset(cfg.dataset_root, cfg.dataset_name)
        chunks = density_split(ds, cfg.parts)
        names = []
        for k, chunk in enumerate(chunks):
            name = _chunk_dir_name(cfg.dataset_name, k)
            write_tudataset(chunk, tracker.directory(name), name)
            names.append(f"{name}({len(chunk)})")
        return f"split: {cfg.dataset_name} -> {' '.join(names)} under {cfg.out}"

    if cfg.command == "bench-scaling":
        bench = bench_scaling(seed=cfg.seed)
        with open(tracker.path("scaling.csv"), "w") as fh:
            fh.write("nodes,median_seconds\n")
            for size, secs in bench["rows"]:
                fh.write(f"{size},{secs:.6g}\n")
        plots.plot_scaling(bench, tracker.path("scaling.png"))
        return f"bench-scaling: linear fit R^2 = {bench['r_squared']:.5f}"

    source, target = resolve_datasets(cfg)
    tcfg = cfg.train_config()

    if cfg.command == "train-source":
        model = warmup(source, tcfg)
        save_model(model, tracker.directory("model"))
        acc, _ = evaluate(source, model, tcfg.batch_size)
        _write_json(tracker.path("result.json"),
                    {"source_train_acc": acc, "config": _echo_dict(cfg)})
        return f"train-source: source training accuracy {acc:.4f}"

    if cfg.command == "adapt":
        tracker.paths.append(os.path.join(tracker.out_dir, "metrics.csv"))
        tracker.paths.append(os.path.join(tracker.out_dir, "confident"))
        model = warmup(source, tcfg)
        adapt(source, target, tcfg, model, out_dir=tracker.out_dir)
        save_model(model, tracker.directory("model"))
        source_acc, _ = evaluate(source, model, tcfg.batch_size)
        result = {"source_acc": source_acc, "config": _echo_dict(cfg)}
        if all(g.label is not None for g in target.graphs):
            result["target_acc"] = evaluate(target, model, tcfg.batch_size)[0]
        records_path = os.path.join(tracker.out_dir, "confident",
                                    f"epoch_{tcfg.adapt_epochs - 1:03d}.csv")
        if os.path.exists(records_path):
            with open(records_path) as fh:
                result["confident_size"] = sum(line.strip().endswith(",1") for line in fh)
        _write_json(tracker.path("result.json"), result)
        plots.plot_metrics(os.path.join(tracker.out_dir, "metrics.csv"),
                           tracker.path("metrics.png"))
        tgt_part = f", target accuracy {result['target_acc']:.4f}" if "target_acc" in result else ""
        return f"adapt: source accuracy {source_acc:.4f}{tgt_part}"

    if cfg.command == "ablate":
        table = ablate(source, target, tcfg)
        with open(tracker.path("ablation.csv"), "w") as fh:
            fh.write("variant,seed,target_acc\n")
            for seed, row in table["per_seed"].items():
                for variant, acc in row.items():
                    fh.write(f"{variant},{seed},{acc:.10g}\n")
            for variant, acc in table["mean"].items():
                fh.write(f"{variant},mean,{acc:.10g}\n")
        plots.plot_ablation(table["mean"], tracker.path("ablation.png"))
        _write_json(tracker.path("result.json"),
                    {"ablation": table["mean"], "config": _echo_dict(cfg)})
        parts = ", ".join(f"{k}={v:.4f}" for k, v in table["mean"].items())
        return f"ablate: {parts}"

    # the remaining commands reuse a model trained into this output directory
    model_dir = os.path.join(cfg.out, "model")
    if not os.path.isdir(model_dir):
        raise FileNotFoundError(f"no trained model at {model_dir}; run train-source or adapt first")
    model = load_model(model_dir)

    if cfg.command == "eval":
        source_acc, per_class = evaluate(source, model, tcfg.batch_size)
        result = {"source_acc": source_acc,
                  "source_per_class": [float(v) for v in per_class]}
        if all(g.label is not None for g in target.graphs):
            tgt_acc, tgt_per_class = evaluate(target, model, tcfg.batch_size)
            result["target_acc"] = tgt_acc
            result["target_per_class"] = [float(v) for v in tgt_per_class]
        result["config"] = _echo_dict(cfg)
        _write_json(tracker.path("eval_result.json"), result)
        tgt_part = f", target {result['target_acc']:.4f}" if "target_acc" in result else ""
        return f"eval: source {source_acc:.4f}{tgt_part}"

    if cfg.command == "audit-bound":
        audit = bound_audit(model, source, target, tcfg.batch_size, seed=cfg.seed)
        payload = {
            "source_error": audit.source_error,
            "spurious_label_mi": audit.spurious_label_mi,
            "reconstruction_residual": audit.reconstruction_residual,
            "target_error": audit.target_error,
            "unidentified_constants": list(audit.unidentified_constants),
            "config": _echo_dict(cfg),
        }
        _write_json(tracker.path("audit.json"), payload)
        return (f"audit-bound: source_error={audit.source_error:.4f} "
                f"eps1_proxy={audit.spurious_label_mi:.4f} "
                f"eps2_proxy={audit.reconstruction_residual:.4f}")

    if cfg.command == "dump-features":
        path = tracker.path("features.csv")
        dump_features(model, source, target, path, batch_size=tcfg.batch_size)
        plots.plot_features(path, tracker.path("features.png"))
        return f"dump-features: wrote {path}"

    raise ValueError(f"unhandled command {cfg.command}")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_args_and_config(argv)
        return run(cfg)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
