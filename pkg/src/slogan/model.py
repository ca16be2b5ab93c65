"""Model state: encoder, projection heads, classifier, generator, and the
mutual-information estimator parameters, with deterministic save/load."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ParamStore, Rng, Tensor
from .encoder import EncoderParams, LinearHead, encode
from .disentangler import CriticParams, DisentangledFeatures, ProjectionHeads, split_features
from .intervenor import GeneratorParams
from .graphdata import GraphBatch


@dataclass
class ModelConfig:
    feature_dim: int
    num_classes: int
    hidden_dim: int = 128
    causal_dim: int = 64
    spurious_dim: int = 64
    generator_hidden: int = 128

    def validate(self) -> None:
        if self.causal_dim + self.spurious_dim > self.hidden_dim:
            raise ValueError("causal_dim + spurious_dim exceeds hidden_dim")


class SloganModel:
    """All trainable state; the estimator critics live in their own store so
    the alternating update schedule stays explicit."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        self.encoder = EncoderParams.init(cfg.feature_dim, cfg.hidden_dim, rng)
        self.heads = ProjectionHeads.init(cfg.hidden_dim, cfg.causal_dim, cfg.spurious_dim, rng)
        self.classifier = LinearHead.init(cfg.causal_dim, cfg.num_classes, rng)
        self.generator = GeneratorParams.init(
            cfg.causal_dim, cfg.spurious_dim, cfg.hidden_dim, rng, hidden=cfg.generator_hidden)
        self.critic = CriticParams.init(
            cfg.causal_dim, cfg.spurious_dim, cfg.hidden_dim, cfg.num_classes, rng)

        self.store = ParamStore()
        for name, t in [
            ("enc.W1", self.encoder.W1), ("enc.b1", self.encoder.b1),
            ("enc.W2", self.encoder.W2), ("enc.b2", self.encoder.b2),
            ("head_c.W", self.heads.causal.W), ("head_c.b", self.heads.causal.b),
            ("head_s.W", self.heads.spurious.W), ("head_s.b", self.heads.spurious.b),
            ("cls.W", self.classifier.W), ("cls.b", self.classifier.b),
            ("gen.W1", self.generator.W1), ("gen.b1", self.generator.b1),
            ("gen.W2", self.generator.W2), ("gen.b2", self.generator.b2),
        ]:
            self.store.add(name, t)
        self.critic_store = self.critic.store()

    def encode_batch(self, batch: GraphBatch) -> DisentangledFeatures:
        return split_features(encode(batch, self.encoder), self.heads)

    def class_logits(self, z_c: Tensor) -> Tensor:
        return self.classifier.logits(z_c)

    def predict_probs(self, batch: GraphBatch) -> np.ndarray:
        """Class probabilities from causal features, as a plain array."""
        feats = self.encode_batch(batch)
        return gc.softmax_rows(self.class_logits(feats.z_c)).values

    def param_arrays(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v.values for k, v in self.store.items()}
        out.update({f"critic.{k}": v.values for k, v in self.critic_store.items()})
        return out

    def copy(self) -> "SloganModel":
        dup = SloganModel(self.cfg, Rng(0))
        _assign_store(dup.store, self.store)
        _assign_store(dup.critic_store, self.critic_store)
        return dup


def _assign_store(dst: ParamStore, src: ParamStore) -> None:
    for name, p in src.items():
        dst.params[name].values[...] = p.values
        dst.m[name][...] = src.m[name]
        dst.v[name][...] = src.v[name]
        dst.t[name] = src.t[name]
    dst.step_count = src.step_count


# ---------------------------------------------------------------------------
# persistence: manifest.json + one raw little-endian float64 blob, so that
# fixed-seed runs produce byte-identical model files


def save_model(model: SloganModel, directory) -> None:
    os.makedirs(str(directory), exist_ok=True)
    entries = []
    blobs = []
    for store_name, store in (("model", model.store), ("critic", model.critic_store)):
        for name, p in store.items():
            arr = np.ascontiguousarray(p.values, dtype="<f8")
            entries.append({"store": store_name, "name": name, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
        for kind, moments in (("m", store.m), ("v", store.v)):
            for name in store.params:
                arr = np.ascontiguousarray(moments[name], dtype="<f8")
                entries.append({"store": f"{store_name}.{kind}", "name": name, "shape": list(arr.shape)})
                blobs.append(arr.tobytes())
    manifest = {
        "config": asdict(model.cfg),
        "steps": {"model": model.store.step_count, "critic": model.critic_store.step_count},
        "param_steps": {"model": dict(model.store.t), "critic": dict(model.critic_store.t)},
        "entries": entries,
    }
    with open(os.path.join(str(directory), "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(str(directory), "params.bin"), "wb") as fh:
        for blob in blobs:
            fh.write(blob)


def load_model(directory) -> SloganModel:
    with open(os.path.join(str(directory), "manifest.json")) as fh:
        manifest = json.load(fh)
    model = SloganModel(ModelConfig(**manifest["config"]), Rng(0))
    stores = {"model": model.store, "critic": model.critic_store}
    with open(os.path.join(str(directory), "params.bin"), "rb") as fh:
        for entry in manifest["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            store_key, _, kind = entry["store"].partition(".")
            store = stores[store_key]
            if kind == "":
                store.params[entry["name"]].values[...] = arr
            elif kind == "m":
                store.m[entry["name"]][...] = arr
            else:
                store.v[entry["name"]][...] = arr
    model.store.step_count = manifest["steps"]["model"]
    model.critic_store.step_count = manifest["steps"]["critic"]
    model.store.t.update(manifest["param_steps"]["model"])
    model.critic_store.t.update(manifest["param_steps"]["critic"])
    return model
