import pytest

from slogan.gradcore import Rng
from slogan.graphdata import SynthConfig, gen_synthetic_biased
from slogan.model import ModelConfig, SloganModel


def tiny_domains(n=24, seed=0, rho=0.9):
    return gen_synthetic_biased(
        SynthConfig(n_per_domain=n, min_nodes=6, max_nodes=10, rho_s=rho),
        Rng(seed).child("synth"))


def small_model(feature_dim=4, num_classes=2, seed=0):
    cfg = ModelConfig(feature_dim=feature_dim, num_classes=num_classes,
                      hidden_dim=16, causal_dim=8, spurious_dim=8, generator_hidden=16)
    return SloganModel(cfg, Rng(seed).child("init"))


def params_bytes(model):
    """Byte snapshot of every trainable array, for bitwise comparisons."""
    parts = []
    for store in (model.store, model.critic_store):
        for _, p in sorted(store.items()):
            parts.append(p.values.tobytes())
    return b"".join(parts)


@pytest.fixture
def domains():
    return tiny_domains()
