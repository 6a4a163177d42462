import numpy as np
import pytest

import skipgate as sg
from skipgate.data import Dataset, make_windows, split_dataset, synthetic_corpus, tokenize_text
from skipgate.training import pretrain_backbone


def small_config(**overrides) -> sg.ModelConfig:
    base = dict(
        vocab_size=64, d_model=32, n_layers=4, n_heads=4, head_dim=8,
        mlp_hidden=64, max_seq_len=64,
    )
    base.update(overrides)
    return sg.ModelConfig(**base)


def moe_config(**overrides) -> sg.ModelConfig:
    base = dict(
        vocab_size=64, d_model=32, n_layers=3, n_heads=4, head_dim=8,
        mlp_hidden=64, max_seq_len=64,
        moe=sg.MoESettings(n_experts=4, top_k=2, expert_hidden=32),
    )
    base.update(overrides)
    return sg.ModelConfig(**base)


@pytest.fixture(scope="session")
def toy_corpus() -> str:
    return synthetic_corpus(400_000, seed=0)


@pytest.fixture(scope="session")
def toy_data(toy_corpus) -> tuple[Dataset, Dataset]:
    ds = make_windows(tokenize_text(toy_corpus), 64)
    order = np.random.default_rng(0).permutation(len(ds))[:5000]
    ds = Dataset(ds.inputs[order], ds.targets[order])
    return split_dataset(ds, 0.1)


@pytest.fixture(scope="session")
def pretrained(toy_data):
    """A briefly pretrained 6-layer backbone shared by training-behavior tests."""
    cfg = sg.ModelConfig(
        vocab_size=256, d_model=48, n_layers=6, n_heads=4, head_dim=12,
        mlp_hidden=192, max_seq_len=128,
    )
    model = sg.build_model(cfg, seed=0)
    train, _ = toy_data
    pretrain_backbone(model, train, steps=600, batch_size=8, seed=0)
    return model
