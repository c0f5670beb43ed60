"""Tiny shared fixtures for the slower integration-style tests."""
from patchtst.data import SynthSpec, prepare_data, synth_generate
from patchtst.model import ModelConfig
from patchtst.training import TrainConfig

TINY_MODEL = ModelConfig(L=24, T=8, P=8, S=4, d_model=8, n_heads=2, d_ff=16, n_layers=1, dropout=0.0)
TINY_SSL = TINY_MODEL.replace(P=4, S=4, head_kind="reconstruct", patch_mode="nonoverlap-truncate")
TINY_TRAIN = TrainConfig(epochs=2, batch_size=16, learning_rate=1e-3, seed=7)


def tiny_data(channels=2, timesteps=400, seed=1, L=24, T=8, **kw):
    table = synth_generate(SynthSpec.random(channels, timesteps, seed, periods=(12.0, 30.0), sigma=0.1))
    return prepare_data(table, L, T, **kw)
