import pytest

from fastkv.model import ModelConfig, init_model
from fastkv.gate import GateConfig

SAMPLE_TEXT = (
    "The quick brown fox jumps over the lazy dog. "
    "Pack my box with five dozen liquor jugs.\n"
    "Sphinx of black quartz, judge my vow. How vexingly quick daft zebras "
    "jump!\nNumbers 0123456789 and punctuation ,.;:!? mingle with words.\n"
) * 40


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers=2, d_model=32, n_kv_heads=2, group_size=2,
                       d_head=8, max_position=1024)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_model(small_config, seed=7)


@pytest.fixture(scope="session")
def small_gate_config(small_config):
    return GateConfig(d_model=small_config.d_model,
                      n_kv_heads=small_config.n_kv_heads,
                      group_size=small_config.group_size,
                      d_low=8, n_sinks=4)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    (root / "a.txt").write_text(SAMPLE_TEXT)
    (root / "b.txt").write_text(SAMPLE_TEXT[::-1])
    return root


def random_tokens(rng, n):
    return list(rng.integers(0, 256, size=n))
