import hypothesis
import numpy as np
import pytest

from headroute.encoder import EncoderConfig

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=15, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def toy_cfg():
    return EncoderConfig(d=16, h=4, n_layers=2, d_ff=32, vocab_size=24, max_len=8,
                         n_classes=3, dtype="float64", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_ids(rng, cfg, b, L, pad_from=None):
    ids = rng.integers(3, cfg.vocab_size, size=(b, L))
    ids[:, 0] = 1
    mask = np.ones((b, L), dtype=np.int64)
    if pad_from is not None:
        for i, p in enumerate(pad_from):
            ids[i, p:] = 0
            mask[i, p:] = 0
    return ids, mask
