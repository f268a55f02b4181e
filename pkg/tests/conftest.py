import numpy as np
import pytest
import torch

from sleepadapt.core import Recording


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def make_recording(epochs=2, rate=128, seed=0, rec_id="r0"):
    gen = np.random.default_rng(seed)
    x = gen.standard_normal((2, epochs * rate * 30)).astype(np.float32)
    return Recording(rec_id, x, ("EEG", "EOG"), ("EEG", "EOG"), rate)


@pytest.fixture
def recording():
    return make_recording()
