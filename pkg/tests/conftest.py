import numpy as np
import pytest

from civet.data import synthetic_dataset
from civet.gaussian import DeltaSchedule
from civet.model import make_architecture
from civet.training import TrainConfig, train


@pytest.fixture(scope="session")
def toy_models():
    """Small standard- and civet-trained models shared by slower tests.

    Deliberately short runs: enough structure for attack/certification
    smoke checks, cheap enough to train once per session.
    """
    data = synthetic_dataset(160, 8, seed=3)
    arch = make_architecture("synth")
    base = dict(epsilon=0.1, learning_rate=3e-3, epochs=4, batch_size=32,
                warmup_standard_iters=4, warmup_ramp_iters=6, rng_seed=11,
                delta_schedule=DeltaSchedule((0.35, 0.2, 0.05)))
    std_params, _ = train(TrainConfig(method="standard", **base), data, arch)
    civet_params, _ = train(TrainConfig(method="civet", **base), data, arch)
    return {"dataset": data, "arch": arch,
            "standard": std_params, "civet": civet_params}
