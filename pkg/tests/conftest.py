import numpy as np
import pytest

from wavunits.audio import AudioClip
from wavunits.model import ModelConfig


def tone(freq_hz, duration_s=1.0, rate=16000, amplitude=0.5, phase=0.0, source_id="tone"):
    t = np.arange(int(round(duration_s * rate))) / rate
    return AudioClip(
        samples=amplitude * np.sin(2.0 * np.pi * freq_hz * t + phase),
        sample_rate=rate,
        source_id=source_id,
    )


def noise_clip(duration_s=1.0, rate=16000, amplitude=0.1, seed=0, source_id="noise"):
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    return AudioClip(samples=amplitude * rng.uniform(-1, 1, n), sample_rate=rate,
                     source_id=source_id)


TINY_CFG = ModelConfig(
    cnn_channels=(8, 8, 16, 16),
    transformer_depth=2,
    hidden_dim=16,
    heads=2,
    ffn_dim=32,
    num_units=8,
    proj_dim=12,
)


@pytest.fixture
def tiny_cfg():
    return TINY_CFG
