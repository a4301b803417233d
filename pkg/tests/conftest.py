import numpy as np
import pytest

from escpipe.audio import AudioClip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine_clip(freq_hz, seconds=1.0, sample_rate=44100, amplitude=1.0):
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioClip(
        samples=amplitude * np.sin(2 * np.pi * freq_hz * t), sample_rate=sample_rate
    )


@pytest.fixture
def make_sine():
    return sine_clip
