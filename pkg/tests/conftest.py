import numpy as np
import pytest

from vcmpost.frames import FRAME_DTYPE, VideoSequence
from vcmpost.net import NetConfig, build_network


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_config():
    return NetConfig(base_width=16, growth=8, num_rrdb=1)


@pytest.fixture
def tiny_net(small_config):
    return build_network(small_config, seed=0)


def make_frame(rng, height=16, width=16):
    return rng.uniform(0.0, 1.0, (height, width, 3)).astype(FRAME_DTYPE)


@pytest.fixture
def frame(rng):
    return make_frame(rng)


@pytest.fixture
def natural_image():
    """A fixed 64x64 image with smooth shading, edges, and texture.

    Built from deterministic arithmetic so codec tests see gradients,
    hard transitions, and fine detail at the same time.
    """
    y, x = np.mgrid[0:64, 0:64].astype(np.float64)
    r = 0.35 + 0.3 * np.sin(x / 9.0) * np.cos(y / 7.0) + 0.2 * (x / 63.0)
    g = 0.45 + 0.25 * np.cos((x + y) / 11.0) + 0.15 * (y / 63.0)
    b = 0.40 + 0.3 * np.sin(y / 5.0) * np.sin(x / 13.0)
    img = np.stack([r, g, b], axis=-1)
    img[20:36, 24:44] += 0.25
    img[44:60, 8:20, 0] += 0.3
    noise = np.random.default_rng(7).normal(0.0, 0.02, img.shape)
    return np.clip(img + noise, 0.0, 1.0).astype(FRAME_DTYPE)


@pytest.fixture
def short_sequence(rng):
    frames = np.stack([make_frame(rng, 32, 32) for _ in range(4)])
    return VideoSequence(frames, fps=30.0, name="short")
