import numpy as np
import pytest

from querytrack.core import Frame, RunConfig
from querytrack.encoder import add_encoder_params, encode, patch_embeddings


def make_frame(size=64, seed=0, index=0):
    rng = np.random.default_rng(seed)
    px = np.round(rng.random((size, size, 3)) * 255) / 255
    return Frame(pixels=px, index=index)


@pytest.fixture(scope="module")
def setup():
    config = RunConfig()
    params = {}
    add_encoder_params(params, np.random.default_rng(0), config)
    return params, config


def test_output_shape(setup):
    params, config = setup
    fm = encode(params, config, make_frame(64))
    assert fm.grid.shape == (8, 8, config.decoder_dim)
    assert fm.side == 8
    assert fm.frame_index == 0


def test_deterministic(setup):
    params, config = setup
    a = encode(params, config, make_frame(64, seed=3))
    b = encode(params, config, make_frame(64, seed=3))
    assert np.array_equal(a.grid, b.grid)


def test_indivisible_canvas_rejected(setup):
    params, config = setup
    # bypass the square check by building a 72x64 frame: 72 % 8 == 0 but
    # width 64 differs, so use 65x65 quantized to hit divisibility instead
    px = np.zeros((72, 72, 3))
    frame = Frame(pixels=px, index=0)
    assert encode(params, config, frame).side == 9
    bad = Frame(pixels=np.zeros((68, 68, 3)), index=0)
    with pytest.raises(ValueError, match="not divisible"):
        encode(params, config, bad)


def test_locality_of_patch_embeddings(setup):
    params, config = setup
    frame = make_frame(64, seed=5)
    base = patch_embeddings(params, config, frame)
    px = frame.pixels.copy()
    px[10, 10] = np.round(1.0 - px[10, 10], 8)  # inside patch (1, 1)
    changed = patch_embeddings(params, config, Frame(pixels=np.clip(px, 0, 1), index=0))
    diff = np.any(base != changed, axis=1).reshape(8, 8)
    assert diff[1, 1]
    assert diff.sum() == 1


def test_all_encoder_params_prefixed(setup):
    params, _ = setup
    assert all(name.startswith("enc/") for name in params)
