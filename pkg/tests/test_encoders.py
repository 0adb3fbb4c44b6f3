import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from langdc.encoders import DualEncoder, EncoderConfig, adaptive_pool_matrix, pool_grid, project, projector
from langdc.numerics import Tensor
from langdc.numerics.tensor import DimensionError


def pool_oracle(x, g, out):
    """Loop over output cells averaging their input window."""
    d = x.shape[-1]
    grid = x.reshape(g, g, d)
    res = np.zeros((out, out, d))
    for i in range(out):
        r0, r1 = (i * g) // out, -(-((i + 1) * g) // out)
        for j in range(out):
            c0, c1 = (j * g) // out, -(-((j + 1) * g) // out)
            res[i, j] = grid[r0:r1, c0:c1].mean(axis=(0, 1))
    return res.reshape(out * out, d)


@given(st.integers(1, 12), st.data())
def test_adaptive_pool_matches_window_average(g, data):
    out = data.draw(st.integers(1, g))
    x = np.random.default_rng(g * 31 + out).standard_normal((g * g, 3))
    assert np.allclose(pool_grid(Tensor(x), g, out).data, pool_oracle(x, g, out), atol=1e-12)


def test_pool_rows_are_averages():
    m = adaptive_pool_matrix(7, 3)
    assert np.allclose(m.sum(axis=1), 1.0)
    assert (m >= 0).all()


@pytest.fixture
def enc(rng):
    return DualEncoder(EncoderConfig(grid=8, image_grid=4, video_grid=2, embed_dim=16, heads=2), rng)


def test_shapes(enc, rng):
    segs = rng.integers(0, 25, (3, 4, 8, 8))
    assert enc.encode_frames(segs).shape == (3, 4 * 16, 16)
    assert enc.encode_segment(segs).shape == (3, 4 * 4, 16)
    feats = enc.encode_clip(rng.integers(0, 25, (16, 8, 8)))
    assert len(feats) == 4 and feats[2].segment_index == 2


def test_frame_encoder_never_mixes_frames(enc, rng):
    segs = rng.integers(0, 25, (1, 4, 8, 8))
    other = segs.copy()
    other[0, 2] = rng.integers(0, 25, (8, 8))
    a, b = enc.encode_frames(segs).data, enc.encode_frames(other).data
    per = 16
    for f in (0, 1, 3):
        assert np.array_equal(a[0, f * per:(f + 1) * per], b[0, f * per:(f + 1) * per])
    assert not np.array_equal(a[0, 2 * per:3 * per], b[0, 2 * per:3 * per])


def test_segment_encoder_mixes_within_segment_only(enc, rng):
    segs = rng.integers(0, 25, (2, 4, 8, 8))
    other = segs.copy()
    other[0, 3] = (segs[0, 3] + 1) % 25
    a, b = enc.encode_segment(segs).data, enc.encode_segment(other).data
    assert not np.array_equal(a[0, :4], b[0, :4])  # frame 0 tokens see frame 3
    assert np.array_equal(a[1], b[1])


def test_symbol_and_grid_errors(enc):
    with pytest.raises(IndexError):
        enc.encode_frames(np.full((1, 4, 8, 8), 25))
    with pytest.raises(DimensionError):
        enc.encode_frames(np.zeros((1, 4, 6, 6), dtype=int))
    with pytest.raises(DimensionError):
        enc.encode_segment(np.zeros((1, 3, 8, 8), dtype=int))


def test_config_rejects_bad_grids():
    with pytest.raises(ValueError):
        EncoderConfig(grid=8, image_grid=9)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, heads=4)


def test_projector_width_check(rng):
    proj = projector(16, 8, rng)
    assert project(proj, Tensor(rng.standard_normal((5, 16)))).shape == (5, 8)
    with pytest.raises(DimensionError):
        project(proj, Tensor(rng.standard_normal((5, 15))))
