import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from itportrait.errors import ConfigurationError, DimensionError, IncompatibleCheckpointError, LayerRangeError
from itportrait.latent import (CameraPose, LatentCode, LayerRange, SeededRng, canonical_pose, from_bytes, from_text,
                               load, mix_latent, pose_angles, pose_vector, sample_multiview_poses, save, to_bytes,
                               to_text)


def const(layers, value, width=512):
    return LatentCode(np.full((layers, width), value))


# -- mix_latent --------------------------------------------------------------

def test_mix_ones_zeros_18_layers():
    out = mix_latent(const(18, 1.0), const(18, 0.0), 0.2, LayerRange(13, 18))
    assert np.all(out.values[12:] == 0.2)
    assert np.all(out.values[:12] == 1.0)


def test_mix_identity_when_inputs_equal():
    w = LatentCode(np.random.default_rng(0).normal(size=(18, 512)))
    out = mix_latent(w, w, 0.2, LayerRange(3, 9))
    # the affine form is kept bit-exact with its oracle, so equal inputs may move by one ulp
    np.testing.assert_allclose(out.values, w.values, rtol=2.3e-16, atol=0)
    assert np.array_equal(out.values[:2], w.values[:2]) and np.array_equal(out.values[9:], w.values[9:])


def test_mix_weight_zero_selects_injected():
    out = mix_latent(const(14, 1.0), const(14, 2.0), 0.0, LayerRange(9, 13))
    assert np.all(out.values[8:13] == 2.0)
    assert np.all(out.values[:8] == 1.0) and np.all(out.values[13] == 1.0)


def test_mix_errors():
    with pytest.raises(DimensionError):
        mix_latent(const(14, 1.0), const(18, 1.0), 0.5, LayerRange(1, 2))
    with pytest.raises(LayerRangeError):
        mix_latent(const(14, 1.0), const(14, 1.0), 0.5, LayerRange(13, 18))
    with pytest.raises(LayerRangeError):
        LayerRange(0, 3)
    with pytest.raises(LayerRangeError):
        LayerRange(5, 4)


def test_layer_range_parse_and_mask():
    assert LayerRange.parse("13-18") == LayerRange(13, 18)
    assert LayerRange.parse([9, 13]) == LayerRange(9, 13)
    assert LayerRange.parse("4") == LayerRange(4, 4)
    assert list(LayerRange(2, 4)) == [2, 3, 4]
    assert LayerRange(2, 4).mask(5).tolist() == [False, True, True, True, False]


@settings(max_examples=200, deadline=None)
@given(layers=st.integers(1, 20), width=st.integers(1, 16), weight=st.floats(0.0, 1.0),
       data=st.data(), seed=st.integers(0, 2**32 - 1))
def test_mix_property_hypothesis(layers, width, weight, data, seed):
    lo = data.draw(st.integers(1, layers))
    hi = data.draw(st.integers(lo, layers))
    rng = np.random.default_rng(seed)
    base, inj = LatentCode(rng.normal(size=(layers, width))), LatentCode(rng.normal(size=(layers, width)))
    out = mix_latent(base, inj, weight, LayerRange(lo, hi)).values
    for i in range(layers):
        if lo <= i + 1 <= hi:
            assert np.array_equal(out[i], weight * base.values[i] + (1 - weight) * inj.values[i])
        else:
            assert np.array_equal(out[i], base.values[i])


# -- poses -------------------------------------------------------------------

def test_canonical_pose():
    p = canonical_pose()
    assert p.yaw == 0.0 and abs(p.pitch) == 0.0
    assert p == canonical_pose()
    assert np.array_equal(p.vector(), canonical_pose().vector())
    assert p.orthonormality_defect() < 1e-6
    assert p.vector().size == 25 and p.intrinsic[8] == 1.0


@settings(max_examples=100, deadline=None)
@given(yaw=st.floats(-179.0, 179.0), pitch=st.floats(-89.0, 89.0))
def test_pose_constructor_orthonormal_and_roundtrip(yaw, pitch):
    p = CameraPose.from_angles(yaw, pitch)
    assert p.orthonormality_defect() < 1e-5
    assert math.isclose(p.yaw, yaw, abs_tol=1e-9)
    assert math.isclose(p.pitch, pitch, abs_tol=1e-7)
    # the camera sits at the fixed radius and looks at the origin (third column is the forward axis)
    assert math.isclose(p.radius, 2.7, rel_tol=1e-12)
    np.testing.assert_allclose(p.rotation[:, 2], -p.position / p.radius, atol=1e-12)
    # no roll: the camera's right axis stays horizontal
    assert abs(p.rotation[1, 0]) < 1e-12


def test_pose_vector_matches_numpy_route():
    yaw, pitch = torch.tensor([0.3, -0.7]), torch.tensor([0.1, 0.4])
    vec = pose_vector(yaw, pitch)
    for i in range(2):
        ref = CameraPose.from_angles(math.degrees(yaw[i]), math.degrees(pitch[i])).vector()
        np.testing.assert_allclose(vec[i].numpy(), ref, atol=1e-12)
    y, p = pose_angles(vec)
    np.testing.assert_allclose(y.numpy(), yaw.numpy(), atol=1e-12)
    np.testing.assert_allclose(p.numpy(), pitch.numpy(), atol=1e-12)


def test_pose_rejects_bad_input():
    with pytest.raises(DimensionError):
        CameraPose.from_vector(np.zeros(24))
    bad = canonical_pose().vector().copy()
    bad[0] = 2.0
    with pytest.raises(ValueError):
        CameraPose.from_vector(bad)
    intr = canonical_pose().vector().copy()
    intr[24] = 0.5
    with pytest.raises(ValueError):
        CameraPose.from_vector(intr)


# -- multi-view sampler ------------------------------------------------------

def test_sampler_paper_ranges():
    poses = sample_multiview_poses(SeededRng(0), 3, (-50, 50), (-30, 30))
    assert len(poses) == 3
    for p in poses:
        assert -50 <= p.yaw <= 50 and -30 <= p.pitch <= 30


def test_sampler_degenerate_range_is_canonical():
    (p,) = sample_multiview_poses(SeededRng(0), 1, (0, 0), (0, 0))
    np.testing.assert_allclose(p.vector(), canonical_pose().vector(), atol=1e-15)


def test_sampler_deterministic():
    a = sample_multiview_poses(SeededRng(7), 5)
    b = sample_multiview_poses(SeededRng(7), 5)
    assert all(x == y for x, y in zip(a, b))


def test_sampler_errors():
    with pytest.raises(ConfigurationError):
        sample_multiview_poses(SeededRng(0), 0)
    with pytest.raises(ConfigurationError):
        sample_multiview_poses(SeededRng(0), 3, (10, -10))
    with pytest.raises(ConfigurationError):
        sample_multiview_poses(SeededRng(0), 3, (-10, 10), ())


def test_sampler_uniformity_ks():
    poses = sample_multiview_poses(SeededRng(3), 2000)
    yaws = np.array([p.yaw for p in poses])
    pitches = np.array([p.pitch for p in poses])
    assert stats.kstest(yaws, stats.uniform(-50, 100).cdf).pvalue > 0.01
    assert stats.kstest(pitches, stats.uniform(-30, 60).cdf).pvalue > 0.01


# -- SeededRng ---------------------------------------------------------------

def test_rng_streams():
    a, b = SeededRng(5, "x"), SeededRng(5, "x")
    assert np.array_equal(a.normal(10), b.normal(10))
    assert not np.array_equal(SeededRng(5, "x").normal(10), SeededRng(5, "y").normal(10))
    assert not np.array_equal(SeededRng(5).spawn("a").normal(4), SeededRng(5).spawn("b").normal(4))


def test_rng_integers_inclusive():
    draws = SeededRng(0).integers(1, 3, size=3000)
    assert set(draws.tolist()) == {1, 2, 3}


def test_rng_state_roundtrip():
    r = SeededRng(9, "s")
    r.normal(7)
    state = r.get_state()
    nxt = r.uniform(size=5)
    assert np.array_equal(SeededRng.from_state(state).uniform(size=5), nxt)


def test_rng_golden_sequence():
    # frozen so a change of generator or key derivation is caught across platforms
    assert SeededRng(1234, "golden").integers(1, 100, size=6).tolist() == [42, 46, 9, 54, 13, 65]


# -- serialisation -----------------------------------------------------------

def test_binary_roundtrip(tmp_path):
    w = LatentCode(np.random.default_rng(1).normal(size=(14, 512)))
    w2 = from_bytes(to_bytes(w))
    np.testing.assert_array_equal(w2.values, w.values.astype(np.float32).astype(np.float64))
    p = CameraPose.from_angles(12.0, -7.0)
    save(p, tmp_path / "p.bin")
    q = load(tmp_path / "p.bin")
    np.testing.assert_allclose(q.vector(), p.vector(), atol=1e-6)


def test_binary_header_layout():
    data = to_bytes(const(2, 1.0, width=3))
    assert data[:4] == b"ITPC"
    assert data[4:6] == (1).to_bytes(2, "little")
    assert data[6] == 1 and data[7] == 2
    assert int.from_bytes(data[8:12], "little") == 2 and int.from_bytes(data[12:16], "little") == 3
    assert len(data) == 16 + 6 * 4


def test_binary_rejects_corruption():
    data = to_bytes(const(2, 1.0, width=3))
    with pytest.raises(IncompatibleCheckpointError):
        from_bytes(b"XXXX" + data[4:])
    with pytest.raises(IncompatibleCheckpointError):
        from_bytes(data[:-4])
    with pytest.raises(IncompatibleCheckpointError):
        from_bytes(data[:4] + (2).to_bytes(2, "little") + data[6:])


def test_text_roundtrip():
    w = LatentCode(np.random.default_rng(2).normal(size=(3, 4)))
    assert from_text(to_text(w)) == w
    p = CameraPose.from_angles(-20.0, 5.0)
    assert from_text(to_text(p)) == p
