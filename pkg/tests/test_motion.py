import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2f import gradsuite
from a2f.dataset.synth import make_convention
from a2f.ipca import fit_exact
from a2f.motion import (
    BIWI_SCALE,
    MULTIFACE_SCALE,
    BlendshapeBasis,
    ConventionError,
    LbsRig,
    blendshape_to_vertices,
    derive_vertices,
    lbs_to_vertices,
    scale_vertices,
)
from a2f.numerics import Tensor, precision


@pytest.fixture
def basis(rng):
    return BlendshapeBasis(rng.standard_normal((5, 3)), rng.standard_normal((4, 5, 3)))


def test_blendshape_zero_and_one_hot(basis):
    np.testing.assert_array_equal(blendshape_to_vertices(np.zeros(4), basis).data, basis.mean_shape.astype(np.float32))
    out = blendshape_to_vertices(np.eye(4)[2], basis).data
    np.testing.assert_allclose(out, basis.mean_shape + basis.bases[2], atol=1e-6)


def test_blendshape_matches_loop_accumulation(basis, rng):
    w = rng.standard_normal(4)
    ref = basis.mean_shape.copy()
    for i in range(4):
        for v in range(5):
            ref[v] += w[i] * basis.bases[i, v]
    with precision(np.float64):
        np.testing.assert_allclose(blendshape_to_vertices(w, basis).data, ref, atol=1e-6)


def test_blendshape_length_mismatch(basis):
    with pytest.raises(ConventionError):
        blendshape_to_vertices(np.zeros(3), basis)


def _single_joint_rig():
    rest = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 1.0, 1.0]])
    return LbsRig(rest, np.array([[0.0, 0.0, 0.0]]), [-1], np.ones((3, 1)))


def test_lbs_zero_pose_is_rest():
    rig = _single_joint_rig()
    with precision(np.float64):
        np.testing.assert_allclose(lbs_to_vertices(np.zeros(3), rig).data, rig.rest_pose, atol=1e-12)


def test_lbs_quarter_turn_about_z():
    rig = _single_joint_rig()
    with precision(np.float64):
        out = lbs_to_vertices(np.array([0.0, 0.0, np.pi / 2]), rig).data
    # (x, y, z) -> (-y, x, z)
    np.testing.assert_allclose(out, [[0.0, 1.0, 0.0], [-2.0, 0.0, 0.0], [-1.0, 1.0, 1.0]], atol=1e-12)


def test_lbs_child_joint_follows_parent():
    # two-joint chain; rotating only the root carries the child along
    rest = np.array([[0.0, 1.0, 0.0], [0.0, 2.0, 0.0]])
    rig = LbsRig(rest, np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), [-1, 0], np.array([[1.0, 0.0], [0.0, 1.0]]))
    with precision(np.float64):
        out = lbs_to_vertices(np.array([0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0]), rig).data
    np.testing.assert_allclose(out, [[-1.0, 0.0, 0.0], [-2.0, 0.0, 0.0]], atol=1e-12)


def test_lbs_pose_length_mismatch():
    with pytest.raises(ConventionError):
        lbs_to_vertices(np.zeros(4), _single_joint_rig())


def test_rig_validation():
    with pytest.raises(ConventionError):
        LbsRig(np.zeros((2, 3)), np.zeros((1, 3)), [-1], np.full((2, 1), 0.5))


@pytest.mark.parametrize("kind", ["blendshape", "skeleton"])
def test_parametric_derivation_gradients(kind, rng):
    conv = make_convention(0, kind, 5)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, conv.param_count)) * 0.3, requires_grad=True)
        assert gradsuite._check_case([x], lambda: derive_vertices(x, conv), rng) < 1e-4


def test_vertex_pca_derivation_gradient(rng):
    conv = make_convention(0, "vertex", 5)
    pca = fit_exact(rng.standard_normal((40, 3 * conv.vertex_count)), 4)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        assert gradsuite._check_case([x], lambda: derive_vertices(x, conv, pca), rng) < 1e-4


def test_zero_pca_values_give_scaled_mean_plus_template(rng):
    conv = make_convention(0, "vertex", 5)
    pca = fit_exact(rng.standard_normal((20, 3 * conv.vertex_count)), 3)
    with precision(np.float64):
        out = derive_vertices(np.zeros(3), conv, pca).data
    expected = (pca.mean.reshape(-1, 3) + conv.neutral_template) * conv.scale
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_zero_blendshape_weights_give_scaled_mean_shape():
    conv = make_convention(1, "blendshape", 5)
    with precision(np.float64):
        out = derive_vertices(np.zeros(conv.param_count), conv).data
    np.testing.assert_allclose(out, conv.blendshape_basis.mean_shape * conv.scale, atol=1e-12)


def test_vertex_round_trip_within_pca_residual(rng):
    conv = make_convention(0, "vertex", 5)
    D = 3 * conv.vertex_count
    frames = rng.standard_normal((60, 5)) @ rng.standard_normal((5, D)) * 0.01 + rng.standard_normal((60, D)) * 1e-4
    pca = fit_exact(frames, 5)
    x = frames[7]
    with precision(np.float64):
        out = derive_vertices(pca.project(x), conv, pca).data / conv.scale
    residual = np.sum((out - conv.neutral_template - x.reshape(-1, 3)) ** 2)
    full = fit_exact(frames, D)
    discarded = full.project(x)[5:]
    assert residual == pytest.approx(np.sum(discarded ** 2), rel=1e-6)


def test_scale_factors():
    v = np.ones((2, 3))
    np.testing.assert_array_equal(scale_vertices(v, 1.0), v)
    assert BIWI_SCALE == 0.2 and MULTIFACE_SCALE == 0.001
    with pytest.raises(ConventionError):
        scale_vertices(v, 0.0)


def test_missing_rig_rejected():
    conv = make_convention(2, "skeleton", 5)
    conv.lbs_rig = None
    with pytest.raises(ConventionError, match="rig"):
        derive_vertices(np.zeros(conv.param_count), conv)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_blendshape_derivation_is_affine(a, b, seed):
    conv = make_convention(1, "blendshape", 5)
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(conv.param_count), r.standard_normal(conv.param_count)
    with precision(np.float64):
        d = lambda w: derive_vertices(w, conv).data
        base = d(np.zeros(conv.param_count))
        np.testing.assert_allclose(d(a * x + b * y) - base, a * (d(x) - base) + b * (d(y) - base), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n_joints=st.integers(1, 4))
def test_identity_pose_reproduces_rest(seed, n_joints):
    r = np.random.default_rng(seed)
    w = r.random((6, n_joints)) + 0.01
    rig = LbsRig(r.standard_normal((6, 3)), r.standard_normal((n_joints, 3)),
                 [-1] + [int(r.integers(0, j)) for j in range(1, n_joints)], w / w.sum(axis=1, keepdims=True))
    with precision(np.float64):
        out = lbs_to_vertices(np.zeros(3 * n_joints), rig).data
    np.testing.assert_allclose(out, rig.rest_pose, atol=1e-6)
