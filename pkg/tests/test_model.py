import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from a2f import gradsuite
from a2f.model import (
    PAPER_DECODER_CHANNELS,
    PAPER_DECODER_LAYERS,
    PAPER_PIE_PROBABILITY,
    Checkpoint,
    ModelConfig,
    ModelError,
    adapt_frequency,
    adapted_length,
)
from a2f.numerics import ShapeError, Tensor, precision, reverse_mode
from a2f.training import build_model, fit_bases

SMALL = dict(tcn_channels=8, model_dim=8, transformer_layers=1, transformer_heads=2, decoder_channels=8)


@pytest.fixture(scope="module")
def model(tiny_ds):
    pca = fit_bases(tiny_ds, 4, 64, 0)
    return build_model(tiny_ds, ModelConfig(**SMALL), pca, seed=0)


def test_paper_constants():
    assert (PAPER_DECODER_CHANNELS, PAPER_DECODER_LAYERS, PAPER_PIE_PROBABILITY) == (256, 3, 0.10)
    assert ModelConfig().adaptor_position == "pos1"


def test_config_validation():
    with pytest.raises(ModelError, match="stride"):
        ModelConfig(tcn_strides=(5, 4, 4), tcn_kernels=(10, 8, 8))
    with pytest.raises(ModelError):
        ModelConfig(pie_probability=1.5)
    with pytest.raises(ModelError):
        ModelConfig.from_dict({"bogus": 1})


# -- encoder ------------------------------------------------------------------------
def test_two_seconds_give_hundred_frames(model, rng):
    assert model.encode_audio(rng.standard_normal(32000) * 0.1).shape[1] == 100


def test_zero_waveform_gives_constant_features(model):
    f = model.encode_audio(np.zeros(16000)).data[0]
    np.testing.assert_allclose(f, np.broadcast_to(f[0], f.shape), atol=1e-5)


@pytest.mark.parametrize("n", [8000, 12345, 16000])
def test_doubling_length_doubles_frames(model, rng, n):
    a = model.encode_audio(rng.standard_normal(n)).shape[1]
    b = model.encode_audio(rng.standard_normal(2 * n)).shape[1]
    assert abs(b - 2 * a) <= 1


def test_too_short_clip(model):
    with pytest.raises(ModelError, match="receptive field"):
        model.encode_audio(np.zeros(10))


# -- frequency adaptor -----------------------------------------------------------------
def test_adaptor_identity_at_fifty(rng):
    x = Tensor(rng.standard_normal((2, 37, 3)))
    np.testing.assert_array_equal(adapt_frequency(x, 50.0).data, x.data)


def test_adaptor_halving_takes_even_samples(rng):
    x = Tensor(rng.standard_normal((1, 99, 3)), dtype=np.float64)
    np.testing.assert_allclose(adapt_frequency(x, 25.0).data, x.data[:, ::2], atol=1e-12)


@pytest.mark.parametrize("fps,n_out", [(25.0, 50), (30.0, 60)])
def test_adaptor_endpoints(rng, fps, n_out):
    x = Tensor(rng.standard_normal((1, 100, 3)), dtype=np.float64)
    y = adapt_frequency(x, fps).data
    assert y.shape[1] == n_out
    np.testing.assert_allclose(y[:, 0], x.data[:, 0], atol=1e-12)
    np.testing.assert_allclose(y[:, -1], x.data[:, -1], atol=1e-12)


def test_adaptor_errors():
    with pytest.raises(ModelError):
        adapt_frequency(Tensor(np.ones((1, 5, 2))), 0.0)
    with pytest.raises(ModelError):
        adapt_frequency(Tensor(np.ones((1, 0, 2))), 25.0)


@settings(max_examples=50, deadline=None)
@given(count=st.integers(2, 400), fps=st.floats(1.0, 120.0))
def test_adaptor_length_rule(count, fps):
    y = adapt_frequency(Tensor(np.ones((1, count, 1))), fps)
    assert y.shape[1] == max(1, int(np.round(count * fps / 50)))


def test_adapted_length_ties_to_even():
    assert adapted_length(5, 25.0) == 2  # 2.5 -> 2
    assert adapted_length(7, 25.0) == 4  # 3.5 -> 4


# -- identity embedding -------------------------------------------------------------------
def test_pivot_row_in_infer(model):
    emb, eff = model.embed_identity([model.config.pivot], "infer")
    assert eff[0] == model.config.pivot
    np.testing.assert_array_equal(emb.data[0], model.params["identity.table"].data[-1])


def test_no_replacement_at_zero_probability(tiny_ds):
    m = build_model(tiny_ds, ModelConfig(**SMALL, pie_probability=0.0), fit_bases(tiny_ds, 4, 64, 0), 0)
    labels = np.zeros(1000, dtype=np.int64)
    assert np.all(m.effective_labels(labels, "train", np.random.default_rng(0)) == 0)


def test_replacement_fraction(model):
    eff = model.effective_labels(np.zeros(10_000, dtype=np.int64), "train", np.random.default_rng(2024))
    assert 0.09 <= np.mean(eff == model.config.pivot) <= 0.11


def test_unknown_label(model):
    with pytest.raises(ModelError, match="unknown identity"):
        model.embed_identity([model.config.pivot + 1])


def _loss_wrt_table(m, prob, rng):
    m.config.pie_probability = prob
    try:
        out, verts, eff = m.forward(rng.standard_normal((1, 16000)) * 0.1, [0], 0, "train", np.random.default_rng(0))
        return reverse_mode((verts * verts).sum(), {"t": m.params["identity.table"]})["t"], eff
    finally:
        m.config.pie_probability = PAPER_PIE_PROBABILITY


def test_pivot_row_gradient_only_when_replaced(model, rng):
    m = model.clone()
    for n in m.head_names(0):
        m.params[n].data = rng.standard_normal(m.params[n].shape).astype(np.float32) * 0.1
    g, eff = _loss_wrt_table(m, 1.0, rng)
    assert eff[0] == m.config.pivot and np.abs(g[-1]).sum() > 0 and np.all(g[0] == 0)
    g, eff = _loss_wrt_table(m, 0.0, rng)
    assert eff[0] == 0 and np.all(g[-1] == 0) and np.abs(g[0]).sum() > 0


# -- decoder and heads ------------------------------------------------------------------------
def test_decoder_keeps_frame_count(model, rng):
    feats = Tensor(rng.standard_normal((2, 17, 8)))
    emb, _ = model.embed_identity([0, 1])
    assert model.decode_motion(feats, emb).shape == (2, 17, 8)
    with pytest.raises(ShapeError):
        model.decode_motion(feats, Tensor(np.zeros((2, 5))))


def test_batch_permutation_equivariance(model, rng):
    audio = rng.standard_normal((3, 16000)) * 0.1
    out, _, _ = model.forward(audio, [0, 1, 0], 0)
    perm = [2, 0, 1]
    out_p, _, _ = model.forward(audio[perm], np.array([0, 1, 0])[perm], 0)
    np.testing.assert_allclose(out_p.data, out.data[perm], atol=1e-6)


def test_head_widths_and_bias(model, tiny_ds):
    for cid, conv in model.conventions.items():
        width = 4 if conv.kind == "vertex" else conv.param_count
        assert model.config.heads[cid] == width
        m = model.clone()
        m.params[f"head.{cid}.bias"].data = np.arange(width, dtype=np.float32)
        out = m.head_forward(Tensor(np.zeros((1, 3, 8))), cid).data
        np.testing.assert_array_equal(out, np.broadcast_to(np.arange(width), (1, 3, width)))
    with pytest.raises(ModelError, match="unknown convention"):
        model.head_forward(Tensor(np.zeros((1, 3, 8))), 99)


def test_only_selected_head_gets_gradient(model, rng):
    m = model.clone()
    out, verts, _ = m.forward(rng.standard_normal((1, 16000)) * 0.1, [0], 0)
    grads = reverse_mode((verts * verts).sum() + (out * out).sum(), m.params)
    for cid in m.config.heads:
        for n in m.head_names(cid):
            assert (np.abs(grads[n]).sum() > 0) == (cid == 0)


# -- forward --------------------------------------------------------------------------------
def test_pivot_inference_finite_for_every_head(model, rng):
    audio = rng.standard_normal(24000) * 0.2
    for cid, conv in model.conventions.items():
        out, verts, _ = model.forward(audio[None], [model.config.pivot], cid)
        assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(verts.data))
        assert verts.shape[1] == round(1.5 * conv.fps)
        assert verts.shape[2:] == (conv.vertex_count, 3)


def test_forward_is_deterministic(model, rng):
    audio = rng.standard_normal((1, 16000))
    a = model.forward(audio, [1], 1)[1].data
    b = model.forward(audio, [1], 1)[1].data
    np.testing.assert_array_equal(a, b)


def test_adaptor_positions_agree_on_frame_count(tiny_ds, rng):
    pca = fit_bases(tiny_ds, 4, 64, 0)
    audio = rng.standard_normal((1, 20000))
    shapes = []
    for pos in ("pos0", "pos1"):
        m = build_model(tiny_ds, ModelConfig(**SMALL, adaptor_position=pos), pca, 0)
        shapes.append([m.forward(audio, [0], cid)[0].shape for cid in m.conventions])
    assert shapes[0] == shapes[1]


def test_transformer_decoder_runs(tiny_ds, rng):
    m = build_model(tiny_ds, ModelConfig(**SMALL, decoder_arch="transformer"), fit_bases(tiny_ds, 4, 64, 0), 0)
    assert np.all(np.isfinite(m.forward(rng.standard_normal((1, 16000)), [0], 0)[1].data))


def test_end_to_end_gradient_small():
    res = gradsuite.check_end_to_end(seeds=3, coords_per_tensor=2)
    assert res.passed, res


# -- checkpoint ---------------------------------------------------------------------------------
def test_checkpoint_resave_is_byte_identical(model, tmp_path):
    Checkpoint(model, "joint", 7, {"optim.m.x": np.ones(2, np.float32)}, {"adam_step": 3}).save(tmp_path / "a.ckpt")
    ck = Checkpoint.load(tmp_path / "a.ckpt")
    ck.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes()[:4] == b"UTKR"
    assert ck.epoch == 7 and ck.stage == "joint" and ck.extra_meta["adam_step"] == 3
    for n, p in model.params.items():
        np.testing.assert_array_equal(ck.model.params[n].data, p.data)


def test_checkpoint_every_param_exactly_once(model):
    names = list(model.state_arrays())
    assert len(names) == len(set(names)) == len(model.param_shapes())
    arrays = model.state_arrays()
    arrays.pop(next(iter(arrays)))
    with pytest.raises(ModelError, match="missing"):
        model.clone().load_state_arrays(arrays)


def test_unregistered_head_rejected(tiny_ds):
    from a2f.model import Talker
    convs = {c: e.convention for c, e in tiny_ds.conventions.items()}
    with pytest.raises(ModelError):
        Talker(ModelConfig(**SMALL, heads={0: 4}), convs)
