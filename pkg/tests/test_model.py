import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import erf

from conftest import micro_config
from prognosis.diffcore import Tensor, backward, check_gradients, ops
from prognosis.losses import LabelMask, total_loss
from prognosis.model import ModelConfig, PrognosisModel, export_attention
from prognosis.nn import TransformerEncoder


def images(cfg, B, seed=0):
    return np.random.default_rng(seed).uniform(size=(B, cfg.image_channels, cfg.image_height, cfg.image_width))


# super-pixels

def test_superpixel_shapes():
    cfg = ModelConfig(image_height=64, image_width=64, cnn_channels=(16, 32, 64, 128), depth_D=0, depth_P=0)
    assert cfg.downsample == 16 and cfg.n_tokens == 16
    tok = PrognosisModel(cfg).extract_superpixels(images(cfg, 1))
    assert tok.shape == (1, 16, 128)
    cfg = ModelConfig(image_height=28, image_width=28, cnn_channels=(8, 16), cnn_strides=(2, 2),
                      depth_D=0, depth_P=0, K=4, context_width=8)
    assert PrognosisModel(cfg).extract_superpixels(images(cfg, 2)).shape == (2, 49, 16)


def test_zero_image_gives_zero_tokens():
    cfg = micro_config()
    tok = PrognosisModel(cfg).extract_superpixels(np.zeros((2, 1, 8, 8)))
    assert np.array_equal(tok.data, np.zeros_like(tok.data))


def test_superpixels_are_row_major():
    cfg = micro_config()
    m = PrognosisModel(cfg)
    fmap = m.cnn(Tensor(images(cfg, 1)))
    tok = m.extract_superpixels(images(cfg, 1))
    Hl, Wl = fmap.shape[2:]
    for i in range(Hl):
        for j in range(Wl):
            assert np.array_equal(tok.data[0, i * Wl + j], fmap.data[0, :, i, j])


def test_indivisible_image_errors():
    with pytest.raises(ValueError, match="multiple"):
        ModelConfig(image_height=30, image_width=28, cnn_channels=(8, 16), cnn_strides=(2, 2), K=2, context_width=8)
    m = PrognosisModel(micro_config())
    with pytest.raises(ValueError, match="multiple of 2"):
        m.extract_superpixels(np.zeros((1, 1, 9, 8)))


# transformer

def test_depth_zero_encoder_is_embedding_sum(rng):
    enc = TransformerEncoder(3, 4, 0, 2, 8, 0.0, rng)
    seq = rng.normal(size=(2, 3, 4))
    out = enc(Tensor(seq)).data
    want = np.concatenate([np.broadcast_to(enc.cls.data, (2, 1, 4)), seq], axis=1) + enc.pos.data
    assert np.array_equal(out, want)
    with pytest.raises(ValueError):
        TransformerEncoder(3, 4, -1, 2, 8, 0.0, rng)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_single_layer_matches_manual_reference(rng):
    D, h = 4, 2
    enc = TransformerEncoder(1, D, 1, h, 6, 0.0, rng)
    for _, p in enc.named_parameters():
        p.data = rng.normal(size=p.shape) * 0.5
    s = rng.normal(size=(1, 1, D))
    got = enc(Tensor(s)).data[0]

    h0 = np.concatenate([enc.cls.data[0], s[0]]) + enc.pos.data[0]
    L = enc.layers[0]
    x = _ln(h0, L.ln1.gain.data, L.ln1.bias.data)
    lin = lambda m, v: v @ m.weight.data + m.bias.data  # noqa: E731
    q, k, v = lin(L.attn.q, x), lin(L.attn.k, x), lin(L.attn.v, x)
    d = D // h
    heads = []
    for j in range(h):
        sl = slice(j * d, (j + 1) * d)
        sc = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        a = np.exp(sc - sc.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        heads.append(a @ v[:, sl])
    z = lin(L.attn.out, np.concatenate(heads, axis=1)) + h0
    u = lin(L.fc1, _ln(z, L.ln2.gain.data, L.ln2.bias.data))
    u = u * 0.5 * (1 + erf(u / math.sqrt(2)))
    want = lin(L.fc2, u) + z
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_permutation_equivariance(rng):
    enc = TransformerEncoder(5, 4, 1, 2, 8, 0.0, rng)
    enc.pos.data = np.zeros_like(enc.pos.data)
    seq = rng.normal(size=(1, 5, 4))
    perm = rng.permutation(5)
    a = enc(Tensor(seq)).data
    b = enc(Tensor(seq[:, perm])).data
    np.testing.assert_allclose(b[:, 1:], a[:, 1:][:, perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b[:, 0], a[:, 0], rtol=0, atol=1e-12)


# diagnosis head

def test_zero_diag_head_gives_uniform():
    cfg = micro_config()
    m = PrognosisModel(cfg)
    m.diag_fc.weight.data[:] = 0
    out = m(images(cfg, 3))
    assert np.array_equal(out.diag_logits.data, np.zeros((3, 5)))
    np.testing.assert_allclose(out.diag_probs(), 0.2, rtol=0, atol=1e-15)


@pytest.mark.parametrize("depth, nonzero", [(1, True), (0, False)])
def test_diag_gradient_reaches_tokens_only_through_attention(depth, nonzero, rng):
    m = PrognosisModel(micro_config(depth_D=depth))
    states = m.transformer_encode(Tensor(rng.normal(size=(2, m.config.n_tokens, 8)), requires_grad=True))
    seq = Tensor(rng.normal(size=(2, m.config.n_tokens, 8)), requires_grad=True)
    loss = ops.cross_entropy(m.diagnose(m.transformer_encode(seq)), np.array([1, 3]))
    backward(loss, inputs=[seq])
    assert (np.abs(seq.grad).max() > 0) == nonzero
    assert states.shape == (2, m.config.n_tokens + 1, 8)


# context fusion

def test_fuse_context_replicates_one_token(rng):
    cfg = micro_config()
    m = PrognosisModel(cfg)
    probs = Tensor(rng.dirichlet(np.ones(5), size=2))
    states = Tensor(rng.normal(size=(2, cfg.n_tokens + 1, cfg.C)))
    fused = m.fuse_context(probs, None, states).data
    assert fused.shape == (2, cfg.n_tokens + 1, cfg.C + cfg.context_width)
    ctx = fused[:, :, cfg.C:]
    assert np.array_equal(ctx, np.broadcast_to(ctx[:, :1], ctx.shape))
    assert np.array_equal(fused[:, :, :cfg.C], states.data)
    other = Tensor(rng.normal(size=states.shape))
    assert np.array_equal(m.fuse_context(probs, None, other).data[:, :, cfg.C:], ctx)


def test_clinical_flag_is_enforced(rng):
    m = PrognosisModel(micro_config())
    with pytest.raises(ValueError, match="use_clinical"):
        m(images(m.config, 1), clinical=np.zeros((1, 3)))
    mc = PrognosisModel(micro_config(use_clinical=True, clinical_dim=3))
    with pytest.raises(ValueError):
        mc(images(mc.config, 1))


def test_clinical_never_changes_diagnosis(rng):
    cfg = micro_config(use_clinical=True, clinical_dim=3)
    m = PrognosisModel(cfg)
    x = images(cfg, 2)
    a = m(x, clinical=rng.normal(size=(2, 3)))
    b = m(x, clinical=rng.normal(size=(2, 3)) * 10)
    assert np.array_equal(a.diag_logits.data, b.diag_logits.data)


# prognosis heads

def test_prognose_shapes_and_head_separation(rng):
    cfg = micro_config(K=1)
    assert PrognosisModel(cfg)(images(cfg, 2)).horizon_logits.shape == (2, 1, 7)
    cfg = micro_config(image_height=16, image_width=16, K=8)
    m = PrognosisModel(cfg)
    for head in m.horizon_heads:
        head.fc2.weight.data = rng.normal(size=head.fc2.weight.shape)
    x = images(cfg, 2)
    before = m(x).horizon_logits.data
    assert before.shape == (2, 8, 7)
    m.horizon_heads[3].fc2.weight.data[:] = 0
    m.horizon_heads[3].fc2.bias.data[:] = 0
    after = m(x).horizon_logits.data
    changed = [not np.array_equal(before[:, k], after[:, k]) for k in range(8)]
    assert changed == [k == 3 for k in range(8)]


def test_prognose_rejects_short_sequence(rng):
    m = PrognosisModel(micro_config())
    with pytest.raises(ValueError, match="enlarge the image or reduce K"):
        m.prognose(Tensor(rng.normal(size=(1, 1, 16))))
    with pytest.raises(ValueError, match="enlarge the image or reduce K"):
        micro_config(K=18)


def test_forward_contract_and_determinism():
    cfg = micro_config(dropout_rate=0.3)
    m = PrognosisModel(cfg)
    x = images(cfg, 2)
    a, b = m(x), m(x)
    assert a.diag_logits.shape == (2, 5) and a.horizon_logits.shape == (2, 2, 7)
    assert np.array_equal(a.diag_logits.data, b.diag_logits.data)
    assert np.array_equal(a.horizon_logits.data, b.horizon_logits.data)
    np.testing.assert_allclose(a.prognosis_probs().sum(-1), 1, atol=1e-12)
    np.testing.assert_allclose(a.progression_probs().sum(-1), 1, atol=1e-12)
    with pytest.raises(ValueError):
        m(x, train=True)


@given(st.sampled_from([1, 2, 4]), st.integers(0, 2), st.integers(0, 2), st.integers(1, 3),
       st.sampled_from([5, 9]), st.integers(1, 3))
def test_shape_contract_over_configs(heads, dD, dP, K, n_classes, B):
    cfg = ModelConfig(image_height=8, image_width=8, cnn_channels=(4, 8), cnn_strides=(1, 2), context_width=4 * heads,
                      embed_width=3, depth_D=dD, depth_P=dP, heads=heads, ffn_width=6, K=K,
                      n_prognosis_classes=n_classes, dropout_rate=0.0)
    out = PrognosisModel(cfg)(images(cfg, B))
    assert out.diag_logits.shape == (B, n_classes)
    assert out.horizon_logits.shape == (B, K, n_classes + 2)


def test_config_invariants():
    with pytest.raises(ValueError):
        micro_config(heads=3)
    with pytest.raises(ValueError):
        micro_config(context_width=7, heads=2)
    with pytest.raises(ValueError):
        micro_config(K=0)
    with pytest.raises(ValueError):
        micro_config(depth_P=-1)
    d = ModelConfig()
    assert (d.heads, d.depth_D, d.depth_P, d.ffn_width, d.dropout_rate, d.K) == (4, 2, 8, 256, 0.3, 8)
    assert ModelConfig.from_dict(micro_config().to_dict()) == micro_config()


def _unzero_heads(m, seed=3):
    # zero-initialised head outputs block every upstream gradient
    r = np.random.default_rng(seed)
    for head in m.horizon_heads:
        head.fc2.weight.data = r.normal(size=head.fc2.weight.shape) * 0.3


def test_fuse_mode_variants():
    cfg = micro_config(fuse_mode="argmax")
    x = images(cfg, 2)
    out = PrognosisModel(cfg)(x)
    assert out.horizon_logits.shape == (2, 2, 7)
    m = PrognosisModel(micro_config(detach_diag=True))
    _unzero_heads(m)
    loss = total_loss(m(x), LabelMask([-1, -1], [[0, 1], [2, 3]], [[-1, -1], [-1, -1]]))
    backward(loss, inputs=m.parameters())
    # horizon losses alone: with detached fusion the diagnosis head receives no gradient
    assert np.array_equal(m.diag_fc.weight.grad, np.zeros_like(m.diag_fc.weight.data))
    m = PrognosisModel(micro_config())
    _unzero_heads(m)
    loss = total_loss(m(x), LabelMask([-1, -1], [[0, 1], [2, 3]], [[-1, -1], [-1, -1]]))
    backward(loss, inputs=m.parameters())
    assert np.abs(m.diag_fc.weight.grad).max() > 0


# attention export

def test_attention_export():
    cfg = micro_config(heads=2, depth_P=2, context_width=8)
    m = PrognosisModel(cfg)
    out = m(images(cfg, 3), record_attention=True)
    maps = export_attention(out)
    T = cfg.n_tokens + 1
    assert len(maps) == 2
    for a in maps:
        assert a.shape == (3, 2, T, T)
        np.testing.assert_allclose(a.sum(-1), 1.0, rtol=0, atol=1e-9)
    with pytest.raises(ValueError, match="record_attention"):
        export_attention(m(images(cfg, 1)))


def test_single_token_attention_is_row_stochastic(rng):
    enc = TransformerEncoder(1, 4, 1, 1, 4, 0.0, rng)
    rec = []
    enc(Tensor(rng.normal(size=(1, 1, 4))), record=rec)
    assert rec[0].shape == (1, 1, 2, 2)
    np.testing.assert_allclose(rec[0].sum(-1), 1.0, atol=1e-12)


# full-model finite differences

def test_micro_model_gradients():
    cfg = micro_config()
    m = PrognosisModel(cfg)
    # a generic point: at initialisation the context layer norm sees an almost
    # constant ReLU output and the loss is too sharply curved for h=1e-5
    r = np.random.default_rng(3)
    for _, p in m.named_parameters():
        p.data = p.data + r.normal(size=p.shape) * 0.3
    x = Tensor(images(cfg, 2, seed=5), requires_grad=True)
    labels = LabelMask([1, 4], [[0, 2], [3, 4]], [[0, 1], [1, 1]])

    def fn():
        return total_loss(m(x), labels)

    leaves = m.parameters() + [x]
    errs = check_gradients(fn, leaves, max_coords=6, rng=np.random.default_rng(0))
    names = [n for n, _ in m.named_parameters()] + ["image"]
    bad = {names[i]: e for i, e in errs.items() if e >= 1e-4}
    assert not bad, bad
