import math

import numpy as np
import pytest
from scipy.special import erf

from cmseg.gradcheck import gradcheck
from cmseg.tensor import ShapeError, Tensor
from cmseg.verify import conditioned_point
from cmseg.vit import (CVitEncoder, MultiHeadSelfAttention, PatchEmbedding, TransformerBlock, default_taps,
                       patchify, unpatchify)


def ref_in_tokens(z, gamma, beta, eps=1e-6):
    mu = z.mean(axis=0)
    var = ((z - mu) ** 2).mean(axis=0)
    return (z - mu) / np.sqrt(var + eps) * gamma + beta


def ref_block(z, p, m, heads):
    """Pre-norm ViT block with token-axis instance norm, written directly in numpy for one sample."""
    def lin(x, name):
        return x @ p[name + ".weight"] + p[name + ".bias"]

    n, k = z.shape
    d = k // heads
    h = ref_in_tokens(z, p["norm1.gamma"][m], p["norm1.beta"][m])
    q, kk, v = lin(h, "attn.q"), lin(h, "attn.k"), lin(h, "attn.v")
    ctx = np.zeros_like(z)
    for i in range(heads):
        sl = slice(i * d, (i + 1) * d)
        s = q[:, sl] @ kk[:, sl].T / math.sqrt(d)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        ctx[:, sl] = (s / s.sum(axis=1, keepdims=True)) @ v[:, sl]
    z = lin(ctx, "attn.out") + z
    h = ref_in_tokens(z, p["norm2.gamma"][m], p["norm2.beta"][m])
    u = lin(h, "mlp.fc1")
    u = 0.5 * u * (1 + erf(u / math.sqrt(2)))
    return lin(u, "mlp.fc2") + z


def test_patch_counts():
    assert patchify(Tensor(np.zeros((1, 1, 32, 32, 32))), 8).shape == (1, 64, 512)
    assert patchify(Tensor(np.zeros((1, 1, 16, 16, 16))), 16).shape == (1, 1, 4096)
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((1, 1, 12, 16, 16))), 8)


def test_patchify_roundtrip_and_raster_order(rng):
    v = rng.normal(size=(1, 1, 24, 24, 24)).astype(np.float32)
    p = patchify(Tensor(v), 8)
    assert np.array_equal(unpatchify(p, 8, (3, 3, 3)).data, v)
    # patch index = (z * 3 + y) * 3 + x, z-major
    z, y, x = 1, 2, 0
    np.testing.assert_array_equal(p.data[0, (z * 3 + y) * 3 + x], v[0, 0, 8:16, 16:24, 0:8].ravel())


def test_embed_examples(f64, rng):
    emb = PatchEmbedding(2, 4, 3, rng)
    emb.astype(np.float64)
    emb.pos.data[:] = rng.normal(size=(3, 4))
    emb.proj.data[:] = 0
    patches = Tensor(rng.normal(size=(1, 3, 8)))
    np.testing.assert_array_equal(emb(patches).data[0], emb.pos.data)
    emb.proj.data[:] = rng.normal(size=(8, 4))
    out = emb(Tensor(np.ones((1, 3, 8)))).data[0]
    np.testing.assert_allclose(out, emb.proj.data.sum(axis=0) + emb.pos.data, rtol=1e-12)
    x = Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
    r = rng.normal(size=(1, 3, 4))
    rep = gradcheck(lambda: (emb(x) * r).sum(), {"x": x, "proj": emb.proj, "pos": emb.pos}, tol=1e-5)
    assert rep.passed, rep.worst()


def test_msa_single_token_and_symmetry(f64, rng):
    msa = MultiHeadSelfAttention(8, 2, rng)
    msa.astype(np.float64)
    for lin in (msa.q, msa.k, msa.v, msa.out):
        lin.weight.data[:] = rng.normal(size=lin.weight.shape)
        lin.bias.data[:] = 0
    tok = rng.normal(size=(1, 1, 8))
    np.testing.assert_allclose(msa(Tensor(tok)).data, tok @ msa.v.weight.data @ msa.out.weight.data, rtol=1e-12)
    same = np.repeat(tok, 4, axis=1)
    out = msa(Tensor(same)).data
    assert np.allclose(out, out[:, :1], rtol=0, atol=1e-12)
    msa(Tensor(rng.normal(size=(2, 5, 8))))
    np.testing.assert_allclose(msa.last_weights.sum(axis=-1), 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(8, 3, rng)


def test_msa_gradcheck(f64, rng):
    msa = MultiHeadSelfAttention(8, 2, rng)
    msa.astype(np.float64)
    conditioned_point(msa, rng)
    z = Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
    r = rng.normal(size=(1, 3, 8))
    rep = gradcheck(lambda: (msa(z) * r).sum(), {"z": z, **dict(msa.named_parameters())}, tol=1e-5, floor=1e-3)
    assert rep.passed, rep.worst()


def test_block_matches_reference_forward(f64, rng):
    block = TransformerBlock(8, 2, 2, 2, rng)
    block.astype(np.float64)
    conditioned_point(block, rng)
    params = {n: p.data for n, p in block.named_parameters()}
    z = rng.normal(size=(2, 6, 8))
    for m in (0, 1):
        out = block(Tensor(z), m).data
        for b in range(2):
            np.testing.assert_allclose(out[b], ref_block(z[b], params, m, 2), rtol=1e-10, atol=1e-12)


def test_block_residual_identity(f64, rng):
    block = TransformerBlock(8, 2, 2, 2, rng)
    block.astype(np.float64)
    for lin in (block.attn.out, block.mlp.fc2):
        lin.weight.data[:] = 0
        lin.bias.data[:] = 0
    z = rng.normal(size=(1, 5, 8))
    assert np.array_equal(block(Tensor(z), 1).data, z)


def test_block_switch_transparency(rng):
    block = TransformerBlock(8, 2, 2, 2, rng)
    z = Tensor(rng.normal(size=(1, 5, 8)))
    a, b = block(z, 0).data, block(z, 1).data
    assert np.array_equal(a, b)
    block.norm1.gamma.data[1] *= 1.5
    assert not np.array_equal(block(z, 1).data, a)
    assert np.array_equal(block(z, 0).data, a)


def test_encode_shapes_and_cin_count(rng):
    enc = CVitEncoder((16, 16, 16), 8, 16, 4, 4, 2, 2, rng, taps=[1, 2, 3, 4])
    outs = enc(Tensor(rng.normal(size=(1, 1, 16, 16, 16))), 0)
    assert len(outs) == 5 and all(o.shape == (1, 8, 16) for o in outs)
    block_cins = sum(1 for b in enc.blocks for n in (b.norm1, b.norm2))
    assert block_cins == 2 * 4
    assert default_taps(4) == [1, 2, 3, 4]
    assert default_taps(8) == [2, 4, 6, 8]
    with pytest.raises(ValueError):
        CVitEncoder((16, 16, 16), 8, 16, 4, 4, 2, 2, rng, taps=[2, 1])


def test_encode_identity_when_sublayers_zero(rng):
    enc = CVitEncoder((8, 8, 8), 4, 8, 2, 2, 2, 2, rng)
    for b in enc.blocks:
        for lin in (b.attn.out, b.mlp.fc2):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
    outs = enc.encode(Tensor(rng.normal(size=(1, 1, 8, 8, 8))), 1)
    assert np.array_equal(outs[-1].data, outs[0].data)


def test_encode_tied_banks_and_replay(rng):
    x = Tensor(rng.normal(size=(1, 1, 8, 8, 8)))
    a = CVitEncoder((8, 8, 8), 4, 8, 2, 2, 2, 2, np.random.default_rng(5))
    b = CVitEncoder((8, 8, 8), 4, 8, 2, 2, 2, 2, np.random.default_rng(5))
    for oa, ob, oc in zip(a(x, 0), a(x, 1), b(x, 0)):
        assert np.array_equal(oa.data, ob.data)
        assert np.array_equal(oa.data, oc.data)


def test_token_permutation_equivariance(f64, rng):
    enc = CVitEncoder((8, 8, 8), 4, 8, 2, 2, 2, 1, rng)
    enc.astype(np.float64)
    assert np.all(enc.embedding.pos.data == 0)
    x = rng.normal(size=(1, 1, 8, 8, 8))
    patches = patchify(Tensor(x), 4).data
    perm = rng.permutation(8)
    shuffled = unpatchify(Tensor(patches[:, perm]), 4, (2, 2, 2)).data
    for o, s in zip(enc(Tensor(x), 0), enc(Tensor(shuffled), 0)):
        np.testing.assert_allclose(s.data, o.data[:, perm], rtol=1e-9, atol=1e-12)


def test_every_parameter_receives_gradient(rng):
    enc = CVitEncoder((8, 8, 8), 4, 8, 2, 2, 2, 2, rng)
    conditioned_point(enc, rng)
    outs = enc(Tensor(rng.normal(size=(2, 1, 8, 8, 8))), np.array([0, 1]))
    sum((o * Tensor(rng.normal(size=o.shape))).sum() for o in outs).backward()
    for name, p in enc.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
