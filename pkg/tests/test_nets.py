import numpy as np
import pytest
import torch

from seada.nets import (
    ArchConfig,
    decode,
    decode_mdada,
    domain_predict,
    encode,
    init_bundle,
    load_checkpoint,
    parameter_count,
    parameter_digest,
    reconstruct,
    save_checkpoint,
    style_encode,
)

ARCH = ArchConfig(shape=(16, 16, 16), latent_dim=8, num_domains=3, channels=(4, 8, 8, 8),
                  style_channels=(4, 4, 8, 8), predictor_hidden=16, norm_groups=4)


def vols(n=4, seed=0):
    return np.random.default_rng(seed).random((n, 16, 16, 16)).astype(np.float32)


def test_shapes_and_ranges():
    b = init_bundle(ARCH, "SEADA", 0)
    x = vols()
    z = encode(b, x)
    assert z.shape == (4, 8)
    s, zk = style_encode(b, x)
    assert s.shape == (4, 3) and zk.shape == (4, 8)
    out = decode(b, z)
    assert out.shape == (4, 16, 16, 16)
    assert out.min() >= 0 and out.max() <= 1
    assert domain_predict(b, z).shape == (4, 3)


def test_single_volume_gets_batch_axis():
    b = init_bundle(ARCH, "CAE", 0)
    assert encode(b, vols(1)[0]).shape == (1, 8)


def test_shape_mismatch_rejected():
    b = init_bundle(ARCH, "CAE", 0)
    with pytest.raises(ValueError, match="shape"):
        encode(b, np.zeros((1, 8, 8, 8)))
    with pytest.raises(ValueError):
        ArchConfig(shape=(20, 16, 16))


def test_encode_deterministic_in_eval_mode():
    b = init_bundle(ARCH, "ADA", 0).eval()
    x = vols()
    assert np.array_equal(encode(b, x), encode(b, x))


def test_zeroed_encoder_fc_gives_zero_latent():
    b = init_bundle(ARCH, "CAE", 0)
    with torch.no_grad():
        b.encoder.fc.weight.zero_()
        b.encoder.fc.bias.zero_()
    assert np.all(encode(b, vols()) == 0)


def test_style_latent_depends_only_on_softmax():
    b = init_bundle(ARCH, "SEADA", 0)
    s = torch.randn(5, 3)
    with torch.no_grad():
        a = b.style_encoder.style_latent(s)
        shifted = b.style_encoder.style_latent(s + 7.0)  # softmax is shift-invariant
    torch.testing.assert_close(a, shifted, atol=1e-5, rtol=0)


def test_seada_decodes_sum_of_latents():
    b = init_bundle(ARCH, "SEADA", 1).eval()
    x = vols(3)
    z = encode(b, x)
    _, zk = style_encode(b, x)
    np.testing.assert_allclose(reconstruct(b, x), decode(b, z + zk), atol=1e-6)
    # with a zeroed style head the sum collapses to z alone
    with torch.no_grad():
        for p in b.style_encoder.head[-1].parameters():
            p.zero_()
    np.testing.assert_allclose(reconstruct(b, x), decode(b, z), atol=1e-6)


def test_mdada_branch_routing():
    b = init_bundle(ARCH, "MDADA", 0).eval()
    assert b.decoder.branches == 3
    x = vols(3)
    z = encode(b, x)
    outs = [decode_mdada(b, z, k) for k in range(3)]
    assert not np.allclose(outs[0], outs[1])
    mixed = reconstruct(b, x, domain=[2, 0, 1])
    for i, k in enumerate([2, 0, 1]):
        np.testing.assert_allclose(mixed[i], outs[k][i], atol=1e-6)


def test_mdada_errors():
    b = init_bundle(ARCH, "MDADA", 0)
    z = np.zeros((1, 8))
    with pytest.raises(ValueError, match="branch"):
        decode_mdada(b, z, 3)
    with pytest.raises(ValueError):
        decode(b, z)
    with pytest.raises(ValueError, match="domain"):
        reconstruct(b, vols(1))


def test_missing_components_rejected():
    cae = init_bundle(ARCH, "CAE", 0)
    with pytest.raises(ValueError):
        style_encode(cae, vols(1))
    with pytest.raises(ValueError):
        domain_predict(cae, np.zeros((1, 8)))
    with pytest.raises(ValueError):
        init_bundle(ARCH, "COMBAT", 0)


def test_init_is_deterministic_and_shared_across_methods():
    a = init_bundle(ARCH, "SEADA", 5)
    assert parameter_digest(a) == parameter_digest(init_bundle(ARCH, "SEADA", 5))
    assert parameter_digest(a) != parameter_digest(init_bundle(ARCH, "SEADA", 6))
    ada = init_bundle(ARCH, "ADA", 5)
    for (n1, p1), (n2, p2) in zip(a.encoder.state_dict().items(), ada.encoder.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    for p1, p2 in zip(a.domain_predictor.parameters(), ada.domain_predictor.parameters()):
        assert torch.equal(p1, p2)


def test_init_does_not_touch_global_rng():
    torch.manual_seed(3)
    before = torch.rand(1)
    torch.manual_seed(3)
    init_bundle(ARCH, "SEADA", 0)
    assert torch.equal(torch.rand(1), before)


@pytest.mark.parametrize("method", ["CAE", "ADA", "MDADA", "SEADA"])
def test_checkpoint_roundtrip(tmp_path, method):
    b = init_bundle(ARCH, method, 2)
    digest = save_checkpoint(tmp_path / "m.ckpt", b, step=17, extra={"note": "x"})
    assert len(digest) == 64
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.step == 17 and ck.extra == {"note": "x"}
    assert ck.bundle.method == method
    assert parameter_digest(ck.bundle) == parameter_digest(b)
    assert save_checkpoint(tmp_path / "again.ckpt", ck.bundle, 17, {"note": "x"}) == digest


def test_checkpoint_truncation_and_magic(tmp_path):
    b = init_bundle(ARCH, "CAE", 0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, b)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(p)


def test_parameter_accounting():
    ada = init_bundle(ARCH, "ADA", 0)
    md = init_bundle(ARCH, "MDADA", 0)
    branch = ARCH.latent_dim * ARCH.bottleneck_size + ARCH.bottleneck_size
    assert parameter_count(md.decoder) - parameter_count(ada.decoder) == (ARCH.num_domains - 1) * branch
    assert parameter_count(md.encoder) == parameter_count(ada.encoder)
    assert parameter_count(None) == 0
