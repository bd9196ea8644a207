import numpy as np
import pytest

from gradcheck import check
from pvhnet import autodiff as ad
from pvhnet.errors import SchemaViolation, ShapeMismatch, UnrealizableSchedule, UnsupportedFactor
from pvhnet.network import LayerSpec, NetworkConfig, build_network, plan_network
from pvhnet.training import dual_loss


def miniature(**kw) -> NetworkConfig:
    """8^3 network small enough for exhaustive finite differences."""
    base = dict(
        scale=1, joint_count=2, base_resolution=8, coarse_resolution=8, dtype="float64",
        encoder=[LayerSpec(2, 3, 1), LayerSpec(2, 3, 2, pool=True)],
        decoder=[LayerSpec(2, 3, 1, padding="valid"), LayerSpec(2, 3, 2), LayerSpec(1, 3, 1)],
        hidden_widths=(5,), seed_edge=2)
    return NetworkConfig(**{**base, **kw})


@pytest.mark.parametrize("scale,enc,dec", [(1, 5, 6), (2, 6, 8), (4, 7, 10)])
def test_published_layer_counts(scale, enc, dec):
    model = build_network(NetworkConfig.published(scale))
    assert model.encoder_layer_count == enc and model.decoder_layer_count == dec
    assert sum(1 for s in model.config.encoder if s.pool) == 1 and model.config.encoder[3].pool


@pytest.mark.parametrize("scale", [1, 2, 4])
def test_published_filter_sizes_and_widths(scale):
    cfg = NetworkConfig.published(scale)
    assert cfg.bottleneck_widths == (1024, 1024, 78, 216)
    assert [s.kernel for s in cfg.encoder[:2]] == [5, 5]
    assert all(s.kernel == 3 for s in cfg.encoder[2:])
    assert [s.kernel for s in cfg.decoder[-2:]] == [5, 5]
    assert all(s.kernel == 3 for s in cfg.decoder[:-2])


def test_published_bottleneck_parameter_shapes():
    model = build_network(NetworkConfig.published(1))
    shapes = [model.params[f"enc_fc{k}.w"].shape for k in range(3)] + [model.params["dec_seed.w"].shape]
    assert [s[1] for s in shapes] == [1024, 1024, 78, 216]


def test_output_resolution_at_scale_four():
    cfg = NetworkConfig.published(4)
    plan = plan_network(cfg)
    assert plan.encoder_sizes[-1] == 4 and plan.decoder_sizes[-1] == 128
    assert build_network(cfg).output_shape() == (1, 128, 128, 128, 1)


@pytest.mark.parametrize("scale", [1, 2, 4])
def test_skips_join_full_and_half_resolution(scale):
    plan = plan_network(NetworkConfig.reduced(scale))
    s = 32 * scale
    sizes = sorted(plan.encoder_sizes[e] for e, _ in plan.skips)
    assert sizes == [s // 2, s]
    for e, j in plan.skips:
        assert plan.encoder_sizes[e] == plan.decoder_sizes[j]


def test_skip_projection_when_channels_differ():
    model = build_network(NetworkConfig.published(1))
    proj = [n for n in model.params if n.startswith("skip")]
    # encoder layers carry 96 channels, the full-size decoder layer 64
    assert proj == ["skip4.w", "skip4.b"]
    assert model.params["skip4.w"].shape == (1, 1, 1, 96, 64)


def test_reduced_forward_shapes():
    model = build_network(NetworkConfig.reduced(1, coarse_resolution=16))
    x = np.random.default_rng(0).random((2, 32, 32, 32, 1)).astype(np.float32)
    latent, volume = model(x)
    assert latent.shape == (2, 51) and volume.shape == (2, 32, 32, 32, 1)
    assert latent.dtype == np.float32


def test_forward_rejects_wrong_resolution():
    model = build_network(miniature())
    with pytest.raises(ShapeMismatch):
        model(np.zeros((1, 6, 6, 6, 1)))


def test_config_validation():
    with pytest.raises(UnsupportedFactor):
        NetworkConfig(scale=3)
    with pytest.raises(UnrealizableSchedule):
        build_network(miniature(skips=[(0, 0)]))
    bad = miniature()
    bad.decoder = bad.decoder[:-1] + [LayerSpec(2, 3, 1)]
    with pytest.raises(UnrealizableSchedule):
        plan_network(bad)
    with pytest.raises(SchemaViolation):
        NetworkConfig.from_dict({"scale": 1, "widths": 3})


def test_config_dict_round_trip():
    cfg = NetworkConfig.reduced(2, lam=0.5)
    again = NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_init_is_seeded():
    a, b = build_network(miniature()), build_network(miniature())
    c = build_network(miniature(init_seed=1))
    assert a.checksum() == b.checksum() != c.checksum()


def test_miniature_end_to_end_gradients():
    model = build_network(miniature())
    rng = np.random.default_rng(1)
    for p in model.parameters():
        p.data += rng.normal(0.0, 0.05, p.shape)  # move biases off zero
    x = rng.random((2, 8, 8, 8, 1))
    tv = rng.random((2, 8, 8, 8, 1))
    tj = rng.normal(size=(2, 6))

    def loss():
        latent, vol = model(x)
        return dual_loss(latent, vol, tj, tv, lam=0.3)

    assert check(loss, model.params, max_entries=25) < 1e-4


def test_zero_weights_give_zero_latent():
    model = build_network(miniature())
    for p in model.parameters():
        p.data[...] = 0.0
    latent, volume = model(np.random.default_rng(2).random((1, 8, 8, 8, 1)))
    assert np.array_equal(latent.data, np.zeros((1, 6)))
    assert np.array_equal(volume.data, np.zeros((1, 8, 8, 8, 1)))


def _grads(model, x, tv, tj, lam):
    with ad.Tape() as tape:
        latent, vol = model(x)
        loss = dual_loss(latent, vol, tj, tv, lam)
    return ad.backward(tape, loss, model.parameters())


def test_lambda_zero_decouples_joint_targets():
    model = build_network(miniature())
    rng = np.random.default_rng(3)
    x, tv = rng.random((2, 8, 8, 8, 1)), rng.random((2, 8, 8, 8, 1))
    tj = rng.normal(size=(2, 6))
    g1 = _grads(model, x, tv, tj, 0.0)
    g2 = _grads(model, x, tv, tj + rng.normal(size=tj.shape) * 10, 0.0)
    for name in g1:
        assert np.array_equal(g1[name], g2[name])
    assert np.any(g1["enc_fc1.w"] != 0)  # latent still feeds the decoder
    g3 = _grads(model, x, tv, tj + 1.0, 1e-3)
    assert not np.array_equal(g1["enc_fc1.w"], g3["enc_fc1.w"])


def test_dual_loss_example():
    j = 26
    latent = np.zeros((1, 3 * j))
    target = latent.copy()
    target[0, 5] = 0.2
    vol = np.full((1, 4, 4, 4, 1), 0.5)
    loss = dual_loss(latent, vol, target, vol, lam=1e-3).item()
    assert loss == pytest.approx(1e-3 * 0.2 ** 2 / (3 * j), rel=1e-12)
    loss = dual_loss(latent, vol + 0.1, latent, vol, lam=1e-3).item()
    assert loss == pytest.approx(0.01, rel=1e-12)
