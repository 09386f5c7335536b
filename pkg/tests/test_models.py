import numpy as np
import pytest
import torch

from fedsynth.models import (
    DiscriminatorConfig,
    GeneratorConfig,
    ParameterMismatchError,
    ParameterSet,
    build_discriminator,
    build_generator,
    discriminator_forward,
    export_parameters,
    generator_forward,
    import_parameters,
    patch_map_size,
    receptive_field,
)
from oracles import patchgan_param_count, unet_param_count

# frozen from tests/oracles.py (layer arithmetic, computed before the model existed)
UNET_256_PARAMS = 54_403_457
UNET_64_PARAMS = 29_235_585
PATCHGAN_PARAMS = 2_763_713

SMALL = GeneratorConfig(resolution=32, base_channels=4, channel_cap=16)


def n_params(m):
    return sum(p.numel() for p in m.parameters())


def test_oracle_values_frozen():
    assert unet_param_count(256) == UNET_256_PARAMS
    assert unet_param_count(64) == UNET_64_PARAMS
    assert patchgan_param_count() == PATCHGAN_PARAMS


def test_default_generator_parameter_count():
    g = build_generator(GeneratorConfig(), seed=0)
    assert n_params(g) == UNET_256_PARAMS
    assert len(g.encoder) == 8 and len(g.decoder) == 8


def test_generator_64_depth_and_count():
    g = build_generator(GeneratorConfig(resolution=64), seed=0)
    assert len(g.encoder) == 6 and len(g.decoder) == 6
    assert n_params(g) == UNET_64_PARAMS


def test_default_discriminator_parameter_count():
    assert n_params(build_discriminator(DiscriminatorConfig(), seed=0)) == PATCHGAN_PARAMS


@pytest.mark.parametrize("res", [0, 8, 15, 48, 100, 257])
def test_bad_resolution_rejected(res):
    with pytest.raises(ValueError):
        GeneratorConfig(resolution=res)


@pytest.mark.parametrize("res", [16, 32, 64])
def test_generator_shape_preserving(res):
    cfg = GeneratorConfig(resolution=res, base_channels=4, channel_cap=32)
    g = build_generator(cfg, seed=1).eval()
    x = torch.rand(2, 1, res, res) * 2 - 1
    with torch.no_grad():
        y = generator_forward(g, x)
    assert y.shape == x.shape
    assert torch.isfinite(y).all()
    assert y.abs().max() < 1


def test_generator_forward_64_full_width():
    g = build_generator(GeneratorConfig(resolution=64), seed=0).eval()
    with torch.no_grad():
        y = g(torch.rand(1, 1, 64, 64) * 2 - 1)
    assert y.shape == (1, 1, 64, 64)


def test_generator_rejects_wrong_shape():
    g = build_generator(SMALL, seed=0)
    with pytest.raises(ValueError):
        g(torch.zeros(1, 1, 16, 16))
    with pytest.raises(ValueError):
        g(torch.zeros(1, 2, 32, 32))


def test_zero_final_layer_gives_zero_output():
    g = build_generator(SMALL, seed=0).eval()
    with torch.no_grad():
        for p in g.decoder[-1].parameters():
            p.zero_()
        y = g(torch.rand(3, 1, 32, 32))
    assert torch.equal(y, torch.zeros_like(y))


def test_generator_skip_structure():
    g = build_generator(GeneratorConfig(resolution=64, base_channels=8, channel_cap=32), seed=0)
    enc = [b.conv.out_channels for b in g.encoder]
    assert enc == [8, 16, 32, 32, 32, 32]
    # first and innermost encoder blocks are unnormalised
    assert isinstance(g.encoder[0].norm, torch.nn.Identity)
    assert isinstance(g.encoder[-1].norm, torch.nn.Identity)
    assert all(isinstance(b.norm, torch.nn.InstanceNorm2d) for b in g.encoder[1:-1])
    # decoder input channels: bottleneck, then concatenated skips
    assert [b.conv.in_channels for b in g.decoder] == [32, 64, 64, 64, 32, 16]
    drops = [not isinstance(b.drop, torch.nn.Identity) for b in g.decoder]
    assert drops == [True, True, True, False, False, False]


def test_init_statistics():
    g = build_generator(GeneratorConfig(resolution=64), seed=3)
    w = torch.cat([p.flatten() for n, p in g.named_parameters() if n.endswith("weight")])
    assert abs(w.mean().item()) < 1e-3
    assert abs(w.std().item() - 0.02) < 1e-3
    assert all(torch.count_nonzero(p) == 0 for n, p in g.named_parameters() if n.endswith("bias"))


# -- discriminator -----------------------------------------------------------


@pytest.mark.parametrize("res,expected", [(256, 30), (128, 14), (64, 6)])
def test_patch_map_size(res, expected):
    cfg = DiscriminatorConfig(base_channels=8)
    assert patch_map_size(cfg, res) == expected
    d = build_discriminator(cfg, seed=0)
    with torch.no_grad():
        out = discriminator_forward(d, torch.zeros(1, 1, res, res), torch.zeros(1, 1, res, res))
    assert out.shape == (1, 1, expected, expected)


def test_default_patch_map_256():
    d = build_discriminator(DiscriminatorConfig(), seed=0)
    with torch.no_grad():
        out = d(torch.rand(1, 1, 256, 256), torch.rand(1, 1, 256, 256))
    assert out.shape == (1, 1, 30, 30)


def test_receptive_field_is_70():
    assert receptive_field(DiscriminatorConfig()) == 70


def test_discriminator_layer_layout():
    d = build_discriminator(DiscriminatorConfig(), seed=0)
    convs = [m for m in d.net if isinstance(m, torch.nn.Conv2d)]
    assert [(c.in_channels, c.out_channels, c.stride[0]) for c in convs] == [
        (2, 64, 2), (64, 128, 2), (128, 256, 2), (256, 512, 1), (512, 1, 1),
    ]
    assert all(c.kernel_size == (4, 4) and c.padding == (1, 1) for c in convs)
    norms = [m for m in d.net if isinstance(m, torch.nn.InstanceNorm2d)]
    assert len(norms) == 3
    assert isinstance(d.net[1], torch.nn.LeakyReLU)  # no norm after the first conv
    assert isinstance(d.net[-1], torch.nn.Conv2d)  # raw logits


def test_zero_discriminator_gives_zero_logits():
    d = build_discriminator(DiscriminatorConfig(base_channels=8), seed=0)
    import_parameters(d, export_parameters(d).zeros_like())
    with torch.no_grad():
        out = d(torch.rand(2, 1, 64, 64), torch.rand(2, 1, 64, 64))
    assert torch.equal(out, torch.zeros_like(out))


def test_discriminator_shape_mismatch():
    d = build_discriminator(DiscriminatorConfig(base_channels=8), seed=0)
    with pytest.raises(ValueError):
        d(torch.zeros(1, 1, 64, 64), torch.zeros(1, 1, 32, 32))


# -- parameter export / import ----------------------------------------------


def test_roundtrip_preserves_forward():
    g = build_generator(SMALL, seed=5).eval()
    x = torch.rand(2, 1, 32, 32) * 2 - 1
    with torch.no_grad():
        before = g(x)
    import_parameters(g, export_parameters(g))
    with torch.no_grad():
        after = g(x)
    assert torch.equal(before, after)


def test_foreign_import_determines_forward():
    g1 = build_generator(SMALL, seed=1).eval()
    g2 = build_generator(SMALL, seed=2).eval()
    import_parameters(g2, export_parameters(g1))
    x = torch.rand(1, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(g1(x), g2(x))


def test_import_zeros_gives_zero_output():
    g = build_generator(SMALL, seed=1).eval()
    import_parameters(g, export_parameters(g).zeros_like())
    with torch.no_grad():
        y = g(torch.rand(1, 1, 32, 32))
    assert torch.equal(y, torch.zeros_like(y))


def test_different_seeds_same_topology():
    a = export_parameters(build_generator(SMALL, seed=1))
    b = export_parameters(build_generator(SMALL, seed=2))
    a.check_compatible(b)
    assert a.names == b.names and a.shapes() == b.shapes()
    assert not a.equals(b)


def test_same_seed_bit_identical():
    a = export_parameters(build_generator(SMALL, seed=9))
    b = export_parameters(build_generator(SMALL, seed=9))
    assert a.equals(b)
    assert a.digest() == b.digest()


def test_import_rejects_shape_mismatch_naming_entry():
    g = build_generator(SMALL, seed=0)
    other = build_generator(GeneratorConfig(resolution=32, base_channels=8, channel_cap=16), seed=0)
    with pytest.raises(ParameterMismatchError, match="encoder.0.conv.weight"):
        import_parameters(g, export_parameters(other))


def test_import_rejects_name_mismatch():
    g = build_generator(SMALL, seed=0)
    ps = export_parameters(g)
    renamed = ParameterSet((("x" + n if i == 3 else n), a) for i, (n, a) in enumerate(ps.items()))
    with pytest.raises(ParameterMismatchError, match="xencoder"):
        import_parameters(g, renamed)


def test_parameter_set_invariants():
    with pytest.raises(ParameterMismatchError):
        ParameterSet([("a", np.zeros(2)), ("a", np.zeros(2))])
    with pytest.raises(ParameterMismatchError):
        ParameterSet([("a", np.array([np.nan]))])
    ps = ParameterSet([("a", np.arange(3.0))])
    with pytest.raises(ValueError):
        ps["a"][0] = 5.0  # read-only
    assert ps["a"].dtype == np.float32
