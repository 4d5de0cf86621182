"""Model assembly: construction determinism, parameter counting against an

independent per-layer arithmetic oracle, variant structure, forward shapes
and ranges, and end-to-end gradients.
"""

import numpy as np
import pytest

from checks import projection_scalarizer, rand_tensor
from dfnet import tensor as T
from dfnet.blocks import ConvLayer, MAGParams
from dfnet.errors import ConfigError, UsageError
from dfnet.model import (BackboneSpec, DFNetConfig, VARIANTS, build_model,
                         extraction_forward, extraction_from_features,
                         forward, integration_forward)
from dfnet.tensor import Tensor, grad_check


def small_config(**kw):
    defaults = dict(backbone=BackboneSpec.tiny3(), branch_channels=2,
                    fuse_channels=8, ami_channels=8, input_size=(32, 32))
    defaults.update(kw)
    return DFNetConfig(**defaults)


def count_params_by_hand(config):
    """Layer-by-layer parameter arithmetic, independent of the model code."""
    def ca_count(c):
        hidden = max(1, int(c / 4 + 0.5))
        return hidden * c + hidden + c * hidden + c

    def mag_count(c_in, bc, with_ca):
        n = 0
        n += bc * c_in * 1 * 1 + bc          # extent 1: 1x1
        n += bc * c_in * 3 * 3 + bc          # extent 3: 3x3
        n += bc * c_in * 3 * 3 + bc          # extent 5: 3x3 dilated
        n += bc * c_in * 1 * 7               # extent 7: 1x7 row (no bias)
        n += bc * bc * 7 * 1 + bc            #           7x1 column
        n += bc * c_in * 3 * 3 + bc          # extent 9: 3x3 dilated
        n += bc * c_in * 1 * 3               # extent 11: 1x3 row dilated
        n += bc * bc * 3 * 1 + bc            #            3x1 column dilated
        if with_ca:
            n += ca_count(6 * bc)
        return n

    stages = config.backbone.stages
    bc, fuse, ami = (config.branch_channels, config.fuse_channels,
                     config.ami_channels)
    with_mag = config.variant not in ("without_mag", "without_mag_ami")
    mag_ca = config.variant != "without_cas"
    ami_ca = config.variant not in ("without_ami", "without_mag_ami",
                                    "without_cas")
    total = 0
    widths = [stages[0].channels] + [s.channels for s in stages]
    c_in = 3
    for w in widths:
        total += w * c_in * 9 + w
        c_in = w
    for s in stages:
        if with_mag:
            total += mag_count(s.channels, bc, mag_ca)
        else:
            total += 6 * bc * s.channels * 9 + 6 * bc
        total += fuse * 6 * bc + fuse
    high = fuse
    for _ in range(len(stages) - 1):
        cat = fuse + high
        if ami_ca:
            total += ca_count(cat)
        total += ami * cat * 9 + ami
        high = ami
    total += ami * ami * 9 + ami
    total += 1 * ami + 1
    return total


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = build_model(DFNetConfig(), seed=3)
        b = build_model(DFNetConfig(), seed=3)
        for (na, ta), (nb, tb) in zip(a.named_parameters(),
                                      b.named_parameters()):
            assert na == nb and ta.data.tobytes() == tb.data.tobytes()

    def test_different_seeds_differ(self):
        a = build_model(DFNetConfig(), seed=0)
        b = build_model(DFNetConfig(), seed=1)
        assert a.head_conv3.weight.data.tobytes() != b.head_conv3.weight.data.tobytes()

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_param_count_matches_hand_count(self, variant):
        for backbone in (BackboneSpec.tiny3(), BackboneSpec.tiny4()):
            cfg = DFNetConfig(backbone=backbone, variant=variant)
            model = build_model(cfg, seed=0)
            assert model.parameter_count == count_params_by_hand(cfg)

    def test_tiny4_mag_output_width(self):
        cfg = DFNetConfig(backbone=BackboneSpec.tiny4(), branch_channels=8,
                          fuse_channels=32)
        model = build_model(cfg, seed=0)
        for ex in model.stage_extractors:
            assert isinstance(ex, MAGParams)
            assert ex.out_channels == 48

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError, match="full"):
            build_model(small_config(variant="without_everything"))

    def test_bad_dtype_rejected(self):
        with pytest.raises(ConfigError):
            build_model(small_config(dtype="float16"))

    def test_indivisible_input_size_rejected(self):
        with pytest.raises(ConfigError):
            build_model(small_config(input_size=(40, 40)))

    def test_variant_structure(self):
        m = build_model(small_config(variant="without_mag"), seed=0)
        assert all(isinstance(ex, ConvLayer) for ex in m.stage_extractors)
        assert all(step.ca is not None for step in m.ami_steps)

        m = build_model(small_config(variant="without_ami"), seed=0)
        assert all(isinstance(ex, MAGParams) and ex.ca is not None
                   for ex in m.stage_extractors)
        assert all(step.ca is None for step in m.ami_steps)

        m = build_model(small_config(variant="without_mag_ami"), seed=0)
        assert all(isinstance(ex, ConvLayer) for ex in m.stage_extractors)
        assert all(step.ca is None for step in m.ami_steps)

        m = build_model(small_config(variant="without_cas"), seed=0)
        assert all(isinstance(ex, MAGParams) and ex.ca is None
                   for ex in m.stage_extractors)
        assert all(step.ca is None for step in m.ami_steps)


class TestForward:
    def test_stage_shapes_tiny3(self):
        model = build_model(DFNetConfig(input_size=(64, 64)), seed=0)
        x = rand_tensor(np.random.default_rng(0), (2, 3, 64, 64))
        feats = extraction_forward(model, x)
        assert [f.shape for f in feats] == [
            (2, 32, 16, 16), (2, 32, 8, 8), (2, 32, 4, 4)]

    def test_stage_shapes_tiny4(self):
        cfg = DFNetConfig(backbone=BackboneSpec.tiny4(), input_size=(64, 64))
        model = build_model(cfg, seed=0)
        x = rand_tensor(np.random.default_rng(0), (1, 3, 64, 64))
        feats = extraction_forward(model, x)
        assert [f.shape for f in feats] == [
            (1, 32, 16, 16), (1, 32, 8, 8), (1, 32, 4, 4), (1, 32, 2, 2)]
        assert len(model.ami_steps) == 3

    def test_stage_channels_follow_fuse_width_not_branch_width(self):
        cfg = small_config(branch_channels=3, fuse_channels=10)
        model = build_model(cfg, seed=0)
        x = rand_tensor(np.random.default_rng(1), (1, 3, 32, 32))
        feats = extraction_forward(model, x)
        assert all(f.shape[1] == 10 for f in feats)

    def test_output_shape_and_range(self):
        for backbone in (BackboneSpec.tiny3(), BackboneSpec.tiny4()):
            cfg = DFNetConfig(backbone=backbone, branch_channels=2,
                              fuse_channels=8, ami_channels=8,
                              input_size=(64, 64))
            model = build_model(cfg, seed=0)
            x = rand_tensor(np.random.default_rng(2), (2, 3, 64, 64))
            out = forward(model, x)
            assert out.shape == (2, 1, 64, 64)
            assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_zero_head_gives_half_map(self):
        model = build_model(small_config(), seed=0)
        model.head_conv1.weight.data[...] = 0.0
        model.head_conv1.bias.data[...] = 0.0
        x = rand_tensor(np.random.default_rng(3), (1, 3, 32, 32))
        out = forward(model, x)
        np.testing.assert_array_equal(out.data, np.full(out.shape, 0.5))

    def test_forward_deterministic(self):
        model = build_model(small_config(), seed=0)
        x = rand_tensor(np.random.default_rng(4), (1, 3, 32, 32))
        assert forward(model, x).data.tobytes() == forward(model, x).data.tobytes()

    def test_wrong_channel_count_rejected(self):
        model = build_model(small_config(), seed=0)
        with pytest.raises(UsageError):
            forward(model, rand_tensor(np.random.default_rng(0), (1, 1, 32, 32)))

    def test_indivisible_input_rejected(self):
        model = build_model(small_config(), seed=0)
        with pytest.raises(UsageError):
            forward(model, rand_tensor(np.random.default_rng(0), (1, 3, 40, 40)))

    def test_misordered_stage_features_rejected(self):
        model = build_model(small_config(), seed=0)
        x = rand_tensor(np.random.default_rng(5), (1, 3, 32, 32))
        feats = extraction_forward(model, x)
        with pytest.raises(ConfigError):
            integration_forward(model, list(reversed(feats)))


class TestExternalFeatures:
    def test_external_stage_path(self):
        spec = BackboneSpec.external([8, 16], exponents=[2, 3])
        with pytest.raises(ConfigError):  # needs 3 or 4 stages
            build_model(DFNetConfig(backbone=spec, input_size=(32, 32)))
        spec = BackboneSpec.external([8, 16, 24])
        cfg = DFNetConfig(backbone=spec, branch_channels=2, fuse_channels=8,
                          ami_channels=8, input_size=(32, 32))
        model = build_model(cfg, seed=0)
        assert model.backbone_layers == []
        rng = np.random.default_rng(6)
        feats = [rand_tensor(rng, (2, 8, 8, 8)), rand_tensor(rng, (2, 16, 4, 4)),
                 rand_tensor(rng, (2, 24, 2, 2))]
        out = integration_forward(model, extraction_from_features(model, feats))
        assert out.shape == (2, 1, 32, 32)

    def test_external_model_rejects_images(self):
        spec = BackboneSpec.external([8, 16, 24])
        cfg = DFNetConfig(backbone=spec, branch_channels=2, fuse_channels=8,
                          ami_channels=8, input_size=(32, 32))
        model = build_model(cfg, seed=0)
        with pytest.raises(UsageError):
            forward(model, rand_tensor(np.random.default_rng(0), (1, 3, 32, 32)))

    def test_wrong_stage_channels_rejected(self):
        spec = BackboneSpec.external([8, 16, 24])
        cfg = DFNetConfig(backbone=spec, branch_channels=2, fuse_channels=8,
                          ami_channels=8, input_size=(32, 32))
        model = build_model(cfg, seed=0)
        rng = np.random.default_rng(7)
        feats = [rand_tensor(rng, (1, 8, 8, 8)), rand_tensor(rng, (1, 99, 4, 4)),
                 rand_tensor(rng, (1, 24, 2, 2))]
        with pytest.raises(ConfigError):
            extraction_from_features(model, feats)


class TestGradients:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_end_to_end_sampled_finite_differences(self, variant):
        cfg = DFNetConfig(backbone=BackboneSpec.tiny3(), branch_channels=2,
                          fuse_channels=8, ami_channels=8, input_size=(16, 16),
                          variant=variant)
        model = build_model(cfg, seed=1)
        rng = np.random.default_rng(8)
        x = rand_tensor(rng, (1, 3, 16, 16), requires_grad=True)
        scalarize = projection_scalarizer((1, 1, 16, 16), rng)
        params = [x] + model.parameters()

        def f():
            return scalarize(forward(model, x))

        err = grad_check(f, params, max_elements_per_tensor=2, seed=0)
        assert err < 1e-4
