import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from marsseg.losses import masked_cross_entropy
from marsseg.model import (
    REFERENCE_PARAMETER_COUNT,
    ArchitectureError,
    AtrousConfig,
    EncoderConfig,
    ModelConfig,
    ProjectionConfig,
    atrous_forward,
    build_model,
    config_channel_table,
    encoder_forward,
    parameter_breakdown,
    parameter_report,
    projection_forward,
    segment_nhwc,
    sk_attention,
    sk_fuse,
)

from oracles import central_difference, relative_error


def desk_config(output_stride=32, size=64, **enc):
    enc = {"stage_blocks": (1, 1, 1, 1), "width_multiplier": 1, "base_width": 4, "sk_min_dim": 4,
           "output_stride": output_stride, **enc}
    return ModelConfig(EncoderConfig(**enc), ProjectionConfig(output_dim=16),
                       AtrousConfig(filters_per_branch=8, output_size=(size, size)))


def randomize(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, t in model.state_dict().items():
            if "num_batches" in name:
                continue
            if "running_var" in name:
                t.copy_(0.5 + torch.rand(t.shape, generator=g, dtype=t.dtype))
            else:
                t.copy_(0.3 * torch.randn(t.shape, generator=g, dtype=t.dtype))


class TestConfig:
    def test_width_doubles_channels(self):
        one = config_channel_table(EncoderConfig(width_multiplier=1))
        two = config_channel_table(EncoderConfig(width_multiplier=2))
        assert two == [2 * c for c in one]
        assert two[-1] == 4096

    def test_non_integer_width_rejected(self):
        with pytest.raises(ArchitectureError, match="layer1|stem"):
            EncoderConfig(base_width=3, width_multiplier=0.5).validate()

    def test_bad_output_stride(self):
        with pytest.raises(ArchitectureError):
            EncoderConfig(output_stride=12).validate()

    def test_attach_layer_range(self):
        with pytest.raises(ArchitectureError):
            ProjectionConfig(layers=3, attach_layer=3).validate()

    @pytest.mark.parametrize("os_,plan", [(32, [(1, 1), (2, 1), (2, 1), (2, 1)]),
                                          (16, [(1, 1), (2, 1), (2, 1), (1, 2)]),
                                          (8, [(1, 1), (2, 1), (1, 2), (1, 4)])])
    def test_output_stride_plan(self, os_, plan):
        assert EncoderConfig(output_stride=os_).strides_and_dilations() == plan


class TestBuild:
    def test_deterministic(self):
        a = build_model(desk_config(), seed=3).state_dict()
        b = build_model(desk_config(), seed=3).state_dict()
        c = build_model(desk_config(), seed=4).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
        assert not all(torch.equal(a[k], c[k]) for k in a)

    def test_zero_biases_and_fan_in(self):
        m = build_model(ModelConfig(EncoderConfig(base_width=16, width_multiplier=1, stage_blocks=(1, 1, 1, 1)),
                                    atrous=AtrousConfig(filters_per_branch=64)), seed=0)
        for b in m.atrous.branches:
            assert torch.all(b.bias == 0)
            fan_in = b.weight[0].numel()
            assert float(b.weight.detach().std()) == pytest.approx(math.sqrt(2 / fan_in), rel=0.05)

    def test_parameter_table_unique(self):
        m = build_model(desk_config())
        table = m.parameter_table()
        ids = [id(p) for p in table.values()]
        assert len(ids) == len(set(ids))
        assert set(ids) == {id(p) for p in m.parameters()}
        assert sum(p.numel() for p in table.values()) == sum(parameter_breakdown(m).values())

    def test_full_size_accounting(self):
        m = build_model(ModelConfig(), device="meta")
        rows = parameter_breakdown(m)
        enc = sum(v for k, v in rows.items() if k.startswith("encoder"))
        assert rows["atrous.branches"] == 3 * (3 * 3 * 4096 * 256 + 256)
        assert rows["atrous.classifier"] == 768 * 6 + 6
        head = rows["atrous.branches"] + rows["atrous.classifier"]
        # documented delta: within 2% of the published count
        assert abs(enc + head - REFERENCE_PARAMETER_COUNT) / REFERENCE_PARAMETER_COUNT < 0.02
        report = parameter_report(m)
        assert "171,172,160" in report and "encoder.layer4" in report

    def test_vanilla_resnet50_count(self):
        m = build_model(ModelConfig(EncoderConfig(width_multiplier=1, selective_kernels=False)), device="meta")
        assert sum(p.numel() for p in m.encoder.parameters()) == 23_508_032


class TestForward:
    def test_full_size_shape_meta(self):
        m = build_model(ModelConfig(), device="meta")
        x = torch.zeros(2, 512, 512, 3, device="meta")
        feats = encoder_forward(m, x)
        assert tuple(feats.shape) == (2, 16, 16, 4096)
        assert tuple(atrous_forward(m, feats, (512, 512)).shape) == (2, 512, 512, 6)

    def test_desk_shape(self):
        m = build_model(desk_config())
        assert tuple(encoder_forward(m, torch.rand(1, 64, 64, 3)).shape) == (1, 2, 2, 128)

    @pytest.mark.parametrize("size", [64, 128, 512])
    def test_atrous_shapes(self, size):
        m = build_model(desk_config(size=size))
        with torch.no_grad():
            out = segment_nhwc(m, torch.rand(1, size, size, 3))
        assert tuple(out.shape) == (1, size, size, 6)

    def test_indivisible_dims(self):
        with pytest.raises(ValueError, match="divisible"):
            encoder_forward(build_model(desk_config()), torch.rand(1, 48, 64, 3))

    def test_zero_input_finite(self):
        m = build_model(desk_config())
        out = encoder_forward(m, torch.zeros(1, 64, 64, 3))
        assert out.shape == (1, 2, 2, 128) and torch.isfinite(out).all()

    def test_zero_head_uniform_softmax(self):
        m = build_model(desk_config())
        with torch.no_grad():
            for p in m.atrous.parameters():
                p.zero_()
            logits = segment_nhwc(m, torch.rand(2, 64, 64, 3))
        assert torch.all(logits == 0)
        assert torch.allclose(torch.softmax(logits, -1), torch.full_like(logits, 1 / 6))

    def test_inference_pure(self):
        m = build_model(desk_config(output_stride=8))
        x = torch.rand(2, 64, 64, 3)
        with torch.no_grad():
            assert torch.equal(segment_nhwc(m, x), segment_nhwc(m, x))


class TestProjection:
    def test_unit_norm(self):
        m = build_model(desk_config())
        z = projection_forward(m, encoder_forward(m, torch.rand(5, 64, 64, 3)))
        assert torch.allclose(z.norm(dim=1), torch.ones(5), atol=1e-5)

    def test_identical_rows_and_independence(self):
        m = build_model(desk_config())
        f = torch.randn(3, 128)
        z = projection_forward(m, torch.stack([f[0], f[0], f[1], f[2]]))
        assert torch.equal(z[0], z[1])
        z2 = projection_forward(m, torch.stack([f[0], f[1], f[1], f[2]]))
        assert torch.allclose(z[2:], z2[2:], atol=1e-6)

    def test_zero_vector_rejected(self):
        m = build_model(desk_config())
        with torch.no_grad():
            for p in m.projection.layers[-1].parameters():
                p.zero_()
        with pytest.raises(ValueError, match="degenerate"):
            projection_forward(m, torch.randn(2, 128))


class TestSelectiveKernel:
    def test_equal_logits(self):
        w = sk_attention(torch.zeros(1, 2, 4))
        assert torch.allclose(w, torch.full_like(w, 0.5))

    def test_closed_form(self):
        w = sk_attention(torch.tensor([[[math.log(2)], [0.0]]]))
        assert torch.allclose(w[0, :, 0], torch.tensor([2 / 3, 1 / 3]))

    def test_fuse_matches_elementwise(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.randn(2, 3, 4, 4, generator=g), torch.randn(2, 3, 4, 4, generator=g)
        logits = torch.randn(2, 2, 3, generator=g)
        out = sk_fuse([a, b], logits)
        ref = np.zeros((2, 3, 4, 4))
        for n in range(2):
            for c in range(3):
                ea, eb = math.exp(logits[n, 0, c]), math.exp(logits[n, 1, c])
                ref[n, c] = (ea * a[n, c].numpy() + eb * b[n, c].numpy()) / (ea + eb)
        np.testing.assert_allclose(out.numpy(), ref, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sk_fuse([torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 4, 4)], torch.zeros(1, 2, 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 8), st.integers(2, 4), st.integers(0, 1000))
    def test_weights_sum_to_one(self, b, c, k, seed):
        g = torch.Generator().manual_seed(seed)
        w = sk_attention(10 * torch.randn(b, k, c, generator=g, dtype=torch.float64))
        assert torch.allclose(w.sum(dim=1), torch.ones(b, c, dtype=torch.float64), atol=1e-6)


def test_full_model_gradient_spot_check():
    cfg = desk_config(output_stride=8, zero_init_residual=False)
    m = build_model(cfg, seed=0).double()
    randomize(m, seed=1)
    m.eval()
    g = torch.Generator().manual_seed(2)
    x = torch.rand(2, 3, 64, 64, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 6, (2, 64, 64), generator=g)
    labels[:, :8] = 255

    def loss():
        with torch.no_grad():
            return masked_cross_entropy(m(x), labels, channels_last=False)

    m.zero_grad()
    masked_cross_entropy(m(x), labels, channels_last=False).backward()
    # projection layers past the attach point are off the segmentation path
    params = [(n, p) for n, p in m.named_parameters() if p.grad is not None]
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(110):
        name, p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            num = central_difference(loss, p.data, idx, 1e-5)
        assert relative_error(float(p.grad[idx]), num) < 1e-3, name
        checked += 1
    assert checked >= 100
