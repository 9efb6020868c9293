import numpy as np
import pytest
import torch
from torch import nn

from longiseg.nets import (
    TINY_BACKBONE, BackboneConfig, CheckpointMismatch, ModelVariant, MultitaskOutput, build_model,
    count_parameters, load_checkpoint, predict_prob, save_checkpoint, swap_streams,
)

# exact trainable-scalar count of the default multitask model
MULTITASK_DEFAULT_PARAMS = 2_047_443


def test_static_default_shape_contract():
    model = build_model(ModelVariant.STATIC).eval()
    out = model(torch.randn(1, 2, 64, 64))
    assert out.shape == (1, 1, 64, 64)
    assert out.min() >= 0 and out.max() <= 1


def test_multitask_default_shape_contract():
    model = build_model("multitask").eval()
    out = model(torch.randn(1, 4, 64, 64))
    assert isinstance(out, MultitaskOutput)
    assert out.prob.shape == (1, 1, 64, 64)
    assert out.field.shape == (1, 2, 64, 64)


def test_multitask_parameter_budget():
    n = count_parameters(build_model(ModelVariant.MULTITASK))
    assert 1.5e6 <= n <= 2.5e6
    assert n == MULTITASK_DEFAULT_PARAMS


def test_count_single_conv():
    conv = nn.Conv2d(3, 5, 3)
    assert count_parameters(conv) == 5 * (3 * 3 * 3 + 1)


def test_count_additive():
    a, b = nn.Conv2d(2, 4, 3), nn.Linear(7, 2)
    assert count_parameters(nn.ModuleList([a, b])) == count_parameters(a) + count_parameters(b)


def test_count_skips_frozen():
    conv = nn.Conv2d(1, 1, 1)
    conv.bias.requires_grad_(False)
    assert count_parameters(conv) == 1


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_all_variants_tiny(variant):
    model = build_model(variant, TINY_BACKBONE).eval()
    x = torch.randn(2, variant.in_channels, 16, 16)
    out = predict_prob(model, x)
    assert out.shape == (2, 1, 16, 16)
    with torch.no_grad():
        again = predict_prob(model, x)
    assert torch.equal(out.detach(), again)


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_zero_input_bounded(variant):
    model = build_model(variant, TINY_BACKBONE).eval()
    out = model(torch.zeros(1, variant.in_channels, 8, 8))
    prob = out.prob if isinstance(out, MultitaskOutput) else out
    assert torch.isfinite(prob).all() and prob.min() >= 0 and prob.max() <= 1
    if isinstance(out, MultitaskOutput):
        assert torch.isfinite(out.field).all()


def test_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="consumes 2"):
        build_model("static", BackboneConfig(in_channels=4))
    build_model("static", BackboneConfig(in_channels=2))
    model = build_model("longitudinal", TINY_BACKBONE)
    with pytest.raises(ValueError, match="expects"):
        model(torch.zeros(1, 2, 8, 8))


def test_unpadded_input_names_multiple():
    model = build_model("static", TINY_BACKBONE)
    with pytest.raises(ValueError, match="multiple of 4"):
        model(torch.zeros(1, 2, 10, 8))


def test_field_head_starts_at_identity():
    model = build_model("multitask", TINY_BACKBONE).eval()
    out = model(torch.randn(1, 4, 8, 8))
    assert torch.count_nonzero(out.field) == 0


def test_multitask_has_one_encoder_two_equivalent_decoders():
    model = build_model("multitask", TINY_BACKBONE)
    assert sum(1 for name, _ in model.named_children() if "encoder" in name) == 1
    seg = [(n, p.shape) for n, p in model.seg_decoder.named_parameters()]
    reg = [(n, p.shape) for n, p in model.reg_decoder.named_parameters()]
    assert len(seg) == len(reg)
    for (ns, ss), (nr, sr) in zip(seg, reg):
        assert ns == nr
        if ns.startswith("head."):
            assert ss[0] == 1 and sr[0] == 2
        else:
            assert ss == sr


def test_multitask_encoder_runs_once():
    model = build_model("multitask", TINY_BACKBONE)
    calls = []
    model.encoder.register_forward_hook(lambda *a: calls.append(1))
    model(torch.randn(1, 4, 8, 8))
    assert len(calls) == 1


def test_siamese_fuses_at_bottleneck():
    model = build_model("siamese", TINY_BACKBONE)
    assert model.bottleneck.layers[0][0].num_features == 2 * model.down.out_channels
    assert model.down.first_conv.in_channels == 2
    calls = []
    model.down.register_forward_hook(lambda *a: calls.append(1))
    model(torch.randn(1, 4, 8, 8))
    assert len(calls) == 2


def test_siamese_swap_twice_is_identity():
    model = build_model("siamese", TINY_BACKBONE).eval()
    x = torch.randn(2, 4, 8, 8)
    assert torch.equal(swap_streams(swap_streams(x)), x)
    with torch.no_grad():
        assert torch.equal(model(swap_streams(swap_streams(x))), model(x))
        assert not torch.equal(model(swap_streams(x)), model(x))


def test_siamese_shares_stream_weights():
    model = build_model("siamese", TINY_BACKBONE)
    assert sum(1 for m in model.modules() if isinstance(m, type(model.down))) == 1


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_translation_covariance(variant):
    torch.manual_seed(0)
    cfg = BackboneConfig(first_conv_channels=4, growth_rate=2, layers_per_dense_block=1, n_pool=1,
                         dropout_rate=0.0, bottleneck_layers=1)
    model = build_model(variant, cfg).double().eval()
    for m in model.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.running_mean.uniform_(-0.5, 0.5)
            m.running_var.uniform_(0.5, 2.0)
    x = torch.zeros(1, variant.in_channels, 48, 48, dtype=torch.float64)
    x[..., 12:36, 12:36] = torch.randn(1, variant.in_channels, 24, 24, dtype=torch.float64)
    shift = 2 * cfg.downsample_factor
    xs = torch.roll(x, shifts=(shift, shift), dims=(2, 3))
    with torch.no_grad():
        out, outs = model(x), model(xs)
    pairs = [(out.prob, outs.prob), (out.field, outs.field)] if isinstance(out, MultitaskOutput) \
        else [(out, outs)]
    margin = 12
    for a, b in pairs:
        interior_a = a[..., margin:48 - margin - shift, margin:48 - margin - shift]
        interior_b = b[..., margin + shift:48 - margin, margin + shift:48 - margin]
        assert (interior_a - interior_b).abs().max() < 1e-5


def _central(fn, p, eps=1e-6):
    grad = torch.zeros_like(p)
    flat, gflat = p.data.view(-1), grad.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + eps
        hi = fn()
        flat[k] = orig - eps
        lo = fn()
        flat[k] = orig
        gflat[k] = (hi - lo) / (2 * eps)
    return grad


@pytest.mark.parametrize("variant", [ModelVariant.STATIC, ModelVariant.MULTITASK])
def test_backbone_gradients_match_finite_differences(variant):
    from longiseg.losses import LossConfig, multitask_loss, seg_loss_mse
    from longiseg.warp import max_relative_error

    torch.manual_seed(1)
    cfg = BackboneConfig(first_conv_channels=2, growth_rate=2, layers_per_dense_block=1, n_pool=1,
                         dropout_rate=0.0, bottleneck_layers=1)
    model = build_model(variant, cfg).double().eval()
    if variant is ModelVariant.MULTITASK:
        nn.init.normal_(model.reg_decoder.head.weight, std=0.1)
    gen = torch.Generator().manual_seed(2)
    x = torch.randn(1, variant.in_channels, 4, 4, generator=gen, dtype=torch.float64)
    gt = (torch.rand(1, 1, 4, 4, generator=gen) > 0.5).double()

    def loss():
        out = model(x)
        if variant is ModelVariant.MULTITASK:
            return multitask_loss(out.prob, gt, x[:, :2], x[:, 2:], out.field, LossConfig(0.1)).total
        return seg_loss_mse(out, gt)

    model.zero_grad()
    loss().backward()
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            numeric = _central(lambda: loss().item(), p)
            worst = max(worst, max_relative_error(p.grad, numeric))
    assert worst < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    model = build_model("multitask", TINY_BACKBONE)
    opt = torch.optim.Adam(model.parameters(), amsgrad=True)
    path = tmp_path / "m.pt"
    save_checkpoint(path, model, opt, epoch=3, step=17)
    loaded, payload = load_checkpoint(path)
    assert payload["epoch"] == 3 and payload["step"] == 17
    for (n1, a), (n2, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)


def test_checkpoint_mismatch_is_error(tmp_path):
    model = build_model("static", TINY_BACKBONE)
    path = tmp_path / "m.pt"
    save_checkpoint(path, model)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, variant="multitask")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, cfg=BackboneConfig())
