import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import blob_sample, threshold_stub
from longiseg.infer import ProbabilityVolume, fuse_and_threshold, predict_orientation, segment_subject
from longiseg.metrics import evaluate
from longiseg.nets import TINY_BACKBONE, build_model
from longiseg.volumes import PLANES, Layout, normalize_sample


class ConstantStub(torch.nn.Module):
    def __init__(self, value, layout=Layout.STATIC, factor=4):
        super().__init__()
        self.value = value
        self.layout = layout
        self.downsample_factor = factor
        self.dummy = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x):
        return torch.full((x.shape[0], 1, *x.shape[2:]), self.value, dtype=x.dtype)


class SquashChannelStub(ConstantStub):
    """Sigmoid of input channel ``c``; checks the padding must not leak."""

    def __init__(self, channel=0, **kw):
        super().__init__(0.0, **kw)
        self.channel = channel

    def forward(self, x):
        return torch.sigmoid(x[:, self.channel:self.channel + 1])


def ramp_sample(sample_factory, shape=(5, 6, 7)):
    rng = np.random.default_rng(0)
    values = [rng.normal(size=shape) for _ in range(4)]
    return sample_factory(shape=shape, values=values)


@pytest.mark.parametrize("plane", PLANES)
def test_constant_stub_fills_volume(sample_factory, plane):
    sample = ramp_sample(sample_factory)
    prob = predict_orientation(ConstantStub(0.7), sample, plane)
    assert prob.data.shape == sample.shape
    assert np.all(prob.data == np.float64(np.float32(0.7)))
    assert prob.orientation == plane.value


@pytest.mark.parametrize("plane", PLANES)
@pytest.mark.parametrize("channel", [0, 1])
def test_squash_stub_reassembles_channel(sample_factory, plane, channel):
    sample = ramp_sample(sample_factory)
    stub = SquashChannelStub(channel).double()
    prob = predict_orientation(stub, sample, plane)
    expected = 1 / (1 + np.exp(-sample.channel_volumes(Layout.STATIC)[channel]))
    np.testing.assert_allclose(prob.data, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("plane", PLANES)
def test_every_voxel_written_once(sample_factory, plane):
    sample = ramp_sample(sample_factory)
    counter = np.zeros(sample.shape, dtype=np.int64)
    predict_orientation(ConstantStub(0.2), sample, plane, batch_size=3, write_counter=counter)
    assert np.all(counter == 1)


def test_batching_does_not_change_results(sample_factory):
    sample = ramp_sample(sample_factory, shape=(9, 8, 12))
    torch.manual_seed(0)
    model = build_model("static", TINY_BACKBONE).eval()
    one = predict_orientation(model, sample, "coronal", batch_size=1)
    many = predict_orientation(model, sample, "coronal", batch_size=7)
    np.testing.assert_allclose(one.data, many.data, rtol=0, atol=1e-6)


def test_real_model_deterministic(sample_factory):
    sample = ramp_sample(sample_factory)
    torch.manual_seed(1)
    model = build_model("longitudinal", TINY_BACKBONE).eval()
    a = segment_subject(model, sample)
    b = segment_subject(model, sample)
    assert np.array_equal(a.prob.data, b.prob.data)
    assert np.array_equal(a.mask.data, b.mask.data)


def vol(value, shape=(3, 4, 5)):
    return ProbabilityVolume(np.full(shape, value, dtype=np.float64), "axial")


def test_tie_is_background():
    mask, fused = fuse_and_threshold(vol(0.9), vol(0.3), vol(0.3), tau=0.5)
    assert np.all(fused.data == 0.5)
    assert not mask.data.any()


def test_unanimous_foreground():
    mask, _ = fuse_and_threshold(vol(1.0), vol(1.0), vol(1.0))
    assert mask.data.all()


def test_two_of_three():
    mask, fused = fuse_and_threshold(vol(1.0), vol(1.0), vol(0.0))
    np.testing.assert_allclose(fused.data, 2 / 3)
    assert mask.data.all()


def test_constant_stubs_fuse_to_constant():
    _, fused = fuse_and_threshold(vol(0.25), vol(0.25), vol(0.25))
    assert np.all(fused.data == 0.25)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_and_threshold(vol(0.1), vol(0.1), vol(0.1, shape=(3, 4, 6)))


def test_probability_volume_range_checked():
    with pytest.raises(ValueError):
        ProbabilityVolume(np.full((2, 2, 2), 1.5), "axial")


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), tau=st.floats(0.05, 0.95))
def test_fusion_permutation_invariant(seed, tau):
    rng = np.random.default_rng(seed)
    vols = [ProbabilityVolume(rng.random((4, 3, 5)), "axial") for _ in range(3)]
    ref_mask, ref_fused = fuse_and_threshold(*vols, tau=tau)
    for perm in itertools.permutations(vols):
        mask, fused = fuse_and_threshold(*perm, tau=tau)
        assert np.array_equal(mask.data, ref_mask.data)
        assert np.array_equal(fused.data, ref_fused.data)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), tau=st.floats(0.05, 0.95))
def test_same_view_thrice_is_plain_threshold(seed, tau):
    p = ProbabilityVolume(np.random.default_rng(seed).random((4, 4, 4)), "axial")
    mask, _ = fuse_and_threshold(p, p, p, tau=tau)
    assert np.array_equal(mask.data, (p.data > tau).astype(np.uint8))


def test_perfect_stub_recovers_ground_truth():
    sample = blob_sample(0)
    seg = segment_subject(threshold_stub("static", 1.5), normalize_sample(sample))
    assert np.array_equal(seg.mask.data, sample.gt_mask_ti.data)
    assert evaluate(seg.mask, sample.gt_mask_ti).overall == 1.0
    assert set(seg.timing["seconds_per_orientation"]) == {"axial", "coronal", "sagittal"}
    assert seg.timing["seconds_total"] >= sum(seg.timing["seconds_per_orientation"].values())


def test_all_zero_stub_gives_empty_mask(sample_factory):
    seg = segment_subject(ConstantStub(0.0), ramp_sample(sample_factory))
    assert not seg.mask.data.any()
