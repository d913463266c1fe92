"""Tests for the registration U-Net: initialization, shapes and gradients."""

import numpy as np
import pytest

from registration.errors import InvalidShapeError
from registration.selftest import composite_gradient_error
from registration.tensor_core import Graph, Tensor, tensor_sum
from registration.unet import ArchDescriptor, ModelParams, forward, init, predict_flow
from registration.warp_field import Image
from utils.config_utils import ConfigurationError


class TestArchitecture:

    def test_default_layout(self):
        arch = ArchDescriptor()
        assert arch.depth == 4
        assert arch.stride_multiple == 16
        names = [name for name, *_ in arch.layer_specs()]
        assert names == ["enc0", "enc1", "enc2", "enc3", "dec0", "dec1", "dec2", "dec3", "flow"]

    def test_decoder_inputs_include_skips(self):
        shapes = ArchDescriptor().kernel_shapes()
        assert shapes["enc0"] == (16, 2, 3, 3)
        assert shapes["dec0"] == (32, 32 + 32, 3, 3)
        assert shapes["dec3"] == (16, 32 + 2, 3, 3)
        assert shapes["flow"] == (2, 16, 3, 3)

    def test_mismatched_levels(self):
        with pytest.raises(ConfigurationError):
            ArchDescriptor((4, 4), (4,))


class TestInit:

    def test_same_seed_is_bit_identical(self, tiny_arch):
        a, b = init(tiny_arch, 3), init(tiny_arch, 3)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_different_seeds_differ(self, tiny_arch):
        a, b = init(tiny_arch, 3), init(tiny_arch, 4)
        assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))

    def test_flow_layer_near_zero(self):
        params = init(ArchDescriptor(), 0)
        assert np.abs(params.layer("flow").kernel.data).max() <= 1e-5
        assert np.all(params.layer("flow").bias.data == 0.0)

    def test_copy_is_independent(self, tiny_arch):
        params = init(tiny_arch, 0)
        clone = params.copy()
        clone.layer("enc0").kernel.data[...] = 0.0
        assert np.abs(params.layer("enc0").kernel.data).max() > 0

    def test_from_arrays_checks_shapes(self, tiny_arch):
        arrays = [(l.name, l.kernel.data, l.bias.data) for l in init(tiny_arch, 0).layers]
        arrays[0] = ("enc0", np.zeros((4, 2, 5, 5)), np.zeros(4))
        with pytest.raises(ConfigurationError):
            ModelParams.from_arrays(tiny_arch, 0, arrays)

    def test_assign_from(self, tiny_arch):
        target, source = init(tiny_arch, 0), init(tiny_arch, 1)
        target.assign_from(source)
        for x, y in zip(target.arrays(), source.arrays()):
            np.testing.assert_array_equal(x, y)


class TestForward:

    def test_output_shape_full_network(self, rng):
        params = init(ArchDescriptor(), 0)
        moving = rng.uniform(size=(64, 64))
        flow = forward(params, moving, rng.uniform(size=(64, 64)))
        assert flow.shape == (1, 2, 64, 64)

    def test_fresh_network_predicts_near_zero(self, speckle):
        params = init(ArchDescriptor(), 0)
        flow = predict_flow(params, speckle, speckle)
        assert flow.shape == speckle.shape
        assert np.abs(flow.vectors).max() < 1e-2

    def test_indivisible_frames_ask_for_padding(self, tiny_arch):
        params = init(tiny_arch, 0)
        with pytest.raises(InvalidShapeError, match="pad"):
            forward(params, np.zeros((10, 12)), np.zeros((10, 12)))

    def test_frames_must_match(self, tiny_arch):
        params = init(tiny_arch, 0)
        with pytest.raises(InvalidShapeError):
            forward(params, np.zeros((8, 8)), np.zeros((16, 16)))

    def test_predict_does_not_record(self, tiny_arch, speckle):
        params = init(tiny_arch, 0)
        with Graph() as graph:
            predict_flow(params, speckle, speckle, scale="1/2")
            assert len(graph) == 0

    def test_predict_tags_scale(self, tiny_arch, speckle):
        flow = predict_flow(init(tiny_arch, 0), speckle, speckle, scale=0.5)
        assert flow.scale == 0.5

    def test_all_parameters_receive_gradients(self, tiny_arch, rng):
        params = init(tiny_arch, 0)
        with Graph() as graph:
            flow = forward(params, Tensor(rng.uniform(size=(1, 1, 8, 8))), Tensor(rng.uniform(size=(1, 1, 8, 8))))
            graph.backward(tensor_sum(flow * rng.normal(size=flow.shape)))
        for tensor in params.tensors():
            assert tensor.grad is not None and tensor.grad.shape == tensor.shape

    def test_composite_gradient_check(self):
        assert composite_gradient_error(seed=0) < 1e-4
