import struct

import numpy as np
import pytest
import torch

from msaupaf import autodiff as ad


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def away_from_zero(*shape, seed=0):
    x = rand(*shape, seed=seed)
    return x + 0.5 * torch.sign(x)


class TestConv2d:
    def test_identity_kernel(self):
        x = rand(1, 3, 3)
        y = ad.conv2d(x, torch.ones(1, 1, 1, 1, dtype=torch.float64))
        assert torch.equal(y, x)

    def test_hand_summation(self):
        y = ad.conv2d(torch.ones(1, 3, 3), torch.ones(1, 1, 3, 3))
        assert y.shape == (1, 3, 3)
        assert y[0, 1, 1] == 9 and y[0, 0, 0] == 4 and y[0, 0, 1] == 6

    def test_stride_output_size(self):
        y = ad.conv2d(rand(1, 2, 7, 9), rand(4, 2, 3, 3), stride=2, padding=0)
        assert y.shape == (1, 4, (7 - 3) // 2 + 1, (9 - 3) // 2 + 1)

    def test_channel_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(rand(1, 2, 4, 4), rand(3, 5, 3, 3))

    def test_even_kernel_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d(rand(1, 2, 4, 4), rand(3, 2, 2, 2))

    def test_gradient(self):
        r = ad.grad_check(ad.conv2d, [rand(2, 3, 6, 5), rand(4, 3, 3, 3, seed=1), rand(4, seed=2)])
        assert r.max_rel_error < 1e-4 and r.n_excluded == 0

    def test_bit_deterministic(self):
        x, w = rand(1, 4, 8, 8).float(), rand(4, 4, 3, 3, seed=3).float()
        assert torch.equal(ad.conv2d(x, w), ad.conv2d(x, w))


class TestPrimitives:
    def test_softmax_symmetric(self):
        y = ad.softmax_channels(torch.zeros(1, 2, 1, 1))
        assert y.flatten().tolist() == [0.5, 0.5]

    def test_max_pool_tie_goes_to_first(self):
        x = torch.tensor([[[[1.0, 1.0], [1.0, 0.0]]]], requires_grad=True)
        ad.max_pool2(x).sum().backward()
        assert x.grad.flatten().tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_max_pool_routes_to_argmax(self):
        x = torch.tensor([[[[0.0, 2.0, 5.0, 1.0], [3.0, 1.0, 0.0, 0.0]]]], requires_grad=True)
        ad.max_pool2(x).sum().backward()
        assert x.grad.flatten().tolist() == [0, 0, 1, 0, 1, 0, 0, 0]

    def test_upsample_pool_constant(self):
        x = torch.full((1, 3, 4, 6), 2.5)
        assert torch.equal(ad.nearest_upsample(ad.max_pool2(x)), x)

    def test_pool_odd_size(self):
        with pytest.raises(ad.ShapeError):
            ad.max_pool2(torch.zeros(1, 1, 3, 4))

    def test_add_distributes_unchanged(self):
        a, b = rand(1, 2, 3, 3).requires_grad_(), rand(1, 2, 3, 3, seed=1).requires_grad_()
        g = rand(1, 2, 3, 3, seed=2)
        ad.add(a, b).backward(g)
        assert torch.equal(a.grad, g) and torch.equal(b.grad, g)

    def test_add_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.add(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 4))

    def test_concat_splits_exactly(self):
        a, b = rand(1, 2, 3, 3).requires_grad_(), rand(1, 3, 3, 3, seed=1).requires_grad_()
        g = rand(1, 5, 3, 3, seed=2)
        ad.channel_concat([a, b]).backward(g)
        assert torch.equal(a.grad, g[:, :2]) and torch.equal(b.grad, g[:, 2:])

    def test_concat_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.channel_concat([torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 4, 3)])

    def test_matmul_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.global_matmul(torch.zeros(1, 2, 3), torch.zeros(1, 4, 5))

    @pytest.mark.parametrize(
        "fn, make",
        [
            (ad.relu, lambda: [away_from_zero(2, 3, 4, 4)]),
            (ad.leaky_relu, lambda: [away_from_zero(2, 3, 4, 4)]),
            (ad.softmax_channels, lambda: [rand(2, 4, 3, 3)]),
            (ad.max_pool2, lambda: [rand(1, 4, 8, 8)]),
            (ad.nearest_upsample, lambda: [rand(1, 4, 4, 4)]),
            (lambda a, b: ad.channel_concat([a, b]), lambda: [rand(1, 2, 4, 4), rand(1, 3, 4, 4, seed=1)]),
            (ad.add, lambda: [rand(1, 4, 8, 8), rand(1, 4, 8, 8, seed=1)]),
            (lambda x: ad.scalar_mul(x, -1.7), lambda: [rand(1, 4, 8, 8)]),
            (ad.global_matmul, lambda: [rand(2, 3, 5), rand(2, 5, 4, seed=1)]),
        ],
    )
    def test_primitive_gradients(self, fn, make):
        r = ad.grad_check(fn, make())
        assert r.max_rel_error < 1e-4
        assert r.n_checked > 0


class TestGradCheck:
    def test_relu_away_from_kink(self):
        r = ad.grad_check(ad.relu, [away_from_zero(1, 2, 4, 4)])
        assert r.max_rel_error < 1e-7

    def test_chain(self):
        w = rand(3, 2, 3, 3, seed=1)
        r = ad.grad_check(lambda x: ad.max_pool2(ad.relu(ad.conv2d(x, w))), [rand(1, 2, 8, 8)])
        assert r.max_rel_error < 1e-4

    def test_kink_excluded(self):
        r = ad.grad_check(ad.relu, [torch.zeros(1, 1, 2, 2)])
        assert r.n_excluded == 4 and r.n_checked == 0 and r.max_rel_error == 0.0

    def test_detects_wrong_gradient(self):
        class Bad(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x * x

            @staticmethod
            def backward(ctx, g):
                return g  # should be 2 x g

        r = ad.grad_check(Bad.apply, [away_from_zero(5)])
        assert r.max_rel_error > 0.1


class TestInit:
    def test_seeded_and_scaled(self):
        a = ad.he_init((64, 32, 3, 3), torch.Generator().manual_seed(0))
        b = ad.he_init((64, 32, 3, 3), torch.Generator().manual_seed(0))
        assert torch.equal(a, b)
        assert abs(a.std().item() - np.sqrt(2 / (32 * 9))) < 0.01


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {"a.weight": rand(2, 3).float(), "b": rand(4, seed=1).float()}
        ad.save_checkpoint(params, tmp_path / "m.mspw")
        back = ad.load_checkpoint(tmp_path / "m.mspw")
        assert list(back) == ["a.weight", "b"]
        for k in params:
            np.testing.assert_array_equal(back[k], params[k].numpy())

    def test_byte_layout(self, tmp_path):
        ad.save_checkpoint({"w": np.array([[1.5, -2.0]], dtype=np.float32)}, tmp_path / "m")
        expected = (
            b"MSPW" + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w"
            + struct.pack("<III", 2, 1, 2) + struct.pack("<2f", 1.5, -2.0)
        )
        assert (tmp_path / "m").read_bytes() == expected

    def test_rejects_bad_files(self, tmp_path):
        p = tmp_path / "m"
        p.write_bytes(b"NOPE")
        with pytest.raises(ValueError):
            ad.load_checkpoint(p)
        ad.save_checkpoint({"w": np.zeros((3, 3), np.float32)}, p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(ValueError):
            ad.load_checkpoint(p)
