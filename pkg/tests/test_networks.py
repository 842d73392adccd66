import numpy as np
import pytest

from wavediff import tensor as T
from wavediff.accounting import count_costs
from wavediff.networks import (PRESETS, BlockState, Discriminator, FreqBottleneck, FreqDownBlock,
                               FreqUpBlock, Generator, GeneratorSpec, ResBlock, discriminator_spec_for)
from wavediff.rng import RngStream
from wavediff.tensor import Tensor
from wavediff.wavelet import dwt, dwt_packed, idwt_packed

TDIM, ZDIM = 8, 6


def make_identity(block: ResBlock):
    """Zero the second conv so the block returns its input unchanged."""
    block.conv1.weight.data[...] = 0.0
    block.conv1.bias.data[...] = 0.0
    assert block.skip is None


def embeds(rng, B=2):
    return Tensor(rng.normal(size=(B, TDIM))), Tensor(rng.normal(size=(B, ZDIM)))


class TestFreqDown:
    def test_shapes(self, rng):
        blk = FreqDownBlock(4, TDIM, ZDIM, RngStream(0, "init"))
        ll, highs = blk(Tensor(rng.normal(size=(2, 4, 6, 8))), *embeds(rng))
        assert ll.shape == (2, 4, 3, 4)
        assert highs.shape == (2, 12, 3, 4)

    def test_constant_map_has_no_highs(self, rng):
        blk = FreqDownBlock(4, TDIM, ZDIM, RngStream(0, "init"))
        make_identity(blk.res)
        x = np.broadcast_to(rng.normal(size=(2, 4, 1, 1)), (2, 4, 4, 4)).copy()
        ll, highs = blk(Tensor(x), *embeds(rng))
        assert np.all(highs.data == 0.0)
        np.testing.assert_allclose(ll.data, 2 * x[:, :, :2, :2], atol=1e-14)

    def test_odd_dims(self, rng):
        blk = FreqDownBlock(4, TDIM, ZDIM, RngStream(0, "init"))
        with pytest.raises(T.ShapeError):
            blk(Tensor(np.zeros((1, 4, 5, 4))), *embeds(rng, 1))


class TestFreqUp:
    def test_zero_high_oracle(self, rng):
        c = 4
        blk = FreqUpBlock(c, c, c, c, TDIM, ZDIM, RngStream(0, "init"))
        w = np.zeros((4 * c, 4 * c, 1, 1))
        w[:c, :c, 0, 0] = np.eye(c)  # ll path passes through, stored highs are dropped
        blk.fuse.weight.data[...] = w
        blk.fuse.bias.data[...] = 0.0
        F = rng.normal(size=(2, c, 8, 8))
        ll, highs = dwt_packed(F)[:, :c], Tensor(np.zeros((2, 3 * c, 4, 4)))
        up = blk.upsample(ll, highs).data
        # ll-only reconstruction: each 2x2 block is the block mean
        oracle = F.reshape(2, c, 4, 2, 4, 2).mean(axis=(3, 5), keepdims=True)
        oracle = np.broadcast_to(oracle, (2, c, 4, 2, 4, 2)).reshape(2, c, 8, 8)
        np.testing.assert_allclose(up, oracle, atol=1e-12)

    def test_full_highs_roundtrip(self, rng):
        c = 3
        blk = FreqUpBlock(c, c, c, c, TDIM, ZDIM, RngStream(0, "init"))
        blk.fuse.weight.data[...] = np.eye(4 * c).reshape(4 * c, 4 * c, 1, 1)
        blk.fuse.bias.data[...] = 0.0
        F = rng.normal(size=(1, c, 4, 4))
        y = dwt_packed(F)
        np.testing.assert_allclose(blk.upsample(y[:, :c], y[:, c:]).data, F, atol=1e-12)

    def test_output_shape(self, rng):
        blk = FreqUpBlock(4, 4, 5, 6, TDIM, ZDIM, RngStream(0, "init"))
        out = blk(Tensor(rng.normal(size=(2, 4, 3, 3))), Tensor(rng.normal(size=(2, 12, 3, 3))),
                  Tensor(rng.normal(size=(2, 5, 6, 6))), *embeds(rng))
        assert out.shape == (2, 6, 6, 6)

    def test_missing_stash(self, rng):
        blk = FreqUpBlock(4, 4, 4, 4, TDIM, ZDIM, RngStream(0, "init"))
        with pytest.raises(T.ShapeError):
            blk(Tensor(np.zeros((1, 4, 2, 2))), None, Tensor(np.zeros((1, 4, 4, 4))), *embeds(rng, 1))


class TestBottleneck:
    def test_identity_resnet_is_identity(self, rng):
        blk = FreqBottleneck(4, TDIM, ZDIM, RngStream(0, "init"))
        make_identity(blk.res)
        x = rng.normal(size=(2, 4, 4, 4))
        np.testing.assert_allclose(blk(Tensor(x), *embeds(rng)).data, x, atol=1e-12)

    def test_highs_pass_through(self, rng):
        blk = FreqBottleneck(4, TDIM, ZDIM, RngStream(1, "init"))
        x = rng.normal(size=(2, 4, 8, 8))
        out = blk(Tensor(x), *embeds(rng))
        for a, b in zip(dwt(out).highs, dwt(x).highs):
            assert np.abs(a.data - b.data).max() <= 1e-10
        assert np.abs(dwt(out).ll.data - dwt(x).ll.data).max() > 1e-3


def test_block_state_lifo():
    s = BlockState()
    a, b = Tensor(np.zeros(1)), Tensor(np.ones(1))
    s.push(a)
    s.push(b)
    assert s.pop() is b and s.pop() is a
    s.assert_drained()
    with pytest.raises(RuntimeError):
        s.pop()
    s.push(a)
    with pytest.raises(RuntimeError):
        s.assert_drained()


def gen_inputs(spec, B=2, seed=0):
    r = np.random.default_rng(seed)
    return (Tensor(r.normal(size=(B,) + spec.input_shape())), Tensor(r.normal(size=(B, spec.latent_dim))),
            np.array([1, 2] * (B // 2) + [1] * (B % 2)))


@pytest.mark.parametrize("name", ["tiny", "smoke", "desk", "desk-gray"])
def test_generator_contract(name):
    spec = PRESETS[name].spec
    G = Generator(spec, RngStream(0, "init"))
    y, z, t = gen_inputs(spec)
    with T.no_grad():
        out = G(y, z, t)
    assert out.shape == y.shape
    st = G.last_state
    assert st.pushed == st.popped == spec.levels - 1
    assert len(st) == 0
    assert count_costs(spec).params == G.num_parameters()


def test_generator_deterministic_and_conditioned():
    spec = PRESETS["tiny"].spec
    G = Generator(spec, RngStream(0, "init"))
    G.conv_out.weight.data[...] = RngStream(1).normal(G.conv_out.weight.shape) * 0.1
    y, z, t = gen_inputs(spec)
    a, b = G(y, z, t).data, G(y, z, t).data
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(G(y, Tensor(z.data + 1), t).data, a)
    assert not np.allclose(G(y, z, t + 1).data, a)


def test_generator_zero_init_output():
    spec = PRESETS["tiny"].spec
    G = Generator(spec, RngStream(0, "init"))
    assert np.all(G(*gen_inputs(spec)).data == 0.0)


def test_generator_shape_errors():
    spec = PRESETS["tiny"].spec
    G = Generator(spec, RngStream(0, "init"))
    y, z, t = gen_inputs(spec)
    with pytest.raises(T.ShapeError):
        G(Tensor(np.zeros((2, 4, 6, 6))), z, t)
    with pytest.raises(T.ShapeError):
        G(y, Tensor(np.zeros((2, 3))), t)


def test_spec_validation():
    with pytest.raises(ValueError):
        GeneratorSpec(resolution=30, channel_multipliers=(1, 2, 2))
    with pytest.raises(ValueError):
        GeneratorSpec(channel_multipliers=())
    spec = GeneratorSpec()
    assert spec.input_shape() == (12, 16, 16)
    assert spec.time_embed_channels == 128
    px = spec.pixel_counterpart()
    assert px.input_shape() == (3, 32, 32) and px.channels == spec.channels


class TestDiscriminator:
    def test_logits(self):
        spec = discriminator_spec_for(PRESETS["desk"].spec)
        D = Discriminator(spec, RngStream(0, "init"))
        r = np.random.default_rng(0)
        y = r.normal(size=(3, 12, 16, 16))
        out = D(y, r.normal(size=y.shape), np.array([1, 2, 4]))
        assert out.shape == (3,)
        assert np.all(np.isfinite(out.data))
        assert count_costs(spec).params == D.num_parameters()

    def test_pair_mismatch(self):
        D = Discriminator(discriminator_spec_for(PRESETS["tiny"].spec), RngStream(0, "init"))
        with pytest.raises(T.ShapeError):
            D(np.zeros((1, 4, 8, 8)), np.zeros((1, 4, 4, 4)), np.array([1]))

    def test_depends_on_both_inputs_and_t(self):
        D = Discriminator(discriminator_spec_for(PRESETS["tiny"].spec), RngStream(0, "init"))
        r = np.random.default_rng(1)
        a, b = r.normal(size=(2, 4, 8, 8)), r.normal(size=(2, 4, 8, 8))
        base = D(a, b, np.array([1, 1])).data
        assert not np.allclose(D(b, a, np.array([1, 1])).data, base)
        assert not np.allclose(D(a, b, np.array([2, 2])).data, base)


def test_init_is_seeded():
    spec = PRESETS["tiny"].spec
    a = Generator(spec, RngStream(3, "init")).state_dict()
    b = Generator(spec, RngStream(3, "init")).state_dict()
    c = Generator(spec, RngStream(4, "init")).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
