import random
from dataclasses import replace

import numpy as np
import pytest

from wavediff.accounting import UnsupportedLayer, count_costs, flops_ratio, live_costs
from wavediff.networks import (PRESETS, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
                               discriminator_spec_for)
from wavediff.rng import RngStream
from wavediff.tensor import Tensor

PUBLISHED_CIFAR_RATIO = 7.05 / 1.67


def test_single_conv_closed_form():
    from wavediff import tensor as T
    with T.count_flops() as c:
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), padding=1)
    assert c.total == 2 * 1 * 1 * 9 * 16 == 288


def test_totals_are_row_sums():
    rep = count_costs(PRESETS["desk"].spec)
    assert rep.params == sum(r.params for r in rep.rows)
    assert rep.flops == sum(r.flops for r in rep.rows)
    assert rep.activation_mem == max(r.live_bytes for r in rep.rows)


def test_order_invariance():
    rep = count_costs(PRESETS["desk"].spec)
    rows = list(rep.rows)
    random.Random(0).shuffle(rows)
    assert sum(r.flops for r in rows) == rep.flops
    assert sum(r.params for r in rows) == rep.params
    assert sorted(rep.by_kind().items()) == sorted(
        {k: sum(r.flops for r in rows if r.kind == k) for k in rep.by_kind()}.items())


@pytest.mark.parametrize("name", ["tiny", "smoke", "desk", "desk-gray"])
def test_matches_live_network(name):
    spec = PRESETS[name].spec
    G = Generator(spec, RngStream(0, "init"))
    r = np.random.default_rng(0)
    y = Tensor(r.normal(size=(1,) + spec.input_shape()))
    z = Tensor(r.normal(size=(1, spec.latent_dim)))
    rep = count_costs(spec)
    assert live_costs(G, y, z, np.array([1])) == (rep.params, rep.flops)
    px = spec.pixel_counterpart()
    Gp = Generator(px, RngStream(0, "init"))
    yp = Tensor(r.normal(size=(1,) + px.input_shape()))
    assert live_costs(Gp, yp, z, np.array([1])) == (count_costs(px).params, count_costs(px).flops)
    dspec = discriminator_spec_for(spec)
    D = Discriminator(dspec, RngStream(0, "init"))
    assert live_costs(D, y, y, np.array([1])) == (count_costs(dspec).params, count_costs(dspec).flops)


def test_rows_name_live_parameters():
    spec = PRESETS["tiny"].spec
    G = Generator(spec, RngStream(0, "init"))
    live = dict(G.named_parameters())
    for row in count_costs(spec).rows:
        if row.params:
            owned = sum(p.size for n, p in live.items() if n.startswith(row.name + "."))
            assert owned == row.params, row.name


def test_per_layer_spatial_reduction():
    spec = replace(PRESETS["desk"].spec, attention_resolutions=())
    half = count_costs(spec, (12, 16, 16))
    full = count_costs(spec, (12, 32, 32))
    convs_half = {r.name: r for r in half.rows if r.kind == "conv"}
    convs_full = {r.name: r for r in full.rows if r.kind == "conv"}
    assert convs_half.keys() == convs_full.keys() and convs_half
    for name, r in convs_half.items():
        assert convs_full[name].flops == 4 * r.flops, name
        assert convs_full[name].params == r.params


def test_desk_ratio():
    spec = PRESETS["desk"].spec
    assert flops_ratio(spec.pixel_counterpart(), spec) >= 3.0


def test_cifar_published_ratio():
    ratio = flops_ratio(PRESETS["cifar10-pixel"].spec, PRESETS["cifar10"].spec)
    assert abs(ratio - PUBLISHED_CIFAR_RATIO) <= 0.25 * PUBLISHED_CIFAR_RATIO


def test_memory_ratio_favours_wavelet():
    spec = PRESETS["desk"].spec
    assert count_costs(spec.pixel_counterpart()).activation_mem > count_costs(spec).activation_mem


def test_unsupported():
    with pytest.raises(UnsupportedLayer):
        count_costs(object())
    with pytest.raises(UnsupportedLayer):
        count_costs(PRESETS["desk"].spec, (3, 16, 16))


def test_discriminator_retarget():
    d = DiscriminatorSpec(4, 8, 8, (1, 1), 32)
    assert count_costs(d, (4, 16, 16)).flops == count_costs(DiscriminatorSpec(4, 16, 8, (1, 1), 32)).flops


def test_table_lists_every_row():
    rep = count_costs(PRESETS["tiny"].spec)
    assert len(rep.table().splitlines()) == len(rep.rows) + 3
    assert rep.row("conv_in").kind == "conv"
