import math

import numpy as np
import pytest
from scipy import stats

from geovox import AIR
from geovox import geostory as G
from geovox.errors import ConfigError

DIMS = (16, 16, 16)
R16 = G.StoryRanges().for_grid(16)


def flat_story(thick=(4.0, 4.0, 4.0, 4.0), facies=(2, 3, 4, 5), extra=()):
    return G.GeoStory(0, (G.Deposit(tuple(thick), tuple(facies)),) + tuple(extra), DIMS)


def test_catalog():
    assert list(G.FACIES) == list(range(1, 10))
    assert G.FACIES[AIR] == "Air"


def test_sample_story_deterministic():
    a = G.sample_story(7, R16, DIMS)
    b = G.sample_story(7, R16, DIMS)
    assert a == b
    assert G.sample_story(8, R16, DIMS) != a


def test_story_dict_roundtrip():
    s = G.sample_story(3, R16, DIMS)
    assert G.GeoStory.from_dict(s.to_dict()) == s


def test_event_order_enforced():
    with pytest.raises(ConfigError):
        G.GeoStory(0, (G.Deposit((4.0,), (2,)), G.Fault((1, 1, 1), (1, 0, 0), 1.0), G.Tilt(0, 5)), DIMS)


def test_parameters_within_ranges():
    for seed in range(20):
        s = G.sample_story(seed, R16, DIMS)
        tilt = s.of_kind("tilt")[0]
        assert R16.tilt_dip[0] <= tilt.dip_deg <= R16.tilt_dip[1]
        assert len(s.of_kind("fault")) == 2
        for f in s.of_kind("fault"):
            assert R16.fault_throw[0] <= f.throw <= R16.fault_throw[1]
        d = s.of_kind("dike")[0]
        assert d.half_thickness < d.r_phyllic < d.r_argillic < d.r_propylitic
        dep = s.of_kind("deposit")[0]
        assert all(R16.thickness[0] <= t <= R16.thickness[1] for t in dep.thicknesses)
        assert all(a != b for a, b in zip(dep.facies, dep.facies[1:]))


def test_degenerate_ranges_share_parameters():
    fixed = R16.with_overrides(tilt_dip=(10.0, 10.0), fold_amplitude=(1.5, 1.5), fault_throw=(2.0, 2.0))
    a = G.sample_story(1, fixed, DIMS)
    b = G.sample_story(2, fixed, DIMS)
    assert a.of_kind("tilt")[0].dip_deg == b.of_kind("tilt")[0].dip_deg == 10.0
    assert a.of_kind("fold")[0].amplitude == b.of_kind("fold")[0].amplitude == 1.5
    assert [f.throw for f in a.of_kind("fault")] == [f.throw for f in b.of_kind("fault")] == [2.0, 2.0]


def test_bad_ranges():
    with pytest.raises(ConfigError):
        R16.with_overrides(tilt_dip=(10.0, 5.0))
    with pytest.raises(ConfigError):
        G.StoryRanges.from_dict({})
    with pytest.raises(ConfigError):
        G.sample_story(0, None, DIMS)


@pytest.mark.parametrize("key,getter", [
    ("tilt_dip", lambda s: s.of_kind("tilt")[0].dip_deg),
    ("fold_amplitude", lambda s: s.of_kind("fold")[0].amplitude),
    ("fold_wavelength", lambda s: s.of_kind("fold")[0].wavelength),
    ("fault_throw", lambda s: s.of_kind("fault")[0].throw),
    ("dike_half_thickness", lambda s: s.of_kind("dike")[0].half_thickness),
])
def test_parameters_uniform_ks(key, getter):
    lo, hi = getattr(R16, key)
    vals = [getter(G.sample_story(seed, R16, DIMS)) for seed in range(100)]
    p = stats.kstest(vals, stats.uniform(loc=lo, scale=hi - lo).cdf).pvalue
    assert p > 0.01


def test_flat_layers_exact_boundaries():
    vol = G.realize(flat_story())
    for z in range(16):
        assert np.all(vol[:, :, z] == (2, 3, 4, 5)[z // 4])


def test_layer_fraction_equals_thickness():
    vol = G.realize(flat_story(thick=(3.0, 5.0, 6.0, 2.0)))
    counts = np.bincount(vol.ravel(), minlength=10)
    assert list(counts[2:6] / vol.size) == [3 / 16, 5 / 16, 6 / 16, 2 / 16]


def test_boundary_tie_goes_deeper():
    dep = G.Deposit((2.0, 2.0), (2, 3))
    labels = G.layer_labels(np.array([1.5, 2.0, 2.5]), dep)
    assert labels.tolist() == [2, 2, 3]


def test_identity_events():
    base = G.realize(flat_story())
    extra = (G.Tilt(30.0, 0.0), G.Fold(0.0, 20.0, 1.0, 5.0),
             G.Fault((8.0, 8.0, 8.0), (1.0, 0.0, 0.3), 0.0))
    assert np.array_equal(G.realize(flat_story(extra=extra)), base)


def test_fault_offset_measured():
    h = 2.0
    fault = G.Fault((8.0, 8.0, 8.0), (1.0, 0.0, 0.0), h)
    vol = G.realize(flat_story(extra=(fault,)))

    def interface(col):
        # lowest z where facies 3 (second layer) starts
        return int(np.argmax(col == 3))

    left = interface(vol[3, 8])
    right = interface(vol[12, 8])
    assert left - right == h


def test_fold_displaces_sinusoidally():
    fold = G.Fold(2.0, 16.0, 0.0, 0.0)
    vol = G.realize(flat_story(extra=(fold,)))
    zc = np.arange(16) + 0.5
    for i in range(16):
        x = i + 0.5
        expect = G.layer_labels(zc - 2.0 * np.sin(2 * math.pi * x / 16.0), G.Deposit((4.0,) * 4, (2, 3, 4, 5)))
        assert np.array_equal(vol[i, 5], expect)


def test_tilt_rotates_layers():
    vol = G.realize(flat_story(extra=(G.Tilt(90.0, 20.0),)))
    # dipping toward +x: a layer's top gets deeper as x increases
    first = [int(np.argmax(vol[i, 8] == 3)) for i in (2, 13)]
    assert first[1] < first[0]


def test_realize_deterministic_and_valid():
    s = G.sample_story(11, R16, DIMS)
    a = G.realize(s)
    b = G.realize(s)
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.uint8 and a.min() >= 1 and a.max() <= 9


def test_air_monotone_per_column():
    for seed in range(10):
        vol = G.realize(G.sample_story(seed, R16, DIMS))
        air = vol == AIR
        # once air going up, always air
        assert np.all(np.diff(air.astype(int), axis=2) >= 0)
        # at least 60% of each column is ground
        assert np.all((~air).sum(axis=2) >= 0.6 * 16 - 1)


def test_soil_veneer_on_top():
    vol = G.realize(G.sample_story(5, R16, DIMS))
    for i in range(16):
        for j in range(16):
            ground = np.nonzero(vol[i, j] != AIR)[0]
            assert vol[i, j, ground[-1]] == G.SOIL


# -- dike --------------------------------------------------------------------

def uniform_host(cat=4):
    return np.full(DIMS, cat, dtype=np.uint8)


def test_dike_zero_radii_unchanged():
    vol = G.realize(G.sample_story(2, R16, DIMS))
    dike = G.Dike((8.0, 8.0, 8.0), (1.0, 0.0, 0.0), 0.0, 0.0, 0.0, 0.0)
    assert np.array_equal(G.apply_dike_and_halos(vol, dike), vol)


def test_vertical_dike_slab_width():
    ht = 2.0
    dike = G.Dike((8.0, 8.0, 8.0), (1.0, 0.0, 0.0), ht, ht, ht + 1.0, ht + 2.0)
    out = G.apply_dike_and_halos(uniform_host(), dike)
    width = int(np.sum(out[:, 4, 4] == 9))
    assert abs(width - 2 * ht) <= 1
    assert np.sum(out[:, 4, 4] == 8) == 2
    # propylitic shell keeps host label
    assert set(np.unique(out)) == {4, 8, 9}


def test_halo_nesting():
    dike = G.Dike((7.3, 6.1, 8.0), G.plane_normal(35.0, 75.0), 1.0, 1.5, 3.0, 5.0)
    out = G.apply_dike_and_halos(uniform_host(), dike)
    n = np.asarray(dike.normal) / np.linalg.norm(dike.normal)
    x, y, z = G.voxel_centres(DIMS)
    d = np.abs((x - 7.3) * n[0] + (y - 6.1) * n[1] + (z - 8.0) * n[2])
    assert d[out == 9].max() < d[out == 8].min()


def test_dike_never_overwrites_air():
    vol = uniform_host()
    vol[:, :, 12:] = AIR
    dike = G.Dike((8.0, 8.0, 8.0), (1.0, 0.0, 0.0), 2.0, 2.0, 3.0, 4.0)
    out = G.apply_dike_and_halos(vol, dike)
    assert np.all(out[:, :, 12:] == AIR)


def test_dike_zero_normal_rejected():
    with pytest.raises(ConfigError):
        G.apply_dike_and_halos(uniform_host(), G.Dike((8.0, 8.0, 8.0), (0.0, 0.0, 0.0), 1.0, 1.0, 2.0, 3.0))


def test_dike_radii_order_checked():
    with pytest.raises(ConfigError):
        G.apply_dike_and_halos(uniform_host(), G.Dike((8.0, 8.0, 8.0), (1.0, 0.0, 0.0), 1.0, 3.0, 2.0, 4.0))
