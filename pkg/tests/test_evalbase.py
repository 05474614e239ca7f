import numpy as np
import pytest

from geovox import AIR
from geovox import evalbase as E
from geovox import geostory as G
from geovox import sparsity as S
from geovox.errors import BaselineError, ShapeError

from oracles import depthwise_oracle, metrics_oracle, polygonal_oracle

R8 = G.StoryRanges().for_grid(8)


def case8(seed, holes):
    vol = G.realize(G.sample_story(seed, R8, (8, 8, 8)))
    return vol, S.sample_sparse(vol, holes, seed + 1000)


def test_depthwise_layercake_perfect():
    vol = np.zeros((8, 8, 8), dtype=np.uint8)
    for z, c in enumerate([2, 2, 3, 4, 4, 5, 7, 1]):
        vol[:, :, z] = c
    cond = S.sample_sparse(vol, 1, seed=0)
    assert np.array_equal(E.baseline_depthwise(cond), vol)


def test_depthwise_majority_two_vs_one():
    lab = np.full((3, 1, 2), -1, dtype=np.int8)
    lab[:, 0, 1] = AIR
    lab[0, 0, 0] = 4
    lab[1, 0, 0] = 4
    lab[2, 0, 0] = 6
    lab[2, 0, 0] = 6
    out = E.baseline_depthwise(S.ConditionVolume(lab))
    assert out[:, 0, 0].tolist() == [4, 4, 6]
    lab2 = np.full((4, 1, 1), -1, dtype=np.int8)
    lab2[0, 0, 0], lab2[1, 0, 0], lab2[2, 0, 0] = 3, 5, 5
    assert E.baseline_depthwise(S.ConditionVolume(lab2))[3, 0, 0] == 5


def test_depthwise_tie_lowest_id():
    lab = np.full((3, 1, 1), -1, dtype=np.int8)
    lab[0, 0, 0], lab[1, 0, 0] = 6, 3
    assert E.baseline_depthwise(S.ConditionVolume(lab))[2, 0, 0] == 3


def test_depthwise_slice_fallback_below_then_above():
    lab = np.full((2, 1, 4), -1, dtype=np.int8)
    lab[0, 0, 1] = 5
    lab[0, 0, 2] = 3
    out = E.baseline_depthwise(S.ConditionVolume(lab))
    # z=0 has nothing below -> takes slice above (z=1); z=3 takes nearest below (z=2)
    assert out[1, 0].tolist() == [5, 5, 3, 3]


def test_depthwise_global_fallback_and_error():
    lab = np.full((2, 2, 2), -1, dtype=np.int8)
    lab[:, :, 1] = AIR
    assert np.all(E.baseline_depthwise(S.ConditionVolume(lab)) == AIR)
    with pytest.raises(BaselineError):
        E.baseline_depthwise(S.ConditionVolume(np.full((2, 2, 2), -1, dtype=np.int8)))


def test_polygonal_full_coverage_identity():
    vol, _ = case8(3, 0)
    cond = S.sample_sparse(vol, 64, seed=0)
    assert np.array_equal(E.baseline_polygonal(cond), vol)


def test_polygonal_single_borehole_laterally_constant():
    vol, cond = case8(5, 1)
    out = E.baseline_polygonal(cond)
    (hx, hy), = cond.borehole_columns
    unknown = ~cond.known
    ref = np.broadcast_to(vol[hx, hy], vol.shape)
    assert np.array_equal(out[unknown], ref[unknown])


def test_polygonal_needs_borehole():
    vol, cond = case8(5, 0)
    with pytest.raises(BaselineError):
        E.baseline_polygonal(cond)


def test_polygonal_tie_break():
    lab = np.full((3, 1, 1), -1, dtype=np.int8)
    lab[0, 0, 0], lab[2, 0, 0] = 4, 6
    cond = S.ConditionVolume(lab, [(2, 0), (0, 0)])
    assert E.baseline_polygonal(cond)[1, 0, 0] == 4


@pytest.mark.parametrize("seed", range(10))
def test_baselines_match_oracles(seed):
    vol, cond = case8(seed, 3)
    assert np.array_equal(E.baseline_depthwise(cond), depthwise_oracle(cond.labels))
    assert np.array_equal(E.baseline_polygonal(cond), polygonal_oracle(cond.labels, cond.borehole_columns))


def test_baselines_idempotent():
    vol, cond = case8(21, 3)
    for fn in (E.baseline_depthwise, E.baseline_polygonal):
        a = fn(cond)
        assert np.array_equal(fn(cond), a)


# -- metrics ------------------------------------------------------------------

def test_metrics_perfect():
    vol, _ = case8(1, 0)
    m = E.compute_metrics(vol, vol)
    assert m.acc_incl_air == 1.0 and m.acc_excl_air == 1.0 and m.miou_excl_air == 1.0
    present = np.unique(vol) - 1
    assert np.all(m.iou[present] == 1.0)


def test_metrics_constant_wrong_prediction():
    vol, _ = case8(2, 0)
    cat = 4
    m = E.compute_metrics(np.full(vol.shape, cat, dtype=np.uint8), vol)
    non_air = vol[vol != AIR]
    assert m.acc_excl_air == np.mean(non_air == cat)


def test_metrics_shape_mismatch():
    with pytest.raises(ShapeError):
        E.compute_metrics(np.ones((2, 2, 2), np.uint8), np.ones((2, 2, 3), np.uint8))


def _cmp(a, b):
    if b is None:
        return not np.isfinite(a)
    return a == b


@pytest.mark.parametrize("seed", range(20))
def test_metrics_match_oracle(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(1, 10, size=(4, 4, 4)).astype(np.uint8)
    pred = rng.integers(1, 10, size=(4, 4, 4)).astype(np.uint8)
    m = E.compute_metrics(pred, truth)
    o = metrics_oracle(pred, truth)
    assert m.confusion.tolist() == o["cm"]
    assert m.acc_incl_air == o["acc_incl"]
    assert _cmp(m.acc_excl_air, o["acc_excl"]) and _cmp(m.miou_excl_air, o["miou"])
    for k in range(9):
        assert _cmp(m.recall[k], o["recall"][k]) and _cmp(m.iou[k], o["iou"][k])
        if o["recall"][k] is not None:
            assert m.iou[k] <= m.recall[k]
    assert abs(sum(m.proportions) - 1) < 1e-9


def test_metrics_permutation_invariance():
    rng = np.random.default_rng(7)
    truth = rng.integers(1, 10, size=(5, 5, 5)).astype(np.uint8)
    pred = np.where(rng.random(truth.shape) < 0.6, truth, rng.integers(1, 10, size=truth.shape)).astype(np.uint8)
    perm = np.array([0, 1] + list(rng.permutation(np.arange(2, 10))))  # keep air fixed
    m1 = E.compute_metrics(pred, truth)
    m2 = E.compute_metrics(perm[pred], perm[truth])
    assert m1.acc_incl_air == m2.acc_incl_air and m1.acc_excl_air == m2.acc_excl_air
    assert abs(m1.miou_excl_air - m2.miou_excl_air) < 1e-12


def test_metrics_dict_roundtrip():
    vol, cond = case8(4, 2)
    m = E.compute_metrics(E.baseline_polygonal(cond), vol)
    back = E.MetricsReport.from_dict(m.to_dict())
    assert back.acc_excl_air == m.acc_excl_air and np.array_equal(back.confusion, m.confusion)


def test_aggregate_pools_voxels():
    a = E.compute_metrics(np.array([[[2, 2]]], np.uint8), np.array([[[2, 3]]], np.uint8))
    b = E.compute_metrics(np.array([[[3]]], np.uint8), np.array([[[3]]], np.uint8))
    pooled = E.aggregate([a, b])
    assert pooled.acc_incl_air == 2 / 3
