import math

import numpy as np
import pytest

from magseg import mff
from magseg.errors import DomainError, ShapeError
from magseg.mff import MODALITIES, ModalityBundle
from magseg.tensor import Tensor, grad_check

E = math.e


def pixel(*vals):
    return np.array(vals, dtype=float).reshape(-1, 1, 1)


def two_modalities():
    return ModalityBundle({"R": pixel(1, 0), "D": pixel(0, 1)})


def random_bundle(seed, c=4, h=3, w=3, names=MODALITIES):
    r = np.random.default_rng(seed)
    return {m: r.normal(size=(c, h, w)) for m in names}


# -- bundle -----------------------------------------------------------------


def test_bundle_validation():
    with pytest.raises(DomainError):
        ModalityBundle({})
    with pytest.raises(ShapeError):
        ModalityBundle({"R": np.zeros((2, 1, 1)), "D": np.zeros((3, 1, 1))})
    with pytest.raises(DomainError):
        ModalityBundle({"R": np.zeros((2, 1, 1))}, available=("R", "D"))
    with pytest.raises(DomainError):
        ModalityBundle({"X": np.zeros((2, 1, 1))})
    b = ModalityBundle(random_bundle(0), available=("D", "L"))
    assert b.mask == (False, True, False, True)
    assert b.names == ("D", "L")


# -- worked examples ----------------------------------------------------------


def test_init_anchor_examples():
    f = np.random.default_rng(0).normal(size=(3, 2, 2))
    assert np.allclose(mff.init_anchor(ModalityBundle({"R": f, "D": f})).data, f, atol=1e-15)
    assert np.allclose(mff.init_anchor(ModalityBundle({"R": f, "D": -f})).data, 0.0, atol=1e-15)
    assert np.array_equal(mff.init_anchor(ModalityBundle({"D": f})).data, f)


def test_reweight_worked_example():
    w_hat, f_mb = mff.reweight(two_modalities(), pixel(1, 0))
    assert w_hat.data[:, 0, 0] == pytest.approx([E / (E + 1), 1 / (E + 1)], abs=1e-12)
    assert w_hat.data[:, 0, 0] == pytest.approx([0.73106, 0.26894], abs=1e-5)
    assert f_mb.data[:, 0, 0] == pytest.approx([0.73106, 0.26894], abs=1e-5)


def test_reweight_symmetric_and_single():
    f = np.random.default_rng(1).normal(size=(3, 2, 2))
    w_hat, f_mb = mff.reweight(ModalityBundle({m: f for m in MODALITIES}), f)
    assert np.allclose(w_hat.data, 0.25, atol=1e-15)
    assert np.allclose(f_mb.data, f, atol=1e-12)
    w_hat, f_mb = mff.reweight(ModalityBundle({"E": f}), np.ones_like(f))
    assert np.all(w_hat.data == 1.0)
    assert np.array_equal(f_mb.data, f)
    with pytest.raises(ShapeError):
        mff.reweight(ModalityBundle({"E": f}), np.ones((3, 1, 1)))


def test_select_worked_example():
    mb = np.array([E / (E + 1), 1 / (E + 1)])
    sims, index_map, f_ms = mff.select(two_modalities(), mb.reshape(2, 1, 1))
    # brute-force cosines of both candidates: 0.93851 and 0.34526
    oracle = [np.dot(v, mb) / np.linalg.norm(mb) for v in ([1.0, 0.0], [0.0, 1.0])]
    assert sims.data[:, 0, 0] == pytest.approx(oracle, abs=1e-12)
    assert sims.data[:, 0, 0] == pytest.approx([0.93851, 0.34526], abs=1e-5)
    assert index_map[0, 0] == 0
    assert np.array_equal(f_ms.data[:, 0, 0], [1.0, 0.0])


def test_select_tie_goes_to_lowest_canonical_rank():
    col = np.array([0.9, 0.9, 0.3, 0.1]).reshape(4, 1, 1)
    assert mff._argmax_canonical(col, MODALITIES)[0, 0] == 0
    # same tie presented in a different iteration order
    order = ("L", "E", "D", "R")
    col_in_order = np.array([0.1, 0.3, 0.9, 0.9]).reshape(4, 1, 1)
    winner = mff._argmax_canonical(col_in_order, order)[0, 0]
    assert order[winner] == "R"


def test_select_single_modality():
    f = np.random.default_rng(2).normal(size=(3, 2, 2))
    _, index_map, f_ms = mff.select(ModalityBundle({"L": f}), np.ones_like(f))
    assert np.all(index_map == MODALITIES.index("L"))
    assert np.array_equal(f_ms.data, f)


def test_aggregate_examples():
    f = np.random.default_rng(3).normal(size=(2, 2, 2))
    assert np.array_equal(mff.aggregate(f, f).data, f)
    assert np.allclose(mff.aggregate(np.zeros_like(f), f).data, f / 2, atol=0)
    out = mff.aggregate(pixel(0.73106, 0.26894), pixel(1, 0))
    assert out.data[:, 0, 0] == pytest.approx([0.86553, 0.13447], abs=1e-5)
    assert np.array_equal(mff.aggregate(f, f, mode="sum").data, 2 * f)
    with pytest.raises(ShapeError):
        mff.aggregate(f, np.zeros((2, 1, 1)))
    with pytest.raises(DomainError):
        mff.aggregate(f, f, mode="max")


def test_fuse_worked_example_one_step():
    f_ma, traces = mff.fuse(two_modalities(), steps=1)
    # anchor is the mean [0.5, 0.5]: both cosines equal, weights uniform
    assert traces[0].norm_weights.data[:, 0, 0] == pytest.approx([0.5, 0.5], abs=1e-12)
    # starting from the anchor [1, 0] instead reproduces the hand example
    w_hat, f_mb = mff.reweight(two_modalities(), pixel(1, 0))
    _, _, f_ms = mff.select(two_modalities(), f_mb)
    assert mff.aggregate(f_mb, f_ms).data[:, 0, 0] == pytest.approx([0.86553, 0.13447], abs=1e-5)
    assert f_ma.shape == (2, 1, 1)


def test_fuse_rejects_zero_steps():
    with pytest.raises(DomainError):
        mff.fuse(two_modalities(), steps=0)


# -- properties over seeded instances ----------------------------------------


@pytest.mark.parametrize("seed", range(200))
def test_fixed_point(seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(4, 3, 3))
    n = int(r.integers(1, 5))
    steps = int(r.integers(1, 4))
    f_ma, _ = mff.fuse(ModalityBundle({m: f for m in MODALITIES[:n]}), steps=steps)
    assert np.max(np.abs(f_ma.data - f)) <= 1e-12


@pytest.mark.parametrize("seed", range(200))
def test_single_modality_identity(seed):
    r = np.random.default_rng(seed)
    f = r.normal(size=(4, 3, 3))
    name = MODALITIES[seed % 4]
    f_ma, traces = mff.fuse(ModalityBundle({name: f}), steps=1 + seed % 3)
    assert np.array_equal(f_ma.data, f)
    assert all(np.all(t.index_map == MODALITIES.index(name)) for t in traces)


@pytest.mark.parametrize("seed", range(200))
def test_permutation_invariance(seed):
    maps = random_bundle(seed)
    order = tuple(np.random.default_rng(seed + 1000).permutation(MODALITIES))
    base = ModalityBundle(maps)
    perm = ModalityBundle(maps, order=order)
    anchor = mff.init_anchor(base)
    _, mb1 = mff.reweight(base, anchor)
    _, mb2 = mff.reweight(perm, mff.init_anchor(perm))
    assert np.max(np.abs(mb1.data - mb2.data)) <= 1e-9
    sims, idx1, ms1 = mff.select(base, mb1)
    _, idx2, ms2 = mff.select(perm, mb2)
    s = np.sort(sims.data, axis=0)
    unique = (s[-1] - s[-2]) > 1e-9
    assert np.array_equal(idx1[unique], idx2[unique])
    assert np.max(np.abs(ms1.data - ms2.data)[:, unique], initial=0.0) <= 1e-9


@pytest.mark.parametrize("seed", range(200))
def test_tie_break_determinism(seed):
    r = np.random.default_rng(seed)
    maps = random_bundle(seed)
    a, b = sorted(r.choice(4, size=2, replace=False))
    maps[MODALITIES[b]] = maps[MODALITIES[a]].copy()  # exact tie between a and b everywhere
    order = tuple(r.permutation(MODALITIES))
    results = []
    for bundle in (ModalityBundle(maps), ModalityBundle(maps, order=order)):
        _, traces = mff.fuse(bundle)
        results.append([t.index_map for t in traces])
        for t in traces:
            assert not np.any(t.index_map == b)  # the higher-ranked twin never wins
    for x, y in zip(*results):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("seed", range(50))
def test_weights_sum_to_one_and_index_map_valid(seed):
    maps = random_bundle(seed)
    avail = tuple(m for m, k in zip(MODALITIES, np.random.default_rng(seed).random(4) < 0.6) if k) or ("R",)
    _, traces = mff.fuse(ModalityBundle(maps, available=avail))
    allowed = [MODALITIES.index(m) for m in avail]
    for t in traces:
        assert np.allclose(t.norm_weights.data.sum(axis=0), 1.0, atol=1e-9)
        assert np.all(np.isin(t.index_map, allowed))


@pytest.mark.parametrize("seed", range(50))
def test_missing_modality_mask_semantics(seed):
    maps = random_bundle(seed)
    subset = ("R", "E") if seed % 2 else ("D", "E", "L")
    masked, _ = mff.fuse(ModalityBundle(maps, available=subset))
    only, _ = mff.fuse(ModalityBundle({m: maps[m] for m in subset}))
    assert np.array_equal(masked.data, only.data)
    # zero-filling the missing maps is a different computation
    zero = {m: (maps[m] if m in subset else np.zeros_like(maps[m])) for m in MODALITIES}
    zeroed, _ = mff.fuse(ModalityBundle(zero))
    assert not np.allclose(zeroed.data, masked.data)


@pytest.mark.parametrize("seed", range(5))
def test_fuse_grad_check_away_from_ties(seed):
    from magseg.gradsuite import make_instance

    inst = make_instance(seed)
    probe = Tensor(inst.probe)

    def f(*maps):
        out, _ = mff.fuse(ModalityBundle(dict(zip(MODALITIES, maps))))
        return (out * probe).sum()

    assert grad_check(f, inst.maps) <= 1e-4


def test_sum_aggregate_fixed_point_scales():
    f = np.random.default_rng(0).normal(size=(2, 2, 2))
    out, _ = mff.fuse(ModalityBundle({"R": f, "D": f}), steps=1, mode="sum")
    assert np.allclose(out.data, 2 * f, atol=1e-12)


def test_trace_summary_and_dump():
    _, traces = mff.fuse(ModalityBundle(random_bundle(0)))
    s = traces[0].summary()
    assert s["shapes"]["index_map"] == [3, 3]
    assert sum(s["index_histogram"].values()) == 9
    import json

    assert len(json.loads(mff.dump_traces(traces))["steps"]) == 2
