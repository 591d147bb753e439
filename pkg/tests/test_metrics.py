import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_chamfer, brute_coverage, brute_directional, brute_emd, brute_mmd, brute_one_nna
from vfnet.errors import CapExceededError, PreconditionError
from vfnet.metrics import (
    REPORT_SCHEMA,
    MetricReport,
    chamfer,
    coverage,
    directional_chamfer,
    emd_exact,
    emd_mean,
    evaluate_sets,
    mmd,
    nearest_distances,
    one_nna,
    pairwise_distances,
    paired_euclidean,
)

O = [[0.0, 0.0, 0.0]]
E1 = [[1.0, 0.0, 0.0]]


def test_directional_single_pair():
    assert directional_chamfer(O, E1) == 1.0


def test_directional_subset_is_zero(rng):
    B = rng.standard_normal((40, 3))
    assert directional_chamfer(B[:10], B) == 0.0


def test_directional_matches_brute_512(rng):
    A, B = rng.standard_normal((512, 3)), rng.standard_normal((512, 3))
    assert directional_chamfer(A, B) == pytest.approx(brute_directional(A, B), rel=1e-9)


def test_chamfer_examples(rng):
    X = rng.standard_normal((30, 3))
    assert chamfer(X, X) == 0.0
    assert chamfer(O, E1) == 2.0
    Y = rng.standard_normal((17, 3))
    assert chamfer(X, Y) == chamfer(Y, X)


def test_empty_cloud_rejected():
    with pytest.raises(PreconditionError):
        directional_chamfer(np.zeros((0, 3)), O)


def test_paired_examples(rng):
    A = rng.standard_normal((20, 3))
    assert paired_euclidean(A, A) == 0.0
    assert paired_euclidean(A, A + [1.0, 0, 0]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(PreconditionError):
        paired_euclidean(A, A[:5])


def test_nearest_distances_brute(rng):
    A, B = rng.standard_normal((50, 3)), rng.standard_normal((70, 3))
    brute = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1)).min(axis=1)
    np.testing.assert_allclose(nearest_distances(A, B), brute, rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_chamfer_bounded_by_paired(seed, n):
    r = np.random.default_rng(seed)
    A, B = r.standard_normal((n, 3)), r.standard_normal((n, 3))
    p = paired_euclidean(A, B)
    assert directional_chamfer(A, B) <= p + 1e-12
    assert directional_chamfer(B, A) <= p + 1e-12


# ----------------------------------------------------------------------- EMD


def test_emd_identity(rng):
    X = rng.standard_normal((25, 3))
    cost, plan = emd_exact(X, X)
    assert cost == 0.0
    assert np.array_equal(plan.permutation, np.arange(25))


def test_emd_two_points():
    cost, plan = emd_exact([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [2, 0, 0]])
    assert cost == pytest.approx(1.0)
    assert plan.permutation.tolist() == [0, 1]


@pytest.mark.parametrize("seed", range(5))
def test_emd_factorial_n7(seed):
    r = np.random.default_rng(seed)
    A, B = r.standard_normal((7, 3)), r.standard_normal((7, 3))
    cost, plan = emd_exact(A, B)
    assert cost == pytest.approx(brute_emd(A, B), rel=1e-12)
    assert sorted(plan.permutation.tolist()) == list(range(7))
    assert plan.total_cost == pytest.approx(np.linalg.norm(A - B[plan.permutation], axis=1).sum(), abs=1e-9)


def test_emd_errors(rng):
    with pytest.raises(PreconditionError):
        emd_exact(rng.standard_normal((3, 3)), rng.standard_normal((4, 3)))
    with pytest.raises(CapExceededError):
        emd_exact(rng.standard_normal((20, 3)), rng.standard_normal((20, 3)), cap=10)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_emd_bounds_chamfer(seed, n):
    r = np.random.default_rng(seed)
    A, B = r.standard_normal((n, 3)), r.standard_normal((n, 3))
    m = emd_mean(A, B)
    assert max(directional_chamfer(A, B), directional_chamfer(B, A)) <= m + 1e-9
    assert m <= paired_euclidean(A, B) + 1e-12


# ----------------------------------------------------------------- set scores


def cloud_set(r, k, n=12, offset=0.0):
    return [r.standard_normal((n, 3)) + offset for _ in range(k)]


def test_mmd_self_and_singletons(rng):
    S = cloud_set(rng, 4)
    assert mmd(S, S) == 0.0
    a, b = cloud_set(rng, 2)
    assert mmd([a], [b]) == pytest.approx(chamfer(a, b))
    assert mmd([a], [b], base="emd") == pytest.approx(emd_mean(a, b))


def test_coverage_examples(rng):
    S = cloud_set(rng, 6)
    assert coverage(S, S) == 1.0
    assert coverage(S[:1], S) <= 1 / 6


def test_one_nna_separated(rng):
    gen = cloud_set(rng, 5, offset=100.0)
    ref = cloud_set(rng, 5)
    assert one_nna(gen, ref) == 1.0


def test_one_nna_needs_two(rng):
    with pytest.raises(PreconditionError):
        one_nna(cloud_set(rng, 1), cloud_set(rng, 3))


def test_one_nna_hand_table():
    # 1-D clouds (single points on the x axis) make the leave-one-out table easy to read:
    # gen = {0, 1, 10, 30}, ref = {2, 11, 20, 31}
    # nearest: 0->1 (gen, ok), 1->0 (tie with 2, lower index wins: gen, ok), 10->11 (ref, wrong),
    #          30->31 (ref, wrong)
    #          2->1 (gen, wrong), 11->10 (gen, wrong), 20->11 (ref, ok; 10 at 10, 11 at 9), 31->30 (gen, wrong)
    pt = lambda x: [[float(x), 0.0, 0.0]]
    gen = [pt(v) for v in (0, 1, 10, 30)]
    ref = [pt(v) for v in (2, 11, 20, 31)]
    assert one_nna(gen, ref) == pytest.approx(3 / 8)


def test_one_nna_ties_lower_index():
    pt = lambda x: [[float(x), 0.0, 0.0]]
    # gen[0] at 0 is equidistant from gen[1] (-1) and ref[0] (+1): the lower index (gen) wins
    gen = [pt(0), pt(-1)]
    ref = [pt(1), pt(5)]
    d = pairwise_distances(gen + ref, None, "chamfer")
    assert d[0, 1] == d[0, 2]
    assert one_nna(gen, ref) == pytest.approx(brute_one_nna(gen, ref, chamfer))


def test_one_nna_same_distribution_band():
    r = np.random.default_rng(77)
    vals = [one_nna(cloud_set(r, 50, n=8), cloud_set(r, 50, n=8)) for _ in range(3)]
    assert all(0.38 <= v <= 0.62 for v in vals)


@pytest.mark.parametrize("base", ["chamfer", "emd"])
def test_set_scores_match_brute(base):
    r = np.random.default_rng(5)
    dist = chamfer if base == "chamfer" else emd_mean
    for _ in range(5):
        gen, ref = cloud_set(r, 5, n=6), cloud_set(r, 5, n=6)
        assert mmd(gen, ref, base) == pytest.approx(brute_mmd(gen, ref, dist), rel=1e-9)
        assert coverage(gen, ref, base) == pytest.approx(brute_coverage(gen, ref, dist), rel=1e-9)
        assert one_nna(gen, ref, base) == pytest.approx(brute_one_nna(gen, ref, dist), rel=1e-9)


def test_pairwise_symmetric_and_threads(rng):
    S = cloud_set(rng, 6)
    D = pairwise_distances(S, None, "chamfer")
    assert np.array_equal(D, D.T)
    assert np.all(np.diag(D) == 0)
    assert np.array_equal(D, pairwise_distances(S, None, "chamfer", threads=3))


def test_emd_sets_need_equal_sizes(rng):
    with pytest.raises(PreconditionError):
        mmd(cloud_set(rng, 2, n=5), cloud_set(rng, 2, n=6), base="emd")


def test_report_schema(rng):
    jsonschema = pytest.importorskip("jsonschema")
    rep = evaluate_sets(cloud_set(rng, 4), cloud_set(rng, 5), seed=3)
    doc = json.loads(json.dumps(rep.to_dict()))
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert set(doc) == {"mmd", "cov", "one_nna", "base_metric", "gen_count", "ref_count", "seed"}


def test_report_range_check():
    with pytest.raises(PreconditionError):
        MetricReport(mmd=0.1, cov=1.5, one_nna=0.5, base_metric="chamfer", gen_count=2, ref_count=2)
