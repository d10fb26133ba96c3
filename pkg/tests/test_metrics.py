import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canonseq import metrics
from canonseq.errors import DomainError
from canonseq.geometry import chamfer_distance, emd
from canonseq.pcio import normalize_unit_sphere


def clouds(rng, k, n=12, shift=0.0):
    return [rng.normal(size=(n, 3)) + shift for _ in range(k)]


def dist(a, b, kind):
    a, b = normalize_unit_sphere(a), normalize_unit_sphere(b)
    return chamfer_distance(a, b) if kind == "CD" else emd(a, b)


def brute_mmd(gen, ref, kind):
    return sum(min(dist(r, g, kind) for g in gen) for r in ref) / len(ref)


def brute_cov(gen, ref, kind):
    matched = set()
    for g in gen:
        ds = [dist(g, r, kind) for r in ref]
        matched.add(ds.index(min(ds)))
    return len(matched) / len(ref)


def brute_nna(gen, ref, kind):
    pool = [(c, 0) for c in gen] + [(c, 1) for c in ref]
    correct = 0
    for i, (ci, li) in enumerate(pool):
        best, best_j = np.inf, None
        for j, (cj, _) in enumerate(pool):
            if j == i:
                continue
            d = dist(ci, cj, kind)
            if d < best:
                best, best_j = d, j
        correct += pool[best_j][1] == li
    return correct / len(pool)


def brute_tmd(shapes):
    k = len(shapes)
    return sum(
        sum(dist(shapes[i], shapes[j], "CD") for j in range(k) if j != i) / (k - 1)
        for i in range(k)
    )


@pytest.mark.parametrize("kind", ["CD", "EMD"])
def test_brute_force_tables(kind):
    rng = np.random.default_rng(0)
    gen, ref = clouds(rng, 4), clouds(rng, 4)
    assert metrics.mmd(gen, ref, kind) == pytest.approx(brute_mmd(gen, ref, kind), abs=1e-12)
    gen, ref = clouds(rng, 5), clouds(rng, 5)
    assert metrics.cov(gen, ref, kind) == brute_cov(gen, ref, kind)
    gen, ref = clouds(rng, 6), clouds(rng, 6)
    assert metrics.one_nna(gen, ref, kind) == brute_nna(gen, ref, kind)


def test_tmd_double_loop():
    rng = np.random.default_rng(1)
    shapes = clouds(rng, 4)
    assert metrics.tmd(shapes) == pytest.approx(brute_tmd(shapes), abs=1e-12)
    a, b = shapes[:2]
    assert metrics.tmd([a, b]) == pytest.approx(2 * dist(a, b, "CD"), abs=1e-12)


def test_identical_set_facts():
    rng = np.random.default_rng(2)
    ref = clouds(rng, 5)
    for kind in ("CD", "EMD"):
        assert metrics.mmd(ref, ref, kind) == 0.0
        assert metrics.cov(ref, ref, kind) == 1.0
        assert metrics.one_nna([c.copy() for c in ref], ref, kind) == 0.0
    assert metrics.tmd([ref[0]] * 3) == 0.0


def test_singletons_and_collapse():
    rng = np.random.default_rng(3)
    a, b = clouds(rng, 2)
    assert metrics.mmd([a], [b]) == pytest.approx(dist(b, a, "CD"))
    ref = clouds(rng, 4)
    gen = [ref[2].copy() for _ in range(3)]
    assert metrics.cov(gen, ref) == 0.25


def test_separated_clusters():
    rng = np.random.default_rng(4)
    gen = [np.c_[rng.normal(size=(20, 2)), np.zeros(20)] for _ in range(5)]
    ref = [rng.normal(size=(20, 3)) for _ in range(5)]
    assert metrics.one_nna(gen, ref, "CD") == 1.0


def test_errors():
    rng = np.random.default_rng(5)
    with pytest.raises(DomainError):
        metrics.mmd([], clouds(rng, 1))
    with pytest.raises(DomainError):
        metrics.cov(clouds(rng, 1), [])
    with pytest.raises(DomainError):
        metrics.one_nna(clouds(rng, 1), clouds(rng, 3))
    with pytest.raises(DomainError):
        metrics.tmd(clouds(rng, 1))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4))
def test_cov_monotone_in_gen(seed, extra):
    rng = np.random.default_rng(seed)
    ref, gen = clouds(rng, 4, 8), clouds(rng, 3, 8)
    more = gen + clouds(rng, extra, 8)
    assert metrics.cov(more, ref) >= metrics.cov(gen, ref)


def test_rotation_invariance():
    from scipy.spatial.transform import Rotation

    rng = np.random.default_rng(6)
    gen, ref = clouds(rng, 4, 10), clouds(rng, 4, 10)
    R = Rotation.random(random_state=7).as_matrix()
    rot = lambda cs: [c @ R.T for c in cs]
    a = metrics.evaluate(gen, ref)
    b = metrics.evaluate(rot(gen), rot(ref))
    for key in ("mmd_cd", "mmd_emd", "cov_cd", "cov_emd", "nna_cd", "nna_emd"):
        assert getattr(a, key) == pytest.approx(getattr(b, key), abs=1e-9)


def test_report_roundtrip_and_table(tmp_path):
    rng = np.random.default_rng(8)
    rep = metrics.evaluate(clouds(rng, 3), clouds(rng, 3))
    assert 0 <= rep.cov_cd <= 1 and 0 <= rep.nna_emd <= 1
    rep.save(tmp_path / "r.txt")
    back = metrics.MetricReport.from_text((tmp_path / "r.txt").read_text())
    assert back.mmd_cd == rep.mmd_cd and back.n_gen == 3 and back.emd_mode == "exact"
    table = rep.table()
    assert "MMD-CD (x1e3)" in table
    assert f"{rep.mmd_cd * 1e3:10.4f}" in table
