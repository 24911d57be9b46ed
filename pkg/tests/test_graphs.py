import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gdpw import graphs, ingest
from gdpw.ingest import Trajectory

import oracles
from conftest import rec


def _traj(cats, hours=None, user="u1", pois=None, start_row=0):
    hours = hours if hours is not None else range(len(cats))
    pois = pois or [f"p{c}" for c in cats]
    return Trajectory(user, tuple(rec(user=user, poi=p, cat=c, hours=h, row=start_row + i)
                                  for i, (p, c, h) in enumerate(zip(pois, cats, hours))))


# --------------------------------------------------------------------------- distances

def test_haversine_zero():
    assert graphs.haversine_km((40.7, -74.0), (40.7, -74.0)) == 0.0


def test_haversine_nyc_tokyo_matches_oracle():
    a, b = (40.7128, -74.0060), (35.6762, 139.6503)
    assert graphs.haversine_km(a, b) == pytest.approx(oracles.great_circle_km(a, b), rel=1e-10)


def test_haversine_symmetry_and_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = (rng.uniform(-89, 89), rng.uniform(-180, 180))
        b = (rng.uniform(-89, 89), rng.uniform(-180, 180))
        d = graphs.haversine_km(a, b)
        assert d == graphs.haversine_km(b, a)
        assert d == pytest.approx(oracles.great_circle_km(a, b), rel=1e-8, abs=1e-8)


def test_haversine_matrix_matches_scalar():
    rng = np.random.default_rng(1)
    c = np.column_stack([rng.uniform(40, 41, 7), rng.uniform(-74, -73, 7)])
    M = graphs.haversine_matrix(c, c)
    for i in range(7):
        for j in range(7):
            assert M[i, j] == pytest.approx(graphs.haversine_km(c[i], c[j]), abs=1e-9)


# --------------------------------------------------------------------------- category graph

def test_category_graph_aba():
    t = _traj(["a", "b", "a"])
    vocab = ingest.build_vocabulary([t])
    g = graphs.build_category_graph([t], vocab)
    a, b = vocab.category_map["a"], vocab.category_map["b"]
    expected = np.zeros((2, 2))
    expected[a, b] = expected[b, a] = 1
    assert np.array_equal(g.adjacency, expected)
    assert g.features[a].tolist() == [2, 1] and g.features[b].tolist() == [1, 1]


def test_category_self_transition():
    t = _traj(["a", "a", "a"], pois=["p1", "p2", "p1"])
    vocab = ingest.build_vocabulary([t])
    g = graphs.build_category_graph([t], vocab)
    assert g.adjacency.tolist() == [[2]]
    assert g.features.tolist() == [[3, 2]]


def test_category_graph_matches_pair_count_oracle(synth_dataset, synth_bundle):
    vocab = synth_dataset.vocab
    seqs = [[vocab.category_map[r.category_id] for r in t.check_ins] for t in synth_dataset.train]
    expected = np.zeros((vocab.num_categories,) * 2)
    for (a, b), n in oracles.pair_counts(seqs).items():
        expected[a, b] = n
    assert np.array_equal(synth_bundle.category.adjacency, expected)
    assert synth_bundle.category.adjacency.sum() == sum(len(s) - 1 for s in seqs)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 5), st.integers(0, 400)), min_size=20, max_size=20))
def test_builders_match_brute_force_on_random_logs(events):
    # (user, poi, hour offset) triples; poi p belongs to category p % 3
    recs = [rec(user=f"u{u}", poi=f"p{p}", cat=f"c{p % 3}", hours=h, row=i, lat=40.7 + p / 100)
            for i, (u, p, h) in enumerate(events)]
    trajs = ingest.segment_trajectories(recs)
    if not trajs:
        return
    vocab = ingest.build_vocabulary(trajs)
    cat_seqs = [[vocab.category_map[r.category_id] for r in t.check_ins] for t in trajs]
    poi_seqs = [[vocab.poi_map[r.poi_id] for r in t.check_ins] for t in trajs]
    A = graphs.build_category_graph(trajs, vocab).adjacency
    for (a, b), n in oracles.pair_counts(cat_seqs).items():
        assert A[a, b] == n
    assert A.sum() == sum(len(s) - 1 for s in cat_seqs)
    ct = graphs.build_category_time_graph(trajs, vocab)
    assert ct.original.sum() == ct.forward.sum() == ct.backward.sum() == sum(map(len, trajs))
    ug = graphs.build_ug_graph(trajs, vocab).adjacency
    expected = {frozenset(k) for k in oracles.pair_counts(poi_seqs) if k[0] != k[1]}
    assert {frozenset(k) for k in zip(*ug.nonzero())} == expected


# --------------------------------------------------------------------------- category-time graph

def test_weekday_7am_example():
    # T0 is Monday 08:00, so -1h is Monday 07:00
    t = _traj(["Restaurant", "x", "y"], hours=[-1, 0, 1])
    vocab = ingest.build_vocabulary([t])
    g = graphs.build_category_time_graph([t], vocab)
    c = vocab.category_map["Restaurant"]
    assert np.flatnonzero(g.original[c]).tolist() == [7]
    assert np.flatnonzero(g.forward[c]).tolist() == [6]
    assert np.flatnonzero(g.backward[c]).tolist() == [8]


def test_slot_wrap_stays_in_block():
    assert graphs.prev_slot(0) == 23
    assert graphs.next_slot(47) == 24
    for s in range(48):
        assert (graphs.prev_slot(s), graphs.next_slot(s)) == oracles.neighbours(s)


def test_category_time_counts_match_oracle(synth_dataset, synth_bundle):
    vocab = synth_dataset.vocab
    ct = synth_bundle.category_time
    C = vocab.num_categories
    o, f, b = np.zeros((C, 48)), np.zeros((C, 48)), np.zeros((C, 48))
    for t in synth_dataset.train:
        for r in t.check_ins:
            c = vocab.category_map[r.category_id]
            lt = r.local_time
            s = oracles.slot_of(lt.weekday(), lt.hour)
            prev, nxt = oracles.neighbours(s)
            o[c, s] += 1
            f[c, prev] += 1
            b[c, nxt] += 1
    assert np.array_equal(ct.original, o)
    assert np.array_equal(ct.forward, f)
    assert np.array_equal(ct.backward, b)
    n = sum(len(t) for t in synth_dataset.train)
    assert ct.original.sum() == ct.forward.sum() == ct.backward.sum() == n
    # features agree with the category graph's
    assert np.array_equal(ct.category_features, synth_bundle.category.features)
    assert np.array_equal(ct.time_features, np.eye(48))


def test_reverse_relations_are_transposes(synth_bundle):
    ct = synth_bundle.category_time
    assert np.array_equal(ct.relation("tco"), ct.relation("cto").T)
    assert np.array_equal(ct.relation("tcf"), ct.relation("ctf").T)
    assert np.array_equal(ct.relation("tcb"), ct.relation("ctb").T)
    with pytest.raises(KeyError):
        ct.relation("nope")


def test_message_matrix_direction(synth_bundle):
    ct = synth_bundle.category_time
    C = ct.num_categories
    M = ct.message_matrix("cto")
    assert np.array_equal(M[C:, :C], ct.original.T)  # category -> time lands on time rows
    assert M[:C].sum() == 0
    M = ct.message_matrix("tcb")
    assert np.array_equal(M[:C, C:], ct.backward)
    assert M[C:].sum() == 0


# --------------------------------------------------------------------------- UG graph

def test_gravity_weight_example():
    assert graphs.gravity_weight(2, 3, 4, 1.0) == pytest.approx(12.0)
    assert graphs.gravity_weight(2, 3, 4, 0.0) == pytest.approx(24.0)
    assert graphs.gravity_weight(2, 3, 4, 2.0, denominator="distance_squared") == pytest.approx(24 / 5)
    with pytest.raises(ValueError):
        graphs.gravity_weight(1, 1, 1, 1.0, denominator="cube")


def _two_poi_vocab():
    a = rec(poi="A", lat=40.70, lon=-74.00, hours=0, row=0)
    b = rec(poi="B", lat=40.71, lon=-74.00, hours=1, row=1)
    c = rec(poi="C", lat=40.75, lon=-74.00, hours=2, row=2)
    return a, b, c


def test_ug_graph_matches_gravity_oracle():
    a, b, c = _two_poi_vocab()
    t1 = Trajectory("u1", (a, b, rec(poi="A", lat=40.70, lon=-74.00, hours=3, row=3)))
    t2 = Trajectory("u1", (c, c, c))
    trajs = [t1, t2]
    vocab = ingest.build_vocabulary(trajs)
    g = graphs.build_ug_graph(trajs, vocab)
    A = g.adjacency.toarray()
    ia, ib, ic = (vocab.poi_map[x] for x in "ABC")
    d = oracles.great_circle_km((40.70, -74.0), (40.71, -74.0))
    # A->B and B->A: G=2, freq A=2, B=1; C->C self loops ignored
    assert A[ia, ib] == pytest.approx(2 * 2 * 1 / (d + 1), rel=1e-9)
    assert A[ia, ib] == A[ib, ia]
    assert A[ia, ic] == 0 and A[ic, ic] == 0
    assert np.all(np.diag(A) == 0)


def test_ug_reciprocal_weighting_and_squared():
    a, b, _ = _two_poi_vocab()
    t = Trajectory("u1", (a, b, rec(poi="A", lat=40.70, lon=-74.00, hours=3, row=3)))
    vocab = ingest.build_vocabulary([t])
    d = oracles.great_circle_km((40.70, -74.0), (40.71, -74.0))
    rec_w = graphs.build_ug_graph([t], vocab, weighting="reciprocal_distance").adjacency.toarray()
    assert rec_w[0, 1] == pytest.approx(1 / (d + 1), rel=1e-9)
    sq = graphs.build_ug_graph([t], vocab, denominator="distance_squared").adjacency.toarray()
    assert sq[0, 1] == pytest.approx(4 / (d * d + 1), rel=1e-9)
    with pytest.raises(ValueError):
        graphs.build_ug_graph([t], vocab, weighting="bogus")


def test_ug_graph_edges_iff_consecutive(synth_dataset, synth_bundle):
    vocab = synth_dataset.vocab
    seqs = [[vocab.poi_map[r.poi_id] for r in t.check_ins] for t in synth_dataset.all_trajectories]
    pairs = {frozenset(k) for k in oracles.pair_counts(seqs) if k[0] != k[1]}
    A = synth_bundle.ug.adjacency
    nz = {frozenset(k) for k in zip(*A.nonzero())}
    assert nz == pairs
    assert abs(A - A.T).max() == 0
    assert A.diagonal().sum() == 0
    assert A.data.min() > 0


def test_ug_features(synth_dataset, synth_bundle):
    X = synth_bundle.ug.features
    vocab = synth_dataset.vocab
    assert X.shape == (vocab.num_pois, 3 + vocab.num_categories)
    assert np.allclose(X[:, :3].mean(axis=0), 0, atol=1e-9)
    assert np.allclose(X[:, :3].std(axis=0), 1, atol=1e-9)
    assert np.array_equal(X[:, 3:].argmax(axis=1), vocab.poi_category)
    assert np.all(X[:, 3:].sum(axis=1) == 1)


# --------------------------------------------------------------------------- laplacians

def test_rw_laplacian_examples():
    L = graphs.random_walk_laplacian(np.array([[0, 1], [1, 0]]))
    assert np.array_equal(L, [[1, -1], [-1, 1]])
    L = graphs.random_walk_laplacian(np.array([[0, 1, 0], [0, 0, 0], [1, 1, 0]]))
    assert np.array_equal(L[1], [0, 1, 0])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (5, 5), elements=st.one_of(st.just(0.0), st.floats(1e-3, 10))))
def test_rw_laplacian_row_sums(A):
    L = graphs.random_walk_laplacian(A)
    deg = A.sum(axis=1)
    expected = np.where(deg > 0, 0.0, 1.0)
    assert np.allclose(L.sum(axis=1), expected, atol=1e-9)
    Ls = graphs.random_walk_laplacian(sp.csr_matrix(A)).toarray()
    assert np.allclose(L, Ls, atol=1e-12)


def test_sym_laplacian_examples():
    for A in ([[0, 1], [1, 0]], [[0, 2], [2, 0]]):
        L = graphs.symmetric_laplacian(np.array(A, dtype=float))
        assert np.allclose(L, [[1, -1], [-1, 1]], atol=1e-15)
    with pytest.raises(ValueError):
        graphs.symmetric_laplacian(np.array([[0, 1], [0, 0]], dtype=float))
    with pytest.raises(ValueError):
        graphs.symmetric_laplacian(sp.csr_matrix(np.array([[0, 1], [0, 0]], dtype=float)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2 ** 31 - 1))
def test_sym_laplacian_spectrum(n, seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 3, (n, n)) * (rng.random((n, n)) < 0.4)
    A = np.triu(A, 1)
    A = A + A.T
    L = graphs.symmetric_laplacian(A)
    ev = np.linalg.eigvalsh(L)
    assert ev.min() >= -1e-9 and ev.max() <= 2 + 1e-9
    assert np.allclose(graphs.symmetric_laplacian(sp.csr_matrix(A)).toarray(), L, atol=1e-12)


def test_laplacian_rejects_non_square():
    with pytest.raises(ValueError):
        graphs.random_walk_laplacian(np.zeros((2, 3)))


# --------------------------------------------------------------------------- distance map

def test_gaussian_proximity_examples():
    assert graphs.gaussian_proximity(1.0) == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert graphs.gaussian_proximity(1.0) == pytest.approx(0.60653, abs=1e-5)
    assert graphs.gaussian_proximity(6.0) == 0
    assert graphs.gaussian_proximity(5.0) == 0
    assert graphs.gaussian_proximity(0.0) == 0


def test_distance_map_properties(synth_dataset, synth_bundle):
    DM = synth_bundle.distance_map.matrix
    vocab = synth_dataset.vocab
    n = vocab.num_pois
    assert DM.shape == (n, n)
    assert abs(DM - DM.T).max() == 0
    assert DM.diagonal().sum() == 0
    assert DM.data.min() > 0 and DM.data.max() <= 1
    dense = DM.toarray()
    rng = np.random.default_rng(0)
    for _ in range(200):
        i, j = rng.integers(n, size=2)
        d = oracles.great_circle_km(vocab.poi_coords[i], vocab.poi_coords[j])
        expected = math.exp(-d * d / 2) if 0 < d < 5 else 0.0
        assert dense[i, j] == pytest.approx(expected, abs=1e-9)


def test_distance_map_chunking_invariant(synth_dataset):
    a = graphs.build_distance_map(synth_dataset.vocab, chunk=7).matrix
    b = graphs.build_distance_map(synth_dataset.vocab).matrix
    assert abs(a - b).max() == 0


# --------------------------------------------------------------------------- bundle

def test_bundle_roundtrip_and_bytes(synth_dataset, synth_bundle, tmp_path):
    p1, p2 = tmp_path / "g1.zip", tmp_path / "g2.zip"
    synth_bundle.save(p1)
    graphs.build_graphs(synth_dataset).save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    back = graphs.GraphBundle.load(p1)
    assert np.array_equal(back.category.adjacency, synth_bundle.category.adjacency)
    assert np.array_equal(back.category_time.forward, synth_bundle.category_time.forward)
    assert abs(back.ug.adjacency - synth_bundle.ug.adjacency).max() == 0
    assert abs(back.distance_map.matrix - synth_bundle.distance_map.matrix).max() == 0
    assert back.vocab_fingerprint == synth_dataset.vocab.fingerprint()
    m = graphs.GraphBundle.manifest(p1)
    assert m["graphs"] == ["category", "category_time", "ug"]
    assert len(m["relations"]) == 6
    assert "distance_map" in m["sparse"]


def test_bundle_bad_schema(tmp_path):
    import zipfile
    p = tmp_path / "bad.zip"
    with zipfile.ZipFile(p, "w") as zf:
        zf.writestr("manifest.json", '{"schema": "other"}')
    with pytest.raises(ValueError):
        graphs.GraphBundle.load(p)
