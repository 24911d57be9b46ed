"""Global graph construction: category, category-time, universal-gravity (UG), and the distance map."""
from __future__ import annotations

import io
import json
import os
import zipfile
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import NUM_TIME_SLOTS, Trajectory, Vocabulary, encode_time_slot

EARTH_RADIUS_KM = 6371.0
BUNDLE_SCHEMA = "gdpw.graphs/1"

# (name, source type, destination type, base adjacency); reverse relations read the base transposed
RELATIONS = (
    ("cto", "category", "time", "original"),
    ("tco", "time", "category", "original"),
    ("ctf", "category", "time", "forward"),
    ("tcf", "time", "category", "forward"),
    ("ctb", "category", "time", "backward"),
    ("tcb", "time", "category", "backward"),
)


def haversine_km(a, b) -> float:
    lat1, lon1 = np.radians(a[0]), np.radians(a[1])
    lat2, lon2 = np.radians(b[0]), np.radians(b[1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return float(2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0))))


def haversine_matrix(coords_a: np.ndarray, coords_b: np.ndarray) -> np.ndarray:
    """Pairwise great-circle distances (km) between two (n, 2) lat/lon arrays."""
    a = np.radians(np.asarray(coords_a, dtype=np.float64))
    b = np.radians(np.asarray(coords_b, dtype=np.float64))
    dlat = b[None, :, 0] - a[:, None, 0]
    dlon = b[None, :, 1] - a[:, None, 1]
    h = np.sin(dlat / 2) ** 2 + np.cos(a[:, None, 0]) * np.cos(b[None, :, 0]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def _zscore(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    std = x.std()
    return (x - x.mean()) / std if std > 0 else x - x.mean()


# --------------------------------------------------------------------------- laplacians

def _inv_or_zero(x: np.ndarray, power: float = 1.0) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    nz = x > 0
    out[nz] = x[nz] ** -power
    return out


def random_walk_laplacian(A):
    """I - D^-1 A with row-sum degrees; zero-degree rows become identity rows."""
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    n = A.shape[0]
    if sp.issparse(A):
        A = sp.csr_matrix(A, dtype=np.float64)
        dinv = _inv_or_zero(np.asarray(A.sum(axis=1)).ravel())
        return (sp.identity(n, format="csr") - sp.diags(dinv) @ A).tocsr()
    A = np.asarray(A, dtype=np.float64)
    dinv = _inv_or_zero(A.sum(axis=1))
    return np.eye(n) - dinv[:, None] * A


def symmetric_laplacian(A, atol: float = 1e-12):
    """I - D^-1/2 A D^-1/2 for a symmetric adjacency."""
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"adjacency must be square, got {A.shape}")
    n = A.shape[0]
    if sp.issparse(A):
        A = sp.csr_matrix(A, dtype=np.float64)
        if n and abs(A - A.T).max() > atol:
            raise ValueError("adjacency is not symmetric")
        d = _inv_or_zero(np.asarray(A.sum(axis=1)).ravel(), 0.5)
        D = sp.diags(d)
        return (sp.identity(n, format="csr") - D @ A @ D).tocsr()
    A = np.asarray(A, dtype=np.float64)
    if not np.allclose(A, A.T, atol=atol, rtol=0):
        raise ValueError("adjacency is not symmetric")
    d = _inv_or_zero(A.sum(axis=1), 0.5)
    return np.eye(n) - d[:, None] * A * d[None, :]


# --------------------------------------------------------------------------- category graph

@dataclass
class CategoryGraph:
    adjacency: np.ndarray  # (|C|, |C|) transition counts
    features: np.ndarray  # (|C|, 2) check-in count, distinct POI count

    @property
    def laplacian(self) -> np.ndarray:
        return random_walk_laplacian(self.adjacency)


def _category_counts(trajectories: Iterable[Trajectory], vocab: Vocabulary) -> np.ndarray:
    counts = np.zeros(vocab.num_categories)
    pois_per_cat: dict[int, set] = {}
    for t in trajectories:
        for r in t.check_ins:
            c = vocab.category_map[r.category_id]
            counts[c] += 1
            pois_per_cat.setdefault(c, set()).add(r.poi_id)
    distinct = np.zeros(vocab.num_categories)
    for c, s in pois_per_cat.items():
        distinct[c] = len(s)
    return np.stack([counts, distinct], axis=1)


def build_category_graph(train_trajectories: Sequence[Trajectory], vocab: Vocabulary) -> CategoryGraph:
    n = vocab.num_categories
    A = np.zeros((n, n), dtype=np.int64)
    for t in train_trajectories:
        cats = [vocab.category_map[r.category_id] for r in t.check_ins]
        for a, b in zip(cats, cats[1:]):
            A[a, b] += 1
    return CategoryGraph(A, _category_counts(train_trajectories, vocab))


# --------------------------------------------------------------------------- category-time graph

def prev_slot(slot: int) -> int:
    base = (slot // 24) * 24
    return base + (slot - base - 1) % 24


def next_slot(slot: int) -> int:
    base = (slot // 24) * 24
    return base + (slot - base + 1) % 24


@dataclass
class CategoryTimeGraph:
    original: np.ndarray  # (|C|, 48)
    forward: np.ndarray
    backward: np.ndarray
    category_features: np.ndarray  # (|C|, 2), shared with the category graph
    time_features: np.ndarray  # (48, 48) one-hot

    @property
    def num_categories(self) -> int:
        return self.original.shape[0]

    def relation(self, name: str) -> np.ndarray:
        """Adjacency oriented (source, destination) for one of the six relations."""
        for rel, src, _dst, base in RELATIONS:
            if rel == name:
                A = getattr(self, base)
                return A if src == "category" else A.T
        raise KeyError(f"unknown relation {name!r}")

    def message_matrix(self, name: str) -> np.ndarray:
        """(N, N) matrix over [categories; time slots] with M[dst, src] = edge weight."""
        C = self.num_categories
        N = C + NUM_TIME_SLOTS
        M = np.zeros((N, N))
        A = self.relation(name)
        if name.startswith("ct"):
            M[C:, :C] = A.T
        else:
            M[:C, C:] = A.T
        return M

    def laplacians(self) -> dict[str, np.ndarray]:
        return {rel: random_walk_laplacian(self.message_matrix(rel)) for rel, *_ in RELATIONS}


def build_category_time_graph(train_trajectories: Sequence[Trajectory], vocab: Vocabulary) -> CategoryTimeGraph:
    n = vocab.num_categories
    orig = np.zeros((n, NUM_TIME_SLOTS), dtype=np.int64)
    fwd = np.zeros_like(orig)
    bwd = np.zeros_like(orig)
    for t in train_trajectories:
        for r in t.check_ins:
            c = vocab.category_map[r.category_id]
            s = encode_time_slot(r.local_time)
            orig[c, s] += 1
            fwd[c, prev_slot(s)] += 1
            bwd[c, next_slot(s)] += 1
    return CategoryTimeGraph(
        original=orig, forward=fwd, backward=bwd,
        category_features=_category_counts(train_trajectories, vocab),
        time_features=np.eye(NUM_TIME_SLOTS),
    )


# --------------------------------------------------------------------------- UG graph

@dataclass
class UGGraph:
    adjacency: sp.csr_matrix  # (|P|, |P|) symmetric, zero diagonal
    features: np.ndarray  # (|P|, 3 + |C|)

    @property
    def laplacian(self) -> sp.csr_matrix:
        return symmetric_laplacian(self.adjacency)


def gravity_weight(pair_count, count_i, count_j, distance_km, eps: float = 1.0,
                   denominator: str = "distance"):
    if denominator == "distance":
        r = distance_km
    elif denominator == "distance_squared":
        r = np.square(distance_km)
    else:
        raise ValueError(f"unknown gravity denominator {denominator!r}")
    return pair_count * count_i * count_j / (r + eps)


def build_ug_graph(all_trajectories: Sequence[Trajectory], vocab: Vocabulary, eps: float = 1.0,
                   denominator: str = "distance", weighting: str = "gravity") -> UGGraph:
    """Undirected POI graph over consecutive visits.

    ``weighting="gravity"`` uses G*M*m / (r + eps); ``"reciprocal_distance"`` uses 1 / (r + eps)
    on the same edge set.
    """
    n = vocab.num_pois
    freq = np.zeros(n)
    pairs: Counter = Counter()
    for t in all_trajectories:
        idx = [vocab.poi_map[r.poi_id] for r in t.check_ins]
        for p in idx:
            freq[p] += 1
        for a, b in zip(idx, idx[1:]):
            if a != b:
                pairs[(min(a, b), max(a, b))] += 1

    if pairs:
        keys = sorted(pairs)
        i = np.array([k[0] for k in keys])
        j = np.array([k[1] for k in keys])
        g = np.array([pairs[k] for k in keys], dtype=np.float64)
        c = vocab.poi_coords
        a = np.radians(c[i])
        b = np.radians(c[j])
        h = (np.sin((b[:, 0] - a[:, 0]) / 2) ** 2
             + np.cos(a[:, 0]) * np.cos(b[:, 0]) * np.sin((b[:, 1] - a[:, 1]) / 2) ** 2)
        dist = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
        if weighting == "gravity":
            w = gravity_weight(g, freq[i], freq[j], dist, eps, denominator)
        elif weighting == "reciprocal_distance":
            r = dist if denominator == "distance" else dist ** 2
            w = 1.0 / (r + eps)
        else:
            raise ValueError(f"unknown UG weighting {weighting!r}")
        A = sp.coo_matrix((np.r_[w, w], (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    else:
        A = sp.csr_matrix((n, n))
    A.sort_indices()

    onehot = np.zeros((n, vocab.num_categories))
    onehot[np.arange(n), vocab.poi_category] = 1.0
    X = np.column_stack([
        _zscore(vocab.poi_coords[:, 0]),
        _zscore(vocab.poi_coords[:, 1]),
        _zscore(freq),
        onehot,
    ])
    return UGGraph(A, X)


# --------------------------------------------------------------------------- distance map

@dataclass
class DistanceMap:
    matrix: sp.csr_matrix
    sigma_km: float = 1.0
    delta_d_km: float = 5.0


def gaussian_proximity(dist_km, sigma_km: float = 1.0, delta_d_km: float = 5.0):
    d = np.asarray(dist_km, dtype=np.float64)
    inside = (d > 0) & (d < delta_d_km)
    return np.where(inside, np.exp(-np.square(d) / (2 * sigma_km ** 2)), 0.0)


def build_distance_map(vocab: Vocabulary, sigma_km: float = 1.0, delta_d_km: float = 5.0,
                       chunk: int = 512) -> DistanceMap:
    coords = vocab.poi_coords
    n = len(coords)
    rows, cols, vals = [], [], []
    for start in range(0, n, chunk):
        block = gaussian_proximity(haversine_matrix(coords[start:start + chunk], coords), sigma_km, delta_d_km)
        r, c = np.nonzero(block)
        rows.append(r + start)
        cols.append(c)
        vals.append(block[r, c])
    if n:
        M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    else:
        M = sp.csr_matrix((0, 0))
    M.setdiag(0)
    M.eliminate_zeros()
    # exact symmetry regardless of floating-point evaluation order
    M = ((M + M.T) * 0.5).tocsr()
    M.sort_indices()
    return DistanceMap(M, sigma_km, delta_d_km)


# --------------------------------------------------------------------------- bundle

@dataclass
class GraphBundle:
    category: CategoryGraph
    category_time: CategoryTimeGraph
    ug: UGGraph
    distance_map: DistanceMap
    vocab_fingerprint: str = ""
    options: dict | None = None

    def laplacians(self) -> dict:
        out = {"category": self.category.laplacian, "ug": self.ug.laplacian}
        out.update({f"ct_{k}": v for k, v in self.category_time.laplacians().items()})
        return out

    def save(self, path: str | os.PathLike) -> None:
        arrays: dict[str, np.ndarray] = {
            "category/adjacency": self.category.adjacency,
            "category/features": self.category.features,
            "category_time/original": self.category_time.original,
            "category_time/forward": self.category_time.forward,
            "category_time/backward": self.category_time.backward,
            "category_time/category_features": self.category_time.category_features,
            "category_time/time_features": self.category_time.time_features,
            "ug/features": self.ug.features,
        }
        sparse = {"ug/adjacency": self.ug.adjacency, "distance_map": self.distance_map.matrix}
        for name, lap in self.laplacians().items():
            key = f"laplacian/{name}"
            if sp.issparse(lap):
                sparse[key] = lap
            else:
                arrays[key] = lap
        for name, m in sparse.items():
            m = sp.csr_matrix(m)
            m.sort_indices()
            arrays[f"{name}/data"] = m.data
            arrays[f"{name}/indices"] = m.indices.astype(np.int64)
            arrays[f"{name}/indptr"] = m.indptr.astype(np.int64)
            arrays[f"{name}/shape"] = np.array(m.shape, dtype=np.int64)
        manifest = {
            "schema": BUNDLE_SCHEMA,
            "graphs": ["category", "category_time", "ug"],
            "relations": [r[0] for r in RELATIONS],
            "sparse": sorted(sparse),
            "sigma_km": self.distance_map.sigma_km,
            "delta_d_km": self.distance_map.delta_d_km,
            "vocab_fingerprint": self.vocab_fingerprint,
            "options": self.options or {},
        }
        # fixed timestamps so identical inputs give identical bytes
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            def put(name, data: bytes):
                info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_DEFLATED
                zf.writestr(info, data)

            put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                put(name + ".npy", buf.getvalue())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GraphBundle":
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("schema") != BUNDLE_SCHEMA:
                raise ValueError(f"unsupported graph bundle schema {manifest.get('schema')!r}")
            arr = {n[:-4]: np.load(io.BytesIO(zf.read(n)), allow_pickle=False)
                   for n in zf.namelist() if n.endswith(".npy")}

        def csr(name):
            return sp.csr_matrix((arr[f"{name}/data"], arr[f"{name}/indices"], arr[f"{name}/indptr"]),
                                 shape=tuple(arr[f"{name}/shape"]))

        return cls(
            category=CategoryGraph(arr["category/adjacency"], arr["category/features"]),
            category_time=CategoryTimeGraph(
                arr["category_time/original"], arr["category_time/forward"], arr["category_time/backward"],
                arr["category_time/category_features"], arr["category_time/time_features"],
            ),
            ug=UGGraph(csr("ug/adjacency"), arr["ug/features"]),
            distance_map=DistanceMap(csr("distance_map"), manifest["sigma_km"], manifest["delta_d_km"]),
            vocab_fingerprint=manifest.get("vocab_fingerprint", ""),
            options=manifest.get("options", {}),
        )

    @staticmethod
    def manifest(path: str | os.PathLike) -> dict:
        with zipfile.ZipFile(path) as zf:
            return json.loads(zf.read("manifest.json"))


def build_graphs(dataset, sigma_km: float = 1.0, delta_d_km: float = 5.0,
                 gravity_denominator: str = "distance", ug_weighting: str = "gravity") -> GraphBundle:
    vocab = dataset.vocab
    return GraphBundle(
        category=build_category_graph(dataset.train, vocab),
        category_time=build_category_time_graph(dataset.train, vocab),
        ug=build_ug_graph(dataset.all_trajectories, vocab, denominator=gravity_denominator,
                          weighting=ug_weighting),
        distance_map=build_distance_map(vocab, sigma_km, delta_d_km),
        vocab_fingerprint=vocab.fingerprint(),
        options={"gravity_denominator": gravity_denominator, "ug_weighting": ug_weighting},
    )
