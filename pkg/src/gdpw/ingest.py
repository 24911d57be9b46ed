"""Check-in log parsing, filtering, trajectory segmentation and sample generation."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DATASET_SCHEMA = "gdpw.dataset/1"
NUM_TIME_SLOTS = 48
MAX_GAP = timedelta(hours=24)
MIN_TRAJECTORY_LEN = 3
MIN_POI_CHECKINS = 10
MIN_USER_CHECKINS = 10
MAX_MALFORMED_FRACTION = 0.01


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class CheckInRecord:
    user_id: str
    poi_id: str
    category_id: str
    category_name: str
    latitude: float
    longitude: float
    utc_time: datetime
    tz_offset_minutes: int
    row: int = 0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")

    @property
    def local_time(self) -> datetime:
        # naive wall-clock time at the venue
        return (self.utc_time + timedelta(minutes=self.tz_offset_minutes)).replace(tzinfo=None)


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    check_ins: tuple[CheckInRecord, ...]

    def __len__(self):
        return len(self.check_ins)

    @property
    def start(self) -> datetime:
        return self.check_ins[0].utc_time


@dataclass(frozen=True)
class PredictionSample:
    user_index: int
    pois: tuple[int, ...]
    categories: tuple[int, ...]
    time_slots: tuple[int, ...]
    days: tuple[int, ...]
    local_times: tuple[datetime, ...]
    target_poi_index: int
    target_category_index: int
    target_time_fraction: float

    def __len__(self):
        return len(self.pois)


def _id_key(s: str):
    # numeric ids sort numerically, everything else lexicographically
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


@dataclass
class Vocabulary:
    users: list[str]
    pois: list[str]
    categories: list[str]
    category_names: list[str]
    poi_coords: np.ndarray  # (|P|, 2) lat, lon in degrees
    poi_category: np.ndarray  # (|P|,) category index
    user_map: dict[str, int] = field(init=False, repr=False)
    poi_map: dict[str, int] = field(init=False, repr=False)
    category_map: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.poi_coords = np.asarray(self.poi_coords, dtype=np.float64).reshape(-1, 2)
        self.poi_category = np.asarray(self.poi_category, dtype=np.int64)
        self.user_map = {u: i for i, u in enumerate(self.users)}
        self.poi_map = {p: i for i, p in enumerate(self.pois)}
        self.category_map = {c: i for i, c in enumerate(self.categories)}

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def num_pois(self) -> int:
        return len(self.pois)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def to_dict(self) -> dict:
        return {
            "users": list(self.users),
            "pois": [
                [p, float(lat), float(lon), int(c)]
                for p, (lat, lon), c in zip(self.pois, self.poi_coords.tolist(), self.poi_category.tolist())
            ],
            "categories": [[c, n] for c, n in zip(self.categories, self.category_names)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        pois = d["pois"]
        return cls(
            users=list(d["users"]),
            pois=[p[0] for p in pois],
            categories=[c[0] for c in d["categories"]],
            category_names=[c[1] for c in d["categories"]],
            poi_coords=np.array([[p[1], p[2]] for p in pois], dtype=np.float64).reshape(-1, 2),
            poi_category=np.array([p[3] for p in pois], dtype=np.int64),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# --------------------------------------------------------------------------- parsing

def _parse_utc(text: str) -> datetime:
    text = text.strip()
    try:
        # Foursquare style: "Tue Apr 03 18:00:09 +0000 2012"
        return datetime.strptime(text, "%a %b %d %H:%M:%S %z %Y").astimezone(timezone.utc)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def parse_line(line: str, row: int) -> CheckInRecord:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != 8:
        raise ValueError(f"expected 8 fields, got {len(parts)}")
    user, venue, cat_id, cat_name, lat, lon, offset, utc = parts
    return CheckInRecord(
        user_id=user.strip(),
        poi_id=venue.strip(),
        category_id=cat_id.strip(),
        category_name=cat_name.strip(),
        latitude=float(lat),
        longitude=float(lon),
        utc_time=_parse_utc(utc),
        tz_offset_minutes=int(offset),
        row=row,
    )


def read_checkins(raw_file: str | os.PathLike) -> tuple[list[CheckInRecord], list[int]]:
    """Parse every line; return records and the 1-based row numbers that failed."""
    path = Path(raw_file)
    if not path.is_file():
        raise IngestError(f"cannot read check-in file: {path}")
    records: list[CheckInRecord] = []
    bad: list[int] = []
    # the public Foursquare dumps contain a few non-UTF-8 bytes in venue names
    with open(path, encoding="utf-8", errors="replace") as fh:
        for row, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(parse_line(line, row))
            except (ValueError, OverflowError):
                bad.append(row)
    return records, bad


def parse_checkins(raw_file: str | os.PathLike, format: str = "foursquare_tsv") -> list[CheckInRecord]:
    if format != "foursquare_tsv":
        raise IngestError(f"unsupported format {format!r}")
    records, bad = read_checkins(raw_file)
    total = len(records) + len(bad)
    if bad:
        if len(bad) > MAX_MALFORMED_FRACTION * total:
            shown = ", ".join(map(str, bad[:20]))
            raise IngestError(f"{len(bad)}/{total} malformed rows (> 1%); first rows: {shown}")
        logger.warning("skipped %d malformed rows", len(bad))
    return records


# --------------------------------------------------------------------------- preprocessing

def filter_sparse(records: Sequence[CheckInRecord], min_poi: int = MIN_POI_CHECKINS,
                  min_user: int = MIN_USER_CHECKINS) -> list[CheckInRecord]:
    """Drop check-ins at rare POIs, then check-ins of light users. One pass, no iteration."""
    if not records:
        raise IngestError("no records to filter")
    poi_counts = Counter(r.poi_id for r in records)
    kept = [r for r in records if poi_counts[r.poi_id] >= min_poi]
    user_counts = Counter(r.user_id for r in kept)
    kept = [r for r in kept if user_counts[r.user_id] >= min_user]
    if not kept:
        raise IngestError("filtering removed every record")
    return kept


def segment_trajectories(records: Iterable[CheckInRecord], max_gap: timedelta = MAX_GAP,
                         min_len: int = MIN_TRAJECTORY_LEN) -> list[Trajectory]:
    """Split each user's history at gaps > max_gap; output is in global chronological order."""
    by_user: dict[str, list[CheckInRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)

    out: list[Trajectory] = []
    for user in sorted(by_user, key=_id_key):
        seq = sorted(by_user[user], key=lambda r: (r.local_time, r.row))
        run = [seq[0]]
        for prev, cur in zip(seq, seq[1:]):
            if cur.local_time - prev.local_time > max_gap:
                if len(run) >= min_len:
                    out.append(Trajectory(user, tuple(run)))
                run = []
            run.append(cur)
        if len(run) >= min_len:
            out.append(Trajectory(user, tuple(run)))
    out.sort(key=lambda t: (t.start, _id_key(t.user_id), t.check_ins[0].row))
    return out


def split_bounds(n: int) -> tuple[int, int]:
    return math.floor(0.8 * n), math.floor(0.9 * n)


def split_dataset(trajectories: Sequence[Trajectory]):
    if len(trajectories) < 10:
        raise IngestError(f"need at least 10 trajectories to split, got {len(trajectories)}")
    ordered = sorted(trajectories, key=lambda t: (t.start, _id_key(t.user_id), t.check_ins[0].row))
    a, b = split_bounds(len(ordered))
    return ordered[:a], ordered[a:b], ordered[b:]


def encode_time_slot(local_time: datetime) -> int:
    return local_time.hour + (24 if local_time.weekday() >= 5 else 0)


def time_fraction(local_time: datetime) -> float:
    secs = local_time.hour * 3600 + local_time.minute * 60 + local_time.second + local_time.microsecond / 1e6
    return secs / 86400.0


def build_vocabulary(trajectories: Iterable[Trajectory]) -> Vocabulary:
    users: set[str] = set()
    first_seen: dict[str, CheckInRecord] = {}
    cat_names: dict[str, str] = {}
    for t in trajectories:
        users.add(t.user_id)
        for r in t.check_ins:
            seen = first_seen.get(r.poi_id)
            if seen is None or r.row < seen.row:
                first_seen[r.poi_id] = r
            cat_names.setdefault(r.category_id, r.category_name)
    categories = sorted(cat_names, key=_id_key)
    cat_map = {c: i for i, c in enumerate(categories)}
    pois = sorted(first_seen, key=_id_key)
    return Vocabulary(
        users=sorted(users, key=_id_key),
        pois=pois,
        categories=categories,
        category_names=[cat_names[c] for c in categories],
        poi_coords=np.array([[first_seen[p].latitude, first_seen[p].longitude] for p in pois]).reshape(-1, 2),
        poi_category=np.array([cat_map[first_seen[p].category_id] for p in pois], dtype=np.int64),
    )


def make_samples(trajectories: Iterable[Trajectory], vocab: Vocabulary) -> list[PredictionSample]:
    """One sample per prefix of length k = 2 .. m-1, predicting the following check-in."""
    samples = []
    for t in trajectories:
        u = vocab.user_map[t.user_id]
        pois = [vocab.poi_map[r.poi_id] for r in t.check_ins]
        cats = [vocab.category_map[r.category_id] for r in t.check_ins]
        times = [r.local_time for r in t.check_ins]
        slots = [encode_time_slot(x) for x in times]
        days = [x.weekday() for x in times]
        for k in range(2, len(pois)):
            samples.append(PredictionSample(
                user_index=u,
                pois=tuple(pois[:k]),
                categories=tuple(cats[:k]),
                time_slots=tuple(slots[:k]),
                days=tuple(days[:k]),
                local_times=tuple(times[:k]),
                target_poi_index=pois[k],
                target_category_index=cats[k],
                target_time_fraction=time_fraction(times[k]),
            ))
    return samples


# --------------------------------------------------------------------------- dataset container

@dataclass
class Dataset:
    vocab: Vocabulary
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]
    meta: dict = field(default_factory=dict)

    @property
    def all_trajectories(self) -> list[Trajectory]:
        return [*self.train, *self.val, *self.test]

    def split(self, name: str) -> list[Trajectory]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def samples(self, name: str) -> list[PredictionSample]:
        return make_samples(self.split(name), self.vocab)

    def stats(self) -> dict:
        trajs = self.all_trajectories
        return {
            "users": len({t.user_id for t in trajs}),
            "pois": len({r.poi_id for t in trajs for r in t.check_ins}),
            "categories": len({r.category_id for t in trajs for r in t.check_ins}),
            "checkins": sum(len(t) for t in trajs),
            "trajectories": len(trajs),
            "train_trajectories": len(self.train),
            "val_trajectories": len(self.val),
            "test_trajectories": len(self.test),
        }

    def save(self, path: str | os.PathLike) -> None:
        def enc(trajs):
            return [
                [t.user_id, [[r.row, r.poi_id, r.category_id, r.utc_time.strftime("%Y-%m-%dT%H:%M:%S"),
                              r.tz_offset_minutes] for r in t.check_ins]]
                for t in trajs
            ]

        def sample_index(trajs):
            return [[i, k] for i, t in enumerate(trajs) for k in range(2, len(t))]

        payload = {
            "schema": DATASET_SCHEMA,
            "meta": self.meta,
            "stats": self.stats(),
            "vocab": self.vocab.to_dict(),
            "splits": {name: enc(self.split(name)) for name in ("train", "val", "test")},
            # (trajectory index, prefix length) pairs; targets follow from the trajectory
            "samples": {name: sample_index(self.split(name)) for name in ("train", "val", "test")},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Dataset":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("schema") != DATASET_SCHEMA:
            raise IngestError(f"unsupported dataset schema {payload.get('schema')!r}")
        vocab = Vocabulary.from_dict(payload["vocab"])
        names = dict(zip(vocab.categories, vocab.category_names))
        poi_idx = vocab.poi_map

        def dec(rows):
            out = []
            for user, cis in rows:
                recs = []
                for row, poi, cat, utc, off in cis:
                    lat, lon = vocab.poi_coords[poi_idx[poi]]
                    recs.append(CheckInRecord(
                        user_id=user, poi_id=poi, category_id=cat, category_name=names[cat],
                        latitude=float(lat), longitude=float(lon),
                        utc_time=datetime.fromisoformat(utc).replace(tzinfo=timezone.utc),
                        tz_offset_minutes=off, row=row,
                    ))
                out.append(Trajectory(user, tuple(recs)))
            return out

        s = payload["splits"]
        return cls(vocab, dec(s["train"]), dec(s["val"]), dec(s["test"]), meta=payload.get("meta", {}))


def preprocess(raw_file: str | os.PathLike) -> Dataset:
    """Full pipeline: parse, filter, segment, split, index."""
    records, bad = read_checkins(raw_file)
    total = len(records) + len(bad)
    if bad and len(bad) > MAX_MALFORMED_FRACTION * total:
        raise IngestError(f"{len(bad)}/{total} malformed rows (> 1%); first rows: "
                          + ", ".join(map(str, bad[:20])))
    filtered = filter_sparse(records)
    trajs = segment_trajectories(filtered)
    train, val, test = split_dataset(trajs)
    vocab = build_vocabulary(trajs)
    meta = {
        "raw_records": len(records),
        "malformed_rows": len(bad),
        "filtered_checkins": len(filtered),
        "sample_policy": "all_prefixes",
    }
    return Dataset(vocab, train, val, test, meta=meta)
