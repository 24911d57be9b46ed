"""Synthetic Foursquare-format check-in logs for smoke tests and demos.

Users follow time-of-day category routines, prefer nearby venues and keep a few
favourites, so the data carries sequential, temporal and spatial signal.
"""
from __future__ import annotations

from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

# name, preferred local hours, weekend boost
CATEGORIES = [
    ("Coffee Shop", (7, 8, 9, 15), 0.8),
    ("Office", (9, 10, 11, 14, 16), 0.1),
    ("Food Truck", (12, 13), 0.5),
    ("Restaurant", (12, 19, 20), 1.2),
    ("Gym", (6, 7, 18, 19), 1.0),
    ("Bar", (21, 22, 23, 0, 1), 1.5),
    ("Park", (10, 11, 15, 16), 2.0),
    ("Train Station", (8, 9, 17, 18), 0.6),
    ("Museum", (11, 13, 14, 15), 2.5),
    ("Grocery Store", (17, 18, 19), 1.3),
    ("Bookstore", (13, 16, 17), 1.4),
    ("Nightclub", (23, 0, 1, 2), 2.0),
]
FOURSQUARE_TIME = "%a %b %d %H:%M:%S +0000 %Y"


def _hour_affinity(hours, h: int) -> float:
    d = min(min(abs(h - x), 24 - abs(h - x)) for x in hours)
    return float(np.exp(-0.5 * d * d))


def generate(path, n_users: int = 40, n_pois: int = 80, n_days: int = 60, seed: int = 0,
             activity: float = 0.45, tz_offset: int = -240, center=(40.74, -73.98),
             spread_deg=(0.06, 0.08)) -> int:
    """Write a tab-separated check-in log; returns the number of rows written."""
    rng = np.random.default_rng(seed)
    n_cat = len(CATEGORIES)
    poi_cat = np.concatenate([np.arange(n_cat), rng.integers(0, n_cat, n_pois - n_cat)]) if n_pois >= n_cat \
        else rng.integers(0, n_cat, n_pois)
    lat = center[0] + rng.uniform(-1, 1, n_pois) * spread_deg[0]
    lon = center[1] + rng.uniform(-1, 1, n_pois) * spread_deg[1]
    popularity = rng.pareto(1.5, n_pois) + 1.0
    coords = np.radians(np.column_stack([lat, lon]))

    def dist_from(i):
        dlat = coords[:, 0] - coords[i, 0]
        dlon = coords[:, 1] - coords[i, 1]
        h = np.sin(dlat / 2) ** 2 + np.cos(coords[i, 0]) * np.cos(coords[:, 0]) * np.sin(dlon / 2) ** 2
        return 2 * 6371.0 * np.arcsin(np.sqrt(h))

    # sticky category transitions on top of the time preference
    trans = rng.dirichlet(np.full(n_cat, 0.3), size=n_cat) + 0.02
    start = datetime(2012, 4, 3, tzinfo=timezone.utc)
    rows = []
    for u in range(n_users):
        user_id = str(1 + u)
        favourites = set(rng.choice(n_pois, size=min(6, n_pois), replace=False).tolist())
        home = int(rng.integers(n_pois))
        for day in range(n_days):
            if rng.random() > activity:
                continue
            local_day = start + timedelta(days=day)
            weekend = local_day.weekday() >= 5
            hour = float(rng.uniform(10, 12) if weekend else rng.uniform(6.5, 9))
            prev_poi, prev_cat = home, None
            for _ in range(int(rng.integers(3, 8))):
                if hour >= 26:
                    break
                h = int(hour) % 24
                w = np.array([_hour_affinity(c[1], h) * (c[2] if weekend else 1.0) for c in CATEGORIES])
                if prev_cat is not None:
                    w = w * trans[prev_cat]
                cat = int(rng.choice(n_cat, p=w / w.sum()))
                cand = np.flatnonzero(poi_cat == cat)
                if cand.size == 0:
                    cand = np.arange(n_pois)
                d = dist_from(prev_poi)[cand]
                pw = popularity[cand] * np.exp(-d / 1.5)
                pw *= np.array([4.0 if c in favourites else 1.0 for c in cand])
                poi = int(rng.choice(cand, p=pw / pw.sum()))
                local = local_day + timedelta(hours=hour)
                utc = local - timedelta(minutes=tz_offset)
                rows.append((user_id, f"v{poi:05d}", f"c{poi_cat[poi]:03d}", CATEGORIES[poi_cat[poi]][0],
                             float(lat[poi]), float(lon[poi]), tz_offset, utc.strftime(FOURSQUARE_TIME)))
                prev_poi, prev_cat = poi, cat
                hour += float(rng.uniform(0.7, 3.0))
    with open(Path(path), "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write("\t".join([r[0], r[1], r[2], r[3], f"{r[4]:.6f}", f"{r[5]:.6f}", str(r[6]), r[7]]) + "\n")
    return len(rows)
