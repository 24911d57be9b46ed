"""Ranking metrics, split evaluation, the ablation harness and category-time histograms."""
from __future__ import annotations

import difflib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .ingest import CheckInRecord, Dataset, PredictionSample, encode_time_slot

K_VALUES = (1, 5, 10, 20)


def acc_at_k(ranks: Sequence[int], k: int) -> float:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(r <= k))


def mrr(ranks: Sequence[int]) -> float:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks")
    return float(np.mean(1.0 / r))


def ranks_from_scores(scores, targets) -> np.ndarray:
    """1-based rank of each target under descending score; ties go to the lower POI index."""
    s = torch.as_tensor(scores)
    t = torch.as_tensor(targets, dtype=torch.long)
    target_score = s.gather(1, t.unsqueeze(1))
    higher = (s > target_score).sum(1)
    idx = torch.arange(s.shape[1]).unsqueeze(0)
    tied_before = ((s == target_score) & (idx < t.unsqueeze(1))).sum(1)
    return (higher + tied_before + 1).numpy()


@dataclass
class EvalReport:
    acc_at: dict
    mrr: float
    n_samples: int
    fingerprint: str = ""
    label: str = "full"
    sample_policy: str = "all_prefixes"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks, **kw) -> "EvalReport":
        return cls(acc_at={k: acc_at_k(ranks, k) for k in K_VALUES}, mrr=mrr(ranks), n_samples=len(ranks), **kw)

    def row(self) -> dict:
        return {"label": self.label, "fingerprint": self.fingerprint, "n": self.n_samples,
                **{f"acc@{k}": v for k, v in self.acc_at.items()}, "mrr": self.mrr,
                "sample_policy": self.sample_policy}

    def to_json(self) -> str:
        d = asdict(self)
        d["acc_at"] = {str(k): v for k, v in self.acc_at.items()}
        return json.dumps(d, sort_keys=True)

    def format(self) -> str:
        accs = " ".join(f"Acc@{k}={v:.4f}" for k, v in self.acc_at.items())
        return f"[{self.label}] {accs} MRR={self.mrr:.4f} (n={self.n_samples}, {self.sample_policy})"


def append_ledger(report: EvalReport, path: str | os.PathLike) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(report.row(), sort_keys=True) + "\n")


@torch.no_grad()
def model_ranks(model, samples: Sequence[PredictionSample], batch_size: int = 256, zero_maps: bool = False):
    from .training import collate

    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for batch in collate(samples, batch_size, seed=None):
        res = model(batch.to(dtype=dtype))
        scores = res.raw_poi_logits if zero_maps else res.poi_logits
        out.append(ranks_from_scores(scores, batch.target_poi))
    return np.concatenate(out)


def evaluate_model(model, samples, batch_size: int = 256, zero_maps: bool = False, label: str | None = None):
    ranks = model_ranks(model, samples, batch_size, zero_maps)
    return EvalReport.from_ranks(ranks, fingerprint=model.config.fingerprint(),
                                 label=label or model.config.variant)


def evaluate(checkpoint, split_samples, graph_bundle, vocab_fingerprint: str | None = None, **kw) -> EvalReport:
    """Load a checkpoint (validating its vocabulary) and evaluate it on the given samples."""
    from .training import load_checkpoint

    model, _ = load_checkpoint(checkpoint, graph_bundle, vocab_fingerprint)
    return evaluate_model(model, split_samples, **kw)


def popularity_scores(poi_sequences: Iterable[Sequence[int]], num_pois: int) -> np.ndarray:
    counts = np.zeros(num_pois)
    for seq in poi_sequences:
        np.add.at(counts, np.asarray(seq, dtype=np.int64), 1)
    return counts


def popularity_baseline(dataset: Dataset, split: str = "test") -> EvalReport:
    """Rank every POI by its training check-in count, independent of the prefix."""
    vocab = dataset.vocab
    counts = popularity_scores(([vocab.poi_map[r.poi_id] for r in t.check_ins] for t in dataset.train),
                               vocab.num_pois)
    # same scores for every sample: the rank of each POI is fixed
    order = np.lexsort((np.arange(vocab.num_pois), -counts))
    rank_of = np.empty(vocab.num_pois, dtype=np.int64)
    rank_of[order] = np.arange(1, vocab.num_pois + 1)
    ranks = rank_of[[s.target_poi_index for s in dataset.samples(split)]]
    return EvalReport.from_ranks(ranks, label="popularity")


def run_ablation(variant: str, dataset: Dataset, config: ModelConfig, bundle=None,
                 run_dir: str | os.PathLike | None = None, split: str = "test") -> EvalReport:
    """Train one variant under ``config`` (otherwise unchanged) and evaluate it."""
    from dataclasses import replace

    from .config import VARIANTS
    from .graphs import build_graphs
    from .training import fit

    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    cfg = replace(config, variant=variant)
    if variant == "change_ug_graph" or bundle is None:
        bundle = build_graphs(dataset, cfg.sigma_km, cfg.delta_d_km, cfg.gravity_denominator,
                              ug_weighting="reciprocal_distance" if variant == "change_ug_graph" else "gravity")
    model = fit(dataset.samples("train"), dataset.samples("val"), bundle, dataset.vocab.num_users, cfg,
                run_dir=run_dir)
    return evaluate_model(model, dataset.samples(split), label=variant)


def category_time_histogram(records: Iterable[CheckInRecord], category_name: str,
                            known_categories: Iterable[str] = ()) -> np.ndarray:
    """48 bins: weekday hours 0-23 then weekend hours 0-23."""
    records = list(records)
    names = {r.category_name for r in records} | set(known_categories)
    if category_name not in names:
        near = difflib.get_close_matches(category_name, sorted(names), n=5)
        raise KeyError(f"unknown category {category_name!r}; close matches: {near}")
    bins = np.zeros(48, dtype=np.int64)
    for r in records:
        if r.category_name == category_name:
            bins[encode_time_slot(r.local_time)] += 1
    return bins
