"""Batch assembly, the optimisation loop and checkpoints."""
from __future__ import annotations

import json
import logging
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ModelConfig, RunConfig, save_config
from .graphs import GraphBundle
from .ingest import PredictionSample
from .model import GDPW

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "gdpw.checkpoint/1"


@dataclass
class Batch:
    pois: torch.Tensor  # (B, K) long, zero-padded
    categories: torch.Tensor
    time_slots: torch.Tensor
    days: torch.Tensor
    lengths: torch.Tensor  # (B,)
    users: torch.Tensor
    target_poi: torch.Tensor
    target_category: torch.Tensor
    target_time: torch.Tensor  # (B,) float

    def __len__(self):
        return self.pois.shape[0]

    @property
    def mask(self) -> torch.Tensor:
        K = self.pois.shape[1]
        return torch.arange(K).unsqueeze(0) < self.lengths.unsqueeze(1)

    def to(self, dtype=None, device=None) -> "Batch":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if device is not None:
            kw = {k: v.to(device) for k, v in kw.items()}
        if dtype is not None:
            kw["target_time"] = kw["target_time"].to(dtype)
        return Batch(**kw)


def make_batch(samples: Sequence[PredictionSample]) -> Batch:
    B = len(samples)
    K = max(len(s) for s in samples)
    arr = np.zeros((4, B, K), dtype=np.int64)
    for b, s in enumerate(samples):
        n = len(s)
        arr[0, b, :n] = s.pois
        arr[1, b, :n] = s.categories
        arr[2, b, :n] = s.time_slots
        arr[3, b, :n] = s.days
    t = torch.from_numpy(arr)
    return Batch(
        pois=t[0], categories=t[1], time_slots=t[2], days=t[3],
        lengths=torch.tensor([len(s) for s in samples], dtype=torch.long),
        users=torch.tensor([s.user_index for s in samples], dtype=torch.long),
        target_poi=torch.tensor([s.target_poi_index for s in samples], dtype=torch.long),
        target_category=torch.tensor([s.target_category_index for s in samples], dtype=torch.long),
        target_time=torch.tensor([s.target_time_fraction for s in samples], dtype=torch.float32),
    )


def collate(samples: Sequence[PredictionSample], batch_size: int, seed: int | None = None,
            epoch: int = 0) -> list[Batch]:
    """Split into padded batches; shuffled under (seed, epoch) unless seed is None."""
    if not samples:
        raise ValueError("no samples to collate")
    order = list(range(len(samples)))
    if seed is not None:
        random.Random(seed * 100003 + epoch).shuffle(order)
    return [make_batch([samples[i] for i in order[s:s + batch_size]]) for s in range(0, len(order), batch_size)]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: GDPW, num_users: int, vocab_fingerprint: str, metrics: dict | None = None,
                    epoch: int = 0, optimizer: torch.optim.Optimizer | None = None) -> None:
    torch.save({
        "schema": CHECKPOINT_SCHEMA,
        "config": model.config.to_dict(),
        "num_users": num_users,
        "vocab_fingerprint": vocab_fingerprint,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "metrics": metrics or {},
        "epoch": epoch,
    }, path)


def load_checkpoint(path, bundle: GraphBundle, vocab_fingerprint: str | None = None):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {ckpt.get('schema')!r}")
    expected = vocab_fingerprint if vocab_fingerprint is not None else bundle.vocab_fingerprint
    if expected and ckpt["vocab_fingerprint"] and ckpt["vocab_fingerprint"] != expected:
        raise ValueError("checkpoint vocabulary does not match the dataset/graph bundle")
    model = GDPW(bundle, ckpt["num_users"], ModelConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt


# --------------------------------------------------------------------------- training

def train_epoch(model: GDPW, batches: Sequence[Batch], optimizer, grad_clip: float = 0.0) -> dict:
    model.train()
    totals: dict[str, float] = {}
    n = 0
    for i, batch in enumerate(batches):
        optimizer.zero_grad()
        out = model(batch)
        try:
            loss, parts = model.loss(out, batch)
        except FloatingPointError as e:
            raise FloatingPointError(f"batch {i}: {e}") from None
        loss.backward()
        if grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
        optimizer.step()
        w = len(batch)
        n += w
        totals["loss"] = totals.get("loss", 0.0) + float(loss.detach()) * w
        for k, v in parts.items():
            totals[k] = totals.get(k, 0.0) + v * w
    return {k: v / n for k, v in totals.items()}


def make_optimizer(model: GDPW, config: ModelConfig):
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)


def fit(train_samples, val_samples, bundle: GraphBundle, num_users: int, config: ModelConfig,
        run_dir: str | os.PathLike | None = None, run_config: RunConfig | None = None,
        progress: bool = False) -> GDPW:
    """Adam training with per-epoch validation Acc@1; returns the best-validation model.

    With ``run_dir`` set, writes ``config.yaml``, ``metrics.jsonl``, ``best.pt`` and ``final.pt``.
    """
    from .evaluation import evaluate_model

    seed_everything(config.seed)
    model = GDPW(bundle, num_users, config)
    opt = make_optimizer(model, config)
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        save_config(run_config or RunConfig(model=config), run / "config.yaml")
        (run / "metrics.jsonl").write_text("")

    best_acc, best_state, stale = -1.0, None, 0
    for epoch in range(1, config.epochs + 1):
        batches = collate(train_samples, config.batch_size, seed=config.seed, epoch=epoch)
        stats = train_epoch(model, batches, opt, config.grad_clip)
        val = evaluate_model(model, val_samples, batch_size=max(config.batch_size, 256)) if val_samples else None
        record = {"epoch": epoch, **{f"train_{k}": v for k, v in stats.items()}}
        if val is not None:
            record.update({"val_acc1": val.acc_at[1], "val_acc5": val.acc_at[5],
                           "val_acc10": val.acc_at[10], "val_mrr": val.mrr})
        msg = " ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())
        (logger.info if not progress else print)(msg)
        if run is not None:
            with open(run / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

        acc = val.acc_at[1] if val is not None else -stats["loss"]
        if acc > best_acc:
            best_acc, stale = acc, 0
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if run is not None:
                save_checkpoint(run / "best.pt", model, num_users, bundle.vocab_fingerprint,
                                metrics=record, epoch=epoch, optimizer=opt)
        else:
            stale += 1
        if run is not None:
            save_checkpoint(run / "final.pt", model, num_users, bundle.vocab_fingerprint,
                            metrics=record, epoch=epoch, optimizer=opt)
        if stale >= config.patience:
            logger.info("early stop after epoch %d", epoch)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model
