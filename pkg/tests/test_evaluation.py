import json
from datetime import timedelta

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from gdpw import evaluation as E
from gdpw import training
from gdpw.config import ModelConfig
from gdpw.model import GDPW

import oracles
from conftest import rec

ranks_st = st.lists(st.integers(1, 200), min_size=1, max_size=50)


def test_acc_examples():
    assert E.acc_at_k([1, 3, 12], 5) == pytest.approx(2 / 3)
    assert E.acc_at_k([1, 1, 1], 1) == 1.0
    assert E.acc_at_k([4, 2, 6], 6) == 1.0  # k = |P| for a 6-POI vocabulary


def test_mrr_examples():
    assert E.mrr([1, 3, 12]) == pytest.approx((1 + 1 / 3 + 1 / 12) / 3)
    assert E.mrr([1, 3, 12]) == pytest.approx(0.47222, abs=1e-5)
    assert E.mrr([1, 1]) == 1.0
    assert E.mrr([4]) == 0.25


def test_empty_ranks_raise():
    with pytest.raises(ValueError):
        E.acc_at_k([], 1)
    with pytest.raises(ValueError):
        E.mrr([])


@given(ranks_st)
def test_acc_monotone_in_k(ranks):
    vals = [E.acc_at_k(ranks, k) for k in range(1, 202)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


@given(ranks_st)
def test_mrr_bounds(ranks):
    m = E.mrr(ranks)
    assert 0 < m <= 1
    a1 = E.acc_at_k(ranks, 1)
    assert a1 <= m + 1e-12
    assert m <= a1 + (1 - a1) / 2 + 1e-12


def test_ranks_match_brute_force():
    rng = np.random.default_rng(0)
    scores = rng.integers(0, 6, size=(1000, 15)).astype(np.float64)  # plenty of ties
    targets = rng.integers(0, 15, size=1000)
    got = E.ranks_from_scores(scores, targets)
    expected = [oracles.brute_rank(list(s), int(t)) for s, t in zip(scores, targets)]
    assert got.tolist() == expected


def test_report_serialisation(tmp_path):
    r = E.EvalReport.from_ranks([1, 2, 30], fingerprint="abc", label="no_dm")
    d = json.loads(r.to_json())
    assert d["acc_at"]["5"] == pytest.approx(2 / 3)
    assert d["sample_policy"] == "all_prefixes"
    assert "Acc@10" in r.format()
    E.append_ledger(r, tmp_path / "results.jsonl")
    E.append_ledger(r, tmp_path / "results.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "results.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and rows[0]["label"] == "no_dm" and rows[0]["acc@1"] == pytest.approx(1 / 3)


# --------------------------------------------------------------------------- model evaluation

def _model(mini, variant="full"):
    ds, bundle = mini
    torch.manual_seed(0)
    return GDPW(bundle, ds.vocab.num_users, ModelConfig(hidden_dim=4, projection_dim=4, variant=variant))


def test_evaluate_checkpoint_twice_identical(mini, tmp_path):
    ds, bundle = mini
    m = _model(mini)
    path = tmp_path / "m.pt"
    training.save_checkpoint(path, m, ds.vocab.num_users, ds.vocab.fingerprint())
    a = E.evaluate(path, ds.samples("test"), bundle, ds.vocab.fingerprint())
    b = E.evaluate(path, ds.samples("test"), bundle, ds.vocab.fingerprint())
    assert a == b and a.to_json() == b.to_json()


def test_evaluate_rejects_other_vocabulary(mini, tmp_path):
    ds, bundle = mini
    path = tmp_path / "m.pt"
    training.save_checkpoint(path, _model(mini), ds.vocab.num_users, ds.vocab.fingerprint())
    with pytest.raises(ValueError):
        E.evaluate(path, ds.samples("test"), bundle, "f" * 64)


def test_zero_maps_equal_raw_ranking(mini):
    ds, _ = mini
    m = _model(mini)
    samples = ds.samples("train")
    with torch.no_grad():
        m.a_1.zero_()
        m.a_2.zero_()
    m._dm_csr = m._dm_csr * 0
    with torch.no_grad():
        out = m(training.make_batch(samples))
    assert torch.equal(out.poi_logits, out.raw_poi_logits)
    weighted = E.model_ranks(m, samples)
    raw = E.model_ranks(m, samples, zero_maps=True)
    assert np.array_equal(weighted, raw)
    assert np.array_equal(raw, E.ranks_from_scores(out.raw_poi_logits, torch.tensor([s.target_poi_index for s in samples])))


def test_batch_size_does_not_change_ranks(mini):
    ds, _ = mini
    m = _model(mini)
    samples = ds.samples("train")
    assert np.array_equal(E.model_ranks(m, samples, batch_size=3), E.model_ranks(m, samples, batch_size=100))


def test_popularity_baseline_matches_oracle(synth_dataset):
    ds = synth_dataset
    vocab = ds.vocab
    counts = [0] * vocab.num_pois
    for t in ds.train:
        for r in t.check_ins:
            counts[vocab.poi_map[r.poi_id]] += 1
    ranks = [oracles.brute_rank(counts, s.target_poi_index) for s in ds.samples("test")]
    rep = E.popularity_baseline(ds, "test")
    assert rep.mrr == pytest.approx(E.mrr(ranks), abs=1e-12)
    assert rep.acc_at[1] == pytest.approx(E.acc_at_k(ranks, 1), abs=1e-12)
    assert rep.n_samples == len(ds.samples("test"))


def test_popularity_scores():
    assert E.popularity_scores([[0, 2, 2], [1, 2]], 4).tolist() == [1, 1, 3, 0]


def test_unknown_ablation_variant(mini):
    ds, bundle = mini
    with pytest.raises(ValueError, match="unknown"):
        E.run_ablation("no_everything", ds, ModelConfig(), bundle)


def test_run_ablation_change_ug_rebuilds_graph(mini, monkeypatch):
    ds, bundle = mini
    seen = {}

    def fake_fit(train, val, b, n_users, cfg, run_dir=None):
        seen["bundle"], seen["cfg"] = b, cfg
        torch.manual_seed(0)
        return GDPW(b, n_users, cfg).eval()

    monkeypatch.setattr(training, "fit", fake_fit)
    cfg = ModelConfig(hidden_dim=4, projection_dim=4)
    rep = E.run_ablation("change_ug_graph", ds, cfg, bundle)
    assert rep.label == "change_ug_graph"
    assert seen["bundle"].options["ug_weighting"] == "reciprocal_distance"
    assert seen["cfg"].variant == "change_ug_graph"
    E.run_ablation("no_dm", ds, cfg, bundle)
    assert seen["bundle"] is bundle


def test_trained_model_beats_popularity_on_synthetic(synth_dataset, synth_bundle):
    cfg = ModelConfig(hidden_dim=32, projection_dim=32, learning_rate=5e-3, epochs=6, patience=3, seed=0)
    model = training.fit(synth_dataset.samples("train"), synth_dataset.samples("val"), synth_bundle,
                         synth_dataset.vocab.num_users, cfg)
    trained = E.evaluate_model(model, synth_dataset.samples("test"))
    pop = E.popularity_baseline(synth_dataset, "test")
    assert trained.acc_at[1] > pop.acc_at[1]
    assert trained.mrr > pop.mrr


# --------------------------------------------------------------------------- histogram

def _records():
    recs = []
    for i in range(30):
        recs.append(rec(cat="bar", name="Bar", hours=i * 5, row=i))
    recs.append(rec(cat="cafe", name="Café", hours=1, row=99))
    return recs


def test_histogram_partition():
    recs = _records()
    bins = E.category_time_histogram(recs, "Bar")
    assert bins.shape == (48,)
    assert bins.sum() == 30
    # recompute with the slot rule directly
    expected = np.zeros(48, dtype=int)
    for r in recs[:30]:
        lt = r.local_time
        expected[oracles.slot_of(lt.weekday(), lt.hour)] += 1
    assert bins.tolist() == expected.tolist()


def test_histogram_empty_category():
    assert E.category_time_histogram(_records(), "Museum", known_categories=["Museum"]).sum() == 0


def test_histogram_unknown_category_lists_near_matches():
    with pytest.raises(KeyError, match="Bar"):
        E.category_time_histogram(_records(), "Barr")


def test_histogram_uses_local_time():
    r = rec(cat="bar", name="Bar", hours=0, offset=-300)  # 08:00 UTC Monday -> 03:00 local
    assert r.local_time.hour == 3
    assert E.category_time_histogram([r], "Bar")[3] == 1
    assert r.utc_time + timedelta(minutes=-300) == r.local_time.replace(tzinfo=r.utc_time.tzinfo)
