"""Graph disentangler with POI weighting: encoders, heads, maps and losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .config import ModelConfig
from .graphs import RELATIONS, GraphBundle, random_walk_laplacian, symmetric_laplacian
from .ingest import NUM_TIME_SLOTS


# --------------------------------------------------------------------------- functional pieces

class GCNLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        bound = 1.0 / math.sqrt(in_dim)
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, laplacian: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"feature width {h.shape[-1]} does not match layer input {self.weight.shape[0]}")
        hw = h @ self.weight
        lhw = torch.sparse.mm(laplacian, hw) if laplacian.is_sparse else laplacian @ hw
        return F.elu(lhw + self.bias)


def gcn_forward(laplacian: torch.Tensor, features: torch.Tensor, layers) -> torch.Tensor:
    """ELU(L H W + b) applied once per layer."""
    h = features
    for layer in layers:
        h = layer(laplacian, h)
    return h


class GCN(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * num_layers
        self.layers = nn.ModuleList(GCNLayer(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, laplacian, features):
        return gcn_forward(laplacian, features, self.layers)


class HeteroGCN(nn.Module):
    """Relation-specific GCN layers over [category nodes; time nodes], summed at each destination."""

    def __init__(self, num_categories: int, in_dim: int, hidden_dim: int, num_layers: int):
        super().__init__()
        self.num_categories = num_categories
        dims = [in_dim] + [hidden_dim] * num_layers
        self.layers = nn.ModuleList(
            nn.ModuleDict({rel: GCNLayer(a, b) for rel, *_ in RELATIONS}) for a, b in zip(dims, dims[1:])
        )

    def forward(self, laplacians: dict, features: torch.Tensor):
        missing = [rel for rel, *_ in RELATIONS if rel not in laplacians]
        if missing:
            raise KeyError(f"missing relations: {missing}")
        C = self.num_categories
        h = features
        for layer in self.layers:
            cat_out = 0
            time_out = 0
            for rel, _src, dst, _base in RELATIONS:
                z = layer[rel](laplacians[rel], h)
                if dst == "category":
                    cat_out = cat_out + z[:C]
                else:
                    time_out = time_out + z[C:]
            h = torch.cat([cat_out, time_out], dim=0)
        return h[:C], h[C:]


def make_proxies(cat_seq: torch.Tensor, time_seq: torch.Tensor, mask: torch.Tensor | None = None):
    """Mean over the valid steps of each (B, k, d) sequence."""
    if mask is None:
        return cat_seq.mean(-2), time_seq.mean(-2)
    m = mask.unsqueeze(-1).to(cat_seq.dtype)
    n = m.sum(-2).clamp_min(1.0)
    return (cat_seq * m).sum(-2) / n, (time_seq * m).sum(-2) / n


def bpr(pro: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    return F.softplus((pro * neg).sum(-1) - (pro * pos).sum(-1))


def disentangle_loss(a_cat, a_time, h_cat, h_ct, W1, W2, W3, W4) -> torch.Tensor:
    """Per-sample contrastive loss; the W's are callables (e.g. bias-free linear layers)."""
    i_c = W1(h_cat)
    i_ct = W2(h_ct)
    pro_c = W3(a_cat)
    pro_t = W4(a_time)
    return bpr(pro_c, i_c, i_ct) + bpr(pro_t, i_ct, i_c)


def transition_map(x_ug, laplacian, W_tp1, W_tp2, a_1, a_2, rows=None):
    """(phi1 1^T + 1 phi2^T) * (L + J); with ``rows`` given, ``laplacian`` holds only those rows."""
    phi1 = (x_ug @ W_tp1) @ a_1
    phi2 = (x_ug @ W_tp2) @ a_2
    if laplacian.is_sparse:
        laplacian = laplacian.to_dense()
    left = phi1 if rows is None else phi1[rows]
    return (left.unsqueeze(-1) + phi2.unsqueeze(0)) * (laplacian + 1.0)


def masked_attention(seq: torch.Tensor, mask: torch.Tensor | None = None):
    """Softmax over steps of the per-step mean score; returns (pooled, weights)."""
    scores = seq.mean(-1)
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    w = torch.softmax(scores, dim=-1)
    return (w.unsqueeze(-1) * seq).sum(-2), w


def fuse_and_predict(e_cat_seq, h_poi_seq, user_emb, poi_head: nn.Linear, mask=None, use_category=True):
    r_poi, w_poi = masked_attention(h_poi_seq, mask)
    if use_category:
        r_c, w_c = masked_attention(e_cat_seq, mask)
        e_poi = r_c + r_poi
    else:
        w_c = None
        e_poi = r_poi
    return poi_head(torch.cat([e_poi, user_emb], -1)), w_c, w_poi


def apply_maps(logits, tm_rows=None, dm_rows=None):
    out = logits
    if tm_rows is not None:
        out = out + tm_rows
    if dm_rows is not None:
        out = out + dm_rows
    return out


def encode_sequence(lstm: nn.LSTM, reps: torch.Tensor, lengths: torch.Tensor | None = None):
    """Run a batch-first LSTM from a zero state; returns (all hiddens, final hidden)."""
    if lengths is None:
        out, (h_n, _) = lstm(reps)
        return out, h_n[-1]
    packed = pack_padded_sequence(reps, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, (h_n, _) = lstm(packed)
    out, _ = pad_packed_sequence(out, batch_first=True, total_length=reps.shape[1])
    return out, h_n[-1]


def total_loss(poi_logits, cat_logits, time_pred, cl_loss, targets, use_cat=True, use_time=True, use_cl=True):
    """Sum of POI/category cross-entropy, time MSE and the contrastive term (batch means)."""
    zero = poi_logits.new_zeros(())
    parts = {
        "poi": F.cross_entropy(poi_logits, targets["poi"]),
        "cat": F.cross_entropy(cat_logits, targets["cat"]) if use_cat and cat_logits is not None else zero,
        "time": F.mse_loss(time_pred, targets["time"]) if use_time and time_pred is not None else zero,
        "cl": cl_loss.mean() if use_cl and cl_loss is not None else zero,
    }
    loss = parts["poi"] + parts["cat"] + parts["time"] + parts["cl"]
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite loss ({detail})")
    return loss, {k: float(v.detach()) for k, v in parts.items()}


# --------------------------------------------------------------------------- module

def _log_standardize(x: np.ndarray) -> np.ndarray:
    x = np.log1p(np.asarray(x, dtype=np.float64))
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - x.mean(axis=0)) / std


def _to_torch_sparse(m: sp.spmatrix) -> torch.Tensor:
    m = sp.coo_matrix(m)
    idx = torch.from_numpy(np.vstack([m.row, m.col]).astype(np.int64))
    return torch.sparse_coo_tensor(idx, torch.from_numpy(m.data.astype(np.float32)), m.shape,
                                   check_invariants=False).coalesce()


@dataclass
class ForwardOutput:
    poi_logits: torch.Tensor  # after map weighting
    raw_poi_logits: torch.Tensor
    cat_logits: torch.Tensor | None
    time_pred: torch.Tensor | None
    cl_loss: torch.Tensor | None  # per sample
    cat_attention: torch.Tensor | None
    poi_attention: torch.Tensor
    tm_rows: torch.Tensor | None
    dm_rows: torch.Tensor | None


class GDPW(nn.Module):
    def __init__(self, bundle: GraphBundle, num_users: int, config: ModelConfig):
        super().__init__()
        self.config = config
        v = config.variant
        d = config.hidden_dim
        L = config.gcn_layers
        C = bundle.category.adjacency.shape[0]
        P = bundle.ug.features.shape[0]
        self.num_categories, self.num_pois = C, P

        self.use_disentangle = v != "no_disentangle_layer"
        self.use_category_graph = v != "no_category_graph"
        self.use_ct_graph = v != "no_category_time_graph"
        self.use_ug_graph = v != "no_ug_graph"
        self.use_cl = self.use_disentangle and v != "no_contrastive"
        self.use_cat_loss = self.use_disentangle and v != "no_category_prediction"
        self.use_time_loss = self.use_disentangle and v != "no_time_prediction"
        self.use_tm = v != "no_tm"
        self.use_dm = v != "no_dm"

        cat_x = _log_standardize(bundle.category.features)
        self.register_buffer("cat_features", torch.tensor(cat_x, dtype=torch.float32), persistent=False)
        self.register_buffer("cat_laplacian", torch.tensor(random_walk_laplacian(bundle.category.adjacency),
                                                           dtype=torch.float32), persistent=False)
        ct = bundle.category_time
        ct_x = np.zeros((C + NUM_TIME_SLOTS, cat_x.shape[1] + ct.time_features.shape[1]))
        ct_x[:C, :cat_x.shape[1]] = _log_standardize(ct.category_features)
        ct_x[C:, cat_x.shape[1]:] = ct.time_features
        self.register_buffer("ct_features", torch.tensor(ct_x, dtype=torch.float32), persistent=False)
        self._ct_rel = [rel for rel, *_ in RELATIONS]
        for rel, lap in ct.laplacians().items():
            self.register_buffer(f"ct_lap_{rel}", torch.tensor(lap, dtype=torch.float32), persistent=False)

        ug_lap = symmetric_laplacian(bundle.ug.adjacency)
        self._ug_lap_csr = sp.csr_matrix(ug_lap)
        self._dm_csr = sp.csr_matrix(bundle.distance_map.matrix)
        self.register_buffer("ug_features", torch.tensor(bundle.ug.features, dtype=torch.float32), persistent=False)
        self.register_buffer("ug_laplacian", _to_torch_sparse(ug_lap), persistent=False)

        if self.use_disentangle:
            if self.use_category_graph:
                self.cat_gcn = GCN(cat_x.shape[1], d, L)
            else:
                self.cat_table = nn.Embedding(C, d)
            if self.use_ct_graph:
                self.ct_gcn = HeteroGCN(C, ct_x.shape[1], d, L)
            else:
                self.ct_cat_table = nn.Embedding(C, d)
                self.ct_time_table = nn.Embedding(NUM_TIME_SLOTS, d)
            self.lstm_cat = nn.LSTM(d, d, batch_first=True)
            self.lstm_ct = nn.LSTM(d, d, batch_first=True)
            pd_ = config.projection_dim
            self.W1 = nn.Linear(d, pd_, bias=False)
            self.W2 = nn.Linear(d, pd_, bias=False)
            self.W3 = nn.Linear(d, pd_, bias=False)
            self.W4 = nn.Linear(d, pd_, bias=False)
            self.fuse1 = nn.Linear(2 * d, d)
            self.cat_head = nn.Linear(2 * d, C)
            self.week_emb = nn.Embedding(7, d)
            self.time_head = nn.Linear(2 * d, 1)

        if self.use_ug_graph:
            self.ug_gcn = GCN(bundle.ug.features.shape[1], d, L)
        else:
            self.poi_table = nn.Embedding(P, d)
        self.lstm_poi = nn.LSTM(d, d, batch_first=True)
        self.user_emb = nn.Embedding(num_users, d)
        self.poi_head = nn.Linear(2 * d, P)

        if self.use_tm:
            in_ug = bundle.ug.features.shape[1]
            self.W_tp1 = nn.Parameter(torch.empty(in_ug, d))
            self.W_tp2 = nn.Parameter(torch.empty(in_ug, d))
            nn.init.xavier_uniform_(self.W_tp1)
            nn.init.xavier_uniform_(self.W_tp2)
            self.a_1 = nn.Parameter(torch.empty(d).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d)))
            self.a_2 = nn.Parameter(torch.empty(d).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d)))

    # -- node representations -------------------------------------------------------

    def ct_laplacians(self) -> dict:
        return {rel: getattr(self, f"ct_lap_{rel}") for rel in self._ct_rel}

    def node_representations(self):
        e_c = e_ctc = e_ctt = None
        if self.use_disentangle:
            e_c = (self.cat_gcn(self.cat_laplacian, self.cat_features) if self.use_category_graph
                   else self.cat_table.weight)
            if self.use_ct_graph:
                e_ctc, e_ctt = self.ct_gcn(self.ct_laplacians(), self.ct_features)
            else:
                e_ctc, e_ctt = self.ct_cat_table.weight, self.ct_time_table.weight
        e_ug = self.ug_gcn(self.ug_laplacian, self.ug_features) if self.use_ug_graph else self.poi_table.weight
        return e_c, e_ctc, e_ctt, e_ug

    def _rows(self, m: sp.csr_matrix, idx: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        dense = m[idx.cpu().numpy()].toarray()
        return torch.from_numpy(dense).to(dtype=like.dtype, device=like.device)

    def map_rows(self, last_poi: torch.Tensor, like: torch.Tensor):
        tm = dm = None
        if self.use_tm:
            lap_rows = self._rows(self._ug_lap_csr, last_poi, like)
            tm = transition_map(self.ug_features, lap_rows, self.W_tp1, self.W_tp2, self.a_1, self.a_2,
                                rows=last_poi)
        if self.use_dm:
            dm = self._rows(self._dm_csr, last_poi, like)
        return tm, dm

    # -- forward -------------------------------------------------------------------

    def forward(self, batch) -> ForwardOutput:
        pois, cats, slots, days = batch.pois, batch.categories, batch.time_slots, batch.days
        lengths = batch.lengths
        B, K = pois.shape
        mask = torch.arange(K, device=pois.device).unsqueeze(0) < lengths.unsqueeze(1)
        last = (lengths - 1).unsqueeze(1)

        e_c, e_ctc, e_ctt, e_ug = self.node_representations()
        eu = self.user_emb(batch.users)

        h_poi_seq, _ = encode_sequence(self.lstm_poi, e_ug[pois], lengths)

        cat_logits = time_pred = cl = e_cat_seq = None
        if self.use_disentangle:
            E_cc, E_ctc, E_ctt = e_c[cats], e_ctc[cats], e_ctt[slots]
            h_cat_seq, h_cat = encode_sequence(self.lstm_cat, E_cc, lengths)
            h_ct_seq, h_ct = encode_sequence(self.lstm_ct, E_ctc, lengths)
            if self.use_cl:
                a_c, a_t = make_proxies(E_cc, E_ctt, mask)
                cl = disentangle_loss(a_c, a_t, h_cat, h_ct, self.W1, self.W2, self.W3, self.W4)
            e_cat_seq = self.fuse1(torch.cat([h_cat_seq, h_ct_seq], -1))
            e_cat_final = self.fuse1(torch.cat([h_cat, h_ct], -1))
            cat_logits = self.cat_head(torch.cat([e_cat_final, eu], -1))
            last_slot = slots.gather(1, last).squeeze(1)
            last_day = days.gather(1, last).squeeze(1)
            time_pred = self.time_head(torch.cat([e_ctt[last_slot], self.week_emb(last_day)], -1)).squeeze(-1)

        raw, w_c, w_p = fuse_and_predict(e_cat_seq, h_poi_seq, eu, self.poi_head, mask,
                                         use_category=self.use_disentangle)
        last_poi = pois.gather(1, last).squeeze(1)
        tm, dm = self.map_rows(last_poi, raw)
        return ForwardOutput(apply_maps(raw, tm, dm), raw, cat_logits, time_pred, cl, w_c, w_p, tm, dm)

    def loss(self, out: ForwardOutput, batch):
        targets = {"poi": batch.target_poi, "cat": batch.target_category, "time": batch.target_time}
        return total_loss(out.poi_logits, out.cat_logits, out.time_pred, out.cl_loss, targets,
                          use_cat=self.use_cat_loss, use_time=self.use_time_loss, use_cl=self.use_cl)

    def full_transition_map(self) -> torch.Tensor:
        """Dense |P| x |P| transition map (for export and visualisation)."""
        if not self.use_tm:
            raise ValueError("this variant has no transition map")
        lap = torch.from_numpy(self._ug_lap_csr.toarray()).to(self.ug_features.dtype)
        return transition_map(self.ug_features, lap, self.W_tp1, self.W_tp2, self.a_1, self.a_2)
