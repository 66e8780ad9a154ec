"""AUC, normalized Gini, rejection-rate series and long-tail slice reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .datagen import bucket_index, bucket_labels


@dataclass
class EvalRecords:
    """Column-oriented evaluation records for one model on one dataset."""

    pltv: np.ndarray
    ltv: np.ndarray
    p_purchase: np.ndarray
    domain_id: np.ndarray
    ad_id: np.ndarray

    def __post_init__(self):
        self.pltv = np.asarray(self.pltv, dtype=np.float64)
        self.ltv = np.asarray(self.ltv, dtype=np.float64)
        self.p_purchase = np.asarray(self.p_purchase, dtype=np.float64)
        self.domain_id = np.asarray(self.domain_id, dtype=np.int64)
        self.ad_id = np.asarray(self.ad_id, dtype=np.int64)
        if np.any(self.ltv < 0):
            raise ValueError("ltv labels must be >= 0")

    def __len__(self):
        return len(self.ltv)

    def subset(self, mask) -> "EvalRecords":
        return EvalRecords(self.pltv[mask], self.ltv[mask], self.p_purchase[mask],
                           self.domain_id[mask], self.ad_id[mask])


def auc(ltv, score) -> Optional[float]:
    """Mann-Whitney AUC of ``score`` for purchasers (ltv > 0); ties count 1/2.

    Returns None when only one class is present.
    """
    positive = np.asarray(ltv, dtype=np.float64) > 0
    score = np.asarray(score, dtype=np.float64)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(score)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _gini(actual, order_key):
    """Lorenz Gini of ``actual`` sorted by descending ``order_key``; ties share the block mean."""
    order = np.argsort(-order_key, kind="stable")
    a = actual[order]
    k = order_key[order]
    starts = np.flatnonzero(np.r_[True, k[1:] != k[:-1]])
    sums = np.add.reduceat(a, starts)
    sizes = np.diff(np.r_[starts, a.size])
    a = np.repeat(sums / sizes, sizes)
    n = a.size
    return (np.cumsum(a).sum() / a.sum() - (n + 1) / 2.0) / n


def normalized_gini(ltv, pltv) -> Optional[float]:
    """Gini of the prediction ordering divided by the Gini of the oracle ordering.

    Returns None for empty input or when every label is zero (or all labels
    are equal, which leaves the oracle Gini at zero).
    """
    ltv = np.asarray(ltv, dtype=np.float64)
    pltv = np.asarray(pltv, dtype=np.float64)
    if ltv.size == 0 or ltv.sum() <= 0:
        return None
    best = _gini(ltv, ltv)
    if best <= 0:
        return None
    return float(_gini(ltv, pltv) / best)


def rejection_rate(reports: Sequence, window: int) -> np.ndarray:
    """Sliding-window fraction of rejected steps (one value per full window)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    rejected = np.array([not r.accepted for r in reports], dtype=np.float64)
    if rejected.size < window:
        return np.zeros(0)
    c = np.r_[0.0, np.cumsum(rejected)]
    return (c[window:] - c[:-window]) / window


def window_mean(reports: Sequence, start: int, stop: int) -> float:
    """Rejection rate over ``reports[start:stop]``."""
    chunk = reports[start:stop]
    if not chunk:
        raise ValueError("empty window")
    return float(np.mean([not r.accepted for r in chunk]))


@dataclass
class SliceRow:
    label: str
    n_ads: int
    n_records: int
    gini: Optional[float]
    auc: Optional[float]


def sliced_report(records: EvalRecords, edges: Sequence[float], ad_counts: Optional[dict] = None):
    """Gini per interval of per-ad sample counts.

    ``ad_counts`` maps ad id to its sample count (typically training counts);
    by default counts are taken from ``records`` themselves. Ads missing from
    ``ad_counts`` have count 0.
    """
    if ad_counts is None:
        ids, cnt = np.unique(records.ad_id, return_counts=True)
        ad_counts = dict(zip(ids.tolist(), cnt.tolist()))
    buckets = np.array([bucket_index(ad_counts.get(int(a), 0), edges) for a in records.ad_id],
                       dtype=np.int64)
    rows = []
    for i, label in enumerate(bucket_labels(edges)):
        mask = buckets == i
        sub = records.subset(mask)
        rows.append(SliceRow(label, len(np.unique(sub.ad_id)), int(mask.sum()),
                             normalized_gini(sub.ltv, sub.pltv) if len(sub) else None,
                             auc(sub.ltv, sub.p_purchase) if len(sub) else None))
    return rows


@dataclass
class DomainRow:
    domain: str
    n: int
    auc: Optional[float]
    gini: Optional[float]


def domain_report(records: EvalRecords) -> list:
    """Per-domain AUC/Gini rows followed by an unweighted 'average' row and a pooled row."""
    rows = []
    for d in np.unique(records.domain_id):
        sub = records.subset(records.domain_id == d)
        rows.append(DomainRow(str(int(d)), len(sub), auc(sub.ltv, sub.p_purchase),
                              normalized_gini(sub.ltv, sub.pltv)))
    aucs = [r.auc for r in rows if r.auc is not None]
    ginis = [r.gini for r in rows if r.gini is not None]
    rows.append(DomainRow("average", len(records),
                          float(np.mean(aucs)) if aucs else None,
                          float(np.mean(ginis)) if ginis else None))
    rows.append(DomainRow("pooled", len(records), auc(records.ltv, records.p_purchase),
                          normalized_gini(records.ltv, records.pltv)))
    return rows


def fmt(v) -> str:
    """Fixed-format number for reports; absent metrics print as empty cells."""
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def format_domain_report(rows) -> str:
    lines = ["section,key,n,auc,gini"]
    for r in rows:
        lines.append(f"domain,{r.domain},{r.n},{fmt(r.auc)},{fmt(r.gini)}")
    return "\n".join(lines) + "\n"


def format_slice_report(rows) -> str:
    lines = []
    for r in rows:
        lines.append(f"slice,{r.label},{r.n_records},{fmt(r.auc)},{fmt(r.gini)}")
    return "\n".join(lines) + ("\n" if lines else "")
