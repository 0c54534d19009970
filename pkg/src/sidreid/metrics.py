"""mAP / CMC for retrieval and mean attribute accuracy for recognition."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


def average_precision(relevant_in_rank_order) -> float:
    """AP of one ranking given a boolean relevance vector in ranked order."""
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    n_rel = rel.sum()
    if n_rel == 0:
        raise ValueError("average precision is undefined without relevant items")
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, len(rel) + 1)
    return float(precision[rel].sum() / n_rel)


def cmc(relevance: Sequence[np.ndarray], max_rank: int | None = None) -> np.ndarray:
    """cmc[k-1] = fraction of queries whose first relevant item is within the top k.

    ``relevance`` holds one ranked boolean vector per query; queries without
    any relevant item are skipped.
    """
    firsts = []
    for rel in relevance:
        rel = np.asarray(rel, dtype=bool)
        if rel.any():
            firsts.append(int(np.argmax(rel)))
    if not firsts:
        raise ValueError("no query has a relevant gallery item")
    if max_rank is None:
        max_rank = max(len(r) for r in relevance)
    firsts = np.array(firsts)
    return np.array([(firsts < k).mean() for k in range(1, max_rank + 1)])


def retrieval_metrics(scores: np.ndarray, relevant: np.ndarray, keep: np.ndarray | None = None,
                      max_rank: int = 20) -> tuple[float, np.ndarray, int]:
    """mAP and CMC from a (Q, N) score matrix and (Q, N) relevance mask.

    ``keep`` masks out gallery items per query (protocol filtering). Ties are
    broken by gallery index. Returns (mAP, cmc[:max_rank], number of valid queries).
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    if scores.shape[0] == 0:
        raise ValueError("no queries to evaluate")
    if keep is None:
        keep = np.ones_like(relevant)
    order = np.argsort(-scores, axis=1, kind="stable")
    rel_sorted = np.take_along_axis(relevant, order, 1)
    keep_sorted = np.take_along_axis(keep, order, 1)
    aps, rels = [], []
    for q in range(scores.shape[0]):
        r = rel_sorted[q][keep_sorted[q]]
        if not r.any():
            log.warning("query %d has no relevant gallery item; excluded", q)
            continue
        aps.append(average_precision(r))
        rels.append(r)
    if not aps:
        raise ValueError("no query has a relevant gallery item")
    width = min(max_rank, min(len(r) for r in rels))
    curve = cmc(rels, width)
    if width < max_rank:
        curve = np.concatenate([curve, np.ones(max_rank - width) * curve[-1]])
    return float(np.mean(aps)), curve, len(aps)


def reid_relevance(q_pids, g_pids, q_cams=None, g_cams=None, protocol_filter=False):
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    relevant = q_pids[:, None] == g_pids[None, :]
    keep = np.ones_like(relevant)
    if protocol_filter:
        keep = ~(relevant & (np.asarray(q_cams)[:, None] == np.asarray(g_cams)[None, :]))
    return relevant, keep


def mean_attribute_accuracy(predictions: Sequence[Mapping[str, str]], truth: Sequence[Mapping[str, str]],
                            attributes: Sequence[str] | None = None, balanced: bool = False):
    """Per-attribute accuracy over images and their unweighted mean.

    With ``balanced=True`` each attribute's score is the mean of its per-label
    recalls instead of plain accuracy.
    """
    if len(predictions) != len(truth):
        raise ValueError("predictions and truth differ in length")
    if not truth:
        raise ValueError("nothing to score")
    attributes = list(attributes or truth[0].keys())
    per = {}
    for a in attributes:
        try:
            pred = np.array([p[a] for p in predictions])
        except KeyError:
            raise ValueError(f"missing prediction for attribute {a!r}") from None
        gt = np.array([t[a] for t in truth])
        if balanced:
            per[a] = float(np.mean([(pred[gt == lab] == lab).mean() for lab in np.unique(gt)]))
        else:
            per[a] = float((pred == gt).mean())
    return float(np.mean(list(per.values()))), per


@dataclass
class EvalReport:
    mAP: float | None = None
    cmc: list = field(default_factory=list)
    mA: float | None = None
    per_attribute: dict = field(default_factory=dict)
    aps_mAP: float | None = None
    aps_cmc: list = field(default_factory=list)
    num_queries: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float | None:
        return self.cmc[0] if self.cmc else None

    @property
    def aps_rank1(self) -> float | None:
        return self.aps_cmc[0] if self.aps_cmc else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rank1"], d["aps_rank1"] = self.rank1, self.aps_rank1
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, default=float)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def summary(self) -> str:
        lines = []
        if self.mAP is not None:
            lines.append(f"reID  mAP {100 * self.mAP:5.1f}  rank-1 {100 * self.cmc[0]:5.1f}  "
                         f"rank-5 {100 * self.cmc[min(4, len(self.cmc) - 1)]:5.1f}  ({self.num_queries} queries)")
        if self.aps_mAP is not None:
            lines.append(f"APS   mAP {100 * self.aps_mAP:5.1f}  rank-1 {100 * self.aps_cmc[0]:5.1f}")
        if self.mA is not None:
            lines.append(f"PAR   mA  {100 * self.mA:5.1f}")
            width = max(len(a) for a in self.per_attribute)
            for a, v in self.per_attribute.items():
                lines.append(f"      {a:<{width}}  {100 * v:5.1f}")
        return "\n".join(lines)
