"""
Two-pass retrieval and the micro/macro metric suite.

Pass 1 keeps the gallery shapes whose predicted category equals the query's and
sorts them by that category's probability (shape id breaks ties). Pass 2 moves the
shapes sharing the query's predicted subcategory to the front, keeping the
relative order inside both groups.
"""
import csv
import io
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from app.models.schemas import MetricReport, MetricRow, QueryMetrics, RankEntry, RankList
from app.services.data import ViewDataset
from app.services.head import VSFormer, predict_many
from app.services.training import evaluation_views
from app.utils import constants
from app.utils.config import settings
from app.utils.error_handler import InputError, ParseError, StateError

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ClassPredictor:
    """Cached eval-mode predictions of one trained model over a dataset"""

    def __init__(self, model: VSFormer, dataset: ViewDataset, num_views: Optional[int] = None, seed: int = 0):
        if not model.trained:
            raise StateError("retrieval needs a trained model; train it (or load a trained checkpoint) first")
        self.model = model
        self.dataset = dataset
        self.num_views = num_views
        self.seed = seed
        self._cache: Dict[str, Tuple[np.ndarray, int]] = {}
        self._lock = threading.Lock()

    def predict_all(self, ids: Sequence[str]) -> None:
        missing = [shape_id for shape_id in dict.fromkeys(ids) if shape_id not in self._cache]
        if not missing:
            return
        view_sets = [evaluation_views(self.dataset, shape_id, self.num_views, self.seed) for shape_id in missing]
        results = predict_many(view_sets, self.model)
        with self._lock:
            self._cache.update(zip(missing, results))
        logger.info(f"Predicted {len(missing)} shapes")

    def prediction(self, shape_id: str) -> Tuple[np.ndarray, int]:
        if shape_id not in self._cache:
            self.predict_all([shape_id])
        return self._cache[shape_id]

    def probs(self, shape_id: str) -> np.ndarray:
        return self.prediction(shape_id)[0]

    def label(self, shape_id: str) -> int:
        return self.prediction(shape_id)[1]


# ===== RANKING =====

def stable_partition(items: Sequence[T], keep_first: Callable[[T], bool]) -> List[T]:
    """Items satisfying the predicate first, then the rest; order kept inside each part"""
    return [item for item in items if keep_first(item)] + [item for item in items if not keep_first(item)]


def entry_gain(dataset: ViewDataset, query_id: str, shape_id: str) -> float:
    """2 for a category and subcategory match, 1 for category only, else 0"""
    query, shape = dataset.record(query_id), dataset.record(shape_id)
    if query.label != shape.label:
        return 0.0
    return constants.GAIN_SUBCATEGORY if query.sublabel == shape.sublabel else constants.GAIN_CATEGORY


def build_rank_list(
    query_id: str,
    gallery_ids: Sequence[str],
    dataset: ViewDataset,
    category: ClassPredictor,
    subcategory: Optional[ClassPredictor] = None,
    n: Optional[int] = None,
) -> RankList:
    if not gallery_ids:
        raise InputError("retrieval gallery is empty")
    predicted = category.label(query_id)
    candidates = [g for g in dict.fromkeys(gallery_ids) if g != query_id and category.label(g) == predicted]
    first_pass = sorted(candidates, key=lambda g: (-category.probs(g)[predicted], g))
    ranked = first_pass
    if subcategory is not None:
        query_sub = subcategory.label(query_id)
        ranked = stable_partition(first_pass, lambda g: subcategory.label(g) == query_sub)
    if n is not None:
        ranked = ranked[:n]
    query_label = dataset.record(query_id).label
    entries = [
        RankEntry(
            shape_id=g,
            class_prob=float(category.probs(g)[predicted]),
            relevant=dataset.record(g).label == query_label,
            gain=entry_gain(dataset, query_id, g),
        )
        for g in ranked
    ]
    return RankList(query_id=query_id, entries=entries)


# ===== METRICS =====

def precision_recall_f1_at_n(rels: Sequence[int], total_relevant: int, n: int) -> Tuple[float, float, float]:
    if n < 1:
        raise InputError(f"list length N must be at least 1, got {n}")
    returned = list(rels[:n])
    hits = sum(1 for r in returned if r)
    precision = hits / len(returned) if returned else 0.0
    recall = hits / total_relevant if total_relevant > 0 else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def average_precision(rels: Sequence[int], total_relevant: int) -> float:
    if total_relevant <= 0:
        return 0.0
    hits = 0
    score = 0.0
    for k, rel in enumerate(rels, start=1):
        if rel:
            hits += 1
            score += hits / k
    return score / total_relevant


def _dcg(gains: Sequence[float]) -> float:
    return sum(g / math.log2(k + 1) for k, g in enumerate(gains, start=1))


def ndcg(gains: Sequence[float], n: int) -> float:
    """DCG of the first n gains over the DCG of the list's gains sorted descending"""
    if any(g < 0 for g in gains):
        raise InputError("gains must be nonnegative")
    ideal = _dcg(sorted(gains, reverse=True)[:n])
    if ideal == 0:
        return 0.0
    return min(1.0, _dcg(list(gains[:n])) / ideal)


def query_metrics(rank_list: RankList, category: int, total_relevant: int, n: int) -> QueryMetrics:
    rels = [int(entry.relevant) for entry in rank_list.entries[:n]]
    precision, recall, f1 = precision_recall_f1_at_n(rels, total_relevant, n)
    return QueryMetrics(
        query_id=rank_list.query_id,
        category=category,
        precision=precision,
        recall=recall,
        f1=f1,
        average_precision=average_precision(rels, total_relevant),
        ndcg=ndcg([entry.gain for entry in rank_list.entries], n),
    )


def _mean_row(metrics: Sequence[QueryMetrics]) -> MetricRow:
    count = len(metrics)
    return MetricRow(
        precision=sum(m.precision for m in metrics) / count,
        recall=sum(m.recall for m in metrics) / count,
        f1=sum(m.f1 for m in metrics) / count,
        map=sum(m.average_precision for m in metrics) / count,
        ndcg=sum(m.ndcg for m in metrics) / count,
    )


def aggregate(per_query: Sequence[QueryMetrics], n: int = constants.RANK_LIST_LENGTH) -> MetricReport:
    """Micro: mean over queries. Macro: mean over categories of per-category query means."""
    if not per_query:
        raise InputError("cannot aggregate zero queries")
    by_category: Dict[int, List[QueryMetrics]] = {}
    for metrics in per_query:
        by_category.setdefault(metrics.category, []).append(metrics)
    category_rows = [_mean_row(group) for _, group in sorted(by_category.items())]
    macro = MetricRow(**{
        field: sum(getattr(row, field) for row in category_rows) / len(category_rows)
        for field in MetricRow.model_fields
    })
    return MetricReport(micro=_mean_row(per_query), macro=macro, n=n, num_queries=len(per_query))


def evaluate_retrieval(
    query_ids: Sequence[str],
    gallery_ids: Sequence[str],
    dataset: ViewDataset,
    category: ClassPredictor,
    subcategory: Optional[ClassPredictor] = None,
    n: int = constants.RANK_LIST_LENGTH,
    max_workers: Optional[int] = None,
) -> Tuple[List[RankList], List[QueryMetrics], MetricReport]:
    """Rank lists and metrics for every query; per-query work runs in a thread pool"""
    if not query_ids:
        raise InputError("no retrieval queries")
    if not gallery_ids:
        raise InputError("retrieval gallery is empty")
    everything = list(dict.fromkeys([*query_ids, *gallery_ids]))
    category.predict_all(everything)
    if subcategory is not None:
        subcategory.predict_all(everything)

    gallery_set = set(gallery_ids)
    gallery_labels: Dict[int, int] = {}
    for shape_id in dict.fromkeys(gallery_ids):
        label = dataset.record(shape_id).label
        gallery_labels[label] = gallery_labels.get(label, 0) + 1

    def run(query_id: str) -> Tuple[RankList, QueryMetrics]:
        rank_list = build_rank_list(query_id, gallery_ids, dataset, category, subcategory, n)
        label = dataset.record(query_id).label
        total_relevant = gallery_labels.get(label, 0) - int(query_id in gallery_set)
        return rank_list, query_metrics(rank_list, label, total_relevant, n)

    workers = max_workers or settings.MAX_WORKERS
    if workers <= 1:
        results = [run(query_id) for query_id in query_ids]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, query_ids))
    rank_lists = [rank_list for rank_list, _ in results]
    per_query = [metrics for _, metrics in results]
    report = aggregate(per_query, n)
    logger.info(f"Retrieval over {len(query_ids)} queries: micro mAP={report.micro.map:.4f} NDCG={report.micro.ndcg:.4f}")
    return rank_lists, per_query, report


# ===== FILES =====

def write_rank_lists(path: Union[str, Path], rank_lists: Sequence[RankList]) -> None:
    lines = [f"{rl.query_id}: {' '.join(rl.shape_ids)}".rstrip() for rl in rank_lists]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info(f"Wrote {len(rank_lists)} rank lists to {path}")


def read_rank_lists(path: Union[str, Path]) -> Dict[str, List[str]]:
    lists: Dict[str, List[str]] = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        query_id, sep, rest = line.partition(":")
        if not sep or not query_id.strip():
            raise ParseError(f"expected 'query_id: id1 id2 ...', got '{line}'", number)
        lists[query_id.strip()] = rest.split()
    return lists


METRIC_COLUMNS = ["average", "n", "precision", "recall", "f1", "map", "ndcg"]


def format_metric_report(report: MetricReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for name, row in (("micro", report.micro), ("macro", report.macro)):
        writer.writerow([name, report.n, *(repr(float(getattr(row, field))) for field in METRIC_COLUMNS[2:])])
    return buffer.getvalue()


def write_metric_report(path: Union[str, Path], report: MetricReport) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_metric_report(report))
    logger.info(f"Wrote metric report to {path}")
