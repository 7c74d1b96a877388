"""Significance and comparison statistics for decoding accuracies.

Permutation test of a single run against shuffled labels, group-level
sign test between two methods, Pearson correlation/regression of paired
accuracies, and the per-method summary table.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from eeg_structures import SingleClassError, StatisticsError

logger = logging.getLogger(__name__)

PERMUTATION_BLOCK = 10_000
DEFAULT_PERMUTATIONS = 100_000
ACCURACY_COLUMNS = ("run_id", "method", "interval", "accuracy")
STATS_COLUMNS = ["test", "method_a", "method_b", "interval", "run_id", "statistic", "p_value", "n", "note"]


class PairedOutcome(Enum):
    POS = "pos"
    NEG = "neg"
    TIE = "tie"


@dataclass
class PermutationResult:
    """Observed accuracy against the shuffled-label agreement null."""
    observed_accuracy: float
    p_value: float
    n_permutations: int
    null_quantiles: Dict[str, float]
    null_histogram: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "observed_accuracy": self.observed_accuracy,
            "p_value": self.p_value,
            "n_permutations": self.n_permutations,
            **{f"null_{key}": value for key, value in self.null_quantiles.items()},
        }


@dataclass
class SignTestResult:
    n_pos: int
    n_neg: int
    n_ties: int
    p_value: float

    @property
    def n(self) -> int:
        return self.n_pos + self.n_neg


@dataclass
class RegressionResult:
    r: float
    slope: float
    intercept: float
    p_value: float
    n: int


# ---------------------------------------------------------------------------
# Permutation test
# ---------------------------------------------------------------------------


def _block_sizes(n_perm: int) -> List[int]:
    full, rest = divmod(n_perm, PERMUTATION_BLOCK)
    return [PERMUTATION_BLOCK] * full + ([rest] if rest else [])


def _agreement_histogram(labels: np.ndarray, size: int, seed: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = labels.shape[0]
    order = rng.permuted(np.tile(np.arange(n), (size, 1)), axis=1)
    agreement = (labels[order] == labels[None, :]).sum(axis=1)
    return np.bincount(agreement, minlength=n + 1)


def _histogram_quantile(histogram: np.ndarray, q: float) -> int:
    cdf = np.cumsum(histogram)
    return int(np.searchsorted(cdf, q * cdf[-1], side="left"))


def permutation_test(true_labels: Sequence[int], observed_accuracy: float,
                     n_perm: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                     max_workers: int = 1) -> PermutationResult:
    """Monte-Carlo p-value of ``observed_accuracy`` against label shuffles.

    Every permutation shuffles the label vector (class counts preserved) and
    scores its agreement with the genuine labels. Shuffles run in blocks of
    10^4, each seeded from its own child of ``seed``, so the null does not
    depend on ``max_workers``. p = (1 + #{null >= observed}) / (1 + n_perm).
    """
    labels = np.asarray(true_labels)
    if labels.ndim != 1 or labels.size == 0:
        raise StatisticsError("labels must be a non-empty vector")
    if len(np.unique(labels)) != 2:
        raise SingleClassError(f"permutation test needs two label values, got {np.unique(labels).tolist()} (single class)")
    if n_perm < 1:
        raise StatisticsError(f"n_perm must be >= 1, got {n_perm}")
    if not 0.0 <= observed_accuracy <= 1.0:
        raise StatisticsError(f"observed accuracy {observed_accuracy} outside [0, 1]")

    n = labels.size
    sizes = _block_sizes(n_perm)
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = list(zip(sizes, seeds))

    if max_workers <= 1:
        parts = [_agreement_histogram(labels, size, ss) for size, ss in jobs]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            parts = list(executor.map(lambda job: _agreement_histogram(labels, *job), jobs))
    histogram = np.sum(parts, axis=0)

    observed_count = observed_accuracy * n
    exceed = int(histogram[np.arange(n + 1) >= observed_count - 1e-9].sum())
    p_value = (1 + exceed) / (1 + n_perm)

    nonzero = np.flatnonzero(histogram)
    quantiles = {
        "min": nonzero[0] / n,
        "q05": _histogram_quantile(histogram, 0.05) / n,
        "q50": _histogram_quantile(histogram, 0.50) / n,
        "q95": _histogram_quantile(histogram, 0.95) / n,
        "max": nonzero[-1] / n,
    }
    logger.debug(f"[PERMUTATION] n={n} observed={observed_accuracy:.4f} p={p_value:.3g} ({n_perm} shuffles)")
    return PermutationResult(observed_accuracy=float(observed_accuracy), p_value=float(p_value),
                             n_permutations=n_perm, null_quantiles=quantiles, null_histogram=histogram)


def exact_permutation_p(true_labels: Sequence[int], observed_accuracy: float) -> float:
    """Exhaustive tail probability over all distinct label arrangements (small n only)."""
    labels = np.asarray(true_labels)
    n = labels.size
    n1 = int(np.sum(labels == labels.max()))
    hits = total = 0
    for positions in itertools.combinations(range(n), n1):
        shuffled = np.full(n, labels.min())
        shuffled[list(positions)] = labels.max()
        total += 1
        hits += int((shuffled == labels).sum() >= observed_accuracy * n - 1e-9)
    return hits / total


# ---------------------------------------------------------------------------
# Sign test, regression
# ---------------------------------------------------------------------------


def paired_outcomes(a: Sequence[float], b: Sequence[float]) -> List[PairedOutcome]:
    """POS where a > b, NEG where a < b, TIE otherwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise StatisticsError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    return [PairedOutcome.POS if x > y else PairedOutcome.NEG if x < y else PairedOutcome.TIE
            for x, y in zip(a, b)]


def sign_test(outcomes: Sequence[Union[PairedOutcome, str]]) -> SignTestResult:
    """Two-sided sign test; ties are dropped."""
    outcomes = [PairedOutcome(o) if not isinstance(o, PairedOutcome) else o for o in outcomes]
    n_pos = sum(o == PairedOutcome.POS for o in outcomes)
    n_neg = sum(o == PairedOutcome.NEG for o in outcomes)
    n_ties = len(outcomes) - n_pos - n_neg
    n = n_pos + n_neg
    if n == 0:
        raise StatisticsError("sign test needs at least one non-tied pair (all ties)")
    p_value = min(1.0, 2.0 * float(stats.binom.cdf(min(n_pos, n_neg), n, 0.5)))
    return SignTestResult(n_pos=n_pos, n_neg=n_neg, n_ties=n_ties, p_value=p_value)


def pearson_regression(x: Sequence[float], y: Sequence[float]) -> RegressionResult:
    """Pearson r, least-squares line and the t-test p-value (n-2 dof)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError(f"x and y must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 3:
        raise StatisticsError(f"regression needs at least 3 points, got {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise StatisticsError("constant input vector")
    fit = stats.linregress(x, y)
    return RegressionResult(r=float(fit.rvalue), slope=float(fit.slope), intercept=float(fit.intercept),
                            p_value=float(fit.pvalue), n=int(x.size))


# ---------------------------------------------------------------------------
# Accuracy tables
# ---------------------------------------------------------------------------


def summarize_accuracies(table: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of accuracy per method and interval."""
    grouped = table.groupby(["method", "interval"], sort=True)["accuracy"]
    summary = grouped.agg(n_runs="count", mean_accuracy="mean", std_accuracy="std").reset_index()
    summary["std_accuracy"] = summary["std_accuracy"].fillna(0.0)
    return summary


def _row(test: str, **values) -> Dict[str, Any]:
    row = {column: "" for column in STATS_COLUMNS}
    row.update(test=test, statistic=np.nan, p_value=np.nan, n=0)
    row.update(values)
    return row


def _permutation_rows(table: pd.DataFrame, n_perm: int, seed: int, max_workers: int) -> List[Dict[str, Any]]:
    rows = []
    if not {"n_class0", "n_class1"} <= set(table.columns):
        logger.warning("[STATS] Accuracy table lacks class counts; permutation tests skipped")
        return rows
    for record in table.itertuples(index=False):
        n0, n1 = int(record.n_class0), int(record.n_class1)
        labels = np.repeat([0, 1], [n0, n1])
        try:
            result = permutation_test(labels, float(record.accuracy), n_perm, seed, max_workers)
        except (SingleClassError, StatisticsError) as exc:
            rows.append(_row("permutation", method_a=record.method, interval=record.interval,
                             run_id=record.run_id, n=n0 + n1, note=f"skipped: {exc}"))
            continue
        rows.append(_row("permutation", method_a=record.method, interval=record.interval, run_id=record.run_id,
                         statistic=result.observed_accuracy, p_value=result.p_value, n=n0 + n1))
    return rows


def _pair_rows(table: pd.DataFrame) -> List[Dict[str, Any]]:
    rows = []
    for interval, group in table.groupby("interval", sort=True):
        wide = group.pivot_table(index="run_id", columns="method", values="accuracy", aggfunc="mean")
        for method_a, method_b in itertools.combinations(sorted(wide.columns), 2):
            paired = wide[[method_a, method_b]].dropna()
            base = dict(method_a=method_a, method_b=method_b, interval=interval, n=len(paired))
            if len(paired) < 2:
                logger.warning(f"[STATS] {method_a} vs {method_b} ({interval}): {len(paired)} paired run(s)")
                rows.append(_row("sign", **base, note="skipped: fewer than 2 paired runs"))
            else:
                try:
                    result = sign_test(paired_outcomes(paired[method_a], paired[method_b]))
                    rows.append(_row("sign", **base, statistic=result.n_pos, p_value=result.p_value,
                                     note=f"pos={result.n_pos} neg={result.n_neg} ties={result.n_ties}"))
                except StatisticsError as exc:
                    rows.append(_row("sign", **base, note=f"skipped: {exc}"))
            try:
                fit = pearson_regression(paired[method_a], paired[method_b])
                rows.append(_row("pearson", **base, statistic=fit.r, p_value=fit.p_value,
                                 note=f"slope={fit.slope:.6g} intercept={fit.intercept:.6g}"))
            except StatisticsError as exc:
                rows.append(_row("pearson", **base, note=f"skipped: {exc}"))
    return rows


def build_statistics_table(table: pd.DataFrame, n_perm: int = DEFAULT_PERMUTATIONS, seed: int = 0,
                           max_workers: int = 1) -> pd.DataFrame:
    """All statistics rows for an accuracy table (one row per run and method)."""
    missing = [column for column in ACCURACY_COLUMNS if column not in table.columns]
    if missing:
        raise StatisticsError(f"accuracy table missing columns {missing}")
    table = table.assign(interval=table["interval"].astype(str), run_id=table["run_id"].astype(str))

    rows = _permutation_rows(table, n_perm, seed, max_workers)
    rows += _pair_rows(table)
    for record in summarize_accuracies(table).itertuples(index=False):
        rows.append(_row("summary", method_a=record.method, interval=record.interval,
                         statistic=record.mean_accuracy, n=int(record.n_runs),
                         note=f"std={record.std_accuracy:.6g}"))
    logger.info(f"[STATS] {len(table)} accuracy rows -> {len(rows)} statistics rows")
    return pd.DataFrame(rows, columns=STATS_COLUMNS)
