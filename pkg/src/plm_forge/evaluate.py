"""Perplexity, likelihood-based zero-shot fitness scoring and ranking metrics."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .model import ModelConfig, token_log_probs
from .seqdata import DEFAULT_VOCAB, Direction, TokenizedSequence, Vocabulary, clean_residues, tokenize

log = logging.getLogger(__name__)

Scorer = Callable[[Sequence[str]], np.ndarray]


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# perplexity and likelihood
# ---------------------------------------------------------------------------


def _tokens(seq: TokenizedSequence | Sequence[int]) -> list[int]:
    return list(seq.tokens) if isinstance(seq, TokenizedSequence) else list(seq)


def sequence_nll(params, config: ModelConfig, seq) -> tuple[float, int]:
    """Summed negative log-likelihood and number of predicted tokens."""
    toks = _tokens(seq)
    if len(toks) < 2:
        raise ValueError("need at least two tokens to score")
    lp = token_log_probs(params, config, toks)
    return float(-lp.sum()), len(lp)


def perplexity(params, config: ModelConfig, seq) -> float:
    """exp of the mean NLL over every token after the first (context) token."""
    nll, n = sequence_nll(params, config, seq)
    return math.exp(nll / n)


@dataclass
class PerplexityReport:
    per_sequence: list[float]
    per_sequence_mean: float
    token_weighted: float
    n_tokens: int


def corpus_perplexity(params, config: ModelConfig, dataset: Sequence, threads: int = 1) -> PerplexityReport:
    """Both the arithmetic mean of per-sequence ppl and exp of the token-weighted mean NLL."""
    if not dataset:
        raise ValueError("empty dataset")
    work = lambda s: sequence_nll(params, config, s)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, dataset))
    else:
        results = [work(s) for s in dataset]
    per_seq = [math.exp(nll / n) for nll, n in results]
    total_nll = sum(nll for nll, _ in results)
    total_n = sum(n for _, n in results)
    return PerplexityReport(per_seq, float(np.mean(per_seq)), math.exp(total_nll / total_n), total_n)


def log_likelihood(
    params,
    config: ModelConfig,
    residues: str,
    direction: str = "N2C",
    vocab: Vocabulary = DEFAULT_VOCAB,
    normalize: bool = True,
) -> float:
    """Mean (or summed) per-token ln p of a sequence.

    ``direction`` is ``N2C``, ``C2N`` or ``mean-both`` (average of the two).
    """
    if direction == "mean-both":
        return 0.5 * (
            log_likelihood(params, config, residues, "N2C", vocab, normalize)
            + log_likelihood(params, config, residues, "C2N", vocab, normalize)
        )
    nll, n = sequence_nll(params, config, tokenize(residues, Direction(direction), vocab))
    return -nll / n if normalize else -nll


def likelihood_scorer(
    params,
    config: ModelConfig,
    direction: str = "N2C",
    vocab: Vocabulary = DEFAULT_VOCAB,
    normalize: bool = True,
    threads: int = 1,
) -> Scorer:
    def score(seqs: Sequence[str]) -> np.ndarray:
        work = lambda s: log_likelihood(params, config, s, direction, vocab, normalize)  # noqa: E731
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                return np.array(list(pool.map(work, seqs)))
        return np.array([work(s) for s in seqs])

    return score


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(scores: Sequence[float], measurements: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    if len(scores) != len(measurements):
        raise MetricError("scores and measurements differ in length")
    if len(scores) < 3:
        raise MetricError("spearman needs at least 3 points")
    ra, rb = average_ranks(scores), average_ranks(measurements)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0:
        raise MetricError("zero rank variance; spearman undefined")
    return float(np.clip(float(ra @ rb) / den, -1.0, 1.0))


def auc(scores: Sequence[float], labels: Sequence[int | bool]) -> float:
    """ROC AUC via the rank-sum statistic; tied scores count one half."""
    labels = np.asarray(labels).astype(bool)
    if len(labels) != len(scores):
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc needs both positive and negative labels")
    r = average_ranks(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def topk_avg(scores: Sequence[float], measurements: Sequence[float], k: int = 100) -> float:
    """Mean min-max-normalised measurement of the k top-scored variants (ties: input order)."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(measurements, dtype=np.float64)
    if len(scores) != len(y):
        raise MetricError("scores and measurements differ in length")
    if not 1 <= k <= len(y):
        raise MetricError(f"k={k} must be in [1, {len(y)}]")
    lo, hi = y.min(), y.max()
    norm = (y - lo) / (hi - lo) if hi > lo else np.zeros_like(y)
    top = np.argsort(-scores, kind="stable")[:k]
    return float(norm[top].mean())


def ensemble_scores(per_model: Sequence[Sequence[float]]) -> np.ndarray:
    """Average of per-model average ranks."""
    if len(per_model) < 1:
        raise ValueError("need at least one model")
    n = len(per_model[0])
    if any(len(s) != n for s in per_model):
        raise ValueError("score lists differ in length")
    return np.mean([average_ranks(s) for s in per_model], axis=0)


def rank_and_filter(
    sequences: Sequence[str],
    scorer: Scorer,
    keep_fraction: float,
) -> list[tuple[str, float]]:
    """Score, sort descending (stable) and keep ceil(keep_fraction * n)."""
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    if not sequences:
        return []
    scores = np.asarray(scorer(sequences), dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    n_keep = math.ceil(keep_fraction * len(sequences) - 1e-9)
    return [(sequences[i], float(scores[i])) for i in order[:n_keep]]


# ---------------------------------------------------------------------------
# fitness datasets and benchmarks
# ---------------------------------------------------------------------------


@dataclass
class FitnessDataset:
    name: str
    sequences: list[str]
    measurements: np.ndarray
    labels: np.ndarray | None = None
    metric: str = "spearman"
    k: int = 100
    threshold: float | None = None

    def __post_init__(self):
        self.measurements = np.asarray(self.measurements, dtype=np.float64)
        if len(self.sequences) != len(self.measurements):
            raise ValueError(f"{self.name}: sequence/measurement count mismatch")
        if not np.all(np.isfinite(self.measurements)):
            raise ValueError(f"{self.name}: non-finite measurement")
        if self.metric not in METRICS:
            raise ValueError(f"{self.name}: unknown metric {self.metric!r}")
        if self.metric == "spearman" and len(self.sequences) < 3:
            raise ValueError(f"{self.name}: need at least 3 variants")

    def binary_labels(self) -> np.ndarray:
        if self.labels is not None:
            return np.asarray(self.labels).astype(bool)
        if self.threshold is None:
            raise MetricError(f"{self.name}: AUC needs a label column or a threshold")
        return self.measurements >= self.threshold

    def evaluate(self, scores: Sequence[float]) -> float:
        if self.metric == "spearman":
            return spearman(scores, self.measurements)
        if self.metric == "auc":
            return auc(scores, self.binary_labels())
        return topk_avg(scores, self.measurements, self.k)


METRICS = ("spearman", "auc", "topk_avg")


@dataclass
class ScoreReport:
    """Per-variant scores of one dataset and the metric they achieve."""

    dataset: str
    scores: np.ndarray
    metric: str
    value: float
    models: tuple[str, ...]
    direction: str = "N2C"


def score_dataset(
    dataset: FitnessDataset,
    scorers: Mapping[str, Scorer],
    direction: str = "N2C",
) -> ScoreReport:
    """Score with one model, or with the rank ensemble of several."""
    if not scorers:
        raise ValueError("need at least one scorer")
    per_model = [np.asarray(f(dataset.sequences), dtype=np.float64) for f in scorers.values()]
    scores = per_model[0] if len(per_model) == 1 else ensemble_scores(per_model)
    if len(scores) != len(dataset.sequences):
        raise MetricError("scorer returned the wrong number of scores")
    return ScoreReport(dataset.name, scores, dataset.metric, dataset.evaluate(scores), tuple(scorers), direction)


def read_fitness_csv(path: str | Path, name: str | None = None, metric: str = "spearman", **kw) -> FitnessDataset:
    """CSV with header ``sequence,measurement[,label]``."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"sequence", "measurement"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain sequence,measurement")
        has_label = "label" in reader.fieldnames
        seqs, ys, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                seq, _ = clean_residues(row["sequence"])
                if not seq:
                    raise ValueError("empty sequence")
                seqs.append(seq)
                ys.append(float(row["measurement"]))
                if has_label:
                    labels.append(int(float(row["label"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return FitnessDataset(name or path.stem, seqs, np.array(ys), np.array(labels) if has_label else None, metric, **kw)


@dataclass
class ManifestEntry:
    name: str
    path: Path
    metric: str
    param: float | None = None


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    """Lines of ``name,path,metric[,threshold|k]``; ``#`` comments and blank lines ignored.

    Relative dataset paths resolve against the manifest's directory.
    """
    path = Path(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if parts[:3] == ["name", "path", "metric"]:
            continue
        if len(parts) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected name,path,metric[,threshold|k]")
        ds_path = Path(parts[1])
        if not ds_path.is_absolute():
            ds_path = path.parent / ds_path
        out.append(ManifestEntry(parts[0], ds_path, parts[2], float(parts[3]) if len(parts) == 4 else None))
    return out


def load_entry(entry: ManifestEntry) -> FitnessDataset:
    kw = {}
    if entry.metric == "topk_avg" and entry.param is not None:
        kw["k"] = int(entry.param)
    if entry.metric == "auc" and entry.param is not None:
        kw["threshold"] = entry.param
    return read_fitness_csv(entry.path, entry.name, entry.metric, **kw)


@dataclass
class BenchmarkRow:
    model: str
    dataset: str
    metric: str
    value: float
    error: str | None = None


def run_benchmark(
    scorers: Mapping[str, Scorer],
    datasets: Sequence[FitnessDataset | ManifestEntry],
    ensemble: bool = False,
) -> list[BenchmarkRow]:
    """Score every dataset with every model; append an unweighted AVERAGE row per model.

    Failures are recorded on their row (value NaN) and excluded from the average.
    With ``ensemble`` and at least two models, an ``ensemble`` model built from
    average ranks is added.
    """
    rows: list[BenchmarkRow] = []
    loaded: list[tuple[str, str, FitnessDataset | None, str | None]] = []
    for d in datasets:
        if isinstance(d, ManifestEntry):
            try:
                loaded.append((d.name, d.metric, load_entry(d), None))
            except (OSError, ValueError) as exc:
                log.error("dataset %s failed to load: %s", d.name, exc)
                loaded.append((d.name, d.metric, None, str(exc)))
        else:
            loaded.append((d.name, d.metric, d, None))

    model_names = list(scorers)
    if ensemble and len(model_names) >= 2:
        model_names.append("ensemble")
    per_model: dict[str, list[BenchmarkRow]] = {m: [] for m in model_names}
    for name, metric, ds, err in loaded:
        raw: dict[str, np.ndarray] = {}
        for m in model_names:
            if err is not None:
                per_model[m].append(BenchmarkRow(m, name, metric, float("nan"), err))
                continue
            try:
                if m == "ensemble" and m not in scorers:
                    s = ensemble_scores([raw[k] for k in scorers])
                else:
                    s = np.asarray(scorers[m](ds.sequences), dtype=np.float64)
                    raw[m] = s
                per_model[m].append(BenchmarkRow(m, name, metric, ds.evaluate(s)))
            except (ValueError, KeyError) as exc:
                log.error("model %s on %s failed: %s", m, name, exc)
                per_model[m].append(BenchmarkRow(m, name, metric, float("nan"), str(exc)))
    for m in model_names:
        ok = [r.value for r in per_model[m] if r.error is None]
        rows.extend(per_model[m])
        rows.append(BenchmarkRow(m, "AVERAGE", "mean", float(np.mean(ok)) if ok else float("nan")))
    return rows


def rows_to_csv(rows: Sequence[BenchmarkRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["model", "dataset", "metric", "value"])
    for r in rows:
        w.writerow([r.model, r.dataset, r.metric, repr(r.value)])
    return out.getvalue()


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "plm-forge"
    return plt


def scatter_svg(scores: Sequence[float], measurements: Sequence[float], path: str | Path, title: str = "") -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(scores, measurements, s=8, alpha=0.7)
    ax.set_xlabel("model score (mean log-likelihood)")
    ax.set_ylabel("measurement")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def histogram_svg(values: Sequence[float], path: str | Path, xlabel: str, title: str = "", bins: int = 20) -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.hist(values, bins=bins)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
