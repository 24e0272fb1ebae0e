"""Duration-bin pseudo-embeddings.

Short durations (below a cut-off) each get their own bin; longer ones are
split into quantile bins. Each graph is then treated as a document whose
terms are ``(activity, bin)`` pairs, and every node gets the TF-IDF row of
its activity across all bin columns.
"""
from __future__ import annotations

import bisect
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encode import duration
from .eventlog import CaseTrace


@dataclass(frozen=True)
class BinningConfig:
    t_cut: float = 300.0
    n_quantile: int = 24
    max_iterations: int = 20
    balance_tolerance: float = 0.25
    # durations are rounded to this many seconds before binning
    resolution: int = 60

    def __post_init__(self):
        if self.t_cut <= 0:
            raise ValueError("t_cut must be positive")
        if self.n_quantile < 1:
            raise ValueError("n_quantile must be >= 1")
        if not 0 < self.balance_tolerance <= 1:
            raise ValueError("balance_tolerance must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class DurationBinning:
    t_cut: float
    unique_bins: tuple[float, ...]
    quantile_edges: tuple[float, ...]
    has_quantile_bins: bool
    iterations: int = 1
    balance: float = 1.0

    @property
    def n_quantile_bins(self) -> int:
        return len(self.quantile_edges) + 1 if self.has_quantile_bins else 0

    @property
    def n_bins(self) -> int:
        return len(self.unique_bins) + self.n_quantile_bins

    def to_dict(self) -> dict:
        return {"t_cut": self.t_cut, "unique_bins": list(self.unique_bins),
                "quantile_edges": list(self.quantile_edges),
                "has_quantile_bins": self.has_quantile_bins,
                "iterations": self.iterations, "balance": self.balance}

    @classmethod
    def from_dict(cls, d: dict) -> "DurationBinning":
        return cls(d["t_cut"], tuple(d["unique_bins"]), tuple(d["quantile_edges"]),
                   d["has_quantile_bins"], d.get("iterations", 1), d.get("balance", 1.0))


def _binning_at(values: np.ndarray, t_cut: float, n_quantile: int) -> DurationBinning:
    small = values[values < t_cut]
    large = values[values >= t_cut]
    unique = tuple(float(v) for v in np.unique(small))
    edges: tuple[float, ...] = ()
    if large.size:
        qs = np.quantile(large, [k / n_quantile for k in range(1, n_quantile)])
        lo = large.min()
        edges = tuple(float(e) for e in np.unique(qs) if e > lo)
    return DurationBinning(t_cut, unique, edges, bool(large.size))


def _quantile_counts(values: np.ndarray, binning: DurationBinning) -> np.ndarray:
    large = values[values >= binning.t_cut]
    idx = np.searchsorted(np.asarray(binning.quantile_edges), large, side="right")
    return np.bincount(idx, minlength=binning.n_quantile_bins)


def _balance(counts: np.ndarray) -> float:
    if counts.size <= 1:
        return 1.0
    if counts.min() == 0:
        return math.inf
    return float(counts.max() / counts.min())


def fit_binning(durations: Sequence[float], config: BinningConfig = BinningConfig()
                ) -> DurationBinning:
    """Search cut-off and quantile count until the quantile bins are balanced.

    Balanced means ``max/min`` bin frequency is at most ``1 + tolerance``.
    When unbalanced and the heaviest quantile bin is the lowest one, the
    cut-off moves up to the next distinct duration so that spike becomes
    individual bins; otherwise one quantile bin is dropped. The most
    balanced configuration seen is returned.
    """
    values = np.asarray(durations, dtype=float)
    if values.size == 0:
        raise ValueError("fit_binning needs at least one duration")
    if (values < 0).any():
        raise ValueError("durations must be nonnegative")
    distinct = np.unique(values)
    t_cut, nq = float(config.t_cut), int(config.n_quantile)
    best = None
    for it in range(1, config.max_iterations + 1):
        b = _binning_at(values, t_cut, nq)
        counts = _quantile_counts(values, b)
        bal = _balance(counts)
        if best is None or bal < best.balance:
            best = DurationBinning(b.t_cut, b.unique_bins, b.quantile_edges,
                                   b.has_quantile_bins, it, bal)
        if bal <= 1.0 + config.balance_tolerance:
            break
        above = distinct[distinct > t_cut]
        if counts.argmax() == 0 and above.size > 1:
            t_cut = float(above[0])
        elif nq > 1:
            nq -= 1
        else:
            break
    return DurationBinning(best.t_cut, best.unique_bins, best.quantile_edges,
                           best.has_quantile_bins, it, best.balance)


def assign_bin(d: float, binning: DurationBinning) -> int:
    u = binning.unique_bins
    i = bisect.bisect_left(u, d)
    if i < len(u) and u[i] == d:
        return i
    if d >= binning.t_cut and binning.has_quantile_bins:
        return len(u) + bisect.bisect_right(binning.quantile_edges, d)
    if not u:
        return 0
    # nearest individual bin, ties to the lower one
    if i == 0:
        return 0
    if i == len(u):
        return len(u) - 1
    return i - 1 if d - u[i - 1] <= u[i] - d else i


def round_duration(seconds: float, resolution: int) -> float:
    if resolution <= 1:
        return float(seconds)
    return float(math.floor(seconds / resolution + 0.5) * resolution)


def trace_durations(trace: CaseTrace, resolution: int = 1) -> list[float]:
    return [round_duration(duration(e), resolution) for e in trace.events]


@dataclass
class TfidfCorpus:
    """Document frequencies of ``(activity, bin)`` terms over training graphs."""

    n_docs: int
    df: dict[tuple[str, int], int] = field(default_factory=dict)

    def idf(self, term: tuple[str, int]) -> float:
        return math.log((1 + self.n_docs) / (1 + self.df.get(term, 0))) + 1.0

    def to_dict(self) -> dict:
        return {"n_docs": self.n_docs,
                "df": [[a, b, n] for (a, b), n in sorted(self.df.items())]}

    @classmethod
    def from_dict(cls, d: dict) -> "TfidfCorpus":
        return cls(d["n_docs"], {(a, int(b)): int(n) for a, b, n in d["df"]})


def fit_corpus(docs: Sequence[Sequence[tuple[str, int]]]) -> TfidfCorpus:
    df = Counter()
    for doc in docs:
        df.update(set(doc))
    return TfidfCorpus(len(docs), dict(df))


def doc_terms(trace: CaseTrace, binning: DurationBinning, resolution: int = 1
              ) -> list[tuple[str, int]]:
    return [(e.activity, assign_bin(d, binning))
            for e, d in zip(trace.events, trace_durations(trace, resolution))]


def pseudo_matrix(terms: Sequence[tuple[str, int]], corpus: TfidfCorpus, n_bins: int
                  ) -> np.ndarray:
    tf = Counter(terms)
    rows: dict[str, np.ndarray] = {}
    for (act, b), count in tf.items():
        row = rows.setdefault(act, np.zeros(n_bins))
        row[b] = count * corpus.idf((act, b))
    return np.stack([rows[act] for act, _ in terms])


def build_pseudo_matrices(traces: Sequence[CaseTrace], binning: DurationBinning,
                          corpus: TfidfCorpus | None = None, resolution: int = 1
                          ) -> tuple[list[np.ndarray], TfidfCorpus]:
    """Per-trace node matrices. ``corpus`` defaults to one fit on ``traces``."""
    docs = [doc_terms(t, binning, resolution) for t in traces]
    if corpus is None:
        corpus = fit_corpus(docs)
    return [pseudo_matrix(d, corpus, binning.n_bins) for d in docs], corpus


@dataclass
class PseudoProvider:
    """Fitted binning plus corpus; maps a trace to its node matrix."""

    binning: DurationBinning
    corpus: TfidfCorpus
    resolution: int = 1

    @property
    def dim(self) -> int:
        return self.binning.n_bins

    def __call__(self, trace: CaseTrace) -> np.ndarray:
        return pseudo_matrix(doc_terms(trace, self.binning, self.resolution),
                             self.corpus, self.binning.n_bins)

    @classmethod
    def fit(cls, train: Sequence[CaseTrace], config: BinningConfig = BinningConfig()
            ) -> "PseudoProvider":
        durations = [d for t in train for d in trace_durations(t, config.resolution)]
        binning = fit_binning(durations, config)
        docs = [doc_terms(t, binning, config.resolution) for t in train]
        return cls(binning, fit_corpus(docs), config.resolution)

    def to_json(self) -> str:
        return json.dumps({"binning": self.binning.to_dict(), "corpus": self.corpus.to_dict(),
                           "resolution": self.resolution}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PseudoProvider":
        d = json.loads(text)
        return cls(DurationBinning.from_dict(d["binning"]), TfidfCorpus.from_dict(d["corpus"]),
                   d["resolution"])
