"""Retrieval and verification metrics plus multi-task scoring indices.

All similarity comparisons use cosine on unit-norm embeddings. Ranking ties
break toward the lower gallery index so every metric is deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, ValidationError

EXPERT = "expert"
HUMAN = "human"


def pairwise_cosine(emb_a: np.ndarray, emb_b: np.ndarray) -> np.ndarray:
    """Cosine similarity matrix between two sets of unit-norm rows."""
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    if emb_a.ndim != 2 or emb_b.ndim != 2 or emb_a.shape[1] != emb_b.shape[1]:
        raise ContractError("embedding dimensions must match")
    return emb_a @ emb_b.T


def tar_at_far(genuine_scores, impostor_scores, far: float) -> float:
    """True-accept rate at the given false-accept rate.

    The threshold is the smallest score at which the fraction of impostor
    scores >= threshold does not exceed ``far`` (ties resolve toward the
    stricter threshold); TAR is the fraction of genuine scores >= threshold.
    """
    genuine = np.asarray(genuine_scores, dtype=np.float64)
    impostor = np.asarray(impostor_scores, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ContractError("both score sets must be non-empty")
    if not 0.0 < far < 1.0:
        raise ContractError("far must lie in (0, 1)")
    candidates = np.unique(impostor)
    n = impostor.size
    # Fraction of impostors >= each candidate, nonincreasing in the candidate.
    counts = n - np.searchsorted(np.sort(impostor), candidates, side="left")
    rates = counts / n
    admissible = candidates[rates <= far]
    if admissible.size:
        threshold = admissible.min()
    else:
        threshold = np.nextafter(candidates.max(), np.inf)
    return float((genuine >= threshold).mean())


def roc_auc(genuine_scores, impostor_scores) -> float:
    """Probability a genuine score exceeds an impostor score, ties counting
    half (the rank-sum formulation)."""
    genuine = np.asarray(genuine_scores, dtype=np.float64)
    impostor = np.asarray(impostor_scores, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ContractError("both score sets must be non-empty")
    impostor_sorted = np.sort(impostor)
    below = np.searchsorted(impostor_sorted, genuine, side="left")
    below_or_equal = np.searchsorted(impostor_sorted, genuine, side="right")
    wins = below.sum() + 0.5 * (below_or_equal - below).sum()
    return float(wins / (genuine.size * impostor.size))


def rank_k(
    probe_emb: np.ndarray,
    probe_ids,
    gallery_emb: np.ndarray,
    gallery_ids,
    k: int,
) -> float:
    """Fraction of probes with a same-id gallery item among the top-k cosine
    matches (ties by gallery index)."""
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if k < 1:
        raise ContractError("k must be >= 1")
    missing = sorted(set(probe_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        raise ContractError(f"probe ids absent from gallery: {missing[:5]}")
    sims = pairwise_cosine(probe_emb, gallery_emb)
    k = min(k, gallery_ids.size)
    hits = 0
    for i in range(sims.shape[0]):
        top = np.argsort(-sims[i], kind="stable")[:k]
        hits += bool((gallery_ids[top] == probe_ids[i]).any())
    return hits / sims.shape[0]


def _best_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold (predict same when score >= threshold) maximizing accuracy.

    Candidates are midpoints between consecutive distinct scores plus one
    value below and one above the range, so a chosen threshold sits centered
    in its separating gap; the lowest maximizer wins (deterministic).
    """
    uniq = np.unique(scores)
    if uniq.size == 1:
        return float(uniq[0])
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    candidates = np.concatenate([[uniq[0] - 1.0], mids, [uniq[-1] + 1.0]])
    accs = ((scores[None, :] >= candidates[:, None]) == labels[None, :]).mean(axis=1)
    return float(candidates[accs.argmax()])


def verification_accuracy(pair_scores, pair_labels, folds: int = 10) -> float:
    """Best-threshold k-fold verification accuracy.

    Pairs split into ``folds`` contiguous blocks; each block is scored with
    the midpoint threshold that maximizes accuracy on the remaining blocks.
    Returns the mean held-out accuracy.
    """
    scores = np.asarray(pair_scores, dtype=np.float64)
    labels = np.asarray(pair_labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("pair scores and labels must be aligned 1-D arrays")
    if scores.size < folds:
        raise ContractError(f"need at least {folds} pairs")
    if labels.all() or not labels.any():
        raise ContractError("both genuine and impostor pairs are required")
    split_points = np.linspace(0, scores.size, folds + 1).astype(int)
    accuracies = []
    for f in range(folds):
        lo, hi = split_points[f], split_points[f + 1]
        held = np.zeros(scores.size, dtype=bool)
        held[lo:hi] = True
        thr = _best_threshold(scores[~held], labels[~held])
        accuracies.append(((scores[held] >= thr) == labels[held]).mean())
    return float(np.mean(accuracies))


def multitask_index(row_scores, reference_scores) -> float:
    """Mean relative difference of a model's scores from reference scores.

    Zero means parity with the reference on every column; greater is better.
    """
    row = np.asarray(row_scores, dtype=np.float64)
    ref = np.asarray(reference_scores, dtype=np.float64)
    if row.shape != ref.shape or row.ndim != 1 or row.size == 0:
        raise ContractError("row and reference must be aligned non-empty 1-D arrays")
    if (ref <= 0).any():
        raise ContractError("reference values must be positive")
    return float(((row - ref) / ref).mean())


@dataclass
class ScoreTable:
    """Models x (metric, dataset) score matrix in (0, 1], NaN for missing."""

    models: list[str]
    columns: list[str]
    values: np.ndarray
    groups: dict[str, str] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.models), len(self.columns)):
            raise ValidationError("score matrix shape must be (models, columns)")
        present = self.values[~np.isnan(self.values)]
        if ((present <= 0) | (present > 1)).any():
            raise ValidationError("score entries must lie in (0, 1]")

    def row(self, model: str) -> np.ndarray:
        try:
            return self.values[self.models.index(model)]
        except ValueError:
            raise ContractError(f"unknown model {model!r}") from None

    def column_max(self, columns: list[str] | None = None) -> np.ndarray:
        cols = self._column_indices(columns)
        sub = self.values[:, cols]
        if np.isnan(sub).all(axis=0).any():
            raise ContractError("a selected column has no entries")
        return np.nanmax(sub, axis=0)

    def _column_indices(self, columns: list[str] | None) -> list[int]:
        if columns is None:
            return list(range(len(self.columns)))
        indices = []
        for c in columns:
            if c not in self.columns:
                raise ContractError(f"unknown column {c!r}")
            indices.append(self.columns.index(c))
        return indices

    def index_for(
        self,
        model: str,
        mode: str,
        human_refs: dict[str, float] | None = None,
    ) -> float:
        """Multi-task index for one row: mean relative difference from the
        column maxima (expert mode) or supplied human references (human mode).
        """
        if mode == EXPERT:
            cols = list(range(len(self.columns)))
            refs = self.column_max()
        elif mode == HUMAN:
            if not human_refs:
                raise ContractError("human mode requires reference values")
            missing = sorted(set(human_refs) - set(self.columns))
            if missing:
                raise ContractError(f"human reference columns not in table: {missing}")
            names = [c for c in self.columns if c in human_refs]
            cols = self._column_indices(names)
            refs = np.array([human_refs[c] for c in names])
        else:
            raise ContractError(f"unknown index mode {mode!r}")
        row = self.row(model)[cols]
        if np.isnan(row).any():
            raise ContractError(f"model {model!r} is missing entries in scored columns")
        return multitask_index(row, refs)

    def ranking(
        self, mode: str, human_refs: dict[str, float] | None = None
    ) -> list[tuple[str, float]]:
        """(model, index) pairs sorted best-first."""
        scored = [(m, self.index_for(m, mode, human_refs)) for m in self.models]
        return sorted(scored, key=lambda item: -item[1])

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["model"] + (["group"] if self.groups else []) + self.columns
            writer.writerow(header)
            for i, model in enumerate(self.models):
                row = [model]
                if self.groups:
                    row.append(self.groups.get(model, ""))
                row.extend("" if np.isnan(v) else repr(float(v)) for v in self.values[i])
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path: str | Path) -> "ScoreTable":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "model":
            raise ValidationError("score table must start with a 'model' header column")
        header = rows[0]
        has_group = len(header) > 1 and header[1] == "group"
        first_col = 2 if has_group else 1
        columns = header[first_col:]
        models, groups, values = [], {}, []
        for row in rows[1:]:
            if not row:
                continue
            models.append(row[0])
            if has_group:
                groups[row[0]] = row[1]
            values.append([float(v) if v else np.nan for v in row[first_col:]])
        return cls(
            models=models,
            columns=columns,
            values=np.asarray(values),
            groups=groups if has_group else None,
        )
