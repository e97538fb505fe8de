"""Weighted-mean and majority-vote combiners over per-model class probabilities."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._kernels import lattice_correct
from .errors import ConfigError, ContractError, ValidationError

N_CLASSES = 5
SIMPLEX_TOL = 1e-9
ROW_TOL = 1e-5


@dataclass(frozen=True)
class PredictionSet:
    """Probabilities of shape (n_models, n_samples, n_classes) with names and ids."""

    model_names: tuple[str, ...]
    sample_ids: tuple[str, ...]
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 3:
            raise ContractError(f"probabilities must be 3-d (models, samples, classes), got {probs.shape}")
        t, n, c = probs.shape
        if t < 1:
            raise ContractError("prediction set needs at least one model")
        if len(self.model_names) != t or len(self.sample_ids) != n:
            raise ContractError("names/ids do not match the probability array")
        if len(set(self.model_names)) != t:
            raise ContractError("duplicate model names")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=2) - 1.0) > ROW_TOL):
            raise ValidationError("each probability row must lie on the simplex")
        object.__setattr__(self, "model_names", tuple(self.model_names))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_models(cls, named: dict[str, np.ndarray], sample_ids) -> "PredictionSet":
        names = list(named)
        return cls(tuple(names), tuple(sample_ids), np.stack([named[k] for k in names]))

    @property
    def n_models(self) -> int:
        return self.probs.shape[0]

    @property
    def n_samples(self) -> int:
        return self.probs.shape[1]

    def select(self, members) -> "PredictionSet":
        """Sub-ensemble by model index or name, in the order given."""
        idx = [m if isinstance(m, (int, np.integer)) else self.model_names.index(m) for m in members]
        return PredictionSet(tuple(self.model_names[i] for i in idx), self.sample_ids, self.probs[idx])

    def single_argmax(self, j: int) -> np.ndarray:
        return np.argmax(self.probs[j], axis=1)


def check_alpha(alpha, n_models: int) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if a.shape[0] != n_models:
        raise ContractError(f"alpha has {a.shape[0]} weights for {n_models} models")
    if np.any(a < 0) or abs(a.sum() - 1.0) > SIMPLEX_TOL:
        raise ValidationError(f"alpha must be nonnegative and sum to 1, got {a.tolist()}")
    return a


def mix(preds: PredictionSet, alpha) -> np.ndarray:
    """Weighted mean of the member distributions, accumulated in member order."""
    a = check_alpha(alpha, preds.n_models)
    out = np.zeros(preds.probs.shape[1:])
    for j in range(preds.n_models):
        out += a[j] * preds.probs[j]
    return out


def weighted_mean_predict(preds: PredictionSet, alpha) -> np.ndarray:
    return np.argmax(mix(preds, alpha), axis=1)


def majority_vote_predict(preds: PredictionSet) -> np.ndarray:
    """Mode of the member argmaxes; tied modes go to the highest mean probability."""
    votes = np.argmax(preds.probs, axis=2)
    n_classes = preds.probs.shape[2]
    counts = np.zeros((preds.n_samples, n_classes), dtype=np.int64)
    for row in votes:
        counts[np.arange(preds.n_samples), row] += 1
    tied = counts == counts.max(axis=1, keepdims=True)
    mean_p = preds.probs.mean(axis=0)
    return np.argmax(np.where(tied, mean_p, -np.inf), axis=1)


def lattice_points(n_models: int, step: float) -> np.ndarray:
    """All weight vectors on the simplex with resolution ``step``, lexicographically ascending."""
    if n_models < 1:
        raise ContractError("lattice needs at least one model")
    if not 0 < step <= 1:
        raise ConfigError(f"grid step must lie in (0, 1], got {step}")
    m = round(1.0 / step)
    if abs(m * step - 1.0) > 1e-9:
        raise ConfigError(f"grid step {step} does not divide 1 evenly")
    return np.asarray(list(_compositions(m, n_models)), dtype=np.float64) / m


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def lattice_size(n_models: int, step: float) -> int:
    m = round(1.0 / step)
    return math.comb(m + n_models - 1, n_models - 1)


@dataclass(frozen=True)
class GridResult:
    alpha: np.ndarray
    accuracy: float
    n_points: int
    n_optimal: int  # >1 means the optimum is flat along some direction


def grid_search_alpha(preds: PredictionSet, labels, step: float = 0.05,
                      use_numba: bool | None = None) -> GridResult:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (preds.n_samples,):
        raise ContractError("labels must have one entry per sample")
    lattice = lattice_points(preds.n_models, step)
    hits = lattice_correct(np.transpose(preds.probs, (1, 0, 2)), labels, lattice, use_numba=use_numba)
    best = int(np.argmax(hits))
    return GridResult(lattice[best], hits[best] / preds.n_samples, len(lattice),
                      int(np.sum(hits == hits[best])))


def member_subsets(n_models: int) -> list[tuple[int, ...]]:
    """Every non-empty subset, by size then lexicographically."""
    return [c for r in range(1, n_models + 1) for c in itertools.combinations(range(n_models), r)]


@dataclass(frozen=True)
class SubsetRow:
    members: tuple[str, ...]
    alpha: tuple[float, ...]
    wm_accuracy: float
    mv_accuracy: float


def ensemble_report(preds: PredictionSet, labels, step: float = 0.05, tune: tuple[PredictionSet, np.ndarray] | None = None,
                    alpha=None) -> list[SubsetRow]:
    """One row per member subset, each with its own tuned weights.

    Weights are tuned on ``tune`` (defaults to the evaluated set). An explicit
    ``alpha`` overrides the tuned weights of the full-ensemble row.
    """
    labels = np.asarray(labels, dtype=np.int64)
    tune_preds, tune_labels = tune if tune is not None else (preds, labels)
    if tune_preds.model_names != preds.model_names:
        raise ContractError("tuning set must carry the same models")
    rows = []
    for subset in member_subsets(preds.n_models):
        sub = preds.select(subset)
        if alpha is not None and len(subset) == preds.n_models:
            a = check_alpha(alpha, preds.n_models)
        else:
            a = grid_search_alpha(tune_preds.select(subset), tune_labels, step).alpha
        wm = float(np.mean(weighted_mean_predict(sub, a) == labels))
        mv = float(np.mean(majority_vote_predict(sub) == labels))
        rows.append(SubsetRow(sub.model_names, tuple(float(x) for x in a), wm, mv))
    return rows


def format_report(rows: list[SubsetRow]) -> str:
    width = max(len(" + ".join(r.members)) for r in rows)
    lines = [f"{'members':<{width}}  {'alpha':<24}  {'wm_acc%':>8}  {'mv_acc%':>8}"]
    for r in rows:
        alpha = ",".join(f"{a:.2f}" for a in r.alpha)
        lines.append(f"{' + '.join(r.members):<{width}}  {alpha:<24}  "
                     f"{100 * r.wm_accuracy:>8.2f}  {100 * r.mv_accuracy:>8.2f}")
    return "\n".join(lines)


def report_csv(rows: list[SubsetRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["members", "alpha", "wm_accuracy_pct", "mv_accuracy_pct"])
        for r in rows:
            w.writerow([" + ".join(r.members), ",".join(f"{a:.2f}" for a in r.alpha),
                        f"{100 * r.wm_accuracy:.2f}", f"{100 * r.mv_accuracy:.2f}"])


# -- file formats --------------------------------------------------------------

def _prob_columns(n_classes: int = N_CLASSES) -> list[str]:
    return [f"p{i}" for i in range(n_classes)]


def write_predictions(preds: PredictionSet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "model_name", *_prob_columns(preds.probs.shape[2])])
        for j, name in enumerate(preds.model_names):
            for i, sid in enumerate(preds.sample_ids):
                w.writerow([sid, name, *(repr(float(p)) for p in preds.probs[j, i])])


def read_predictions(*paths) -> PredictionSet:
    """Merge one or more prediction CSVs; every model must cover the same ids."""
    table: dict[str, dict[str, np.ndarray]] = {}
    order: list[str] = []
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            cols = _prob_columns()
            if reader.fieldnames is None or reader.fieldnames[:2] != ["sample_id", "model_name"] \
                    or reader.fieldnames[2:] != cols:
                raise ValidationError(f"{path}: expected columns sample_id,model_name,{','.join(cols)}")
            for line, row in enumerate(reader, start=2):
                name = row["model_name"]
                if name not in table:
                    table[name] = {}
                    order.append(name)
                try:
                    table[name][row["sample_id"]] = np.array([float(row[c]) for c in cols])
                except ValueError as exc:
                    raise ValidationError(f"{path}:{line}: {exc}") from None
    if not table:
        raise ValidationError("no predictions found")
    ids = list(table[order[0]])
    for name in order[1:]:
        if set(table[name]) != set(ids):
            raise ContractError(f"model '{name}' does not cover the same sample ids as '{order[0]}'")
    probs = np.stack([np.stack([table[name][s] for s in ids]) for name in order])
    return PredictionSet(tuple(order), tuple(ids), probs)


def write_labels(sample_ids, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label"])
        for sid, y in zip(sample_ids, labels):
            w.writerow([sid, int(y)])


def read_labels(path, sample_ids=None) -> tuple[list[str], np.ndarray]:
    """Label file as (ids, labels); with ``sample_ids`` the labels are reordered to match."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sample_id", "label"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns sample_id,label")
        pairs = []
        for line, row in enumerate(reader, start=2):
            try:
                y = int(row["label"])
            except ValueError:
                raise ValidationError(f"{path}:{line}: label {row['label']!r} is not an integer") from None
            if not 0 <= y < N_CLASSES:
                raise ValidationError(f"{path}:{line}: label {y} outside [0, {N_CLASSES})")
            pairs.append((row["sample_id"], y))
    lookup = dict(pairs)
    if sample_ids is None:
        return [p[0] for p in pairs], np.array([p[1] for p in pairs], dtype=np.int64)
    missing = [s for s in sample_ids if s not in lookup]
    if missing:
        raise ContractError(f"no label for sample '{missing[0]}'")
    return list(sample_ids), np.array([lookup[s] for s in sample_ids], dtype=np.int64)
