"""Verb-noun action scoring: co-occurrence prior, re-weighting, late fusion,
and top-k accuracy.

An action is a (verb, noun) pair.  The plain action score is the product of
the verb and noun probabilities; re-weighting multiplies in a prior mu(v, n)
built from training-set co-occurrence frequencies, so pairs never seen in
training score exactly zero and implausible combinations drop out of the
ranking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .bank import FeatureBank
from .errors import ValidationError

__all__ = [
    "ActionPrior",
    "ScoreTable",
    "compute_prior",
    "uniform_prior",
    "prior_stats",
    "reweight_actions",
    "late_fuse",
    "topk_accuracy",
    "score_actions_for_bank",
    "action_index",
    "action_pair",
    "save_prior",
    "load_prior",
    "save_score_table",
    "load_score_table",
]

SCORE_SPACES = ("verb", "noun", "action")


@dataclass
class ActionPrior:
    """Sparse verb x noun co-occurrence prior.  ``freq`` maps observed pairs
    to relative frequencies; absent pairs have mu = 0.  ``counts`` keeps the
    raw tallies for reporting."""

    freq: dict[tuple[int, int], float]
    verb_vocab_size: int
    noun_vocab_size: int
    counts: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for (v, n), f in self.freq.items():
            if not (0 <= v < self.verb_vocab_size and 0 <= n < self.noun_vocab_size):
                raise ValidationError(
                    f"prior pair ({v}, {n}) out of range for vocab "
                    f"{self.verb_vocab_size}x{self.noun_vocab_size}")
            if not f > 0:
                raise ValidationError(f"prior pair ({v}, {n}) has non-positive frequency {f}")

    def mu(self, verb: int, noun: int) -> float:
        return self.freq.get((verb, noun), 0.0)


@dataclass
class ScoreTable:
    """Per-segment class scores: one aligned row per segment id."""

    segment_ids: list[str]
    scores: np.ndarray
    space: str
    verb_classes: int | None = None
    noun_classes: int | None = None

    def __post_init__(self) -> None:
        if self.space not in SCORE_SPACES:
            raise ValidationError(f"score space {self.space!r} not one of {SCORE_SPACES}")
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.segment_ids):
            raise ValidationError(
                f"score table: {len(self.segment_ids)} ids but scores shaped {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("score table contains non-finite entries")
        if self.space == "action":
            if self.verb_classes is None or self.noun_classes is None:
                raise ValidationError("action tables must declare verb_classes and noun_classes")
            if self.verb_classes * self.noun_classes != self.scores.shape[1]:
                raise ValidationError(
                    f"action table: {self.verb_classes}x{self.noun_classes} pairs but "
                    f"{self.scores.shape[1]} columns")

    @property
    def classes(self) -> int:
        return self.scores.shape[1]


def action_index(verb: int, noun: int, noun_vocab_size: int) -> int:
    """Flatten a (verb, noun) pair into the verb-major action space."""
    return verb * noun_vocab_size + noun


def action_pair(index: int, noun_vocab_size: int) -> tuple[int, int]:
    return divmod(index, noun_vocab_size)


def compute_prior(bank: FeatureBank) -> ActionPrior:
    """Relative frequency of each (verb, noun) pair among fully labeled
    segments; unseen pairs are absent (mu = 0)."""
    counts: dict[tuple[int, int], int] = {}
    for rec in bank.records:
        if rec.verb_label is None or rec.noun_label is None:
            continue
        key = (rec.verb_label, rec.noun_label)
        counts[key] = counts.get(key, 0) + 1
    total = sum(counts.values())
    if total == 0:
        raise ValidationError("compute_prior: no segment carries both verb and noun labels")
    freq = {key: c / total for key, c in counts.items()}
    return ActionPrior(freq=freq, verb_vocab_size=bank.verb_vocab_size,
                       noun_vocab_size=bank.noun_vocab_size, counts=counts)


def uniform_prior(verb_vocab_size: int, noun_vocab_size: int) -> ActionPrior:
    """mu = 1 on every pair: re-weighting with it reproduces the plain
    product ranking."""
    freq = {(v, n): 1.0 for v in range(verb_vocab_size) for n in range(noun_vocab_size)}
    return ActionPrior(freq=freq, verb_vocab_size=verb_vocab_size,
                       noun_vocab_size=noun_vocab_size)


def prior_stats(prior: ActionPrior, count_threshold: int = 50) -> dict:
    counts = prior.counts
    return {
        "labeled_segments": sum(counts.values()),
        "distinct_pairs": len(prior.freq),
        "count_threshold": count_threshold,
        "pairs_above_threshold": sum(1 for c in counts.values() if c > count_threshold),
    }


def reweight_actions(pv: np.ndarray, pn: np.ndarray, prior: ActionPrior,
                     renormalize: bool = False) -> np.ndarray:
    """Action scores mu(v, n) * pv[v] * pn[n] as a dense (verbs x nouns)
    matrix.  Pairs outside the prior's support are exactly zero.  Optional
    renormalization to a distribution never changes the ranking."""
    pv = np.asarray(pv, dtype=np.float64)
    pn = np.asarray(pn, dtype=np.float64)
    if pv.shape != (prior.verb_vocab_size,):
        raise ValidationError(
            f"verb probabilities have dim {pv.shape[0]}, prior expects {prior.verb_vocab_size}")
    if pn.shape != (prior.noun_vocab_size,):
        raise ValidationError(
            f"noun probabilities have dim {pn.shape[0]}, prior expects {prior.noun_vocab_size}")
    out = np.zeros((prior.verb_vocab_size, prior.noun_vocab_size))
    for (v, n), f in prior.freq.items():
        out[v, n] = f * pv[v] * pn[n]
    if renormalize:
        total = out.sum()
        if total > 0:
            out /= total
    return out


def _softmax_rows(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def late_fuse(tables: list[ScoreTable], weights: list[float]) -> ScoreTable:
    """Weighted arithmetic mean of the softmax-normalized rows of aligned
    tables.  Scaling all weights by a positive constant changes nothing."""
    if not tables:
        raise ValidationError("late_fuse: need at least one table")
    if len(weights) != len(tables):
        raise ValidationError(
            f"late_fuse: {len(tables)} tables but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValidationError("late_fuse: weights must be >= 0")
    total = float(sum(weights))
    if total == 0:
        raise ValidationError("late_fuse: weights must not all be zero")
    first = tables[0]
    for t in tables[1:]:
        if t.space != first.space:
            raise ValidationError(
                f"late_fuse: space mismatch, {first.space!r} vs {t.space!r}")
        if t.scores.shape[1] != first.scores.shape[1]:
            raise ValidationError(
                f"late_fuse: class count mismatch, {first.scores.shape[1]} vs {t.scores.shape[1]}")
        if t.segment_ids != first.segment_ids:
            for i, (x, y) in enumerate(zip(t.segment_ids, first.segment_ids)):
                if x != y:
                    raise ValidationError(
                        f"late_fuse: segment mismatch at row {i}: {y!r} vs {x!r}")
            raise ValidationError(
                f"late_fuse: tables have {len(first.segment_ids)} vs {len(t.segment_ids)} segments")
    fused = np.zeros_like(first.scores)
    for t, w in zip(tables, weights):
        fused += (w / total) * _softmax_rows(t.scores)
    return ScoreTable(segment_ids=list(first.segment_ids), scores=fused,
                      space=first.space, verb_classes=first.verb_classes,
                      noun_classes=first.noun_classes)


def topk_accuracy(table: ScoreTable, labels, k: int) -> float:
    """Fraction of rows whose true label ranks inside the top k.

    Ranking is by descending score with ties broken by ascending class
    index, which is pessimistic for the true label: a label tied at the
    k-th boundary counts only if its index wins the tie."""
    if k < 1:
        raise ValidationError(f"topk_accuracy: k must be >= 1, got {k}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (table.scores.shape[0],):
        raise ValidationError(
            f"topk_accuracy: {labels.shape[0]} labels for {table.scores.shape[0]} rows")
    classes = table.classes
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise ValidationError(f"topk_accuracy: label {bad} out of range for {classes} classes")
    hits = 0
    for row, label in zip(table.scores, labels):
        s = row[label]
        rank = int(np.sum(row > s)) + int(np.sum(row[:label] == s))
        if rank < k:
            hits += 1
    return hits / len(labels) if len(labels) else 0.0


def _aligned_action_labels(table: ScoreTable, bank: FeatureBank) -> np.ndarray:
    by_id = {r.segment_id: r for r in bank.records}
    labels = []
    for seg_id in table.segment_ids:
        rec = by_id.get(seg_id)
        if rec is None:
            raise ValidationError(f"segment {seg_id!r} not present in the bank")
        if rec.verb_label is None or rec.noun_label is None:
            raise ValidationError(f"segment {seg_id!r} lacks verb/noun labels")
        labels.append(action_index(rec.verb_label, rec.noun_label, bank.noun_vocab_size))
    return np.array(labels, dtype=np.int64)


def score_actions_for_bank(verb_table: ScoreTable, noun_table: ScoreTable,
                           prior: ActionPrior, bank: FeatureBank,
                           ks: tuple[int, ...] = (1, 5)) -> tuple[ScoreTable, dict]:
    """Per-segment action scores over the flattened verb x noun space, plus
    top-k accuracy with the prior and with mu replaced by all-ones."""
    if verb_table.space != "verb" or noun_table.space != "noun":
        raise ValidationError(
            f"expected a verb and a noun table, got {verb_table.space!r} and {noun_table.space!r}")
    if verb_table.segment_ids != noun_table.segment_ids:
        for i, (a, b) in enumerate(zip(verb_table.segment_ids, noun_table.segment_ids)):
            if a != b:
                raise ValidationError(
                    f"verb/noun tables misaligned at row {i}: {a!r} vs {b!r}")
        raise ValidationError(
            f"verb/noun tables have {len(verb_table.segment_ids)} vs "
            f"{len(noun_table.segment_ids)} segments")
    if verb_table.classes != prior.verb_vocab_size or noun_table.classes != prior.noun_vocab_size:
        raise ValidationError(
            f"tables are {verb_table.classes}x{noun_table.classes} classes but prior is "
            f"{prior.verb_vocab_size}x{prior.noun_vocab_size}")
    if (bank.verb_vocab_size, bank.noun_vocab_size) != \
            (prior.verb_vocab_size, prior.noun_vocab_size):
        raise ValidationError(
            f"bank vocab {bank.verb_vocab_size}x{bank.noun_vocab_size} does not match prior "
            f"{prior.verb_vocab_size}x{prior.noun_vocab_size}")

    plain_prior = uniform_prior(prior.verb_vocab_size, prior.noun_vocab_size)
    n_rows = len(verb_table.segment_ids)
    reweighted = np.zeros((n_rows, prior.verb_vocab_size * prior.noun_vocab_size))
    plain = np.zeros_like(reweighted)
    for i in range(n_rows):
        pv, pn = verb_table.scores[i], noun_table.scores[i]
        reweighted[i] = reweight_actions(pv, pn, prior).ravel()
        plain[i] = reweight_actions(pv, pn, plain_prior).ravel()

    table_kwargs = dict(segment_ids=list(verb_table.segment_ids), space="action",
                        verb_classes=prior.verb_vocab_size,
                        noun_classes=prior.noun_vocab_size)
    reweighted_table = ScoreTable(scores=reweighted, **table_kwargs)
    plain_table = ScoreTable(scores=plain, **table_kwargs)

    labels = _aligned_action_labels(reweighted_table, bank)
    metrics = {
        "reweighted": {f"top{k}": topk_accuracy(reweighted_table, labels, k) for k in ks},
        "plain": {f"top{k}": topk_accuracy(plain_table, labels, k) for k in ks},
    }
    return reweighted_table, metrics


# --- file formats ---------------------------------------------------------------

def save_prior(prior: ActionPrior, path) -> None:
    """One ``verb_id noun_id frequency`` line per stored pair."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for (v, n) in sorted(prior.freq):
            fh.write(f"{v} {n} {prior.freq[(v, n)]!r}\n")


def load_prior(path, verb_vocab_size: int | None = None,
               noun_vocab_size: int | None = None) -> ActionPrior:
    """Parse a prior file; vocab sizes are inferred from the largest ids
    unless given."""
    freq: dict[tuple[int, int], float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValidationError(
                    f"{path}: line {lineno}: expected 'verb noun frequency', got {line.strip()!r}")
            try:
                v, n, f = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ValidationError(f"{path}: line {lineno}: malformed numbers") from None
            if (v, n) in freq:
                raise ValidationError(f"{path}: line {lineno}: duplicate pair ({v}, {n})")
            freq[(v, n)] = f
    if not freq:
        raise ValidationError(f"{path}: prior file holds no pairs")
    if verb_vocab_size is None:
        verb_vocab_size = max(v for v, _ in freq) + 1
    if noun_vocab_size is None:
        noun_vocab_size = max(n for _, n in freq) + 1
    return ActionPrior(freq=freq, verb_vocab_size=verb_vocab_size,
                       noun_vocab_size=noun_vocab_size)


def save_score_table(table: ScoreTable, path) -> None:
    """Header line with the space tag and class counts, then one
    ``segment_id score...`` line per row at full precision."""
    header: dict = {"space": table.space, "classes": table.classes}
    if table.space == "action":
        header["verb_classes"] = table.verb_classes
        header["noun_classes"] = table.noun_classes
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for seg_id, row in zip(table.segment_ids, table.scores):
            if any(ch.isspace() for ch in seg_id):
                raise ValidationError(
                    f"segment id {seg_id!r} contains whitespace; not representable")
            fh.write(seg_id + " " + " ".join(repr(float(x)) for x in row) + "\n")


def load_score_table(path) -> ScoreTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty score table file")
    try:
        header = json.loads(lines[0])
        space = header["space"]
        classes = int(header["classes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        raise ValidationError(f"{path}: line 1: malformed score table header") from None
    segment_ids: list[str] = []
    rows: list[np.ndarray] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != classes + 1:
            raise ValidationError(
                f"{path}: line {lineno}: expected id plus {classes} scores, got {len(parts) - 1}")
        segment_ids.append(parts[0])
        try:
            rows.append(np.array([float(x) for x in parts[1:]], dtype=np.float64))
        except ValueError:
            raise ValidationError(f"{path}: line {lineno}: malformed score") from None
    scores = np.stack(rows) if rows else np.zeros((0, classes))
    return ScoreTable(segment_ids=segment_ids, scores=scores, space=space,
                      verb_classes=header.get("verb_classes"),
                      noun_classes=header.get("noun_classes"))
