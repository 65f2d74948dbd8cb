"""Labelled corpora: TSV ingestion with the two label schemas, and a
synthetic marker-token task for desk-scale experiments."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

STAGE1_LABELS = ("not_hate", "implicit_hate")
STAGE2_LABELS = ("grievance", "incitement", "inferiority", "irony", "stereotypical", "threatening")
SCHEMAS = {1: STAGE1_LABELS, 2: STAGE2_LABELS}
# present in stage-1 files but outside the binary task
STAGE1_SKIPPED = ("explicit_hate",)


@dataclass(frozen=True)
class LabeledExample:
    text: str
    label: int
    stage: int | None = None


def schema(stage: int):
    try:
        return SCHEMAS[stage]
    except KeyError:
        raise DataError(f"unknown stage {stage}; expected 1 or 2") from None


def normalize_label(raw: str) -> str:
    return "_".join(raw.strip().lower().replace("-", " ").split())


@dataclass
class LoadedCorpus:
    examples: list
    skipped: int = 0
    rows: int = 0
    skipped_labels: collections.Counter = field(default_factory=collections.Counter)

    def __iter__(self):
        return iter(self.examples)

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


def load_tsv(path, stage: int, text_col: str = "text", label_col: str = "label") -> LoadedCorpus:
    """Read a UTF-8 tab-separated file with a header row.

    Stage-1 rows labelled ``explicit_hate`` are counted in ``skipped`` and
    dropped.  Any other unknown label or a row with the wrong field count
    raises :class:`DataError` naming the line.
    """
    names = schema(stage)
    lookup = {n: i for i, n in enumerate(names)}
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc})") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file, expected a header row")
    header = lines[0].rstrip("\r").split("\t")
    try:
        ti, li = header.index(text_col), header.index(label_col)
    except ValueError:
        raise DataError(f"{path}: header {header} lacks column {text_col!r} or {label_col!r}") from None

    out = LoadedCorpus(examples=[])
    for lineno, line in enumerate(lines[1:], start=2):
        out.rows += 1
        fields = line.rstrip("\r").split("\t")
        if len(fields) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, found {len(fields)}")
        label = normalize_label(fields[li])
        if label in lookup:
            out.examples.append(LabeledExample(fields[ti], lookup[label], stage))
        elif stage == 1 and label in STAGE1_SKIPPED:
            out.skipped += 1
            out.skipped_labels[label] += 1
        else:
            raise DataError(f"{path}:{lineno}: unknown stage-{stage} label {fields[li]!r}")
    return out


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SynthTaskSpec:
    """Marker-token classification task.

    Every position independently becomes a uniformly drawn word with
    probability ``noise_rate``; otherwise it is one of the example's class
    markers with probability ``marker_prob``, else a neutral filler word.
    ``vocab_size`` counts corpus words (markers plus fillers), not specials.
    """

    num_classes: int = 2
    size: int = 400
    vocab_size: int = 60
    markers_per_class: int = 2
    marker_prob: float = 0.8
    noise_rate: float = 0.1
    priors: tuple | None = None
    length_range: tuple = (6, 14)
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("a synthetic task needs at least 2 classes")
        if self.markers_per_class < 1:
            raise DataError("markers_per_class must be positive")
        if self.vocab_size <= self.num_classes * self.markers_per_class:
            raise DataError("vocab_size must leave room for filler words beyond the class markers")
        if not (0.0 <= self.marker_prob <= 1.0 and 0.0 <= self.noise_rate <= 1.0):
            raise DataError("marker_prob and noise_rate must be probabilities")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise DataError(f"bad length range {self.length_range}")
        priors = self.class_priors()
        if priors.shape != (self.num_classes,) or np.any(priors <= 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise DataError("priors must be positive, one per class, and sum to 1")

    def class_priors(self):
        if self.priors is None:
            return np.full(self.num_classes, 1.0 / self.num_classes)
        return np.asarray(self.priors, dtype=np.float64)

    def markers(self, c):
        return [f"c{c}m{j}" for j in range(self.markers_per_class)]

    def words(self):
        markers = [w for c in range(self.num_classes) for w in self.markers(c)]
        fillers = [f"w{j}" for j in range(self.vocab_size - len(markers))]
        return markers + fillers


def generate_synth(spec: SynthTaskSpec) -> list:
    rng = np.random.default_rng(spec.seed)
    words = np.array(spec.words())
    m = spec.markers_per_class
    n_markers = spec.num_classes * m
    n_fillers = len(words) - n_markers
    lo, hi = spec.length_range
    labels = rng.choice(spec.num_classes, size=spec.size, p=spec.class_priors())
    lengths = rng.integers(lo, hi + 1, size=spec.size)
    out = []
    for label, length in zip(labels, lengths):
        u_noise = rng.random(length)
        u_marker = rng.random(length)
        ids = np.where(
            u_marker < spec.marker_prob,
            label * m + rng.integers(0, m, size=length),
            n_markers + rng.integers(0, n_fillers, size=length),
        )
        ids = np.where(u_noise < spec.noise_rate, rng.integers(0, len(words), size=length), ids)
        out.append(LabeledExample(" ".join(words[ids]), int(label)))
    return out


@dataclass
class CorpusStats:
    counts: np.ndarray
    length_histogram: dict

    @property
    def total(self):
        return int(self.counts.sum())


def corpus_stats(examples, num_classes: int | None = None) -> CorpusStats:
    examples = list(examples)
    if not examples:
        raise DataError("cannot compute statistics of an empty corpus")
    labels = np.array([e.label for e in examples], dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=c)
    lengths = collections.Counter(len(e.text.split()) for e in examples)
    return CorpusStats(counts, dict(sorted(lengths.items())))
