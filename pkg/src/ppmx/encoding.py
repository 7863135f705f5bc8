"""Prefix encoding: n-gram transition counts, elapsed times and one-hot case data.

A prefix is encoded to a fixed-length vector laid out as
``[transition counts | numeric features (z-scaled) | one-hot blocks]``.
The layout and the scaling statistics live in a :class:`FeatureSchema` that is
fit on training cases only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .eventlog import EventLog, Trace

__all__ = [
    "LabelRule",
    "PrefixPolicy",
    "EncodingConfig",
    "FeatureSchema",
    "EncodedInstance",
    "Dataset",
    "Prefix",
    "EncodingError",
    "build_feature_schema",
    "generate_prefixes",
    "encode_prefix",
    "encode_traces",
    "label_case",
    "label_log",
    "split_case_ids",
    "split_dataset",
    "export_dataset_csv",
    "NGRAM_JOIN",
    "MISSING_LEVEL",
]

NGRAM_JOIN = "---"
MISSING_LEVEL = "missing"
DURATION_START = "duration_since_start_seconds"
DURATION_PREVIOUS = "duration_since_previous_event_seconds"


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class LabelRule:
    """Predicate deciding whether a case is push-to-front.

    ``op`` is one of ``in`` (value equals a member of ``values``), ``not_in``
    or ``contains_any`` (value contains one of ``values`` as a substring).
    With ``scope="event"`` the case is positive for the predicate when any
    event satisfies it; with ``scope="case"`` the case attribute is tested.
    """

    attribute: str = "support_line"
    op: str = "in"
    values: tuple[str, ...] = ("2nd", "3rd")
    scope: str = "event"

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(str(v) for v in self.values))
        if self.op not in ("in", "not_in", "contains_any"):
            raise EncodingError(f"unknown label rule op {self.op!r}")
        if self.scope not in ("event", "case"):
            raise EncodingError(f"unknown label rule scope {self.scope!r}")

    def test(self, value: Any) -> bool:
        text = str(value)
        if self.op == "in":
            return text in self.values
        if self.op == "not_in":
            return text not in self.values
        return any(v in text for v in self.values)

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "op": self.op,
                "values": list(self.values), "scope": self.scope}


@dataclass(frozen=True)
class PrefixPolicy:
    """``mode="all"`` yields prefixes of length ``min_length..len(trace)``;
    ``mode="full"`` yields only the complete trace."""

    min_length: int = 2
    mode: str = "all"

    def __post_init__(self):
        if self.mode not in ("all", "full"):
            raise EncodingError(f"unknown prefix mode {self.mode!r}")
        if self.min_length < 1:
            raise EncodingError("min_length must be >= 1")

    def lengths(self, n_events: int) -> range:
        if self.mode == "full":
            return range(n_events, n_events + 1) if n_events >= self.min_length else range(0)
        return range(self.min_length, n_events + 1)


@dataclass(frozen=True)
class EncodingConfig:
    ngram_order: int = 2
    categorical_attributes: tuple[str, ...] = ()
    numeric_attributes: tuple[str, ...] = ()
    label_rule: LabelRule = field(default_factory=LabelRule)
    prefix_policy: PrefixPolicy = field(default_factory=PrefixPolicy)
    split_ratio: float = 0.8
    seed: int = 0
    positive_class_name: str = "Regular"
    negative_class_name: str = "Push-to-Front"

    def __post_init__(self):
        if self.ngram_order < 2:
            raise EncodingError("ngram_order must be >= 2")
        object.__setattr__(self, "categorical_attributes", tuple(self.categorical_attributes))
        object.__setattr__(self, "numeric_attributes", tuple(self.numeric_attributes))


class Prefix(NamedTuple):
    trace: Trace
    length: int

    @property
    def events(self):
        return self.trace.events[:self.length]

    @property
    def case_id(self) -> str:
        return self.trace.case_id


def generate_prefixes(trace: Trace, policy: PrefixPolicy | None = None) -> list[Prefix]:
    policy = policy or PrefixPolicy()
    return [Prefix(trace, n) for n in policy.lengths(len(trace))]


def _ngrams(labels: Sequence[str], order: int) -> Iterable[str]:
    for i in range(len(labels) - order + 1):
        yield NGRAM_JOIN.join(labels[i:i + order])


def _categorical_value(trace: Trace, length: int, attr: str) -> str:
    if attr in trace.case_attributes and trace.case_attributes[attr] is not None:
        return str(trace.case_attributes[attr])
    for event in reversed(trace.events[:length]):
        value = event.attributes.get(attr)
        if value is not None:
            return str(value)
    return MISSING_LEVEL


def _numeric_attribute(trace: Trace, length: int, attr: str) -> float:
    for event in reversed(trace.events[:length]):
        value = event.attributes.get(attr)
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    return 0.0


@dataclass
class FeatureSchema:
    ngram_order: int
    ngram_vocabulary: list[str]
    numeric_features: list[str]
    categorical_features: list[tuple[str, list[str]]]
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    constant_features: list[str]
    label_rule: LabelRule
    positive_class_name: str = "Regular"
    negative_class_name: str = "Push-to-Front"
    numeric_attributes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.scaler_mean = np.asarray(self.scaler_mean, dtype=float)
        self.scaler_std = np.asarray(self.scaler_std, dtype=float)
        self._vocab_index = {k: i for i, k in enumerate(self.ngram_vocabulary)}
        if len(self._vocab_index) != len(self.ngram_vocabulary):
            raise EncodingError("duplicate n-gram vocabulary entries")
        names = list(self.ngram_vocabulary) + list(self.numeric_features)
        for attr, levels in self.categorical_features:
            names.extend(f"{attr}_{level}" for level in levels)
        self._names = tuple(names)

    @property
    def dimension(self) -> int:
        return len(self._names)

    @property
    def feature_names(self) -> tuple[str, ...]:
        return self._names

    @property
    def numeric_slice(self) -> slice:
        start = len(self.ngram_vocabulary)
        return slice(start, start + len(self.numeric_features))

    def feature_kind(self, index: int) -> str:
        """``count``, ``numeric`` or ``onehot``."""
        n_vocab = len(self.ngram_vocabulary)
        if index < n_vocab:
            return "count"
        if index < n_vocab + len(self.numeric_features):
            return "numeric"
        return "onehot"

    def onehot_owner(self, index: int) -> tuple[str, str]:
        offset = len(self.ngram_vocabulary) + len(self.numeric_features)
        for attr, levels in self.categorical_features:
            if index < offset + len(levels):
                return attr, levels[index - offset]
            offset += len(levels)
        raise IndexError(index)

    def unscale(self, index: int, value: float) -> float:
        """Map a value in encoded units back to raw units."""
        if self.feature_kind(index) != "numeric":
            return float(value)
        j = index - self.numeric_slice.start
        return float(value * self.scaler_std[j] + self.scaler_mean[j])

    def raw_vector(self, trace: Trace, length: int) -> np.ndarray:
        if length < 1:
            raise EncodingError("prefix must be non-empty")
        events = trace.events[:length]
        vec = np.zeros(self.dimension)
        labels = [e.activity_label for e in events]
        for gram in _ngrams(labels, self.ngram_order):
            j = self._vocab_index.get(gram)
            if j is not None:
                vec[j] += 1.0
        vec[self.numeric_slice] = self._numeric_raw(trace, length)
        offset = self.numeric_slice.stop
        for attr, levels in self.categorical_features:
            value = _categorical_value(trace, length, attr)
            if value in levels:
                vec[offset + levels.index(value)] = 1.0
            offset += len(levels)
        return vec

    def _numeric_raw(self, trace: Trace, length: int) -> list[float]:
        events = trace.events[:length]
        since_start = (events[-1].timestamp - events[0].timestamp).total_seconds()
        since_prev = ((events[-1].timestamp - events[-2].timestamp).total_seconds()
                      if length > 1 else 0.0)
        extra = [_numeric_attribute(trace, length, a) for a in self.numeric_attributes]
        return [since_start, since_prev, *extra]

    def scale(self, raw: np.ndarray) -> np.ndarray:
        """Z-scale the numeric block; constant features map to 0."""
        out = np.array(raw, dtype=float, copy=True)
        sl = self.numeric_slice
        safe = np.where(self.scaler_std > 0, self.scaler_std, 1.0)
        block = (out[..., sl] - self.scaler_mean) / safe
        block[..., self.scaler_std == 0] = 0.0
        out[..., sl] = block
        return out

    def to_dict(self) -> dict:
        return {
            "ngram_order": self.ngram_order,
            "ngram_vocabulary": list(self.ngram_vocabulary),
            "numeric_features": list(self.numeric_features),
            "numeric_attributes": list(self.numeric_attributes),
            "categorical_features": [[a, list(levels)] for a, levels in self.categorical_features],
            "scaler_mean": [float(v) for v in self.scaler_mean],
            "scaler_std": [float(v) for v in self.scaler_std],
            "constant_features": list(self.constant_features),
            "label_rule": self.label_rule.to_dict(),
            "positive_class_name": self.positive_class_name,
            "negative_class_name": self.negative_class_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FeatureSchema":
        rule = d["label_rule"]
        return cls(
            ngram_order=d["ngram_order"],
            ngram_vocabulary=list(d["ngram_vocabulary"]),
            numeric_features=list(d["numeric_features"]),
            categorical_features=[(a, list(levels)) for a, levels in d["categorical_features"]],
            scaler_mean=np.array(d["scaler_mean"], dtype=float),
            scaler_std=np.array(d["scaler_std"], dtype=float),
            constant_features=list(d["constant_features"]),
            label_rule=LabelRule(rule["attribute"], rule["op"], tuple(rule["values"]), rule["scope"]),
            positive_class_name=d["positive_class_name"],
            negative_class_name=d["negative_class_name"],
            numeric_attributes=list(d.get("numeric_attributes", [])),
        )


def build_feature_schema(log: EventLog, config: EncodingConfig) -> FeatureSchema:
    """Fit the encoding layout and scaler on a (training) log.

    Vocabulary and categorical levels are sorted lexicographically. Scaling
    statistics are population mean / standard deviation over the prefixes the
    config's policy generates; when the policy yields none (e.g. only
    single-event traces) the full traces are used instead.
    """
    if not log.traces:
        raise EncodingError("empty training portion")
    for attr in config.categorical_attributes:
        present = any(attr in t.case_attributes or any(attr in e.attributes for e in t.events)
                      for t in log.traces)
        if not present:
            raise EncodingError(f"categorical attribute {attr!r} absent from every trace")

    vocab = set()
    for trace in log.traces:
        vocab.update(_ngrams(trace.activities, config.ngram_order))

    prefixes = [p for t in log.traces for p in generate_prefixes(t, config.prefix_policy)]
    if not prefixes:
        prefixes = [Prefix(t, len(t)) for t in log.traces]

    categorical = []
    for attr in config.categorical_attributes:
        levels = {_categorical_value(p.trace, p.length, attr) for p in prefixes}
        categorical.append((attr, sorted(levels)))

    numeric_names = [DURATION_START, DURATION_PREVIOUS, *config.numeric_attributes]
    schema = FeatureSchema(
        ngram_order=config.ngram_order,
        ngram_vocabulary=sorted(vocab),
        numeric_features=numeric_names,
        categorical_features=categorical,
        scaler_mean=np.zeros(len(numeric_names)),
        scaler_std=np.ones(len(numeric_names)),
        constant_features=[],
        label_rule=config.label_rule,
        positive_class_name=config.positive_class_name,
        negative_class_name=config.negative_class_name,
        numeric_attributes=list(config.numeric_attributes),
    )
    raw = np.array([schema._numeric_raw(p.trace, p.length) for p in prefixes], dtype=float)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std[constant] = 0.0
    schema.scaler_mean = mean
    schema.scaler_std = std
    schema.constant_features = [n for n, c in zip(numeric_names, constant) if c]
    return schema


@dataclass(frozen=True)
class EncodedInstance:
    case_id: str
    prefix_length: int
    features: np.ndarray
    label: int | None
    raw: np.ndarray
    feature_names: tuple[str, ...]

    @property
    def raw_feature_view(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.feature_names, self.raw)}


def encode_prefix(prefix: Prefix, schema: FeatureSchema) -> EncodedInstance:
    raw = schema.raw_vector(prefix.trace, prefix.length)
    return EncodedInstance(prefix.case_id, prefix.length, schema.scale(raw), None, raw,
                           schema.feature_names)


class Dataset:
    """Encoded instances stored column-wise.

    ``X`` holds scaled features, ``raw`` the unscaled values, ``y`` the binary
    labels (1 = positive class).
    """

    def __init__(self, schema: FeatureSchema, X, raw, y, case_ids, prefix_lengths,
                 split_tag: str = "train"):
        self.schema = schema
        self.X = np.asarray(X, dtype=float).reshape(-1, schema.dimension)
        self.raw = np.asarray(raw, dtype=float).reshape(-1, schema.dimension)
        self.y = np.asarray(y, dtype=int)
        self.case_ids = list(case_ids)
        self.prefix_lengths = np.asarray(prefix_lengths, dtype=int)
        self.split_tag = split_tag
        n = len(self.X)
        if not (len(self.raw) == len(self.y) == len(self.case_ids) == len(self.prefix_lengths) == n):
            raise EncodingError("dataset columns have unequal lengths")
        self._index = None

    def __len__(self):
        return len(self.X)

    def __getitem__(self, i: int) -> EncodedInstance:
        return EncodedInstance(self.case_ids[i], int(self.prefix_lengths[i]), self.X[i],
                               int(self.y[i]), self.raw[i], self.schema.feature_names)

    @property
    def instances(self) -> list[EncodedInstance]:
        return [self[i] for i in range(len(self))]

    def find(self, case_id: str, prefix_length: int) -> int | None:
        if self._index is None:
            self._index = {(c, int(p)): i for i, (c, p) in
                           enumerate(zip(self.case_ids, self.prefix_lengths))}
        return self._index.get((str(case_id), int(prefix_length)))

    def take(self, rows, split_tag: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(self.schema, self.X[rows], self.raw[rows], self.y[rows],
                       [self.case_ids[i] for i in rows], self.prefix_lengths[rows],
                       split_tag or self.split_tag)

    @classmethod
    def from_instances(cls, schema: FeatureSchema, instances: Sequence[EncodedInstance],
                       split_tag: str = "train") -> "Dataset":
        d = schema.dimension
        for inst in instances:
            if len(inst.features) != d:
                raise EncodingError("instance dimension differs from schema")
        return cls(schema,
                   np.array([i.features for i in instances]).reshape(-1, d),
                   np.array([i.raw for i in instances]).reshape(-1, d),
                   [i.label if i.label is not None else -1 for i in instances],
                   [i.case_id for i in instances],
                   [i.prefix_length for i in instances], split_tag)


def label_case(trace: Trace, rule: LabelRule, strict: bool = True) -> bool:
    """Return whether ``trace`` is a push-to-front case under ``rule``.

    With ``strict`` an attribute missing from the whole trace is an error;
    otherwise such a trace is simply not push-to-front.
    """
    if not rule.values:
        return False
    if rule.scope == "case":
        if rule.attribute not in trace.case_attributes:
            if strict:
                raise EncodingError(f"label attribute {rule.attribute!r} absent from case {trace.case_id}")
            return False
        return rule.test(trace.case_attributes[rule.attribute])
    seen = False
    for event in trace.events:
        if rule.attribute in event.attributes:
            seen = True
            if rule.test(event.attributes[rule.attribute]):
                return True
    if not seen and strict:
        raise EncodingError(f"label attribute {rule.attribute!r} absent from all events "
                            f"of case {trace.case_id}")
    return False


def label_log(log: EventLog, rule: LabelRule) -> dict[str, int]:
    """Binary class per case: 1 for the positive (regular) class, 0 for push-to-front."""
    where = (lambda t: rule.attribute in t.case_attributes) if rule.scope == "case" else \
        (lambda t: any(rule.attribute in e.attributes for e in t.events))
    if rule.values and not any(where(t) for t in log.traces):
        raise EncodingError(f"label attribute {rule.attribute!r} absent from the whole log")
    return {t.case_id: int(not label_case(t, rule, strict=False)) for t in log.traces}


def encode_traces(traces: Iterable[Trace], schema: FeatureSchema, policy: PrefixPolicy,
                  labels: Mapping[str, int] | None = None, split_tag: str = "train") -> Dataset:
    """Encode every prefix the policy generates for each trace."""
    raws, cases, lengths, ys = [], [], [], []
    order = schema.ngram_order
    index = schema._vocab_index
    for trace in traces:
        wanted = set(policy.lengths(len(trace)))
        if not wanted:
            continue
        labels_seq = trace.activities
        counts = np.zeros(len(schema.ngram_vocabulary))
        for n in range(1, len(trace) + 1):
            if n >= order:
                j = index.get(NGRAM_JOIN.join(labels_seq[n - order:n]))
                if j is not None:
                    counts[j] += 1.0
            if n not in wanted:
                continue
            vec = schema.raw_vector(trace, n) if schema.categorical_features else None
            if vec is None:
                vec = np.zeros(schema.dimension)
                vec[schema.numeric_slice] = schema._numeric_raw(trace, n)
            vec[:len(counts)] = counts
            raws.append(vec)
            cases.append(trace.case_id)
            lengths.append(n)
            ys.append(labels[trace.case_id] if labels is not None else -1)
    raw = np.array(raws).reshape(-1, schema.dimension)
    return Dataset(schema, schema.scale(raw), raw, ys, cases, lengths, split_tag)


def split_case_ids(case_ids: Iterable[str], ratio: float, seed: int) -> tuple[list[str], list[str]]:
    if not 0.0 < ratio < 1.0:
        raise EncodingError("split ratio must lie in (0, 1)")
    unique = sorted(set(case_ids))
    if len(unique) < 2:
        raise EncodingError("need at least 2 cases to split")
    n_train = min(max(int(round(ratio * len(unique))), 1), len(unique) - 1)
    perm = np.random.default_rng(seed).permutation(len(unique))
    train = sorted(unique[i] for i in perm[:n_train])
    valid = sorted(unique[i] for i in perm[n_train:])
    return train, valid


def split_dataset(data: Dataset | Sequence[EncodedInstance], ratio: float, seed: int,
                  schema: FeatureSchema | None = None) -> tuple[Dataset, Dataset]:
    """Case-level random split: all prefixes of a case land on the same side."""
    if not isinstance(data, Dataset):
        if not data:
            raise EncodingError("no instances to split")
        if schema is None:
            raise EncodingError("schema required when splitting raw instances")
        data = Dataset.from_instances(schema, data)
    if len(data) == 0:
        raise EncodingError("no instances to split")
    train_ids, _ = split_case_ids(data.case_ids, ratio, seed)
    train_set = set(train_ids)
    mask = np.array([c in train_set for c in data.case_ids])
    return (data.take(np.flatnonzero(mask), "train"),
            data.take(np.flatnonzero(~mask), "validation"))


def export_dataset_csv(data: Dataset, out, scaled: bool = True, header: bool = True) -> None:
    """One row per instance: split tag, case id, prefix length, features, label."""
    writer = csv.writer(out, lineterminator="\n")
    if header:
        writer.writerow(["split", "case_id", "prefix_length", *data.schema.feature_names, "label"])
    matrix = data.X if scaled else data.raw
    for i in range(len(data)):
        writer.writerow([data.split_tag, data.case_ids[i], int(data.prefix_lengths[i]),
                         *[repr(float(v)) for v in matrix[i]], int(data.y[i])])
