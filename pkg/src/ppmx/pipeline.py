"""End-to-end pipeline: log -> encoding -> network -> regions -> surrogates.

The fitted artifacts travel together in a :class:`ModelBundle`, a single
JSON document with a SHA-256 digest over its payload.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from . import encoding as enc
from .encoding import Dataset, EncodingConfig, FeatureSchema, LabelRule, PrefixPolicy
from .eventlog import EventLog, LabelScheme, read_log
from .metrics import (classification_measures, clustering_ss, confusion_at_threshold,
                      roc_and_auroc, select_equal_error_threshold)
from .network import (NetworkConfig, TrainedNetwork, TrainingConfig, latent_codes,
                      predict_scores, train)
from .regions import KCandidate, KSelectionTrace, RegionModel, assign, kmeans, select_k
from .surrogate import (ClusterSurrogate, TreeConfig, decision_path, extract_rule,
                        fit_cluster_surrogates, path_directions, tree_to_dot)

__all__ = [
    "PipelineConfig",
    "ModelBundle",
    "ExplanationRecord",
    "PipelineError",
    "BundleError",
    "NotInValidationSet",
    "load_config",
    "run_train",
    "run_explain",
    "run_evaluate",
    "write_report",
    "save_bundle",
    "load_bundle",
    "export_tree_dot",
    "encode_log",
    "EXPLANATION_MANIFEST",
]

log = logging.getLogger(__name__)

BUNDLE_FORMAT = "ppmx-bundle"
BUNDLE_VERSION = 1
SEED_ENV = "PPMX_SEED"

EXPLANATION_MANIFEST = {
    "subject": "domain expert",
    "objective": "justification",
    "scope": "local post-hoc",
    "explanation_form": "surrogate decision tree path and rule",
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class BundleError(ValueError):
    pass


class NotInValidationSet(KeyError):
    def __str__(self):
        return self.args[0] if self.args else "not in validation set"


# ------------------------------------------------------------------ config

@dataclass
class PipelineConfig:
    seed: int = 0
    log_file: str | None = None
    log_format: str | None = None
    label_keys: tuple[str, ...] = ("concept:name", "lifecycle:transition")
    label_separator: str = "-"
    space_replacement: str | None = "."
    column_map: dict | None = None
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    k_range: tuple[int, ...] = tuple(range(2, 41))
    restarts: int = 10
    weighting: str = "unweighted"
    fit_baseline: bool = True
    tree: TreeConfig = field(default_factory=TreeConfig)
    synthetic: dict | None = None

    @property
    def label_scheme(self) -> LabelScheme:
        return LabelScheme(tuple(self.label_keys), self.label_separator, self.space_replacement)

    def snapshot(self) -> dict:
        return {
            "seed": self.seed,
            "ingestion": {"file": self.log_file, "format": self.log_format,
                          "label_keys": list(self.label_keys),
                          "label_separator": self.label_separator,
                          "space_replacement": self.space_replacement,
                          "column_map": self.column_map, "synthetic": self.synthetic,
                          "label_rule": self.encoding.label_rule.to_dict()},
            "encoding": {"ngram_order": self.encoding.ngram_order,
                         "categorical_attributes": list(self.encoding.categorical_attributes),
                         "numeric_attributes": list(self.encoding.numeric_attributes),
                         "prefix_policy": asdict(self.encoding.prefix_policy),
                         "split_ratio": self.encoding.split_ratio,
                         "positive_class_name": self.encoding.positive_class_name,
                         "negative_class_name": self.encoding.negative_class_name},
            "network": {k: v for k, v in asdict(self.network).items() if k != "seed"},
            "training": asdict(self.training),
            "regions": {"k_range": list(self.k_range), "restarts": self.restarts,
                        "weighting": self.weighting, "fit_baseline": self.fit_baseline},
            "surrogate": asdict(self.tree),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> "PipelineConfig":
        d = dict(d or {})
        if SEED_ENV in os.environ:
            seed = int(os.environ[SEED_ENV])
        elif "seed" in d:
            seed = int(d["seed"])
        else:
            raise ValueError(f"configuration must set 'seed' (or the {SEED_ENV} variable)")
        ing = dict(d.get("ingestion", {}))
        e = dict(d.get("encoding", {}))
        rule = dict(ing.get("label_rule", e.get("label_rule", {})))
        if "values" in rule:
            rule["values"] = tuple(rule["values"])
        policy = PrefixPolicy(**dict(e.get("prefix_policy", {})))
        encoding = EncodingConfig(
            ngram_order=int(e.get("ngram_order", 2)),
            categorical_attributes=tuple(e.get("categorical_attributes", ())),
            numeric_attributes=tuple(e.get("numeric_attributes", ())),
            label_rule=LabelRule(**rule),
            prefix_policy=policy,
            split_ratio=float(e.get("split_ratio", 0.8)),
            seed=seed,
            positive_class_name=e.get("positive_class_name", "Regular"),
            negative_class_name=e.get("negative_class_name", "Push-to-Front"),
        )
        net = dict(d.get("network", {}))
        net["seed"] = seed
        if "hidden_layer_sizes" in net:
            net["hidden_layer_sizes"] = tuple(net["hidden_layer_sizes"])
        regions = dict(d.get("regions", {}))
        if "k_range" in regions:
            k_range = tuple(int(k) for k in regions["k_range"])
        else:
            k_range = tuple(range(int(regions.get("k_min", 2)), int(regions.get("k_max", 40)) + 1))
        log_file = ing.get("file")
        if log_file and base_dir is not None and not os.path.isabs(log_file):
            log_file = os.path.join(os.fspath(base_dir), log_file)
        return cls(
            seed=seed,
            log_file=log_file,
            log_format=ing.get("format"),
            label_keys=tuple(ing.get("label_keys", ("concept:name", "lifecycle:transition"))),
            label_separator=ing.get("label_separator", "-"),
            space_replacement=ing.get("space_replacement", "."),
            column_map=ing.get("column_map"),
            synthetic=ing.get("synthetic"),
            encoding=encoding,
            network=NetworkConfig(**net),
            training=TrainingConfig(**dict(d.get("training", {}))),
            k_range=k_range,
            restarts=int(regions.get("restarts", 10)),
            weighting=regions.get("weighting", "unweighted"),
            fit_baseline=bool(regions.get("fit_baseline", True)),
            tree=TreeConfig(**dict(d.get("surrogate", {}))),
        )


def load_config(path: str | os.PathLike) -> PipelineConfig:
    """Read a YAML (or JSON) pipeline configuration; relative log paths resolve against its folder."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return PipelineConfig.from_dict(data or {}, base_dir=path.parent)


# ------------------------------------------------------------------ bundle

@dataclass
class ModelBundle:
    schema: FeatureSchema
    network: TrainedNetwork
    tau: float
    regions: RegionModel
    k_trace: KSelectionTrace
    surrogates: dict[int, ClusterSurrogate]
    validation: Dataset
    config: dict
    baseline: RegionModel | None = None
    baseline_surrogates: dict[int, ClusterSurrogate] | None = None
    evaluation: dict | None = None
    version: int = BUNDLE_VERSION
    digest: str | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def scores(self) -> np.ndarray:
        if "scores" not in self._cache:
            self._cache["scores"] = predict_scores(self.network, self.validation)
        return self._cache["scores"]

    def codes(self) -> np.ndarray:
        if "codes" not in self._cache:
            self._cache["codes"] = latent_codes(self.network, self.validation)
        return self._cache["codes"]

    def routed_clusters(self) -> np.ndarray:
        if "clusters" not in self._cache:
            self._cache["clusters"] = assign(self.regions, self.codes())
        return self._cache["clusters"]

    def payload(self) -> dict:
        v = self.validation
        return {
            "config": self.config,
            "schema": self.schema.to_dict(),
            "network": self.network.to_dict(),
            "tau": float(self.tau),
            "regions": self.regions.to_dict(),
            "k_trace": self.k_trace.to_rows(),
            "k_weighting": self.k_trace.weighting,
            "surrogates": {str(c): s.to_dict() for c, s in sorted(self.surrogates.items())},
            "baseline": self.baseline.to_dict() if self.baseline is not None else None,
            "baseline_surrogates": (
                {str(c): s.to_dict() for c, s in sorted(self.baseline_surrogates.items())}
                if self.baseline_surrogates is not None else None),
            "validation": {
                "case_ids": list(v.case_ids),
                "prefix_lengths": [int(p) for p in v.prefix_lengths],
                "labels": [int(y) for y in v.y],
                "raw": [[float(x) for x in row] for row in v.raw],
            },
            "evaluation": self.evaluation,
        }


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def compute_digest(payload: dict) -> str:
    return hashlib.sha256(_canonical(payload).encode("utf-8")).hexdigest()


def _bundle_from_payload(p: dict, version: int, digest: str) -> ModelBundle:
    schema = FeatureSchema.from_dict(p["schema"])
    v = p["validation"]
    raw = np.array(v["raw"], dtype=float).reshape(-1, schema.dimension)
    validation = Dataset(schema, schema.scale(raw), raw, v["labels"], v["case_ids"],
                         v["prefix_lengths"], "validation")
    trace = KSelectionTrace([KCandidate(**row) for row in p["k_trace"]], p["k_weighting"])

    def surrogates(d):
        return None if d is None else {int(c): ClusterSurrogate.from_dict(s) for c, s in d.items()}

    return ModelBundle(
        schema=schema,
        network=TrainedNetwork.from_dict(p["network"]),
        tau=p["tau"],
        regions=RegionModel.from_dict(p["regions"]),
        k_trace=trace,
        surrogates=surrogates(p["surrogates"]),
        validation=validation,
        config=p["config"],
        baseline=RegionModel.from_dict(p["baseline"]) if p["baseline"] else None,
        baseline_surrogates=surrogates(p["baseline_surrogates"]),
        evaluation=p["evaluation"],
        version=version,
        digest=digest,
    )


def save_bundle(bundle: ModelBundle, path: str | os.PathLike) -> str:
    """Write the bundle atomically and return its digest."""
    payload = bundle.payload()
    digest = compute_digest(payload)
    bundle.digest = digest
    doc = {"format": BUNDLE_FORMAT, "version": bundle.version, "digest": digest, "payload": payload}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False))
    os.replace(tmp, path)
    return digest


def load_bundle(path: str | os.PathLike) -> ModelBundle:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BundleError(f"corrupt bundle: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != BUNDLE_FORMAT:
        raise BundleError("corrupt bundle: not a ppmx bundle document")
    if doc.get("version") != BUNDLE_VERSION:
        raise BundleError(f"unknown bundle version {doc.get('version')!r}")
    payload = doc.get("payload")
    if not isinstance(payload, dict) or compute_digest(payload) != doc.get("digest"):
        raise BundleError("corrupt bundle: digest mismatch")
    try:
        return _bundle_from_payload(payload, doc["version"], doc["digest"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"corrupt bundle: {exc}") from None


# ------------------------------------------------------------------ training

def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                out = fn(*args, **kwargs)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, exc) from exc
            log.info("stage %s done in %.2fs", name, time.perf_counter() - t0)
            return out
        return inner
    return wrap


@_stage("parse")
def _load_log(config: PipelineConfig) -> EventLog:
    if config.synthetic is not None:
        from .synthetic import make_incident_log
        return make_incident_log(**config.synthetic)
    if not config.log_file:
        raise ValueError("no input log configured")
    return read_log(config.log_file, config.log_format, config.label_scheme, config.column_map)


@_stage("encode")
def encode_log(event_log: EventLog, config: PipelineConfig) -> tuple[Dataset, Dataset]:
    """Label cases, split by case id, fit the schema on training cases and encode both sides."""
    ec = config.encoding
    labels = enc.label_log(event_log, ec.label_rule)
    train_ids, valid_ids = enc.split_case_ids(event_log.case_ids(), ec.split_ratio, config.seed)
    train_log, valid_log = event_log.subset(train_ids), event_log.subset(valid_ids)
    schema = enc.build_feature_schema(train_log, ec)
    train_ds = enc.encode_traces(train_log.traces, schema, ec.prefix_policy, labels, "train")
    valid_ds = enc.encode_traces(valid_log.traces, schema, ec.prefix_policy, labels, "validation")
    if len(train_ds) == 0 or len(valid_ds) == 0:
        raise ValueError("prefix policy produced an empty training or validation set")
    log.info("encoded %d train / %d validation instances, dimension %d",
             len(train_ds), len(valid_ds), schema.dimension)
    return train_ds, valid_ds


@_stage("train")
def _train(train_ds, valid_ds, config):
    return train(train_ds, valid_ds, config.network, config.training)


@_stage("threshold")
def _threshold(scores, labels):
    return select_equal_error_threshold(scores, labels)


@_stage("regions")
def _regions(codes, scores, labels, tau, config):
    return select_k(codes, scores, labels, tau, config.k_range, config.seed,
                    config.restarts, config.weighting)


@_stage("baseline")
def _baseline(features, k, config):
    return kmeans(features, k, config.seed, config.restarts, space="original")


@_stage("surrogates")
def _surrogates(assignments, k, X, scores, config, tau, truth):
    return fit_cluster_surrogates(assignments, X, scores, config.tree, tau, truth, k)


def run_train(config: PipelineConfig, event_log: EventLog | None = None) -> ModelBundle:
    """Run every stage and return an in-memory bundle (nothing is written)."""
    if event_log is None:
        event_log = _load_log(config)
    train_ds, valid_ds = encode_log(event_log, config)
    trained = _train(train_ds, valid_ds, config)
    scores = predict_scores(trained, valid_ds)
    tau, _ = _threshold(scores, valid_ds.y)
    codes = latent_codes(trained, valid_ds)
    regions, k_trace = _regions(codes, scores, valid_ds.y, tau, config)
    surrogates = _surrogates(regions.assignments, regions.k, valid_ds.X, scores, config, tau, valid_ds.y)
    baseline = baseline_surrogates = None
    if config.fit_baseline:
        try:
            baseline = _baseline(valid_ds.X, regions.k, config)
        except PipelineError as exc:
            log.warning("baseline regions skipped: %s", exc)
        if baseline is not None:
            baseline_surrogates = _surrogates(baseline.assignments, baseline.k, valid_ds.X, scores,
                                              config, tau, valid_ds.y)
    bundle = ModelBundle(valid_ds.schema, trained, tau, regions, k_trace, surrogates, valid_ds,
                         config.snapshot(), baseline, baseline_surrogates)
    bundle._cache.update(scores=scores, codes=codes)
    bundle.evaluation = run_evaluate(bundle)
    bundle.digest = compute_digest(bundle.payload())
    return bundle


# ------------------------------------------------------------------ evaluation

def _mean_r2(surrogates: Mapping[int, ClusterSurrogate] | None) -> float | None:
    if not surrogates:
        return None
    vals = [s.r2 for s in surrogates.values() if s.r2 is not None]
    return float(np.mean(vals)) if vals else None


def run_evaluate(bundle: ModelBundle) -> dict:
    """Metrics report recomputed from the bundle's own contents."""
    scores = bundle.scores()
    y = bundle.validation.y
    tau = bundle.tau
    report: dict[str, Any] = {"manifest": dict(EXPLANATION_MANIFEST),
                              "n_validation": int(len(y)), "tau": float(tau)}
    if len(np.unique(y)) == 2:
        report["auroc"] = roc_and_auroc(scores, y).auroc
    else:
        report["auroc"] = None
    cm = confusion_at_threshold(scores, y, tau)
    report["confusion"] = cm.as_dict()
    report["measures"] = classification_measures(cm).as_dict()
    codes = bundle.codes()
    report["clustering"] = clustering_ss(codes, bundle.regions.assignments).as_dict()
    report["k"] = int(bundle.regions.k)
    report["k_selection"] = bundle.k_trace.to_rows()
    clusters = []
    for c, s in sorted(bundle.surrogates.items()):
        clusters.append({"cluster": c, "size": s.size, "local_accuracy": s.local_accuracy,
                         "r2": s.r2, "depth": s.tree.depth, "flag": s.flag})
    report["clusters"] = clusters
    report["mean_r2"] = _mean_r2(bundle.surrogates)
    r2s = [s.r2 for s in bundle.surrogates.values() if s.r2 is not None]
    report["max_r2"] = float(max(r2s)) if r2s else None
    if bundle.baseline is not None:
        report["baseline"] = {
            "k": int(bundle.baseline.k),
            "clustering_original_space": bundle.baseline.fit_summary.as_dict(),
            "mean_r2": _mean_r2(bundle.baseline_surrogates),
            "latent_mean_r2": report["mean_r2"],
        }
    return report


def write_report(report: dict, bundle: ModelBundle, out_dir: str | os.PathLike) -> list[Path]:
    """Write summary.json plus metrics / ROC / cluster / k-selection CSVs and one DOT per cluster."""
    out = Path(out_dir)
    (out / "trees").mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, text):
        p = out / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    emit("summary.json", json.dumps(report, sort_keys=True, indent=2) + "\n")

    def table(rows, header):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()

    metric_rows = [["auroc", report["auroc"]], ["tau", report["tau"]]]
    metric_rows += [[k, v] for k, v in report["confusion"].items()]
    metric_rows += [[k, v] for k, v in report["measures"].items() if k != "undefined"]
    metric_rows += [["sswc", report["clustering"]["sswc"]], ["ssbc", report["clustering"]["ssbc"]],
                    ["explained_variance", report["clustering"]["explained_variance"]],
                    ["ssbc_over_sswc", report["clustering"]["paper_ratio"]],
                    ["k", report["k"]], ["mean_r2", report["mean_r2"]]]
    emit("metrics.csv", table(metric_rows, ["metric", "value"]))
    y = bundle.validation.y
    if len(np.unique(y)) == 2:
        roc = roc_and_auroc(bundle.scores(), y)
        emit("roc.csv", table([[f, t, th] for f, t, th in roc.points], ["fpr", "tpr", "threshold"]))
    emit("clusters.csv", table([[c["cluster"], c["size"], c["local_accuracy"], c["r2"]]
                                for c in report["clusters"]],
                               ["cluster", "size", "local_accuracy", "r2"]))
    emit("k_selection.csv", table([[r["k"], r["mean_accuracy"], r["explained_variance"], r["chosen"]]
                                   for r in report["k_selection"]],
                                  ["k", "mean_accuracy", "explained_variance", "chosen"]))
    for c, s in sorted(bundle.surrogates.items()):
        emit(f"trees/cluster_{c}.dot", tree_to_dot(s.tree, bundle.schema, name=f"Cluster{c}"))
    return written


# ------------------------------------------------------------------ explanations

@dataclass
class ExplanationRecord:
    cluster_number: int
    case_id: str
    prefix_length: int
    r2_of_local_surrogate: float | None
    deep_learning_prediction: float
    surrogate_tree_prediction: float
    predicted_label: str
    ground_truth_label: str
    decision_path: list[dict]
    path_directions: str
    rule: dict
    tau: float
    warnings: list[str] = field(default_factory=list)

    @property
    def instance_id(self) -> str:
        return f"{self.case_id}#{self.prefix_length}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instance_id"] = self.instance_id
        return d


def run_explain(bundle: ModelBundle, case_id: str, prefix_length: int) -> ExplanationRecord:
    row = bundle.validation.find(case_id, prefix_length)
    if row is None:
        raise NotInValidationSet(f"({case_id}, {prefix_length}) not in validation set")
    schema = bundle.schema
    x = bundle.validation.X[row]
    score = float(bundle.scores()[row])
    cluster = int(bundle.routed_clusters()[row])
    surrogate = bundle.surrogates[cluster]
    steps, leaf = decision_path(surrogate.tree, x)
    rule = extract_rule((steps, leaf), schema)
    names = schema.feature_names
    path = [{"node": s.node_id, "feature": names[s.feature],
             "threshold_raw": schema.unscale(s.feature, s.threshold),
             "direction": "Left" if s.went_left else "Right"} for s in steps]
    path.append({"node": leaf.id, "leaf": True, "value": leaf.value, "support": leaf.n_samples})
    warnings = []
    if surrogate.r2 is None:
        warnings.append(f"fidelity warning: {surrogate.flag or 'R2 undefined'}")
    pos, neg = schema.positive_class_name, schema.negative_class_name
    return ExplanationRecord(
        cluster_number=cluster,
        case_id=str(case_id),
        prefix_length=int(prefix_length),
        r2_of_local_surrogate=surrogate.r2,
        deep_learning_prediction=score,
        surrogate_tree_prediction=float(leaf.value),
        predicted_label=pos if score >= bundle.tau else neg,
        ground_truth_label=pos if bundle.validation.y[row] == 1 else neg,
        decision_path=path,
        path_directions=path_directions(steps),
        rule=rule.to_dict(),
        tau=float(bundle.tau),
        warnings=warnings,
    )


def export_tree_dot(bundle: ModelBundle, cluster: int, path: str | os.PathLike | None = None) -> str:
    if cluster not in bundle.surrogates:
        raise KeyError(f"unknown cluster {cluster}")
    text = tree_to_dot(bundle.surrogates[cluster].tree, bundle.schema, name=f"Cluster{cluster}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
