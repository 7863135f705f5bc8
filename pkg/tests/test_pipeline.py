import dataclasses
import json

import numpy as np
import pytest

from conftest import smoke_config
from ppmx.encoding import Dataset
from ppmx.metrics import classification_measures, ConfusionMatrix, roc_and_auroc
from ppmx.network import predict_scores
from ppmx.pipeline import (BUNDLE_VERSION, BundleError, EXPLANATION_MANIFEST, ModelBundle,
                           NotInValidationSet, PipelineConfig, PipelineError, SEED_ENV,
                           compute_digest, encode_log, export_tree_dot, load_bundle, load_config,
                           run_evaluate, run_explain, run_train, save_bundle, write_report)
from ppmx.regions import assign
from ppmx.surrogate import decision_path
from ppmx.synthetic import make_incident_log

RECORD_FIELDS = {"cluster_number", "case_id", "prefix_length", "r2_of_local_surrogate",
                 "deep_learning_prediction", "surrogate_tree_prediction", "predicted_label",
                 "ground_truth_label", "decision_path", "path_directions", "rule", "tau",
                 "warnings", "instance_id"}


def instances(bundle):
    v = bundle.validation
    return list(zip(v.case_ids, (int(p) for p in v.prefix_lengths)))


@pytest.fixture(scope="module")
def saved(smoke_bundle, tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle") / "model.json"
    save_bundle(smoke_bundle, path)
    return path


# ---------------------------------------------------------------- train

def test_bundle_sections_present(smoke_bundle):
    b = smoke_bundle
    assert 0.0 <= b.tau <= 1.0
    assert b.regions.k in b.config["regions"]["k_range"]
    assert set(b.surrogates) == set(range(b.regions.k))
    assert b.baseline is not None and b.baseline.k == b.regions.k
    assert b.evaluation is not None and b.digest == compute_digest(b.payload())
    assert len(b.validation) == len(b.regions.assignments)


def test_tiny_log_end_to_end(tmp_path):
    bundle = run_train(smoke_config(n_cases=20, k_range=(2, 3)))
    save_bundle(bundle, tmp_path / "b.json")
    back = load_bundle(tmp_path / "b.json")
    assert back.digest == bundle.digest


def test_rerun_gives_identical_digest():
    cfg = smoke_config(n_cases=30, k_range=(2, 3, 4))
    assert run_train(cfg).digest == run_train(cfg).digest


def test_different_seed_changes_bundle():
    a = run_train(smoke_config(n_cases=30, k_range=(2, 3)))
    b = run_train(smoke_config(n_cases=30, seed=1, k_range=(2, 3)))
    assert a.digest != b.digest


def test_split_ratio_over_ten_cases():
    log = make_incident_log(n_cases=10, seed=3)
    _, valid = encode_log(log, smoke_config())
    assert len(set(valid.case_ids)) == 2


def test_stage_error_names_stage():
    cfg = smoke_config(synthetic={"n_cases": 1, "seed": 0})
    with pytest.raises(PipelineError) as err:
        run_train(cfg)
    assert err.value.stage == "encode"
    assert "encode" in str(err.value)


def test_missing_input_is_parse_error():
    with pytest.raises(PipelineError) as err:
        run_train(PipelineConfig(seed=0, log_file="/nonexistent/log.xes"))
    assert err.value.stage == "parse"


# ---------------------------------------------------------------- config

def test_config_requires_seed(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    with pytest.raises(ValueError, match="seed"):
        PipelineConfig.from_dict({"ingestion": {"synthetic": {"n_cases": 10}}})
    assert PipelineConfig.from_dict({"seed": 4}).seed == 4


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "17")
    cfg = PipelineConfig.from_dict({"seed": 4})
    assert cfg.seed == 17 and cfg.network.seed == 17 and cfg.encoding.seed == 17


def test_yaml_config_sections(tmp_path, monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    (tmp_path / "c.yaml").write_text(
        "seed: 3\n"
        "ingestion: {file: logs/x.xes, label_rule: {attribute: org:group, op: contains_any,"
        " values: [2nd, 3rd], scope: event}}\n"
        "encoding: {categorical_attributes: [impact], split_ratio: 0.75}\n"
        "network: {hidden_layer_sizes: [16, 8]}\n"
        "training: {max_epochs: 5, stopping_rounds: 2}\n"
        "regions: {k_min: 3, k_max: 6, restarts: 2}\n"
        "surrogate: {max_depth: 2, min_samples_leaf: 4}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.log_file == str(tmp_path / "logs" / "x.xes")
    assert cfg.encoding.label_rule.values == ("2nd", "3rd")
    assert cfg.encoding.split_ratio == 0.75
    assert cfg.network.hidden_layer_sizes == (16, 8)
    assert cfg.training.max_epochs == 5 and cfg.training.stopping_rounds == 2
    assert cfg.k_range == (3, 4, 5, 6) and cfg.restarts == 2
    assert cfg.tree.max_depth == 2 and cfg.tree.min_samples_leaf == 4


def test_shipped_configs_load(monkeypatch):
    import pathlib
    monkeypatch.delenv(SEED_ENV, raising=False)
    root = pathlib.Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.yaml")):
        cfg = load_config(path)
        assert cfg.seed == 0
    bpi = load_config(root / "bpi2013_incidents.yaml")
    assert bpi.k_range == tuple(range(2, 41))
    assert bpi.network.hidden_layer_sizes == (64, 32)


# ---------------------------------------------------------------- persistence

def test_save_load_round_trip(smoke_bundle, saved):
    back = load_bundle(saved)
    assert back.digest == smoke_bundle.digest
    assert np.array_equal(back.scores(), smoke_bundle.scores())
    assert np.array_equal(back.codes(), smoke_bundle.codes())
    assert np.array_equal(back.validation.X, smoke_bundle.validation.X)
    assert np.array_equal(back.routed_clusters(), smoke_bundle.regions.assignments)
    for c, s in smoke_bundle.surrogates.items():
        X = smoke_bundle.validation.X
        assert np.array_equal(back.surrogates[c].tree.predict(X), s.tree.predict(X))
    assert compute_digest(back.payload()) == back.digest


def test_round_trip_gives_identical_records(smoke_bundle, saved):
    back = load_bundle(saved)
    for case_id, length in instances(smoke_bundle):
        assert run_explain(back, case_id, length) == run_explain(smoke_bundle, case_id, length)


def test_truncated_bundle(saved, tmp_path):
    bad = tmp_path / "cut.json"
    bad.write_bytes(saved.read_bytes()[:-200])
    with pytest.raises(BundleError, match="corrupt bundle"):
        load_bundle(bad)


def test_tampered_bundle(saved, tmp_path):
    doc = json.loads(saved.read_text())
    doc["payload"]["tau"] = doc["payload"]["tau"] / 2
    bad = tmp_path / "tampered.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(BundleError, match="corrupt bundle"):
        load_bundle(bad)


def test_unknown_version(saved, tmp_path):
    doc = json.loads(saved.read_text())
    doc["version"] = BUNDLE_VERSION + 1
    bad = tmp_path / "future.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(BundleError, match="unknown bundle version"):
        load_bundle(bad)


def test_save_leaves_no_temp_file(smoke_bundle, tmp_path):
    save_bundle(smoke_bundle, tmp_path / "m.json")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.json"]


# ---------------------------------------------------------------- evaluation

def test_report_contents(smoke_bundle):
    r = smoke_bundle.evaluation
    assert r["manifest"] == EXPLANATION_MANIFEST
    assert r["auroc"] == roc_and_auroc(smoke_bundle.scores(), smoke_bundle.validation.y).auroc
    assert r["k"] == smoke_bundle.regions.k
    assert [row["k"] for row in r["k_selection"]] == list(smoke_bundle.config["regions"]["k_range"])
    assert sum(c["size"] for c in r["clusters"]) == r["n_validation"]
    assert {"explained_variance", "paper_ratio", "sswc", "ssbc"} <= set(r["clustering"])
    assert r["baseline"]["k"] == r["k"]
    r2 = [c["r2"] for c in r["clusters"] if c["r2"] is not None]
    assert r["mean_r2"] == pytest.approx(np.mean(r2), abs=1e-15)


def test_measures_recompute_from_counts(smoke_bundle):
    r = smoke_bundle.evaluation
    cm = ConfusionMatrix(**r["confusion"])
    assert classification_measures(cm).as_dict() == r["measures"]
    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    assert r["measures"]["accuracy"] == (tp + tn) / (tp + fp + fn + tn)
    p, rec = r["measures"]["precision"], r["measures"]["recall"]
    assert r["measures"]["f1"] == pytest.approx(2 * p * rec / (p + rec), abs=1e-12)


def test_report_identical_after_reload(smoke_bundle, saved, tmp_path):
    back = load_bundle(saved)
    a = json.dumps(run_evaluate(smoke_bundle), sort_keys=True)
    b = json.dumps(run_evaluate(back), sort_keys=True)
    assert a == b == json.dumps(smoke_bundle.evaluation, sort_keys=True)
    write_report(run_evaluate(smoke_bundle), smoke_bundle, tmp_path / "one")
    write_report(run_evaluate(back), back, tmp_path / "two")
    for f in sorted((tmp_path / "one").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "two" / f.relative_to(tmp_path / "one")).read_bytes()


def test_report_files(smoke_bundle, tmp_path):
    written = write_report(smoke_bundle.evaluation, smoke_bundle, tmp_path)
    names = {p.relative_to(tmp_path).as_posix() for p in written}
    assert {"summary.json", "metrics.csv", "roc.csv", "clusters.csv", "k_selection.csv"} <= names
    assert {f"trees/cluster_{c}.dot" for c in smoke_bundle.surrogates} <= names
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["auroc"] == smoke_bundle.evaluation["auroc"]


def test_perfect_classifier(smoke_bundle):
    v = smoke_bundle.validation
    scores = smoke_bundle.scores()
    y = (scores >= smoke_bundle.tau).astype(int)
    assert 0 < y.sum() < len(y)
    perfect = dataclasses.replace(
        smoke_bundle, validation=Dataset(v.schema, v.X, v.raw, y, v.case_ids, v.prefix_lengths,
                                         "validation"), _cache={})
    r = run_evaluate(perfect)
    assert r["auroc"] == 1.0
    for name in ("accuracy", "precision", "recall", "specificity", "mcc", "f1"):
        assert r["measures"][name] == 1.0
    assert r["measures"]["fnr"] == r["measures"]["fpr"] == 0.0


# ---------------------------------------------------------------- explain

def test_every_validation_instance_explainable(smoke_bundle):
    scores = predict_scores(smoke_bundle.network, smoke_bundle.validation)
    for row, (case_id, length) in enumerate(instances(smoke_bundle)):
        rec = run_explain(smoke_bundle, case_id, length)
        d = rec.to_dict()
        assert set(d) == RECORD_FIELDS
        assert rec.deep_learning_prediction == scores[row]
        tree = smoke_bundle.surrogates[rec.cluster_number].tree
        _, leaf = decision_path(tree, smoke_bundle.validation.X[row])
        assert rec.surrogate_tree_prediction == leaf.value
        assert rec.decision_path[-1]["value"] == leaf.value
        assert rec.rule["predicted_score"] == leaf.value
        assert rec.cluster_number == smoke_bundle.regions.assignments[row]
        assert rec.predicted_label == ("Regular" if scores[row] >= rec.tau else "Push-to-Front")
        if len(rec.decision_path) == 1:
            assert rec.path_directions == "Root"
        else:
            assert len(rec.path_directions.split("-")) == len(rec.decision_path) - 1
        json.dumps(d, allow_nan=False)


def test_unknown_instance(smoke_bundle):
    with pytest.raises(NotInValidationSet, match="not in validation set"):
        run_explain(smoke_bundle, "no-such-case", 1)
    case_id, length = instances(smoke_bundle)[0]
    with pytest.raises(NotInValidationSet):
        run_explain(smoke_bundle, case_id, 10_000)


def test_degenerate_cluster_gives_warning(smoke_bundle):
    c = int(smoke_bundle.routed_clusters()[0])
    s = smoke_bundle.surrogates[c]
    flagged = dict(smoke_bundle.surrogates)
    flagged[c] = dataclasses.replace(s, r2=None, flag="degenerate black-box scores")
    b = dataclasses.replace(smoke_bundle, surrogates=flagged)
    rec = run_explain(b, *instances(smoke_bundle)[0])
    assert rec.r2_of_local_surrogate is None
    assert rec.warnings == ["fidelity warning: degenerate black-box scores"]


def test_equidistant_instance_uses_lowest_cluster(smoke_bundle):
    row = 0
    code = smoke_bundle.codes()[row]
    C = smoke_bundle.regions.centroids.copy()
    shift = np.zeros_like(code)
    shift[0] = 1.0
    C[0], C[1] = code + shift, code - shift
    C[2:] = code + 100.0
    regions = dataclasses.replace(smoke_bundle.regions, centroids=C)
    b = dataclasses.replace(smoke_bundle, regions=regions, _cache={})
    assert assign(regions, code) == 0
    rec = run_explain(b, *instances(smoke_bundle)[row])
    assert rec.cluster_number == 0
    assert set(rec.to_dict()) == RECORD_FIELDS


def test_perfectly_fit_cluster_record():
    # scores that are a step function of one feature inside each cluster
    from ppmx.surrogate import TreeConfig, fit_cluster_surrogates
    bundle = run_train(smoke_config(n_cases=30, k_range=(2,)))
    X = bundle.validation.X
    j = bundle.schema.feature_names.index("duration_since_start_seconds")
    step = np.where(X[:, j] > np.median(X[:, j]), 0.8, 0.3)
    fits = fit_cluster_surrogates(bundle.regions.assignments, X, step,
                                  TreeConfig(max_depth=1, min_samples_leaf=1), bundle.tau)
    fixture = dataclasses.replace(bundle, surrogates=fits, _cache={"scores": step})
    for case_id, length in instances(bundle):
        rec = run_explain(fixture, case_id, length)
        assert rec.deep_learning_prediction == rec.surrogate_tree_prediction
        assert rec.r2_of_local_surrogate in (1.0, None)


def test_export_tree(smoke_bundle, tmp_path):
    text = export_tree_dot(smoke_bundle, 0, tmp_path / "t.dot")
    assert (tmp_path / "t.dot").read_text() == text and text.startswith("digraph Cluster0 {")
    with pytest.raises(KeyError):
        export_tree_dot(smoke_bundle, 999)
