"""Local post-hoc explanations for predictive process monitoring.

A feed-forward network scores running cases; its last hidden layer is
clustered into local regions, and a small regression tree per region mimics
the network's scores to yield rule-style explanations.
"""

from .eventlog import EventLog, Event, Trace, LabelScheme, parse_xes, parse_csv, read_log
from .encoding import (EncodingConfig, FeatureSchema, LabelRule, PrefixPolicy, Dataset,
                       build_feature_schema, encode_traces, label_log, split_case_ids)
from .network import NetworkConfig, TrainingConfig, TrainedNetwork, train, predict_scores, latent_codes
from .metrics import (confusion_at_threshold, classification_measures, roc_and_auroc,
                      select_equal_error_threshold, clustering_ss, fidelity_r2)
from .regions import RegionModel, kmeans, assign, select_k
from .surrogate import TreeConfig, SurrogateTree, fit_tree, decision_path, extract_rule, tree_to_dot
from .pipeline import (PipelineConfig, ModelBundle, ExplanationRecord, load_config, run_train,
                       run_explain, run_evaluate, write_report, save_bundle, load_bundle,
                       export_tree_dot)

__version__ = "0.1.0"
