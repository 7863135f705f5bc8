import json

import numpy as np

from ppmx.encoding import EncodingConfig, LabelRule
from ppmx.network import TrainingConfig
from ppmx.pipeline import PipelineConfig, export_tree_dot, run_explain, run_train
from ppmx.surrogate import TreeConfig
from ppmx.synthetic import make_incident_log

# Synthetic incident log: cases escalated to the 2nd or 3rd line are push-to-front
log = make_incident_log(n_cases=600, seed=1)
config = PipelineConfig(
    seed=0,
    encoding=EncodingConfig(categorical_attributes=("impact",),
                            label_rule=LabelRule("support_line", "in", ("2nd", "3rd"), "event")),
    training=TrainingConfig(max_epochs=80),
    k_range=tuple(range(2, 13)),
    restarts=5,
)
bundle = run_train(config, log)
report = bundle.evaluation
print(f"AUROC {report['auroc']:.3f} at tau {report['tau']:.4f}, k = {report['k']}")

# pick a true negative: predicted and actually push-to-front
scores = bundle.scores()
y = bundle.validation.y
true_neg = np.flatnonzero((scores < bundle.tau) & (y == 0))
row = int(true_neg[len(true_neg) // 2])
case_id = bundle.validation.case_ids[row]
length = int(bundle.validation.prefix_lengths[row])

record = run_explain(bundle, case_id, length)
for key in ("cluster_number", "instance_id", "r2_of_local_surrogate", "deep_learning_prediction",
            "surrogate_tree_prediction", "predicted_label", "ground_truth_label", "path_directions"):
    print(f"{key:>28}: {record.to_dict()[key]}")
print()
print(record.rule["text"])
print(f"rule confidence {record.rule['confidence']}, support {record.rule['support']}")

# the whole local tree, ready for graphviz
dot = export_tree_dot(bundle, record.cluster_number)
print()
print(dot)

# the record is plain JSON
print(json.dumps(record.to_dict()["decision_path"], indent=1))
