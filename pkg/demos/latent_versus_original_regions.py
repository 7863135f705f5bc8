from ppmx.encoding import EncodingConfig, LabelRule
from ppmx.network import TrainingConfig
from ppmx.pipeline import PipelineConfig, run_train
from ppmx.synthetic import make_incident_log

# Regions built on the network's last hidden layer versus k-means on the
# input features themselves (same k, same surrogate settings)
log = make_incident_log(n_cases=1000, seed=4)
config = PipelineConfig(
    seed=3,
    encoding=EncodingConfig(categorical_attributes=("impact",),
                            label_rule=LabelRule("support_line", "in", ("2nd", "3rd"), "event")),
    training=TrainingConfig(max_epochs=100),
    k_range=tuple(range(2, 21)),
    restarts=5,
)
bundle = run_train(config, log)
report = bundle.evaluation

# k is picked by the mean per-cluster accuracy of the black box at tau
print(" k  mean acc  expl. var")
for row in report["k_selection"]:
    mark = "  <-" if row["chosen"] else ""
    print(f"{row['k']:>2}  {row['mean_accuracy']:.4f}    {row['explained_variance']:.4f}{mark}")

print()
print(" cluster  size  local acc    R2")
for c in report["clusters"]:
    r2 = "  n/a" if c["r2"] is None else f"{c['r2']:.3f}"
    print(f"{c['cluster']:>8}  {c['size']:>4}  {c['local_accuracy']:.3f}      {r2}")

base = report["baseline"]
print()
print(f"mean surrogate R2, latent regions:   {base['latent_mean_r2']:.3f}")
print(f"mean surrogate R2, original regions: {base['mean_r2']:.3f}")
print(f"explained variance, latent {report['clustering']['explained_variance']:.3f}, "
      f"original {base['clustering_original_space']['explained_variance']:.3f}")
