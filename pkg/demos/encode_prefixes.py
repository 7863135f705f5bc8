from pathlib import Path

import numpy as np

from ppmx.encoding import EncodingConfig, LabelRule, PrefixPolicy, build_feature_schema, encode_traces, label_log
from ppmx.eventlog import read_log

# A two-case incident log in CSV form, the same file the tests use
here = Path(__file__).resolve().parent
log = read_log(here.parent / "tests" / "data" / "two_cases.csv", "csv",
               column_map={"case": "case", "activity": "activity", "timestamp": "timestamp"})
for trace in log.traces:
    print(trace.case_id, [e.activity_label for e in trace.events], dict(trace.case_attributes))

# Cases that ever reach the 2nd or 3rd line count as push-to-front (class 0)
rule = LabelRule("support_line", "in", ("2nd", "3rd"), "event")
labels = label_log(log, rule)
print("labels:", labels)

# Every prefix of length >= 1 becomes one instance
cfg = EncodingConfig(categorical_attributes=("impact",), label_rule=rule,
                     prefix_policy=PrefixPolicy(min_length=1))
schema = build_feature_schema(log, cfg)
data = encode_traces(log.traces, schema, cfg.prefix_policy, labels)
print(schema.feature_names)

# raw counts and seconds next to the scaled matrix the network sees
np.set_printoptions(precision=3, suppress=True)
print(data.raw)
print(data.X)
