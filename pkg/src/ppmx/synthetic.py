"""Synthetic incident-management logs shaped like the VINST data.

Each case gets an impact level and a hidden complexity. Complex and
high-impact incidents are more likely to be pushed to the 2nd/3rd support
line; complexity also stretches waiting times and adds wait/queue loops, so
the push-to-front outcome is partly predictable from early prefixes.
Events carry ``concept:name`` (status), ``lifecycle:transition`` (sub-status),
``support_line`` and ``impact`` attributes.
"""

from __future__ import annotations

from datetime import datetime, timedelta, timezone

import numpy as np

from .eventlog import Event, EventLog, LabelScheme, Trace

__all__ = ["make_incident_log", "INCIDENT_LABEL_SCHEME"]

INCIDENT_LABEL_SCHEME = LabelScheme(("concept:name", "lifecycle:transition"))

_IMPACTS = ("Low", "Medium", "High", "Major")
_IMPACT_P = (0.30, 0.50, 0.15, 0.05)
_IMPACT_EFFECT = {"Low": -0.6, "Medium": 0.0, "High": 0.7, "Major": 1.2}


def _sigmoid(z: float) -> float:
    return 1.0 / (1.0 + np.exp(-z))


def make_incident_log(n_cases: int = 500, seed: int = 0, push_bias: float = -2.2,
                      start: datetime | None = None) -> EventLog:
    """Generate ``n_cases`` incident traces deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    clock = start or datetime(2012, 4, 1, 8, 0, tzinfo=timezone.utc)
    scheme = INCIDENT_LABEL_SCHEME
    traces = []
    for i in range(n_cases):
        impact = _IMPACTS[rng.choice(4, p=_IMPACT_P)]
        complexity = rng.normal()
        push = rng.random() < _sigmoid(push_bias + 1.5 * complexity + _IMPACT_EFFECT[impact])
        pace = 600.0 * np.exp(0.6 * complexity)
        t = clock + timedelta(seconds=float(rng.uniform(0, 3600 * 24 * 30)))
        events: list[tuple[str, str, str]] = []

        if rng.random() < 0.35 + 0.15 * (complexity > 0.5):
            events.append(("Queued", "Awaiting Assignment", "1st"))
        events.append(("Accepted", "In Progress", "1st"))
        for _ in range(int(rng.poisson(0.8 + 0.8 * max(complexity, 0.0)))):
            r = rng.random()
            if r < 0.4 + 0.1 * complexity:
                events.append(("Accepted", "Wait - User", "1st"))
            elif r < 0.7:
                events.append(("Accepted", "Assigned", "1st"))
            else:
                events.append(("Queued", "Awaiting Assignment", "1st"))
            events.append(("Accepted", "In Progress", "1st"))
        if push:
            line = "3rd" if rng.random() < 0.3 else "2nd"
            events.append(("Queued", "Awaiting Assignment", line))
            events.append(("Accepted", "In Progress", line))
            if rng.random() < 0.5:
                events.append(("Accepted", "Wait - Implementation", line))
                events.append(("Accepted", "In Progress", line))
            final_line = line
        else:
            if rng.random() < 0.15:
                events.append(("Accepted", "Wait", "1st"))
                events.append(("Accepted", "In Progress", "1st"))
            final_line = "1st"
        events.append(("Completed", "Resolved", final_line))
        if rng.random() < 0.8:
            events.append(("Completed", "Closed", final_line))

        built = []
        for status, sub, line in events:
            attrs = {"concept:name": status, "lifecycle:transition": sub,
                     "support_line": line, "impact": impact}
            built.append(Event(scheme.compose(attrs), t, attrs))
            gap = rng.exponential(pace * (3.0 if line != "1st" else 1.0))
            t = t + timedelta(seconds=int(max(gap, 1.0)))
        traces.append(Trace(f"{i + 1}-{rng.integers(100000, 999999)}", built,
                            {"impact": impact}))
    return EventLog(traces, {"name": f"synthetic-incidents-{n_cases}-{seed}", "format": "synthetic"})
