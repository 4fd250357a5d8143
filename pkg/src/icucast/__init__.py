"""Hospital ICU capacity planning engine.

Submodules: epi (SEIHR compartmental model), gp (exact GP regression),
trend (hierarchical mobility-driven admission forecaster), hazard
(discrete-time per-patient hazard pipelines), search (pipeline
configuration search), sim (agent-based scenario simulation), synth
(synthetic world generator), evaluation (metrics, baselines, benchmarks),
service (REST API), cli (thin client).
"""

__version__ = "0.1.0"
