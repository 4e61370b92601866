"""Analytic MACs / parameter counting over model graphs plus a wall-clock
single-sample inference timer.

Counting conventions (noted in every report so comparisons stay
apples-to-apples): convolutions cost kernel-volume x C_in x C_out x output
voxels, linear layers in x out per application, attention 4*L*d^2 for the
projections plus 2*L^2*d for score/value products (emitted as separate rows
so either convention is recoverable); norms, activations and pooling count
as zero. Counts are pure functions of shapes and never touch parameter
values.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .architectures import ModelGraph
from .errors import ConfigError


@dataclass
class CostReport:
    rows: list
    total_macs: int
    total_params: int
    input_spec: dict
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "rows": [asdict(r) for r in self.rows],
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "input_spec": {v: list(s) for v, s in self.input_spec.items()},
            "notes": self.notes,
        }


def _reconciliation_notes(graph: ModelGraph):
    agg = graph.config.aggregator
    notes = {
        "macs_convention": "norm/activation/pool layers counted as 0 MACs",
        "attention_rows": "projection and score/value MACs emitted separately",
    }
    if graph.config.family in ("2d_trf", "2d_trf_multiview_shared",
                               "2d_trf_multiview_individual"):
        notes["model_dim"] = agg.model_dim
        notes["mlp_ratio"] = agg.mlp_ratio
    elif graph.config.family == "2d_fc":
        notes["fc_hidden"] = agg.fc_hidden
    elif graph.config.family == "2d_bilstm":
        notes["lstm_hidden"] = agg.lstm_hidden
    return notes


def count_macs(graph: ModelGraph, input_spec=None) -> CostReport:
    """Per-layer multiply-accumulate counts for the given input shapes."""
    spec = dict(input_spec) if input_spec else graph.input_spec
    _, rows = graph.module.trace(spec)
    return CostReport(
        rows=rows,
        total_macs=sum(r.macs for r in rows),
        total_params=sum(r.params for r in rows),
        input_spec=spec,
        notes=_reconciliation_notes(graph),
    )


def count_params(graph: ModelGraph) -> CostReport:
    """Trainable parameter totals (tokens and positional tables included)."""
    report = count_macs(graph)
    direct = graph.param_count()
    if direct != report.total_params:
        raise ConfigError(
            f"layer table params {report.total_params} disagree with "
            f"parameter registry {direct}")
    return report


@dataclass
class TimingReport:
    median_ms: float
    iqr_ms: float
    runs: int
    warmup: int
    runnable: bool
    hardware: str
    note: str = ""

    def to_dict(self):
        return asdict(self)


def _hardware_descriptor():
    return (f"{platform.machine()} / {platform.system()} "
            f"{platform.release()} / python {platform.python_version()} "
            f"/ numpy {np.__version__}")


def time_inference(graph: ModelGraph, input_spec=None, warmup=5, runs=30, seed=0):
    """Median single-sample forward latency (post-warmup) with IQR."""
    spec = dict(input_spec) if input_spec else graph.input_spec
    rng = np.random.default_rng(seed)
    sample = {v: rng.random(shape).astype(np.float32) for v, shape in spec.items()}
    if len(sample) == 1 and graph.config.family in ("2d_trf", "2d_fc", "2d_bilstm",
                                                    "conv3d", "conv2plus1d"):
        sample = next(iter(sample.values()))
    try:
        graph.predict_proba(sample)  # materializes parameters outside timing
        times = []
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            graph.predict_proba(sample)
            if i >= warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    except MemoryError:
        return TimingReport(
            median_ms=float("nan"), iqr_ms=float("nan"), runs=0, warmup=warmup,
            runnable=False, hardware=_hardware_descriptor(),
            note="not runnable at this scale")
    q1, med, q3 = statistics.quantiles(times, n=4)
    return TimingReport(
        median_ms=med, iqr_ms=q3 - q1, runs=runs, warmup=warmup,
        runnable=True, hardware=_hardware_descriptor())
