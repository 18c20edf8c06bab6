"""Suite evaluation: per-problem metrics, ablation sweeps and report tables."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import complexity, evaluate_batch, to_infix
from .generator import Example, GeneratorConfig, SampleRejected, sample_inputs
from .metrics import acc_tau, has_zero_targets, r2_score
from .pipeline import Decoder, PipelineConfig, fit_candidates

log = logging.getLogger(__name__)

TAUS = (0.1, 0.01, 0.001)
N_SWEEP = (50, 100, 150, 200)
SCALE_SWEEP = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)
NOISE_SWEEP = (0.0, 0.01, 0.1)
AXES = ("n_unary", "n_binary", "dim", "n_points", "noise", "test_scale", "mode")
TEST_ATTEMPTS = 50


@dataclass
class Protocol:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    n_points: int | None = None  # None keeps each example's own inputs
    noise: float = 0.0  # y -> y (1 + xi), xi ~ N(0, noise)
    test_scales: tuple[float, ...] = (1.0,)
    n_test: int = 200
    seed: int = 0
    n_jobs: int = 1


@dataclass
class ProblemResult:
    problem_id: int
    mode: str
    n_unary: int
    n_binary: int
    dim: int
    n_points: int
    noise: float
    test_scale: float
    r2_raw: float = math.nan
    r2: float = 0.0
    acc: dict[float, int] = field(default_factory=lambda: {t: 0 for t in TAUS})
    complexity: int = 0
    time: float = 0.0
    formula: str = ""
    truth: str = ""
    zero_targets: bool = False
    error: str | None = None

    def row(self) -> dict:
        d = asdict(self)
        acc = d.pop("acc")
        for t in TAUS:
            d[f"acc_{t:g}"] = acc[t]
        return d


@dataclass
class MetricsReport:
    problems: list[ProblemResult]

    def aggregate(self, rows: Sequence[ProblemResult] | None = None) -> dict:
        rows = self.problems if rows is None else rows
        n = len(rows)
        if n == 0:
            return {"n": 0}
        out = {
            "n": n,
            "n_failed": sum(r.error is not None for r in rows),
            "r2": float(np.mean([r.r2 for r in rows])),
            "r2_raw_median": float(np.nanmedian([r.r2_raw for r in rows]))
            if any(np.isfinite(r.r2_raw) for r in rows) else math.nan,
        }
        for t in TAUS:
            out[f"acc_{t:g}"] = float(np.mean([r.acc[t] for r in rows]))
        out["complexity"] = float(np.mean([r.complexity for r in rows]))
        out["time"] = float(np.mean([r.time for r in rows]))
        return out

    def table(self, axis: str) -> list[dict]:
        """Aggregates grouped by one difficulty or protocol axis."""
        if axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}")
        groups: dict = defaultdict(list)
        for r in self.problems:
            groups[getattr(r, axis)].append(r)
        return [{axis: k, **self.aggregate(v)} for k, v in sorted(groups.items())]

    def merge(self, other: MetricsReport) -> MetricsReport:
        return MetricsReport(self.problems + other.problems)

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate(),
            "tables": {a: self.table(a) for a in AXES},
            "problems": [r.row() for r in self.problems],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def write_csv(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = [_write_rows(d / "problems.csv", [r.row() for r in self.problems])]
        for a in AXES:
            written.append(_write_rows(d / f"by_{a}.csv", self.table(a)))
        return written


def _write_rows(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return path


def _test_set(ex: Example, proto: Protocol, scale: float, rng: np.random.Generator):
    """Fresh input distribution for the same function; resampled on domain failure."""
    for _ in range(TEST_ATTEMPTS):
        try:
            return sample_inputs(ex.expr, proto.generator, rng, dim=ex.dim,
                                 n_points=proto.n_test, scale=scale)
        except SampleRejected:
            continue
    return None


def _train_set(ex: Example, proto: Protocol, rng: np.random.Generator):
    if proto.n_points is None:
        return ex.data.x, ex.data.y
    for _ in range(TEST_ATTEMPTS):
        try:
            d = sample_inputs(ex.expr, proto.generator, rng, dim=ex.dim, n_points=proto.n_points)
            return d.x, d.y
        except SampleRejected:
            continue
    raise SampleRejected("domain", "resample")


def evaluate_problem(pid: int, ex: Example, decoder: Decoder, proto: Protocol) -> list[ProblemResult]:
    """Fit one problem and score it on each requested test scale."""
    rng = np.random.default_rng([proto.seed, pid])
    mode = proto.pipeline.mode
    truth = to_infix(ex.expr)

    def blank(scale, n_points, err=None):
        return ProblemResult(pid, mode, ex.n_unary, ex.n_binary, ex.dim, n_points, proto.noise,
                             scale, truth=truth, error=err)

    try:
        x, y = _train_set(ex, proto, rng)
    except SampleRejected as e:
        return [blank(s, proto.n_points or 0, f"train inputs: {e}") for s in proto.test_scales]
    if proto.noise > 0:
        y = y * (1.0 + rng.normal(0.0, proto.noise, size=y.shape))
    tests = [_test_set(ex, proto, s, rng) for s in proto.test_scales]

    t0 = time.perf_counter()
    try:
        pcfg = replace(proto.pipeline, seed=int(rng.integers(2**63)))
        best = fit_candidates(x, y, decoder, pcfg).best
        fitted, err = best.unscaled, None
    except Exception as e:  # recorded, never fatal for the suite
        log.warning("problem %d failed: %s", pid, e)
        fitted, err = None, f"{type(e).__name__}: {e}"
    elapsed = time.perf_counter() - t0

    out = []
    for s, test in zip(proto.test_scales, tests):
        r = blank(s, len(y), err)
        r.time = elapsed
        if test is None:
            r.error = r.error or "test inputs: function undefined on fresh samples"
        if fitted is not None:
            r.formula = to_infix(fitted, 6)
            r.complexity = complexity(fitted)
        if fitted is not None and test is not None:
            with np.errstate(all="ignore"):
                pred = evaluate_batch(fitted, test.x)
            r.r2_raw, r.r2 = r2_score(test.y, pred)
            r.acc = {t: acc_tau(test.y, pred, t) for t in TAUS}
            r.zero_targets = has_zero_targets(test.y)
        out.append(r)
    return out


def evaluate_suite(decoder: Decoder, examples: Sequence[Example], proto: Protocol | None = None) -> MetricsReport:
    """Evaluate every example under one protocol; results keep problem order."""
    proto = proto or Protocol()
    examples = list(examples)
    jobs = list(enumerate(examples))
    if proto.n_jobs > 1:
        with ThreadPoolExecutor(proto.n_jobs) as pool:
            parts = list(pool.map(lambda j: evaluate_problem(j[0], j[1], decoder, proto), jobs))
    else:
        parts = [evaluate_problem(i, ex, decoder, proto) for i, ex in jobs]
    return MetricsReport([r for p in parts for r in p])


def sweep(decoder: Decoder, examples: Sequence[Example], proto: Protocol, axis: str,
          values: Sequence | None = None) -> MetricsReport:
    """Run one ablation axis: ``n_points``, ``noise``, ``test_scale`` or ``mode``."""
    defaults = {"n_points": N_SWEEP, "noise": NOISE_SWEEP, "test_scale": SCALE_SWEEP}
    if axis == "test_scale":
        # one fit per problem, scored on every scale
        return evaluate_suite(decoder, examples, replace(proto, test_scales=tuple(values or SCALE_SWEEP)))
    report = MetricsReport([])
    for v in values or defaults[axis]:
        if axis == "mode":
            p = replace(proto, pipeline=replace(proto.pipeline, mode=v))
        elif axis in ("n_points", "noise"):
            p = replace(proto, **{axis: v})
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        report = report.merge(evaluate_suite(decoder, examples, p))
    return report

