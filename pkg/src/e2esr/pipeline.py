"""Inference: scaling, bagging, candidate ranking, refinement and unscaling.

Any object with the :class:`Decoder` call signature can propose
candidates, so the pipeline runs the same way with a trained model or a
mock predictor.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .expr import (
    Expr,
    complexity,
    dimension,
    evaluate_batch,
    skeleton_key,
    skeletonize,
    substitute_affine,
    to_infix,
    to_prefix,
)
from .generator import GeneratorConfig
from .refine import RefineOptions, RefineProblem, RefineResult, random_init, refine, subsample
from .tokenizer import ParseError, decode_expr

log = logging.getLogger(__name__)

MODES = ("skeleton+bfgs", "e2e-no-bfgs", "e2e+bfgs-random", "e2e+bfgs-model")


class Decoder(Protocol):
    def __call__(
        self, x: np.ndarray, y: np.ndarray, count: int, rng: np.random.Generator
    ) -> Sequence[Sequence[str] | Expr]:
        """Propose ``count`` candidates for whitened inputs ``x`` and targets ``y``.

        Items are prefix token sequences (malformed ones are allowed and
        get dropped) or already-built expressions.
        """


class FitError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    n_bags: int = 100  # B, an upper bound on the number of bags
    n_candidates: int = 10  # C, per bag
    n_refine: int = 10  # K
    bag_size: int = 200
    refine_max_points: int = 1024
    mode: str = "e2e+bfgs-model"
    seed: int = 0
    n_jobs: int = 1
    refine_options: RefineOptions = field(default_factory=RefineOptions)
    constant_config: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if min(self.n_bags, self.n_candidates, self.n_refine) < 1:
            raise ValueError("B, C and K must be >= 1")
        if self.n_refine > self.n_bags * self.n_candidates:
            raise ValueError("K must not exceed B * C")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class Candidate:
    expr: Expr  # whitened coordinates, after refinement when it ran
    key: str
    error_pre: float  # MSE on all whitened points before refinement
    error: float  # MSE after refinement (== error_pre when skipped)
    initial_expr: Expr
    refinement: RefineResult | None = None
    unscaled: Expr | None = None
    refine_subsample_error_pre: float | None = None
    refine_subsample_error: float | None = None

    @property
    def complexity(self) -> int:
        return complexity(self.unscaled if self.unscaled is not None else self.expr)


def mse(expr: Expr, x: np.ndarray, y: np.ndarray, theta=None) -> float:
    """Mean squared error; any failed point makes the error infinite."""
    with np.errstate(all="ignore"):
        pred = evaluate_batch(expr, x, theta)
        err = float(np.mean((pred - y) ** 2))
    return err if math.isfinite(err) else math.inf


def _rank_key(error: float, expr: Expr, key: str):
    return (error, complexity(expr), key)


def rank_candidates(exprs: Sequence[Expr], x, y) -> list[tuple[Expr, float]]:
    """Sort by MSE on ``(x, y)``; ties go to fewer nodes, then the skeleton key."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    scored = [(e, mse(e, x, y)) for e in exprs]
    return sorted(scored, key=lambda t: _rank_key(t[1], t[0], skeleton_key(t[0])))


def split_bags(n: int, max_bags: int, bag_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint random bags of at most ``bag_size`` points, at most ``max_bags`` of them."""
    if n <= bag_size:
        return [np.arange(n)]
    n_bags = min(max_bags, math.ceil(n / bag_size))
    perm = rng.permutation(n)
    if n_bags * bag_size >= n:
        return [np.sort(b) for b in np.array_split(perm, n_bags)]
    return [np.sort(perm[i * bag_size:(i + 1) * bag_size]) for i in range(n_bags)]


def _parse(item) -> Expr | None:
    if isinstance(item, Expr):
        return item
    try:
        return decode_expr(item)
    except ParseError:
        return None


@dataclass
class FitResult:
    candidates: list[Candidate]
    mu: np.ndarray
    sigma: np.ndarray
    n_bags: int
    n_proposed: int
    n_malformed: int
    warnings: list[str] = field(default_factory=list)

    @property
    def best(self) -> Candidate:
        return self.candidates[0]


def fit_candidates(x, y, decoder: Decoder, cfg: PipelineConfig | None = None) -> FitResult:
    cfg = cfg or PipelineConfig()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.size:
        raise ValueError("x and y have different numbers of points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be finite")
    warnings = []
    rng = np.random.default_rng(cfg.seed)

    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    for d in np.flatnonzero(sigma == 0):
        msg = f"x_{d + 1} is constant; using sigma=1"
        log.warning(msg)
        warnings.append(msg)
    sigma = np.where(sigma > 0, sigma, 1.0)
    xw = (x - mu) / sigma

    bags = split_bags(len(y), cfg.n_bags, cfg.bag_size, rng)
    bag_seeds = rng.integers(2**63, size=len(bags))
    proposed: list[Expr] = []
    n_items = n_bad = 0
    for idx, s in zip(bags, bag_seeds):
        for item in decoder(xw[idx], y[idx], cfg.n_candidates, np.random.default_rng(s)):
            n_items += 1
            e = _parse(item)
            if e is None or dimension(e) > x.shape[1]:
                n_bad += 1
                continue
            proposed.append(e)
    if not proposed:
        raise FitError(f"no well-formed candidate among {n_items} proposals")

    skeleton_mode = cfg.mode == "skeleton+bfgs"
    init_rng = np.random.default_rng(rng.integers(2**63))
    scored = []
    for e in proposed:
        skel, theta = skeletonize(e)
        if skeleton_mode or cfg.mode == "e2e+bfgs-random":
            theta = random_init(skel, init_rng, cfg.constant_config)
        elif np.isnan(theta).any():
            # placeholders without a predicted value start from the prior
            theta = np.where(np.isnan(theta), random_init(skel, init_rng, cfg.constant_config), theta)
        err = mse(skel.expr, xw, y, theta)
        scored.append((skel, theta, err, e))

    # dedup by skeleton, keeping each key's best scorer
    best: dict[str, tuple] = {}
    for skel, theta, err, e in scored:
        key = skel.key
        cur = best.get(key)
        if cur is None or _rank_key(err, e, key) < _rank_key(cur[2], cur[3], key):
            best[key] = (skel, theta, err, e)
    kept = sorted(best.values(), key=lambda t: _rank_key(t[2], t[3], t[0].key))[: cfg.n_refine]

    sub = subsample(len(y), cfg.refine_max_points, np.random.default_rng(rng.integers(2**63)))
    xs, ys = xw[sub], y[sub]
    opts = RefineOptions(**{**cfg.refine_options.__dict__, "max_points": cfg.refine_max_points})

    def run(item) -> Candidate:
        skel, theta, err, _ = item
        initial = skel.substitute(theta)
        cand = Candidate(expr=initial, key=skel.key, error_pre=err, error=err, initial_expr=initial)
        if cfg.mode == "e2e-no-bfgs":
            return cand
        res = refine(RefineProblem(skel, theta, xs, ys), opts)
        cand.refinement = res
        n_sub = len(ys)
        cand.refine_subsample_error_pre = res.initial_loss / n_sub
        if res.success:
            cand.refine_subsample_error = res.loss / n_sub
            cand.expr = skel.substitute(res.theta)
            cand.error = mse(cand.expr, xw, y)
        return cand

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(cfg.n_jobs) as pool:
            cands = list(pool.map(run, kept))
    else:
        cands = [run(item) for item in kept]

    for c in cands:
        c.unscaled = substitute_affine(c.expr, mu, sigma)
    cands.sort(key=lambda c: _rank_key(c.error, c.expr, c.key))
    return FitResult(cands, mu, sigma, len(bags), n_items, n_bad, warnings)


class SymbolicRegressor:
    """Fit/predict wrapper around :func:`fit_candidates`."""

    def __init__(self, decoder: Decoder, config: PipelineConfig | None = None, **overrides):
        self.decoder = decoder
        cfg = config or PipelineConfig()
        if overrides:
            cfg = PipelineConfig(**{**cfg.__dict__, **overrides})
        self.config = cfg
        self.result_: FitResult | None = None

    def fit(self, X, y) -> SymbolicRegressor:
        self.result_ = fit_candidates(X, y, self.decoder, self.config)
        return self

    def _check_fitted(self):
        if self.result_ is None:
            raise RuntimeError("call fit() first")

    @property
    def candidates_(self) -> list[Candidate]:
        self._check_fitted()
        return self.result_.candidates

    @property
    def best_(self) -> Candidate:
        self._check_fitted()
        return self.result_.best

    def predict(self, X, candidate: int = 0) -> np.ndarray:
        """Evaluate the unscaled formula on raw inputs; failed points are NaN."""
        self._check_fitted()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.result_.mu.size:
            raise ValueError(f"expected {self.result_.mu.size} feature(s), got {X.shape[1]}")
        return evaluate_batch(self.result_.candidates[candidate].unscaled, X)

    def to_dict(self) -> dict:
        self._check_fitted()
        r = self.result_
        best = r.best
        return {
            "formula": to_infix(best.unscaled),
            "prefix": to_prefix(best.unscaled),
            "formula_whitened": to_infix(best.expr),
            "mu": r.mu.tolist(),
            "sigma": r.sigma.tolist(),
            "mode": self.config.mode,
            "complexity": best.complexity,
            "mse_train": best.error,
            "report": {
                "n_bags": r.n_bags,
                "n_proposed": r.n_proposed,
                "n_malformed": r.n_malformed,
                "warnings": r.warnings,
                "candidates": [
                    {
                        "formula": to_infix(c.unscaled, 6),
                        "skeleton": c.key,
                        "error_pre": c.error_pre,
                        "error": c.error,
                        "refine_status": c.refinement.status if c.refinement else None,
                        "refine_iterations": c.refinement.iterations if c.refinement else None,
                    }
                    for c in r.candidates
                ],
            },
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)
