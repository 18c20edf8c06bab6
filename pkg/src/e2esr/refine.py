"""BFGS fitting of an expression's constants to data.

The loss is the sum of squared residuals; its gradient comes from
reverse-mode differentiation of the expression tree, never from finite
differences. Iterates that leave the function's domain count as an
infinite loss, so the backtracking line search simply shrinks the step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .expr import Skeleton, jacobian, skeletonize
from .generator import GeneratorConfig, sample_constant

CONVERGED = "converged"
MAX_ITER = "max-iter"
LINE_SEARCH_FAILURE = "line-search-failure"
DOMAIN_FAILURE = "domain-failure"


@dataclass
class RefineOptions:
    max_iter: int = 500
    gtol: float = 1e-8
    max_backtracks: int = 30
    armijo: float = 1e-4
    shrink: float = 0.5
    max_points: int = 1024


@dataclass
class RefineProblem:
    skeleton: Skeleton
    theta0: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=float).ravel()
        if self.theta0.size != self.skeleton.n_slots:
            raise ValueError(
                f"skeleton has {self.skeleton.n_slots} slots but theta0 has {self.theta0.size} values"
            )


@dataclass
class RefineResult:
    theta: np.ndarray
    loss: float
    initial_loss: float
    iterations: int
    status: str
    losses: list[float]  # accepted iterates, starting with the initial loss

    @property
    def success(self) -> bool:
        """True when ``theta`` is usable (finite loss), whatever the stop reason."""
        return bool(np.isfinite(self.loss))


def subsample(n: int, cap: int, rng: np.random.Generator | None) -> np.ndarray:
    """Indices of at most ``cap`` points, uniform without replacement."""
    if n <= cap:
        return np.arange(n)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(n, size=cap, replace=False))


def loss_and_grad(skeleton: Skeleton, theta, x, y) -> tuple[float, np.ndarray]:
    v, J = jacobian(skeleton, x, theta)
    r = v - y
    if not np.all(np.isfinite(r)):
        return np.inf, np.full(len(theta), np.nan)
    loss = float(r @ r)
    g = 2.0 * (r @ J)
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        return np.inf, np.full(len(theta), np.nan)
    return loss, g


def bfgs(fun, theta0: np.ndarray, opts: RefineOptions) -> RefineResult:
    """Minimize ``fun(theta) -> (loss, grad)`` with BFGS and Armijo backtracking."""
    theta = np.array(theta0, dtype=float)
    f, g = fun(theta)
    if not np.isfinite(f):
        return RefineResult(theta, np.inf, np.inf, 0, DOMAIN_FAILURE, [])
    f0 = f
    losses = [f]
    n = theta.size
    # first trial step has unit length until curvature information arrives
    H = np.eye(n) / max(1.0, float(np.linalg.norm(g)))
    first_step = True
    status = MAX_ITER
    it = 0
    for it in range(opts.max_iter + 1):
        if np.linalg.norm(g) <= opts.gtol * (1.0 + abs(f)):
            status = CONVERGED
            break
        if it == opts.max_iter:
            break
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:  # lost positive definiteness
            H = np.eye(n) / max(1.0, float(np.linalg.norm(g)))
            first_step = True
            p = -H @ g
            slope = float(g @ p)
        alpha = 1.0
        accepted = False
        any_finite = False
        for _ in range(opts.max_backtracks):
            trial = theta + alpha * p
            f_new, g_new = fun(trial)
            if np.isfinite(f_new):
                any_finite = True
                if f_new <= f + opts.armijo * alpha * slope:
                    accepted = True
                    break
            alpha *= opts.shrink
        if not accepted:
            status = LINE_SEARCH_FAILURE if any_finite else DOMAIN_FAILURE
            break
        if f_new >= f:  # at floating-point resolution; further steps only spin
            status = CONVERGED
            break
        s = trial - theta
        yk = g_new - g
        sy = float(s @ yk)
        theta, f, g = trial, f_new, g_new
        losses.append(f)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yk):
            if first_step:
                H = np.eye(n) * (sy / float(yk @ yk))
                first_step = False
            rho = 1.0 / sy
            Hy = H @ yk
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + (rho * rho * float(yk @ Hy) + rho) * np.outer(s, s))
    return RefineResult(theta, f, f0, it, status, losses)


def refine(problem: RefineProblem, opts: RefineOptions | None = None,
           rng: np.random.Generator | None = None) -> RefineResult:
    """Fit the skeleton's constants starting from ``problem.theta0``.

    At most ``opts.max_points`` points are used (a seeded uniform subsample).
    """
    opts = opts or RefineOptions()
    x = np.asarray(problem.x, dtype=float)
    y = np.asarray(problem.y, dtype=float)
    idx = subsample(len(y), opts.max_points, rng)
    x, y = x[idx], y[idx]
    skel = problem.skeleton
    if skel.n_slots == 0:
        f, _ = loss_and_grad(skel, problem.theta0, x, y)
        status = CONVERGED if np.isfinite(f) else DOMAIN_FAILURE
        return RefineResult(problem.theta0.copy(), f, f, 0, status, [f] if np.isfinite(f) else [])
    return bfgs(lambda th: loss_and_grad(skel, th, x, y), problem.theta0, opts)


def random_init(skeleton: Skeleton, rng: np.random.Generator,
                cfg: GeneratorConfig | None = None) -> np.ndarray:
    """One draw per slot from the generator's constant distribution."""
    cfg = cfg or GeneratorConfig()
    return np.array([sample_constant(cfg, rng) for _ in range(skeleton.n_slots)], dtype=float)


def refine_expr(expr, x, y, opts=None, rng=None):
    """Refine the constants already present in ``expr``; returns ``(expr, result)``."""
    skel, theta0 = skeletonize(expr)
    res = refine(RefineProblem(skel, theta0, x, y), opts, rng)
    if not res.success:
        return expr, res
    return skel.substitute(res.theta), res
