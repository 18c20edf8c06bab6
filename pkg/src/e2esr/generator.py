"""Random (function, points) pairs for training and evaluation.

A function is a random binary tree of ``+ - *`` over the input variables,
with unary operators spliced in and every variable occurrence and unary
node wrapped in a random affine map. Inputs come from a rotated mixture of
gaussian/uniform clusters, whitened per dimension before ``y`` is computed.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from .expr import (
    VALUE_CAP,
    Const,
    DomainError,
    Expr,
    Op,
    OperatorTable,
    Var,
    dimension,
    evaluate_batch,
    first_failure,
    to_prefix,
)

SHAPES = ("gaussian", "uniform")


@dataclass(frozen=True)
class GeneratorConfig:
    d_max: int = 10
    b_max: int = 5
    u_max: int = 5
    operators: OperatorTable = field(default_factory=OperatorTable)
    n_min_per_dim: int = 10
    n_max: int = 200
    k_max: int = 10
    exponent_range: tuple[float, float] = (-2.0, 2.0)
    significant_digits: int = 4
    value_cap: float = VALUE_CAP
    affine_per_occurrence: bool = True
    shapes: tuple[str, ...] = SHAPES
    rotate: bool = True
    max_attempts: int = 1000

    def __post_init__(self):
        if self.d_max < 1 or self.u_max < 0 or self.k_max < 1 or self.n_min_per_dim < 1:
            raise ValueError("generator bounds must be positive")
        if self.b_max < -1:
            raise ValueError("b_max must be >= -1")
        if self.n_max < self.n_min_per_dim * self.d_max:
            raise ValueError("n_max must be >= n_min_per_dim * d_max")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be a non-empty subset of {SHAPES}")

    @classmethod
    def from_dict(cls, data: dict) -> GeneratorConfig:
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known - {"binary_ops", "unary_ops"}
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        ops = OperatorTable(
            binary=data.pop("binary_ops", OperatorTable().binary),
            unary=data.pop("unary_ops", OperatorTable().unary),
        )
        for key in ("exponent_range", "shapes"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(operators=ops, **data)

    @classmethod
    def load(cls, path: str | Path) -> GeneratorConfig:
        """Read a YAML or JSON file; a ``generator`` section is used if present."""
        data = yaml.safe_load(Path(path).read_text()) or {}
        return cls.from_dict(data.get("generator", data))

    def to_dict(self) -> dict:
        d = asdict(self)
        ops = d.pop("operators")
        d["binary_ops"] = ops["binary"]
        d["unary_ops"] = ops["unary"]
        d["exponent_range"] = list(self.exponent_range)
        d["shapes"] = list(self.shapes)
        return d


@dataclass
class SampleSet:
    x: np.ndarray  # (N, D)
    y: np.ndarray  # (N,)
    mu: np.ndarray  # (D,)
    sigma: np.ndarray  # (D,)
    expr: Expr | None = None

    @property
    def n_points(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class Example:
    expr: Expr
    data: SampleSet
    dim: int
    n_binary: int
    n_unary: int
    seed: int | None = None
    attempts: int = 1

    def __iter__(self):
        return iter((self.expr, self.data))


class SampleRejected(Exception):
    def __init__(self, reason: str, op: str = ""):
        super().__init__(f"inputs rejected ({reason} at {op or '?'})")
        self.reason = reason
        self.op = op


class GenerationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# constants


def round_significant(v: float, digits: int = 4) -> float:
    if v == 0:
        return 0.0
    return float(f"{v:.{digits - 1}e}")


def sample_constant(cfg: GeneratorConfig, rng: np.random.Generator) -> float:
    sign = rng.choice((-1.0, 1.0))
    mantissa = rng.uniform(0.0, 1.0)
    exponent = rng.uniform(*cfg.exponent_range)
    return round_significant(sign * mantissa * 10.0**exponent, cfg.significant_digits)


# --------------------------------------------------------------------------
# functions


@lru_cache(maxsize=None)
def catalan(n: int) -> int:
    return math.comb(2 * n, n) // (n + 1)


class _Node:
    """Mutable tree used while a function is being assembled."""

    __slots__ = ("name", "children", "var")

    def __init__(self, name=None, children=None, var=0):
        self.name = name
        self.children = children or []
        self.var = var

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def sample_binary_shape(n_internal: int, rng: np.random.Generator) -> _Node:
    """Uniformly random full binary tree with ``n_internal`` internal nodes."""
    if n_internal == 0:
        return _Node()
    n = n_internal - 1
    weights = np.array([catalan(k) * catalan(n - k) for k in range(n + 1)], dtype=float)
    k = int(rng.choice(n + 1, p=weights / weights.sum()))
    return _Node("?", [sample_binary_shape(k, rng), sample_binary_shape(n - k, rng)])


def _sample_structure(cfg, rng, dim=None, n_binary=None, n_unary=None):
    D = int(rng.integers(1, cfg.d_max + 1)) if dim is None else dim
    b = int(rng.integers(D - 1, D + cfg.b_max + 1)) if n_binary is None else n_binary
    if b < D - 1:
        raise ValueError(f"{b} binary operators cannot hold {D} variables")
    bin_names, bin_p = cfg.operators.probabilities(2)
    root = sample_binary_shape(b, rng)
    for node in root.walk():
        if node.name == "?":
            node.name = bin_names[rng.choice(len(bin_names), p=bin_p)]
    leaves = [n for n in root.walk() if not n.children]
    for i, leaf in enumerate(leaves):
        leaf.var = i + 1 if i < D else int(rng.integers(1, D + 1))

    u = int(rng.integers(0, cfg.u_max + 1)) if n_unary is None else n_unary
    un_names, un_p = cfg.operators.probabilities(1) if cfg.operators.unary else ([], None)
    if u and not un_names:
        raise ValueError("no unary operators configured")
    for _ in range(u):
        name = un_names[rng.choice(len(un_names), p=un_p)]
        nodes = list(root.walk())
        target = nodes[int(rng.integers(len(nodes)))]
        # splice above target by moving its content down one level
        moved = _Node(target.name, target.children, target.var)
        target.name, target.children, target.var = name, [moved], 0
    return root, D, b, u


def _to_expr(root: _Node, cfg: GeneratorConfig, rng: np.random.Generator, D: int) -> Expr:
    shared: dict[int, tuple[float, float]] = {}
    if not cfg.affine_per_occurrence:
        for d in range(1, D + 1):
            shared[d] = (sample_constant(cfg, rng), sample_constant(cfg, rng))

    def affine(node: Expr, ab=None) -> Expr:
        a, b = ab if ab is not None else (sample_constant(cfg, rng), sample_constant(cfg, rng))
        return Op("add", (Op("mul", (Const(a), node)), Const(b)))

    def build(n: _Node) -> Expr:
        if not n.children:
            return affine(Var(n.var), shared.get(n.var))
        args = tuple(build(c) for c in n.children)
        node = Op(n.name, args)
        return affine(node) if len(args) == 1 else node

    return build(root)


def _sample_function(cfg, rng, dim=None, n_binary=None, n_unary=None):
    root, D, b, u = _sample_structure(cfg, rng, dim, n_binary, n_unary)
    return _to_expr(root, cfg, rng, D), D, b, u


def sample_function(cfg: GeneratorConfig, rng: np.random.Generator) -> Expr:
    return _sample_function(cfg, rng)[0]


# --------------------------------------------------------------------------
# inputs


def haar_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a gaussian matrix, sign-corrected)."""
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def sample_points(dim: int, n: int, cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` raw (unwhitened) points from a random cluster mixture."""
    k = int(rng.integers(1, cfg.k_max + 1))
    w = rng.uniform(0.0, 1.0, size=k)
    w /= w.sum()
    counts = np.floor(w * n).astype(int)
    counts[-1] += n - counts.sum()
    chunks = []
    for i in range(k):
        centroid = rng.standard_normal(dim)
        variance = rng.uniform(0.0, 1.0, size=dim)
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        if shape == "gaussian":
            pts = rng.standard_normal((counts[i], dim)) * np.sqrt(variance)
        else:
            half = np.sqrt(3.0 * variance)  # same variance as the gaussian
            pts = rng.uniform(-1.0, 1.0, size=(counts[i], dim)) * half
        if cfg.rotate:
            pts = pts @ haar_orthogonal(dim, rng).T
        chunks.append(pts + centroid)
    return np.concatenate(chunks, axis=0)


def whiten(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return (x - mu) / sigma, mu, sigma


def sample_inputs(
    f: Expr,
    cfg: GeneratorConfig,
    rng: np.random.Generator,
    *,
    dim: int | None = None,
    n_points: int | None = None,
    scale: float = 1.0,
) -> SampleSet:
    """Sample whitened inputs and evaluate ``f`` on them.

    ``scale`` multiplies the whitened points (used for extrapolation probes).
    Raises :class:`SampleRejected` if any point is outside the domain of
    ``f`` or any output exceeds the value cap.
    """
    D = dim if dim is not None else max(dimension(f), 1)
    N = n_points if n_points is not None else int(rng.integers(cfg.n_min_per_dim * D, cfg.n_max + 1))
    raw = sample_points(D, N, cfg, rng)
    x, mu, sigma = whiten(raw)
    if scale != 1.0:
        x = x * scale
    y = evaluate_batch(f, x)
    if not np.all(np.isfinite(y)) or np.any(np.abs(y) > cfg.value_cap):
        err = first_failure(f, x) or DomainError("?", "magnitude")
        raise SampleRejected(err.reason, err.op)
    return SampleSet(x=x, y=y, mu=mu, sigma=sigma, expr=f)


# --------------------------------------------------------------------------
# examples


@dataclass
class GeneratorStats:
    rejections: Counter = field(default_factory=Counter)  # reason -> count
    rejections_by_bucket: Counter = field(default_factory=Counter)  # (D, u) -> count
    accepted_by_bucket: Counter = field(default_factory=Counter)

    def merge(self, other: GeneratorStats) -> None:
        self.rejections.update(other.rejections)
        self.rejections_by_bucket.update(other.rejections_by_bucket)
        self.accepted_by_bucket.update(other.accepted_by_bucket)


def generate_example(
    cfg: GeneratorConfig,
    rng: np.random.Generator,
    *,
    stats: GeneratorStats | None = None,
    dim: int | None = None,
    n_binary: int | None = None,
    n_unary: int | None = None,
    n_points: int | None = None,
) -> Example:
    """Resample functions until one admits a valid set of inputs.

    The keyword overrides pin the input dimension, operator counts or point
    count; left as ``None`` they are drawn from the configured ranges.
    """
    for attempt in range(1, cfg.max_attempts + 1):
        expr, D, b, u = _sample_function(cfg, rng, dim, n_binary, n_unary)
        try:
            data = sample_inputs(expr, cfg, rng, dim=D, n_points=n_points)
        except SampleRejected as rej:
            if stats is not None:
                stats.rejections[rej.reason] += 1
                stats.rejections_by_bucket[(D, u)] += 1
            continue
        if stats is not None:
            stats.accepted_by_bucket[(D, u)] += 1
        return Example(expr, data, D, b, u, attempts=attempt)
    raise GenerationError(
        f"no valid example after {cfg.max_attempts} attempts "
        f"(dim={dim}, n_binary={n_binary}, n_unary={n_unary})"
    )


def example_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def generate_dataset(
    cfg: GeneratorConfig, n: int, seed: int = 0, stats: GeneratorStats | None = None
) -> Iterator[Example]:
    """Stream ``n`` examples; example ``i`` is drawn from its own stream seeded ``seed + i``."""
    for i in range(n):
        ex = generate_example(cfg, example_rng(seed + i), stats=stats)
        ex.seed = seed + i
        yield ex


def stratified_examples(
    cfg: GeneratorConfig, n: int, seed: int = 0, n_points: int | None = None
) -> Iterator[Example]:
    """Examples spread uniformly over unary count, binary count and dimension.

    The difficulty factors are drawn first and held fixed while the
    function is resampled, so rejections do not skew the mix toward easy
    functions.
    """
    for i in range(n):
        rng = example_rng(seed + i)
        D = int(rng.integers(1, cfg.d_max + 1))
        b = int(rng.integers(D - 1, D + cfg.b_max + 1))
        u = int(rng.integers(0, cfg.u_max + 1))
        ex = generate_example(cfg, rng, dim=D, n_binary=b, n_unary=u, n_points=n_points)
        ex.seed = seed + i
        yield ex


# --------------------------------------------------------------------------
# serialization and statistics


def example_to_json(ex: Example) -> dict:
    from .tokenizer import expr_tokens

    d = ex.data
    return {
        "dim": ex.dim,
        "expr_prefix": expr_tokens(ex.expr),
        "x": d.x.tolist(),
        "y": d.y.tolist(),
        "mu": d.mu.tolist(),
        "sigma": d.sigma.tolist(),
        "seed": ex.seed,
        "n_binary": ex.n_binary,
        "n_unary": ex.n_unary,
    }


def example_from_json(obj: dict) -> Example:
    from .tokenizer import decode_expr

    expr = decode_expr(obj["expr_prefix"])
    data = SampleSet(
        x=np.asarray(obj["x"], dtype=float).reshape(len(obj["y"]), -1),
        y=np.asarray(obj["y"], dtype=float),
        mu=np.asarray(obj["mu"], dtype=float),
        sigma=np.asarray(obj["sigma"], dtype=float),
        expr=expr,
    )
    return Example(expr, data, obj["dim"], obj.get("n_binary", -1), obj.get("n_unary", -1),
                   seed=obj.get("seed"))


def write_jsonl(examples, path: str | Path) -> int:
    n = 0
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex)) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> Iterator[Example]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield example_from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc


def _hist(values) -> dict[str, int]:
    c = Counter(values)
    return {str(k): c[k] for k in sorted(c)}


def generator_stats(cfg: GeneratorConfig, n_examples: int, seed: int = 0) -> dict:
    """Histograms of the synthetic data over ``n_examples`` accepted examples."""
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    stats = GeneratorStats()
    dims, unary, binary, lengths, npts = [], [], [], [], []
    for ex in generate_dataset(cfg, n_examples, seed, stats=stats):
        dims.append(ex.dim)
        unary.append(ex.n_unary)
        binary.append(ex.n_binary)
        lengths.append(len(to_prefix(ex.expr)))
        npts.append(ex.data.n_points)
    buckets = sorted(set(stats.accepted_by_bucket) | set(stats.rejections_by_bucket))
    return {
        "n_examples": n_examples,
        "seed": seed,
        "dim": _hist(dims),
        "n_unary": _hist(unary),
        "n_binary": _hist(binary),
        "expr_length": _hist(lengths),
        "n_points": _hist(npts),
        "rejections": dict(sorted(stats.rejections.items())),
        "by_dim_and_unary": [
            {
                "dim": D,
                "n_unary": u,
                "accepted": stats.accepted_by_bucket[(D, u)],
                "rejected": stats.rejections_by_bucket[(D, u)],
            }
            for D, u in buckets
        ],
    }
