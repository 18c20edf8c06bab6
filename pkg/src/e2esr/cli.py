"""Command-line entry point: ``e2esr <command> [options]``.

Exit codes: 0 ok, 1 usage error, 2 bad input data, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .expr import complexity, from_prefix, skeletonize, to_infix
from .generator import GeneratorConfig, generate_dataset, generator_stats, read_jsonl, stratified_examples, write_jsonl
from .metrics import r2_score
from .pipeline import MODES, FitError, PipelineConfig, SymbolicRegressor
from .refine import RefineOptions, RefineProblem, random_init, refine
from .skeletons import skeleton_counts

log = logging.getLogger("e2esr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# input files


def read_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Header ``x_1,...,x_D,y`` then one numeric row per point."""
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = [h.strip() for h in next(rows)]
        except StopIteration:
            raise DataError(f"{path}:1: empty file") from None
        D = len(header) - 1
        if D < 1 or header != [f"x_{d}" for d in range(1, D + 1)] + ["y"]:
            raise DataError(f"{path}:1: header must be x_1,...,x_D,y (got {','.join(header)})")
        data = []
        for lineno, row in enumerate(rows, 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != D + 1:
                raise DataError(f"{path}:{lineno}: expected {D + 1} columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if not all(np.isfinite(vals)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            data.append(vals)
    if len(data) < 2:
        raise DataError(f"{path}: need at least 2 data rows")
    arr = np.asarray(data)
    return arr[:, :D], arr[:, D]


def read_points_jsonl(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """One ``{"x": [...], "y": v}`` object per line."""
    xs, ys = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                xv = np.atleast_1d(np.asarray(obj["x"], dtype=float))
                yv = float(obj["y"])
            except (ValueError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: {e}") from None
            if xs and xv.shape != xs[0].shape:
                raise DataError(f"{path}:{lineno}: inconsistent dimension")
            if not (np.all(np.isfinite(xv)) and np.isfinite(yv)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            xs.append(xv)
            ys.append(yv)
    if len(ys) < 2:
        raise DataError(f"{path}: need at least 2 data rows")
    return np.stack(xs), np.asarray(ys)


def read_points(path: str) -> tuple[np.ndarray, np.ndarray]:
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    return read_points_jsonl(path) if path.endswith((".jsonl", ".json")) else read_csv(path)


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise DataError(f"{path}: {e}") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a mapping")
    return data


def _generator_cfg(args) -> GeneratorConfig:
    section = args.cfg.get("generator", {})
    if getattr(args, "toy", False):
        section = {"d_max": 2, "b_max": 1, "u_max": 2, **section}
    try:
        return GeneratorConfig.from_dict(section)
    except (TypeError, ValueError) as e:
        raise DataError(f"generator config: {e}") from None


def _pipeline_cfg(args) -> PipelineConfig:
    section = dict(args.cfg.get("pipeline", {}))
    for flag, key in (("B", "n_bags"), ("C", "n_candidates"), ("K", "n_refine"), ("mode", "mode")):
        if getattr(args, flag) is not None:
            section[key] = getattr(args, flag)
    section["seed"] = args.seed
    section["n_jobs"] = args.threads
    try:
        return PipelineConfig(**section)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _decoder(args):
    if args.propose:
        try:
            exprs = [from_prefix(p) for p in args.propose]
        except (ValueError, KeyError) as e:
            raise UsageError(f"--propose: {e}") from None
        return lambda x, y, count, rng: exprs
    if not args.checkpoint:
        raise UsageError("either --checkpoint or --propose is required")
    from .model import ModelDecoder, load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    return ModelDecoder(model, args.decoder, args.temperature)


def _write(text: str, out: str | None):
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# --------------------------------------------------------------------------
# commands


def cmd_generate(args):
    cfg = _generator_cfg(args)
    src = (stratified_examples(cfg, args.n, args.seed, args.n_points) if args.stratified
           else generate_dataset(cfg, args.n, args.seed))
    n = write_jsonl(src, args.out)
    log.info("wrote %d examples to %s", n, args.out)


def cmd_stats(args):
    _write(json.dumps(generator_stats(_generator_cfg(args), args.n, args.seed), indent=2), args.out)


def cmd_train(args):
    import torch

    from .model import ModelConfig, train_from_generator

    torch.set_num_threads(args.threads)
    section = args.cfg.get("model", {})
    mcfg = ModelConfig.toy(**section) if args.toy else ModelConfig.from_dict(section)
    if args.mode == "skeleton+bfgs":
        mcfg = replace(mcfg, mode="skeleton")
    res = train_from_generator(
        _generator_cfg(args), mcfg, args.n_train, args.n_val, seed=args.seed,
        checkpoint=args.out, epochs=args.epochs, max_steps=args.max_steps,
        eval_every=args.eval_every, metrics_path=args.metrics, time_budget=args.time_budget,
    )
    rep = res.validation
    summary = {"checkpoint": args.out, "steps": res.step}
    if rep is not None:
        summary.update(val_token_accuracy=rep.token_accuracy, majority_baseline=rep.majority_baseline,
                       by_unary=rep.by_unary)
    print(json.dumps(summary, indent=2))


def cmd_fit(args):
    x, y = read_points(args.data)
    reg = SymbolicRegressor(_decoder(args), _pipeline_cfg(args)).fit(x, y)
    doc = reg.to_dict()
    with np.errstate(all="ignore"):
        raw, clamped = r2_score(y, reg.predict(x))
    doc["r2_train"] = raw
    doc["r2_train_clamped"] = clamped
    _write(json.dumps(doc, indent=2), args.out)


def cmd_evaluate(args):
    from .harness import Protocol, evaluate_suite, sweep

    gcfg = _generator_cfg(args)
    if args.dataset:
        try:
            examples = list(read_jsonl(args.dataset))
        except (OSError, ValueError) as e:
            raise DataError(str(e)) from None
    else:
        examples = list(stratified_examples(gcfg, args.n, args.seed + 1))
    proto = Protocol(pipeline=_pipeline_cfg(args), generator=gcfg, n_points=args.n_points,
                     noise=args.noise, test_scales=tuple(args.test_scales), seed=args.seed,
                     n_jobs=args.threads)
    decoder = _decoder(args)
    report = sweep(decoder, examples, proto, args.sweep) if args.sweep else evaluate_suite(decoder, examples, proto)
    _write(report.to_json(indent=2), args.out)
    if args.csv_dir:
        report.write_csv(args.csv_dir)


def cmd_count_skeletons(args):
    counts = skeleton_counts(args.max_ops, args.dim, args.n_binary, args.n_unary)
    for n, c in enumerate(counts):
        print(f"{n}\t{c}")


def cmd_refine(args):
    x, y = read_points(args.data)
    try:
        expr = from_prefix(args.skeleton)
    except (ValueError, KeyError) as e:
        raise UsageError(f"--skeleton: {e}") from None
    skel, given = skeletonize(expr)
    rng = np.random.default_rng(args.seed)
    if args.theta0:
        theta0 = np.asarray(args.theta0, dtype=float)
    else:
        # numeric constants in the skeleton are kept, C placeholders drawn at random
        theta0 = np.where(np.isnan(given), random_init(skel, rng), given)
    try:
        problem = RefineProblem(skel, theta0, x, y)
    except ValueError as e:
        raise UsageError(str(e)) from None
    res = refine(problem, RefineOptions(max_iter=args.max_iter), rng)
    out = {
        "status": res.status,
        "theta0": theta0.tolist(),
        "theta": res.theta.tolist(),
        "initial_loss": res.initial_loss,
        "loss": res.loss,
        "iterations": res.iterations,
    }
    if res.success:
        fitted = skel.substitute(res.theta)
        out["formula"] = to_infix(fitted, 6)
        out["complexity"] = complexity(fitted)
    _write(json.dumps(out, indent=2), args.out)


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="YAML/JSON file with generator/model/pipeline sections")
    g.add_argument("--mode", choices=MODES, default=None)
    g.add_argument("--B", type=int, default=None, help="maximum number of bags")
    g.add_argument("--C", type=int, default=None, help="candidates decoded per bag")
    g.add_argument("--K", type=int, default=None, help="candidates refined")
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("-v", "--verbose", action="store_true")

    decoding = _Parser(add_help=False)
    decoding.add_argument("--checkpoint", help="trained model checkpoint")
    decoding.add_argument("--propose", action="append", metavar="PREFIX",
                          help="fixed candidate in prefix notation instead of a model (repeatable)")
    decoding.add_argument("--decoder", choices=("sampling", "beam"), default="sampling")
    decoding.add_argument("--temperature", type=float, default=1.0)

    p = _Parser(prog="e2esr", description="End-to-end symbolic regression toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("generate", parents=[common], help="write a JSONL dataset of synthetic problems")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stratified", action="store_true", help="uniform over unary, binary and dimension")
    s.add_argument("--n-points", type=int, default=None)
    s.add_argument("--toy", action="store_true", help="small preset: d_max=2, b_max=1, u_max=2")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("stats", parents=[common], help="histograms of generated data")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--out")
    s.add_argument("--toy", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", parents=[common], help="train a model on freshly generated data")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--n-train", type=int, default=100_000)
    s.add_argument("--n-val", type=int, default=2000)
    s.add_argument("--epochs", type=float, default=1.0)
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--eval-every", type=int, default=1000)
    s.add_argument("--metrics", help="JSONL training log")
    s.add_argument("--time-budget", type=float, default=None, help="seconds")
    s.add_argument("--toy", action="store_true", help="small model and generator presets")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("fit", parents=[common, decoding], help="fit a formula to a CSV or JSONL dataset")
    s.add_argument("data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("evaluate", parents=[common, decoding], help="metrics over a validation suite")
    s.add_argument("--dataset", help="JSONL of examples (default: a fresh stratified set)")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--n-points", type=int, default=None)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--test-scales", type=float, nargs="+", default=[1.0])
    s.add_argument("--sweep", choices=("n_points", "noise", "test_scale", "mode"))
    s.add_argument("--toy", action="store_true")
    s.add_argument("--out")
    s.add_argument("--csv-dir")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("count-skeletons", parents=[common], help="exact skeleton counts")
    s.add_argument("--max-ops", type=int, default=10)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--n-binary", type=int, default=3)
    s.add_argument("--n-unary", type=int, default=10)
    s.set_defaults(func=cmd_count_skeletons)

    s = sub.add_parser("refine", parents=[common], help="fit the constants of one skeleton")
    s.add_argument("data")
    s.add_argument("--skeleton", required=True, help='prefix with C placeholders, e.g. "mul C sin x_1"')
    s.add_argument("--theta0", type=float, nargs="+")
    s.add_argument("--max-iter", type=int, default=500)
    s.add_argument("--out")
    s.set_defaults(func=cmd_refine)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if getattr(args, "max_ops", 0) < 0:
            raise UsageError("--max-ops must be >= 0")
        args.cfg = load_config(args.config)
        args.func(args)
    except UsageError as e:
        print(f"e2esr: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FitError) as e:
        print(f"e2esr: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"e2esr: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
