"""Acceptance suite, one test per criterion.

Run ``pytest tests/test_acceptance.py -v``; a summary with one PASS/FAIL
line per criterion is printed at the end. Criteria 10 and 12 train or load
the toy checkpoint and carry the ``slow`` marker.

Tolerances and thresholds are fixed here and must not be loosened.
"""

from __future__ import annotations

import copy
import os
import time
from collections import defaultdict
from pathlib import Path

import mpmath as mp
import numpy as np
import pytest
import torch

from conftest import TOY_GEN, refine_suite
from e2esr.expr import Const, Slot, Var, evaluate_batch, from_prefix, grad_constants, op, skeleton_key, skeletonize, x
from e2esr.generator import GeneratorConfig, generate_example, stratified_examples, _sample_function
from e2esr.harness import Protocol, evaluate_suite
from e2esr.metrics import acc_tau, r2_score
from e2esr.pipeline import PipelineConfig, fit_candidates, rank_candidates
from e2esr.refine import RefineProblem, random_init, refine
from e2esr.skeletons import count_skeletons
from e2esr.tokenizer import decode_expr, decode_float, encode_float, expr_tokens

ROOT = Path(__file__).resolve().parents[1]
TOY_CHECKPOINT = Path(os.environ.get("E2ESR_TOY_CHECKPOINT", ROOT / "artifacts" / "toy.pt"))
TOY_N_TRAIN = 100_000
TOY_SEED = 0

# Refinement oracle, frozen after one calibration run on seeds 10000..10099
# with the toy generator (d_max=2, b_max=1, u_max=2): 90/100 problems reach
# held-out R2 >= 0.999 and 99/100 satisfy model-init <= random-init loss.
REFINE_R2 = 0.999
REFINE_MIN_RECOVERED = 90
REFINE_MIN_DOMINANT = 80
REFINE_CALIBRATED = {"recovered": 90, "dominant": 99}


# --------------------------------------------------------------------------


@pytest.mark.criterion(1, "tokenizer round trip")
def test_c01_tokenizer_round_trip(record_property):
    t0 = time.perf_counter()
    cfg = GeneratorConfig()
    rng = np.random.default_rng(101)
    bad = 0
    for _ in range(10_000):
        e = _sample_function(cfg, rng)[0]
        bad += decode_expr(expr_tokens(e)) != e
    vals = rng.choice([-1.0, 1.0], 100_000) * rng.uniform(1, 10, 100_000) * 10.0 ** rng.integers(-99, 100, 100_000)
    vals[:10] = [0.0, 1e100, -1e100, 1e-99, 9.9995, 9999.5, 0.5, 1.0, -2.4242, 123456789.0]
    back = np.array([decode_float(encode_float(v)) for v in vals])
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(vals == 0, np.abs(back), np.abs(back - vals) / np.abs(vals))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{bad} expr mismatches, max float rel err {rel.max():.2e}, {elapsed:.0f}s")
    assert bad == 0
    assert rel.max() <= 5e-4
    assert elapsed < 60


@pytest.mark.criterion(2, "worked example cos(2.4242 x)")
def test_c02_worked_example(record_property):
    tokens = expr_tokens(op("cos", op("mul", 2.4242, x(1))))
    record_property("detail", " ".join(tokens))
    assert tokens == ["cos", "mul", "+", "2424", "E-3", "x_1"]


@pytest.mark.criterion(3, "generator conformance")
def test_c03_generator_conformance(record_property):
    t0 = time.perf_counter()
    cfg = GeneratorConfig()
    violations = defaultdict(int)
    for i in range(10_000):
        ex = generate_example(cfg, np.random.default_rng(300_000 + i))
        D, b, u = ex.dim, ex.n_binary, ex.n_unary
        d = ex.data
        violations["D"] += not 1 <= D <= 10
        violations["b"] += not D - 1 <= b <= D + 5
        violations["u"] += not 0 <= u <= 5
        violations["mean"] += not np.all(np.abs(d.x.mean(0)) <= 1e-9)
        violations["std"] += not np.all(np.abs(d.x.std(0) - 1) <= 1e-9)
        violations["y"] += not (np.all(np.isfinite(d.y)) and np.all(np.abs(d.y) <= 1e100))
        present = {n.index for n in ex.expr if isinstance(n, Var)}
        violations["vars"] += present != set(range(1, D + 1))
    elapsed = time.perf_counter() - t0
    total = sum(violations.values())
    record_property("detail", f"{total} violations over 10000 examples, {elapsed:.0f}s")
    assert total == 0, dict(violations)
    assert elapsed < 300


_MP = {
    "add": lambda a, b: a + b, "sub": lambda a, b: a - b, "mul": lambda a, b: a * b,
    "inv": lambda a: 1 / a, "abs": abs, "sqr": lambda a: a * a, "sqrt": mp.sqrt,
    "sin": mp.sin, "cos": mp.cos, "tan": mp.tan, "atan": mp.atan, "log": mp.log, "exp": mp.exp,
}


def _mp_eval(node, pt, theta):
    """Independent evaluator in 50-digit arithmetic."""
    if isinstance(node, Slot):
        return theta[node.index]
    if isinstance(node, Var):
        return pt[node.index - 1]
    if isinstance(node, Const):
        return mp.mpf(node.value)
    return _MP[node.name](*(_mp_eval(a, pt, theta) for a in node.args))


@pytest.mark.criterion(4, "gradient oracle vs central differences")
def test_c04_gradient_oracle(record_property):
    # central differences in 50-digit arithmetic with h = 1e-20 |theta|:
    # truncation and cancellation errors are far below the tolerance, so
    # a mismatch can only come from the analytic gradient
    t0 = time.perf_counter()
    cfg = GeneratorConfig()
    worst, failures = 0.0, 0
    with mp.workdps(50):
        for i in range(1000):
            rng = np.random.default_rng(50_000 + i)
            ex = generate_example(cfg, rng)
            pt = ex.data.x[int(rng.integers(len(ex.data.y)))]
            skel, theta = skeletonize(ex.expr)
            g = grad_constants(ex.expr, pt)
            P = [mp.mpf(float(v)) for v in pt]
            T = [mp.mpf(float(v)) for v in theta]
            fd = np.empty(len(T))
            for k in range(len(T)):
                h = mp.mpf("1e-20") * max(1, abs(T[k]))
                tp, tm = list(T), list(T)
                tp[k] += h
                tm[k] -= h
                fd[k] = float((_mp_eval(skel.expr, P, tp) - _mp_eval(skel.expr, P, tm)) / (2 * h))
            err = np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300)
            worst = max(worst, err)
            failures += not err <= 1e-4
    elapsed = time.perf_counter() - t0
    record_property("detail", f"{failures}/1000 above 1e-4, worst {worst:.1e}, {elapsed:.0f}s")
    assert failures == 0
    assert elapsed < 60


@pytest.mark.criterion(5, "refinement oracle")
def test_c05_refinement_oracle(record_property):
    t0 = time.perf_counter()
    recovered = dominant = 0
    for p in refine_suite(100, seed=10_000, cfg=TOY_GEN):
        model = refine(RefineProblem(p["skel"], p["theta0"], p["x"], p["y"]))
        rand = refine(RefineProblem(p["skel"], random_init(p["skel"], p["rng"]), p["x"], p["y"]))
        with np.errstate(all="ignore"):
            r2 = r2_score(p["yt"], evaluate_batch(p["skel"].expr, p["xt"], model.theta))[0]
        recovered += r2 >= REFINE_R2
        # losses equal up to rounding count as a tie
        sst = float(np.sum((p["y"] - p["y"].mean()) ** 2))
        dominant += model.loss <= rand.loss + 1e-10 * sst
    elapsed = time.perf_counter() - t0
    record_property("detail", f"recovered {recovered}/100 (>= {REFINE_MIN_RECOVERED}), "
                              f"model-init dominant {dominant}/100 (>= {REFINE_MIN_DOMINANT}), {elapsed:.0f}s")
    assert recovered >= REFINE_MIN_RECOVERED
    assert dominant >= REFINE_MIN_DOMINANT
    assert elapsed < 300


def _perturbing_decoder(expr, scale=0.1):
    """Mock model: the true skeleton with constants perturbed from the bag rng.

    Its output depends on the whitened data only, so it is equivariant to any
    per-dimension positive affine map of the raw inputs.
    """
    skel, theta = skeletonize(expr)

    def dec(xw, y, count, rng):
        return [skel.substitute(theta * (1 + rng.uniform(-scale, scale, theta.size))) for _ in range(count)]

    return dec


def _scaling_gap(mode):
    """Largest relative prediction gap between raw and affinely moved inputs."""
    worst = 0.0
    cfg = PipelineConfig(n_bags=1, n_candidates=4, n_refine=4, mode=mode, seed=5)
    for i, ex in enumerate(stratified_examples(TOY_GEN, 20, seed=600)):
        rng = np.random.default_rng(600 + i)
        X, y = ex.data.x, ex.data.y
        s = 10.0 ** rng.uniform(-2, 2, ex.dim)
        t = s * rng.normal(0, 5, ex.dim)
        dec = _perturbing_decoder(ex.expr)
        base = fit_candidates(X, y, dec, cfg).best.unscaled
        moved = fit_candidates(X * s + t, y, dec, cfg).best.unscaled
        with np.errstate(all="ignore"):
            a = evaluate_batch(base, X)
            b = evaluate_batch(moved, X * s + t)
        ok = np.isfinite(a) & np.isfinite(b)
        assert np.array_equal(ok, np.isfinite(a) | np.isfinite(b))
        worst = max(worst, float(np.max(np.abs(a[ok] - b[ok]) / (1 + np.abs(a[ok])), initial=0.0)))
    return worst


@pytest.mark.criterion(6, "scaling invariance")
def test_c06_scaling_invariance(record_property):
    # The decoder, ranking and unscaling path is checked bit-for-bit up to
    # rounding. BFGS is run too and its gap reported: its iterate path can
    # amplify last-bit input differences, so it is not part of the bound.
    t0 = time.perf_counter()
    gap = _scaling_gap("e2e-no-bfgs")
    refined = _scaling_gap("e2e+bfgs-model")
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |diff|/(1+|y|) = {gap:.1e} without refinement, "
                              f"{refined:.1e} with refinement (reported only), {elapsed:.0f}s")
    assert gap <= 1e-10
    assert elapsed < 60


@pytest.mark.criterion(7, "pipeline contracts")
def test_c07_pipeline_contracts(record_property):
    t0 = time.perf_counter()
    n_checked = 0
    for i, ex in enumerate(stratified_examples(TOY_GEN, 30, seed=700)):
        X, y = ex.data.x, ex.data.y
        perturbed = _perturbing_decoder(ex.expr, 0.2)
        others = [op("mul", 1.0, x(1)), op("sin", op("mul", 2.0, x(1))), from_prefix("add 1.0 x_1")]

        def dec(xw, yy, count, rng):
            return perturbed(xw, yy, 3, rng) + others + [ex.expr]

        base = dict(n_bags=1, n_candidates=7, n_refine=7, seed=i)
        skip = fit_candidates(X, y, dec, PipelineConfig(mode="e2e-no-bfgs", **base))
        model = fit_candidates(X, y, dec, PipelineConfig(mode="e2e+bfgs-model", **base))
        for res in (skip, model):
            keys = [c.key for c in res.candidates]
            assert len(keys) == len(set(keys))
        # the generating expression is exact up to re-whitening round-off and must rank first
        assert skip.best.key == skeleton_key(ex.expr)
        assert skip.best.error <= 1e-20 * (1 + np.var(y))
        assert model.best.error <= skip.best.error
        # identical up to step 8, which may only lower the subsample error
        assert {c.key: c.error_pre for c in skip.candidates} == {c.key: c.error_pre for c in model.candidates}
        for c in model.candidates:
            if c.refinement is not None and c.refinement.success:
                assert c.refine_subsample_error <= c.refine_subsample_error_pre
                n_checked += 1
    # a candidate with exactly zero error is ranked first
    X = np.linspace(0.5, 2.0, 40)[:, None]
    truth = op("mul", 1.5, op("exp", x(1)))
    pool = [op("mul", 1.4, op("exp", x(1))), op("add", 1.5, x(1)), truth, op("log", op("mul", -1.0, x(1)))]
    ranked = rank_candidates(pool, X, evaluate_batch(truth, X))
    assert ranked[0] == (truth, 0.0) and ranked[-1][1] == np.inf
    elapsed = time.perf_counter() - t0
    record_property("detail", f"30 problems, {n_checked} refined candidates checked, {elapsed:.0f}s")
    assert elapsed < 120


def _enumerate_prefix(n_ops, variables, binary=("add", "sub", "mul"),
                      unary=("inv", "abs", "sqr", "sqrt", "sin", "cos", "tan", "atan", "log", "exp")):
    out = []

    def dfs(seq, open_slots, ops_left):
        if open_slots == 0:
            if ops_left == 0:
                out.append(seq)
            return
        for v in variables:
            dfs(seq + [v], open_slots - 1, ops_left)
        if ops_left:
            for u in unary:
                dfs(seq + [u], open_slots, ops_left - 1)
            for b in binary:
                dfs(seq + [b], open_slots + 1, ops_left - 1)

    dfs([], 1, n_ops)
    return out


@pytest.mark.criterion(8, "skeleton counting vs enumeration")
def test_c08_skeleton_counts(record_property):
    rows = []
    for dim in (1, 2):
        for n in range(4):
            seqs = _enumerate_prefix(n, [f"x_{d}" for d in range(1, dim + 1)])
            distinct = {skeleton_key(from_prefix(s)) for s in seqs}
            rows.append((dim, n, len(distinct), count_skeletons(n, n_variables=dim)))
    record_property("detail", ", ".join(f"D={d} n={n}: {c}" for d, n, _, c in rows))
    assert all(enum == dp for _, _, enum, dp in rows)
    assert count_skeletons(1) == 13


@pytest.mark.criterion(9, "metric fixtures")
def test_c09_metric_fixtures(record_property):
    y = np.array([1.0, 2.0, 3.0])
    assert r2_score(y, np.full(3, y.mean())) == (0.0, 0.0)
    raw, clamped = r2_score(y, [1.0, 2.0, 9.0])
    assert raw == pytest.approx(-17.0, abs=1e-12) and clamped == 0.0
    rng = np.random.default_rng(9)
    for _ in range(200):
        yy = rng.uniform(0.1, 10, 50)
        yh = yy * (1 + rng.normal(0, 10.0 ** rng.uniform(-4, 0), 50))
        accs = [acc_tau(yy, yh, t) for t in (1e-3, 1e-2, 0.1, 1.0)]
        assert accs == sorted(accs)
    yy = np.arange(1.0, 201.0)
    yh = yy.copy()
    yh[42] = 11 * yy[42]
    assert acc_tau(yy, yh, 0.1) == 1
    assert acc_tau([1.0, 2.0], [1.05, 2.2], 0.1) == 1
    record_property("detail", "R2(mean)=0, R2=-17 -> 0, monotone in tau, outlier absorbed at N=200")


# --------------------------------------------------------------------------
# toy-scale model criteria


def toy_checkpoint(train_if_missing: bool):
    """Load the toy checkpoint, training it first if allowed and absent."""
    from e2esr.model import ModelConfig, load_checkpoint, train_from_generator

    if not TOY_CHECKPOINT.exists():
        if not train_if_missing:
            return None
        TOY_CHECKPOINT.parent.mkdir(parents=True, exist_ok=True)
        train_from_generator(TOY_GEN, ModelConfig.toy(), TOY_N_TRAIN, 2000, seed=TOY_SEED,
                             checkpoint=TOY_CHECKPOINT, eval_every=1000,
                             metrics_path=TOY_CHECKPOINT.with_suffix(".metrics.jsonl"))
    return load_checkpoint(TOY_CHECKPOINT)


@pytest.mark.slow
@pytest.mark.criterion(10, "toy training smoke")
def test_c10_toy_training(record_property):
    from e2esr.model import ModelDecoder
    from e2esr.model.train import encode_examples, validate

    torch.manual_seed(0)
    model, meta = toy_checkpoint(train_if_missing=True)
    assert meta.get("n_train") == TOY_N_TRAIN
    val = encode_examples(stratified_examples(TOY_GEN, 2000, TOY_SEED + 10**9), model.vocab)
    rep = validate(model, val)

    probs = list(stratified_examples(TOY_GEN, 300, seed=20_000))
    proto = Protocol(pipeline=PipelineConfig(n_bags=1, n_candidates=10, n_refine=10), generator=TOY_GEN, seed=1)
    report = evaluate_suite(ModelDecoder(model, "sampling"), probs, proto)
    by_u = {row["n_unary"]: row["acc_0.1"] for row in report.table("n_unary")}
    record_property("detail", f"token acc {rep.token_accuracy:.3f} vs majority {rep.majority_baseline:.3f}; "
                              f"Acc0.1 by u {by_u}; token acc by u "
                              + str({u: round(a, 3) for u, a in rep.by_unary.items()}))
    assert rep.token_accuracy > rep.majority_baseline
    accs = [by_u[u] for u in sorted(by_u)]
    assert all(a >= b for a, b in zip(accs, accs[1:])), by_u


@pytest.mark.criterion(11, "encoder permutation invariance")
def test_c11_permutation_invariance(record_property):
    from e2esr.model import E2EModel, ModelConfig
    from e2esr.tokenizer import Vocab

    loaded = toy_checkpoint(train_if_missing=False)
    if loaded is None:
        torch.manual_seed(0)
        model, source = E2EModel(ModelConfig.toy(), Vocab(d_max=2)).eval(), "untrained toy model"
    else:
        model, source = loaded[0], "toy checkpoint"
    t0 = time.perf_counter()

    def max_diff(m):
        worst = 0.0
        for i, ex in enumerate(stratified_examples(TOY_GEN, 20, seed=1100)):
            pts = m.point_ids(ex.data.x, ex.data.y)
            tgt = torch.tensor([m.vocab.encode_target(expr_tokens(ex.expr))[:-1]])
            perm = torch.randperm(pts.shape[1], generator=torch.Generator().manual_seed(i))
            with torch.no_grad():
                worst = max(worst, float((m(pts, tgt) - m(pts[:, perm], tgt)).abs().max()))
        return worst

    worst = max_diff(model)
    elapsed = time.perf_counter() - t0
    # diagnostic only: separates architecture from float32 summation order
    worst64 = max_diff(copy.deepcopy(model).double())
    record_property("detail", f"max logit diff {worst:.1e} float32, {worst64:.1e} float64 "
                              f"({source}), {elapsed:.0f}s")
    assert worst <= 1e-5
    assert elapsed < 60


@pytest.mark.slow
@pytest.mark.criterion(12, "sampling diversity >= beam diversity")
def test_c12_decoding_diversity(record_property):
    from e2esr.model import decode_beam, decode_sample

    model, _ = toy_checkpoint(train_if_missing=True)
    t0 = time.perf_counter()

    def distinct(decoded):
        keys = set()
        for d in decoded:
            if d.well_formed:
                keys.add(skeleton_key(decode_expr(d.tokens)))
        return len(keys)

    samp, beam = [], []
    for i, ex in enumerate(stratified_examples(TOY_GEN, 50, seed=1200)):
        X, y = ex.data.x, ex.data.y
        samp.append(distinct(decode_sample(model, X, y, 10, temperature=1.0, seed=i)))
        beam.append(distinct(decode_beam(model, X, y, 10)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"mean distinct skeletons: sampling {np.mean(samp):.2f}, "
                              f"beam {np.mean(beam):.2f}, {elapsed:.0f}s")
    assert np.mean(samp) >= np.mean(beam)
    assert elapsed < 600
