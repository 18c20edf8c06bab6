from __future__ import annotations

import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from ..generator import Example, GeneratorConfig, generate_dataset, stratified_examples
from ..tokenizer import Vocab, encode_points, expr_tokens
from .network import E2EModel, ModelConfig, learning_rate, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Encoded:
    points: np.ndarray  # (N, 3 * (d_max + 1)) encoder ids
    target: np.ndarray  # decoder ids, BOS ... EOS
    n_unary: int = -1
    n_binary: int = -1
    dim: int = -1

    @property
    def n_tokens(self) -> int:
        return self.points.size + self.target.size


def encode_example(ex: Example, vocab: Vocab, mode: str = "e2e") -> Encoded:
    d = ex.data
    target = vocab.encode_target(expr_tokens(ex.expr, mode))
    return Encoded(
        encode_points(d.x, d.y, vocab).astype(np.int16),
        np.asarray(target, dtype=np.int16),
        ex.n_unary, ex.n_binary, ex.dim,
    )


def length_batches(items: list[Encoded], tokens_per_batch: int, max_examples: int,
                   rng: np.random.Generator) -> list[list[int]]:
    """Group examples of similar point count until each batch holds enough tokens.

    Token count is measured on the padded batch, so grouping by length
    keeps padding small. Batch order is shuffled.
    """
    order = rng.permutation(len(items))
    order = order[np.argsort([items[i].points.shape[0] for i in order], kind="stable")]
    batches, cur, max_n, max_l = [], [], 0, 0
    for i in order:
        it = items[i]
        max_n = max(max_n, it.points.shape[0])
        max_l = max(max_l, it.target.size)
        cur.append(int(i))
        padded = len(cur) * (max_n * it.points.shape[1] + max_l)
        if padded >= tokens_per_batch or len(cur) >= max_examples:
            batches.append(cur)
            cur, max_n, max_l = [], 0, 0
    if cur:
        batches.append(cur)
    rng.shuffle(batches)
    return batches


def collate(items: list[Encoded], vocab: Vocab):
    B = len(items)
    N = max(it.points.shape[0] for it in items)
    W = items[0].points.shape[1]
    L = max(it.target.size for it in items)
    points = torch.full((B, N, W), vocab.enc_pad_id, dtype=torch.long)
    point_pad = torch.ones((B, N), dtype=torch.bool)
    tgt = torch.full((B, L), vocab.pad_id, dtype=torch.long)
    for b, it in enumerate(items):
        n = it.points.shape[0]
        points[b, :n] = torch.from_numpy(it.points.astype(np.int64))
        point_pad[b, :n] = False
        tgt[b, : it.target.size] = torch.from_numpy(it.target.astype(np.int64))
    return points, point_pad, tgt


def batch_loss(model: E2EModel, items: list[Encoded]):
    """Token-level cross-entropy (teacher forcing); returns ``(loss, logits, labels)``."""
    vocab = model.vocab
    points, point_pad, tgt = collate(items, vocab)
    inp, labels = tgt[:, :-1], tgt[:, 1:]
    logits = model(points, inp, point_pad, inp == vocab.pad_id)
    loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
                           ignore_index=vocab.pad_id)
    return loss, logits, labels


@dataclass
class ValidationReport:
    token_accuracy: float
    majority_baseline: float
    loss: float
    by_unary: dict[int, float] = field(default_factory=dict)
    sequence_accuracy: float = 0.0


@torch.no_grad()
def validate(model: E2EModel, items: list[Encoded], batch_size: int = 64) -> ValidationReport:
    model.eval()
    vocab = model.vocab
    correct = total = seq_ok = 0
    loss_sum = 0.0
    hist: Counter = Counter()
    per_u: dict[int, list[int]] = {}
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        loss, logits, labels = batch_loss(model, chunk)
        mask = labels != vocab.pad_id
        hit = (logits.argmax(-1) == labels) & mask
        n = int(mask.sum())
        loss_sum += float(loss) * n
        correct += int(hit.sum())
        total += n
        seq_ok += int((hit.sum(1) == mask.sum(1)).sum())
        hist.update(labels[mask].tolist())
        for it, h, m in zip(chunk, hit.sum(1).tolist(), mask.sum(1).tolist()):
            c = per_u.setdefault(it.n_unary, [0, 0])
            c[0] += h
            c[1] += m
    majority = hist.most_common(1)[0][1] / total if total else 0.0
    return ValidationReport(
        token_accuracy=correct / max(total, 1),
        majority_baseline=majority,
        loss=loss_sum / max(total, 1),
        by_unary={u: c[0] / c[1] for u, c in sorted(per_u.items())},
        sequence_accuracy=seq_ok / max(len(items), 1),
    )


@dataclass
class TrainResult:
    model: E2EModel
    step: int
    history: list[dict]
    validation: ValidationReport | None


def train(
    cfg: ModelConfig,
    train_items: list[Encoded],
    val_items: list[Encoded] | None = None,
    *,
    epochs: float = 1.0,
    max_steps: int | None = None,
    seed: int = 0,
    eval_every: int = 1000,
    metrics_path: str | Path | None = None,
    model: E2EModel | None = None,
    vocab: Vocab | None = None,
    time_budget: float | None = None,
) -> TrainResult:
    """Adam on token cross-entropy with warmup + inverse-sqrt learning rate.

    ``train_items`` must be encoded in the mode named by ``cfg.mode``.
    Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    vocab = vocab or Vocab(d_max=cfg.d_max)
    model = model or E2EModel(cfg, vocab)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(0.9, 0.98), eps=1e-9)
    history: list[dict] = []
    metrics = open(metrics_path, "a") if metrics_path else None
    step = 0
    t0 = time.monotonic()
    total_steps = max_steps if max_steps is not None else math.inf
    report = None

    def emit(rec: dict):
        history.append(rec)
        if metrics:
            metrics.write(json.dumps(rec) + "\n")
            metrics.flush()

    try:
        epoch = 0.0
        while epoch < epochs and step < total_steps:
            batches = length_batches(train_items, cfg.tokens_per_batch, cfg.max_batch_examples, rng)
            if epochs - epoch < 1:
                batches = batches[: max(1, int(len(batches) * (epochs - epoch)))]
            for idx in batches:
                model.train()
                lr = learning_rate(step, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                loss, _, _ = batch_loss(model, [train_items[i] for i in idx])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at step {step} (lr={lr:.3g})")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                step += 1
                rec = {"step": step, "loss": loss.item(), "lr": lr, "batch": len(idx)}
                if val_items and eval_every and step % eval_every == 0:
                    report = validate(model, val_items)
                    rec["val_accuracy"] = report.token_accuracy
                    rec["val_loss"] = report.loss
                    log.info("step %d loss %.4f val acc %.4f", step, rec["loss"], report.token_accuracy)
                emit(rec)
                if step >= total_steps or (time_budget and time.monotonic() - t0 > time_budget):
                    total_steps = step
                    break
            epoch += 1
        if val_items:
            report = validate(model, val_items)
            emit({"step": step, "val_accuracy": report.token_accuracy, "val_loss": report.loss,
                  "majority_baseline": report.majority_baseline, "final": True})
    finally:
        if metrics:
            metrics.close()
    model.eval()
    return TrainResult(model, step, history, report)


def encode_examples(examples: Iterable[Example], vocab: Vocab, mode: str = "e2e") -> list[Encoded]:
    return [encode_example(ex, vocab, mode) for ex in examples]


def train_from_generator(
    gen_cfg: GeneratorConfig,
    model_cfg: ModelConfig,
    n_train: int,
    n_val: int = 2000,
    *,
    seed: int = 0,
    checkpoint: str | Path | None = None,
    **train_kw,
) -> TrainResult:
    """Generate, encode and train in one go; the validation set is stratified.

    Training examples use seeds ``seed + i``; validation examples come from a
    disjoint seed range so the two sets never share a problem.
    """
    if gen_cfg.d_max != model_cfg.d_max:
        raise ValueError("generator and model disagree on d_max")
    vocab = Vocab(d_max=model_cfg.d_max)
    tr = encode_examples(generate_dataset(gen_cfg, n_train, seed), vocab, model_cfg.mode)
    va = encode_examples(stratified_examples(gen_cfg, n_val, seed + 10**9), vocab, model_cfg.mode)
    res = train(model_cfg, tr, va, seed=seed, vocab=vocab, **train_kw)
    if checkpoint:
        rep = res.validation
        save_checkpoint(res.model, checkpoint, res.step, {
            "generator": gen_cfg.to_dict(),
            "n_train": n_train,
            "seed": seed,
            "validation": None if rep is None else {
                "token_accuracy": rep.token_accuracy,
                "majority_baseline": rep.majority_baseline,
                "loss": rep.loss,
                "by_unary": rep.by_unary,
                "sequence_accuracy": rep.sequence_accuracy,
            },
        })
    return res
