import json

import numpy as np
import pytest
import torch

from e2esr.generator import GeneratorConfig, generate_dataset
from e2esr.model import (
    E2EModel,
    ModelConfig,
    ModelDecoder,
    TrainingDiverged,
    decode_beam,
    decode_sample,
    load_checkpoint,
    save_checkpoint,
    train,
)
from e2esr.model.network import learning_rate
from e2esr.model.train import batch_loss, collate, encode_examples, length_batches, validate
from e2esr.tokenizer import Vocab

TINY = ModelConfig.toy(d_emb=32, n_heads=2, enc_layers=1, dec_layers=2, max_target_len=64,
                       warmup_steps=10, tokens_per_batch=4000)
GEN = GeneratorConfig(d_max=2, b_max=1, u_max=2, n_max=60)


@pytest.fixture(scope="module")
def items():
    return encode_examples(generate_dataset(GEN, 40, seed=0), Vocab(d_max=2))


@pytest.fixture
def model():
    torch.manual_seed(0)
    return E2EModel(TINY, Vocab(d_max=2)).eval()


def test_learning_rate_schedule():
    cfg = ModelConfig(lr_init=1e-7, lr_peak=2e-4, warmup_steps=100)
    assert learning_rate(0, cfg) == pytest.approx(1e-7)
    assert learning_rate(50, cfg) == pytest.approx(1e-7 + 0.5 * (2e-4 - 1e-7))
    assert learning_rate(100, cfg) == pytest.approx(2e-4)
    assert learning_rate(400, cfg) == pytest.approx(1e-4)


def test_config_round_trip():
    cfg = ModelConfig.toy()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        E2EModel(cfg, Vocab(d_max=3))


def test_encoder_permutation_invariance(model, items):
    it = items[0]
    points = torch.from_numpy(it.points.astype(np.int64))[None]
    tgt = torch.from_numpy(it.target.astype(np.int64))[None, :-1]
    perm = torch.randperm(points.shape[1], generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        a = model(points, tgt)
        b = model(points[:, perm], tgt)
        mem_a, mem_b = model.encode(points), model.encode(points[:, perm])
    assert (a - b).abs().max() < 1e-5
    assert (mem_a[:, perm] - mem_b).abs().max() < 1e-5


def test_padding_does_not_change_logits(model, items):
    pts, pad, tgt = collate(items[:3], model.vocab)
    with torch.no_grad():
        batched = model(pts, tgt[:, :-1], pad, tgt[:, :-1] == model.vocab.pad_id)
        n = items[0].points.shape[0]
        L = items[0].target.size - 1
        single = model(pts[:1, :n], tgt[:1, :L])
    assert (batched[0, :L] - single[0]).abs().max() < 1e-5


def test_causal_mask(model, items):
    pts, pad, tgt = collate(items[:1], model.vocab)
    t2 = tgt.clone()
    t2[0, -2] = model.vocab.dec_index["sin"]
    with torch.no_grad():
        a = model(pts, tgt)
        b = model(pts, t2)
    assert torch.allclose(a[0, :-2], b[0, :-2], atol=1e-6)


def test_gradcheck_float64(items):
    torch.manual_seed(0)
    cfg = ModelConfig.toy(d_emb=8, n_heads=2, enc_layers=1, dec_layers=1, max_target_len=64)
    m = E2EModel(cfg, Vocab(d_max=2)).double()
    pts, pad, tgt = collate(items[:1], m.vocab)
    pts = pts[:, :5]
    h0 = m.embedder(pts).detach().requires_grad_(True)

    def f(h):
        mem = m.encoder(h)
        return m.decode(mem, tgt[:, :6]).sum()

    assert torch.autograd.gradcheck(f, (h0,), eps=1e-6, atol=1e-5)


def test_checkpoint_round_trip(tmp_path, model, items):
    path = tmp_path / "m.pt"
    save_checkpoint(model, path, step=7, extra={"note": "x"})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 7, "note": "x"}
    pts, pad, tgt = collate(items[:2], model.vocab)
    with torch.no_grad():
        assert torch.equal(model(pts, tgt, pad), back(pts, tgt, pad))


def test_length_batches_cover_everything(items):
    rng = np.random.default_rng(0)
    batches = length_batches(items, 3000, 8, rng)
    flat = sorted(i for b in batches for i in b)
    assert flat == list(range(len(items)))
    assert all(len(b) <= 8 for b in batches)


def test_decoding(model, items):
    rng = np.random.default_rng(0)
    ex = next(iter(generate_dataset(GEN, 1, seed=3)))
    X, y = ex.data.x, ex.data.y
    greedy = decode_sample(model, X, y, 1, temperature=0, max_len=20)[0]
    beam1 = decode_beam(model, X, y, 1, max_len=20)[0]
    assert greedy.tokens == beam1.tokens
    beams = decode_beam(model, X, y, 4, max_len=20)
    assert len(beams) == 4
    assert [b.score for b in beams] == sorted((b.score for b in beams), reverse=True)
    s1 = decode_sample(model, X, y, 5, seed=2, max_len=20)
    s2 = decode_sample(model, X, y, 5, seed=2, max_len=20)
    assert [d.tokens for d in s1] == [d.tokens for d in s2]
    out = ModelDecoder(model, "sampling", max_len=20)(X, y, 3, rng)
    assert len(out) == 3 and all(isinstance(t, list) for t in out)
    with pytest.raises(ValueError):
        model.point_ids(np.zeros((300, 1)), np.zeros(300))


def test_training_reduces_loss_and_logs(tmp_path, items):
    cfg = TINY
    m = E2EModel(cfg, Vocab(d_max=2))
    before = validate(m, items).loss
    log = tmp_path / "metrics.jsonl"
    res = train(cfg, items, items[:10], epochs=30, seed=0, eval_every=20, metrics_path=log, model=m)
    assert res.validation is not None
    assert validate(res.model, items).loss < before
    recs = [json.loads(line) for line in log.read_text().splitlines()]
    assert recs[0]["step"] == 1 and "lr" in recs[0]
    assert recs[-1]["final"] and 0 <= recs[-1]["majority_baseline"] <= 1


def test_skeleton_mode_targets():
    ex = next(iter(generate_dataset(GEN, 1, seed=1)))
    it = encode_examples([ex], Vocab(d_max=2), mode="skeleton")[0]
    toks = Vocab(d_max=2).decode_ids(it.target[1:].tolist())
    assert "<C>" in toks and not any(t.startswith("E") and t != "EOS" for t in toks)


def test_divergence_is_reported(items):
    cfg = ModelConfig.toy(d_emb=16, n_heads=2, enc_layers=1, dec_layers=1)
    m = E2EModel(cfg, Vocab(d_max=2))
    with torch.no_grad():
        m.proj.bias[0] = float("nan")
    with pytest.raises(TrainingDiverged):
        train(cfg, items, epochs=1, seed=0, model=m)


def test_batch_loss_ignores_padding(model, items):
    loss_a, _, _ = batch_loss(model, items[:1])
    loss_b, _, labels = batch_loss(model, [items[0], max(items, key=lambda i: i.target.size)])
    assert torch.isfinite(loss_a) and torch.isfinite(loss_b)
