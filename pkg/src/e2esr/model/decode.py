from __future__ import annotations

from dataclasses import dataclass

import torch

from ..tokenizer import ParseError, decode_expr
from .network import E2EModel


@dataclass
class Decoded:
    tokens: list[str]
    logprob: float  # sum over generated tokens, EOS included
    complete: bool  # ended with EOS before the length cap
    n_generated: int

    @property
    def score(self) -> float:
        """Mean log-probability per token (the beam ranking criterion)."""
        return self.logprob / max(self.n_generated, 1)

    @property
    def well_formed(self) -> bool:
        if not self.complete:
            return False
        try:
            decode_expr(self.tokens)
        except ParseError:
            return False
        return True


def _max_len(model: E2EModel, max_len: int | None) -> int:
    return min(max_len or model.cfg.max_target_len, model.cfg.max_target_len)


@torch.no_grad()
def decode_sample(model: E2EModel, x, y, count: int, temperature: float = 1.0,
                  seed: int = 0, max_len: int | None = None) -> list[Decoded]:
    """``count`` independent ancestral samples; ``temperature == 0`` is greedy."""
    model.eval()
    vocab = model.vocab
    L = _max_len(model, max_len)
    memory = model.encode(model.point_ids(x, y)).expand(count, -1, -1)
    gen = torch.Generator().manual_seed(int(seed))
    seq = torch.full((count, 1), vocab.bos_id, dtype=torch.long)
    logp = torch.zeros(count, dtype=torch.float64)
    done = torch.zeros(count, dtype=torch.bool)
    lengths = torch.zeros(count, dtype=torch.long)
    while seq.shape[1] < L and not bool(done.all()):
        logits = model.decode(memory, seq)[:, -1].double()
        logits[:, vocab.pad_id] = -torch.inf
        logits[:, vocab.bos_id] = -torch.inf
        lp = torch.log_softmax(logits, dim=-1)
        if temperature == 0:
            nxt = lp.argmax(-1)
        else:
            probs = torch.softmax(logits / temperature, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=gen).squeeze(1)
        nxt = torch.where(done, torch.full_like(nxt, vocab.pad_id), nxt)
        step_lp = lp.gather(1, nxt[:, None]).squeeze(1)
        logp += torch.where(done, torch.zeros_like(step_lp), step_lp)
        lengths += (~done).long()
        done |= nxt == vocab.eos_id
        seq = torch.cat([seq, nxt[:, None]], dim=1)
    out = []
    for i in range(count):
        ids = seq[i, 1:].tolist()
        out.append(Decoded(vocab.decode_ids(ids), float(logp[i]), bool(done[i]), int(lengths[i])))
    return out


@torch.no_grad()
def decode_beam(model: E2EModel, x, y, beam_size: int, max_len: int | None = None) -> list[Decoded]:
    """Beam search ranked by mean log-probability per token, best first."""
    model.eval()
    vocab = model.vocab
    L = _max_len(model, max_len)
    memory = model.encode(model.point_ids(x, y))
    beams: list[tuple[list[int], float]] = [([vocab.bos_id], 0.0)]
    finished: list[Decoded] = []
    while beams and len(finished) < beam_size:
        if len(beams[0][0]) >= L:
            break
        seq = torch.tensor([b[0] for b in beams], dtype=torch.long)
        logits = model.decode(memory.expand(len(beams), -1, -1), seq)[:, -1].double()
        logits[:, vocab.pad_id] = -torch.inf
        logits[:, vocab.bos_id] = -torch.inf
        lp = torch.log_softmax(logits, dim=-1)
        total = torch.tensor([b[1] for b in beams], dtype=torch.float64)[:, None] + lp
        k = min(2 * beam_size, total.numel())
        top_vals, top_idx = total.flatten().topk(k)
        nxt_beams = []
        V = lp.shape[1]
        for rank, (val, flat) in enumerate(zip(top_vals.tolist(), top_idx.tolist())):
            b, tok = divmod(flat, V)
            ids = beams[b][0] + [tok]
            if tok == vocab.eos_id:
                # an EOS only finalizes a hypothesis if it ranks inside the beam
                if rank < beam_size and len(finished) < beam_size:
                    finished.append(Decoded(vocab.decode_ids(ids[1:]), val, True, len(ids) - 1))
            elif len(nxt_beams) < beam_size:
                nxt_beams.append((ids, val))
            if len(nxt_beams) >= beam_size:
                break
        beams = nxt_beams
    # unfinished beams fill any remaining places, flagged incomplete
    for ids, val in beams:
        if len(finished) >= beam_size:
            break
        finished.append(Decoded(vocab.decode_ids(ids[1:]), val, False, len(ids) - 1))
    finished.sort(key=lambda d: d.score, reverse=True)
    return finished[:beam_size]


class ModelDecoder:
    """Adapter exposing a trained model as a pipeline decoder.

    Incomplete sequences are passed through as-is; the pipeline drops
    anything that does not parse.
    """

    def __init__(self, model: E2EModel, strategy: str = "sampling", temperature: float = 1.0,
                 max_len: int | None = None):
        if strategy not in ("sampling", "beam"):
            raise ValueError("strategy must be 'sampling' or 'beam'")
        self.model = model
        self.strategy = strategy
        self.temperature = temperature
        self.max_len = max_len

    def __call__(self, x, y, count, rng):
        if self.strategy == "beam":
            res = decode_beam(self.model, x, y, count, self.max_len)
        else:
            res = decode_sample(self.model, x, y, count, self.temperature,
                                seed=int(rng.integers(2**63)), max_len=self.max_len)
        return [d.tokens if d.complete else d.tokens + ["<truncated>"] for d in res]
