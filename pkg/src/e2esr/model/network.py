from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..tokenizer import Vocab, encode_points


@dataclass
class ModelConfig:
    d_max: int = 10
    d_emb: int = 512
    n_heads: int = 16
    enc_layers: int = 4
    dec_layers: int = 16
    ffn_mult: int = 4
    dropout: float = 0.0
    max_points: int = 200
    max_target_len: int = 256
    mode: str = "e2e"  # or "skeleton"
    # optimization
    lr_init: float = 1e-7
    lr_peak: float = 2e-4
    warmup_steps: int = 10_000
    tokens_per_batch: int = 10_000
    max_batch_examples: int = 512
    grad_clip: float = 1.0

    @classmethod
    def toy(cls, **overrides) -> ModelConfig:
        """Small preset that trains on a CPU in minutes to hours."""
        base = dict(d_max=2, d_emb=64, n_heads=4, enc_layers=2, dec_layers=4,
                    max_target_len=96, lr_peak=1e-3, warmup_steps=1000,
                    tokens_per_batch=20_000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(step: int, cfg: ModelConfig) -> float:
    """Linear warmup from ``lr_init`` to ``lr_peak``, then inverse square-root decay."""
    if step < cfg.warmup_steps:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / cfg.warmup_steps
    return cfg.lr_peak * math.sqrt(cfg.warmup_steps / max(step, 1))


class PointEmbedder(nn.Module):
    """Maps each point's ``3 * (d_max + 1)`` token ids to one vector."""

    def __init__(self, n_tokens: int, tokens_per_point: int, d_emb: int):
        super().__init__()
        self.tokens = nn.Embedding(n_tokens, d_emb)
        self.ffn = nn.Sequential(
            nn.Linear(tokens_per_point * d_emb, d_emb),
            nn.ReLU(),
            nn.Linear(d_emb, d_emb),
        )

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        # ids: (B, N, T) -> (B, N, d_emb)
        return self.ffn(self.tokens(ids).flatten(-2))


class E2EModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocab):
        super().__init__()
        if vocab.d_max != cfg.d_max:
            raise ValueError("vocabulary and model disagree on d_max")
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.d_emb
        self.embedder = PointEmbedder(vocab.n_encoder, 3 * (cfg.d_max + 1), d)
        enc_layer = nn.TransformerEncoderLayer(
            d, cfg.n_heads, cfg.ffn_mult * d, cfg.dropout, batch_first=True, norm_first=True
        )
        # no positional embedding on the encoder side: points form a set
        self.encoder = nn.TransformerEncoder(
            enc_layer, cfg.enc_layers, norm=nn.LayerNorm(d), enable_nested_tensor=False
        )
        self.dec_tokens = nn.Embedding(vocab.n_decoder, d)
        self.dec_positions = nn.Embedding(cfg.max_target_len, d)
        dec_layer = nn.TransformerDecoderLayer(
            d, cfg.n_heads, cfg.ffn_mult * d, cfg.dropout, batch_first=True, norm_first=True
        )
        self.decoder = nn.TransformerDecoder(dec_layer, cfg.dec_layers, norm=nn.LayerNorm(d))
        self.proj = nn.Linear(d, vocab.n_decoder)

    def encode(self, points: torch.Tensor, point_pad: torch.Tensor | None = None) -> torch.Tensor:
        return self.encoder(self.embedder(points), src_key_padding_mask=point_pad)

    def decode(self, memory, tgt, point_pad=None, tgt_pad=None) -> torch.Tensor:
        L = tgt.shape[1]
        if L > self.cfg.max_target_len:
            raise ValueError(f"target length {L} exceeds max_target_len")
        pos = torch.arange(L, device=tgt.device)
        h = self.dec_tokens(tgt) + self.dec_positions(pos)[None]
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool, device=tgt.device), diagonal=1)
        h = self.decoder(h, memory, tgt_mask=causal, tgt_key_padding_mask=tgt_pad,
                         memory_key_padding_mask=point_pad)
        return self.proj(h)

    def forward(self, points, tgt, point_pad=None, tgt_pad=None) -> torch.Tensor:
        return self.decode(self.encode(points, point_pad), tgt, point_pad, tgt_pad)

    def point_ids(self, x: np.ndarray, y: np.ndarray) -> torch.Tensor:
        """Encoder input for a single point set, shape ``(1, N, 3 * (d_max + 1))``."""
        if len(y) > self.cfg.max_points:
            raise ValueError(f"{len(y)} points exceed the trained context of {self.cfg.max_points}")
        return torch.as_tensor(encode_points(x, y, self.vocab))[None]


def save_checkpoint(model: E2EModel, path: str | Path, step: int = 0, extra: dict | None = None):
    torch.save(
        {
            "config": model.cfg.to_dict(),
            "vocab": model.vocab.manifest(),
            "state_dict": model.state_dict(),
            "step": step,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[E2EModel, dict]:
    """Rebuild a model in eval mode; returns ``(model, metadata)``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(blob["config"])
    vocab = Vocab.from_manifest(blob["vocab"])
    model = E2EModel(cfg, vocab)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, {"step": blob.get("step", 0), **blob.get("extra", {})}
