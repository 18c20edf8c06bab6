"""Token sequences for point sets and expressions.

Floats become three tokens: sign, a 4-digit mantissa and a base-10
exponent, so that ``value = sign * mantissa * 10**exponent``. Expressions
are written in prefix order; in ``"e2e"`` mode constants expand to numeric
triples, in ``"skeleton"`` mode they become a single placeholder token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import OPERATORS, Const, Expr, Op, Slot, Var

MANTISSA_DIGITS = 4
MIN_EXPONENT = -103
MAX_EXPONENT = 100

PAD = "<PAD>"
BOS = "<BOS>"
EOS = "<EOS>"
PLACEHOLDER = "<C>"
SIGNS = ("+", "-")

VOCAB_VERSION = 1


class TokenizationError(ValueError):
    pass


class ParseError(ValueError):
    """A token sequence is not a single well-formed prefix expression."""


def exponent_token(e: int) -> str:
    return f"E{e}"


def encode_float(v: float) -> tuple[str, str, str]:
    """Round ``v`` to four significant digits and split it into three tokens.

    >>> encode_float(2.4242)
    ('+', '2424', 'E-3')
    """
    v = float(v)
    if not np.isfinite(v):
        raise TokenizationError(f"cannot encode non-finite value {v}")
    sign = "-" if v < 0 else "+"
    mant, _, exp = f"{abs(v):.{MANTISSA_DIGITS - 1}e}".partition("e")
    m = int(mant.replace(".", ""))
    e = int(exp) - (MANTISSA_DIGITS - 1)
    if m == 0:
        return ("+", "0", "E0")
    if e < MIN_EXPONENT:
        # below the smallest representable magnitude: flush to zero
        return ("+", "0", "E0")
    if e > MAX_EXPONENT:
        raise TokenizationError(f"{v} exceeds the largest encodable magnitude")
    return (sign, str(m), exponent_token(e))


def decode_float(tokens: Sequence[str]) -> float:
    if len(tokens) != 3:
        raise ParseError(f"a float takes 3 tokens, got {len(tokens)}")
    sign, mant, exp = tokens
    if sign not in SIGNS or not mant.isdigit() or not exp.startswith("E"):
        raise ParseError(f"malformed numeric triple {tuple(tokens)}")
    try:
        e = int(exp[1:])
    except ValueError:
        raise ParseError(f"malformed exponent token {exp!r}") from None
    m = int(mant)
    if m > 10**MANTISSA_DIGITS - 1 or not MIN_EXPONENT <= e <= MAX_EXPONENT:
        raise ParseError(f"numeric triple out of range {tuple(tokens)}")
    value = float(f"{m}e{e}")
    return -value if sign == "-" else value


def round_float(v: float) -> float:
    return decode_float(encode_float(v))


# --------------------------------------------------------------------------
# vocabularies


def _numeric_tokens() -> list[str]:
    return (
        list(SIGNS)
        + [str(m) for m in range(10**MANTISSA_DIGITS)]
        + [exponent_token(e) for e in range(MIN_EXPONENT, MAX_EXPONENT + 1)]
    )


@dataclass
class Vocab:
    """Separate encoder (numeric only) and decoder (hybrid) vocabularies.

    Ids are indices into ``encoder_tokens`` / ``decoder_tokens``; the two
    id spaces are independent so the model keeps separate embeddings.
    """

    d_max: int = 10
    operators: tuple[str, ...] = tuple(OPERATORS)
    encoder_tokens: list[str] = field(init=False)
    decoder_tokens: list[str] = field(init=False)

    def __post_init__(self):
        numeric = _numeric_tokens()
        self.encoder_tokens = [PAD] + numeric
        self.decoder_tokens = (
            [PAD, BOS, EOS, PLACEHOLDER]
            + list(self.operators)
            + [f"x_{d}" for d in range(1, self.d_max + 1)]
            + numeric
        )
        self.enc_index = {t: i for i, t in enumerate(self.encoder_tokens)}
        self.dec_index = {t: i for i, t in enumerate(self.decoder_tokens)}
        self.pad_id = self.dec_index[PAD]
        self.bos_id = self.dec_index[BOS]
        self.eos_id = self.dec_index[EOS]
        self.enc_pad_id = self.enc_index[PAD]

    @property
    def n_encoder(self) -> int:
        return len(self.encoder_tokens)

    @property
    def n_decoder(self) -> int:
        return len(self.decoder_tokens)

    def encode_target(self, tokens: Sequence[str]) -> list[int]:
        """``[BOS] tokens [EOS]`` as decoder ids."""
        try:
            return [self.bos_id] + [self.dec_index[t] for t in tokens] + [self.eos_id]
        except KeyError as exc:
            raise TokenizationError(f"token {exc.args[0]!r} not in decoder vocabulary") from None

    def decode_ids(self, ids: Sequence[int]) -> list[str]:
        """Decoder ids back to tokens, dropping BOS/PAD and stopping at EOS."""
        out = []
        for i in ids:
            tok = self.decoder_tokens[int(i)]
            if tok == EOS:
                break
            if tok in (BOS, PAD):
                continue
            out.append(tok)
        return out

    def manifest(self) -> str:
        lines = [f"version\t{VOCAB_VERSION}", f"d_max\t{self.d_max}",
                 "operators\t" + ",".join(self.operators), "[encoder]"]
        lines += [f"{i}\t{t}" for i, t in enumerate(self.encoder_tokens)]
        lines.append("[decoder]")
        lines += [f"{i}\t{t}" for i, t in enumerate(self.decoder_tokens)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> Vocab:
        header: dict[str, str] = {}
        sections: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            if not line:
                continue
            if line.startswith("["):
                current = line.strip("[]")
                sections[current] = []
            elif current is None:
                key, _, val = line.partition("\t")
                header[key] = val
            else:
                idx, _, tok = line.partition("\t")
                if int(idx) != len(sections[current]):
                    raise ValueError(f"non-contiguous id {idx} in [{current}]")
                sections[current].append(tok)
        if int(header.get("version", -1)) != VOCAB_VERSION:
            raise ValueError(f"unsupported vocabulary version {header.get('version')}")
        vocab = cls(d_max=int(header["d_max"]), operators=tuple(header["operators"].split(",")))
        if vocab.encoder_tokens != sections["encoder"] or vocab.decoder_tokens != sections["decoder"]:
            raise ValueError("manifest tokens do not match this vocabulary layout")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.manifest())

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        return cls.from_manifest(Path(path).read_text())


# --------------------------------------------------------------------------
# expressions


def expr_tokens(expr: Expr, mode: str = "e2e") -> list[str]:
    """Prefix-order token strings for ``expr``."""
    if mode not in ("e2e", "skeleton"):
        raise ValueError(f"unknown mode {mode!r}")
    out: list[str] = []
    for node in expr:
        if isinstance(node, Op):
            out.append(node.name)
        elif isinstance(node, Var):
            out.append(f"x_{node.index}")
        elif isinstance(node, Slot) or mode == "skeleton":
            out.append(PLACEHOLDER)
        else:
            out.extend(encode_float(node.value))
    return out


def encode_expr(expr: Expr, vocab: Vocab, mode: str = "e2e") -> list[int]:
    return vocab.encode_target(expr_tokens(expr, mode))


def decode_expr(tokens: Sequence[str]) -> Expr:
    """Parse prefix tokens (either mode) into an expression.

    Placeholders become slots numbered in prefix order. Raises
    :class:`ParseError` on truncated, dangling or malformed input.
    """
    tokens = list(tokens)
    pos = 0
    n_slots = 0

    def parse(depth: int) -> Expr:
        nonlocal pos, n_slots
        if pos >= len(tokens):
            raise ParseError("arity underflow: sequence ended early")
        if depth > 500:
            raise ParseError("expression too deep")
        tok = tokens[pos]
        pos += 1
        if tok in OPERATORS:
            return Op(tok, tuple(parse(depth + 1) for _ in range(OPERATORS[tok].arity)))
        if tok.startswith("x_") and tok[2:].isdigit() and int(tok[2:]) >= 1:
            return Var(int(tok[2:]))
        if tok == PLACEHOLDER:
            n_slots += 1
            return Slot(n_slots - 1)
        if tok in SIGNS:
            triple = tokens[pos - 1 : pos + 2]
            if len(triple) < 3:
                raise ParseError("arity underflow: truncated numeric triple")
            pos += 2
            return Const(decode_float(triple))
        raise ParseError(f"unexpected token {tok!r} at position {pos - 1}")

    expr = parse(0)
    if pos != len(tokens):
        raise ParseError(f"dangling tokens from position {pos}: {tokens[pos:pos + 5]}")
    return expr


# --------------------------------------------------------------------------
# points


def encode_points(x: np.ndarray, y: np.ndarray, vocab: Vocab) -> np.ndarray:
    """Encoder ids of shape ``(N, 3 * (d_max + 1))``.

    Per point: the triples of ``x_1 .. x_D``, pad triples for the unused
    dimensions up to ``d_max``, then the triple of ``y``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = x.shape
    if d > vocab.d_max:
        raise TokenizationError(f"input dimension {d} exceeds d_max={vocab.d_max}")
    idx = vocab.enc_index
    width = 3 * (vocab.d_max + 1)
    out = np.full((n, width), vocab.enc_pad_id, dtype=np.int64)
    cols = list(range(d)) + [vocab.d_max]
    values = np.concatenate([x, y[:, None]], axis=1)
    for i in range(n):
        for j, col in enumerate(cols):
            s, m, e = encode_float(values[i, j])
            out[i, 3 * col : 3 * col + 3] = (idx[s], idx[m], idx[e])
    return out
