"""Class tokens, prompt contexts and a frozen surrogate text encoder.

The surrogate stands in for a pretrained text tower. A prompt is a stack of
``L`` context vectors followed by one fixed class token; its embedding is::

    normalize(tanh(A @ mean(tokens) + b))

with ``A``/``b`` drawn once from a seeded generator and never trained. The
map is differentiable in the context vectors, which is all prompt learning
needs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .motion import N_GROUPS
from .nnkit import normalize_rows, normalize_rows_backward

D_TOK = 128
D_EMB = 256
PROMPT_LEN = 10
TEMPLATE_WORDS = ("a", "video", "of")


class TextEncoderError(ValueError):
    pass


def _seed_for(name: str, seed: int) -> int:
    digest = hashlib.sha256(f"{seed}\x00{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ClassToken:
    name: str
    vector: np.ndarray


def class_token(name: str, seed: int, d_tok: int = D_TOK) -> ClassToken:
    """Unit-norm token vector keyed by ``(name, seed)``."""
    if not name:
        raise TextEncoderError("class name must be non-empty")
    v = np.random.default_rng(_seed_for(name, seed)).standard_normal(d_tok)
    return ClassToken(name, v / np.linalg.norm(v))


@dataclass
class SurrogateEncoderParams:
    A: np.ndarray  # (d, d_tok)
    b: np.ndarray  # (d,)
    seed: int

    @classmethod
    def from_seed(cls, seed: int, d_tok: int = D_TOK, d: int = D_EMB,
                  bias_scale: float = 0.1) -> "SurrogateEncoderParams":
        rng = np.random.default_rng([seed, 0x7E47])
        return cls(rng.standard_normal((d, d_tok)), bias_scale * rng.standard_normal(d), seed)

    @property
    def d_tok(self) -> int:
        return self.A.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    def tensors(self) -> dict:
        return {"encoder.A": self.A, "encoder.b": self.b}


class TextEncoder:
    """Frozen encoder plus the vocabulary seed used to derive class tokens."""

    def __init__(self, encoder_seed: int = 0, vocab_seed: int = 0,
                 d_tok: int = D_TOK, d: int = D_EMB, token_overrides: dict | None = None):
        self.params = SurrogateEncoderParams.from_seed(encoder_seed, d_tok, d)
        self.encoder_seed = encoder_seed
        self.vocab_seed = vocab_seed
        # explicit token vectors for names that must not use the hashed default
        self.token_overrides = {}
        for name, vec in (token_overrides or {}).items():
            v = np.asarray(vec, dtype=np.float64)
            if v.shape != (d_tok,) or not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0:
                raise TextEncoderError(f"token override for {name!r} must be a finite non-zero {d_tok}-vector")
            self.token_overrides[name] = v / np.linalg.norm(v)
        self._tokens: dict[str, np.ndarray] = dict(self.token_overrides)

    def meta(self) -> dict:
        return {"encoder_seed": self.encoder_seed, "vocab_seed": self.vocab_seed,
                "d_tok": self.d_tok, "d": self.d,
                "token_overrides": {k: v.tolist() for k, v in sorted(self.token_overrides.items())}}

    @classmethod
    def from_meta(cls, meta: dict) -> "TextEncoder":
        return cls(int(meta.get("encoder_seed", 0)), int(meta.get("vocab_seed", 0)),
                   int(meta.get("d_tok", D_TOK)), int(meta.get("d", D_EMB)),
                   meta.get("token_overrides") or None)

    @property
    def d(self) -> int:
        return self.params.d

    @property
    def d_tok(self) -> int:
        return self.params.d_tok

    def token(self, name: str) -> np.ndarray:
        if name not in self._tokens:
            self._tokens[name] = class_token(name, self.vocab_seed, self.d_tok).vector
        return self._tokens[name]

    def tokens(self, names) -> np.ndarray:
        return np.stack([self.token(n) for n in names]) if len(names) else np.zeros((0, self.d_tok))

    def template_context(self, words=TEMPLATE_WORDS) -> np.ndarray:
        return self.tokens(list(words))

    def encode(self, context: np.ndarray, tokens: np.ndarray):
        """Embed one prompt per class token sharing ``context``; returns (E, cache)."""
        context = np.asarray(context, dtype=np.float64).reshape(-1, self.d_tok)
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.shape[-1] != self.d_tok:
            raise TextEncoderError(f"token dimension {tokens.shape[-1]} != {self.d_tok}")
        n_tok = context.shape[0] + 1
        pooled = (context.sum(axis=0) + tokens) / n_tok
        z = pooled @ self.params.A.T + self.params.b
        h = np.tanh(z)
        e, norms = normalize_rows(h)
        return e, (n_tok, h, norms)

    def encode_backward(self, cache, dE: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. each context vector (identical rows under mean pooling)."""
        n_tok, h, norms = cache
        dh = normalize_rows_backward(h, norms, dE)
        dz = dh * (1.0 - h * h)
        dpooled = dz @ self.params.A
        row = dpooled.sum(axis=0) / n_tok
        return np.tile(row, (n_tok - 1, 1))


def encode_prompt(encoder: TextEncoder, context, token) -> np.ndarray:
    """Embedding of ``[context..., token]`` as a d-dim unit vector."""
    vec = token.vector if isinstance(token, ClassToken) else token
    return encoder.encode(context, vec)[0][0]


def object_text_embedding(encoder: TextEncoder, token, context=None) -> np.ndarray:
    """Non-compositional object embedding; defaults to the fixed template."""
    if context is None:
        context = encoder.template_context()
    return encode_prompt(encoder, context, token)


@dataclass
class PromptBank:
    """Six motion groups, each with a subject and an object prompt context."""

    subj: np.ndarray  # (groups, L, d_tok)
    obj: np.ndarray  # (groups, L, d_tok)
    vocab_seed: int = 0
    encoder_seed: int = 0

    @classmethod
    def init(cls, rng: np.random.Generator, length: int = PROMPT_LEN, d_tok: int = D_TOK,
             scale: float = 0.02, vocab_seed: int = 0, encoder_seed: int = 0) -> "PromptBank":
        shape = (N_GROUPS, length, d_tok)
        return cls(scale * rng.standard_normal(shape), scale * rng.standard_normal(shape),
                   vocab_seed, encoder_seed)

    @property
    def length(self) -> int:
        return self.subj.shape[1]

    def tensors(self) -> dict:
        out = {}
        for g in range(N_GROUPS):
            out[f"bank.group{g}.subj"] = self.subj[g]
            out[f"bank.group{g}.obj"] = self.obj[g]
        return out

    def meta(self) -> dict:
        return {"vocab_seed": self.vocab_seed, "encoder_seed": self.encoder_seed,
                "prompt_length": self.length, "groups": N_GROUPS}

    @classmethod
    def from_tensors(cls, tensors: dict, meta: dict) -> "PromptBank":
        subj = np.stack([tensors[f"bank.group{g}.subj"] for g in range(N_GROUPS)])
        obj = np.stack([tensors[f"bank.group{g}.obj"] for g in range(N_GROUPS)])
        return cls(subj, obj, int(meta.get("vocab_seed", 0)), int(meta.get("encoder_seed", 0)))

    def copy(self) -> "PromptBank":
        return PromptBank(self.subj.copy(), self.obj.copy(), self.vocab_seed, self.encoder_seed)

    def params(self) -> dict:
        return {"subj": self.subj, "obj": self.obj}


def _check_group(group: int) -> None:
    if not 0 <= group < N_GROUPS:
        raise TextEncoderError(f"group id {group} outside 0..{N_GROUPS - 1}")


def predicate_text_embedding(encoder: TextEncoder, bank: PromptBank, group: int, token) -> np.ndarray:
    """``[enc(subject prompt), enc(object prompt)]`` for one class, 2d-dim."""
    _check_group(group)
    vec = token.vector if isinstance(token, ClassToken) else token
    return np.concatenate([encoder.encode(bank.subj[group], vec)[0][0],
                           encoder.encode(bank.obj[group], vec)[0][0]])


def predicate_table(encoder: TextEncoder, bank: PromptBank, group: int, tokens,
                    compositional: bool = True) -> np.ndarray:
    """Rows of :func:`predicate_text_embedding` for a stack of class tokens.

    With ``compositional=False`` only the subject context is used (d-dim rows).
    """
    _check_group(group)
    es, _ = encoder.encode(bank.subj[group], tokens)
    if not compositional:
        return es
    eo, _ = encoder.encode(bank.obj[group], tokens)
    return np.concatenate([es, eo], axis=1)
