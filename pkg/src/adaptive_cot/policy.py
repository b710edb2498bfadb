"""Feature-conditioned autoregressive categorical policy with exact math.

The policy factorizes a sequence probability into per-token conditionals:
the distribution over the next token given previous token ``t`` and
problem features ``phi`` is ``softmax(W_ctx[t] + phi @ W_feat + b)``.
First-order context keeps every log-probability and gradient available in
closed form, so preference-training claims can be checked exactly.

Parameters live in a named-tensor collection (``W_ctx``, ``W_feat``,
``b``, all float64), so checkpoint merging applies to policies directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .checkpoints import (
    NamedTensorCollection,
    load_checkpoint,
    save_checkpoint,
)
from .seeding import derive_rng

__all__ = ["BOS", "EOS", "PolicyError", "ToyPolicy", "sequence_logprob", "sample_response"]

BOS = "<bos>"
EOS = "<eos>"


class PolicyError(ValueError):
    """Invalid policy construction or token input."""


@dataclass
class ToyPolicy:
    vocab: tuple[str, ...]
    w_ctx: np.ndarray   # (V, V) row = previous-token context
    w_feat: np.ndarray  # (F, V) feature conditioning
    b: np.ndarray       # (V,) bias

    def __post_init__(self) -> None:
        self.vocab = tuple(self.vocab)
        if len(set(self.vocab)) != len(self.vocab):
            raise PolicyError("vocab contains duplicate symbols")
        for marker in (BOS, EOS):
            if marker not in self.vocab:
                raise PolicyError(f"vocab must contain {marker!r}")
        v = len(self.vocab)
        self.w_ctx = np.ascontiguousarray(self.w_ctx, dtype=np.float64)
        self.w_feat = np.ascontiguousarray(self.w_feat, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.w_ctx.shape != (v, v):
            raise PolicyError(f"W_ctx must be ({v}, {v}), got {self.w_ctx.shape}")
        if self.w_feat.ndim != 2 or self.w_feat.shape[1] != v:
            raise PolicyError(f"W_feat must be (feature_dim, {v}), got {self.w_feat.shape}")
        if self.b.shape != (v,):
            raise PolicyError(f"b must be ({v},), got {self.b.shape}")
        self._index = {token: i for i, token in enumerate(self.vocab)}

    # -- construction helpers ------------------------------------------------

    @classmethod
    def zeros(cls, vocab, feature_dim: int) -> "ToyPolicy":
        v = len(tuple(vocab))
        return cls(tuple(vocab), np.zeros((v, v)), np.zeros((feature_dim, v)), np.zeros(v))

    @classmethod
    def random(cls, vocab, feature_dim: int, scale: float = 1.0, seed: int = 0) -> "ToyPolicy":
        rng = derive_rng(seed, "toy-policy-init")
        v = len(tuple(vocab))
        return cls(
            tuple(vocab),
            scale * rng.standard_normal((v, v)),
            scale * rng.standard_normal((feature_dim, v)),
            scale * rng.standard_normal(v),
        )

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.vocab, self.w_ctx.copy(), self.w_feat.copy(), self.b.copy())

    # -- vocabulary ----------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def feature_dim(self) -> int:
        return self.w_feat.shape[0]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def encode(self, tokens) -> np.ndarray:
        try:
            return np.array([self._index[t] for t in tokens], dtype=np.intp)
        except KeyError as exc:
            raise PolicyError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.vocab[int(i)] for i in ids]

    def same_interface(self, other: "ToyPolicy") -> bool:
        return self.vocab == other.vocab and self.feature_dim == other.feature_dim

    # -- distributions -------------------------------------------------------

    def _check_features(self, features) -> np.ndarray:
        phi = np.asarray(features, dtype=np.float64)
        if phi.shape != (self.feature_dim,):
            raise PolicyError(f"features must have shape ({self.feature_dim},), got {phi.shape}")
        return phi

    def step_logits(self, prev_ids: np.ndarray, features) -> np.ndarray:
        """Logits for each step given previous-token ids, shape (m, V)."""
        phi = self._check_features(features)
        return self.w_ctx[prev_ids] + phi @ self.w_feat + self.b

    def next_distribution(self, prev_token: str, features) -> np.ndarray:
        """Probability vector over the vocabulary for one step."""
        logits = self.step_logits(self.encode([prev_token]), features)[0]
        return _softmax(logits)

    # -- persistence ---------------------------------------------------------

    def to_collection(self) -> NamedTensorCollection:
        return NamedTensorCollection.from_arrays(
            {"W_ctx": self.w_ctx, "W_feat": self.w_feat, "b": self.b},
            metadata={"vocab": json.dumps(list(self.vocab)), "kind": "toy-policy"},
        )

    @classmethod
    def from_collection(cls, collection: NamedTensorCollection, vocab=None) -> "ToyPolicy":
        if vocab is None:
            raw = collection.metadata.get("vocab")
            if raw is None:
                raise PolicyError("collection has no vocab metadata; pass vocab explicitly")
            vocab = json.loads(raw)
        return cls(
            tuple(vocab),
            collection["W_ctx"].data.astype(np.float64),
            collection["W_feat"].data.astype(np.float64),
            collection["b"].data.astype(np.float64),
        )

    def save(self, path) -> None:
        save_checkpoint(self.to_collection(), path)

    @classmethod
    def load(cls, path) -> "ToyPolicy":
        return cls.from_collection(load_checkpoint(path))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _steps(policy: ToyPolicy, tokens) -> tuple[np.ndarray, np.ndarray]:
    ids = policy.encode(tokens)
    if ids.size == 0:
        raise PolicyError("sequence must be nonempty")
    prev = np.concatenate(([policy.bos_id], ids[:-1]))
    return prev, ids


def sequence_logprob(policy: ToyPolicy, features, tokens) -> float:
    """Exact log-probability of a token sequence given features.

    The begin-of-sequence token is the context for the first step. Always
    finite and <= 0.
    """
    prev, ids = _steps(policy, tokens)
    logp = _log_softmax(policy.step_logits(prev, features))
    return float(logp[np.arange(ids.size), ids].sum())


def sequence_logprob_grad(policy: ToyPolicy, features, tokens):
    """Log-probability plus its exact gradient w.r.t. (W_ctx, W_feat, b).

    Per step the logits gradient is ``onehot(y) - softmax(logits)``;
    context rows accumulate by previous-token id and the feature matrix
    gets the outer product with phi.
    """
    phi = policy._check_features(features)
    prev, ids = _steps(policy, tokens)
    logits = policy.step_logits(prev, phi)
    logp = _log_softmax(logits)
    residual = -np.exp(logp)  # (m, V)
    residual[np.arange(ids.size), ids] += 1.0

    g_ctx = np.zeros_like(policy.w_ctx)
    np.add.at(g_ctx, prev, residual)
    col = residual.sum(axis=0)
    g_feat = np.outer(phi, col)
    g_b = col
    value = float(logp[np.arange(ids.size), ids].sum())
    return value, (g_ctx, g_feat, g_b)


def sample_response(
    policy: ToyPolicy,
    features,
    temperature: float = 1.0,
    max_len: int = 512,
    seed: int = 0,
) -> list[str]:
    """Ancestral sampling until end-of-sequence or ``max_len`` tokens.

    Deterministic given the seed. The terminating end-of-sequence marker
    is not included in the returned tokens. Temperatures near zero
    approach greedy argmax decoding.
    """
    if temperature <= 0:
        raise PolicyError("temperature must be > 0")
    if max_len < 1:
        raise PolicyError("max_len must be >= 1")
    phi = policy._check_features(features)
    rng = derive_rng(seed, "sample-response")
    out: list[int] = []
    prev = policy.bos_id
    for _ in range(max_len):
        logits = policy.step_logits(np.array([prev], dtype=np.intp), phi)[0]
        probs = _softmax(logits / temperature)
        token = int(rng.choice(policy.vocab_size, p=probs))
        if token == policy.eos_id:
            break
        out.append(token)
        prev = token
    return policy.decode(out)
