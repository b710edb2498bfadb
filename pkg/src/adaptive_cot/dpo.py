"""Preference optimization on the toy policy, with exact gradients.

The objective scores each (chosen, rejected) pair by the beta-scaled
difference of policy-vs-reference log-ratios and minimizes the negative
log-sigmoid of that margin, computed in a softplus form that is stable
for any margin. Gradients are closed-form, so they can be validated
against finite differences to tight tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .checkpoints import NamedTensorCollection
from .policy import EOS, ToyPolicy, sequence_logprob, sequence_logprob_grad
from .prefs import PreferencePair
from .seeding import derive_rng

logger = logging.getLogger(__name__)

__all__ = [
    "MAX_SEQUENCE_TOKENS",
    "DpoPair",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "pairs_to_batch",
    "dpo_loss",
    "dpo_grad",
    "sft_loss",
    "sft_grad",
    "train",
]

# Pairs longer than this are rejected outright rather than truncated.
MAX_SEQUENCE_TOKENS = 4096


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class DpoPair:
    """One training tuple: problem features, chosen and rejected tokens."""

    features: np.ndarray
    chosen: tuple[str, ...]
    rejected: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.chosen or not self.rejected:
            raise ValueError("chosen and rejected sequences must be nonempty")
        for side in (self.chosen, self.rejected):
            if len(side) > MAX_SEQUENCE_TOKENS:
                raise ValueError(
                    f"sequence of {len(side)} tokens exceeds the {MAX_SEQUENCE_TOKENS}-token limit"
                )


def pairs_to_batch(
    pairs: list[PreferencePair],
    features_by_problem: dict[str, np.ndarray],
    append_eos: bool = True,
) -> list[DpoPair]:
    """Encode preference pairs into training tuples.

    Texts are whitespace-tokenized; an end-of-sequence marker is appended
    so the policy learns where to stop.
    """
    batch = []
    for pair in pairs:
        phi = features_by_problem[pair.problem_id]
        chosen = tuple(pair.chosen.text.split()) + ((EOS,) if append_eos else ())
        rejected = tuple(pair.rejected.text.split()) + ((EOS,) if append_eos else ())
        batch.append(DpoPair(features=np.asarray(phi, dtype=np.float64), chosen=chosen, rejected=rejected))
    return batch


def _check_pairing(policy: ToyPolicy, ref_policy: ToyPolicy, batch) -> None:
    if not policy.same_interface(ref_policy):
        raise ValueError("policy and reference must share vocab and feature_dim")
    if not batch:
        raise ValueError("batch must be nonempty")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _margins(policy, ref_policy, batch, beta) -> np.ndarray:
    m = np.empty(len(batch))
    for i, pair in enumerate(batch):
        ratio_w = sequence_logprob(policy, pair.features, pair.chosen) - sequence_logprob(
            ref_policy, pair.features, pair.chosen
        )
        ratio_l = sequence_logprob(policy, pair.features, pair.rejected) - sequence_logprob(
            ref_policy, pair.features, pair.rejected
        )
        m[i] = beta * (ratio_w - ratio_l)
    return m


def dpo_loss(policy: ToyPolicy, ref_policy: ToyPolicy, batch: list[DpoPair], beta: float) -> float:
    """Mean ``softplus(-margin)`` over the batch; equals ln 2 when the
    policy matches the reference."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    _check_pairing(policy, ref_policy, batch)
    return float(_softplus(-_margins(policy, ref_policy, batch, beta)).mean())


def _dpo_grad_arrays(policy, ref_policy, batch, beta, ref_logratios=None):
    """Loss and gradient arrays (W_ctx, W_feat, b), batch-averaged.

    ``ref_logratios`` optionally carries precomputed reference
    log-probabilities as (chosen, rejected) arrays to avoid recomputing
    the frozen side every step.
    """
    g_ctx = np.zeros_like(policy.w_ctx)
    g_feat = np.zeros_like(policy.w_feat)
    g_b = np.zeros_like(policy.b)
    losses = np.empty(len(batch))
    for i, pair in enumerate(batch):
        lp_w, grad_w = sequence_logprob_grad(policy, pair.features, pair.chosen)
        lp_l, grad_l = sequence_logprob_grad(policy, pair.features, pair.rejected)
        if ref_logratios is None:
            ref_w = sequence_logprob(ref_policy, pair.features, pair.chosen)
            ref_l = sequence_logprob(ref_policy, pair.features, pair.rejected)
        else:
            ref_w, ref_l = ref_logratios[0][i], ref_logratios[1][i]
        margin = beta * ((lp_w - ref_w) - (lp_l - ref_l))
        losses[i] = _softplus(-margin)
        # d/dtheta softplus(-m) = -sigmoid(-m) * dm/dtheta
        weight = -float(_sigmoid(-margin)) * beta
        g_ctx += weight * (grad_w[0] - grad_l[0])
        g_feat += weight * (grad_w[1] - grad_l[1])
        g_b += weight * (grad_w[2] - grad_l[2])
    n = len(batch)
    return float(losses.mean()), (g_ctx / n, g_feat / n, g_b / n)


def dpo_grad(policy: ToyPolicy, ref_policy: ToyPolicy, batch: list[DpoPair], beta: float) -> NamedTensorCollection:
    """Exact gradient of :func:`dpo_loss` w.r.t. the policy parameters,
    as a collection with the same schema as the parameters."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    _check_pairing(policy, ref_policy, batch)
    _, (g_ctx, g_feat, g_b) = _dpo_grad_arrays(policy, ref_policy, batch, beta)
    return NamedTensorCollection.from_arrays({"W_ctx": g_ctx, "W_feat": g_feat, "b": g_b})


def sft_loss(policy: ToyPolicy, chosen_batch) -> float:
    """Mean negative log-likelihood of (features, tokens) sequences."""
    if not chosen_batch:
        raise ValueError("batch must be nonempty")
    values = [sequence_logprob(policy, phi, tokens) for phi, tokens in _as_sft(chosen_batch)]
    return float(-np.mean(values))


def _sft_grad_arrays(policy, chosen_batch):
    g_ctx = np.zeros_like(policy.w_ctx)
    g_feat = np.zeros_like(policy.w_feat)
    g_b = np.zeros_like(policy.b)
    values = []
    items = list(_as_sft(chosen_batch))
    for phi, tokens in items:
        lp, (d_ctx, d_feat, d_b) = sequence_logprob_grad(policy, phi, tokens)
        values.append(lp)
        g_ctx -= d_ctx
        g_feat -= d_feat
        g_b -= d_b
    n = len(items)
    return float(-np.mean(values)), (g_ctx / n, g_feat / n, g_b / n)


def sft_grad(policy: ToyPolicy, chosen_batch) -> NamedTensorCollection:
    """Exact gradient of :func:`sft_loss`."""
    if not chosen_batch:
        raise ValueError("batch must be nonempty")
    _, (g_ctx, g_feat, g_b) = _sft_grad_arrays(policy, chosen_batch)
    return NamedTensorCollection.from_arrays({"W_ctx": g_ctx, "W_feat": g_feat, "b": g_b})


def _as_sft(batch):
    """Accept either (features, tokens) tuples or DpoPair chosen sides."""
    for item in batch:
        if isinstance(item, DpoPair):
            yield item.features, item.chosen
        else:
            phi, tokens = item
            yield np.asarray(phi, dtype=np.float64), tuple(tokens)


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    learning_rate: float = 0.1
    epochs: int = 2
    batch_size: int = 32
    seed: int = 0
    max_grad_norm: float | None = None

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class TrainResult:
    policy: ToyPolicy
    loss_history: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)  # {epoch, batch, loss} records


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return tuple(g * scale for g in grads)


def train(
    policy: ToyPolicy,
    dataset: list[DpoPair],
    cfg: TrainConfig,
    objective: str = "dpo",
) -> TrainResult:
    """Plain seeded gradient descent over shuffled preference pairs.

    The reference policy is a frozen copy of the input. ``objective`` is
    "dpo" (pairwise preference) or "sft" (likelihood of chosen sides
    only). Fully deterministic given (cfg.seed, dataset order); aborts if
    the loss becomes non-finite.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    if objective not in ("dpo", "sft"):
        raise ValueError(f"unknown objective {objective!r}")

    current = policy.copy()
    ref = policy.copy()
    ref_cache = None
    if objective == "dpo":
        ref_w = np.array([sequence_logprob(ref, p.features, p.chosen) for p in dataset])
        ref_l = np.array([sequence_logprob(ref, p.features, p.rejected) for p in dataset])

    rng = derive_rng(cfg.seed, "train-shuffle")
    result = TrainResult(policy=current)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for batch_idx, start in enumerate(range(0, len(dataset), cfg.batch_size)):
            take = order[start : start + cfg.batch_size]
            batch = [dataset[i] for i in take]
            if objective == "dpo":
                ref_cache = (ref_w[take], ref_l[take])
                loss, grads = _dpo_grad_arrays(current, ref, batch, cfg.beta, ref_cache)
            else:
                loss, grads = _sft_grad_arrays(current, batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {batch_idx}"
                )
            grads = _clip(grads, cfg.max_grad_norm)
            current.w_ctx -= cfg.learning_rate * grads[0]
            current.w_feat -= cfg.learning_rate * grads[1]
            current.b -= cfg.learning_rate * grads[2]
            result.loss_history.append(loss)
            result.log.append({"epoch": epoch, "batch": batch_idx, "loss": loss})
    return result
