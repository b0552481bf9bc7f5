"""Constrained beam-search inference and evaluation metrics.

Beam expansions are restricted to the identifier trie, so only decodable
token sequences are ever emitted. Beam scores are cumulative raw next-token
log-probabilities (no renormalization over the allowed set at base levels),
which makes exhaustive-width beam search equal to brute-force ranking of all
identifiers by trajectory log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from . import policy as P
from .errors import ConfigurationError


@dataclass
class RankedList:
    user_id: object
    items: list  # [(item_id, log_score)], scores non-increasing


def beam_search(params, user_context, index, beam_width, k):
    """Top-k items for one context. `beam_width` bounds the number of live
    partial hypotheses per step; completed identifiers are set aside and
    ranked at the end. Ties break lexicographically on token sequences."""
    if beam_width < k:
        raise ConfigurationError(f"beam_width {beam_width} < k {k}")
    u_enc = P.user_encoding_rows(params, user_context)
    active = [(0.0, ())]  # (cumulative logprob, prefix)
    completed = []
    for level in range(index.max_identifier_len):
        if not active:
            break
        slots = np.full((len(active), params.cfg.num_levels), -1, dtype=np.int64)
        for r, (_, prefix) in enumerate(active):
            slots[r, : len(prefix)] = prefix
        # inference is forward-only, so the tiled context need not track grads
        u_rows = engine.constant(np.repeat(u_enc.value, len(active), axis=0))
        hidden = P.state_hidden_rows(params, u_rows, slots)
        if level < index.base_levels:
            limits = None
        else:
            limits = np.array([len(index.valid_next(pref)) for _, pref in active])
        logprobs = P.level_logprob_rows(params, hidden, level, limits).value
        nxt = []
        for r, (score, prefix) in enumerate(active):
            for tok in index.valid_next(prefix):
                cand = (score + float(logprobs[r, tok]), prefix + (tok,))
                if index.is_leaf(cand[1]):
                    completed.append(cand)
                else:
                    nxt.append(cand)
        nxt.sort(key=lambda c: (-c[0], c[1]))
        active = nxt[:beam_width]
    completed.sort(key=lambda c: (-c[0], c[1]))
    return [(index.decode(tokens), score) for score, tokens in completed[:k]]


def rank_items(params, universe, history, index, k, beam_width=None):
    from .synth import pooled_history

    bw = beam_width if beam_width is not None else max(2 * k, k)
    ctx = pooled_history(universe, history)
    return beam_search(params, ctx, index, bw, k)


# ---------------------------------------------------------------------------
# metrics


def recall_at_k(ranked_lists, targets, k):
    """Fraction of users whose target is in their top-k."""
    hits = 0
    for rl, target in zip(ranked_lists, targets):
        top = [item for item, _ in rl.items[:k]]
        hits += target in top
    return hits / len(ranked_lists) if ranked_lists else 0.0


def ndcg_at_k(ranked_lists, targets, k):
    """Binary-relevance NDCG: 1/log2(1+rank) when the target is ranked, else 0."""
    total = 0.0
    for rl, target in zip(ranked_lists, targets):
        for rank, (item, _) in enumerate(rl.items[:k], start=1):
            if item == target:
                total += 1.0 / np.log2(1 + rank)
                break
    return total / len(ranked_lists) if ranked_lists else 0.0


def value_weighted_ndcg(ranked_lists, utility, k):
    """Graded NDCG with gain = ground-truth utility; the ideal list is the
    user's k highest-utility items. Degenerate all-zero gains score 0."""
    if utility is None:
        raise ConfigurationError("value-weighted NDCG needs ground-truth utilities")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    total = 0.0
    for rl in ranked_lists:
        row = utility.row(rl.user_id)
        gains = np.array([row[item] for item, _ in rl.items[:k]])
        dcg = float((gains * discounts[: len(gains)]).sum())
        ideal = np.sort(row)[::-1][:k]
        idcg = float((ideal * discounts[: len(ideal)]).sum())
        total += dcg / idcg if idcg > 0 else 0.0
    return total / len(ranked_lists) if ranked_lists else 0.0


# ---------------------------------------------------------------------------
# reports

MAX_ENUMERABLE = 65536


def flow_proportionality_report(params, reward_table, user_context=None, limits_by_identifier=None):
    """Exact proportionality check on an enumerable identifier space.

    Enumerates the reward table's identifiers, computes the model probability
    of each, and compares against the reward-normalized target distribution.
    Any probability mass on sequences outside the table counts toward the
    total variation distance.
    """
    m = len(reward_table)
    if m == 0:
        raise ConfigurationError("empty reward table")
    if m > MAX_ENUMERABLE:
        raise ConfigurationError(
            f"{m} identifiers exceed the enumerable limit {MAX_ENUMERABLE}; "
            "verify proportionality on a smaller level/vocab configuration"
        )
    ctx = np.zeros(params.cfg.input_dim) if user_context is None else user_context
    idents = sorted(reward_table.keys())
    rewards = np.array([reward_table[i] for i in idents], dtype=np.float64)
    if np.any(rewards <= 0):
        raise ConfigurationError("proportionality target needs positive rewards")
    logps = np.array(
        [
            P.trajectory_logprob(
                params, ctx, ident,
                None if limits_by_identifier is None else limits_by_identifier[ident],
            )
            for ident in idents
        ]
    )
    probs = np.exp(logps)
    target = rewards / rewards.sum()
    leftover = max(0.0, 1.0 - float(probs.sum()))
    tv = 0.5 * (float(np.abs(probs - target).sum()) + leftover)
    pearson = float(np.corrcoef(probs, target)[0, 1]) if m > 1 else 1.0
    z_est = float(np.exp(_log_z_value(params, ctx)))
    return {
        "num_identifiers": m,
        "prob_mass": float(probs.sum()),
        "tv_distance": tv,
        "pearson_r": pearson,
        "z_estimate": z_est,
        "reward_sum": float(rewards.sum()),
        "z_relative_error": abs(z_est - float(rewards.sum())) / float(rewards.sum()),
    }


def _log_z_value(params, user_context):
    u_enc = P.user_encoding_rows(params, user_context)
    return float(P.log_z_rows(params, u_enc).value[0])


def diversity_report(ranked_lists, cm=None, num_items=None, bins=50):
    """Frequency spread of recommendations plus collaborative-score spread.

    The KL term compares the histogram of per-item recommendation
    frequencies against a moment-matched normal over the same bins
    (smoothed); it is 0 when the frequencies are constant.
    """
    if not ranked_lists:
        raise ConfigurationError("diversity report needs at least one ranked list")
    if num_items is None:
        num_items = 1 + max(item for rl in ranked_lists for item, _ in rl.items)
    counts = np.zeros(num_items)
    for rl in ranked_lists:
        for item, _ in rl.items:
            counts[item] += 1
    freqs = counts / counts.sum()
    std = float(freqs.std())
    if std < 1e-12:
        kl = 0.0
    else:
        hist, edges = np.histogram(freqs, bins=bins)
        p = hist / hist.sum()
        centers = 0.5 * (edges[:-1] + edges[1:])
        q = np.exp(-0.5 * ((centers - freqs.mean()) / std) ** 2)
        q = q / q.sum()
        eps = 1e-9
        p, q = p + eps, q + eps
        p, q = p / p.sum(), q / q.sum()
        kl = float((p * np.log(p / q)).sum())
    report = {
        "frequency_std": std,
        "frequency_kl_to_normal": kl,
        "distinct_items": int((counts > 0).sum()),
    }
    if cm is not None:
        from .cm import cm_score_many

        scores = []
        for rl in ranked_lists:
            items = [item for item, _ in rl.items]
            scores.extend(cm_score_many(cm, rl.user_id, items, normalized=True).tolist())
        scores = np.array(scores)
        report.update(
            cm_score_mean=float(scores.mean()),
            cm_score_range=float(scores.max() - scores.min()),
            cm_score_std=float(scores.std()),
        )
    return report
