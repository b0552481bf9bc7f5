"""Matrix-factorization collaborative model trained with pairwise ranking.

For every session, each clicked-or-liked item is paired against every
presented-but-not-clicked item plus a few random unpresented negatives; each
pair contributes -log sigmoid(s_pos - s_neg). Scores are user/item factor
dot products. Cold users fall back to the mean user factor, i.e. items keep
their mean training score, so samplers never fail on unseen users.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UnknownIdError
from .synth import POSITIVE_LEVELS, sigmoid

RANDOM_NEGATIVES_PER_RECORD = 2


@dataclass
class CMParameters:
    user_factors: np.ndarray  # (num_users_seen, k)
    item_factors: np.ndarray  # (num_items, k)
    k: int
    user_index: dict[int, int]
    mean_user_factor: np.ndarray = field(default=None)
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.mean_user_factor is None:
            self.mean_user_factor = self.user_factors.mean(axis=0)


def _build_pairs(records, num_items, rng):
    pairs = []  # (user_row, pos_item, neg_item)
    user_index = {}
    for rec in records:
        urow = user_index.setdefault(rec.user_id, len(user_index))
        positives = [i for i, lv in rec.presented if lv in POSITIVE_LEVELS]
        negatives = [i for i, lv in rec.presented if lv not in POSITIVE_LEVELS]
        seen = {i for i, _ in rec.presented} | set(rec.user_history)
        unseen = [i for i in range(num_items) if i not in seen]
        if unseen:
            take = min(RANDOM_NEGATIVES_PER_RECORD, len(unseen))
            negatives = negatives + [int(x) for x in rng.choice(unseen, size=take, replace=False)]
        for p in positives:
            for n in negatives:
                pairs.append((urow, p, n))
    return pairs, user_index


def _pairwise_loss(users, items, pairs):
    u = users[[p[0] for p in pairs]]
    qp = items[[p[1] for p in pairs]]
    qn = items[[p[2] for p in pairs]]
    diff = (u * (qp - qn)).sum(axis=1)
    # stable softplus(-diff)
    return float(np.mean(np.maximum(-diff, 0.0) + np.log1p(np.exp(-np.abs(diff)))))


def train_cm(records, num_items, k=8, epochs=30, lr=0.05, seed=0):
    """Pairwise SGD over (positive, negative) item pairs; deterministic under
    seed. Records the full-pair loss at init and after every epoch."""
    if not records:
        raise ConfigurationError("cannot train collaborative model on empty record list")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    pairs, user_index = _build_pairs(records, num_items, rng)
    users = 0.1 * rng.standard_normal((len(user_index), k))
    items = 0.1 * rng.standard_normal((num_items, k))

    history = [_pairwise_loss(users, items, pairs)]
    order = np.arange(len(pairs))
    for _ in range(epochs):
        rng.shuffle(order)
        for idx in order:
            urow, p, n = pairs[idx]
            u = users[urow]
            d = items[p] - items[n]
            coef = 1.0 / (1.0 + np.exp(float(u @ d)))  # = 1 - sigmoid(margin)
            users[urow] = u + lr * coef * d
            items[p] = items[p] + lr * coef * u
            items[n] = items[n] - lr * coef * u
        history.append(_pairwise_loss(users, items, pairs))

    params = CMParameters(users, items, k, user_index)
    params.loss_history = history
    return params


def cm_score(params, user_id, item_id, normalized=False):
    """Raw factor dot product, or its logistic squashing into (0, 1)."""
    if not 0 <= item_id < params.item_factors.shape[0]:
        raise UnknownIdError(f"unknown item {item_id}")
    row = params.user_index.get(user_id)
    u = params.mean_user_factor if row is None else params.user_factors[row]
    raw = float(u @ params.item_factors[item_id])
    return float(sigmoid(raw)) if normalized else raw


def cm_score_many(params, user_id, item_ids, normalized=False):
    item_ids = np.asarray(item_ids, dtype=np.int64)
    if item_ids.size and (item_ids.min() < 0 or item_ids.max() >= params.item_factors.shape[0]):
        raise UnknownIdError("item id out of range")
    row = params.user_index.get(user_id)
    u = params.mean_user_factor if row is None else params.user_factors[row]
    raw = params.item_factors[item_ids] @ u
    return sigmoid(raw) if normalized else raw


def save_cm(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "k": params.k,
                "user_factors": params.user_factors.tolist(),
                "item_factors": params.item_factors.tolist(),
                "user_index": {str(u): r for u, r in params.user_index.items()},
                "loss_history": params.loss_history,
            },
            fh,
        )


def load_cm(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    params = CMParameters(
        user_factors=np.array(obj["user_factors"], dtype=np.float64),
        item_factors=np.array(obj["item_factors"], dtype=np.float64),
        k=int(obj["k"]),
        user_index={int(u): int(r) for u, r in obj["user_index"].items()},
    )
    params.loss_history = list(obj.get("loss_history", []))
    return params
