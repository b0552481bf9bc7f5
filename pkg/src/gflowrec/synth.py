"""Synthetic recommendation universe: items and users as unit latent vectors,
ground-truth utilities, and value-differentiated feedback sessions.

Feedback levels, from strongest to weakest: liked, clicked, presented.
Items a user never saw are implicitly "unpresented". Sessions are produced by
a behavior policy that mixes utility-proportional exposure with uniform
noise, so all feedback levels occur and utility ordering is recoverable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DatasetFormatError

FEEDBACK_LEVELS = ("liked", "clicked", "presented")
POSITIVE_LEVELS = ("liked", "clicked")

# behavior policy: P(exposure) = 0.7 * utility-proportional + 0.3 * uniform
EXPOSURE_UTILITY_WEIGHT = 0.7
UTILITY_TEMPERATURE = 4.0
LIKED_UTILITY_THRESHOLD = 0.8


@dataclass
class ItemUniverse:
    num_items: int
    embedding_dim: int
    item_embeddings: np.ndarray  # (num_items, embedding_dim), unit-norm rows
    seed: int


@dataclass
class SessionRecord:
    user_id: int
    user_history: list[int]  # chronologically earlier clicked items
    presented: list[tuple[int, str]]  # (item_id, feedback_level)
    target_item: int

    def feedback_of(self, item_id: int) -> str:
        for iid, level in self.presented:
            if iid == item_id:
                return level
        return "unpresented"

    def validate(self):
        ids = [iid for iid, _ in self.presented]
        if len(set(ids)) != len(ids):
            raise DatasetFormatError("duplicate item ids in presented set")
        if self.target_item not in ids:
            raise DatasetFormatError("target_item not in presented set")
        for _, level in self.presented:
            if level not in FEEDBACK_LEVELS:
                raise DatasetFormatError(f"unknown feedback level {level!r}")
        if self.feedback_of(self.target_item) not in POSITIVE_LEVELS:
            raise DatasetFormatError("target_item lacks positive feedback")
        if len(self.user_history) < 1:
            raise DatasetFormatError("user_history must be non-empty")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class GroundTruthUtility:
    """utility(user, item) = logistic(4 * <user_latent, item_latent>).

    The temperature spreads scores over (0, 1) instead of clumping near 0.5.
    """

    matrix: np.ndarray = field(repr=False)  # (num_users, num_items)

    def utility(self, user_id: int, item_id: int) -> float:
        return float(self.matrix[user_id, item_id])

    def row(self, user_id: int) -> np.ndarray:
        return self.matrix[user_id]


def utilities(universe: ItemUniverse, user_latents: np.ndarray) -> GroundTruthUtility:
    dots = user_latents @ universe.item_embeddings.T
    return GroundTruthUtility(sigmoid(UTILITY_TEMPERATURE * dots))


def _unit_rows(rng, n, dim):
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def generate_universe(num_items, num_users, dim, seed):
    """Deterministic (seeded) universe: isotropic Gaussian latents, row-normalized.

    Returns (ItemUniverse, user_latents).
    """
    if num_items < 2:
        raise ConfigurationError(f"num_items must be >= 2, got {num_items}")
    if dim < 2:
        raise ConfigurationError(f"dim must be >= 2, got {dim}")
    if num_users < 1:
        raise ConfigurationError(f"num_users must be >= 1, got {num_users}")
    rng = np.random.default_rng(seed)
    items = _unit_rows(rng, num_items, dim)
    users = _unit_rows(rng, num_users, dim)
    return ItemUniverse(num_items, dim, items, seed), users


def _mixture_draw(rng, candidates, util_row):
    """One exposure draw from the behavior policy over `candidates`."""
    if rng.random() < EXPOSURE_UTILITY_WEIGHT:
        w = util_row[candidates]
        return int(rng.choice(candidates, p=w / w.sum()))
    return int(rng.choice(candidates))


def _draw_feedback(rng, u):
    if u > LIKED_UTILITY_THRESHOLD and rng.random() < u:
        return "liked"
    if rng.random() < u:
        return "clicked"
    return "presented"


def _draw_history(rng, util_row, length, num_items):
    """Clicked-item history: behavior-policy exposures accepted with
    probability = utility, distinct items."""
    history = []
    taken = set()
    attempts = 0
    while len(history) < length:
        attempts += 1
        candidates = np.array([i for i in range(num_items) if i not in taken])
        item = _mixture_draw(rng, candidates, util_row)
        if rng.random() < util_row[item]:
            history.append(item)
            taken.add(item)
        elif attempts > 200 * length:
            # degenerate all-low-utility user; take the best remaining item
            item = int(candidates[np.argmax(util_row[candidates])])
            history.append(item)
            taken.add(item)
    return history


def generate_sessions(universe, user_latents, session_size, history_len, seed):
    """One session per user. Each session is resampled until it has at least
    one clicked-or-liked item; the target is drawn uniformly from them.
    History items are disjoint from the presented set (they happened earlier).
    """
    if session_size < 2:
        raise ConfigurationError(f"session_size must be >= 2, got {session_size}")
    if history_len < 1:
        raise ConfigurationError(f"history_len must be >= 1, got {history_len}")
    if session_size + history_len > universe.num_items:
        raise ConfigurationError(
            f"session_size {session_size} + history_len {history_len} exceeds "
            f"universe of {universe.num_items} items"
        )
    util = utilities(universe, user_latents).matrix
    rng = np.random.default_rng(seed)
    records = []
    for uid in range(user_latents.shape[0]):
        row = util[uid]
        history = _draw_history(rng, row, history_len, universe.num_items)
        eligible = [i for i in range(universe.num_items) if i not in set(history)]
        for _ in range(1000):
            presented = []
            remaining = list(eligible)
            for _ in range(session_size):
                item = _mixture_draw(rng, np.array(remaining), row)
                remaining.remove(item)
                presented.append((item, _draw_feedback(rng, row[item])))
            positives = [i for i, lv in presented if lv in POSITIVE_LEVELS]
            if positives:
                break
        else:
            raise ConfigurationError(f"user {uid}: no positive feedback after 1000 resamples")
        target = int(rng.choice(positives))
        records.append(SessionRecord(uid, history, presented, target))
    return records


# ---------------------------------------------------------------------------
# dataset and universe files


def write_dataset(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "user_id": rec.user_id,
                        "user_history": rec.user_history,
                        "presented": [[iid, lv] for iid, lv in rec.presented],
                        "target_item": rec.target_item,
                    }
                )
                + "\n"
            )


def read_dataset(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = SessionRecord(
                    user_id=int(obj["user_id"]),
                    user_history=[int(i) for i in obj["user_history"]],
                    presented=[(int(i), str(lv)) for i, lv in obj["presented"]],
                    target_item=int(obj["target_item"]),
                )
                rec.validate()
            except DatasetFormatError as exc:
                raise DatasetFormatError(str(exc), line=lineno) from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"malformed record: {exc}", line=lineno) from exc
            records.append(rec)
    return records


def save_universe(universe, user_latents, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "num_items": universe.num_items,
                "embedding_dim": universe.embedding_dim,
                "seed": universe.seed,
                "item_embeddings": universe.item_embeddings.tolist(),
                "user_latents": user_latents.tolist(),
            },
            fh,
        )


def load_universe(path):
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    universe = ItemUniverse(
        num_items=int(obj["num_items"]),
        embedding_dim=int(obj["embedding_dim"]),
        item_embeddings=np.array(obj["item_embeddings"], dtype=np.float64),
        seed=int(obj["seed"]),
    )
    return universe, np.array(obj["user_latents"], dtype=np.float64)


def pooled_history(universe: ItemUniverse, history) -> np.ndarray:
    """Mean-pooled item embeddings of a history; zero vector when empty."""
    if len(history) == 0:
        return np.zeros(universe.embedding_dim)
    return universe.item_embeddings[np.asarray(history, dtype=np.int64)].mean(axis=0)
