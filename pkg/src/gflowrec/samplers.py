"""Trajectory-set construction: the positive item plus N-1 augmented items
chosen by one of four strategies (interaction log, random, CM curriculum,
on-policy beam search).

Every strategy returns exactly N-1 distinct non-target items; shortfalls are
topped up with random sampling and logged. The curriculum strategy slides a
contiguous window over a score-sorted candidate pool, from the easy (lowest
collaborative score) end at epoch 0 to the hard end at the final epoch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cm import cm_score_many
from .errors import ConfigurationError
from .synth import POSITIVE_LEVELS

log = logging.getLogger(__name__)

STRATEGIES = ("interaction_log", "random", "cm_curriculum", "on_policy")
CONFIDENCE_SELECTIONS = ("none", "min", "max")


@dataclass
class SamplerConfig:
    strategy: str = "cm_curriculum"
    n_trajectories: int = 4  # N, including the positive
    total_epochs: int = 1  # curriculum horizon
    confidence_selection: str = "none"
    pool_multiplier: int = 2  # candidate pool size = multiplier * N - 1
    beam_width: int = 16

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown sampler strategy {self.strategy!r}")
        if self.confidence_selection not in CONFIDENCE_SELECTIONS:
            raise ConfigurationError(
                f"unknown confidence selection {self.confidence_selection!r}"
            )
        if self.n_trajectories < 1:
            raise ConfigurationError("n_trajectories must be >= 1")
        if self.pool_multiplier < 1:
            raise ConfigurationError("pool_multiplier must be >= 1")


def _fill_random(chosen, record, num_items, rng, needed, why):
    if needed <= 0:
        return chosen
    log.debug("sampler shortfall (%s): filling %d items randomly", why, needed)
    banned = set(chosen) | {record.target_item}
    eligible = np.array([i for i in range(num_items) if i not in banned])
    extra = rng.choice(eligible, size=needed, replace=False)
    return chosen + [int(i) for i in extra]


def sample_random(record, n, num_items, rng):
    """N-1 distinct items, uniform over everything except the target."""
    if num_items < n:
        raise ConfigurationError(f"universe of {num_items} items cannot host N={n}")
    eligible = np.array([i for i in range(num_items) if i != record.target_item])
    return [int(i) for i in rng.choice(eligible, size=n - 1, replace=False)]


def sample_from_log(record, n, num_items, rng):
    """N-1 presented items other than the target, clicked tier before
    presented-only tier, uniform within a tier."""
    clicked = [i for i, lv in record.presented if lv in POSITIVE_LEVELS and i != record.target_item]
    shown = [i for i, lv in record.presented if lv not in POSITIVE_LEVELS]
    chosen = []
    for tier in (clicked, shown):
        take = min(n - 1 - len(chosen), len(tier))
        if take > 0:
            chosen += [int(i) for i in rng.choice(np.array(tier), size=take, replace=False)]
    return _fill_random(chosen, record, num_items, rng, n - 1 - len(chosen), "interaction log")


def sample_cm_curriculum(record, n, epoch, total_epochs, cm, num_items, rng, pool_multiplier=2):
    """Pool of (multiplier*N - 1) distinct non-target candidates, ranked by
    collaborative score ascending; pick the contiguous window of N-1 whose
    start slides linearly with epoch/total_epochs from easiest to hardest."""
    if cm is None:
        raise ConfigurationError("cm_curriculum sampling needs a trained collaborative model")
    if total_epochs < 1:
        raise ConfigurationError("total_epochs must be >= 1")
    pool_size = min(pool_multiplier * n - 1, num_items - 1)
    eligible = np.array([i for i in range(num_items) if i != record.target_item])
    pool = [int(i) for i in rng.choice(eligible, size=pool_size, replace=False)]
    scores = cm_score_many(cm, record.user_id, pool)
    ranked = [item for _, item in sorted(zip(scores, pool), key=lambda t: (t[0], t[1]))]
    window = n - 1
    positions = len(ranked) - window + 1
    start = min(int(np.floor((epoch / total_epochs) * positions)), positions - 1)
    chosen = ranked[start : start + window]
    return _fill_random(chosen, record, num_items, rng, n - 1 - len(chosen), "small pool")


def sample_on_policy(record, n, params, universe, index, rng, beam_width=16,
                     confidence_selection="none"):
    """Beam-search the current policy for candidates; keep the top N-1 by
    beam score, or the lowest/highest-confidence pool members for the
    min/max selection variants."""
    from .inference import rank_items

    pool = rank_items(params, universe, record.user_history, index, k=beam_width,
                      beam_width=beam_width)
    pool = [(item, score) for item, score in pool if item != record.target_item]
    if confidence_selection == "min":
        pool.sort(key=lambda t: (t[1], t[0]))
    else:  # "none" and "max" both take the highest-confidence candidates
        pool.sort(key=lambda t: (-t[1], t[0]))
    chosen = [int(item) for item, _ in pool[: n - 1]]
    return _fill_random(chosen, record, universe.num_items, rng,
                        n - 1 - len(chosen), "beam candidates")


def sample_augmented(record, cfg: SamplerConfig, epoch, num_items, rng, cm=None,
                     params=None, universe=None, index=None):
    """Dispatch on cfg.strategy; returns the N-1 augmented item ids."""
    n = cfg.n_trajectories
    if n == 1:
        return []
    if cfg.strategy == "random":
        return sample_random(record, n, num_items, rng)
    if cfg.strategy == "interaction_log":
        return sample_from_log(record, n, num_items, rng)
    if cfg.strategy == "cm_curriculum":
        return sample_cm_curriculum(
            record, n, epoch, cfg.total_epochs, cm, num_items, rng, cfg.pool_multiplier
        )
    if params is None or universe is None or index is None:
        raise ConfigurationError("on_policy sampling needs a policy, universe, and tokenizer")
    return sample_on_policy(
        record, n, params, universe, index, rng, cfg.beam_width, cfg.confidence_selection
    )
