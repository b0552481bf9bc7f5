"""Per-trajectory reward signals and their fusion into one positive scalar.

Signals:
  r_a    interaction level: liked 10, clicked 1, presented / unpresented 0
  r_c    collaborative score squashed to (0, 1)
  r_sim  tokens shared with the positive identifier (over the base levels)
  r_llm  policy generation probability normalized by the max within the
         record's trajectory set (optional, 0 when disabled)

Fusion is either a plain sum or a learnable weighted sum whose weights stay
positive through an exponential reparameterization and train jointly with
the policy. The fused value is floored at eps so its log is always finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import RewardError

INTERACTION_REWARDS = {"liked": 10.0, "clicked": 1.0, "presented": 0.0, "unpresented": 0.0}
SIGNAL_ORDER = ("r_a", "r_c", "r_sim", "r_llm")


@dataclass
class RewardBreakdown:
    r_a: float
    r_c: float
    r_sim: float
    r_llm: float = 0.0
    fused: float = 0.0

    def vector(self):
        return np.array([self.r_a, self.r_c, self.r_sim, self.r_llm])


@dataclass
class FusionConfig:
    mode: str = "sum"  # sum | weighted_sum
    floor: float = 0.1
    beta: float = 1.0
    use_ra: bool = True
    use_rc: bool = True
    use_rsim: bool = True
    use_rllm: bool = False
    interaction_values: dict = field(default_factory=lambda: dict(INTERACTION_REWARDS))

    def __post_init__(self):
        if self.mode not in ("sum", "weighted_sum"):
            raise RewardError(f"unknown fusion mode {self.mode!r}")
        if self.floor <= 0:
            raise RewardError(f"reward floor must be positive, got {self.floor}")

    @property
    def signal_mask(self):
        return np.array([self.use_ra, self.use_rc, self.use_rsim, self.use_rllm], dtype=float)


class FusionState:
    """Holds the learnable log-weights for weighted_sum mode (weights are
    exp(theta), initialized at 1)."""

    def __init__(self, cfg: FusionConfig):
        self.cfg = cfg
        self.log_weights = engine.param(np.zeros(4)) if cfg.mode == "weighted_sum" else None

    def learnable(self):
        return [self.log_weights] if self.log_weights is not None else []

    def weights(self):
        if self.log_weights is None:
            return np.ones(4)
        return np.exp(self.log_weights.value)


def interaction_reward(feedback_level, values=None):
    values = INTERACTION_REWARDS if values is None else values
    if feedback_level not in values:
        raise RewardError(f"unknown feedback level {feedback_level!r}")
    return float(values[feedback_level])


def similarity_reward(candidate_identifier, positive_identifier, base_levels):
    """Count of position-wise shared tokens over the first `base_levels`
    positions (disambiguation tokens carry no semantics)."""
    return int(
        sum(
            1
            for a, b in zip(candidate_identifier[:base_levels], positive_identifier[:base_levels])
            if int(a) == int(b)
        )
    )


def llm_probability_rewards(trajectory_logprobs):
    """exp(logprob) scaled so the set's maximum is exactly 1."""
    lps = np.asarray(trajectory_logprobs, dtype=np.float64)
    if lps.size == 0:
        return lps
    return np.exp(lps - lps.max())


def fuse(breakdown: RewardBreakdown, cfg: FusionConfig, state: FusionState | None = None):
    """Fused scalar reward, floored at cfg.floor. Returns a float in sum mode
    and an engine Node in weighted_sum mode (so weight gradients flow)."""
    vec = breakdown.vector() * cfg.signal_mask
    if not np.all(np.isfinite(vec)):
        raise RewardError(f"non-finite reward signals: {vec}")
    if cfg.mode == "sum" or state is None or state.log_weights is None:
        fused = max(cfg.beta * float(vec.sum()), cfg.floor)
        breakdown.fused = fused
        return fused
    weighted = engine.total(engine.mul(engine.exp(state.log_weights), engine.constant(vec)))
    node = engine.maximum_floor(engine.mul(weighted, engine.constant(cfg.beta)), cfg.floor)
    breakdown.fused = float(node.value)
    return node


def fused_value_and_grad(vec, cfg: FusionConfig, log_weights):
    """Closed-form fused reward and d(log fused)/d(log_weights), used by the
    fused-kernel path. `vec` is the masked 4-signal vector."""
    w = np.exp(log_weights)
    s = cfg.beta * float(w @ vec)
    if s >= cfg.floor:
        return s, cfg.beta * w * vec / s
    return cfg.floor, np.zeros(4)
