"""Training objectives: next-token loss on the positive trajectory, the
detailed-balance and trajectory-balance flow-consistency losses, and their
weighted combination.

Token concatenation makes every state reachable from exactly one
predecessor, so the backward probability is identically 1 and never appears
below. In the detailed-balance loss the terminal flow is pinned to the
trajectory's fused reward; intermediate flows come from the flow head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Node
from .errors import ConfigurationError, RewardError
from .policy import (
    StateEncoding,
    flow_logvalue_rows,
    level_logprob_rows,
    log_z_rows,
    state_hidden_rows,
    trajectory_logprob_node,
    user_encoding_rows,
)
from .rewards import RewardBreakdown


@dataclass
class LossConfig:
    gfn_variant: str = "tb"  # tb | db
    lam: float = 1.0
    include_gr: bool = True

    def __post_init__(self):
        if self.gfn_variant not in ("tb", "db"):
            raise ConfigurationError(f"unknown gfn variant {self.gfn_variant!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ConfigurationError(f"lambda must be finite and >= 0, got {self.lam}")


@dataclass
class Trajectory:
    """One identifier trajectory: tokens, its reward, and (after a forward
    pass) the per-step log P_F and per-state log F values for logging."""

    tokens: tuple[int, ...]
    user_context: np.ndarray
    reward: RewardBreakdown
    fused_reward: object  # float, or engine Node when fusion weights learn
    limits: tuple | None = None
    log_pf: np.ndarray | None = None
    log_flow: np.ndarray | None = None


def _log_reward_node(fused_reward) -> Node:
    node = engine.as_node(fused_reward)
    if float(node.value) <= 0:
        raise RewardError(f"fused reward must be positive, got {float(node.value)}")
    return engine.log(node)


def _steps(params, user_context, tokens, limits, want_flows):
    """Per-step chosen-token logprob nodes and per-state flow nodes."""
    u_enc = user_encoding_rows(params, user_context)
    logps, flows = [], []
    slots = np.full((1, params.cfg.num_levels), -1, dtype=np.int64)
    for l, tok in enumerate(tokens):
        hidden = state_hidden_rows(params, u_enc, slots.copy())
        lim = None if limits is None or limits[l] is None else np.array([limits[l]])
        lp = level_logprob_rows(params, hidden, l, lim)
        logps.append(engine.total(engine.take_per_row(lp, np.array([int(tok)]))))
        if want_flows:
            flows.append(engine.total(flow_logvalue_rows(params, hidden)))
        slots[0, l] = int(tok)
    return u_enc, logps, flows


def loss_gr(params, user_context, positive_identifier, limits=None) -> Node:
    """Negative log-likelihood of the positive identifier (next-token loss)."""
    return engine.neg(trajectory_logprob_node(params, user_context, positive_identifier, limits))


def loss_db(params, trajectory: Trajectory) -> Node:
    """Sum over steps of (log F(s_l) + log P(t_{l+1}) - log F(s_{l+1}))^2,
    with the terminal log-flow replaced by the log fused reward."""
    log_r = _log_reward_node(trajectory.fused_reward)
    _, logps, flows = _steps(
        params, trajectory.user_context, trajectory.tokens, trajectory.limits, want_flows=True
    )
    terms = []
    for l in range(len(logps)):
        nxt = flows[l + 1] if l + 1 < len(logps) else log_r
        terms.append(engine.square(engine.sub(engine.add(flows[l], logps[l]), nxt)))
    out = terms[0]
    for t in terms[1:]:
        out = engine.add(out, t)
    trajectory.log_pf = np.array([float(n.value) for n in logps])
    trajectory.log_flow = np.array([float(n.value) for n in flows] + [float(log_r.value)])
    return out


def loss_tb(params, trajectory: Trajectory) -> Node:
    """(log Z + sum_l log P(t_l) - log R)^2 with the learnable log-partition."""
    log_r = _log_reward_node(trajectory.fused_reward)
    u_enc, logps, _ = _steps(
        params, trajectory.user_context, trajectory.tokens, trajectory.limits, want_flows=False
    )
    acc = engine.total(log_z_rows(params, u_enc))
    for lp in logps:
        acc = engine.add(acc, lp)
    trajectory.log_pf = np.array([float(n.value) for n in logps])
    return engine.square(engine.sub(acc, log_r))


def loss_total(params, trajectories, cfg: LossConfig) -> Node:
    """Next-token loss on trajectories[0] (the positive) plus lam times the
    summed GFN loss over the whole set."""
    if not trajectories:
        raise ConfigurationError("loss_total needs at least the positive trajectory")
    positive = trajectories[0]
    gfn = loss_db if cfg.gfn_variant == "db" else loss_tb
    out = None
    if cfg.include_gr:
        out = loss_gr(params, positive.user_context, positive.tokens, positive.limits)
    if cfg.lam > 0:
        acc = gfn(params, trajectories[0])
        for traj in trajectories[1:]:
            acc = engine.add(acc, gfn(params, traj))
        scaled = engine.mul(acc, engine.constant(cfg.lam))
        out = scaled if out is None else engine.add(out, scaled)
    if out is None:
        out = engine.constant(np.zeros(()))
    return out
