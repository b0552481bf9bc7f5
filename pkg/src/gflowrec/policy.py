"""Autoregressive token policy with a flow head and a log-partition scalar.

The network is the smallest thing that conditions on both the user context
and the identifier prefix: a mean-pooled-history encoder (affine + tanh), a
two-layer tanh trunk over [user encoding | per-level token embedding slots],
per-level softmax heads for next-token distributions, and a linear flow head
emitting log F(state). All forward ops build graphs through `engine`, so
training losses differentiate end to end.

States are (user_context, prefix): `user_context` is the mean-pooled item
embedding vector of the history, `prefix` the tokens generated so far.
Identifiers from colliding items carry one extra disambiguation token; that
step's distribution is normalized over the collision group only (via a
per-step limit), which keeps the total probability over all identifiers at 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Node
from .errors import CheckpointError, StateError, TrainingError

GRAD_CLIP_NORM = 10.0


@dataclass(frozen=True)
class PolicyConfig:
    input_dim: int
    level_vocabs: tuple[int, ...]  # vocabulary size per generation step
    hidden: int = 32
    token_dim: int = 16
    user_conditioned_z: bool = False

    @property
    def num_levels(self) -> int:
        return len(self.level_vocabs)

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "level_vocabs": list(self.level_vocabs),
            "hidden": self.hidden,
            "token_dim": self.token_dim,
            "user_conditioned_z": self.user_conditioned_z,
        }

    @staticmethod
    def from_dict(obj):
        return PolicyConfig(
            input_dim=int(obj["input_dim"]),
            level_vocabs=tuple(int(v) for v in obj["level_vocabs"]),
            hidden=int(obj["hidden"]),
            token_dim=int(obj["token_dim"]),
            user_conditioned_z=bool(obj["user_conditioned_z"]),
        )

    @staticmethod
    def for_index(index, input_dim, hidden=32, token_dim=16, user_conditioned_z=False):
        """Level structure matching a fitted identifier index."""
        vocabs = [index.base_vocab] * index.base_levels
        if index.max_extra_vocab > 0:
            vocabs.append(index.max_extra_vocab)
        return PolicyConfig(input_dim, tuple(vocabs), hidden, token_dim, user_conditioned_z)


@dataclass
class StateEncoding:
    user_context: np.ndarray  # mean-pooled history embedding, (input_dim,)
    prefix: tuple[int, ...]
    branch_limit: int | None = None  # token-space size at this step, None = full vocab

    @property
    def level(self) -> int:
        return len(self.prefix)


def param_names(cfg: PolicyConfig) -> list[str]:
    names = ["user_w", "user_b"]
    names += [f"emb_{l}" for l in range(cfg.num_levels)]
    names += ["trunk1_w", "trunk1_b", "trunk2_w", "trunk2_b"]
    for l in range(cfg.num_levels):
        names += [f"head_{l}_w", f"head_{l}_b"]
    names += ["flow_w", "flow_b", "log_z"]
    if cfg.user_conditioned_z:
        names.append("log_z_w")
    return names


class PolicyParameters:
    """All learnable values, as engine leaves, in a canonical order."""

    def __init__(self, cfg: PolicyConfig, values: dict[str, np.ndarray]):
        self.cfg = cfg
        self.nodes = {name: engine.param(values[name]) for name in param_names(cfg)}

    def __getitem__(self, name) -> Node:
        return self.nodes[name]

    def ordered(self) -> list[Node]:
        return [self.nodes[n] for n in param_names(self.cfg)]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self.nodes[n].value for n in param_names(self.cfg)}

    def clone(self) -> "PolicyParameters":
        return PolicyParameters(self.cfg, {n: v.copy() for n, v in self.arrays().items()})

    @property
    def trunk_in_dim(self) -> int:
        return self.cfg.hidden + self.cfg.num_levels * self.cfg.token_dim


def init_policy(cfg: PolicyConfig, seed: int) -> PolicyParameters:
    """Symmetric-uniform weights scaled by 1/sqrt(fan_in); zero biases; log_z = 0."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    h, td = cfg.hidden, cfg.token_dim
    trunk_in = h + cfg.num_levels * td
    values = {
        "user_w": uniform(cfg.input_dim, (cfg.input_dim, h)),
        "user_b": np.zeros(h),
        "trunk1_w": uniform(trunk_in, (trunk_in, h)),
        "trunk1_b": np.zeros(h),
        "trunk2_w": uniform(h, (h, h)),
        "trunk2_b": np.zeros(h),
        "flow_w": uniform(h, (h,)),
        "flow_b": np.zeros(()),
        "log_z": np.zeros(()),
    }
    for l, vocab in enumerate(cfg.level_vocabs):
        values[f"emb_{l}"] = uniform(td, (vocab, td))
        values[f"head_{l}_w"] = uniform(h, (h, vocab))
        values[f"head_{l}_b"] = np.zeros(vocab)
    if cfg.user_conditioned_z:
        values["log_z_w"] = uniform(h, (h,))
    return PolicyParameters(cfg, values)


# ---------------------------------------------------------------------------
# forward graph builders (batched over rows)


def user_encoding_rows(params, pooled) -> Node:
    """(R, input_dim) pooled histories -> (R, hidden) encodings."""
    x = engine.constant(np.atleast_2d(pooled))
    return engine.tanh(engine.add(engine.matmul(x, params["user_w"]), params["user_b"]))


def state_hidden_rows(params, u_enc: Node, slots) -> Node:
    """Trunk output for one state per row.

    `slots` is (R, num_levels) int, slot l holding the prefix token at level
    l or -1 when the prefix is shorter.
    """
    slots = np.asarray(slots, dtype=np.int64)
    parts = [u_enc]
    for l in range(params.cfg.num_levels):
        parts.append(engine.gather_rows(params[f"emb_{l}"], slots[:, l]))
    x = engine.concat_cols(parts)
    z1 = engine.tanh(engine.add(engine.matmul(x, params["trunk1_w"]), params["trunk1_b"]))
    return engine.tanh(engine.add(engine.matmul(z1, params["trunk2_w"]), params["trunk2_b"]))


def level_logprob_rows(params, hidden: Node, level: int, limits=None) -> Node:
    """(R, vocab_level) next-token log-distribution at one level."""
    logits = engine.add(engine.matmul(hidden, params[f"head_{level}_w"]), params[f"head_{level}_b"])
    return engine.log_softmax_rows(logits, limits)


def flow_logvalue_rows(params, hidden: Node) -> Node:
    return engine.add(engine.sum_axis(engine.mul(hidden, params["flow_w"]), 1), params["flow_b"])


def log_z_rows(params, u_enc: Node) -> Node:
    """(R,) log-partition values; a shared scalar unless user-conditioned."""
    if params.cfg.user_conditioned_z:
        return engine.add(engine.sum_axis(engine.mul(u_enc, params["log_z_w"]), 1), params["log_z"])
    rows = u_enc.value.shape[0]
    return engine.add(engine.constant(np.zeros(rows)), params["log_z"])


def _slots_for_prefix(cfg, prefix):
    slots = np.full((1, cfg.num_levels), -1, dtype=np.int64)
    for l, tok in enumerate(prefix):
        slots[0, l] = tok
    return slots


def _check_prefix(cfg, prefix):
    if len(prefix) > cfg.num_levels:
        raise StateError(f"prefix length {len(prefix)} exceeds {cfg.num_levels} levels")
    for l, tok in enumerate(prefix):
        if not 0 <= tok < cfg.level_vocabs[l]:
            raise StateError(f"token {tok} out of vocabulary at level {l}")


# ---------------------------------------------------------------------------
# per-state / per-trajectory operations


def next_token_logprobs_node(params, state: StateEncoding) -> Node:
    cfg = params.cfg
    _check_prefix(cfg, state.prefix)
    if state.level >= cfg.num_levels:
        raise StateError(f"no next token at level {state.level} of {cfg.num_levels}")
    u_enc = user_encoding_rows(params, state.user_context)
    hidden = state_hidden_rows(params, u_enc, _slots_for_prefix(cfg, state.prefix))
    limits = None if state.branch_limit is None else np.array([state.branch_limit])
    return level_logprob_rows(params, hidden, state.level, limits)


def next_token_logprobs(params, state: StateEncoding) -> np.ndarray:
    """Log next-token distribution at the state's level; logsumexp is 0."""
    return next_token_logprobs_node(params, state).value[0]


def trajectory_logprob_node(params, user_context, tokens, limits=None) -> Node:
    cfg = params.cfg
    tokens = tuple(int(t) for t in tokens)
    _check_prefix(cfg, tokens)
    u_enc = user_encoding_rows(params, user_context)
    terms = []
    for l, tok in enumerate(tokens):
        hidden = state_hidden_rows(params, u_enc, _slots_for_prefix(cfg, tokens[:l]))
        lim = None if limits is None or limits[l] is None else np.array([limits[l]])
        lp = level_logprob_rows(params, hidden, l, lim)
        terms.append(engine.take_per_row(lp, np.array([tok])))
    out = terms[0]
    for t in terms[1:]:
        out = engine.add(out, t)
    return engine.total(out)


def trajectory_logprob(params, user_context, tokens, limits=None) -> float:
    """Sum of per-step next-token log-probabilities, i.e. log P(identifier)."""
    return float(trajectory_logprob_node(params, user_context, tokens, limits).value)


def flow_logvalue_node(params, state: StateEncoding) -> Node:
    _check_prefix(params.cfg, state.prefix)
    u_enc = user_encoding_rows(params, state.user_context)
    hidden = state_hidden_rows(params, u_enc, _slots_for_prefix(params.cfg, state.prefix))
    return engine.total(flow_logvalue_rows(params, hidden))


def flow_logvalue(params, state: StateEncoding) -> float:
    """log F(state) from the flow head (terminal flows are pinned to the
    reward inside the detailed-balance loss, not here)."""
    return float(flow_logvalue_node(params, state).value)


def backward_and_step(params, loss: Node, lr, extra_params=(), lr_scales=None,
                      clip=GRAD_CLIP_NORM):
    """Accumulate reverse-mode gradients from `loss` and apply one clipped
    gradient-descent update to the policy (plus any extra leaves, e.g.
    fusion weights). Returns the pre-clip gradient norm."""
    if not np.isfinite(loss.value):
        raise TrainingError(f"non-finite loss: {loss.value}")
    leaves = params.ordered() + list(extra_params)
    engine.zero_grads(leaves)
    engine.backward(loss)
    grads = engine.collect_grads(leaves)
    norm = engine.clip_global_norm(grads, clip)
    engine.sgd_update(leaves, grads, lr, lr_scales)
    return norm


def apply_update(params, grads, lr, extra_params=(), extra_grads=(),
                 lr_scales=None, clip=GRAD_CLIP_NORM):
    """Shared update rule for precomputed gradients (used by the fused
    kernel path so both backends step identically)."""
    leaves = params.ordered() + list(extra_params)
    names = param_names(params.cfg)
    glist = [grads[n] for n in names] + list(extra_grads)
    norm = engine.clip_global_norm(glist, clip)
    engine.sgd_update(leaves, glist, lr, lr_scales)
    return norm


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


def save_policy(params, path, config_hash="", extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.cfg.to_dict(),
        "config_hash": config_hash,
        "params": {n: v.tolist() for n, v in params.arrays().items()},
    }
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_policy(path, expect_config_hash=None):
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')}")
    if expect_config_hash is not None and payload.get("config_hash") != expect_config_hash:
        raise CheckpointError("checkpoint config hash mismatch")
    try:
        cfg = PolicyConfig.from_dict(payload["config"])
        values = {n: np.array(v, dtype=np.float64) for n, v in payload["params"].items()}
        params = PolicyParameters(cfg, values)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return params, payload.get("extra")
