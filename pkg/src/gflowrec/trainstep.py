"""Batched training step over a set of trajectories.

Two interchangeable backends compute the combined loss and its gradients:

* ``pure``: builds the graph through `engine` (always available);
* ``fast``: the fused forward/backward kernel in `_speedups`, compiled from
  Cython at install time.

The backend is selected at import: the compiled kernel is used when it
imported cleanly and the ``GFLOWREC_BACKEND`` environment variable does not
force ``pure``. Both backends produce the same loss values and gradients to
floating-point accuracy (see tests/test_trainstep.py) and share one update
rule, so training dynamics do not depend on the backend choice beyond
last-ulp rounding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import engine
from .errors import ConfigurationError, TrainingError
from .losses import LossConfig
from .policy import (
    PolicyParameters,
    flow_logvalue_rows,
    level_logprob_rows,
    log_z_rows,
    param_names,
    state_hidden_rows,
    user_encoding_rows,
)

try:  # pragma: no cover - availability depends on the build
    from . import _speedups

    HAVE_FAST = True
except ImportError:  # pragma: no cover
    _speedups = None
    HAVE_FAST = False


def default_backend() -> str:
    forced = os.environ.get("GFLOWREC_BACKEND", "auto")
    if forced == "pure":
        return "pure"
    if forced == "fast":
        if not HAVE_FAST:
            raise ConfigurationError("GFLOWREC_BACKEND=fast but _speedups is not built")
        return "fast"
    return "fast" if HAVE_FAST else "pure"


@dataclass
class StepBatch:
    """Row-per-trajectory arrays for one gradient step.

    tokens/step_mask/limits are (R, T); pooled is (R, input_dim);
    log_reward is (R,) floats (sum fusion) or pairs with `signals` for the
    learnable weighted fusion. Rows of one record are contiguous and the
    first row of each record is its positive trajectory.
    """

    tokens: np.ndarray
    step_mask: np.ndarray
    limits: np.ndarray
    pooled: np.ndarray
    is_positive: np.ndarray
    log_reward: np.ndarray
    num_records: int
    signals: np.ndarray | None = None  # (R, 4) masked signal values

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]


def make_batch(rows, num_records, num_levels, input_dim, level_vocabs):
    """Allocate an empty StepBatch; the trainer fills rows in place."""
    tokens = np.zeros((rows, num_levels), dtype=np.int64)
    limits = np.tile(np.asarray(level_vocabs, dtype=np.int64), (rows, 1))
    return StepBatch(
        tokens=tokens,
        step_mask=np.zeros((rows, num_levels)),
        limits=limits,
        pooled=np.zeros((rows, input_dim)),
        is_positive=np.zeros(rows),
        log_reward=np.zeros(rows),
        num_records=num_records,
    )


def fill_row(batch, row, tokens, limits, pooled, is_positive):
    batch.tokens[row, : len(tokens)] = tokens
    batch.step_mask[row, : len(tokens)] = 1.0
    if limits is not None:
        batch.limits[row, : len(limits)] = limits
    batch.pooled[row] = pooled
    batch.is_positive[row] = 1.0 if is_positive else 0.0


# ---------------------------------------------------------------------------
# pure backend


def _forward_levels(params, batch, want_flows):
    cfg = params.cfg
    u_enc = user_encoding_rows(params, batch.pooled)
    logps, flows = [], []
    cols = np.arange(cfg.num_levels)
    for l in range(cfg.num_levels):
        slots = np.where(cols[None, :] < l, batch.tokens, -1)
        hidden = state_hidden_rows(params, u_enc, slots)
        lp = level_logprob_rows(params, hidden, l, batch.limits[:, l])
        chosen = engine.take_per_row(lp, batch.tokens[:, l])
        logps.append(engine.mul(chosen, engine.constant(batch.step_mask[:, l])))
        if want_flows:
            flows.append(flow_logvalue_rows(params, hidden))
    return u_enc, logps, flows


def _sum_nodes(nodes):
    out = nodes[0]
    for n in nodes[1:]:
        out = engine.add(out, n)
    return out


def _log_reward_node(batch, fusion_state, fusion_cfg):
    if fusion_state is not None and fusion_state.log_weights is not None:
        if batch.signals is None:
            raise TrainingError("weighted fusion needs per-row signal values")
        weighted = engine.sum_axis(
            engine.mul(engine.constant(batch.signals), engine.exp(fusion_state.log_weights)), 1
        )
        fused = engine.maximum_floor(
            engine.mul(weighted, engine.constant(fusion_cfg.beta)), fusion_cfg.floor
        )
        return engine.log(fused)
    return engine.constant(batch.log_reward)


def pure_loss(params, batch, loss_cfg: LossConfig, fusion_state=None, fusion_cfg=None):
    """Combined loss node, mean over records: next-token loss on positive
    rows plus lam * (tb | db) over all rows."""
    want_flows = loss_cfg.gfn_variant == "db" and loss_cfg.lam > 0
    u_enc, logps, flows = _forward_levels(params, batch, want_flows)
    inv_b = 1.0 / batch.num_records
    parts = {}
    terms = []
    sum_logp = _sum_nodes(logps)

    if loss_cfg.include_gr:
        gr = engine.mul(
            engine.neg(engine.total(engine.mul(sum_logp, engine.constant(batch.is_positive)))),
            engine.constant(inv_b),
        )
        parts["loss_gr"] = float(gr.value)
        terms.append(gr)

    if loss_cfg.lam > 0:
        log_r = _log_reward_node(batch, fusion_state, fusion_cfg)
        if loss_cfg.gfn_variant == "tb":
            delta = engine.sub(engine.add(log_z_rows(params, u_enc), sum_logp), log_r)
            gfn = engine.total(engine.square(delta))
        else:
            t = params.cfg.num_levels
            sq_terms = []
            for l in range(t):
                terminal = engine.mul(log_r, engine.constant(_terminal_mask(batch, l)))
                if l + 1 < t:
                    nxt = engine.add(
                        engine.mul(flows[l + 1], engine.constant(_continue_mask(batch, l))),
                        terminal,
                    )
                else:
                    nxt = terminal
                delta = engine.sub(engine.add(flows[l], logps[l]), nxt)
                sq_terms.append(
                    engine.total(engine.square(engine.mul(delta, engine.constant(batch.step_mask[:, l]))))
                )
            gfn = _sum_nodes(sq_terms)
        gfn = engine.mul(gfn, engine.constant(inv_b))
        parts["loss_gfn"] = float(gfn.value)  # per-record mean of the GFN sum, before lam
        terms.append(engine.mul(gfn, engine.constant(loss_cfg.lam)))

    loss = _sum_nodes(terms) if terms else engine.constant(np.zeros(()))
    parts["loss_total"] = float(loss.value)
    return loss, parts


def _lengths(batch):
    return batch.step_mask.sum(axis=1).astype(np.int64)


def _terminal_mask(batch, level):
    return (_lengths(batch) == level + 1).astype(np.float64)


def _continue_mask(batch, level):
    return (_lengths(batch) > level + 1).astype(np.float64)


def pure_step(params, batch, loss_cfg, fusion_state=None, fusion_cfg=None):
    leaves = params.ordered() + (fusion_state.learnable() if fusion_state else [])
    engine.zero_grads(leaves)
    loss, parts = pure_loss(params, batch, loss_cfg, fusion_state, fusion_cfg)
    engine.backward(loss)
    names = param_names(params.cfg)
    glist = engine.collect_grads(leaves)
    grads = dict(zip(names, glist[: len(names)]))
    fusion_grad = glist[len(names)] if fusion_state and fusion_state.learnable() else None
    return parts, grads, fusion_grad


# ---------------------------------------------------------------------------
# fast backend


def fast_step(params, batch, loss_cfg, fusion_state=None, fusion_cfg=None):
    if not HAVE_FAST:
        raise ConfigurationError("fast backend requested but _speedups is not built")
    cfg = params.cfg
    names = param_names(cfg)
    arrays = [np.ascontiguousarray(params[n].value, dtype=np.float64) for n in names]

    log_reward = batch.log_reward
    dlogr_dtheta = None
    if fusion_state is not None and fusion_state.log_weights is not None:
        from .rewards import fused_value_and_grad

        if batch.signals is None:
            raise TrainingError("weighted fusion needs per-row signal values")
        log_reward = np.empty(batch.rows)
        dlogr_dtheta = np.empty((batch.rows, 4))
        theta = fusion_state.log_weights.value
        for r in range(batch.rows):
            fused, grad = fused_value_and_grad(batch.signals[r], fusion_cfg, theta)
            log_reward[r] = np.log(fused)
            dlogr_dtheta[r] = grad

    gr_val, gfn_val, grad_arrays, dl_dlogr = _speedups.fused_step(
        arrays,
        np.asarray(cfg.level_vocabs, dtype=np.int64),
        cfg.input_dim,
        cfg.hidden,
        cfg.token_dim,
        int(cfg.user_conditioned_z),
        np.ascontiguousarray(batch.tokens),
        np.ascontiguousarray(batch.step_mask),
        np.ascontiguousarray(batch.limits),
        np.ascontiguousarray(batch.pooled),
        np.ascontiguousarray(batch.is_positive),
        np.ascontiguousarray(log_reward),
        int(loss_cfg.include_gr),
        1 if loss_cfg.gfn_variant == "db" else 0,
        float(loss_cfg.lam),
        int(batch.num_records),
    )
    if not np.isfinite(gr_val) or not np.isfinite(gfn_val):
        raise TrainingError(f"non-finite loss: gr={gr_val} gfn={gfn_val}")
    parts = {}
    total = 0.0
    if loss_cfg.include_gr:
        parts["loss_gr"] = gr_val
        total += gr_val
    if loss_cfg.lam > 0:
        parts["loss_gfn"] = gfn_val
        total += loss_cfg.lam * gfn_val
    parts["loss_total"] = total
    grads = dict(zip(names, grad_arrays))
    fusion_grad = None
    if dlogr_dtheta is not None:
        fusion_grad = dl_dlogr @ dlogr_dtheta
    return parts, grads, fusion_grad


def compute_step(params, batch, loss_cfg, fusion_state=None, fusion_cfg=None, backend=None):
    backend = backend or default_backend()
    if backend == "fast":
        return fast_step(params, batch, loss_cfg, fusion_state, fusion_cfg)
    return pure_step(params, batch, loss_cfg, fusion_state, fusion_cfg)


def trajectory_logprobs_batch(params, batch) -> np.ndarray:
    """Forward-only per-row trajectory log-probabilities (used by the
    policy-probability reward)."""
    _, logps, _ = _forward_levels(params, batch, want_flows=False)
    return _sum_nodes(logps).value
