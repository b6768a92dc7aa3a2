"""Synthetic trial tables from the crossed participant x item generative model.

    rt = b0 + b_rel*x + u0[p] + u1[p]*x + v0[i] + v1[i]*x + eps

with ``x`` the relatedness code of the trial, ``(u0, u1)`` and ``(v0, v1)``
multivariate normal per participant / item and ``eps ~ N(0, residual_sd)``.

Randomness is index-addressed: participant ``p`` draws its effects from the
substream ``(seed, 1, p)``, item ``i`` from ``(seed, 2, i)`` and the residuals
and presentation order of participant ``p`` from ``(seed, 3, p)``.  Results
therefore never depend on row order or on how work is split across workers.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import pandas as pd

from .core_types import (
    PSD_TOL,
    RandomStructure,
    Scenario,
    TrialTable,
    ValidationError,
    validate_scenario,
)

SIMULATABLE_TERMS = ("intercept", "relatedness")
_PARTICIPANT_STREAM, _ITEM_STREAM, _RESIDUAL_STREAM = 1, 2, 3


def as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def child_seq(seed, *key: int) -> np.random.SeedSequence:
    """The child ``SeedSequence`` addressed by ``key`` under ``seed``."""
    ss = as_seed_sequence(seed)
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + tuple(int(k) for k in key))


def substream(seed, *key: int) -> np.random.Generator:
    """Generator for the child stream ``key`` of ``seed``."""
    return np.random.Generator(np.random.PCG64(child_seq(seed, *key)))


def derive_seed(seed, *key: int) -> int:
    """A 63-bit integer seed for child stream ``key`` of ``seed``."""
    return int(child_seq(seed, *key).generate_state(1, np.uint64)[0] >> np.uint64(1))


def covariance_factor(rs: RandomStructure) -> np.ndarray:
    """Matrix ``F`` with ``F @ F.T`` equal to the covariance of ``rs``.

    Uses a Cholesky factor when the covariance is positive definite and an
    eigendecomposition with eigenvalues clipped at zero otherwise.
    """
    corr = rs.corr_array
    if corr.size and np.linalg.eigvalsh(corr).min() < -PSD_TOL:
        raise ValidationError(f"{rs.factor_name}: correlation matrix is not positive semi-definite")
    cov = rs.covariance
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.clip(w, 0.0, None))


def draw_random_effects(rs: RandomStructure, n_units: int, rng_stream) -> np.ndarray:
    """Draw ``n_units`` independent effect vectors, ``n_units x dim`` (ms).

    ``rng_stream`` may be a ``numpy.random.Generator`` (rows are drawn from it
    in order) or an integer / ``SeedSequence`` (row ``j`` comes from the
    child stream ``j``, so any subset of rows can be reproduced on its own).
    """
    F = covariance_factor(rs)
    q = rs.dim
    if isinstance(rng_stream, np.random.Generator):
        z = rng_stream.standard_normal((n_units, q))
    else:
        z = np.empty((n_units, q))
        for j in range(n_units):
            z[j] = substream(rng_stream, j).standard_normal(q)
    return z @ F.T


def _check_simulatable(s: Scenario) -> None:
    problems = validate_scenario(s)
    extra = [t for t in s.fixed.terms if t not in SIMULATABLE_TERMS]
    extra += [t for rs in (s.by_participant, s.by_item) for t in rs.term_names if t not in SIMULATABLE_TERMS]
    if extra:
        problems.append(f"simulation covers single-setting scenarios; unsupported terms {sorted(set(extra))}")
    if problems:
        raise ValidationError(problems)


@lru_cache(maxsize=64)
def _layout(n_participants: int, n_items: int, obs_per_cell: int):
    """Canonical row layout: participant-major, then item, condition, replicate."""
    per_p = n_items * 2 * obs_per_cell
    p_idx = np.repeat(np.arange(n_participants), per_p)
    i_idx = np.tile(np.repeat(np.arange(n_items), 2 * obs_per_cell), n_participants)
    related = np.tile(np.repeat([True, False], obs_per_cell), n_participants * n_items)
    rep = np.tile(np.arange(obs_per_cell), n_participants * n_items * 2)
    for a in (p_idx, i_idx, related, rep):
        a.setflags(write=False)
    return p_idx, i_idx, related, rep


def _term_values(terms, x):
    return np.column_stack([np.ones_like(x) if t == "intercept" else x for t in terms])


def simulate_response(s: Scenario, seed):
    """Simulated RTs in canonical row order, plus per-participant trial order.

    Returns ``(rt, trial_index)``.  This is the array-level core of
    :func:`simulate_trials`, used directly by the power engine.
    """
    _check_simulatable(s)
    P, I, m = s.n_participants, s.n_items, s.obs_per_cell
    p_idx, i_idx, related, _ = _layout(P, I, m)
    c = s.contrasts
    x = np.where(related, c.related_code, c.unrelated_code)
    fixed = s.fixed.as_dict()
    rt = fixed["intercept"] + fixed.get("relatedness", 0.0) * x

    u = draw_random_effects(s.by_participant, P, child_seq(seed, _PARTICIPANT_STREAM))
    v = draw_random_effects(s.by_item, I, child_seq(seed, _ITEM_STREAM))
    rt = rt + np.einsum("nq,nq->n", _term_values(s.by_participant.term_names, x), u[p_idx])
    rt = rt + np.einsum("nq,nq->n", _term_values(s.by_item.term_names, x), v[i_idx])

    per_p = I * 2 * m
    eps = np.empty(P * per_p)
    order = np.empty(P * per_p, dtype=np.int64)
    for p in range(P):
        g = substream(seed, _RESIDUAL_STREAM, p)
        eps[p * per_p : (p + 1) * per_p] = g.standard_normal(per_p)
        order[p * per_p : (p + 1) * per_p] = g.permutation(per_p) + 1
    rt = rt + s.residual_sd * eps
    return rt, order


def id_labels(prefix: str, n: int) -> list:
    width = len(str(n))
    return [f"{prefix}{k + 1:0{width}d}" for k in range(n)]


def simulate_trials(s: Scenario, seed) -> TrialTable:
    """Simulate one complete dataset: every participant sees every item in both conditions.

    Negative latencies from the far tails are kept as drawn.
    """
    rt, order = simulate_response(s, seed)
    P, I, m = s.n_participants, s.n_items, s.obs_per_cell
    p_idx, i_idx, related, rep = _layout(P, I, m)
    df = pd.DataFrame(
        {
            "participant_id": np.array(id_labels("p", P), dtype=object)[p_idx],
            "item_id": np.array(id_labels("i", I), dtype=object)[i_idx],
            "condition": np.where(related, "related", "unrelated").astype(object),
            "trial_index": order,
            "replicate": rep,
            "rt_ms": rt,
        }
    )
    return TrialTable(df, require_positive_rt=False)
