"""Monte Carlo power over participant x item design grids.

Replicate ``r`` of grid cell ``(i, j)`` simulates from the seed derived from
``(base_seed, i, j, r)``; residual-sd sweeps use ``(base_seed, SWEEP_TAG, k, r)``.
Replicates are scheduled in chunks on a process pool and aggregated as
integer counts, so the result does not depend on the number of workers.
"""
from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core_types import PowerCell, Scenario, ValidationError, check_scenario
from .lmm import FitOptions, ModelSpec, _CrossProducts, build_design, fit_design, wald_test
from .simulate import derive_seed, simulate_response, simulate_trials

log = logging.getLogger(__name__)

DEFAULT_PARTICIPANTS = tuple(range(12, 97, 12))
DEFAULT_ITEMS = (20, 40, 90)
DEFAULT_RESIDUAL_SDS = (100.0, 150.0, 200.0, 250.0, 300.0)
FAILURE_MODES = ("exclude", "nonsig")
SWEEP_TAG = 2**31
TARGET_TERM = "relatedness"


@dataclass(frozen=True)
class PowerGridRequest:
    """One power computation: a base scenario and the grid to evaluate it on."""

    base: Scenario
    participants: tuple = DEFAULT_PARTICIPANTS
    items: tuple = DEFAULT_ITEMS
    n_sim: int = 500
    threshold: float = 1.96
    base_seed: int = 0
    slope_sd_override: Optional[float] = None
    residual_sds: Optional[tuple] = None
    criterion: str = "REML"
    failures: str = "exclude"

    def __post_init__(self):
        object.__setattr__(self, "participants", tuple(int(v) for v in self.participants))
        object.__setattr__(self, "items", tuple(int(v) for v in self.items))
        if self.residual_sds is not None:
            object.__setattr__(self, "residual_sds", tuple(float(v) for v in self.residual_sds))
        problems = []
        if self.n_sim < 1:
            problems.append(f"n_sim must be >= 1, got {self.n_sim}")
        grids = [("participants", self.participants), ("items", self.items)]
        if self.residual_sds is not None:
            grids.append(("residual_sds", self.residual_sds))
        for name, values in grids:
            if not values:
                problems.append(f"{name} must be non-empty")
            elif any(b <= a for a, b in zip(values, values[1:])):
                problems.append(f"{name} must be strictly increasing, got {list(values)}")
        if self.failures not in FAILURE_MODES:
            problems.append(f"failures must be one of {FAILURE_MODES}")
        if problems:
            raise ValidationError(problems)

    def scenario(self) -> Scenario:
        """Base scenario with the participant slope override applied."""
        s = self.base
        if self.slope_sd_override is not None:
            s = s.with_sd("participant", TARGET_TERM, self.slope_sd_override)
        return check_scenario(s)

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "participants": list(self.participants),
            "items": list(self.items),
            "n_sim": self.n_sim,
            "threshold": self.threshold,
            "base_seed": self.base_seed,
            "slope_sd_override": self.slope_sd_override,
            "residual_sds": None if self.residual_sds is None else list(self.residual_sds),
            "criterion": self.criterion,
            "failures": self.failures,
        }


@dataclass(frozen=True)
class _Cell:
    key: tuple
    scenario: Scenario
    residual_sd: Optional[float] = None


class _CellRunner:
    """Per-process cache of the design for one cell; only the response changes."""

    def __init__(self):
        self._cache = {}

    def design(self, s: Scenario, spec: ModelSpec):
        key = (s.n_participants, s.n_items, s.obs_per_cell, s.contrasts, spec)
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            template = simulate_trials(s, 0)
            design = build_design(template, spec, s.contrasts)
            self._cache[key] = (design, _CrossProducts(design))
        return self._cache[key]


_RUNNER = _CellRunner()


def run_replicate(scenario: Scenario, seed: int, spec: ModelSpec, threshold: float,
                  options: Optional[FitOptions] = None):
    """Simulate and fit one dataset; returns ``(status, t, significant)``."""
    design, cp = _RUNNER.design(scenario, spec)
    y, _ = simulate_response(scenario, seed)
    cp.set_response(y)
    fit = fit_design(design.with_response(y), spec.criterion, options, _cp=cp)
    if not fit.converged:
        return fit.status, float("nan"), False
    w = wald_test(fit, TARGET_TERM, threshold)
    return fit.status, w["t"], w["significant"]


def _run_chunk(payload):
    scenario, key, reps, spec, threshold, options = payload
    out = []
    for r in reps:
        seed = derive_seed(key[0], *key[1:], r)
        status, t, sig = run_replicate(scenario, seed, spec, threshold, options)
        out.append((r, status != "failed", bool(sig)))
    return key, out


def _execute(cells: Sequence[_Cell], req: PowerGridRequest, workers: int,
             progress: Optional[Callable[[int, int], None]], options: Optional[FitOptions],
             chunk_size: int):
    spec = ModelSpec.for_scenario(req.scenario(), req.criterion)
    payloads = []
    for c in cells:
        for start in range(0, req.n_sim, chunk_size):
            reps = tuple(range(start, min(start + chunk_size, req.n_sim)))
            payloads.append((c.scenario, c.key, reps, spec, req.threshold, options))
    counts = {c.key: [0, 0] for c in cells}
    done = 0
    total = len(cells) * req.n_sim

    def consume(result):
        nonlocal done
        key, rows = result
        for _, conv, sig in rows:
            counts[key][0] += int(conv)
            counts[key][1] += int(conv and sig)
        done += len(rows)
        if progress is not None:
            progress(done, total)

    if workers <= 1:
        for p in payloads:
            consume(_run_chunk(p))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_run_chunk, payloads):
                consume(result)

    cells_out = []
    for c in cells:
        n_conv, n_sig = counts[c.key]
        s = c.scenario
        cell = PowerCell(s.n_participants, s.n_items, req.n_sim, n_conv, n_sig, c.residual_sd, req.failures)
        if n_conv < 0.9 * req.n_sim:
            msg = (
                f"cell {s.n_participants}x{s.n_items}"
                + (f" residual_sd={c.residual_sd}" if c.residual_sd is not None else "")
                + f": only {n_conv}/{req.n_sim} fits converged"
            )
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
            log.warning(msg)
        cells_out.append(cell)
    return cells_out


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)


def power_curve(req: PowerGridRequest, workers: int = 1, progress=None,
                options: Optional[FitOptions] = None, chunk_size: int = 25) -> list:
    """Estimate power to detect the relatedness effect at every grid point.

    Failed fits are excluded from the denominator (``failures="exclude"``) or
    counted as non-significant (``failures="nonsig"``).
    """
    s = req.scenario()
    cells = []
    for i, n_p in enumerate(req.participants):
        for j, n_i in enumerate(req.items):
            key = (int(req.base_seed), i, j)
            cells.append(_Cell(key, s.with_sizes(n_p, n_i)))
    return _execute(cells, req, workers, progress, options, chunk_size)


def residual_sweep(req: PowerGridRequest, workers: int = 1, progress=None,
                   options: Optional[FitOptions] = None, chunk_size: int = 25) -> list:
    """Power as a function of the residual sd at a fixed design size.

    Uses the first entries of ``req.participants`` and ``req.items``.
    """
    if req.residual_sds is None:
        raise ValidationError("residual_sweep needs residual_sds")
    s = req.scenario().with_sizes(req.participants[0], req.items[0])
    cells = []
    for k, sd in enumerate(req.residual_sds):
        key = (int(req.base_seed), SWEEP_TAG, k)
        cells.append(_Cell(key, check_scenario(s.with_residual_sd(sd)), float(sd)))
    return _execute(cells, req, workers, progress, options, chunk_size)


def crossing_point(cells: Sequence[PowerCell], target: float = 0.8, n_items: Optional[int] = None):
    """First participant count whose power reaches ``target`` (None if never)."""
    rows = sorted((c for c in cells if n_items is None or c.n_items == n_items), key=lambda c: c.n_participants)
    for c in rows:
        if c.power >= target:
            return c.n_participants
    return None


def cell_at(cells: Sequence[PowerCell], n_participants: int, n_items: int) -> PowerCell:
    for c in cells:
        if c.n_participants == n_participants and c.n_items == n_items:
            return c
    raise KeyError((n_participants, n_items))
