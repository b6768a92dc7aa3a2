"""Within- and between-participant variability measures for trial tables.

Error trials (``correct == False``) are dropped before every analysis here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_types import TrialTable, ValidationError, as_trial_table
from .simulate import substream
from .special import f_sf, norm_two_sided_p

Z_975 = 1.959963984540054


class PerfectCorrelationError(ValidationError):
    """A correlation of exactly +-1 has an infinite Fisher z."""


@dataclass(frozen=True)
class ReliabilityResult:
    per_participant: list = field(repr=False)
    r: float
    ci_low: float
    ci_high: float

    @property
    def n(self) -> int:
        return len(self.per_participant)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_participants": self.n,
            "per_participant": list(self.per_participant),
        }


@dataclass(frozen=True)
class VarianceRatioResult:
    f: float
    df1: int
    df2: int
    p: float

    def to_dict(self) -> dict:
        return {"f": self.f, "df1": self.df1, "df2": self.df2, "p": self.p}


def _clean(table) -> TrialTable:
    return as_trial_table(table, require_positive_rt=False).correct_only()


def pearson(x, y) -> float:
    dx = np.asarray(x, dtype=float) - np.mean(x)
    dy = np.asarray(y, dtype=float) - np.mean(y)
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValidationError("correlation undefined: one half has no between-participant variation")
    return min(1.0, max(-1.0, float(dx @ dy) / math.sqrt(sxx * syy)))


def fisher_ci(r: float, n: int, z_crit: float = Z_975) -> tuple:
    half = z_crit / math.sqrt(n - 3)
    if abs(r) >= 1.0:
        return (r, r)
    z = math.atanh(r)
    return (math.tanh(z - half), math.tanh(z + half))


def split_half(table) -> ReliabilityResult:
    """Correlation of per-participant means over odd vs even presentation positions."""
    t = _clean(table)
    if not t.has("trial_index"):
        raise ValidationError("split_half needs a trial_index column (presentation order)")
    df = t.data
    odd = (df["trial_index"].to_numpy() % 2) == 1
    grouped = df.assign(odd=odd).groupby(["participant_id", "odd"], sort=True)["rt_ms"].mean().unstack()
    if grouped.shape[1] < 2 or grouped.isna().any().any():
        short = sorted(grouped.index[grouped.isna().any(axis=1)]) if grouped.shape[1] == 2 else sorted(grouped.index)
        raise ValidationError(f"participants without both odd and even trials: {short[:10]}")
    if len(grouped) < 4:
        raise ValidationError(f"split_half needs at least 4 participants, got {len(grouped)}")
    odd_m = grouped[True].to_numpy()
    even_m = grouped[False].to_numpy()
    r = pearson(odd_m, even_m)
    lo, hi = fisher_ci(r, len(odd_m))
    rows = [
        {"participant_id": pid, "odd_mean": float(o), "even_mean": float(e)}
        for pid, o, e in zip(grouped.index, odd_m, even_m)
    ]
    return ReliabilityResult(rows, r, min(lo, r), max(hi, r))


def compare_correlations(r1: float, n1: int, r2: float, n2: int) -> dict:
    """Independent-samples Fisher z test of ``r2`` against ``r1``."""
    if n1 < 4 or n2 < 4:
        raise ValidationError(f"each correlation needs n >= 4, got {n1} and {n2}")
    for r in (r1, r2):
        if not -1.0 <= r <= 1.0:
            raise ValidationError(f"correlation {r} outside [-1, 1]")
        if abs(r) == 1.0:
            raise PerfectCorrelationError(f"correlation {r} has an infinite Fisher z")
    z = (math.atanh(r2) - math.atanh(r1)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    return {"z": z, "p_two_sided": norm_two_sided_p(z)}


def variance_ratio_test(sd_a: float, n_a: int, sd_b: float, n_b: int) -> VarianceRatioResult:
    """F = sd_a^2 / sd_b^2 against the upper tail of F(n_a - 1, n_b - 1)."""
    problems = []
    if not (sd_a > 0 and sd_b > 0):
        problems.append(f"sds must be positive, got {sd_a} and {sd_b}")
    if n_a < 2 or n_b < 2:
        problems.append(f"group sizes must be >= 2, got {n_a} and {n_b}")
    if problems:
        raise ValidationError(problems)
    f = (sd_a / sd_b) ** 2
    df1, df2 = int(n_a) - 1, int(n_b) - 1
    return VarianceRatioResult(f, df1, df2, f_sf(f, df1, df2))


def _boot_ci(values: np.ndarray) -> tuple:
    lo, hi = np.percentile(values, [2.5, 97.5])
    return (float(lo), float(hi))


def location_scale_fit(table_a, table_b, n_boot: int = 2000, seed: int = 0) -> dict:
    """Two-group Gaussian MLE (mean, sd) differences, b minus a, with bootstrap CIs.

    Replicate ``k`` resamples both groups from substream ``(seed, k)``.
    """
    if n_boot < 200:
        raise ValidationError(f"n_boot must be >= 200, got {n_boot}")
    a = _clean(table_a).data["rt_ms"].to_numpy()
    b = _clean(table_b).data["rt_ms"].to_numpy()
    for name, g in (("a", a), ("b", b)):
        if g.size < 2:
            raise ValidationError(f"group {name} has {g.size} usable rows; need at least 2")
    mean_diff = float(b.mean() - a.mean())
    sd_diff = float(b.std() - a.std())
    boot_mean = np.empty(n_boot)
    boot_sd = np.empty(n_boot)
    for k in range(n_boot):
        g = substream(seed, k)
        ra = a[g.integers(0, a.size, a.size)]
        rb = b[g.integers(0, b.size, b.size)]
        boot_mean[k] = rb.mean() - ra.mean()
        boot_sd[k] = rb.std() - ra.std()
    return {
        "mean_a": float(a.mean()),
        "mean_b": float(b.mean()),
        "sd_a": float(a.std()),
        "sd_b": float(b.std()),
        "mean_diff": mean_diff,
        "mean_ci": _boot_ci(boot_mean),
        "sd_diff": sd_diff,
        "sd_ci": _boot_ci(boot_sd),
        "n_a": int(a.size),
        "n_b": int(b.size),
        "n_boot": int(n_boot),
        "seed": seed,
    }


def descriptive_slope_sd(table) -> dict:
    """Spread of per-participant related minus unrelated mean differences."""
    df = _clean(table).data
    means = df.groupby(["participant_id", "condition"], sort=True)["rt_ms"].mean().unstack()
    for cond in ("related", "unrelated"):
        if cond not in means.columns:
            means[cond] = np.nan
    missing = means.index[means[["related", "unrelated"]].isna().any(axis=1)].tolist()
    if missing:
        raise ValidationError(f"participants missing a condition: {missing[:10]}")
    diffs = (means["related"] - means["unrelated"]).to_numpy()
    sd = float(np.std(diffs, ddof=1)) if diffs.size > 1 else float("nan")
    return {
        "participants": means.index.tolist(),
        "per_participant_diffs": diffs.tolist(),
        "grand_mean": float(diffs.mean()),
        "sd": sd,
    }
