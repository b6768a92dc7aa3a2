"""Aligned plain-text tables for terminal output."""
from __future__ import annotations

import math
from typing import Optional, Sequence

from .core_types import FitResult


def _fmt(v, digits: int = 2) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.{digits}f}"
    return str(v)


def table(header: Sequence[str], rows: Sequence[Sequence], digits: int = 2) -> str:
    cells = [[_fmt(v, digits) for v in r] for r in rows]
    widths = [max([len(h)] + [len(r[k]) for r in cells]) for k, h in enumerate(header)]
    out = ["  ".join(h.ljust(w) if k == 0 else h.rjust(w) for k, (h, w) in enumerate(zip(header, widths)))]
    out.append("  ".join("-" * w for w in widths))
    for r in cells:
        out.append("  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(out)


def _ci(intervals: Optional[dict], key: str) -> str:
    if not intervals or key not in intervals:
        return ""
    lo, hi = intervals[key]
    return f"[{lo:.2f}, {hi:.2f}]"


def fit_table(fit: FitResult, intervals: Optional[dict] = None) -> str:
    """Fixed effects, then variance components, in one aligned block."""
    rows = []
    for t, est in fit.estimates.items():
        rows.append([t, est, fit.std_errors[t], fit.t_values[t], _ci(intervals, f"fixed:{t}")])
    fixed = table(["fixed effect", "estimate", "se", "t", "CI"], rows)
    vrows = []
    for rs in (fit.varcomp.by_participant, fit.varcomp.by_item):
        for k, (t, sd) in enumerate(zip(rs.term_names, rs.sds)):
            vrows.append([f"{rs.factor_name} {t} sd", float(sd), _ci(intervals, f"sd:{rs.factor_name}:{t}")])
        for i in range(rs.dim):
            for j in range(i):
                key = f"corr:{rs.factor_name}:{rs.term_names[j]}:{rs.term_names[i]}"
                vrows.append([f"{rs.factor_name} corr {rs.term_names[j]}~{rs.term_names[i]}",
                              float(rs.corr[i][j]), _ci(intervals, key)])
    vrows.append(["residual sd", fit.varcomp.residual_sd, _ci(intervals, "sd:residual")])
    var = table(["variance component", "value", "CI"], vrows)
    head = f"{fit.criterion} fit, n = {fit.n_obs}, status {fit.status}, deviance {fit.deviance:.4f}"
    return "\n\n".join([head, fixed, var])


def rows_table(rows: Sequence[dict], columns: Sequence[str], digits: int = 3) -> str:
    return table(list(columns), [[r.get(c) for c in columns] for r in rows], digits)
