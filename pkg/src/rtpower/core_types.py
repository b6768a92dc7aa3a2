"""Domain objects shared by simulation, model fitting and the analyses.

All objects are frozen dataclasses holding tuples, so they can be shared
freely between worker processes.  Numeric arrays are exposed through
``numpy`` properties that return fresh copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

PSD_TOL = 1e-8
FIXED_TERMS = ("intercept", "relatedness", "setting", "setting:relatedness")


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _as_tuple_matrix(m) -> tuple:
    arr = np.asarray(m, dtype=float)
    if arr.ndim != 2:
        arr = np.atleast_2d(arr)
    return tuple(tuple(float(v) for v in row) for row in arr)


@dataclass(frozen=True)
class RandomStructure:
    """Random-effect standard deviations and correlations of one grouping factor.

    Parameters
    ----------
    factor_name : str
        ``"participant"`` or ``"item"``.
    term_names : sequence of str
        Ordered random terms, e.g. ``("intercept", "relatedness")``.
    sds : sequence of float
        Standard deviation (ms) of each term.
    corr : square matrix
        Correlation matrix over the terms.  Defaults to the identity.
    """

    factor_name: str
    term_names: tuple
    sds: tuple
    corr: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "term_names", tuple(str(t) for t in self.term_names))
        object.__setattr__(self, "sds", tuple(float(s) for s in np.atleast_1d(self.sds)))
        if self.corr is None:
            corr = np.eye(len(self.sds))
        else:
            corr = self.corr
        object.__setattr__(self, "corr", _as_tuple_matrix(corr))

    @classmethod
    def from_sds(cls, factor_name, term_names, sds, correlation=0.0):
        """Build a structure from sds and a single off-diagonal correlation."""
        q = len(sds)
        corr = np.full((q, q), float(correlation))
        np.fill_diagonal(corr, 1.0)
        return cls(factor_name, tuple(term_names), tuple(sds), corr)

    @property
    def dim(self) -> int:
        return len(self.term_names)

    @property
    def sd_array(self) -> np.ndarray:
        return np.array(self.sds, dtype=float)

    @property
    def corr_array(self) -> np.ndarray:
        return np.array(self.corr, dtype=float).reshape(len(self.corr), -1)

    @property
    def covariance(self) -> np.ndarray:
        s = self.sd_array
        return self.corr_array * np.outer(s, s)

    def violations(self, prefix: str = "") -> list:
        out = []
        name = prefix or self.factor_name
        if self.factor_name not in ("participant", "item"):
            out.append(f"{name}: factor_name must be 'participant' or 'item', got {self.factor_name!r}")
        q = len(self.term_names)
        corr = self.corr_array
        if len(self.sds) != q or corr.shape != (q, q):
            out.append(
                f"{name}: dimension mismatch (terms={q}, sds={len(self.sds)}, corr={corr.shape})"
            )
            return out
        if len(set(self.term_names)) != q:
            out.append(f"{name}: duplicate term names {self.term_names}")
        sds = self.sd_array
        if not np.all(np.isfinite(sds)) or np.any(sds < 0):
            out.append(f"{name}: sds must be finite and >= 0, got {list(self.sds)}")
        if not np.all(np.isfinite(corr)):
            out.append(f"{name}: corr has non-finite entries")
            return out
        if np.any(np.abs(np.diag(corr) - 1.0) > 1e-12):
            out.append(f"{name}: corr must have unit diagonal")
        if np.any(np.abs(corr) > 1.0):
            out.append(f"{name}: corr entries must lie in [-1, 1]")
        if not np.allclose(corr, corr.T, atol=1e-12, rtol=0):
            out.append(f"{name}: corr must be symmetric")
        elif q and np.linalg.eigvalsh(corr).min() < -PSD_TOL:
            out.append(f"{name}: corr must be positive semi-definite")
        return out

    def to_dict(self) -> dict:
        return {
            "factor_name": self.factor_name,
            "term_names": list(self.term_names),
            "sds": list(self.sds),
            "corr": [list(r) for r in self.corr],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RandomStructure":
        return cls(d["factor_name"], tuple(d["term_names"]), tuple(d["sds"]), d.get("corr"))


@dataclass(frozen=True)
class FixedEffects:
    """Ordered fixed-effect coefficients in ms, keyed by term label."""

    coefficients: tuple

    def __init__(self, coefficients):
        if isinstance(coefficients, Mapping):
            items = coefficients.items()
        else:
            items = coefficients
        object.__setattr__(self, "coefficients", tuple((str(k), float(v)) for k, v in items))

    def as_dict(self) -> dict:
        return dict(self.coefficients)

    def __getitem__(self, term):
        return self.as_dict()[term]

    def get(self, term, default=None):
        return self.as_dict().get(term, default)

    @property
    def terms(self) -> tuple:
        return tuple(k for k, _ in self.coefficients)

    def violations(self) -> list:
        out = []
        if "intercept" not in self.terms:
            out.append("fixed: must contain 'intercept'")
        unknown = [t for t in self.terms if t not in FIXED_TERMS]
        if unknown:
            out.append(f"fixed: unknown terms {unknown}")
        if len(set(self.terms)) != len(self.terms):
            out.append("fixed: duplicate terms")
        if not all(np.isfinite(v) for _, v in self.coefficients):
            out.append("fixed: coefficients must be finite")
        return out


@dataclass(frozen=True)
class ContrastCoding:
    """Numeric codes for the relatedness and setting factors."""

    related_code: float = 0.5
    unrelated_code: float = -0.5
    online_code: float = 0.5
    lab_code: float = -0.5

    def violations(self) -> list:
        out = []
        if self.related_code == self.unrelated_code:
            out.append("contrasts: related_code must differ from unrelated_code")
        if self.online_code == self.lab_code:
            out.append("contrasts: online_code must differ from lab_code")
        return out

    def to_dict(self) -> dict:
        return {
            "related_code": self.related_code,
            "unrelated_code": self.unrelated_code,
            "online_code": self.online_code,
            "lab_code": self.lab_code,
        }

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "ContrastCoding":
        if not d:
            return cls()
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class Scenario:
    """Complete generative parameter set for one setting and manipulation."""

    fixed: FixedEffects
    by_participant: RandomStructure
    by_item: RandomStructure
    residual_sd: float
    contrasts: ContrastCoding = field(default_factory=ContrastCoding)
    n_participants: int = 45
    n_items: int = 90
    obs_per_cell: int = 1

    def with_sizes(self, n_participants=None, n_items=None) -> "Scenario":
        return replace(
            self,
            n_participants=self.n_participants if n_participants is None else int(n_participants),
            n_items=self.n_items if n_items is None else int(n_items),
        )

    def with_effect(self, term: str, value: float) -> "Scenario":
        coefs = self.fixed.as_dict()
        coefs[term] = float(value)
        return replace(self, fixed=FixedEffects(coefs))

    def with_residual_sd(self, sd: float) -> "Scenario":
        return replace(self, residual_sd=float(sd))

    def with_sd(self, factor: str, term: str, sd: float) -> "Scenario":
        rs = self.by_participant if factor == "participant" else self.by_item
        sds = list(rs.sds)
        sds[rs.term_names.index(term)] = float(sd)
        new = replace(rs, sds=tuple(sds))
        key = "by_participant" if factor == "participant" else "by_item"
        return replace(self, **{key: new})

    def without_correlations(self) -> "Scenario":
        return replace(
            self,
            by_participant=replace(self.by_participant, corr=np.eye(self.by_participant.dim)),
            by_item=replace(self.by_item, corr=np.eye(self.by_item.dim)),
        )

    def to_dict(self) -> dict:
        return {
            "fixed": self.fixed.as_dict(),
            "by_participant": self.by_participant.to_dict(),
            "by_item": self.by_item.to_dict(),
            "residual_sd": self.residual_sd,
            "contrasts": self.contrasts.to_dict(),
            "n_participants": self.n_participants,
            "n_items": self.n_items,
            "obs_per_cell": self.obs_per_cell,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        return cls(
            fixed=FixedEffects(d["fixed"]),
            by_participant=RandomStructure.from_dict(d["by_participant"]),
            by_item=RandomStructure.from_dict(d["by_item"]),
            residual_sd=float(d["residual_sd"]),
            contrasts=ContrastCoding.from_dict(d.get("contrasts")),
            n_participants=int(d.get("n_participants", 45)),
            n_items=int(d.get("n_items", 90)),
            obs_per_cell=int(d.get("obs_per_cell", 1)),
        )


def validate_scenario(s: Scenario) -> list:
    """Return a list describing every invariant ``s`` violates (empty if valid)."""
    out = []
    out += s.fixed.violations()
    out += s.contrasts.violations()
    for key, rs, factor in (
        ("by_participant", s.by_participant, "participant"),
        ("by_item", s.by_item, "item"),
    ):
        out += rs.violations(prefix=key)
        if rs.factor_name != factor:
            out.append(f"{key}: factor_name must be {factor!r}, got {rs.factor_name!r}")
        for t in rs.term_names:
            if t != "intercept" and t not in s.fixed.terms:
                out.append(f"{key}: random term {t!r} has no fixed-effect coefficient")
    if not (np.isfinite(s.residual_sd) and s.residual_sd > 0):
        out.append(f"residual_sd must be > 0, got {s.residual_sd}")
    if s.n_participants < 2:
        out.append(f"n_participants must be >= 2, got {s.n_participants}")
    if s.n_items < 2:
        out.append(f"n_items must be >= 2, got {s.n_items}")
    if s.obs_per_cell < 1:
        out.append(f"obs_per_cell must be >= 1, got {s.obs_per_cell}")
    return out


def check_scenario(s: Scenario) -> Scenario:
    problems = validate_scenario(s)
    if problems:
        raise ValidationError(problems)
    return s


@dataclass(frozen=True)
class VarianceComponents:
    by_participant: RandomStructure
    by_item: RandomStructure
    residual_sd: float

    def to_dict(self) -> dict:
        return {
            "by_participant": self.by_participant.to_dict(),
            "by_item": self.by_item.to_dict(),
            "residual_sd": self.residual_sd,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            RandomStructure.from_dict(d["by_participant"]),
            RandomStructure.from_dict(d["by_item"]),
            float(d["residual_sd"]),
        )


FIT_STATUSES = ("converged", "converged_singular", "failed")


@dataclass(frozen=True)
class FitResult:
    """Outcome of one mixed-model fit.

    ``t_values`` are always ``estimates / std_errors``; ``status`` is
    ``converged_singular`` when the fitted covariance of any random factor
    is singular (a zero sd or a perfect correlation).
    """

    estimates: Mapping
    std_errors: Mapping
    t_values: Mapping
    varcomp: VarianceComponents
    deviance: float
    criterion: str
    status: str
    theta: tuple = ()
    n_obs: int = 0
    n_evals: int = 0
    vcov: tuple = ()
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status != "failed"

    def to_dict(self) -> dict:
        return {
            "estimates": dict(self.estimates),
            "std_errors": dict(self.std_errors),
            "t_values": dict(self.t_values),
            "varcomp": self.varcomp.to_dict(),
            "deviance": self.deviance,
            "criterion": self.criterion,
            "status": self.status,
            "theta": list(self.theta),
            "n_obs": self.n_obs,
            "n_evals": self.n_evals,
            "vcov": [list(r) for r in self.vcov],
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        return cls(
            estimates=dict(d["estimates"]),
            std_errors=dict(d["std_errors"]),
            t_values=dict(d["t_values"]),
            varcomp=VarianceComponents.from_dict(d["varcomp"]),
            deviance=float(d["deviance"]),
            criterion=d["criterion"],
            status=d["status"],
            theta=tuple(d.get("theta", ())),
            n_obs=int(d.get("n_obs", 0)),
            n_evals=int(d.get("n_evals", 0)),
            vcov=tuple(tuple(r) for r in d.get("vcov", ())),
            message=d.get("message", ""),
        )


@dataclass(frozen=True)
class PowerCell:
    n_participants: int
    n_items: int
    n_sim: int
    n_converged: int
    n_significant: int
    residual_sd: Optional[float] = None
    failures: str = "exclude"

    @property
    def denominator(self) -> int:
        """Converged fits, or all replicates when failures count as non-significant."""
        return self.n_sim if self.failures == "nonsig" else self.n_converged

    @property
    def power(self) -> float:
        if self.denominator == 0:
            return float("nan")
        return self.n_significant / self.denominator

    @property
    def mc_se(self) -> float:
        if self.denominator == 0:
            return float("nan")
        p = self.power
        return float(np.sqrt(p * (1.0 - p) / self.denominator))

    @property
    def n_failed(self) -> int:
        return self.n_sim - self.n_converged

    def to_dict(self) -> dict:
        d = {
            "n_participants": self.n_participants,
            "n_items": self.n_items,
            "n_sim": self.n_sim,
            "n_converged": self.n_converged,
            "n_significant": self.n_significant,
            "power": self.power,
            "mc_se": self.mc_se,
        }
        if self.residual_sd is not None:
            d["residual_sd"] = self.residual_sd
        if self.failures != "exclude":
            d["failures"] = self.failures
        return d

    @classmethod
    def from_dict(cls, d) -> "PowerCell":
        return cls(
            int(d["n_participants"]),
            int(d["n_items"]),
            int(d["n_sim"]),
            int(d["n_converged"]),
            int(d["n_significant"]),
            d.get("residual_sd"),
            d.get("failures", "exclude"),
        )


def as_float_tuple(values: Sequence) -> tuple:
    return tuple(float(v) for v in values)


CONDITIONS = ("related", "unrelated")
SETTINGS = ("lab", "online")
REQUIRED_COLUMNS = ("participant_id", "item_id", "condition", "rt_ms")
OPTIONAL_COLUMNS = ("setting", "trial_index", "correct", "replicate")
KEY_COLUMNS = ("participant_id", "item_id", "condition", "replicate")


class TrialTable:
    """Long-format trial data: one row per trial.

    Wraps a :class:`pandas.DataFrame` with columns ``participant_id``,
    ``item_id``, ``condition`` (``"related"``/``"unrelated"``) and ``rt_ms``,
    plus the optional ``setting``, ``trial_index``, ``correct`` and
    ``replicate``.  The frame is copied on construction and should be treated
    as read-only.

    ``require_positive_rt=False`` admits non-positive latencies, which the
    simulator can emit in the far tails of the generative model.
    """

    def __init__(self, data, *, require_positive_rt: bool = True):
        import pandas as pd

        df = pd.DataFrame(data).copy()
        problems = []
        missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
        if missing:
            raise ValidationError(f"missing required column(s): {missing}")
        if len(df) == 0:
            raise ValidationError("trial table is empty")
        df["participant_id"] = df["participant_id"].astype(str)
        df["item_id"] = df["item_id"].astype(str)
        df["condition"] = df["condition"].astype(str)
        bad = sorted(set(df["condition"]) - set(CONDITIONS))
        if bad:
            problems.append(f"unknown condition label(s) {bad}; expected {list(CONDITIONS)}")
        if "setting" in df.columns:
            df["setting"] = df["setting"].astype(str)
            bad = sorted(set(df["setting"]) - set(SETTINGS))
            if bad:
                problems.append(f"unknown setting label(s) {bad}; expected {list(SETTINGS)}")
        try:
            df["rt_ms"] = df["rt_ms"].astype(float)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"rt_ms is not numeric: {exc}") from None
        rt = df["rt_ms"].to_numpy()
        if not np.all(np.isfinite(rt)):
            problems.append("rt_ms has missing or non-finite values")
        if require_positive_rt and np.any(rt <= 0):
            rows = (np.flatnonzero(~(rt > 0)) + 1).tolist()
            problems.append(f"rt_ms must be > 0 (rows {rows[:10]})")
        if "trial_index" in df.columns:
            ti = df["trial_index"]
            if ti.isna().any() or np.any(ti.to_numpy(dtype=float) < 1):
                problems.append("trial_index must be a positive integer on every row")
            else:
                df["trial_index"] = ti.astype(np.int64)
        if "correct" in df.columns:
            df["correct"] = df["correct"].astype(bool)
        if "replicate" not in df.columns:
            df["replicate"] = 0
        df["replicate"] = df["replicate"].astype(np.int64)
        keys = list(KEY_COLUMNS) + (["setting"] if "setting" in df.columns else [])
        dup = df.duplicated(subset=keys, keep=False)
        if dup.any():
            rows = (np.flatnonzero(dup.to_numpy()) + 1).tolist()
            problems.append(f"duplicate (participant, item, condition, replicate) keys at rows {rows[:10]}")
        if problems:
            raise ValidationError(problems)
        self._df = df.reset_index(drop=True)
        self.require_positive_rt = require_positive_rt

    @property
    def data(self):
        return self._df

    @property
    def columns(self):
        return list(self._df.columns)

    def __len__(self):
        return len(self._df)

    def __eq__(self, other):
        if not isinstance(other, TrialTable):
            return NotImplemented
        return self._df.equals(other._df)

    def __repr__(self):
        return (
            f"TrialTable(rows={len(self)}, participants={self._df['participant_id'].nunique()}, "
            f"items={self._df['item_id'].nunique()})"
        )

    def has(self, column: str) -> bool:
        return column in self._df.columns

    def correct_only(self) -> "TrialTable":
        """Drop error trials (``correct == False``) when accuracy is recorded."""
        if "correct" not in self._df.columns:
            return self
        return TrialTable(self._df[self._df["correct"]], require_positive_rt=self.require_positive_rt)

    def subset(self, mask) -> "TrialTable":
        return TrialTable(self._df[np.asarray(mask)], require_positive_rt=self.require_positive_rt)

    def with_rt(self, rt) -> "TrialTable":
        df = self._df.copy()
        df["rt_ms"] = np.asarray(rt, dtype=float)
        return TrialTable(df, require_positive_rt=False)

    @property
    def participants(self) -> list:
        return list(dict.fromkeys(self._df["participant_id"]))

    @property
    def items(self) -> list:
        return list(dict.fromkeys(self._df["item_id"]))


def as_trial_table(obj, *, require_positive_rt: bool = True) -> TrialTable:
    """Coerce a DataFrame (or TrialTable) into a validated TrialTable."""
    if isinstance(obj, TrialTable):
        return obj
    return TrialTable(obj, require_positive_rt=require_positive_rt)
