"""Gaussian linear mixed models with crossed participant and item factors.

The objective is the profiled deviance: fixed effects and the residual scale
are concentrated out, leaving the relative covariance factors ``theta``.
For each random factor ``f`` with ``q`` terms, ``theta`` holds the lower
triangle (column-major) of a ``q x q`` factor ``T_f`` such that the
random-effect covariance is ``sigma**2 * T_f @ T_f.T``.

Every evaluation works on cross-products that are computed once per
dataset.  The factor with more random-effect columns is block-diagonal in
``Z'Z`` and is eliminated analytically; only the Schur complement of the
other factor needs a dense Cholesky factorization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sps
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .core_types import (
    FIXED_TERMS,
    ContrastCoding,
    FitResult,
    RandomStructure,
    TrialTable,
    ValidationError,
    VarianceComponents,
)

CRITERIA = ("REML", "ML")
SINGULAR_TOL = 1e-4
_LOG2PI = np.log(2.0 * np.pi)


class NumericalError(RuntimeError):
    """Raised when a factorization inside the deviance evaluation breaks down."""


class DegenerateDesignError(ValidationError):
    """Raised for fixed-effect designs that are rank deficient."""


@dataclass(frozen=True)
class ModelSpec:
    """Fixed and random terms of a model plus the estimation criterion.

    ``random_terms`` maps a factor name (``"participant"``/``"item"``) to the
    ordered random terms for that factor.
    """

    fixed_terms: tuple = ("intercept", "relatedness")
    random_terms: tuple = (
        ("participant", ("intercept", "relatedness")),
        ("item", ("intercept", "relatedness")),
    )
    criterion: str = "REML"

    def __post_init__(self):
        rt = self.random_terms
        if isinstance(rt, Mapping):
            rt = rt.items()
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "random_terms", tuple((str(f), tuple(t)) for f, t in rt))
        crit = str(self.criterion).upper()
        object.__setattr__(self, "criterion", crit)
        problems = []
        if "intercept" not in self.fixed_terms:
            problems.append("fixed_terms must contain 'intercept'")
        bad = [t for t in self.fixed_terms if t not in FIXED_TERMS]
        if bad:
            problems.append(f"unknown fixed terms {bad}")
        if crit not in CRITERIA:
            problems.append(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        names = [f for f, _ in self.random_terms]
        if sorted(names) != ["item", "participant"]:
            problems.append(f"random_terms must cover 'participant' and 'item', got {names}")
        for f, terms in self.random_terms:
            if not terms:
                problems.append(f"random terms for {f} are empty")
            for t in terms:
                if t not in self.fixed_terms:
                    problems.append(f"random term {t!r} for {f} is not a fixed term")
        if problems:
            raise ValidationError(problems)

    @property
    def random(self) -> dict:
        return dict(self.random_terms)

    @property
    def n_theta(self) -> int:
        return sum(len(t) * (len(t) + 1) // 2 for _, t in self.random_terms)

    @classmethod
    def maximal(cls, criterion: str = "REML") -> "ModelSpec":
        """Intercept + relatedness with correlated random slopes for both factors."""
        return cls(criterion=criterion)

    @classmethod
    def interaction(cls, criterion: str = "REML") -> "ModelSpec":
        """Two-setting model; settings vary between participants, within items."""
        fixed = FIXED_TERMS
        return cls(
            fixed_terms=fixed,
            random_terms=(("participant", ("intercept", "relatedness")), ("item", fixed)),
            criterion=criterion,
        )

    @classmethod
    def for_scenario(cls, scenario, criterion: str = "REML") -> "ModelSpec":
        return cls(
            fixed_terms=scenario.fixed.terms,
            random_terms=(
                ("participant", scenario.by_participant.term_names),
                ("item", scenario.by_item.term_names),
            ),
            criterion=criterion,
        )

    def to_dict(self) -> dict:
        return {
            "fixed_terms": list(self.fixed_terms),
            "random_terms": {f: list(t) for f, t in self.random_terms},
            "criterion": self.criterion,
        }


@dataclass(frozen=True)
class Factor:
    name: str
    terms: tuple
    levels: tuple
    codes: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def q(self) -> int:
        return len(self.terms)

    @property
    def n_columns(self) -> int:
        return self.n_levels * self.q

    def Z(self) -> sps.csr_matrix:
        """Sparse incidence matrix, ``q`` adjacent columns per level."""
        n = len(self.codes)
        rows = np.repeat(np.arange(n), self.q)
        cols = (self.codes[:, None] * self.q + np.arange(self.q)[None, :]).ravel()
        return sps.csr_matrix((self.values.ravel(), (rows, cols)), shape=(n, self.n_columns))


@dataclass(frozen=True)
class Design:
    """Fixed-effect matrix, random-effect factors and response of one dataset."""

    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    fixed_terms: tuple
    factors: tuple

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def factor(self, name: str) -> Factor:
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    @property
    def Z(self) -> sps.csr_matrix:
        return sps.hstack([f.Z() for f in self.factors]).tocsr()

    def with_response(self, y) -> "Design":
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise ValueError(f"response has shape {y.shape}, expected {self.y.shape}")
        return Design(self.X, y, self.fixed_terms, self.factors)


def term_columns(df, terms: Sequence[str], contrasts: ContrastCoding) -> np.ndarray:
    """Numeric model columns for ``terms`` computed from a trial DataFrame."""
    n = len(df)
    cols = []
    rel = None
    setting = None
    for t in terms:
        if t == "intercept":
            cols.append(np.ones(n))
            continue
        if t in ("relatedness", "setting:relatedness") and rel is None:
            cond = df["condition"].to_numpy()
            rel = np.where(cond == "related", contrasts.related_code, contrasts.unrelated_code)
        if t in ("setting", "setting:relatedness") and setting is None:
            if "setting" not in df.columns:
                raise ValidationError(f"term {t!r} needs a 'setting' column")
            s = df["setting"].to_numpy()
            setting = np.where(s == "online", contrasts.online_code, contrasts.lab_code)
        if t == "relatedness":
            cols.append(rel.astype(float))
        elif t == "setting":
            cols.append(setting.astype(float))
        elif t == "setting:relatedness":
            cols.append((setting * rel).astype(float))
        else:
            raise ValidationError(f"unknown term {t!r}")
    return np.column_stack(cols) if cols else np.empty((n, 0))


def check_full_rank(X: np.ndarray, names: Sequence[str], tol: float = 1e-10) -> None:
    norms = np.linalg.norm(X, axis=0)
    zero = [names[j] for j in np.flatnonzero(norms <= tol)]
    if zero:
        raise DegenerateDesignError(f"fixed-effect column(s) {zero} are identically zero")
    sv = np.linalg.svd(X / norms, compute_uv=False)
    if sv[-1] <= tol * sv[0]:
        raise DegenerateDesignError(f"fixed-effect columns {list(names)} are collinear")


def build_design(table, spec: ModelSpec, contrasts: ContrastCoding = ContrastCoding()) -> Design:
    """Build ``X``, the random-effect factors and ``y`` from a trial table.

    Conditions must be the literal labels ``related``/``unrelated``; anything
    else (including case variants) is rejected by name.
    """
    table = table if isinstance(table, TrialTable) else TrialTable(table, require_positive_rt=False)
    df = table.data
    X = term_columns(df, spec.fixed_terms, contrasts)
    factors = []
    for name, terms in spec.random_terms:
        col = "participant_id" if name == "participant" else "item_id"
        labels = df[col].to_numpy()
        levels, codes = np.unique(labels, return_inverse=True)
        if len(levels) < 2:
            raise ValidationError(f"factor {name!r} needs at least 2 levels, got {len(levels)}")
        values = term_columns(df, terms, contrasts)
        factors.append(Factor(name, tuple(terms), tuple(levels), codes.astype(np.intp), values))
    return Design(X, df["rt_ms"].to_numpy(dtype=float), tuple(spec.fixed_terms), tuple(factors))


def theta_layout(design: Design) -> list:
    """``(start, stop, q)`` slice of theta for each factor, in design order."""
    out, start = [], 0
    for f in design.factors:
        k = f.q * (f.q + 1) // 2
        out.append((start, start + k, f.q))
        start += k
    return out


def theta_lower_bounds(design: Design) -> np.ndarray:
    lb = []
    for f in design.factors:
        rows, cols = np.tril_indices(f.q)
        order = np.lexsort((rows, cols))
        diag = (rows == cols)[order]
        lb.extend(np.where(diag, 0.0, -np.inf))
    return np.array(lb)


def _tril(vec: np.ndarray, q: int) -> np.ndarray:
    T = np.zeros((q, q))
    rows, cols = np.tril_indices(q)
    order = np.lexsort((rows, cols))
    T[rows[order], cols[order]] = vec
    return T


def unpack_theta(theta, design: Design) -> list:
    theta = np.asarray(theta, dtype=float)
    return [_tril(theta[a:b], q) for a, b, q in theta_layout(design)]


def pack_theta(Ts: Sequence[np.ndarray]) -> np.ndarray:
    out = []
    for T in Ts:
        q = T.shape[0]
        rows, cols = np.tril_indices(q)
        order = np.lexsort((rows, cols))
        out.extend(T[rows[order], cols[order]])
    return np.array(out)


def theta_from_structures(structures: Sequence[RandomStructure], residual_sd: float) -> np.ndarray:
    """Relative Cholesky factors of the given covariances (clipped if singular)."""
    Ts = []
    for rs in structures:
        cov = rs.covariance / residual_sd**2
        try:
            T = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            T = np.linalg.cholesky(cov + 1e-12 * np.eye(len(cov)))
        Ts.append(T)
    return pack_theta(Ts)


class _CrossProducts:
    """Response-independent and response-dependent cross-products of a design."""

    def __init__(self, design: Design):
        X = design.X
        self.n, self.p = X.shape
        facs = list(design.factors)
        self.factor_order = [f.name for f in facs]
        if len(facs) == 2 and facs[0].n_columns > facs[1].n_columns:
            dense_idx, elim_idx = 1, 0
        else:
            dense_idx, elim_idx = 0, len(facs) - 1
        self.elim_idx = elim_idx
        self.dense_idx = dense_idx if len(facs) == 2 else None
        self.XtX = X.T @ X
        self.G = []
        self.ZtX = []
        for f in facs:
            L, q = f.n_levels, f.q
            v = f.values
            G = np.zeros((L, q, q))
            ZtX = np.zeros((L, q, self.p))
            for a in range(q):
                for b in range(a, q):
                    s = np.bincount(f.codes, weights=v[:, a] * v[:, b], minlength=L)
                    G[:, a, b] = s
                    G[:, b, a] = s
                for j in range(self.p):
                    ZtX[:, a, j] = np.bincount(f.codes, weights=v[:, a] * X[:, j], minlength=L)
            self.G.append(G)
            self.ZtX.append(ZtX)
        self.C = None
        if self.dense_idx is not None:
            fa, fb = facs[self.dense_idx], facs[self.elim_idx]
            La, Lb, qa, qb = fa.n_levels, fb.n_levels, fa.q, fb.q
            idx = fa.codes * Lb + fb.codes
            C = np.zeros((La, qa, Lb, qb))
            for a in range(qa):
                for b in range(qb):
                    w = fa.values[:, a] * fb.values[:, b]
                    C[:, a, :, b] = np.bincount(idx, weights=w, minlength=La * Lb).reshape(La, Lb)
            self.C = C
        self.balanced = self._detect_balance()
        self.design = design
        self.set_response(design.y)

    def _detect_balance(self) -> bool:
        # every level shares one Z'Z block, one Z'X block, and one cross block
        if self.dense_idx is None:
            return False
        for G, ZtX in zip(self.G, self.ZtX):
            if not (np.allclose(G, G[:1], rtol=1e-12, atol=0) and np.allclose(ZtX, ZtX[:1], rtol=1e-12, atol=1e-12)):
                return False
        K = self.C[:1, :, :1, :]
        return bool(np.allclose(self.C, K, rtol=1e-12, atol=0))

    def set_response(self, y: np.ndarray) -> None:
        y = np.asarray(y, dtype=float)
        self.y_center = float(y.mean())
        sd = float(y.std())
        self.y_scale = sd if sd > 0 else 1.0
        ys = (y - self.y_center) / self.y_scale
        X = self.design.X
        self.Xty = X.T @ ys
        self.yty = float(ys @ ys)
        self.ZtR = []
        for f, ZtX in zip(self.design.factors, self.ZtX):
            L, q = f.n_levels, f.q
            Zty = np.zeros((L, q, 1))
            for a in range(q):
                Zty[:, a, 0] = np.bincount(f.codes, weights=f.values[:, a] * ys, minlength=L)
            self.ZtR.append(np.concatenate([Zty, ZtX], axis=2))
        self._stats = None

    def kernel_args(self, reml: bool) -> tuple:
        """Argument tuple for the compiled balanced-design kernels."""
        from ._kernels import balanced_statistics

        d, e = self.dense_idx, self.elim_idx
        if self._stats is None:
            self._stats = balanced_statistics(self.G[d], self.G[e], self.C, self.ZtR[d], self.ZtR[e])
        layout = theta_layout(self.design)
        return (
            layout[d][0], layout[d][2], layout[e][0], layout[e][2],
            float(self.G[d].shape[0]), float(self.G[e].shape[0]),
            *self._stats,
            np.ascontiguousarray(self.XtX), np.ascontiguousarray(self.Xty),
            float(self.yty), float(self.n), bool(reml),
        )


@dataclass
class _Evaluation:
    deviance: float
    beta: np.ndarray
    r2: float
    logdet_A: float
    logdet_X: float
    RX: np.ndarray


def _evaluate(theta, cp: _CrossProducts, reml: bool) -> _Evaluation:
    if cp.balanced:
        quad, logdet = _quad_balanced(theta, cp)
    else:
        quad, logdet = _quad_general(theta, cp)
    return _finish(quad, logdet, cp, reml)


def _quad_balanced(theta, cp: _CrossProducts):
    """Fully crossed balanced designs.

    All blocks of ``Z'Z`` coincide, so the Schur complement of the dense
    factor is ``I (x) Aa - J (x) Q``: it acts as ``Aa`` on deviations from the
    level mean and as ``Aa - La*Q`` on the mean itself.
    """
    Ts = unpack_theta(theta, cp.design)
    e, d = cp.elim_idx, cp.dense_idx
    Ta, Tb = Ts[d], Ts[e]
    Ga, Gb = cp.G[d][0], cp.G[e][0]
    La, Lb = cp.G[d].shape[0], cp.G[e].shape[0]
    qa, qb = Ta.shape[0], Tb.shape[0]
    K = cp.C[0, :, 0, :]
    try:
        Lbc = np.linalg.cholesky(Tb.T @ Gb @ Tb + np.eye(qb))
        Mb = solve_triangular(Lbc, np.eye(qb), lower=True, check_finite=False)
        Rb = np.matmul(Mb @ Tb.T, cp.ZtR[e])
        quad = np.einsum("kim,kin->mn", Rb, Rb)
        E = Ta.T @ K @ Tb @ Mb.T
        Aa = Ta.T @ Ga @ Ta + np.eye(qa)
        W = Aa - (La * Lb) * (E @ E.T)
        Rt = np.matmul(Ta.T, cp.ZtR[d]) - E @ Rb.sum(axis=0)
        Rbar = Rt.mean(axis=0)
        Dev = Rt - Rbar
        La_c = np.linalg.cholesky(Aa)
        W_c = np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"factorization failed: {exc}") from None
    Y = np.matmul(np.linalg.inv(La_c), Dev)
    quad += np.einsum("kim,kin->mn", Y, Y)
    Z = solve_triangular(W_c, Rbar, lower=True, check_finite=False)
    quad += La * (Z.T @ Z)
    logdet = (
        2.0 * Lb * np.log(np.diag(Lbc)).sum()
        + 2.0 * (La - 1) * np.log(np.diag(La_c)).sum()
        + 2.0 * np.log(np.diag(W_c)).sum()
    )
    return quad, float(logdet)


def _quad_general(theta, cp: _CrossProducts):
    Ts = unpack_theta(theta, cp.design)
    p = cp.p
    quad = np.zeros((p + 1, p + 1))
    logdet = 0.0

    # block-diagonal elimination of one factor
    e = cp.elim_idx
    Tb = Ts[e]
    Gb = cp.G[e]
    Lb, qb = Gb.shape[0], Gb.shape[1]
    Ab = np.matmul(np.matmul(Tb.T, Gb), Tb)
    Ab[:, np.arange(qb), np.arange(qb)] += 1.0
    try:
        Lchol = np.linalg.cholesky(Ab)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"block factorization failed: {exc}") from None
    logdet += 2.0 * np.log(np.diagonal(Lchol, axis1=1, axis2=2)).sum()
    Minv = np.linalg.inv(Lchol)
    Rb = np.matmul(Minv, np.matmul(Tb.T, cp.ZtR[e]))
    quad += np.einsum("kim,kin->mn", Rb, Rb)

    if cp.dense_idx is not None:
        d = cp.dense_idx
        Ta = Ts[d]
        Ga = cp.G[d]
        La, qa = Ga.shape[0], Ga.shape[1]
        Aa = np.matmul(np.matmul(Ta.T, Ga), Ta)
        Aa[:, np.arange(qa), np.arange(qa)] += 1.0
        Ra = np.matmul(Ta.T, cp.ZtR[d]).reshape(La * qa, p + 1)
        # B = Ta' C Tb, then whiten the eliminated side with Minv
        B = np.matmul(Ta.T, cp.C.reshape(La, qa, Lb * qb))
        B = np.matmul(B.reshape(La * qa * Lb, qb), Tb).reshape(La * qa, Lb, qb)
        Bt = np.matmul(B.transpose(1, 0, 2), Minv.transpose(0, 2, 1))
        Bt = Bt.transpose(1, 0, 2).reshape(La * qa, Lb * qb)
        S = -(Bt @ Bt.T)
        for j in range(qa):
            for k in range(qa):
                S[np.arange(La) * qa + j, np.arange(La) * qa + k] += Aa[:, j, k]
        Rt = Ra - Bt @ Rb.reshape(Lb * qb, p + 1)
        try:
            LS = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"Schur complement factorization failed: {exc}") from None
        logdet += 2.0 * np.log(np.diag(LS)).sum()
        W = solve_triangular(LS, Rt, lower=True, check_finite=False)
        quad += W.T @ W
    return quad, logdet


def _finish(quad, logdet, cp: _CrossProducts, reml: bool) -> _Evaluation:
    p = cp.p
    M = cp.XtX - quad[1:, 1:]
    rhs = cp.Xty - quad[1:, 0]
    try:
        RX = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"fixed-effect factorization failed: {exc}") from None
    beta = cho_solve((RX, True), rhs, check_finite=False)
    r2 = cp.yty - quad[0, 0] - float(rhs @ beta)
    if not r2 > 0:
        raise NumericalError(f"non-positive penalized residual sum of squares ({r2})")
    logdet_X = 2.0 * np.log(np.diag(RX)).sum()
    n = cp.n
    if reml:
        dof = n - p
        dev = logdet + logdet_X + dof * (1.0 + _LOG2PI + np.log(r2 / dof))
    else:
        dev = logdet + n * (1.0 + _LOG2PI + np.log(r2 / n))
    return _Evaluation(float(dev), beta, float(r2), float(logdet), float(logdet_X), RX)


def _scale_offset(cp: _CrossProducts, reml: bool) -> float:
    dof = cp.n - cp.p if reml else cp.n
    return dof * np.log(cp.y_scale**2)


def profiled_deviance(theta, design: Design, criterion: str = "REML") -> float:
    """Profiled ML or REML deviance at ``theta`` (beta and sigma concentrated out)."""
    reml = _criterion(criterion)
    theta = np.asarray(theta, dtype=float)
    n_theta = theta_layout(design)[-1][1]
    if theta.shape != (n_theta,):
        raise ValueError(f"theta has length {theta.size}, expected {n_theta}")
    cp = _CrossProducts(design)
    return _evaluate(theta, cp, reml).deviance + _scale_offset(cp, reml)


def dense_deviance(theta, design: Design, criterion: str = "REML") -> float:
    """Reference deviance from the explicit marginal covariance ``V``.

    Builds ``V = Z Lambda Lambda' Z' + I`` (in units of sigma**2) and
    evaluates the likelihood directly.  Only practical for small ``n``.
    """
    reml = _criterion(criterion)
    X, y = design.X, design.y
    n, p = X.shape
    blocks = []
    for T, f in zip(unpack_theta(theta, design), design.factors):
        blocks.append(np.kron(np.eye(f.n_levels), T))
    Lam = np.zeros((sum(b.shape[0] for b in blocks),) * 2)
    o = 0
    for b in blocks:
        Lam[o : o + b.shape[0], o : o + b.shape[0]] = b
        o += b.shape[0]
    ZL = design.Z.toarray() @ Lam
    V = ZL @ ZL.T + np.eye(n)
    _, logdet_V = np.linalg.slogdet(V)
    Vi = np.linalg.inv(V)
    XtViX = X.T @ Vi @ X
    beta = np.linalg.solve(XtViX, X.T @ Vi @ y)
    res = y - X @ beta
    r2 = float(res @ Vi @ res)
    if reml:
        dof = n - p
        return float(logdet_V + np.linalg.slogdet(XtViX)[1] + dof * (1 + _LOG2PI + np.log(r2 / dof)))
    return float(logdet_V + n * (1 + _LOG2PI + np.log(r2 / n)))


def ols_deviance(design: Design, criterion: str = "REML") -> float:
    """Gaussian deviance of the ordinary least-squares fit of y on X."""
    reml = _criterion(criterion)
    X, y = design.X, design.y
    n, p = X.shape
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((y - X @ beta) ** 2))
    if reml:
        dof = n - p
        return float(np.linalg.slogdet(X.T @ X)[1] + dof * (1 + _LOG2PI + np.log(rss / dof)))
    return float(n * (1 + _LOG2PI + np.log(rss / n)))


def _criterion(criterion: str) -> bool:
    c = str(criterion).upper()
    if c not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    return c == "REML"


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 4000
    tol: float = 1e-6
    n_restarts: int = 3
    start: float = 0.5


def _structure_from_factor(name, terms, T, sigma) -> RandomStructure:
    cov = sigma**2 * (T @ T.T)
    sds = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    q = len(sds)
    corr = np.eye(q)
    for i in range(q):
        for j in range(q):
            if i != j and sds[i] > 0 and sds[j] > 0:
                corr[i, j] = np.clip(cov[i, j] / (sds[i] * sds[j]), -1.0, 1.0)
    return RandomStructure(name, tuple(terms), tuple(sds), corr)


def is_singular(theta, design: Design, tol: float = SINGULAR_TOL) -> bool:
    """True when any fitted random-effect covariance is (numerically) singular."""
    return any(np.any(np.abs(np.diag(T)) < tol) for T in unpack_theta(theta, design))


@dataclass
class _Run:
    x: np.ndarray
    fun: float
    success: bool
    n_evals: int
    message: str


def _search_general(cp: _CrossProducts, reml: bool, x0, lb, opts: FitOptions) -> _Run:
    n_evals = 0

    def objective(th):
        nonlocal n_evals
        n_evals += 1
        try:
            return _evaluate(th, cp, reml).deviance
        except NumericalError:
            return np.inf

    bounds = [(lo if np.isfinite(lo) else None, None) for lo in lb]
    res = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        bounds=bounds,
        options={
            "xatol": opts.tol,
            "fatol": opts.tol,
            "maxiter": opts.max_iter,
            "maxfev": 2 * opts.max_iter,
            "adaptive": len(x0) > 4,
        },
    )
    return _Run(np.asarray(res.x, dtype=float), float(res.fun), bool(res.success), n_evals, str(res.message))


_NM_MESSAGES = {
    0: "Optimization terminated successfully.",
    1: "Maximum number of function evaluations has been exceeded.",
    2: "Maximum number of iterations has been exceeded.",
}


def _search_balanced(cp: _CrossProducts, reml: bool, x0, lb, opts: FitOptions) -> _Run:
    from ._kernels import nelder_mead

    x, fun, nfev, _, status = nelder_mead(
        np.asarray(x0, dtype=float), lb, opts.tol, opts.tol, opts.max_iter, 2 * opts.max_iter,
        len(x0) > 4, *cp.kernel_args(reml),
    )
    return _Run(x, float(fun), status == 0, int(nfev), _NM_MESSAGES[int(status)])


def fit_design(design: Design, criterion: str = "REML", options: Optional[FitOptions] = None,
               _cp: Optional[_CrossProducts] = None) -> FitResult:
    """Fit a prepared design by minimizing the profiled deviance.

    A bounded Nelder-Mead search starts from relative sds of ``options.start``
    with zero correlations; up to ``n_restarts - 1`` further searches start
    from perturbed copies of the incumbent and stop as soon as one fails to
    improve on it.
    """
    opts = options or FitOptions()
    reml = _criterion(criterion)
    cp = _cp if _cp is not None else _CrossProducts(design)
    lb = theta_lower_bounds(design)
    search = _search_balanced if cp.balanced else _search_general

    x0 = np.zeros(lb.size)
    for (a, b, q) in theta_layout(design):
        x0[a:b] = pack_theta([opts.start * np.eye(q)])
    best = search(cp, reml, x0, lb, opts)
    n_evals = best.n_evals
    any_success = best.success
    rng = np.random.default_rng(20240611)
    for _ in range(max(opts.n_restarts - 1, 0)):
        start = np.maximum(best.x + rng.normal(scale=0.05, size=best.x.size), lb)
        res = search(cp, reml, start, lb, opts)
        n_evals += res.n_evals
        any_success |= res.success
        improved = res.fun < best.fun - opts.tol
        if res.fun < best.fun:
            best = res
        if not improved and any_success:
            break

    theta = best.x
    try:
        ev = _evaluate(theta, cp, reml)
    except NumericalError as exc:
        return _failed_result(design, criterion, n_evals, str(exc))
    if not any_success:
        status = "failed"
    elif is_singular(theta, design):
        status = "converged_singular"
    else:
        status = "converged"
    return _assemble(design, cp, theta, ev, reml, status, n_evals, best.message)


def _assemble(design, cp, theta, ev: _Evaluation, reml, status, n_evals, message) -> FitResult:
    n, p = cp.n, cp.p
    s = cp.y_scale
    dof = n - p if reml else n
    sigma_std = np.sqrt(ev.r2 / dof)
    sigma = sigma_std * s
    beta = ev.beta * s
    beta[list(design.fixed_terms).index("intercept")] += cp.y_center
    RXinv = solve_triangular(ev.RX, np.eye(p), lower=True)
    vcov = (sigma**2) * (RXinv.T @ RXinv)
    se = np.sqrt(np.diag(vcov))
    names = design.fixed_terms
    Ts = unpack_theta(theta, design)
    structs = {f.name: _structure_from_factor(f.name, f.terms, T, sigma) for f, T in zip(design.factors, Ts)}
    return FitResult(
        estimates={t: float(b) for t, b in zip(names, beta)},
        std_errors={t: float(e) for t, e in zip(names, se)},
        t_values={t: float(b / e) for t, b, e in zip(names, beta, se)},
        varcomp=VarianceComponents(structs["participant"], structs["item"], float(sigma)),
        deviance=float(ev.deviance + _scale_offset(cp, reml)),
        criterion="REML" if reml else "ML",
        status=status,
        theta=tuple(float(t) for t in theta),
        n_obs=int(n),
        n_evals=int(n_evals),
        vcov=tuple(tuple(float(v) for v in row) for row in vcov),
        message=message,
    )


def _failed_result(design, criterion, n_evals, message) -> FitResult:
    nan = float("nan")
    names = design.fixed_terms
    structs = {
        f.name: RandomStructure(f.name, f.terms, (nan,) * f.q, np.eye(f.q)) for f in design.factors
    }
    return FitResult(
        estimates={t: nan for t in names},
        std_errors={t: nan for t in names},
        t_values={t: nan for t in names},
        varcomp=VarianceComponents(structs["participant"], structs["item"], nan),
        deviance=nan,
        criterion=str(criterion).upper(),
        status="failed",
        n_obs=design.n_obs,
        n_evals=n_evals,
        message=message,
    )


def fit_lmm(table, spec: ModelSpec = ModelSpec(), contrasts: ContrastCoding = ContrastCoding(),
            options: Optional[FitOptions] = None) -> FitResult:
    """Fit a crossed random-effects model to a trial table by ML or REML."""
    design = build_design(table, spec, contrasts)
    check_full_rank(design.X, design.fixed_terms)
    return fit_design(design, spec.criterion, options)


def wald_test(fit: FitResult, term: str, threshold: float = 1.96) -> dict:
    """Two-sided Wald decision: significant when ``|estimate / se| >= threshold``."""
    if term not in fit.t_values:
        raise KeyError(f"unknown term {term!r}; fitted terms are {list(fit.t_values)}")
    t = fit.t_values[term]
    return {"t": t, "significant": bool(np.isfinite(t) and abs(t) >= threshold)}


def conditional_modes(design: Design, fit: FitResult) -> dict:
    """Predicted random effects (BLUPs) per factor, ``levels x q`` in ms."""
    Ts = unpack_theta(fit.theta, design)
    Lam = sps.block_diag([sps.kron(sps.identity(f.n_levels), T) for f, T in zip(design.factors, Ts)]).tocsr()
    ZL = (design.Z @ Lam).tocsc()
    beta = np.array([fit.estimates[t] for t in design.fixed_terms])
    A = (ZL.T @ ZL).toarray() + np.eye(ZL.shape[1])
    u = np.linalg.solve(A, ZL.T @ (design.y - design.X @ beta))
    b = Lam @ u
    out, o = {}, 0
    for f in design.factors:
        out[f.name] = b[o : o + f.n_columns].reshape(f.n_levels, f.q)
        o += f.n_columns
    return out


def simulate_from_fit(design: Design, fit: FitResult, seed) -> np.ndarray:
    """Draw a response vector from a fitted model on the same design (parametric bootstrap)."""
    from .simulate import child_seq, draw_random_effects, substream

    beta = np.array([fit.estimates[t] for t in design.fixed_terms])
    y = design.X @ beta
    structs = {"participant": fit.varcomp.by_participant, "item": fit.varcomp.by_item}
    for k, f in enumerate(design.factors):
        eff = draw_random_effects(structs[f.name], f.n_levels, child_seq(seed, k))
        y = y + np.einsum("nq,nq->n", f.values, eff[f.codes])
    y = y + fit.varcomp.residual_sd * substream(seed, len(design.factors)).standard_normal(design.n_obs)
    return y


def bootstrap_quantities(fit: FitResult) -> dict:
    """Flat ms-scale quantities reported with bootstrap intervals."""
    out = {f"fixed:{t}": v for t, v in fit.estimates.items()}
    for rs in (fit.varcomp.by_participant, fit.varcomp.by_item):
        for t, sd in zip(rs.term_names, rs.sds):
            out[f"sd:{rs.factor_name}:{t}"] = float(sd)
        corr = np.asarray(rs.corr)
        for i in range(rs.dim):
            for j in range(i):
                out[f"corr:{rs.factor_name}:{rs.term_names[j]}:{rs.term_names[i]}"] = float(corr[i, j])
    out["sd:residual"] = fit.varcomp.residual_sd
    return out


def parametric_bootstrap(design: Design, fit: FitResult, n_boot: int, seed,
                         options: Optional[FitOptions] = None, level: float = 0.95) -> dict:
    """Percentile intervals from refits to data drawn from ``fit``.

    Draw ``b`` uses the child stream ``(seed, b)``; failed refits are skipped
    and counted.
    """
    from .simulate import child_seq

    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    cp = _CrossProducts(design)
    names = list(bootstrap_quantities(fit))
    draws = []
    n_failed = 0
    for b in range(n_boot):
        y = simulate_from_fit(design, fit, child_seq(seed, b))
        cp.set_response(y)
        refit = fit_design(design.with_response(y), fit.criterion, options, _cp=cp)
        if not refit.converged:
            n_failed += 1
            continue
        q = bootstrap_quantities(refit)
        draws.append([q[k] for k in names])
    alpha = (1.0 - level) / 2.0
    intervals = {}
    if draws:
        arr = np.asarray(draws)
        lo, hi = np.quantile(arr, [alpha, 1.0 - alpha], axis=0)
        intervals = {k: (float(a), float(c)) for k, a, c in zip(names, lo, hi)}
    return {"intervals": intervals, "n_boot": n_boot, "n_failed": n_failed, "level": level}
