"""scikit-learn style wrapper around the crossed mixed-model fitter."""
from __future__ import annotations

from typing import Optional

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .core_types import ContrastCoding, TrialTable, ValidationError
from .lmm import FitOptions, ModelSpec, build_design, check_full_rank, conditional_modes, fit_design, wald_test


def check_trial_table(X, y=None, *, require_positive_rt: bool = False) -> TrialTable:
    """Coerce ``X`` (TrialTable or DataFrame) to a TrialTable, replacing ``rt_ms`` by ``y`` if given."""
    if isinstance(X, TrialTable):
        df = X.data.copy()
    elif isinstance(X, pd.DataFrame):
        df = X.copy()
    else:
        raise ValidationError(f"expected a TrialTable or pandas DataFrame, got {type(X).__name__}")
    if y is not None:
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != len(df):
            raise ValidationError(f"y has {y.shape[0]} values for {len(df)} rows")
        df["rt_ms"] = y
    elif "rt_ms" not in df.columns:
        df["rt_ms"] = 1.0  # placeholder so prediction inputs validate
    return TrialTable(df, require_positive_rt=require_positive_rt)


def check_terms(terms, allowed, what: str) -> tuple:
    terms = tuple(terms)
    bad = [t for t in terms if t not in allowed]
    if bad:
        raise ValidationError(f"{what}: unknown term(s) {bad}")
    return terms


class CrossedMixedModel(RegressorMixin, BaseEstimator):
    """Linear mixed model with crossed participant and item random effects.

    ``fit`` takes a trial table (``rt_ms`` is the response unless ``y`` is
    passed); ``predict`` returns fixed part plus predicted random effects,
    with zero random effects for unseen participants or items.
    """

    def __init__(self, fixed_terms=("intercept", "relatedness"),
                 participant_terms=("intercept", "relatedness"),
                 item_terms=("intercept", "relatedness"), criterion="REML",
                 contrasts: Optional[ContrastCoding] = None, max_iter=4000, tol=1e-6, n_restarts=3):
        self.fixed_terms = fixed_terms
        self.participant_terms = participant_terms
        self.item_terms = item_terms
        self.criterion = criterion
        self.contrasts = contrasts
        self.max_iter = max_iter
        self.tol = tol
        self.n_restarts = n_restarts

    def _spec(self) -> ModelSpec:
        return ModelSpec(
            fixed_terms=tuple(self.fixed_terms),
            random_terms=(("participant", tuple(self.participant_terms)), ("item", tuple(self.item_terms))),
            criterion=self.criterion,
        )

    def _contrasts(self) -> ContrastCoding:
        return self.contrasts if self.contrasts is not None else ContrastCoding()

    def fit(self, X, y=None):
        table = check_trial_table(X, y)
        spec = self._spec()
        design = build_design(table, spec, self._contrasts())
        check_full_rank(design.X, design.fixed_terms)
        opts = FitOptions(max_iter=self.max_iter, tol=self.tol, n_restarts=self.n_restarts)
        self.result_ = fit_design(design, spec.criterion, opts)
        self.spec_ = spec
        self.design_ = design
        self.coef_ = dict(self.result_.estimates)
        self.n_features_in_ = len(spec.fixed_terms)
        modes = conditional_modes(design, self.result_) if self.result_.converged else None
        self.random_effects_ = {}
        for f in design.factors:
            vals = modes[f.name] if modes is not None else np.zeros((f.n_levels, f.q))
            self.random_effects_[f.name] = pd.DataFrame(vals, index=list(f.levels), columns=list(f.terms))
        return self

    def predict(self, X, include_random: bool = True) -> np.ndarray:
        check_is_fitted(self, "result_")
        table = check_trial_table(X)
        df = table.data
        from .lmm import term_columns

        beta = np.array([self.coef_[t] for t in self.spec_.fixed_terms])
        pred = term_columns(df, self.spec_.fixed_terms, self._contrasts()) @ beta
        if include_random:
            for f in self.design_.factors:
                col = "participant_id" if f.name == "participant" else "item_id"
                re = self.random_effects_[f.name].reindex(df[col].to_numpy()).fillna(0.0).to_numpy()
                pred = pred + np.einsum("nq,nq->n", term_columns(df, f.terms, self._contrasts()), re)
        return pred

    def wald_test(self, term: str = "relatedness", threshold: float = 1.96) -> dict:
        check_is_fitted(self, "result_")
        return wald_test(self.result_, term, threshold)

    def summary(self) -> str:
        check_is_fitted(self, "result_")
        from .report_text import fit_table

        return fit_table(self.result_)
