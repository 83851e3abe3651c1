"""Ordinary least squares with classical inference and forward stepwise
selection, used to predict a candidate's target-domain score.

OLS is solved through QR factorization (normal equations would square the
condition number); rank deficiency is detected with a pivoted QR at a
relative tolerance of 1e-10 of the largest column norm. Two-sided p-values
come from the Student t distribution, whose CDF is computed here via the
regularized incomplete beta function so the package needs no statistics
dependency at runtime.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import InputError, InsufficientDataError, SingularityError

_RANK_RTOL = 1e-10
INTERCEPT = "const"


# ------------------------------------------------------------------ t distribution

def _beta_cont_frac(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iter = 300
    eps = 3e-16
    fpmin = 1e-300
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        a * math.log(x)
        + b * math.log1p(-x)
        - (math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cont_frac(a, b, x) / a
    return 1.0 - front * _beta_cont_frac(b, a, 1.0 - x) / b


def student_t_sf(t: float, dof: float) -> float:
    """P(T > t) for Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = dof / (dof + t * t)
    half_tail = 0.5 * regularized_incomplete_beta(dof / 2.0, 0.5, x)
    return half_tail if t >= 0 else 1.0 - half_tail


def two_sided_p_value(t: float, dof: float) -> float:
    return min(1.0, 2.0 * student_t_sf(abs(t), dof))


# ------------------------------------------------------------------ design + OLS

@dataclass
class DesignMatrix:
    """Named predictor columns and the response; the intercept is implicit
    and always included in fits."""

    terms: list[str]
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.terms):
            raise InputError("X must be (n, len(terms))")
        if self.y.shape != (self.X.shape[0],):
            raise InputError("response length must match the row count")
        if not np.all(np.isfinite(self.X)) or not np.all(np.isfinite(self.y)):
            raise InputError("design contains missing or non-finite values")
        if len(set(self.terms)) != len(self.terms):
            raise InputError("duplicate term names")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def columns(self, terms) -> np.ndarray:
        index = {t: i for i, t in enumerate(self.terms)}
        missing = [t for t in terms if t not in index]
        if missing:
            raise InputError(f"unknown terms: {missing}")
        return self.X[:, [index[t] for t in terms]]


@dataclass
class OlsFit:
    column_names: list[str]  # "const" first, then the terms in order
    beta: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    r2: float
    adjusted_r2: float
    n: int
    dof: int


def ols_fit(design: DesignMatrix, terms=None) -> OlsFit:
    """Least squares of y on an intercept plus the named terms."""
    if terms is None:
        terms = list(design.terms)
    terms = list(terms)
    n = design.n
    k = len(terms)
    if n <= k + 1:
        raise InsufficientDataError(
            f"need more rows than coefficients for inference: n={n}, k+1={k + 1}"
        )
    X = np.column_stack([np.ones(n), design.columns(terms)]) if k else np.ones((n, 1))
    names = [INTERCEPT] + terms

    # rank probe with column pivoting; tolerance relative to the largest column norm
    _, r_piv, pivots = scipy.linalg.qr(X, mode="economic", pivoting=True)
    tol = _RANK_RTOL * float(np.max(np.linalg.norm(X, axis=0)))
    diag = np.abs(np.diag(r_piv))
    deficient = np.nonzero(diag <= tol)[0]
    if deficient.size:
        raise SingularityError(names[pivots[deficient[0]]])

    q, r = np.linalg.qr(X)
    beta = scipy.linalg.solve_triangular(r, q.T @ design.y)
    fitted = X @ beta
    residuals = design.y - fitted
    rss = float(residuals @ residuals)
    dof = n - k - 1
    sigma2 = rss / dof
    r_inv = scipy.linalg.solve_triangular(r, np.eye(k + 1))
    cov_unit = r_inv @ r_inv.T
    se = np.sqrt(np.maximum(np.diag(cov_unit), 0.0) * sigma2)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_stats = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.sign(beta) * np.inf))
    p_vals = np.array([two_sided_p_value(float(tv), dof) for tv in t_stats])

    centered = design.y - design.y.mean()
    tss = float(centered @ centered)
    if tss > 0:
        r2 = 1.0 - rss / tss
    else:  # constant response: any fit is perfect
        r2 = 1.0
    adjusted = 1.0 - (1.0 - r2) * (n - 1) / dof
    return OlsFit(
        column_names=names,
        beta=beta,
        se=se,
        t=t_stats,
        p=p_vals,
        residuals=residuals,
        fitted=fitted,
        r2=r2,
        adjusted_r2=adjusted,
        n=n,
        dof=dof,
    )


# ------------------------------------------------------------------ stepwise

@dataclass
class RegressionModel:
    """Forward-selected linear model with entry-order ΔR² bookkeeping."""

    selected_terms: tuple[str, ...]
    intercept: float
    coef: dict[str, float]
    se: dict[str, float]
    t: dict[str, float]
    p: dict[str, float]
    delta_r2: dict[str, float]  # adjusted-R² gain at the entry round
    adjusted_r2: float
    r2: float
    n: int
    alpha: float
    candidate_terms: tuple[str, ...] = field(default=())

    def predict_features(self, features) -> float:
        value = self.intercept
        for term in self.selected_terms:
            if term not in features:
                raise InputError(f"record is missing selected term {term!r}")
            value += self.coef[term] * float(features[term])
        return value

    def to_json_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "n": self.n,
            "r2": self.r2,
            "adjusted_r2": self.adjusted_r2,
            "candidate_terms": list(self.candidate_terms),
            "intercept": {
                "beta": self.intercept,
                "se": self.se[INTERCEPT],
                "t": self.t[INTERCEPT],
                "p": self.p[INTERCEPT],
            },
            "terms": [
                {
                    "name": term,
                    "beta": self.coef[term],
                    "se": self.se[term],
                    "t": self.t[term],
                    "p": self.p[term],
                    "delta_r2": self.delta_r2[term],
                }
                for term in self.selected_terms
            ],
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "RegressionModel":
        try:
            terms = [row["name"] for row in obj["terms"]]
            return RegressionModel(
                selected_terms=tuple(terms),
                intercept=float(obj["intercept"]["beta"]),
                coef={row["name"]: float(row["beta"]) for row in obj["terms"]},
                se={INTERCEPT: float(obj["intercept"]["se"]),
                    **{row["name"]: float(row["se"]) for row in obj["terms"]}},
                t={INTERCEPT: float(obj["intercept"]["t"]),
                   **{row["name"]: float(row["t"]) for row in obj["terms"]}},
                p={INTERCEPT: float(obj["intercept"]["p"]),
                   **{row["name"]: float(row["p"]) for row in obj["terms"]}},
                delta_r2={row["name"]: float(row["delta_r2"]) for row in obj["terms"]},
                adjusted_r2=float(obj["adjusted_r2"]),
                r2=float(obj["r2"]),
                n=int(obj["n"]),
                alpha=float(obj["alpha"]),
                candidate_terms=tuple(obj.get("candidate_terms", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed regression model JSON: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "RegressionModel":
        with open(path, "r", encoding="utf-8") as fh:
            return RegressionModel.from_json_dict(json.load(fh))


def stepwise_fit(design: DesignMatrix, candidate_terms=None, alpha: float = 0.01) -> RegressionModel:
    """Forward selection: each round adds the not-yet-included term with the
    smallest entry p-value, if below alpha; ties break on larger |t|, then
    on candidate order. Terms whose addition is collinear or leaves no
    residual degrees of freedom cannot enter. An intercept-only model is a
    valid result when nothing is significant."""
    if candidate_terms is None:
        candidate_terms = list(design.terms)
    candidate_terms = list(candidate_terms)
    if not 0.0 < alpha < 1.0:
        raise InputError("alpha must be in (0, 1)")

    included: list[str] = []
    delta_r2: dict[str, float] = {}
    current = ols_fit(design, [])
    current_adj = current.adjusted_r2
    centered = design.y - design.y.mean()
    tss_scale = max(float(centered @ centered), 1e-300)
    while True:
        rss = float(current.residuals @ current.residuals)
        if rss <= 1e-12 * tss_scale:
            break  # perfect fit: no residual left, entry p-values are undefined
        best = None
        for order, term in enumerate(candidate_terms):
            if term in included:
                continue
            try:
                fit = ols_fit(design, included + [term])
            except (SingularityError, InsufficientDataError):
                continue
            entry_p = float(fit.p[-1])
            entry_t = abs(float(fit.t[-1]))
            key = (entry_p, -entry_t, order)
            if best is None or key < best[0]:
                best = (key, term, fit)
        if best is None or best[0][0] >= alpha:
            break
        _, term, fit = best
        included.append(term)
        delta_r2[term] = fit.adjusted_r2 - current_adj
        current_adj = fit.adjusted_r2
        current = fit

    final = ols_fit(design, included)
    by_name = dict(zip(final.column_names, range(len(final.column_names))))
    return RegressionModel(
        selected_terms=tuple(included),
        intercept=float(final.beta[0]),
        coef={t: float(final.beta[by_name[t]]) for t in included},
        se={name: float(final.se[i]) for i, name in enumerate(final.column_names)},
        t={name: float(final.t[i]) for i, name in enumerate(final.column_names)},
        p={name: float(final.p[i]) for i, name in enumerate(final.column_names)},
        delta_r2=delta_r2,
        adjusted_r2=final.adjusted_r2,
        r2=final.r2,
        n=final.n,
        alpha=alpha,
        candidate_terms=tuple(candidate_terms),
    )


def predict(model: RegressionModel, record) -> float:
    """Linear prediction for a candidate record or a plain feature mapping;
    the output is not clipped (ranking drives selection, not calibration)."""
    features = record.features() if hasattr(record, "features") else record
    return model.predict_features(features)
