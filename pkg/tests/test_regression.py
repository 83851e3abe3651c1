import json

import mpmath
import numpy as np
import pytest
import scipy.stats

from prunewise.errors import InputError, InsufficientDataError, SingularityError
from prunewise.regression import (
    INTERCEPT,
    DesignMatrix,
    RegressionModel,
    ols_fit,
    predict,
    regularized_incomplete_beta,
    stepwise_fit,
    student_t_sf,
    two_sided_p_value,
)


def make_design(rng, n=50, k=3, noise=1.0, beta=None):
    X = rng.normal(size=(n, k))
    if beta is None:
        y = rng.normal(size=n)
    else:
        y = X @ np.asarray(beta) + rng.normal(scale=noise, size=n)
    return DesignMatrix(terms=[f"x{i}" for i in range(k)], X=X, y=y)


def normal_equations_oracle(X_cols, y):
    """Solve (X'X) b = X'y in 50-digit arithmetic. X_cols excludes the
    intercept; one is prepended here, independently of the library."""
    n = len(y)
    X = [[mpmath.mpf(1)] + [mpmath.mpf(v) for v in row] for row in X_cols]
    k1 = len(X[0])
    xtx = mpmath.matrix(k1, k1)
    xty = mpmath.matrix(k1, 1)
    for i in range(k1):
        for j in range(k1):
            xtx[i, j] = mpmath.fsum(X[r][i] * X[r][j] for r in range(n))
        xty[i] = mpmath.fsum(X[r][i] * mpmath.mpf(y[r]) for r in range(n))
    sol = mpmath.lu_solve(xtx, xty)
    return np.array([float(sol[i]) for i in range(k1)])


# ---------------------------------------------------------------- t distribution

def test_t_cdf_matches_scipy_oracle():
    points = [(0.0, 5), (1.0, 3), (-1.0, 3), (2.5, 10), (-2.5, 10),
              (0.31, 7), (4.2, 2), (-3.7, 30), (1.96, 100), (6.0, 1)]
    for t, dof in points:
        want = float(scipy.stats.t.sf(t, dof))
        assert student_t_sf(t, dof) == pytest.approx(want, abs=1e-6)


def test_two_sided_p_matches_scipy():
    for t, dof in [(0.5, 4), (2.0, 12), (-2.0, 12), (10.0, 50)]:
        want = 2 * float(scipy.stats.t.sf(abs(t), dof))
        assert two_sided_p_value(t, dof) == pytest.approx(want, abs=1e-6, rel=1e-6)


def test_incbeta_matches_scipy():
    import scipy.special

    rng = np.random.default_rng(0)
    for _ in range(30):
        a = float(rng.uniform(0.2, 30))
        b = float(rng.uniform(0.2, 30))
        x = float(rng.uniform(0, 1))
        assert regularized_incomplete_beta(a, b, x) == pytest.approx(
            float(scipy.special.betainc(a, b, x)), abs=1e-10
        )


# ---------------------------------------------------------------- OLS

def test_ols_exact_line():
    x = np.arange(10, dtype=float)
    design = DesignMatrix(terms=["x"], X=x[:, None], y=2 * x)
    fit = ols_fit(design)
    assert fit.beta == pytest.approx([0.0, 2.0], abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert np.max(np.abs(fit.residuals)) < 1e-10


def test_ols_matches_extended_precision_oracle():
    rng = np.random.default_rng(5)
    for trial in range(10):
        design = make_design(rng, n=50, k=3)
        fit = ols_fit(design)
        want = normal_equations_oracle(design.X.tolist(), design.y.tolist())
        assert np.max(np.abs(fit.beta - want)) < 1e-8


def test_ols_standard_errors_match_scipy_linregress():
    rng = np.random.default_rng(6)
    x = rng.normal(size=40)
    y = 1.5 * x + rng.normal(size=40)
    fit = ols_fit(DesignMatrix(terms=["x"], X=x[:, None], y=y))
    ref = scipy.stats.linregress(x, y)
    assert fit.beta[1] == pytest.approx(ref.slope, rel=1e-10)
    assert fit.se[1] == pytest.approx(ref.stderr, rel=1e-8)
    assert fit.p[1] == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-12)


def test_ols_duplicated_column_raises_singularity_with_name():
    rng = np.random.default_rng(7)
    x = rng.normal(size=30)
    X = np.column_stack([x, x])
    with pytest.raises(SingularityError) as exc:
        ols_fit(DesignMatrix(terms=["a", "b"], X=X, y=rng.normal(size=30)))
    assert exc.value.column in ("a", "b")


def test_ols_constant_column_collides_with_intercept():
    X = np.ones((20, 1))
    with pytest.raises(SingularityError):
        ols_fit(DesignMatrix(terms=["ones"], X=X, y=np.arange(20.0)))


def test_ols_insufficient_rows():
    X = np.eye(3)
    with pytest.raises(InsufficientDataError):
        ols_fit(DesignMatrix(terms=["a", "b", "c"], X=X, y=np.ones(3)))


def test_ols_normal_equations_invariant():
    rng = np.random.default_rng(8)
    for _ in range(20):
        design = make_design(rng, n=60, k=4, beta=[1.0, -2.0, 0.5, 0.0], noise=0.3)
        fit = ols_fit(design)
        X = np.column_stack([np.ones(design.n), design.X])
        assert np.max(np.abs(X.T @ fit.residuals)) < 1e-8


def test_adjusted_r2_formula_exact():
    rng = np.random.default_rng(9)
    design = make_design(rng, n=24, k=2, beta=[1.0, 0.2], noise=0.5)
    fit = ols_fit(design)
    n, k = 24, 2
    want = 1 - (1 - fit.r2) * (n - 1) / (n - k - 1)
    assert fit.adjusted_r2 == pytest.approx(want, abs=1e-12)


def test_ols_subset_of_terms():
    rng = np.random.default_rng(10)
    design = make_design(rng, n=40, k=3)
    fit = ols_fit(design, ["x2", "x0"])
    assert fit.column_names == [INTERCEPT, "x2", "x0"]


# ---------------------------------------------------------------- stepwise

def brute_force_forward_selection(design, alpha=0.01):
    """Independent re-implementation: lstsq for coefficients, explicit
    covariance for standard errors, scipy for p-values."""

    def fit_p_t(term_list):
        X = np.column_stack([np.ones(design.n)] + [design.columns([t])[:, 0] for t in term_list])
        beta, _, rank, _ = np.linalg.lstsq(X, design.y, rcond=None)
        if rank < X.shape[1]:
            return None
        resid = design.y - X @ beta
        dof = design.n - X.shape[1]
        if dof <= 0:
            return None
        sigma2 = float(resid @ resid) / dof
        cov = sigma2 * np.linalg.inv(X.T @ X)
        se = np.sqrt(np.diag(cov))
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf * np.sign(beta)))
        p = 2 * scipy.stats.t.sf(np.abs(t), dof)
        return p[-1], abs(t[-1])

    included = []
    while True:
        best = None
        for order, term in enumerate(design.terms):
            if term in included:
                continue
            res = fit_p_t(included + [term])
            if res is None:
                continue
            key = (res[0], -res[1], order)
            if best is None or key < best[0]:
                best = (key, term)
        if best is None or best[0][0] >= alpha:
            break
        included.append(best[1])
    return included


def test_stepwise_selects_only_the_signal_variable():
    rng = np.random.default_rng(11)
    n = 200
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    y = 3.0 * x1 + rng.normal(scale=0.01, size=n)
    design = DesignMatrix(terms=["x1", "x2"], X=np.column_stack([x1, x2]), y=y)
    model = stepwise_fit(design)
    assert model.selected_terms == ("x1",)
    assert model.coef["x1"] == pytest.approx(3.0, abs=0.01)
    assert brute_force_forward_selection(design) == ["x1"]


def test_stepwise_all_noise_gives_intercept_only():
    rng = np.random.default_rng(12)
    design = make_design(rng, n=120, k=4)
    model = stepwise_fit(design, alpha=0.001)
    assert model.selected_terms == ()
    assert model.intercept == pytest.approx(float(design.y.mean()), abs=1e-10)


def test_stepwise_path_matches_bruteforce_oracle():
    rng = np.random.default_rng(13)
    for trial in range(20):
        k = 6
        X = rng.normal(size=(100, k))
        true_beta = rng.choice([0.0, 0.0, 0.5, -1.0, 2.0], size=k)
        y = X @ true_beta + rng.normal(scale=1.0, size=100)
        design = DesignMatrix(terms=[f"x{i}" for i in range(k)], X=X, y=y)
        model = stepwise_fit(design, alpha=0.01)
        assert list(model.selected_terms) == brute_force_forward_selection(design, alpha=0.01)


def test_stepwise_invariant_to_row_permutation():
    rng = np.random.default_rng(14)
    design = make_design(rng, n=80, k=5, beta=[1, 0, -1, 0, 0.5], noise=0.5)
    model_a = stepwise_fit(design)
    perm = rng.permutation(design.n)
    design_b = DesignMatrix(terms=design.terms, X=design.X[perm], y=design.y[perm])
    model_b = stepwise_fit(design_b)
    assert model_a.selected_terms == model_b.selected_terms
    for t in model_a.selected_terms:
        assert model_a.coef[t] == pytest.approx(model_b.coef[t], rel=1e-9)


def test_stepwise_delta_r2_sums_to_final_adjusted_r2():
    rng = np.random.default_rng(15)
    design = make_design(rng, n=150, k=4, beta=[2.0, -1.0, 0.0, 0.0], noise=0.5)
    model = stepwise_fit(design)
    assert sum(model.delta_r2.values()) == pytest.approx(model.adjusted_r2, abs=1e-10)


def test_stepwise_skips_collinear_candidates():
    rng = np.random.default_rng(16)
    x1 = rng.normal(size=100)
    y = 2 * x1 + rng.normal(scale=0.1, size=100)
    X = np.column_stack([x1, x1])  # x2 duplicates x1
    design = DesignMatrix(terms=["x1", "x2"], X=X, y=y)
    model = stepwise_fit(design)
    assert model.selected_terms == ("x1",)


def test_design_matrix_validation():
    with pytest.raises(InputError):
        DesignMatrix(terms=["a"], X=np.array([[1.0], [np.nan]]), y=np.array([1.0, 2.0]))
    with pytest.raises(InputError):
        DesignMatrix(terms=["a", "a"], X=np.ones((3, 2)), y=np.ones(3))
    with pytest.raises(InputError):
        DesignMatrix(terms=["a"], X=np.ones((3, 1)), y=np.ones(4))


# ---------------------------------------------------------------- predict

def test_predict_intercept_only_is_constant():
    rng = np.random.default_rng(17)
    design = make_design(rng, n=50, k=2)
    model = stepwise_fit(design, alpha=1e-6)
    assert predict(model, {"anything": 1.0}) == model.intercept


def test_predict_hand_built_model():
    model = RegressionModel(
        selected_terms=("f1_s",),
        intercept=0.1,
        coef={"f1_s": 0.5},
        se={INTERCEPT: 0.0, "f1_s": 0.0},
        t={INTERCEPT: 0.0, "f1_s": 0.0},
        p={INTERCEPT: 1.0, "f1_s": 1.0},
        delta_r2={"f1_s": 0.0},
        adjusted_r2=0.0,
        r2=0.0,
        n=10,
        alpha=0.01,
    )
    assert predict(model, {"f1_s": 0.8}) == pytest.approx(0.5)


def test_predict_missing_term_raises():
    model = RegressionModel(
        selected_terms=("a",), intercept=0.0, coef={"a": 1.0},
        se={INTERCEPT: 0.0, "a": 0.0}, t={INTERCEPT: 0.0, "a": 0.0},
        p={INTERCEPT: 1.0, "a": 1.0}, delta_r2={"a": 0.0},
        adjusted_r2=0.0, r2=0.0, n=5, alpha=0.01,
    )
    with pytest.raises(InputError):
        predict(model, {"b": 1.0})


def test_predict_reproduces_fitted_values():
    rng = np.random.default_rng(18)
    design = make_design(rng, n=60, k=3, beta=[1.0, -0.5, 0.2], noise=0.2)
    model = stepwise_fit(design, alpha=0.5)
    fit = ols_fit(design, list(model.selected_terms))
    for i in range(design.n):
        features = {t: design.X[i][design.terms.index(t)] for t in model.selected_terms}
        assert predict(model, features) == pytest.approx(float(fit.fitted[i]), abs=1e-12)


def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(19)
    design = make_design(rng, n=100, k=3, beta=[1.0, 0.0, -2.0], noise=0.3)
    model = stepwise_fit(design)
    path = tmp_path / "model.json"
    model.save(path)
    again = RegressionModel.load(path)
    assert again == model
    # file is valid JSON mirroring the report layout
    obj = json.loads(path.read_text())
    assert set(obj) >= {"alpha", "n", "adjusted_r2", "terms", "intercept"}
