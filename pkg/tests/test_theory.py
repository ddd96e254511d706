import numpy as np
import pytest
from scipy import stats

from cwa_lab.attacks import AttackConfig, fgsm, mi, mi_cwa, mi_sam, run_attack
from cwa_lab.models import Ensemble, LinearSoftmax, QuadraticModel, hessian_fnorm_estimate, random_quadratic
from cwa_lab.theory import (STUDIES, FineTuneDiverged, GaussianOptimaSpec, NFEAuditFailure, SingularHessian,
                            check_dot_product_bound, check_holder_bound, check_projection_approximation,
                            cosine_instance, cosine_study, cosine_trend, dot_product_study, ensemble_optimum,
                            f_density, f_upper_quantile, gaussian_optima_study, holder_expectation_form,
                            holder_study, landscape_profile, mixed_flatness_instance, nfe_audit, study_passed)


# ---------------------------------------------------------------------------
# Hoelder bound

def test_holder_identity_hessian_slack_is_analytic():
    dim = 5
    p = np.full(dim, 0.2)
    x = np.linspace(0.1, 0.9, dim)
    r = check_holder_bound([QuadraticModel(p, np.eye(dim))], x)
    d2 = np.sum((x - p) ** 2)
    assert r.lhs == pytest.approx(d2)
    assert r.rhs == pytest.approx(np.sqrt(dim) * d2)
    assert r.slack == pytest.approx((np.sqrt(dim) - 1) * d2)
    assert r.satisfied


def test_holder_equality_at_optima():
    p = np.array([0.3, 0.6, 0.1])
    ms = [random_quadratic(3, np.random.default_rng(i), p=p) for i in range(3)]
    r = check_holder_bound(ms, p)
    assert r.lhs == r.rhs == r.slack == 0.0
    assert r.details["all_satisfied"]


def test_holder_random_instances_never_violated():
    rep = holder_study(1000, dim=8, seed=0)
    assert rep["pass_rate"] == 1.0
    assert rep["worst_slack"] >= -1e-9
    assert rep["expectation_form"]["satisfied"]


def test_holder_expectation_form_has_independent_scales():
    r = holder_expectation_form(4000, 6, np.random.default_rng(3))
    assert r.satisfied
    assert abs(r.details["cov_h_d"]) < 0.25      # sample covariance of independent log-normals


def test_holder_rejects_non_quadratic():
    lin = LinearSoftmax.init(3, 2, np.random.default_rng(0))
    with pytest.raises(TypeError):
        check_holder_bound([lin], np.zeros(3))
    with pytest.raises(ValueError):
        check_holder_bound([], np.zeros(3))


def test_bound_result_invariant():
    from cwa_lab.theory import BoundCheckResult
    assert BoundCheckResult.make(1.0, 1.0 - 1e-7, 1e-6).satisfied
    assert not BoundCheckResult.make(1.0, 1.0 - 1e-5, 1e-6).satisfied


# ---------------------------------------------------------------------------
# dot-product bound

def test_dot_single_member_at_optimum_all_zero():
    p = np.array([0.4, 0.7])
    r = check_dot_product_bound([QuadraticModel(p, np.diag([1.0, 3.0]))], p)
    assert r.chain.lhs == r.chain.rhs == 0.0
    assert r.theorem is not None and r.theorem.lhs == 0.0 and r.theorem.rhs == 0.0
    assert r.satisfied


def test_dot_symmetric_pair_by_hand():
    dim = 3
    p1 = np.array([0.2, -0.1, 0.3])
    ms = [QuadraticModel(p1, np.eye(dim)), QuadraticModel(-p1, np.eye(dim))]
    r = check_dot_product_bound(ms, np.zeros(dim))
    s = p1 @ p1
    assert r.M == pytest.approx(dim)                        # ||I^-1||_F^2
    assert r.chain.lhs == pytest.approx(2 * s)
    assert r.chain.rhs == pytest.approx(dim * 2 * s)
    # g1 = -p1, g2 = p1: theorem reads ||p1||^2 <= -(2 dim / 2) * (-||p1||^2)
    assert r.theorem.lhs == pytest.approx(s)
    assert r.theorem.rhs == pytest.approx(dim * s)
    assert r.satisfied


def test_dot_theorem_only_at_optimum():
    ms = [random_quadratic(4, np.random.default_rng(i), lam=0.1) for i in range(3)]
    assert check_dot_product_bound(ms, np.full(4, 5.0)).theorem is None
    x_star = ensemble_optimum(ms)
    r = check_dot_product_bound(ms, x_star)
    assert r.grad_sum_norm <= 1e-8
    assert r.theorem is not None and r.theorem.satisfied


def test_dot_random_ensembles_at_optimum():
    rep = dot_product_study(500, seed=0)
    assert rep["optima_reached"] == 500
    assert rep["pass_rate"] == 1.0 and rep["theorem_pass_rate"] == 1.0
    assert rep["worst_slack"] >= -1e-6


def test_dot_singular_hessian_raises():
    H = np.diag([1.0, 0.0])
    with pytest.raises(SingularHessian):
        check_dot_product_bound([QuadraticModel([0.0, 0.0], H)], np.ones(2))


# ---------------------------------------------------------------------------
# gradient alignment

def test_cosine_trend_identical_members_is_one():
    q = random_quadratic(4, np.random.default_rng(0), lam=0.1, p=np.full(4, 0.8))
    e = Ensemble([q, q, q], "loss")
    tr = mi(e, np.full(4, 0.5), None, AttackConfig(T=4))
    np.testing.assert_allclose(cosine_trend(tr), 1.0)


def test_cosine_trend_opposed_pair_starts_at_minus_one():
    e = Ensemble([QuadraticModel([0.3, 0.5], np.eye(2)), QuadraticModel([0.7, 0.5], np.eye(2))], "loss")
    tr = mi(e, np.array([0.5, 0.5]), None, AttackConfig(T=2))
    assert cosine_trend(tr)[0] == pytest.approx(-1.0)


def test_cosine_trend_without_recorded_gradients(mlp_ensemble):
    x = np.random.default_rng(0).uniform(0, 1, (2, 6))
    cfg = AttackConfig(T=3)
    rec = mi(mlp_ensemble, x, np.array([0, 1]), cfg)
    bare = mi(mlp_ensemble, x, np.array([0, 1]), cfg.replace(record=False))
    np.testing.assert_allclose(cosine_trend(bare, mlp_ensemble), cosine_trend(rec), atol=1e-12)
    with pytest.raises(ValueError):
        cosine_trend(bare)


def test_mi_cse_raises_gradient_alignment():
    rep = cosine_study(200, seed=0)
    assert rep["pass_rate"] >= 0.8, rep


# ---------------------------------------------------------------------------
# projection approximation

def test_projection_dim_two():
    r = check_projection_approximation(2, 5000, seed=0)
    assert r.expected_diagonal == 0.5
    assert r.diagonal_ok


def test_projection_high_dim():
    r = check_projection_approximation(1000, 10_000, seed=0)
    assert r.mean_diagonal >= 0.998
    assert r.mean_abs_offdiagonal <= 0.03
    assert r.trace_max_error <= 1e-9


def test_projection_offdiag_shortcut_matches_explicit_matrices():
    dim, n = 5, 400
    r = check_projection_approximation(dim, n, seed=11, trace_samples=0)
    rng = np.random.default_rng(11)
    g = rng.standard_normal((n, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    off = [np.abs(np.eye(dim) - np.outer(v, v))[~np.eye(dim, dtype=bool)].mean() for v in g]
    assert r.mean_abs_offdiagonal == pytest.approx(np.mean(off), rel=1e-12)
    assert r.mean_diagonal == pytest.approx(np.mean(1 - g ** 2), rel=1e-12)


def test_projection_validation():
    with pytest.raises(ValueError):
        check_projection_approximation(1)


# ---------------------------------------------------------------------------
# Gaussian optima

@pytest.mark.parametrize("alpha,d1,d2", [(0.05, 60, 60), (0.05, 4, 4), (0.01, 3, 17), (0.2, 1, 5), (0.05, 200, 200)])
def test_f_quantile_matches_scipy(alpha, d1, d2):
    assert f_upper_quantile(alpha, d1, d2) == pytest.approx(stats.f.isf(alpha, d1, d2), abs=1e-6)


def test_f_density_matches_scipy_and_is_zero_off_support():
    x = np.array([-1.0, 0.0, 0.3, 1.0, 4.0])
    np.testing.assert_allclose(f_density(x, 7, 9)[2:], stats.f.pdf(x[2:], 7, 9), rtol=1e-12)
    assert f_density(-1.0, 7, 9) == 0.0


def test_f_quantile_validation():
    with pytest.raises(ValueError):
        f_upper_quantile(1.0, 3, 3)
    with pytest.raises(ValueError):
        f_upper_quantile(0.05, 0, 3)


def test_gaussian_study_examples():
    r = gaussian_optima_study(GaussianOptimaSpec(4, 16, 1.0), trials=1000, seed=0)
    assert r.expected == 4.0
    assert r.mean_ok
    assert r.monotone
    assert r.true_positive_rate >= 0.9
    assert r.false_positive_rate <= 0.1
    assert r.chebyshev_ok
    assert r.f_dof == 4 * 15


def test_gaussian_study_deterministic():
    spec = GaussianOptimaSpec(3, 8, 0.5)
    a, b = gaussian_optima_study(spec, 200, seed=4), gaussian_optima_study(spec, 200, seed=4)
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("kw", [dict(dim=0, n=4, sigma=1.0), dict(dim=2, n=1, sigma=1.0),
                                dict(dim=2, n=4, sigma=0.0), dict(dim=2, n=4, sigma=1.0, c=[0.0])])
def test_gaussian_spec_validation(kw):
    with pytest.raises(ValueError):
        GaussianOptimaSpec(**kw)


def test_gaussian_study_needs_trials():
    with pytest.raises(ValueError):
        gaussian_optima_study(GaussianOptimaSpec(2, 4, 1.0), trials=99)


# ---------------------------------------------------------------------------
# loss landscape

def test_landscape_single_quadratic_recovers_optimum():
    p = np.array([0.55, 0.47, 0.52])
    e = Ensemble([QuadraticModel(p, np.diag([1.0, 2.0, 3.0]))], "loss")
    x = np.full(3, 0.5)
    eps, alpha = 0.1, 0.01
    prof = landscape_profile(x, e, probe_budget=41, fine_tune_steps=30, eps=eps, alpha=alpha)
    assert np.max(np.abs(prof.optima[0] - p)) <= 2 * alpha
    assert prof.r2[0] >= 0.999
    assert prof.mean_curvature > 0
    assert prof.curves.shape == (1, 41)


def test_landscape_at_shared_optimum_is_flat():
    p = np.full(4, 0.5)
    e = Ensemble([random_quadratic(4, np.random.default_rng(i), p=p) for i in range(3)], "loss")
    prof = landscape_profile(p, e, fine_tune_steps=10, eps=0.05, alpha=0.0)
    assert prof.mean_distance == 0.0
    np.testing.assert_allclose(prof.curves, 0.0)
    assert prof.mean_curvature == pytest.approx(0.0, abs=1e-12)


def test_landscape_fine_tune_divergence():
    q = QuadraticModel([0.5, 0.5], np.eye(2))
    q.loss_and_grad = lambda x, y=None, count=True: (np.nan, np.zeros_like(x))
    with pytest.raises(FineTuneDiverged):
        landscape_profile(np.full(2, 0.5), Ensemble([q], "loss"))


def test_landscape_validation():
    e = Ensemble([QuadraticModel([0.5, 0.5], np.eye(2))], "loss")
    with pytest.raises(ValueError):
        landscape_profile(np.full(3, 0.5), e)
    with pytest.raises(ValueError):
        landscape_profile(np.full(2, 0.5), e, probe_budget=2)


@pytest.mark.xfail(strict=True, reason="not reproduced at desk scale: MI endpoints sit closer to the "
                                       "per-member optima than MI-CWA endpoints (see decisions ledger)")
def test_mi_cwa_endpoints_closer_to_member_optima_than_mi():
    d_mi, d_cwa = [], []
    for k in range(50):
        e, x = cosine_instance([0, k])
        cfg = AttackConfig(seed=k, record=False)
        for name, out in (("mi", d_mi), ("mi-cwa", d_cwa)):
            x_adv = run_attack(name, e, x, None, cfg).x_adv
            out.append(landscape_profile(x_adv, e, probe_budget=9, fine_tune_steps=20).mean_distance)
    assert np.median(d_cwa) < np.median(d_mi)


# ---------------------------------------------------------------------------
# flatness of MI-SAM endpoints

def test_mi_sam_endpoint_no_sharper_than_mi_on_quadratic_ensembles():
    # constant Hessian: both estimates agree up to rounding, so the comparison is ties
    wins = 0
    for k in range(100):
        rng = np.random.default_rng([1, k])
        x = rng.uniform(0.3, 0.7, 8)
        e = Ensemble([random_quadratic(8, rng, lam=0.1) for _ in range(3)], "loss")
        cfg = AttackConfig(seed=k, record=False)
        h_mi = hessian_fnorm_estimate(e, mi(e, x, None, cfg).x_adv, None, 16, seed=k)
        h_sam = hessian_fnorm_estimate(e, mi_sam(e, x, None, cfg).x_adv, None, 16, seed=k)
        wins += h_sam <= h_mi * (1 + 1e-9)
    assert wins >= 60


def test_mi_sam_endpoint_flatter_on_mixed_ensembles():
    wins = 0
    for k in range(100):
        e, x, y = mixed_flatness_instance([2, k])
        cfg = AttackConfig(seed=k, record=False)
        h_mi = hessian_fnorm_estimate(e, mi(e, x, y, cfg).x_adv, y, 16, seed=k)
        h_sam = hessian_fnorm_estimate(e, mi_sam(e, x, y, cfg).x_adv, y, 16, seed=k)
        wins += h_sam <= h_mi
    assert wins >= 60


# ---------------------------------------------------------------------------
# NFE audit

@pytest.mark.parametrize("name,T,n,expected", [("mi", 10, 4, 40), ("mi-cwa", 10, 4, 80), ("fgsm", 10, 6, 6)])
def test_nfe_audit_table(name, T, n, expected):
    rng = np.random.default_rng(0)
    e = Ensemble([LinearSoftmax.init(5, 3, rng) for _ in range(n)], "logits")
    tr = run_attack(name, e, np.full(5, 0.5), 1, AttackConfig(T=T))
    audit = nfe_audit(tr, name, T, n)
    assert audit.passed and audit.actual == expected


def test_nfe_audit_mismatch_names_both_counts(mlp_ensemble):
    tr = mi_cwa(mlp_ensemble, np.full(6, 0.5), 0, AttackConfig(T=3))
    with pytest.raises(NFEAuditFailure, match="expected 12.*used 24"):
        nfe_audit(tr, "mi", 3, 4)


def test_nfe_audit_reverse_step_inferred(mlp_ensemble):
    tr = mi_cwa(mlp_ensemble, np.full(6, 0.5), 0, AttackConfig(T=3, r=0.0))
    assert nfe_audit(tr, "mi-cwa", 3, 4).expected == 12
    assert nfe_audit(fgsm(mlp_ensemble, np.full(6, 0.5), 0, AttackConfig()), "fgsm", 1, 4).passed


# ---------------------------------------------------------------------------
# study registry

@pytest.mark.parametrize("name", sorted(STUDIES))
def test_studies_are_deterministic_and_serializable(name):
    import json
    size = {"projection": {"n_samples": 200, "dim": 20}, "gaussian": {"trials": 100}}.get(
        name, {"instances": 5})
    a, b = STUDIES[name](seed=3, **size), STUDIES[name](seed=3, **size)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert isinstance(study_passed(a), bool)
    assert a["check"] == name
