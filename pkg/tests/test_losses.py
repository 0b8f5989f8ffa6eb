import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibseg.core import (
    InvalidConfigError,
    InvalidInputError,
    LabelMap,
    one_hot,
    softmax,
)
from calibseg.gradcheck import numerical_gradient, relative_error, run_gradcheck
from calibseg.losses import (
    DivergenceInfiniteError,
    LossConfig,
    LossKind,
    Penalty,
    ce_loss,
    compute_loss,
    ecp_loss,
    entropy,
    fl_loss,
    kink_mask,
    kl_divergence,
    ls_loss,
    mbls_loss,
    nacl_loss,
    svls_decomposition,
    svls_loss,
    svls_targets,
)
from calibseg.priors import PriorConfig, gaussian_kernel, svls_soft_label

HAND_PATCH = LabelMap([[1, 1, 1], [1, 0, 1], [1, 1, 1]], 2)


def random_problem(rng, shape=(5, 5), k=4):
    logits = rng.uniform(-3, 3, size=(*shape, k))
    labels = LabelMap(rng.integers(0, k, size=shape), k)
    return logits, labels


def fd_error(config, logits, labels):
    analytic = compute_loss(logits, labels, config).grad
    keep = np.broadcast_to(~kink_mask(logits, labels, config)[..., None], logits.shape)
    numeric = numerical_gradient(lambda x: compute_loss(x, labels, config).value, logits, 1e-6, keep)
    return relative_error(analytic[keep], numeric[keep])


# -- config -------------------------------------------------------------------


def test_defaults_materialized():
    assert LossConfig("fl").gamma == 3.0
    assert LossConfig("ecp").lam == 0.1
    assert LossConfig("ls").alpha == 0.1
    assert LossConfig("svls").sigma == 2.0 and LossConfig("svls").patch_size == 3
    mbls = LossConfig("mbls")
    assert (mbls.margin, mbls.lam) == (5.0, 0.1)
    nacl = LossConfig("nacl")
    assert nacl.lam == 0.1 and nacl.prior == PriorConfig("mean", 3)
    assert nacl.penalty is Penalty.LINEAR and nacl.constrain_on.value == "logits"
    assert LossConfig("ce").lam is None


@pytest.mark.parametrize("kwargs", [
    {"kind": "ce", "alpha": 0.1}, {"kind": "ls", "alpha": 1.0}, {"kind": "fl", "gamma": -1},
    {"kind": "nacl", "lam": -0.1}, {"kind": "svls", "sigma": 0}, {"kind": "nope"},
    {"kind": "ce", "reduction": "max"},
])
def test_invalid_configs(kwargs):
    with pytest.raises(InvalidConfigError):
        LossConfig(**kwargs)


def test_dims_mismatch_is_invalid_input():
    with pytest.raises(InvalidInputError):
        ce_loss(np.zeros((2, 2, 3)), LabelMap(np.zeros((2, 2)), 4))


# -- CE -----------------------------------------------------------------------


def test_ce_uniform_logits():
    labels = LabelMap([[0, 3], [1, 2]], 4)
    r = ce_loss(np.zeros((2, 2, 4)), labels)
    np.testing.assert_allclose(r.per_pixel, math.log(4), atol=1e-15)
    assert r.value == pytest.approx(1.386294, abs=5e-7)


def test_ce_gradient_at_uniform_logits():
    labels = LabelMap(np.zeros((2, 3)), 4)
    r = ce_loss(np.zeros((2, 3, 4)), labels)
    np.testing.assert_allclose(r.grad[1, 2], np.array([0.25 - 1, 0.25, 0.25, 0.25]) / 6, atol=1e-16)


# -- LS -----------------------------------------------------------------------


def test_ls_alpha_zero_is_ce(rng):
    logits, labels = random_problem(rng)
    a = ls_loss(logits, labels, LossConfig("ls", alpha=0.0))
    b = ce_loss(logits, labels)
    assert a.value == b.value
    np.testing.assert_array_equal(a.grad, b.grad)


def test_ls_target_and_gradient():
    labels = LabelMap([[0]], 2)
    logits = np.array([[[0.3, -0.2]]])
    r = ls_loss(logits, labels, LossConfig("ls", alpha=0.1))
    target = np.array([0.95, 0.05])
    s = softmax(logits)[0, 0]
    np.testing.assert_allclose(r.grad[0, 0], s - target, atol=1e-16)
    assert r.value == pytest.approx(-(0.95 * math.log(s[0]) + 0.05 * math.log(s[1])), abs=1e-15)


# -- FL -----------------------------------------------------------------------


def test_fl_gamma_zero_is_ce(rng):
    logits, labels = random_problem(rng)
    a = fl_loss(logits, labels, LossConfig("fl", gamma=0.0))
    b = ce_loss(logits, labels)
    assert a.value == b.value
    np.testing.assert_array_equal(a.grad, b.grad)


def test_fl_decreases_with_gamma_at_fixed_probability():
    labels = LabelMap([[0]], 2)
    logits = np.array([[[2.0, 0.0]]])
    values = [fl_loss(logits, labels, LossConfig("fl", gamma=g)).value for g in (0, 1, 2, 3)]
    assert all(a > b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("gamma", [1.0, 2.0, 3.0, 0.5])
def test_fl_gradient_fd(rng, gamma):
    logits, labels = random_problem(rng)
    assert fd_error(LossConfig("fl", gamma=gamma), logits, labels) < 1e-6


# -- ECP ----------------------------------------------------------------------


def test_ecp_uniform_logits():
    r = ecp_loss(np.zeros((1, 1, 4)), LabelMap([[2]], 4), LossConfig("ecp", lam=0.1))
    assert r.value == pytest.approx(math.log(4) - 0.1 * math.log(4), abs=1e-15)


def test_ecp_lambda_zero_is_ce(rng):
    logits, labels = random_problem(rng)
    a = ecp_loss(logits, labels, LossConfig("ecp", lam=0.0))
    b = ce_loss(logits, labels)
    assert a.value == b.value
    np.testing.assert_allclose(a.grad, b.grad, atol=1e-18)


# -- SVLS ---------------------------------------------------------------------


def test_svls_uniform_labels_equal_ce(rng):
    logits = rng.normal(size=(4, 5, 3))
    labels = LabelMap(np.full((4, 5), 1), 3)
    a = svls_loss(logits, labels)
    b = ce_loss(logits, labels)
    assert a.value == b.value
    np.testing.assert_array_equal(a.grad, b.grad)


def test_svls_hand_patch_uniform_logits_is_ln2():
    config = LossConfig("svls", sigma=1.0)
    r = svls_loss(np.zeros((3, 3, 2)), HAND_PATCH, config)
    assert r.per_pixel[1, 1] == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_array_equal(svls_targets(HAND_PATCH, config)[1, 1],
                                  svls_soft_label(HAND_PATCH, gaussian_kernel(3, 1.0)))


# -- MbLS ---------------------------------------------------------------------


def test_mbls_equal_logits_no_penalty():
    labels = LabelMap([[1, 0]], 3)
    logits = np.full((1, 2, 3), 0.7)
    assert mbls_loss(logits, labels).value == ce_loss(logits, labels).value


def test_mbls_hinge_arithmetic():
    labels = LabelMap([[0]], 3)
    logits = np.array([[[8.0, 0.0, 0.0]]])
    r = mbls_loss(logits, labels, LossConfig("mbls", lam=0.1, margin=5.0))
    assert r.value - ce_loss(logits, labels).value == pytest.approx(0.6, abs=1e-12)


# -- NACL ---------------------------------------------------------------------


def test_nacl_satisfied_constraint_equals_ce(rng):
    logits, labels = random_problem(rng)
    for penalty in ("linear", "quadratic"):
        r = nacl_loss(logits, labels, LossConfig("nacl", penalty=penalty), prior=logits)
        c = ce_loss(logits, labels)
        assert r.value == c.value
        np.testing.assert_array_equal(r.grad, c.grad)


@pytest.mark.parametrize("penalty,expected", [("linear", 0.08), ("quadratic", 0.03)])
def test_nacl_penalty_hand(penalty, expected):
    labels = LabelMap([[0]], 3)
    logits = np.array([[[0.5, 0.2, -0.1]]])
    tau = np.array([[[1.0, 0.0, 0.0]]])
    config = LossConfig("nacl", lam=0.1, penalty=penalty)
    r = nacl_loss(logits, labels, config, prior=tau)
    assert r.value - ce_loss(logits, labels).value == pytest.approx(expected, abs=1e-15)


def test_nacl_linear_penalty_gradient_sign():
    labels = LabelMap([[0]], 3)
    logits = np.array([[[0.5, 0.2, -0.1]]])
    tau = np.array([[[1.0, 0.2, -0.5]]])
    r = nacl_loss(logits, labels, LossConfig("nacl", lam=0.1), prior=tau)
    pen = r.grad - ce_loss(logits, labels).grad
    # -lam * sign(tau - l), with sign(0) = 0
    np.testing.assert_allclose(pen[0, 0], [-0.1, 0.0, 0.1], atol=1e-15)


def test_nacl_lambda_zero_is_ce(rng):
    logits, labels = random_problem(rng)
    for constrain_on in ("logits", "softmax"):
        r = nacl_loss(logits, labels, LossConfig("nacl", lam=0.0, constrain_on=constrain_on))
        c = ce_loss(logits, labels)
        assert r.value == c.value
        np.testing.assert_array_equal(r.grad, c.grad)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["linear", "quadratic"]))
def test_nacl_penalty_zero_iff_constraint_holds(seed, penalty):
    rng = np.random.default_rng(seed)
    logits, labels = random_problem(rng, (2, 2), 3)
    config = LossConfig("nacl", penalty=penalty)
    ce = ce_loss(logits, labels).value
    assert nacl_loss(logits, labels, config, prior=logits).value == ce
    tau = logits.copy()
    tau[rng.integers(2), rng.integers(2), rng.integers(3)] += 0.25
    assert nacl_loss(logits, labels, config, prior=tau).value > ce


@pytest.mark.parametrize("kind", list(LossKind))
def test_class_permutation_invariance(rng, kind):
    logits, labels = random_problem(rng)
    perm = np.array([2, 0, 3, 1])
    inv = np.argsort(perm)
    permuted_labels = LabelMap(inv[labels.values], 4)
    a = compute_loss(logits, labels, LossConfig(kind)).value
    b = compute_loss(logits[..., perm], permuted_labels, LossConfig(kind)).value
    assert b == pytest.approx(a, rel=1e-13)


def test_stationarity_bound_single_pixel():
    # at a zero of the total gradient (linear penalty on logits), |s - y| <= lam
    labels = LabelMap([[0]], 2)
    tau = np.array([[[1.0, 0.0]]])
    logits = np.array([[[1.5, 1.5 - math.log(9.0)]]])
    r = nacl_loss(logits, labels, LossConfig("nacl", lam=0.1), prior=tau)
    np.testing.assert_allclose(r.grad, 0.0, atol=1e-15)
    assert np.max(np.abs(softmax(logits) - one_hot(labels))) <= 0.1 + 1e-15


# -- gradient fidelity ----------------------------------------------------------


@pytest.mark.parametrize("config", [
    LossConfig("nacl", penalty="quadratic"),
    LossConfig("nacl", constrain_on="softmax"),
    LossConfig("nacl", constrain_on="softmax", penalty="quadratic"),
    LossConfig("nacl", prior=PriorConfig("gaussian", sigma=1.0)),
    LossConfig("nacl", prior=PriorConfig("median", patch_size=5)),
    LossConfig("mbls", margin=3.0),
    LossConfig("svls", sigma=0.5),
    LossConfig("ls", alpha=0.3),
    LossConfig("ecp", lam=0.3),
    LossConfig("ce", reduction="sum"),
], ids=lambda c: str(c.to_dict()))
def test_ablation_gradients_fd(rng, config):
    for _ in range(3):
        logits, labels = random_problem(rng)
        assert fd_error(config, logits, labels) < 1e-6


def test_gradcheck_runner_reports_all_losses():
    results = run_gradcheck(seed=3, trials=2)
    assert [r.kind for r in results] == [k.value for k in LossKind]
    assert all(r.passed for r in results)


def test_kink_mask_flags_satisfied_linear_constraint():
    labels = LabelMap([[0, 1]], 2)
    logits = np.array([[[0.6667, 0.3332], [3.0, -3.0]]])
    config = LossConfig("nacl")
    np.testing.assert_array_equal(kink_mask(logits, labels, config), [[True, False]])


# -- SVLS decomposition and KL ------------------------------------------------


def test_decomposition_uniform_patch():
    patch = LabelMap(np.full((3, 3), 1), 3)
    logits = np.array([0.2, 1.0, -0.5])
    d = svls_decomposition(patch, gaussian_kernel(3, 1.0), logits)
    np.testing.assert_allclose(d.tau / d.tau.sum(), [0, 1, 0])
    assert d.total == pytest.approx(d.ce_term, abs=1e-15)


def test_decomposition_hand_patch():
    d = svls_decomposition(HAND_PATCH, gaussian_kernel(3, 1.0), np.zeros(2))
    ln2 = math.log(2)
    assert d.total == pytest.approx(ln2, abs=1e-15)
    assert d.ce_term == pytest.approx(ln2, abs=1e-15)
    assert d.constraint_term == pytest.approx(3.897640 * ln2, abs=1e-6)


def test_decomposition_matches_svls_loss(rng):
    for sigma in (0.5, 1.0, 2.0):
        kernel = gaussian_kernel(3, sigma)
        for _ in range(30):
            patch = LabelMap(rng.integers(0, 4, size=(3, 3)), 4)
            logits = rng.normal(scale=3, size=4)
            d = svls_decomposition(patch, kernel, logits)
            field = np.broadcast_to(logits, (3, 3, 4))
            direct = svls_loss(field, patch, LossConfig("svls", sigma=sigma)).per_pixel[1, 1]
            assert abs(d.total - direct) < 1e-12


def test_decomposition_rejects_even_kernel():
    with pytest.raises(InvalidInputError):
        svls_decomposition(LabelMap(np.zeros((2, 2)), 2), np.ones((2, 2)), np.zeros(2))


def test_kl_examples():
    assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(DivergenceInfiniteError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_kl_gibbs_inequality(rng):
    for _ in range(1000):
        k = rng.integers(2, 6)
        tau = rng.dirichlet(np.ones(k))
        s = rng.dirichlet(np.ones(k))
        assert kl_divergence(tau, s) >= 0.0


def test_svls_minus_kl_is_entropy(rng):
    patch = LabelMap(rng.integers(0, 3, size=(3, 3)), 3)
    config = LossConfig("svls", sigma=1.0)
    target = svls_targets(patch, config)[1, 1]
    diffs = []
    for _ in range(10):
        s = rng.dirichlet(np.ones(3))
        logits = np.broadcast_to(np.log(s), (3, 3, 3))
        loss = svls_loss(logits, patch, config).per_pixel[1, 1]
        diffs.append(loss - kl_divergence(target, s))
    assert np.var(diffs) < 1e-20
    assert abs(np.mean(diffs) - entropy(target)) < 1e-12


def test_saturated_log_probability_is_floored():
    labels = LabelMap([[1]], 2)
    logits = np.array([[[1000.0, 0.0]]])
    r = ce_loss(logits, labels)
    assert np.isfinite(r.value)
    assert r.value == pytest.approx(-math.log(1e-300), rel=1e-15)
    np.testing.assert_allclose(r.grad[0, 0], [1.0, -1.0], atol=1e-300)


def test_floor_inactive_at_realistic_magnitudes(rng):
    logits = rng.uniform(-30, 30, size=(6, 6, 4))
    labels = LabelMap(rng.integers(0, 4, size=(6, 6)), 4)
    z = logits - logits.max(-1, keepdims=True)
    log_s = z - np.log(np.exp(z).sum(-1, keepdims=True))
    expected = -np.take_along_axis(log_s, labels.values[..., None], -1)[..., 0]
    np.testing.assert_allclose(ce_loss(logits, labels).per_pixel, expected, rtol=1e-13)
