import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import orthogonality
from drum import debias
from drum import drumcore as dc
from drum.debias import DebiasHP, DensityRatioHP, FinalHP, FoldNuisances, PseudoOutcomeSet
from drum.drumcore import EngressionHP, OutcomeHP, OutcomeModel, UnconstrainedHP, ConstrainedHP
from drum.errors import ConfigError, DegenerateModelError, IntegrityError
from drum.nnet import net_new
from drum.simgen import LabeledSet, UnlabeledSet


# -- folds ---------------------------------------------------------------------


def test_exact_division_fold_sizes():
    plan = debias.make_folds(6, 9, 3, seed=0)
    assert [len(f) for f in plan.source_folds] == [2, 2, 2]
    assert [len(f) for f in plan.target_folds] == [3, 3, 3]


@pytest.mark.parametrize("n,N", [(7, 3), (100, 31), (5000, 1000)])
def test_folds_partition(n, N):
    plan = debias.make_folds(n, N, 3, seed=4)
    for folds, total in ((plan.source_folds, n), (plan.target_folds, N)):
        assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(total))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        for a in range(3):
            for b in range(a + 1, 3):
                assert not np.intersect1d(folds[a], folds[b]).size


def test_balanced_remainder():
    assert sorted(len(f) for f in debias.make_folds(7, 3, 3, seed=1).source_folds) == [2, 2, 3]


def test_folds_deterministic_and_seeded():
    a, b, c = (debias.make_folds(50, 20, 3, seed=s) for s in (1, 1, 2))
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()


def test_too_many_folds_rejected():
    with pytest.raises(ConfigError):
        debias.make_folds(2, 10, 3)


# -- weights -------------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(min_value=1e-4, max_value=1e4), min_size=1, max_size=60),
    st.floats(min_value=1.0, max_value=50.0),
)
def test_normalized_weights_unit_mean_and_bounded(raw, bound):
    w = debias.normalize_weights(np.array(raw), bound)
    assert abs(w.mean() - 1.0) < 1e-12
    assert w.max() <= bound
    assert (w > 0).all()


def test_weights_clip_then_normalize_in_the_simple_case():
    raw = np.array([0.5, 1.0, 1.5, 40.0])
    w = debias.normalize_weights(raw, 20.0)
    expected = np.array([0.5, 1.0, 1.5, 20.0]) / 5.75
    np.testing.assert_allclose(w, expected, rtol=1e-14)


def test_identical_laws_give_weights_near_one():
    rng = np.random.default_rng(0)
    Xs, As = rng.normal(size=(2000, 2)), rng.normal(size=(2000, 1))
    Xt, At = rng.normal(size=(2000, 2)), rng.normal(size=(2000, 1))
    model = debias.fit_density_ratio(Xs, As, Xt, At, DensityRatioHP(lr=1e-3, epochs=10, hidden=(16,)))
    w = model.weights(Xs, As)
    assert abs(w.mean() - 1.0) < 1e-12
    assert np.mean((w >= 0.5) & (w <= 2.0)) >= 0.9


def test_gaussian_log_ratio_slope():
    rng = np.random.default_rng(1)
    n = 4000
    Xs, Xt = np.zeros((n, 1)), np.zeros((n, 1))
    As, At = rng.normal(size=(n, 1)), rng.normal(1.0, 1.0, size=(n, 1))
    hp = DensityRatioHP(lr=3e-3, epochs=30, hidden=(16,), clip_bound=1e9)
    model = debias.fit_density_ratio(Xs, As, Xt, At, hp)
    grid = np.linspace(-2, 2, 41)[:, None]
    logw = np.log(model.raw_ratio(np.zeros_like(grid), grid))
    slope = np.polyfit(grid[:, 0], logw, 1)[0]
    assert abs(slope - 1.0) < 0.2


def test_saturated_classifier_is_reported(monkeypatch):
    def saturate(net, *args, **kwargs):
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 60.0
        return []

    monkeypatch.setattr(debias.nnet, "fit", saturate)
    z = np.zeros((4, 1))
    with pytest.raises(DegenerateModelError):
        debias.fit_density_ratio(z, z, z, z, DensityRatioHP(hidden=(2,)))


# -- correction --------------------------------------------------------------------------


def _linear_model(d_X, wx, wa, bias=0.0):
    net = net_new([d_X + 1, 1], ["identity"], seed=0)
    net.weights[0][:] = [list(wx) + [wa]]
    net.biases[0][:] = bias
    return OutcomeModel(net, d_X, 1)


def test_constant_bias_correction_matches_closed_form():
    rng = np.random.default_rng(2)
    n = 20_000
    X, A = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
    Y = X[:, 0] + A[:, 0] + 0.5 * rng.normal(size=n)
    fhat = _linear_model(1, [1.0], 1.0, bias=0.3)
    gen = dc.new_generator("unconstrained", 1, 1, 2, (8,), seed=3)
    mu = dc.predict(dc.RobustPredictor(fhat, gen, 64), X)
    resid = Y - fhat.predict(X, A)
    terms = 2 * mu * resid
    value = debias.correction_term(mu, np.ones(n), resid)
    assert abs(value - (-2 * 0.3 * mu.mean())) < 3 * terms.std() / np.sqrt(n)


@pytest.mark.parametrize("mode", ["preliminary", "current"])
@pytest.mark.parametrize("zero", ["residuals", "weights"])
def test_vanishing_correction_matches_plug_in_fit(mode, zero):
    rng = np.random.default_rng(3)
    fhat = OutcomeModel(net_new([3, 8, 1], ["relu", "identity"], seed=1), 2, 1)
    target = rng.normal(size=(96, 2))
    Xs = rng.normal(size=(64, 2))
    resid = np.zeros(64) if zero == "residuals" else rng.normal(size=64)
    w = rng.uniform(0.5, 2.0, size=64) if zero == "residuals" else np.zeros(64)
    hp = UnconstrainedHP(q=2, L=16, lr=1e-3, epochs=3, hidden=(8,), batch_size=32, seed=5)
    prelim = dc.new_generator("unconstrained", 2, 1, 2, (8,), seed=9)
    g1, h1 = debias.debiased_generator_fit(fhat, resid, w, target, hp, source_X=Xs, preliminary=prelim, mode=mode)
    g2, h2 = dc.fit_worstcase_unconstrained(fhat, target, hp)
    for p, q in zip(g1.net.params(), g2.net.params()):
        assert p.tobytes() == q.tobytes()
    assert h1 == h2


def test_current_mode_correction_changes_the_fit():
    rng = np.random.default_rng(4)
    fhat = OutcomeModel(net_new([3, 8, 1], ["relu", "identity"], seed=1), 2, 1)
    target, Xs = rng.normal(size=(96, 2)), rng.normal(size=(64, 2))
    hp = UnconstrainedHP(q=2, L=16, lr=1e-2, epochs=3, hidden=(8,), batch_size=32, seed=5)
    g1, _ = debias.debiased_generator_fit(fhat, np.ones(64), np.ones(64), target, hp, source_X=Xs, mode="current")
    g2, _ = dc.fit_worstcase_unconstrained(fhat, target, hp)
    assert any(p.tobytes() != q.tobytes() for p, q in zip(g1.net.params(), g2.net.params()))


def test_orthogonality_slopes():
    plug, deb = orthogonality.deviations()
    assert orthogonality.loglog_slope(deb) >= 1.7
    assert orthogonality.loglog_slope(plug) <= 1.3


# -- pseudo-outcomes ----------------------------------------------------------------------


def _nuisances(n, N, resid=None, weights=None, means=None):
    return FoldNuisances([], [], [], resid if resid is not None else np.zeros(n),
                         weights if weights is not None else np.ones(n),
                         means if means is not None else np.ones(N))


def test_pseudo_outcomes_layout():
    plan = debias.make_folds(6, 6, 3, seed=0)
    nuis = _nuisances(6, 6, resid=np.arange(6.0), weights=np.full(6, 2.0), means=np.full(6, 0.5))
    ps = debias.pseudo_outcomes(plan, nuis, 6, 6, np.ones((6, 2)), np.zeros((6, 2)))
    assert ps.r == 1.0
    np.testing.assert_array_equal(ps.F[:6], 2.0 * np.arange(6.0))
    np.testing.assert_array_equal(ps.F[6:], 0.5)
    assert ps.is_source.sum() == 6 and ps.X.shape == (12, 2)


def test_pseudo_outcomes_scale_target_rows_by_r():
    plan = debias.make_folds(12, 4, 3, seed=0)
    ps = debias.pseudo_outcomes(plan, _nuisances(12, 4), 12, 4, np.ones((4, 1)), np.zeros((12, 1)))
    assert ps.r == 3.0
    np.testing.assert_array_equal(ps.F[12:], 3.0)


def test_oracle_noiseless_source_rows_vanish():
    rng = np.random.default_rng(5)
    X, A = rng.normal(size=(30, 1)), rng.normal(size=(30, 1))
    fbar = _linear_model(1, [2.0], -1.0)
    resid = 2 * X[:, 0] - A[:, 0] - fbar.predict(X, A)
    plan = debias.make_folds(30, 9, 3, seed=1)
    ps = debias.pseudo_outcomes(plan, _nuisances(30, 9, resid=resid, weights=rng.uniform(0.1, 3, 30)), 30, 9,
                                np.zeros((9, 1)), X)
    np.testing.assert_array_equal(ps.F[:30], 0.0)


def test_misaligned_folds_rejected():
    plan = debias.make_folds(6, 6, 3, seed=0)
    with pytest.raises(IntegrityError):
        debias.pseudo_outcomes(plan, _nuisances(5, 6), 6, 6, np.zeros((6, 1)), np.zeros((6, 1)))
    resid = np.zeros(6)
    resid[2] = np.nan
    with pytest.raises(IntegrityError):
        debias.pseudo_outcomes(plan, _nuisances(6, 6, resid=resid), 6, 6, np.zeros((6, 1)), np.zeros((6, 1)))
    with pytest.raises(IntegrityError):
        debias._record_use([], "outcome", 0, np.array([1, 2]), np.array([2, 3]), "source")
    with pytest.raises(ConfigError):
        PseudoOutcomeSet(np.zeros((2, 1)), np.zeros(2), 0.0, np.ones(2, dtype=bool))


# -- final regression -----------------------------------------------------------------------


def test_constant_pseudo_outcomes_give_constant_predictor():
    X = np.random.default_rng(6).normal(size=(600, 3))
    ps = PseudoOutcomeSet(X, np.full(600, 0.8), 1.0, np.zeros(600, dtype=bool))
    pred = debias.fit_debiased_predictor(ps, FinalHP(lr=1e-2, epochs=150, hidden=()))
    assert np.abs(pred.predict(X) - 0.8).max() < 0.01


def test_final_regression_recovers_target_signal():
    rng = np.random.default_rng(7)
    Xs, Xt = rng.normal(size=(1500, 2)), rng.normal(size=(1500, 2))
    m = lambda x: np.sin(x[:, 0]) + 0.5 * x[:, 1]  # noqa: E731
    ps = PseudoOutcomeSet(
        np.vstack([Xs, Xt]), np.concatenate([0.3 * rng.normal(size=1500), m(Xt)]), 1.0,
        np.concatenate([np.ones(1500, bool), np.zeros(1500, bool)]),
    )
    pred = debias.fit_debiased_predictor(ps, FinalHP(lr=3e-3, epochs=40, hidden=(32, 32), seed=1))
    Xh = rng.normal(size=(500, 2))
    assert np.corrcoef(pred.predict(Xh), m(Xh))[0, 1] > 0.9


def test_final_defaults_and_binary_clamp():
    hp = FinalHP()
    assert (hp.lr, hp.epochs) == (1e-5, 300)
    r = DensityRatioHP()
    assert (r.lr, r.epochs, r.clip_bound) == (1e-5, 200, 20.0)
    net = net_new([1, 1], ["identity"], seed=0)
    net.weights[0][:] = 1.0
    net.biases[0][:] = 0.0
    pred = debias.DebiasedPredictor(net, task="binary")
    np.testing.assert_array_equal(pred.predict(np.array([[-0.5], [0.4], [1.7]])), [0.0, 0.4, 1.0])


# -- end to end ----------------------------------------------------------------------------------


def _tiny_hp(seed=0):
    return DebiasHP(
        L=16,
        outcome=OutcomeHP(lr=3e-3, epochs=15, hidden=(16,)),
        generator=UnconstrainedHP(q=2, L=16, lr=1e-3, epochs=2, hidden=(8,)),
        engression=EngressionHP(epochs=3, hidden=(8,), noise_dim=4),
        constrained=ConstrainedHP(steps=5, L=8),
        ratio=DensityRatioHP(lr=1e-3, epochs=3, hidden=(8,)),
        final=FinalHP(lr=3e-3, epochs=15, hidden=(16,)),
        seed=seed,
    )


def _toy_data(n=300, N=120, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    A = X[:, :1] + 0.5 * rng.normal(size=(n, 1))
    Y = X[:, 0] + 0.5 * A[:, 0] + 0.1 * rng.normal(size=n)
    return LabeledSet(X, A, Y), UnlabeledSet(0.2 + rng.normal(size=(N, 3)))


def _hash(pred):
    return hashlib.sha256(json.dumps(pred.to_dict(), sort_keys=True).encode()).hexdigest()


@pytest.mark.parametrize("variant", ["unconstrained", "conditional"])
def test_end_to_end_is_deterministic_and_out_of_fold(variant):
    source, target = _toy_data()
    a = debias.drum_debiased(source, target, variant, _tiny_hp())
    b = debias.drum_debiased(source, target, variant, _tiny_hp())
    assert _hash(a) == _hash(b)
    assert a.net.d_in == 3
    usage = a.provenance["usage"]
    assert len(usage) == 9
    assert all(u["train"] != u["evaluate"] for u in usage)
    assert np.isfinite(a.predict(target.X)).all()


def test_variant_and_preliminary_must_agree():
    source, target = _toy_data()
    with pytest.raises(ConfigError):
        debias.drum_debiased(source, target, "sideways", _tiny_hp())
    gen = dc.new_generator("conditional", 3, 1, 2, (4,), seed=0)
    fhat = OutcomeModel(net_new([4, 1], ["identity"], seed=0), 3, 1)
    with pytest.raises(ConfigError):
        debias.drum_debiased(source, target, "unconstrained", _tiny_hp(), debias.Preliminary(fhat, gen))


def test_irrelevant_missing_covariate_leaves_little_to_correct():
    rng = np.random.default_rng(8)
    n, N = 3000, 300
    X = rng.normal(size=(n, 2))
    A = rng.normal(size=(n, 1))
    m = lambda x: 0.8 * x[:, 0] - 0.4 * x[:, 1]  # noqa: E731
    source = LabeledSet(X, A, m(X) + 0.1 * rng.normal(size=n))
    Xt = rng.normal(size=(N, 2))
    hp = DebiasHP(
        L=32,
        outcome=OutcomeHP(lr=3e-3, epochs=30, hidden=(32,)),
        generator=UnconstrainedHP(q=2, L=32, lr=1e-3, epochs=5, hidden=(16,)),
        ratio=DensityRatioHP(lr=1e-3, epochs=5, hidden=(16,)),
        final=FinalHP(lr=3e-3, epochs=40, hidden=()),
        seed=2,
    )
    prelim = debias.fit_preliminary(source, Xt, "unconstrained", hp)
    deb = debias.drum_debiased(source, Xt, "unconstrained", hp, prelim)
    plug = dc.predict(dc.RobustPredictor(prelim.fhat, prelim.generator, 256), Xt)
    assert np.mean((deb.predict(Xt) - plug) ** 2) < 0.05
