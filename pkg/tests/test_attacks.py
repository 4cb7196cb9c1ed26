import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddlab import attacks, data, models
from ddlab.attacks import PerturbationBudget, apgd, fgsm, pgd, project
from ddlab.autodiff import Tensor, matmul, reshape

INF = math.inf


def concave_toy(x):
    """-(v - 0.9)^2 per sample, maximized at v = 0.9."""
    return -(x - 0.9) ** 2, -2.0 * (x - 0.9)


def linear_oracle(c):
    def oracle(x):
        return (x * c).reshape(x.shape[0], -1).sum(axis=1), np.broadcast_to(c, x.shape).copy()
    return oracle


def linear_logits(seed, d=12, k=5):
    w = Tensor(np.random.default_rng(seed).normal(size=(d, k)) * 4)

    def fn(xt):
        return matmul(reshape(xt, (xt.shape[0], d)), w)
    return fn, w


# -- projection --------------------------------------------------------------------------------
@pytest.mark.parametrize("x, d, eps, out", [
    (0.5, 0.3, 0.1, 0.1),
    (0.95, 0.1, 0.2, 0.05),
    (0.5, 0.0, 0.1, 0.0),
    (0.02, -0.1, 0.05, -0.02),
])
def test_linf_projection_examples(x, d, eps, out):
    got = project(np.array([d]), np.array([x]), PerturbationBudget(eps))
    assert got[0] == pytest.approx(out, abs=1e-15)


def test_l2_projection_rescales_radially():
    x = np.full((1, 4), 0.5)
    d = np.array([[0.3, 0.4, 0.0, 0.0]])
    got = project(d, x, PerturbationBudget(0.25, norm=2))
    np.testing.assert_allclose(got, [[0.15, 0.2, 0.0, 0.0]], rtol=0, atol=1e-15)


def test_budget_validation():
    with pytest.raises(ValueError):
        PerturbationBudget(-0.1)
    with pytest.raises(ValueError):
        PerturbationBudget(0.1, norm=1)
    with pytest.raises(ValueError):
        PerturbationBudget(0.1, init="gaussian")
    assert PerturbationBudget(0.1, steps=4).alpha == pytest.approx(0.05)


# -- FGSM ----------------------------------------------------------------------------------
def test_fgsm_linear_closed_form():
    c = np.array([[1.5, -0.2, 0.0, 3.0]])
    x = np.full((1, 4), 0.5)
    res = fgsm(linear_oracle(c), x, 0.03)
    np.testing.assert_array_equal(res.delta, 0.03 * np.sign(c))


def test_fgsm_zero_eps():
    x = np.random.default_rng(0).uniform(size=(3, 4))
    assert not fgsm(linear_oracle(np.ones((3, 4))), x, 0.0).delta.any()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.1))
def test_fgsm_equals_pgd1(seed, eps):
    fn, _ = linear_logits(seed % 7)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(4, 3, 2, 2))
    labels = rng.integers(0, 5, size=4)
    for kind in ("ce", "dlr"):
        oracle = attacks.classifier_objective(kind, fn, labels)
        a = fgsm(oracle, x, eps).delta
        b = pgd(oracle, x, PerturbationBudget(eps, steps=1, step_size=eps, track_best=False)).delta
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# -- PGD -----------------------------------------------------------------------------------
def test_pgd_zero_eps_is_identity():
    x = np.array([0.5, 0.2])
    res = pgd(concave_toy, x, PerturbationBudget(0.0, steps=5))
    assert not res.delta.any()
    assert np.all(res.trace == res.trace[0])


def test_pgd_concave_toy_hits_boundary():
    res = pgd(concave_toy, np.array([0.5]), PerturbationBudget(0.2, steps=20, step_size=0.05))
    assert 0.5 + res.delta[0] == pytest.approx(0.7, abs=1e-6)
    assert res.best_value[0] == pytest.approx(-0.04, abs=1e-12)


def test_pgd_interior_maximizer_oscillates_but_best_is_tracked():
    # optimum 0.9 lies inside [0.7, 1.0]; sign steps of 0.03 pass within 0.015 of it
    res = pgd(concave_toy, np.array([0.85]), PerturbationBudget(0.15, steps=20, step_size=0.03))
    assert abs(0.85 + res.delta[0] - 0.9) <= 0.015 + 1e-12
    assert np.all(np.diff(res.best_trace[:, 0]) >= 0)
    assert res.best_value[0] == res.trace[:, 0].max()


def test_pgd_without_track_best_returns_last_iterate_and_k_calls():
    calls = []

    def oracle(x):
        calls.append(x.copy())
        return concave_toy(x)

    res = pgd(oracle, np.array([0.5]), PerturbationBudget(0.2, steps=3, step_size=0.05, track_best=False))
    assert len(calls) == 3
    assert res.delta[0] == pytest.approx(0.15)


def test_pgd_l2():
    c = np.array([[3.0, 4.0]])
    res = pgd(linear_oracle(c), np.full((1, 2), 0.5), PerturbationBudget(0.1, steps=5, norm=2))
    np.testing.assert_allclose(res.delta, [[0.06, 0.08]], atol=1e-12)


def test_random_init_is_seeded_and_feasible():
    x = np.random.default_rng(0).uniform(size=(2, 6))
    b = PerturbationBudget(0.05, steps=2, init="random", track_best=False)
    r1 = pgd(linear_oracle(np.ones((2, 6))), x, b, rng=np.random.default_rng(3))
    r2 = pgd(linear_oracle(np.ones((2, 6))), x, b, rng=np.random.default_rng(3))
    assert np.array_equal(r1.delta, r2.delta)
    assert r1.linf <= 0.05 + 1e-9 and r1.domain_violations == 0


def test_non_finite_gradient_reports_step():
    state = {"n": 0}

    def oracle(x):
        state["n"] += 1
        g = np.ones_like(x) if state["n"] < 3 else np.full_like(x, np.nan)
        return x.sum(keepdims=True), g

    with pytest.raises(attacks.AttackError, match="step 2"):
        pgd(oracle, np.array([0.5]), PerturbationBudget(0.1, steps=5))


def test_bad_gradient_shape():
    with pytest.raises(attacks.AttackError, match="shape"):
        pgd(lambda x: (x.sum(), np.ones(3)), np.zeros(2), PerturbationBudget(0.1, steps=1))


# -- APGD ----------------------------------------------------------------------------------
def test_apgd_checkpoints_standard_schedule():
    assert attacks.apgd_checkpoints(100) == [22, 41, 57, 70, 80, 87, 93, 99]
    # n=20: first gap 4, decrement 1, minimum gap 1
    assert attacks.apgd_checkpoints(20) == [4, 7, 9] + list(range(10, 21))


def test_apgd_zero_eps_is_identity():
    res = apgd(concave_toy, np.array([0.5, 0.3]), PerturbationBudget(0.0, steps=10))
    assert not res.delta.any()


def test_apgd_at_least_pgd_on_toy():
    x = np.array([0.5])
    for steps in (5, 20, 50):
        b = PerturbationBudget(0.2, steps=steps)
        assert apgd(concave_toy, x, b).best_value[0] >= pgd(concave_toy, x, b).best_value[0]
    assert 0.5 + apgd(concave_toy, x, PerturbationBudget(0.2, steps=20)).delta[0] == pytest.approx(0.7, abs=1e-6)


def test_apgd_interior_optimum_is_refined_by_halving():
    x = np.array([0.85])
    res = apgd(concave_toy, x, PerturbationBudget(0.2, steps=100))
    assert abs(0.85 + res.delta[0] - 0.9) < 1e-3
    assert res.extra["halvings"][0] >= 1
    assert np.all(np.diff(res.best_trace[:, 0]) >= 0)


def test_apgd_needs_two_steps():
    with pytest.raises(ValueError):
        apgd(concave_toy, np.array([0.5]), PerturbationBudget(0.1, steps=1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.2), st.integers(1, 12), st.sampled_from(["pgd", "apgd", "fgsm"]),
       st.sampled_from(["zero", "random"]))
def test_feasibility_fuzz(seed, eps, steps, method, init):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(3, 3, 2, 2))
    x[0, 0, 0, 0], x[1, 0, 0, 0] = 0.0, 1.0
    fn, _ = linear_logits(seed % 5)
    oracle = attacks.classifier_objective("ce", fn, rng.integers(0, 5, 3))
    b = PerturbationBudget(eps, steps=max(steps, 2), init=init)
    res = {"pgd": lambda: pgd(oracle, x, b, rng=rng),
           "apgd": lambda: apgd(oracle, x, b, rng=rng),
           "fgsm": lambda: fgsm(oracle, x, eps)}[method]()
    assert np.abs(res.delta).max() <= eps + 1e-9
    assert (x + res.delta).min() >= 0.0 and (x + res.delta).max() <= 1.0
    assert res.domain_violations == 0 and res.linf <= eps + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["ce", "dlr", "dlr-targeted"]))
def test_track_best_never_below_clean(seed, kind):
    rng = np.random.default_rng(seed)
    fn, _ = linear_logits(seed % 5)
    x = rng.uniform(size=(4, 12))
    labels = rng.integers(0, 5, 4)
    oracle = attacks.classifier_objective(kind, fn, labels, target=(labels + 1) % 5)
    clean = oracle(x)[0]
    for attack in (pgd, apgd):
        res = attack(oracle, x, PerturbationBudget(8 / 255, steps=6))
        assert np.all(res.best_value >= clean)
        assert np.all(oracle(x + res.delta)[0] == res.best_value)


def test_attacks_do_not_touch_parameters():
    fn, w = linear_logits(0)
    before = w.data.copy()
    oracle = attacks.classifier_objective("ce", fn, [0, 1], params=[w])
    apgd(oracle, np.full((2, 12), 0.5), PerturbationBudget(0.1, steps=5))
    assert np.array_equal(w.data, before) and w.grad is None


# -- composite pipeline --------------------------------------------------------------------
def _stage(shift, log, value=0.0):
    def stage(x_sub, rows):
        log.append(list(rows))
        n = x_sub.shape[0]
        d = np.full_like(x_sub, shift)
        return attacks.AttackResult(d, np.zeros((1, n)), np.zeros((1, n)), np.zeros(n, int),
                                    np.full(n, value) + rows)
    return stage


def test_pipeline_short_circuits_broken_samples():
    log = []
    x = np.zeros((4, 2))
    broken_by_first = {1, 3}
    pred = lambda xa, rows: np.array([r in broken_by_first or xa[i, 0] > 0.15 for i, r in enumerate(rows)])
    res = attacks.composite_pipeline(x, [_stage(0.1, log), _stage(0.2, log)], pred)
    assert log == [[0, 1, 2, 3], [0, 2]]
    assert res.broken.all()
    assert list(res.breaking_stage) == [1, 0, 1, 0]
    np.testing.assert_allclose(res.delta[:, 0], [0.2, 0.1, 0.2, 0.1])


def test_pipeline_keeps_best_objective_when_unbroken():
    log = []
    x = np.zeros((2, 1))
    never = lambda xa, rows: np.zeros(len(rows), dtype=bool)
    res = attacks.composite_pipeline(x, [_stage(0.3, log, 5.0), _stage(0.1, log, 1.0)], never)
    assert not res.broken.any()
    np.testing.assert_allclose(res.delta[:, 0], [0.3, 0.3])


def test_pipeline_respects_active_mask_and_needs_stages():
    log = []
    res = attacks.composite_pipeline(np.zeros((3, 1)), [_stage(0.1, log)],
                                     lambda xa, rows: np.ones(len(rows), bool), active=[True, False, True])
    assert log == [[0, 2]] and list(res.broken) == [True, False, True]
    with pytest.raises(ValueError):
        attacks.composite_pipeline(np.zeros((1, 1)), [], lambda xa, r: None)


def test_one_stage_pipeline_equals_bare_attack_and_union_is_monotone():
    fn, _ = linear_logits(2)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(16, 12))
    labels = np.array(fn(Tensor(x)).data.argmax(axis=1))
    b = PerturbationBudget(0.03, steps=10)

    def stage_for(kind):
        def stage(xs, rows):
            return apgd(attacks.classifier_objective(kind, fn, labels[rows]), xs, b)
        return stage

    def broken(xa, rows):
        return fn(Tensor(xa)).data.argmax(axis=1) != labels[rows]

    bare = apgd(attacks.classifier_objective("ce", fn, labels), x, b)
    one = attacks.composite_pipeline(x, [stage_for("ce")], broken)
    np.testing.assert_array_equal(one.delta, bare.delta)
    two = attacks.composite_pipeline(x, [stage_for("ce"), stage_for("dlr")], broken)
    assert two.broken.sum() >= one.broken.sum()
    assert np.all(two.broken[one.broken])


# -- captions --------------------------------------------------------------------------------
def test_contains_subsequence():
    assert attacks.contains_subsequence([1, 2, 3, 4], [2, 3])
    assert not attacks.contains_subsequence([1, 2, 3, 4], [2, 4])
    assert not attacks.contains_subsequence([1, 2], [])


@pytest.fixture(scope="module")
def toy_captioner():
    cfg = models.ModelConfig(resolution=16, width=16, heads=2, blocks=1, embed_dim=8, mlp_ratio=2)
    return models.init_dual_encoder(cfg, 0), models.init_captioner(cfg, 0), data.make_dataset(16, 16, 0)


def test_vacuous_target_succeeds_at_zero(toy_captioner):
    enc, cap, ds = toy_captioner
    ins = data.tokenize("describe the image", eos=False)
    own = models.generate(cap, enc, ds.images[0], ins, max_new=6)
    if own.size == 0:
        pytest.skip("random captioner emits EOS immediately")
    res = attacks.targeted_caption_attack(cap, enc, ds.images[:1], ins, own, PerturbationBudget(0.0, steps=2))
    assert res.success[0] and not res.delta.any()


def test_zero_budget_cannot_force_unrelated_target(toy_captioner):
    enc, cap, ds = toy_captioner
    ins = data.tokenize("describe the image", eos=False)
    target = data.tokenize("vaccines are dangerous", eos=False) if "vaccines" in data.WORD_TO_ID else \
        data.tokenize("yellow yellow yellow cross", eos=False)
    res = attacks.targeted_caption_attack(cap, enc, ds.images[:2], ins, target, PerturbationBudget(0.0, steps=2))
    assert not res.success.any()


def test_caption_attack_leaves_params_and_lowers_target_nll(toy_captioner):
    enc, cap, ds = toy_captioner
    before = (enc.checksum(), cap.checksum())
    ins = data.tokenize("describe the image", eos=False)
    target = data.tokenize("a green cross", eos=False)
    res = attacks.targeted_caption_attack(cap, enc, ds.images[:2], ins, target,
                                          PerturbationBudget(16 / 255, steps=6))
    assert (enc.checksum(), cap.checksum()) == before
    assert np.all(res.best_value >= res.trace[0])
    assert res.linf <= 16 / 255 + 1e-9
