import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatsem import losses as L
from splatsem.nn import Tensor

from conftest import unit_rows
from gradient_suite import loss_cases, run


def T(x, grad=False):
    return Tensor(np.asarray(x, np.float64), requires_grad=grad)


@pytest.mark.parametrize("name", sorted(loss_cases()))
def test_loss_gradients(name):
    f, params = loss_cases()[name]
    assert run({name: (f, params)})[name] < 1e-4


# -- VL losses -------------------------------------------------------------------

def test_cosine_examples(rng):
    t = rng.normal(size=(6, 4))
    assert L.cosine_loss(T(t), t).item() == pytest.approx(0, abs=1e-12)
    assert L.cosine_loss(T(-t), t).item() == pytest.approx(2)
    a, b = np.eye(4)[:2], np.eye(4)[2:]
    assert L.cosine_loss(T(a), b).item() == pytest.approx(1)


def test_cosine_zero_row_floored(caplog):
    out = L.cosine_loss(T([[0.0, 0.0], [1.0, 0.0]]), [[1.0, 0.0], [1.0, 0.0]])
    assert np.isfinite(out.item()) and out.item() == pytest.approx(0.5)
    assert "norm floor" in caplog.text


def test_l2_examples(rng):
    t = rng.normal(size=(5, 3))
    assert L.l2_loss(T(t), t).item() == 0
    p = t.copy()
    p[2, 1] += 1
    assert L.l2_loss(T(p), t).item() == pytest.approx(1 / 5)
    q = rng.normal(size=(5, 3))
    ref = sum(sum((q[i, j] - t[i, j]) ** 2 for j in range(3)) for i in range(5)) / 5
    assert L.l2_loss(T(q), t).item() == pytest.approx(ref, rel=1e-12)


def test_labeled_subset_and_vacuous(rng, caplog):
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    m = np.array([True, False, True, False])
    assert L.l2_loss(T(p), t, m).item() == pytest.approx(L.l2_loss(T(p[m]), t[m]).item())
    assert L.cosine_loss(T(p), t, np.zeros(4, bool)).item() == 0
    assert "nothing to average" in caplog.text


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32 - 1))
def test_loss_ranges(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    c = L.cosine_loss(T(p), t).item()
    assert -1e-12 <= c <= 2 + 1e-12
    assert L.l2_loss(T(p), t).item() >= 0


def test_class_split_properties(rng):
    labels = np.r_[np.zeros(11), np.ones(3), np.full(20, 2), -np.ones(5)].astype(int)
    split = L.class_split(labels, 10, 0)
    assert sorted(split) == [0, 2]
    for c, (a, b) in split.items():
        assert len(a) and len(b) and not set(a) & set(b)
        assert set(a) | set(b) == set(np.flatnonzero(labels == c))


def test_contrastive_orthogonal_closed_form():
    fa = T(np.eye(2))
    fb = T(np.eye(2))
    assert L.pooled_contrastive(fa, fb, 1.0).item() == pytest.approx(np.log1p(np.exp(-1)), abs=1e-12)


def test_contrastive_uniform_rows():
    f = T(np.ones((3, 4)))
    assert L.pooled_contrastive(f, f, 0.2).item() == pytest.approx(np.log(3), abs=1e-12)


def test_contrastive_closed_form_through_pooling():
    # class 0 rows are e1, class 1 rows are e2, so every half pools to its basis vector
    pred = np.r_[np.tile([1.0, 0, 0], (4, 1)), np.tile([0, 1.0, 0], (4, 1))]
    labels = np.r_[np.zeros(4), np.ones(4)]
    out = L.aggregated_contrastive(T(pred), labels, 1.0, min_class_size=2)
    assert out.item() == pytest.approx(np.log1p(np.exp(-1)), abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 100))
def test_contrastive_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(30, 4))
    labels = rng.integers(0, 3, 30)
    a = L.aggregated_contrastive(T(pred), labels, 0.2, 2, 5).item()
    b = L.aggregated_contrastive(T(pred * k), labels, 0.2, 2, 5).item()
    assert a == pytest.approx(b, abs=1e-9)
    assert a >= 0


def test_contrastive_too_few_classes(caplog):
    out = L.aggregated_contrastive(T(np.ones((20, 3))), np.zeros(20), 0.2)
    assert out.item() == 0
    assert "fewer than 2" in caplog.text


def test_vl_total_warm_start():
    w = L.LossWeights(cos=1, l2=2, con=10)
    parts = {"cos": T(1.0), "l2": T(1.0), "con": T(1.0)}
    assert L.vl_total(parts, w, 0.1).item() == 3
    assert L.vl_total(parts, w, 0.25).item() == 13
    zero = L.LossWeights(cos=0, l2=0, con=0)
    assert L.vl_total(parts, zero, 0.9).item() == 0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(cos=-1).validate()
    with pytest.raises(ValueError):
        L.LossWeights(tau_init=0).validate()


# -- SSL losses ---------------------------------------------------------------------

def test_mgm_examples(rng):
    true = rng.normal(size=(5, 59))
    assert L.mgm_loss(T(true), true, [0, 3]).item() == 0
    p = true.copy()
    p[1] += 5
    assert L.mgm_loss(T(p), true, [0, 3]).item() == 0
    p = true.copy()
    p[3, 7] += 0.1
    assert L.mgm_loss(T(p), true, [3]).item() == pytest.approx(0.01)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 32 - 1))
def test_masked_losses_ignore_unmasked_rows(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(8, 5)), rng.normal(size=(8, 5))
    masked = np.array([1, 4, 6])
    q = p.copy()
    q[[0, 2, 3, 5, 7]] = rng.normal(size=(5, 5))
    lab = np.ones(8, bool)
    for f in (lambda x: L.mgm_loss(T(x), t, masked), lambda x: L.ibot_loss(T(x), t, masked),
              lambda x: L.la_loss(T(x), t, masked, lab)):
        assert f(p).item() == f(q).item()


def test_sim_examples(rng):
    g = unit_rows(rng, 2, 6)
    loc = np.tile(g[0], (3, 1))
    student = np.r_[g, loc]
    teacher = np.tile(g[0], (2, 1))
    # identical projections everywhere -> -1
    same = np.tile(g[0], (5, 1))
    assert L.sim_loss(T(same), teacher).item() == pytest.approx(-1)
    # same-view pairs are skipped: global 0 is compared with teacher 1 only
    out = L.sim_loss(T(student), g).item()
    keep = [(0, 1), (1, 0)] + [(v, j) for v in range(2, 5) for j in range(2)]
    ref = -np.mean([student[v] @ g[j] for v, j in keep])
    assert out == pytest.approx(ref, abs=1e-12)


def test_rate_distortion_closed_forms(rng):
    assert L.rate_distortion(T(np.eye(2)), 1.0).item() == pytest.approx(np.log(3), abs=1e-12)
    v = unit_rows(rng, 1, 4)[0]
    s2 = 0.7
    cov = s2 * np.outer(v, v)
    assert L.rate_distortion(T(cov), 0.5).item() == pytest.approx(
        0.5 * np.log(1 + 4 / 0.25 * s2), abs=1e-12)


def test_coding_rate_identical_rows_zero_cov():
    z = T(np.tile([1.0, 2.0, 3.0], (5, 1)))
    assert L.coding_rate_loss(z, 0.5).item() == pytest.approx(0.0, abs=1e-12)


def test_coding_rate_single_row(caplog):
    assert L.coding_rate_loss(T(np.ones((1, 3)))).item() == 0
    assert "fewer than 2" in caplog.text


def test_coding_rate_unbiased_covariance(rng):
    z = rng.normal(size=(10, 3))
    np.testing.assert_allclose(L.covariance(T(z)).data, np.cov(z, rowvar=False), atol=1e-12)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 32 - 1))
def test_rate_monotone_in_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    lam = rng.uniform(0, 2, d)
    i = int(rng.integers(d))
    prev = -np.inf
    for x in np.linspace(0, 3, 7):
        lam[i] = x
        r = L.rate_distortion(T(np.diag(lam)), 0.5).item()
        assert r >= prev
        prev = r


def test_ibot_examples(rng):
    t = rng.normal(size=(5, 4))
    assert L.ibot_loss(T(t), t, [0, 2]).item() == pytest.approx(-1)
    assert L.ibot_loss(T(np.eye(4)[:2]), np.eye(4)[2:], [0, 1]).item() == pytest.approx(0)
    assert L.ibot_loss(T(t), t, []).item() == 0


def test_la_examples(rng):
    t = rng.normal(size=(6, 4))
    assert L.la_loss(T(t), t, [0, 1], np.ones(6, bool)).item() == pytest.approx(0, abs=1e-12)
    p = rng.normal(size=(6, 4))
    lab = np.array([1, 0, 1, 1, 0, 0], bool)
    sel = [0, 2]
    ref = L.cosine_loss(T(p[sel]), t[sel]).item() + L.l2_loss(T(p[sel]), t[sel]).item()
    assert L.la_loss(T(p), t, [0, 1, 2], lab).item() == pytest.approx(ref)
    assert L.la_loss(T(p), t, [1, 4], lab).item() == 0
