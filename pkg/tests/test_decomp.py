import numpy as np
import pytest

from gbtd.decomp import (
    AlsConfig,
    BlockTermDecomp,
    TuckerTerm,
    btd_als,
    cp_reconstruct,
    degrade_to_cp,
    degrade_to_tucker,
    hosvd,
    random_btd,
    reconstruct,
)
from gbtd.errors import AlsNumericalError, RefusalError

from oracles import loop_btd, rel


def _monotone(trace, slack=1e-10):
    return all(b <= a + slack for a, b in zip(trace, trace[1:]))


def test_reconstruct_identity_factors(rng):
    core = rng.standard_normal((3, 4, 2))
    d = BlockTermDecomp([TuckerTerm(core, [np.eye(3), np.eye(4), np.eye(2)])], (3, 4, 2))
    assert np.array_equal(reconstruct(d), core)


def test_reconstruct_zero_cores(rng):
    d = random_btd((4, 4, 4), 3, (2, 2, 2), rng)
    for t in d.terms:
        t.core[...] = 0
    assert not reconstruct(d).any()


@pytest.mark.parametrize("ranks", [(2, 2, 2), (2, None, 3), (None, 1, None)])
def test_reconstruct_matches_elementwise_sum(rng, ranks):
    d = random_btd((4, 4, 4), 2, ranks, rng)
    expected = loop_btd([t.core for t in d.terms], [t.factors for t in d.terms], (4, 4, 4))
    assert rel(reconstruct(d), expected) < 1e-13


def test_reconstruct_linear_in_each_term(rng):
    d = random_btd((3, 4, 5), 3, (2, 2, 2), rng)
    base = reconstruct(d)
    contrib = d.terms[1].full()
    d.terms[1].core *= 2.5
    np.testing.assert_allclose(reconstruct(d), base + 1.5 * contrib, rtol=1e-12, atol=1e-12)


def test_invalid_terms():
    with pytest.raises(ValueError):
        TuckerTerm(np.zeros((2, 2)), [np.zeros((3, 3)), None])
    with pytest.raises(ValueError):
        BlockTermDecomp([], (2, 2))


def test_stored_size_formula(rng):
    d1, d2, d3, d4, R, p, q = 3, 3, 8, 6, 3, 2, 4
    d = random_btd((d1, d2, d3, d4), R, (None, None, p, q), rng)
    assert d.size() == R * (d1 * d2 * p * q + d3 * p + d4 * q)


def test_als_recovers_synthetic(rng):
    d = random_btd((6, 6, 6), 2, (2, 2, 2), rng)
    x = reconstruct(d)
    fit, trace = btd_als(x, 2, (2, 2, 2), AlsConfig(seed=3))
    assert trace[-1] < 1e-6
    assert rel(reconstruct(fit), x) < 1e-6
    assert fit.R == 2 and fit.ranks == (2, 2, 2)


def test_als_full_rank_matrix_is_exact(rng):
    x = rng.standard_normal((4, 5))
    _, trace = btd_als(x, 1, (4, 5))
    assert trace[-1] < 1e-10


@pytest.mark.parametrize("order", ["joint", "per_term"])
@pytest.mark.parametrize("seed", range(6))
def test_als_trace_monotone_on_noise(order, seed):
    x = np.random.default_rng(seed).standard_normal((5, 6, 4))
    _, trace = btd_als(x, 3, (2, 2, 2), AlsConfig(max_sweeps=60, seed=seed, order=order))
    assert _monotone(trace)
    assert 1 <= len(trace) <= 60


@pytest.mark.parametrize("init", ["random", "pencil"])
def test_als_inits_recover(rng, init):
    d = random_btd((3, 3, 8, 8), 2, (None, None, 2, 2), rng)
    x = reconstruct(d)
    _, trace = btd_als(x, 2, (None, None, 2, 2), AlsConfig(init=init, seed=1))
    assert _monotone(trace)
    if init == "pencil":
        assert trace[-1] < 1e-6


def test_hosvd_exact_on_tucker(rng):
    d = random_btd((5, 4, 6), 1, (2, 3, 2), rng)
    x = reconstruct(d)
    t = hosvd(x, (2, 3, 2))
    assert rel(t.full(), x) < 1e-12
    for a in t.factors:
        np.testing.assert_allclose(a.T @ a, np.eye(a.shape[1]), atol=1e-12)


def test_als_deterministic(rng):
    x = rng.standard_normal((4, 5, 6))
    a, ta = btd_als(x, 2, (2, 2, 2), AlsConfig(max_sweeps=30, seed=11))
    b, tb = btd_als(x, 2, (2, 2, 2), AlsConfig(max_sweeps=30, seed=11))
    assert ta == tb
    assert np.array_equal(reconstruct(a), reconstruct(b))


def test_als_zero_input():
    d, trace = btd_als(np.zeros((3, 4, 5)), 2, (2, 2, None))
    assert trace == [0.0]
    assert not reconstruct(d).any()
    for t in d.terms:
        for a in t.factors:
            if a is not None:
                np.testing.assert_array_equal(a.T @ a, np.eye(a.shape[1]))


def test_als_max_sweeps_respected(rng):
    x = rng.standard_normal((5, 5, 5))
    _, trace = btd_als(x, 2, (2, 2, 2), AlsConfig(max_sweeps=3, tol=0.0))
    assert len(trace) <= 3


def test_als_rank_exceeds_extent(rng):
    with pytest.raises(ValueError):
        btd_als(rng.standard_normal((3, 4)), 1, (4, 2))
    with pytest.raises(ValueError):
        btd_als(rng.standard_normal((3, 4)), 0, (1, 1))


def test_als_singular_without_ridge_names_mode_and_term(rng):
    a, b, c = rng.standard_normal((3, 4))
    x = np.einsum("i,j,k->ijk", a, b, c)
    with pytest.raises(AlsNumericalError) as info:
        btd_als(x, 2, (2, 2, 2), AlsConfig(ridge=0.0, init="random"))
    assert info.value.mode is not None and info.value.term is not None
    assert f"mode {info.value.mode}" in str(info.value)
    # a positive ridge regularizes the same problem
    _, trace = btd_als(x, 2, (2, 2, 2), AlsConfig(init="random", max_sweeps=20))
    assert _monotone(trace)


@pytest.mark.parametrize(
    "kwargs", [dict(max_sweeps=0), dict(tol=-1), dict(ridge=-1), dict(init="svd"), dict(order="x")]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AlsConfig(**kwargs)


def test_cp_degeneracy(rng):
    d = random_btd((4, 4, 4), 3, (1, 1, 1), rng)
    cp = degrade_to_cp(d)
    assert cp.R == 3 and all(len(v) == 3 for v in cp.vectors)
    assert rel(cp_reconstruct(cp), reconstruct(d)) <= 1e-12


def test_cp_single_outer_product(rng):
    d = random_btd((2, 3, 4), 1, (1, 1, 1), rng)
    (u, v, w), = degrade_to_cp(d).vectors
    np.testing.assert_allclose(np.einsum("i,j,k->ijk", u, v, w), reconstruct(d), rtol=1e-13)


def test_cp_refusal(rng):
    with pytest.raises(RefusalError):
        degrade_to_cp(random_btd((4, 4, 4), 2, (2, 1, 1), rng))


def test_tucker_degeneracy(rng):
    d = random_btd((4, 3, 5), 1, (2, 2, 2), rng)
    t = degrade_to_tucker(d)
    assert t is d.terms[0]
    again = BlockTermDecomp([t], d.target_shape)
    assert np.array_equal(reconstruct(again), reconstruct(d))
    with pytest.raises(RefusalError):
        degrade_to_tucker(random_btd((4, 3, 5), 2, (2, 2, 2), rng))
