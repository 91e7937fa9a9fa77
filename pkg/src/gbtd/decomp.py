"""Tucker and block term decompositions fitted by alternating least squares.

A block term decomposition (BTD) writes a tensor as a sum of ``R`` Tucker
terms, each a core multiplied along every factorized mode by a factor
matrix. Modes whose factor is ``None`` are left unfactorized: the core keeps
the full extent there.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import AlsNumericalError, RefusalError
from .tensor import as_tensor, frobenius_norm, mode_n_product, unfold

log = logging.getLogger(__name__)

__all__ = [
    "TuckerTerm",
    "BlockTermDecomp",
    "AlsConfig",
    "CPForm",
    "reconstruct",
    "btd_als",
    "random_btd",
    "hosvd",
    "degrade_to_cp",
    "degrade_to_tucker",
    "cp_reconstruct",
]


@dataclass
class TuckerTerm:
    """One rank-(d*_1, ..., d*_N) term: ``core`` times a factor per mode."""

    core: np.ndarray
    factors: list  # list of ndarray (d_n x d*_n) or None

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=np.float64)
        if len(self.factors) != self.core.ndim:
            raise ValueError(
                f"{len(self.factors)} factor slots for a core of order {self.core.ndim}"
            )
        self.factors = [None if a is None else np.asarray(a, dtype=np.float64) for a in self.factors]
        for n, a in enumerate(self.factors):
            if a is not None and (a.ndim != 2 or a.shape[1] != self.core.shape[n]):
                raise ValueError(
                    f"factor {n} has shape {a.shape}, core extent is {self.core.shape[n]}"
                )

    @property
    def ranks(self) -> tuple:
        """Rank signature; ``None`` marks an unfactorized mode."""
        return tuple(None if a is None else a.shape[1] for a in self.factors)

    @property
    def shape(self) -> tuple:
        return tuple(
            self.core.shape[n] if a is None else a.shape[0] for n, a in enumerate(self.factors)
        )

    def full(self) -> np.ndarray:
        # fixed-order products: reconstructions from row blocks of a factor
        # are bitwise slices of the full reconstruction
        t = self.core
        for n, a in enumerate(self.factors):
            if a is not None:
                t = mode_n_product(t, a, n, fixed_order=True)
        return t

    def size(self) -> int:
        """Number of stored reals."""
        return self.core.size + sum(a.size for a in self.factors if a is not None)


@dataclass
class BlockTermDecomp:
    terms: list
    target_shape: tuple

    def __post_init__(self):
        if len(self.terms) == 0:
            raise ValueError("a block term decomposition needs at least one term")
        self.target_shape = tuple(int(d) for d in self.target_shape)
        sig = self.terms[0].ranks
        for r, term in enumerate(self.terms):
            if term.ranks != sig:
                raise ValueError(f"term {r} has rank signature {term.ranks}, expected {sig}")
            if term.shape != self.target_shape:
                raise ValueError(
                    f"term {r} reconstructs shape {term.shape}, target is {self.target_shape}"
                )

    @property
    def R(self) -> int:
        return len(self.terms)

    @property
    def ranks(self) -> tuple:
        return self.terms[0].ranks

    def size(self) -> int:
        return sum(t.size() for t in self.terms)


@dataclass(frozen=True)
class AlsConfig:
    """Settings for :func:`btd_als`.

    ``init`` is one of ``"auto"``, ``"random"``, ``"hosvd"`` (R=1 only) or
    ``"pencil"``. With ``"auto"``, single-term fits start from the HOSVD and
    multi-term fits compare the pencil initializer (when the rank signature
    allows it) with ``n_starts`` seeded random starts over ``probe_sweeps``
    sweeps, then continue the best one.

    ``order="joint"`` updates the mode-n factors of all terms together and
    then all cores together; ``order="per_term"`` cycles through the terms,
    refitting one term's factors and core against the residual of the others.
    """

    max_sweeps: int = 500
    tol: float = 1e-12
    seed: int = 0
    ridge: float = 1e-10
    init: str = "auto"
    n_starts: int = 4
    probe_sweeps: int = 10
    line_search: bool = True
    order: str = "joint"

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if self.init not in ("auto", "random", "hosvd", "pencil"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.order not in ("joint", "per_term"):
            raise ValueError(f"unknown update order {self.order!r}")
        if self.n_starts < 1 or self.probe_sweeps < 1:
            raise ValueError("n_starts and probe_sweeps must be at least 1")


def reconstruct(d: BlockTermDecomp) -> np.ndarray:
    out = np.zeros(d.target_shape)
    for term in d.terms:
        out += term.full()
    return out


def random_btd(shape, R, ranks, rng, low=-1.0, high=1.0) -> BlockTermDecomp:
    """A BTD with i.i.d. uniform cores and factors."""
    shape = tuple(shape)
    ranks = _normalize_ranks(ranks, shape)
    core_shape = tuple(d if k is None else k for d, k in zip(shape, ranks))
    terms = []
    for _ in range(R):
        core = rng.uniform(low, high, core_shape)
        factors = [None if k is None else rng.uniform(low, high, (d, k)) for d, k in zip(shape, ranks)]
        terms.append(TuckerTerm(core, factors))
    return BlockTermDecomp(terms, shape)


def _normalize_ranks(ranks, shape):
    ranks = tuple(None if k is None else int(k) for k in ranks)
    if len(ranks) != len(shape):
        raise ValueError(f"{len(ranks)} ranks given for a tensor of order {len(shape)}")
    for n, (k, d) in enumerate(zip(ranks, shape)):
        if k is None:
            continue
        if k < 1:
            raise ValueError(f"rank {k} for mode {n} must be positive")
        if k > d:
            raise ValueError(f"rank {k} for mode {n} exceeds its extent {d}")
    return ranks


# ---------------------------------------------------------------------------
# least-squares machinery


def _solve_gram(gram, rhs, ridge, current, *, mode, block, terms):
    """Solve ``(gram + ridge*I) x = rhs + ridge*current`` by pivoted Cholesky.

    The ridge pulls towards the current iterate rather than towards zero, so
    each update cannot increase the unregularized residual and the ridge
    leaves fixed points unbiased.
    """
    n = gram.shape[0]
    g = gram + ridge * np.eye(n)
    rhs = rhs + ridge * current
    c, piv, rank, info = lapack.dpstrf(g, lower=0)
    if info < 0:
        raise AlsNumericalError(f"dpstrf failed with info={info}", mode=mode)
    if rank < n:
        bad = int(piv[rank]) - 1
        term = terms[bad // block]
        if ridge == 0.0:
            raise AlsNumericalError(
                f"singular normal equations for mode {mode}, term {term} "
                f"(rank {rank} of {n}); use a positive ridge",
                mode=mode,
                term=term,
            )
        return np.linalg.lstsq(g, rhs, rcond=None)[0]
    u = np.triu(c)
    p = piv - 1
    y = scipy.linalg.solve_triangular(u, rhs[p], trans="T", lower=False)
    z = scipy.linalg.solve_triangular(u, y, lower=False)
    out = np.empty_like(z)
    out[p] = z
    return out


def _kron(mats):
    k = np.ones((1, 1))
    for m in mats:
        k = np.kron(k, m)
    return k


class _Fit:
    """Mutable ALS state: cores and factors of all terms for a fixed target."""

    def __init__(self, cores, factors, fmodes):
        self.cores = cores
        self.factors = factors  # list over terms of list over modes
        self.fmodes = fmodes

    def copy(self):
        return _Fit(
            [c.copy() for c in self.cores],
            [[None if a is None else a.copy() for a in fs] for fs in self.factors],
            self.fmodes,
        )

    def term_full(self, r):
        t = self.cores[r]
        for n in self.fmodes:
            t = mode_n_product(t, self.factors[r][n], n)
        return t

    def full(self):
        out = self.term_full(0)
        for r in range(1, len(self.cores)):
            out = out + self.term_full(r)
        return out

    def normalize(self):
        for r in range(len(self.cores)):
            for n in self.fmodes:
                q, rr = np.linalg.qr(self.factors[r][n])
                self.factors[r][n] = q
                self.cores[r] = mode_n_product(self.cores[r], rr, n)

    def extrapolate(self, prev, step):
        return _Fit(
            [c + step * (c - p) for c, p in zip(self.cores, prev.cores)],
            [
                [None if a is None else a + step * (a - pa) for a, pa in zip(fs, pfs)]
                for fs, pfs in zip(self.factors, prev.factors)
            ],
            self.fmodes,
        )

    def update_factors(self, y, terms, n, ridge):
        others = [m for m in range(y.ndim) if m != n]
        partial = []
        for r in terms:
            t = self.cores[r]
            for m in self.fmodes:
                if m != n:
                    t = mode_n_product(t, self.factors[r][m], m)
            partial.append(t)
        rhs = np.hstack([np.tensordot(y, t, axes=(others, others)) for t in partial])
        gram = np.block(
            [[np.tensordot(a, b, axes=(others, others)) for b in partial] for a in partial]
        )
        k = partial[0].shape[n]
        current = np.vstack([self.factors[r][n].T for r in terms])
        sol = _solve_gram(gram, rhs.T, ridge, current, mode=n, block=k, terms=terms)
        for i, r in enumerate(terms):
            self.factors[r][n] = np.ascontiguousarray(sol[i * k : (i + 1) * k].T)

    def update_cores(self, y, terms, ridge):
        fm = self.fmodes
        um = [m for m in range(y.ndim) if m not in fm]
        perm = um + fm
        core_shape = self.cores[terms[0]].shape
        p = int(np.prod([core_shape[m] for m in fm]))
        blocks = []
        for r in terms:
            t = y
            for n in fm:
                t = mode_n_product(t, self.factors[r][n].T, n)
            blocks.append(np.transpose(t, perm).reshape(-1, p))
        grams = {}
        for i, r in enumerate(terms):
            for j, s in enumerate(terms):
                if j < i:
                    grams[i, j] = grams[j, i].T
                else:
                    grams[i, j] = _kron([self.factors[r][n].T @ self.factors[s][n] for n in fm])
        m = np.block([[grams[i, j] for j in range(len(terms))] for i in range(len(terms))])
        current = np.vstack(
            [np.transpose(self.cores[r], perm).reshape(-1, p).T for r in terms]
        )
        sol = _solve_gram(m, np.hstack(blocks).T, ridge, current, mode="core", block=p, terms=terms)
        inv = np.argsort(perm)
        permuted_shape = [core_shape[k] for k in perm]
        for i, r in enumerate(terms):
            g = sol[i * p : (i + 1) * p].T.reshape(permuted_shape)
            self.cores[r] = np.ascontiguousarray(np.transpose(g, inv))

    def sweep(self, x, ridge, order):
        R = len(self.cores)
        if order == "joint" or R == 1:
            terms = list(range(R))
            for n in self.fmodes:
                self.update_factors(x, terms, n, ridge)
            self.update_cores(x, terms, ridge)
        else:
            fulls = [self.term_full(r) for r in range(R)]
            total = sum(fulls)
            for r in range(R):
                y = x - (total - fulls[r])
                for n in self.fmodes:
                    self.update_factors(y, [r], n, ridge)
                self.update_cores(y, [r], ridge)
                new = self.term_full(r)
                total = total - fulls[r] + new
                fulls[r] = new
        self.normalize()


# ---------------------------------------------------------------------------
# initializers


def _random_fit(shape, R, ranks, fmodes, rng):
    core_shape = tuple(d if k is None else k for d, k in zip(shape, ranks))
    cores = [rng.uniform(-1.0, 1.0, core_shape) for _ in range(R)]
    factors = [
        [None if k is None else rng.uniform(-1.0, 1.0, (d, k)) for d, k in zip(shape, ranks)]
        for _ in range(R)
    ]
    fit = _Fit(cores, factors, fmodes)
    fit.normalize()
    return fit


def _leading_subspace(m, k):
    u, _, _ = np.linalg.svd(m, full_matrices=False)
    return u[:, :k]


def hosvd(x, ranks) -> TuckerTerm:
    """Truncated higher-order SVD; exact when ``ranks`` match the multilinear rank."""
    x = as_tensor(x)
    ranks = _normalize_ranks(ranks, x.shape)
    factors = [None if k is None else _leading_subspace(unfold(x, n), k) for n, k in enumerate(ranks)]
    core = x
    for n, a in enumerate(factors):
        if a is not None:
            core = mode_n_product(core, a.T, n)
    return TuckerTerm(core, factors)


def _group_eigvectors(coupling, R, size):
    """Partition eigen-indices into ``R`` groups of ``size`` by coupling strength."""
    n = coupling.shape[0]
    groups = [[i] for i in range(n)]
    aff = coupling + coupling.T
    while len(groups) > R:
        best = None
        for a, b in itertools.combinations(range(len(groups)), 2):
            if len(groups[a]) + len(groups[b]) > size:
                continue
            w = max(aff[i, j] for i in groups[a] for j in groups[b])
            if best is None or w > best[0]:
                best = (w, a, b)
        if best is None:
            return None
        _, a, b = best
        groups[a] = groups[a] + groups[b]
        del groups[b]
    if any(len(g) != size for g in groups):
        return None
    return groups


def _pencil_fit(x, R, ranks, fmodes, rng):
    """Algebraic initializer from the eigenstructure of a slice pencil.

    Needs two factorized modes ``p, q`` with equal ranks ``k`` and
    ``R*k <= min(d_p, d_q)``, plus at least two slices along the remaining
    modes. In the compressed coordinates every slice is ``B_p D B_q^T`` with
    ``D`` block diagonal, so ``S_a S_b^{-1}`` is similar to a block-diagonal
    matrix whose invariant subspaces are the per-term column spaces in mode
    ``p``. Returns ``None`` when the structure is not available.
    """
    shape = x.shape
    pair = None
    for p, q in itertools.combinations(fmodes, 2):
        k = ranks[p]
        if ranks[q] == k and R * k <= min(shape[p], shape[q]):
            pair = (p, q)
            break
    if pair is None or R < 2:
        return None
    p, q = pair
    k = ranks[p]
    K = R * k
    nslices = x.size // (shape[p] * shape[q])
    if nslices < 2:
        return None
    up = _leading_subspace(unfold(x, p), K)
    uq = _leading_subspace(unfold(x, q), K)
    rest = [m for m in range(x.ndim) if m not in pair]
    slices = np.transpose(x, [p, q] + rest).reshape(shape[p], shape[q], nslices)
    slices = np.einsum("ia,ijs,jb->sab", up, slices, uq)
    w = rng.standard_normal((4, nslices))
    sa, sb, sc, sd = (np.tensordot(wi, slices, axes=(0, 0)) for wi in w)
    try:
        sb_inv = np.linalg.inv(sb)
        vals, vecs = np.linalg.eig(sa @ sb_inv)
        vinv = np.linalg.inv(vecs)
    except np.linalg.LinAlgError:
        return None
    coupling = np.zeros((K, K))
    for s in (sc, sd):
        c = np.abs(vinv @ (s @ sb_inv) @ vecs)
        coupling += c / max(c.max(), 1e-300)
    np.fill_diagonal(coupling, 0.0)
    groups = _group_eigvectors(coupling, R, k)
    if groups is None:
        return None
    bases = []
    for g in groups:
        v = vecs[:, g]
        bases.append(_leading_subspace(np.hstack([v.real, v.imag]), k))
    basis = np.hstack(bases)
    try:
        dual = np.linalg.solve(basis, up.T)  # K x d_p
    except np.linalg.LinAlgError:
        return None
    isolated = mode_n_product(x, dual, p)
    cores, factors = [], []
    for r, b in enumerate(bases):
        rows = isolated.take(range(r * k, (r + 1) * k), axis=p)
        term_tensor = mode_n_product(rows, up @ b, p)
        term = hosvd(term_tensor, ranks)
        cores.append(term.core)
        factors.append(term.factors)
    fit = _Fit(cores, factors, fmodes)
    fit.normalize()
    return fit


# ---------------------------------------------------------------------------
# driver


def _run(x, fit, sweeps, cfg, trace):
    """Run up to ``sweeps`` ALS sweeps, appending relative errors to ``trace``.

    ``x`` has unit norm, so the residual norm is the relative error. An
    extrapolated point along the last step replaces the sweep result only if
    it fits better, which keeps the trace non-increasing.
    """
    for _ in range(sweeps):
        before = fit.copy() if cfg.line_search else None
        fit.sweep(x, cfg.ridge, cfg.order)
        err = frobenius_norm(fit.full() - x)
        if before is not None and trace:
            trial = fit.extrapolate(before, (len(trace) + 1) ** (1.0 / 3.0))
            trial_err = frobenius_norm(trial.full() - x)
            if trial_err < err:
                trial.normalize()
                fit, err = trial, trial_err
        trace.append(err)
        if err == 0.0 or (len(trace) >= 2 and trace[-2] - trace[-1] < cfg.tol):
            return fit, True
    return fit, False


def btd_als(x, R: int, ranks: Sequence[Optional[int]], cfg: AlsConfig = AlsConfig()):
    """Fit an ``R``-term block term decomposition by alternating least squares.

    Parameters
    ----------
    x : array_like
        Target tensor.
    R : int
        Number of Tucker terms.
    ranks : sequence of int or None
        Rank per mode; ``None`` leaves the mode unfactorized.
    cfg : AlsConfig

    Returns
    -------
    decomposition : BlockTermDecomp
    trace : list of float
        Relative reconstruction error after each sweep of the returned fit.
    """
    x = as_tensor(x)
    if R < 1:
        raise ValueError("R must be at least 1")
    ranks = _normalize_ranks(ranks, x.shape)
    fmodes = [n for n, k in enumerate(ranks) if k is not None]
    norm = frobenius_norm(x)
    if norm == 0.0:
        core_shape = tuple(d if k is None else k for d, k in zip(x.shape, ranks))
        terms = [
            TuckerTerm(
                np.zeros(core_shape),
                [None if k is None else np.eye(d, k) for d, k in zip(x.shape, ranks)],
            )
            for _ in range(R)
        ]
        return BlockTermDecomp(terms, x.shape), [0.0]
    xn = x / norm

    if cfg.init == "hosvd" and R != 1:
        raise ValueError("the HOSVD initializer is defined for R=1 only")

    candidates = []
    if R == 1 and cfg.init in ("auto", "hosvd"):
        term = hosvd(xn, ranks)
        candidates.append(_Fit([term.core], [term.factors], fmodes))
    else:
        if cfg.init in ("auto", "pencil"):
            fit = _pencil_fit(xn, R, ranks, fmodes, np.random.default_rng([cfg.seed, 0xBEEF]))
            if fit is not None:
                candidates.append(fit)
            elif cfg.init == "pencil":
                raise ValueError("the pencil initializer does not apply to this rank signature")
        if cfg.init in ("auto", "random"):
            candidates.extend(
                _random_fit(x.shape, R, ranks, fmodes, np.random.default_rng([cfg.seed, k]))
                for k in range(cfg.n_starts)
            )

    if len(candidates) == 1:
        trace = []
        fit, _ = _run(xn, candidates[0], cfg.max_sweeps, cfg, trace)
    else:
        probe = min(cfg.probe_sweeps, cfg.max_sweeps)
        runs = []
        for cand in candidates:
            trace = []
            fit, converged = _run(xn, cand, probe, cfg, trace)
            runs.append((trace[-1], trace, fit, converged))
        best = min(range(len(runs)), key=lambda i: runs[i][0])
        _, trace, fit, converged = runs[best]
        log.debug("btd_als: candidate %d of %d selected at error %.3e", best, len(runs), trace[-1])
        if not converged:
            fit, _ = _run(xn, fit, cfg.max_sweeps - len(trace), cfg, trace)

    terms = []
    for r in range(R):
        factors = [fit.factors[r][n] if n in fmodes else None for n in range(x.ndim)]
        terms.append(TuckerTerm(fit.cores[r] * norm, factors))
    return BlockTermDecomp(terms, x.shape), [float(e) for e in trace]


# ---------------------------------------------------------------------------
# degeneracy


@dataclass
class CPForm:
    """Sum of rank-one outer products; ``vectors[r][n]`` is term r's mode-n vector."""

    vectors: list = field(default_factory=list)

    @property
    def R(self):
        return len(self.vectors)


def degrade_to_cp(d: BlockTermDecomp) -> CPForm:
    """Rewrite an all-rank-one BTD as CP factors, folding the core scalar into mode 0."""
    eff = [t.core.shape for t in d.terms]
    if any(k != 1 for shape in eff for k in shape):
        raise RefusalError(
            f"CP form needs every rank equal to 1; rank signature is {eff[0]}"
        )
    vectors = []
    for term in d.terms:
        scalar = float(term.core.reshape(-1)[0])
        vs = []
        for n, a in enumerate(term.factors):
            v = np.ones(1) if a is None else a[:, 0].copy()
            if n == 0:
                v = v * scalar
            vs.append(v)
        vectors.append(vs)
    return CPForm(vectors)


def cp_reconstruct(cp: CPForm) -> np.ndarray:
    out = None
    for vs in cp.vectors:
        t = vs[0]
        for v in vs[1:]:
            t = np.multiply.outer(t, v)
        out = t if out is None else out + t
    return out


def degrade_to_tucker(d: BlockTermDecomp) -> TuckerTerm:
    if d.R != 1:
        raise RefusalError(f"Tucker form needs exactly one term; this decomposition has {d.R}")
    return d.terms[0]
