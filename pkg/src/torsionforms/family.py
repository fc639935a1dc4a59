"""Flat superconnection families over a torus base.

A family bundles a graded complex whose differential, higher terms,
connection potential and metric vary over T^d, with the total superconnection
A' = d + Gamma + a_0 + a_1 + ...  exactly flat.  Families are produced by a
seeded gauge construction, so flatness holds by conjugation rather than by
truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .graded import (
    GradedSpace,
    SchemaError,
    ContractError,
    betti_numbers,
    _empty_like,
)
from .exterior import (
    TorusGrid,
    GeneratorSet,
    SuperForm,
    ScalarForm,
    make_generators,
    exp_neg,
    f_prime_even,
    f_odd,
    normalize_chern,
    _expm_stack,
    POINT,
)

PARAM_ORDER = ("ds", "dt", "dT", "du", "dv")


def gauss_nodes(n, a=0.0, b=1.0):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


@dataclass
class HStructure:
    """Self-adjoint grading-preserving endomorphism with a spectral gap.

    Every higher term of the superconnection must strictly raise the
    h-eigenvalue by at least eps, so conjugation by T^{h/2} is O(T^{eps/2}).
    """

    h: np.ndarray
    eps: float

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.complex128)
        if self.eps <= 0:
            raise SchemaError("h gap must be positive")


@dataclass
class FlatFamily:
    """Flat superconnection data in an explicit trivialization."""

    space: GradedSpace
    grid: TorusGrid
    gamma: np.ndarray            # (d, *grid, n, n) connection potential
    a: dict                      # j -> coefficient; j=0: (*grid,n,n); j=1: (d,*grid,n,n); j=2: (*grid,n,n)
    g: np.ndarray                # (*grid, n, n) metric
    h: HStructure = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.space.total_dim
        d = self.grid.dim
        target = self.grid.shape + (n, n)
        self.g = np.asarray(self.g, dtype=np.complex128)
        if self.g.shape == (n, n):
            self.g = np.broadcast_to(self.g, target).copy()
        if self.g.shape != target:
            raise SchemaError("metric field of wrong shape")
        self.gamma = np.asarray(self.gamma, dtype=np.complex128)
        if self.gamma.shape != (d,) + target:
            if d == 0 and self.gamma.size == 0:
                self.gamma = np.zeros((0,) + target, dtype=np.complex128)
            else:
                raise SchemaError("connection potential of wrong shape")
        fixed = {}
        for j, arr in self.a.items():
            arr = np.asarray(arr, dtype=np.complex128)
            want = target if j != 1 else (d,) + target
            if arr.shape != want:
                raise SchemaError(f"a_{j} field of wrong shape")
            fixed[int(j)] = arr
        self.a = fixed
        if self.h is not None and self.h.h.shape != target:
            if self.h.h.shape == (n, n):
                self.h = HStructure(np.broadcast_to(self.h.h, target).copy(), self.h.eps)
            else:
                raise SchemaError("h field of wrong shape")

    # -- frames ---------------------------------------------------------

    @property
    def dim_base(self):
        return self.grid.dim

    def gram_factor(self):
        """R(x) with g = R^H R pointwise."""
        L = np.linalg.cholesky(self.g)
        return L.conj().swapaxes(-1, -2)

    def metric_adjoint(self, arr):
        """g-adjoint of a matrix field."""
        return np.linalg.solve(self.g, arr.conj().swapaxes(-1, -2) @ self.g)

    def adjoint_potential(self):
        """Gamma* of the adjoint connection: G^{-1} dG - G^{-1} Gamma^H G."""
        d = self.dim_base
        out = np.zeros_like(self.gamma)
        Ginv = np.linalg.inv(self.g)
        for mu in range(d):
            dG = self.grid.derivative(self.g, axis=mu)
            out[mu] = Ginv @ (dG - self.gamma[mu].conj().swapaxes(-1, -2) @ self.g)
        return out

    def omega(self):
        """omega = Gamma* - Gamma, a self-adjoint 1-form potential."""
        return self.adjoint_potential() - self.gamma

    def adjoint_terms(self):
        """a''_j, the blockwise g-adjoints of the higher terms."""
        out = {}
        for j, arr in self.a.items():
            if j == 1:
                out[j] = np.stack([self.metric_adjoint(arr[mu]) for mu in range(arr.shape[0])])
            else:
                out[j] = self.metric_adjoint(arr)
        return out

    def number_matrix(self):
        n = self.space.total_dim
        N = self.space.number_operator()
        return np.broadcast_to(N, self.grid.shape + (n, n)).copy()

    def dh(self):
        """Covariant derivative [nabla, h] as a 1-form coefficient stack."""
        if self.h is None:
            raise SchemaError("family has no h-structure")
        d = self.dim_base
        out = np.zeros_like(self.gamma)
        for mu in range(d):
            out[mu] = self.grid.derivative(self.h.h, axis=mu) \
                + self.gamma[mu] @ self.h.h - self.h.h @ self.gamma[mu]
        return out

    def h_eig(self):
        """Eigen data of h in the g frame: h = S diag(mu) S^{-1}, S g-unitary."""
        R = self.gram_factor()
        Rinv = np.linalg.inv(R)
        h_on = R @ self.h.h @ Rinv
        h_on = 0.5 * (h_on + h_on.conj().swapaxes(-1, -2))
        w, V = np.linalg.eigh(h_on)
        S = Rinv @ V
        return w.real, S, np.linalg.inv(S)

    # -- superforms -------------------------------------------------------

    def _gens(self, params=()):
        return make_generators(self.dim_base, tuple(p for p in PARAM_ORDER if p in params))

    def matrix_form(self, gens, arr, subset=()):
        return SuperForm.from_matrix(self.space, gens, self.grid, arr, subset)

    def one_form(self, gens, stack):
        """sum_mu dx^mu (x) stack[mu]."""
        out = SuperForm.zero(self.space, gens, self.grid)
        for mu in range(self.dim_base):
            out = out + self.matrix_form(gens, stack[mu], (f"dx{mu + 1}",))
        return out

    def connection_form(self, gens, potential=None):
        return self.one_form(gens, self.gamma if potential is None else potential)

    def superform(self, gens=None, unitarized=False):
        """alpha of A' (or of the unitarized connection plus higher terms)."""
        if gens is None:
            gens = self._gens()
        pot = self.gamma + 0.5 * self.omega() if unitarized else self.gamma
        alpha = self.one_form(gens, pot)
        for j, arr in self.a.items():
            if j == 0:
                alpha = alpha + self.matrix_form(gens, arr)
            elif j == 1:
                alpha = alpha + self.one_form(gens, arr)
            elif j == 2:
                alpha = alpha + self.matrix_form(gens, arr, ("dx1", "dx2"))
        return alpha

    def curvature(self, alpha):
        return alpha.d_base() + alpha.mul(alpha)

    def flatness_residual(self):
        alpha = self.superform()
        return self.curvature(alpha).norm()

    def adjoint_flatness_residual(self):
        adj = self.adjoint_family()
        return adj.flatness_residual()

    def adjoint_family(self):
        """The family (A'', g) of metric adjoints; flat when A' is."""
        return FlatFamily(
            space=self.space,
            grid=self.grid,
            gamma=self.adjoint_potential(),
            a=self.adjoint_terms(),
            g=self.g.copy(),
            h=self.h,
        )

    # -- structural validators -------------------------------------------

    def h_gap_residual(self):
        """Norm of higher-term blocks that fail to raise h by at least eps."""
        if self.h is None:
            raise SchemaError("family has no h-structure")
        w, S, Sinv = self.h_eig()
        eps = self.h.eps
        worst = 0.0
        adj = self.adjoint_terms()
        for terms, direction in ((self.a, +1), (adj, -1)):
            for j, arr in terms.items():
                stacks = arr if j == 1 else arr[None]
                for comp in stacks:
                    tilde = Sinv @ comp @ S
                    gap = direction * (w[..., :, None] - w[..., None, :])
                    bad = gap < eps - 1e-9
                    worst = max(worst, float(np.max(np.abs(tilde * bad))) if tilde.size else 0.0)
        return worst

    def nilpotency_check(self):
        """A' - nabla takes values in a nilpotent subalgebra: support digraph acyclic."""
        n = self.space.total_dim
        support = np.zeros((n, n), dtype=bool)
        for j, arr in self.a.items():
            stacks = arr if j == 1 else arr[None]
            for comp in stacks:
                mags = np.max(np.abs(comp), axis=tuple(range(comp.ndim - 2))) if comp.ndim > 2 else np.abs(comp)
                support |= mags > 1e-12 * (1 + mags.max())
        reach = support.copy()
        power = support.copy()
        for _ in range(n):
            power = power @ support
        return not power.any()

    def constant_frame(self):
        """The gauge-trivial counterpart (available for generated families)."""
        prov = self.provenance
        if "constants" not in prov:
            raise SchemaError("family has no recorded constant frame")
        n = self.space.total_dim
        a = {}
        for j, cj in prov["constants"].items():
            cj = np.asarray(cj, dtype=np.complex128)
            if j == 1:
                a[j] = np.broadcast_to(cj[:, None] if self.grid.dim == 0 else cj.reshape((cj.shape[0],) + (1,) * self.grid.dim + (n, n)), (cj.shape[0],) + self.grid.shape + (n, n)).copy()
            else:
                a[j] = np.broadcast_to(cj, self.grid.shape + (n, n)).copy()
        h = None
        if self.h is not None:
            h0 = np.asarray(prov["h0"], dtype=np.complex128)
            h = HStructure(np.broadcast_to(h0, self.grid.shape + (n, n)).copy(), self.h.eps)
        return FlatFamily(
            space=self.space,
            grid=self.grid,
            gamma=np.zeros_like(self.gamma),
            a=a,
            g=np.asarray(prov["g_hat"], dtype=np.complex128).copy(),
            h=h,
            provenance={k: v for k, v in prov.items() if k != "gauge_matrix"},
        )


# -- seeded construction ------------------------------------------------------


def _random_unitary_blockdiag(rng, space, order, grid, levels=None, rounds=1):
    """Grading-preserving unitary trig-polynomial gauge U(x).

    Product of constant block-diagonal unitaries and diagonal phase factors
    exp(i(k.x + phi)); entries stay trigonometric polynomials of order at most
    rounds * order with unitary pointwise values.  levels, when given,
    restricts mixing to basis vectors with equal level so filtrations and
    h-structures are preserved.
    """
    n = space.total_dim
    d = grid.dim
    U = np.broadcast_to(np.eye(n, dtype=np.complex128), grid.shape + (n, n)).copy()
    xs = grid.coords()
    deg = space.degree_vector()
    if levels is None:
        levels = np.zeros(n)
    keys = [(deg[i], levels[i]) for i in range(n)]

    def const_mix():
        Q = np.eye(n, dtype=np.complex128)
        for key in sorted(set(keys)):
            idx = [i for i in range(n) if keys[i] == key]
            if len(idx) > 1:
                M = rng.normal(size=(len(idx), len(idx))) + 1j * rng.normal(size=(len(idx), len(idx)))
                q, _ = np.linalg.qr(M)
                for r, i in enumerate(idx):
                    for c, j in enumerate(idx):
                        Q[i, j] = q[r, c]
        return Q

    U = U @ const_mix()
    for _ in range(rounds if d else 0):
        phase = np.zeros(grid.shape + (n,), dtype=np.complex128)
        for i in range(n):
            k = rng.integers(-order, order + 1, size=d)
            phi = rng.uniform(0, 2 * np.pi)
            acc = np.full(grid.shape, phi)
            for mu in range(d):
                acc = acc + k[mu] * xs[mu]
            phase[..., i] = np.exp(1j * acc)
        U = U * phase[..., None, :]
        U = U @ const_mix()
    return U


def _gauge_potential(grid, U):
    """Gamma = U^{-1} dU, exact on the band-limited representation."""
    d = grid.dim
    n = U.shape[-1]
    Uinv = U.conj().swapaxes(-1, -2)
    out = np.zeros((d,) + U.shape, dtype=np.complex128)
    for mu in range(d):
        out[mu] = Uinv @ grid.derivative(U, axis=mu)
    return out


def _constant_complex(rng, space, betti, h_levels):
    """Constant blocks c0 with prescribed Betti numbers, raising h strictly."""
    dims = space.dims
    n_deg = len(dims)
    ranks = []
    prev = 0
    for i, (nj, bj) in enumerate(zip(dims, betti)):
        r = nj - bj - prev
        if r < 0 or (i + 1 < n_deg and r > dims[i + 1]) or (i + 1 == n_deg and r > 0):
            raise SchemaError(f"Betti numbers {betti} infeasible for dims {dims}")
        ranks.append(r)
        prev = r
    n = space.total_dim
    c0 = np.zeros((n, n), dtype=np.complex128)
    for i in range(n_deg - 1):
        j = space.j_min + i
        r = ranks[i]
        if r == 0:
            continue
        rows, cols = dims[i + 1], dims[i]
        # reserve the first (dims - rank) coordinates of each degree for the
        # kernel; images land there, sources are drawn from the rest, so the
        # chain condition holds by block bookkeeping
        ker_self = cols - r
        ker_next = rows - (ranks[i + 1] if i + 1 < n_deg else 0)
        B = np.zeros((rows, cols), dtype=np.complex128)
        src = ker_self + rng.permutation(r)
        tgt = rng.permutation(ker_next)[:r]
        vals = rng.uniform(0.5, 1.5, size=r) * np.exp(1j * rng.uniform(0, 2 * np.pi, size=r))
        for s, t, v in zip(src, tgt, vals):
            B[t, s] = v
        c0[space.block(j + 1), space.block(j)] = B
    # h must strictly increase along c0; with h_levels = degree this holds
    return c0


def _solve_commuting_a1(rng, space, c0, levels, gap):
    """Random c1 with [c0, c1] = 0 supported on strictly level-raising entries."""
    n = space.total_dim
    deg = space.degree_vector()
    allowed = []
    for i in range(n):
        for j in range(n):
            if deg[i] == deg[j] and levels[i] >= levels[j] + gap - 1e-12:
                allowed.append((i, j))
    if not allowed:
        return None
    cols = []
    for (i, j) in allowed:
        E = np.zeros((n, n), dtype=np.complex128)
        E[i, j] = 1.0
        cols.append((c0 @ E - E @ c0).ravel())
    M = np.array(cols).T
    _, s, vh = np.linalg.svd(M, full_matrices=True)
    null_mask = np.concatenate([s, np.zeros(M.shape[1] - len(s))]) < 1e-10
    basis = vh.conj().T[:, null_mask]
    if basis.shape[1] == 0:
        return None
    coef = rng.normal(size=basis.shape[1]) + 1j * rng.normal(size=basis.shape[1])
    weights = basis @ coef
    c1 = np.zeros((n, n), dtype=np.complex128)
    for w, (i, j) in zip(weights, allowed):
        c1[i, j] = w
    nrm = np.max(np.abs(c1))
    return c1 / nrm if nrm > 0 else None


def make_gauge_family(seed, dims, base=0, grid_size=None, j_min=0, betti=None,
                      fourier_order=1, with_a1=False, parallel_metric=False,
                      metric_spread=0.6, gauge_rounds=1, h_split=None,
                      filtration_levels=None) -> FlatFamily:
    """Seeded flat family: gauge transform of constant data, flat by construction.

    The metric is a unitary-conjugated constant diagonal, g = (WU)^H D (WU),
    so g, g^{-1} and every adjoint stay trigonometric polynomials of bounded
    order and all flatness identities are exact on the grid.  Identical
    seeds give bit-identical output.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    space = GradedSpace(j_min, tuple(dims))
    n = space.total_dim
    if grid_size is None:
        grid_size = 32 if base == 1 else 12
    if base == 0:
        grid = POINT
    else:
        sizes = (grid_size,) * base if np.isscalar(grid_size) else tuple(grid_size)
        grid = TorusGrid(sizes)
    if betti is None:
        betti = _acyclic_betti(space)

    deg = space.degree_vector()
    if h_split is None and not with_a1:
        h_levels = deg.astype(float)
        eps = 1.0
    else:
        # split each degree into two h-levels so degree-preserving a1 terms
        # can still raise h strictly
        h_levels = deg.astype(float).copy()
        for j in space.degrees:
            o = space.offset(j)
            size = space.dim(j)
            for r in range(size // 2, size):
                h_levels[o + r] += 0.5
        eps = 0.5

    if with_a1 and base < 1:
        raise SchemaError("a1 terms need a base of dimension at least 1")
    bad = (h_levels[:, None] - h_levels[None, :]) < eps - 1e-12
    c1 = None
    for attempt in range(32):
        c0 = _constant_complex(rng, space, betti, h_levels)
        # enforce strict h-raising of c0 (degree +1 alone may not suffice
        # with split levels: zero entries that fail)
        c0 = np.where(bad, 0.0, c0)
        if betti_numbers(space, c0) != tuple(betti):
            continue
        if not with_a1:
            break
        c1 = _solve_commuting_a1(rng, space, c0, h_levels, eps)
        if c1 is not None:
            break
    else:
        raise SchemaError("could not realize Betti numbers (and a1 commutant) for these dims")

    constants = {0: c0}
    if with_a1:
        constants[1] = np.stack([c1] + [np.zeros_like(c1)] * (base - 1))

    if filtration_levels is None:
        levels_for_gauge = h_levels
    else:
        # combine so gauge and metric factors preserve both structures
        levels_for_gauge = np.asarray(
            [10.0 * filtration_levels[i] + h_levels[i] for i in range(n)])
    U = _random_unitary_blockdiag(rng, space, fourier_order, grid,
                                  levels=levels_for_gauge, rounds=gauge_rounds)
    gamma = _gauge_potential(grid, U)

    # constant-frame metric: unitary conjugate of a constant diagonal, so the
    # inverse is band-limited too
    scales = np.exp(rng.uniform(-metric_spread, metric_spread, size=n))
    D = np.diag(scales).astype(np.complex128)
    if parallel_metric:
        ghat = np.broadcast_to(D, grid.shape + (n, n)).copy()
    else:
        W = _random_unitary_blockdiag(rng, space, fourier_order, grid,
                                      levels=levels_for_gauge, rounds=gauge_rounds)
        ghat = W.conj().swapaxes(-1, -2) @ np.broadcast_to(D, grid.shape + (n, n)) @ W

    Uinv = U.conj().swapaxes(-1, -2)
    a = {}
    for j, cj in constants.items():
        if j == 1:
            a[j] = np.stack([Uinv @ np.broadcast_to(cj[mu], grid.shape + (n, n)) @ U
                             for mu in range(cj.shape[0])])
        else:
            a[j] = Uinv @ np.broadcast_to(cj, grid.shape + (n, n)) @ U
    g = U.conj().swapaxes(-1, -2) @ ghat @ U
    h0 = np.diag(h_levels.astype(np.complex128))
    h = HStructure(Uinv @ np.broadcast_to(h0, grid.shape + (n, n)) @ U, eps)

    fam = FlatFamily(
        space=space,
        grid=grid,
        gamma=gamma,
        a=a,
        g=g,
        h=h,
        provenance={
            "seed": int(seed),
            "constants": constants,
            "g_hat": ghat,
            "h0": h0,
            "h_eps": eps,
            "gauge_matrix": U,
            "h_levels": h_levels,
            "betti": tuple(betti),
        },
    )
    resid = fam.flatness_residual()
    if resid > 1e-9 * (1 + max(np.max(np.abs(v)) for v in [c0])):
        raise ContractError("generated family not flat", f"residual {resid:.2e}")
    return fam


def _acyclic_betti(space):
    dims = space.dims
    betti = [0] * len(dims)
    # acyclicity requires the alternating sum to vanish; otherwise put the
    # forced cohomology in the first degree
    chi = sum((-1) ** i * d for i, d in enumerate(dims))
    if chi != 0:
        raise SchemaError(f"dims {dims} admit no acyclic complex (chi = {chi})")
    # feasibility check happens in _constant_complex
    return tuple(betti)


def make_nonparallel_h_family(seed, dims, base=1, grid_size=16, delta=0.2) -> FlatFamily:
    """Trivial-gauge family whose h has x-dependent eigenvalues (dh != 0)."""
    fam = make_gauge_family(seed, dims, base=base, grid_size=grid_size,
                            fourier_order=0, parallel_metric=False)
    # strip the gauge: provenance constants with U = I
    const = fam.constant_frame()
    x = const.grid.coords()[0]
    n = const.space.total_dim
    levels = const.provenance["h_levels"]
    wig = delta * np.sin(x)
    hdiag = np.zeros(const.grid.shape + (n, n), dtype=np.complex128)
    for i in range(n):
        hdiag[..., i, i] = levels[i] * (1.0 + 0.0j) + wig * (0.5 if levels[i] else 0.25)
    eps_eff = const.h.eps - 2 * delta * 0.5
    if eps_eff <= 0:
        raise SchemaError("delta too large for the level gap")
    const.h = HStructure(hdiag, eps_eff)
    return const


# -- adjoint operation (spec surface) ---------------------------------------


def adjoint_family(fam: FlatFamily):
    """(A'', omega): the adjoint superconnection family and omega = nabla* - nabla."""
    return fam.adjoint_family(), fam.omega()


# -- parametric superconnections ---------------------------------------------


class ParamConnection:
    """alpha-part of a superconnection with closed-form parameter dependence.

    curvature(params) = d_base alpha + sum_p dp ^ (d alpha / dp) + alpha^2,
    with the partials supplied exactly by the builder.
    """

    def __init__(self, space, gens, grid, alpha_fn, partial_fns):
        self.space = space
        self.gens = gens
        self.grid = grid
        self._alpha = alpha_fn
        self._partials = partial_fns

    def alpha(self, **params) -> SuperForm:
        return self._alpha(**params)

    def curvature(self, **params) -> SuperForm:
        a = self._alpha(**params)
        F = a.d_base() + a.mul(a)
        for name, fn in self._partials.items():
            F = F + fn(**params).wedge_left(name)
        return F


class _AslPieces:
    """Precomputed x-dependent ingredients shared by the asl builders."""

    def __init__(self, fam: FlatFamily):
        if fam.h is None:
            raise SchemaError("asl superconnections need an h-structure")
        self.fam = fam
        self.space = fam.space
        self.grid = fam.grid
        self.N = fam.number_matrix()
        self.h = fam.h.h
        self.eps = fam.h.eps
        self.omega_stack = fam.omega()
        self.dh_stack = fam.dh()
        self.a = fam.a
        self.a_adj = fam.adjoint_terms()
        self.gamma = fam.gamma
        self.gamma_star = fam.adjoint_potential()
        self.hw, self.S, self.Sinv = fam.h_eig()
        self._stack_cache = {}

    def conj_T(self, arr, T, sign=+1):
        """T^{sign h/2} arr T^{-sign h/2} done in the h eigenframe."""
        W = np.power(float(T), 0.5 * sign * (self.hw[..., :, None] - self.hw[..., None, :]))
        return self.S @ (W * (self.Sinv @ arr @ self.S)) @ self.Sinv

    def conj_T_dT(self, arr, T, sign=+1):
        """d/dT of conj_T."""
        diff = 0.5 * sign * (self.hw[..., :, None] - self.hw[..., None, :])
        W = np.power(float(T), diff) * diff / float(T)
        return self.S @ (W * (self.Sinv @ arr @ self.S)) @ self.Sinv

    def term_stacks(self, T, dT=False):
        """{j: (C_T(a'_j), C_T^-(a''_j))} or their T-derivatives (memoized)."""
        key = (float(T), bool(dT))
        hit = self._stack_cache.get(key)
        if hit is not None:
            return hit
        out = {}
        fn = self.conj_T_dT if dT else self.conj_T
        for j in self.a:
            if j == 1:
                prim = np.stack([fn(self.a[j][mu], T, +1) for mu in range(self.a[j].shape[0])])
                dual = np.stack([fn(self.a_adj[j][mu], T, -1) for mu in range(self.a[j].shape[0])])
            else:
                prim = fn(self.a[j], T, +1)
                dual = fn(self.a_adj[j], T, -1)
            out[j] = (prim, dual)
        if len(self._stack_cache) > 64:
            self._stack_cache.clear()
        self._stack_cache[key] = out
        return out

    # assembly helpers on a chosen generator set
    def mform(self, gens, arr, subset=()):
        return SuperForm.from_matrix(self.space, gens, self.grid, arr, subset)

    def oform(self, gens, stack):
        out = SuperForm.zero(self.space, gens, self.grid)
        for mu in range(self.grid.dim):
            out = out + self.mform(gens, stack[mu], (f"dx{mu + 1}",))
        return out

    def jform(self, gens, j, arr):
        if j == 0:
            return self.mform(gens, arr)
        if j == 1:
            return self.oform(gens, arr)
        if j == 2:
            return self.mform(gens, arr, ("dx1", "dx2"))
        raise SchemaError("higher terms beyond the base dimension")

    def x_block(self, gens, T, include_dT, v_weight=1.0):
        """omega/2 + v (log T/2) dh + v (h/2T) dT  (the X0 combination)."""
        out = 0.5 * self.oform(gens, self.omega_stack)
        if self.grid.dim:
            out = out + (v_weight * np.log(T) / 2.0) * self.oform(gens, self.dh_stack)
        if include_dT:
            out = out + (v_weight / (2.0 * T)) * self.mform(gens, self.h, ("dT",))
        return out


def build_asl1(fam: FlatFamily, directions=("ds", "dt", "dT")) -> ParamConnection:
    """The interpolation superconnection in generators {base, ds, dt, dT}."""
    P = _AslPieces(fam)
    gens = fam._gens(directions)
    has = {name: name in directions for name in PARAM_ORDER}
    unit = P.gamma + 0.5 * P.omega_stack if fam.dim_base else P.gamma

    def alpha(s, t, T):
        stacks = P.term_stacks(T)
        out = P.oform(gens, unit)
        for j, (prim, dual) in stacks.items():
            w = (t / 4.0) ** ((1 - j) / 2.0)
            out = out + w * ((1 - s) ** j) * P.jform(gens, j, prim) \
                      + w * (s ** j) * P.jform(gens, j, dual)
        out = out + (2 * s - 1) * P.x_block(gens, T, include_dT=has["dT"])
        if has["dt"]:
            out = out + ((2 * s - 1) / (2 * t)) * P.mform(gens, P.N, ("dt",))
        if has["ds"]:
            out = out + (-2.0) * P.mform(gens, P.N, ("ds",))
        return out

    def d_s(s, t, T):
        stacks = P.term_stacks(T)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            w = (t / 4.0) ** ((1 - j) / 2.0)
            if j >= 1:
                out = out + w * (-j * (1 - s) ** (j - 1)) * P.jform(gens, j, prim) \
                          + w * (j * s ** (j - 1)) * P.jform(gens, j, dual)
        out = out + 2.0 * P.x_block(gens, T, include_dT=has["dT"])
        if has["dt"]:
            out = out + (1.0 / t) * P.mform(gens, P.N, ("dt",))
        return out

    def d_t(s, t, T):
        stacks = P.term_stacks(T)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            w = ((1 - j) / 2.0) * (t / 4.0) ** ((1 - j) / 2.0) / t
            out = out + w * ((1 - s) ** j) * P.jform(gens, j, prim) \
                      + w * (s ** j) * P.jform(gens, j, dual)
        if has["dt"]:
            out = out + (-(2 * s - 1) / (2 * t * t)) * P.mform(gens, P.N, ("dt",))
        return out

    def d_T(s, t, T):
        stacks = P.term_stacks(T, dT=True)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            w = (t / 4.0) ** ((1 - j) / 2.0)
            out = out + w * ((1 - s) ** j) * P.jform(gens, j, prim) \
                      + w * (s ** j) * P.jform(gens, j, dual)
        if fam.dim_base:
            out = out + ((2 * s - 1) / (2 * T)) * P.oform(gens, P.dh_stack)
        if has["dT"]:
            out = out + (-(2 * s - 1) / (2 * T * T)) * P.mform(gens, P.h, ("dT",))
        return out

    partials = {}
    if has["ds"]:
        partials["ds"] = d_s
    if has["dt"]:
        partials["dt"] = d_t
    if has["dT"]:
        partials["dT"] = d_T
    return ParamConnection(fam.space, gens, fam.grid, alpha, partials)


def build_asl1_pair(fam: FlatFamily, directions=("ds", "dt", "dT")):
    """The two flat superconnections whose interpolation is build_asl1."""
    P = _AslPieces(fam)
    gens = fam._gens(directions)
    has = {name: name in directions for name in PARAM_ORDER}

    def make(side):
        pot = P.gamma if side == "prime" else P.gamma_star
        sgn = -1.0 if side == "prime" else +1.0

        def alpha(s, t, T):
            stacks = P.term_stacks(T)
            out = P.oform(gens, pot)
            for j, (prim, dual) in stacks.items():
                if side == "prime":
                    w = (t / (4.0 * (1 - s) ** 2)) ** ((1 - j) / 2.0)
                    out = out + w * P.jform(gens, j, prim)
                else:
                    w = (t / (4.0 * s ** 2)) ** ((1 - j) / 2.0)
                    out = out + w * P.jform(gens, j, dual)
            if fam.dim_base:
                out = out + (sgn * np.log(T) / 2.0) * P.oform(gens, P.dh_stack)
            if has["ds"]:
                denom = (1 - s) if side == "prime" else s
                out = out + (-1.0 / denom) * P.mform(gens, P.N, ("ds",))
            if has["dt"]:
                out = out + (sgn / (2 * t)) * P.mform(gens, P.N, ("dt",))
            if has["dT"]:
                out = out + (sgn / (2 * T)) * P.mform(gens, P.h, ("dT",))
            return out

        def d_s(s, t, T):
            stacks = P.term_stacks(T)
            out = SuperForm.zero(fam.space, gens, fam.grid)
            for j, (prim, dual) in stacks.items():
                if side == "prime":
                    w = (1 - j) * (t / (4.0 * (1 - s) ** 2)) ** ((1 - j) / 2.0) / (1 - s)
                    out = out + w * P.jform(gens, j, prim)
                else:
                    w = -(1 - j) * (t / (4.0 * s ** 2)) ** ((1 - j) / 2.0) / s
                    out = out + w * P.jform(gens, j, dual)
            if has["ds"]:
                denom = (1 - s) ** 2 if side == "prime" else -s ** 2
                out = out + (-1.0 / denom) * P.mform(gens, P.N, ("ds",))
            return out

        def d_t(s, t, T):
            stacks = P.term_stacks(T)
            out = SuperForm.zero(fam.space, gens, fam.grid)
            for j, (prim, dual) in stacks.items():
                if side == "prime":
                    w = ((1 - j) / (2 * t)) * (t / (4.0 * (1 - s) ** 2)) ** ((1 - j) / 2.0)
                    out = out + w * P.jform(gens, j, prim)
                else:
                    w = ((1 - j) / (2 * t)) * (t / (4.0 * s ** 2)) ** ((1 - j) / 2.0)
                    out = out + w * P.jform(gens, j, dual)
            if has["dt"]:
                out = out + (-sgn / (2 * t * t)) * P.mform(gens, P.N, ("dt",))
            return out

        def d_T(s, t, T):
            stacks = P.term_stacks(T, dT=True)
            out = SuperForm.zero(fam.space, gens, fam.grid)
            for j, (prim, dual) in stacks.items():
                if side == "prime":
                    w = (t / (4.0 * (1 - s) ** 2)) ** ((1 - j) / 2.0)
                    out = out + w * P.jform(gens, j, prim)
                else:
                    w = (t / (4.0 * s ** 2)) ** ((1 - j) / 2.0)
                    out = out + w * P.jform(gens, j, dual)
            if fam.dim_base:
                out = out + (sgn / (2 * T)) * P.oform(gens, P.dh_stack)
            if has["dT"]:
                out = out + (-sgn / (2 * T * T)) * P.mform(gens, P.h, ("dT",))
            return out

        partials = {}
        if has["ds"]:
            partials["ds"] = d_s
        if has["dt"]:
            partials["dt"] = d_t
        if has["dT"]:
            partials["dT"] = d_T
        return ParamConnection(fam.space, gens, fam.grid, alpha, partials)

    return make("prime"), make("second")


def build_asl2(fam: FlatFamily, directions=("ds", "dT", "du")) -> ParamConnection:
    """The h-elimination step one superconnection in {base, ds, dT, du}."""
    P = _AslPieces(fam)
    gens = fam._gens(directions)
    has = {name: name in directions for name in PARAM_ORDER}
    unit = P.gamma + 0.5 * P.omega_stack if fam.dim_base else P.gamma

    def weights(s, u, j):
        return ((1 - s) ** j * u + (1 - s) * (1 - u)), (s ** j * u + s * (1 - u))

    def alpha(s, T, u):
        stacks = P.term_stacks(T)
        out = P.oform(gens, unit)
        for j, (prim, dual) in stacks.items():
            wp, wd = weights(s, u, j)
            out = out + (2.0 ** (j - 1)) * (wp * P.jform(gens, j, prim) + wd * P.jform(gens, j, dual))
        out = out + (2 * s - 1) * P.x_block(gens, T, include_dT=has["dT"])
        if has["ds"]:
            out = out + (-2.0 * u) * P.mform(gens, P.N, ("ds",))
        return out

    def d_s(s, T, u):
        stacks = P.term_stacks(T)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            dwp = (0.0 if j == 0 else -j * (1 - s) ** (j - 1) * u) - (1 - u)
            dwd = (0.0 if j == 0 else j * s ** (j - 1) * u) + (1 - u)
            out = out + (2.0 ** (j - 1)) * (dwp * P.jform(gens, j, prim) + dwd * P.jform(gens, j, dual))
        out = out + 2.0 * P.x_block(gens, T, include_dT=has["dT"])
        return out

    def d_T(s, T, u):
        stacks = P.term_stacks(T, dT=True)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            wp, wd = weights(s, u, j)
            out = out + (2.0 ** (j - 1)) * (wp * P.jform(gens, j, prim) + wd * P.jform(gens, j, dual))
        if fam.dim_base:
            out = out + ((2 * s - 1) / (2 * T)) * P.oform(gens, P.dh_stack)
        if has["dT"]:
            out = out + (-(2 * s - 1) / (2 * T * T)) * P.mform(gens, P.h, ("dT",))
        return out

    def d_u(s, T, u):
        stacks = P.term_stacks(T)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            dwp = (1 - s) ** j - (1 - s)
            dwd = s ** j - s
            out = out + (2.0 ** (j - 1)) * (dwp * P.jform(gens, j, prim) + dwd * P.jform(gens, j, dual))
        if has["ds"]:
            out = out + (-2.0) * P.mform(gens, P.N, ("ds",))
        return out

    partials = {}
    if has["ds"]:
        partials["ds"] = d_s
    if has["dT"]:
        partials["dT"] = d_T
    if has["du"]:
        partials["du"] = d_u
    return ParamConnection(fam.space, gens, fam.grid, alpha, partials)


def build_asl3(fam: FlatFamily, directions=("ds", "dT", "dv")) -> ParamConnection:
    """The h-free endpoint superconnection in {base, ds, dT, dv}."""
    P = _AslPieces(fam)
    gens = fam._gens(directions)
    has = {name: name in directions for name in PARAM_ORDER}
    unit = P.gamma + 0.5 * P.omega_stack if fam.dim_base else P.gamma

    def alpha(s, T, v):
        stacks = P.term_stacks(T)
        out = P.oform(gens, unit)
        for j, (prim, dual) in stacks.items():
            out = out + (v * 2.0 ** (j - 1)) * ((1 - s) * P.jform(gens, j, prim) + s * P.jform(gens, j, dual))
        out = out + (2 * s - 1) * P.x_block(gens, T, include_dT=has["dT"], v_weight=v)
        return out

    def d_s(s, T, v):
        stacks = P.term_stacks(T)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            out = out + (v * 2.0 ** (j - 1)) * (-1.0 * P.jform(gens, j, prim) + P.jform(gens, j, dual))
        out = out + 2.0 * P.x_block(gens, T, include_dT=has["dT"], v_weight=v)
        return out

    def d_T(s, T, v):
        stacks = P.term_stacks(T, dT=True)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            out = out + (v * 2.0 ** (j - 1)) * ((1 - s) * P.jform(gens, j, prim) + s * P.jform(gens, j, dual))
        if fam.dim_base:
            out = out + ((2 * s - 1) * v / (2 * T)) * P.oform(gens, P.dh_stack)
        if has["dT"]:
            out = out + (-(2 * s - 1) * v / (2 * T * T)) * P.mform(gens, P.h, ("dT",))
        return out

    def d_v(s, T, v):
        stacks = P.term_stacks(T)
        out = SuperForm.zero(fam.space, gens, fam.grid)
        for j, (prim, dual) in stacks.items():
            out = out + (2.0 ** (j - 1)) * ((1 - s) * P.jform(gens, j, prim) + s * P.jform(gens, j, dual))
        if fam.dim_base:
            out = out + ((2 * s - 1) * np.log(T) / 2.0) * P.oform(gens, P.dh_stack)
        if has["dT"]:
            out = out + ((2 * s - 1) / (2 * T)) * P.mform(gens, P.h, ("dT",))
        return out

    partials = {}
    if has["ds"]:
        partials["ds"] = d_s
    if has["dT"]:
        partials["dT"] = d_T
    if has["dv"]:
        partials["dv"] = d_v
    return ParamConnection(fam.space, gens, fam.grid, alpha, partials)


# -- odd character and transgression -----------------------------------------


def omega_superform(fam: FlatFamily, gens=None):
    if gens is None:
        gens = fam._gens()
    return fam.one_form(gens, fam.omega())


def cho(fam: FlatFamily, theta_nodes=32) -> ScalarForm:
    """Closed odd character form of (nabla, g).

    Normalized average over the interpolation parameter of the odd weight
    applied to omega; the endpoint singularity is removed exactly by the
    s = sin^2(theta) substitution.
    """
    gens = fam._gens()
    om = omega_superform(fam, gens)
    thetas, weights = gauss_nodes(theta_nodes, 0.0, np.pi / 2)
    total = ScalarForm(gens, fam.grid)
    for theta, w in zip(thetas, weights):
        a = float(np.sin(theta) * np.cos(theta))
        total = total + w * f_odd(a * om).supertrace()
    return normalize_chern(total, shift=1)


def metric_log(fam: FlatFamily, g1):
    """Principal logarithm of g0^{-1} g1 through the g0-orthonormal frame."""
    R = fam.gram_factor()
    Rinv = np.linalg.inv(R)
    B = Rinv.conj().swapaxes(-1, -2) @ g1 @ Rinv
    B = 0.5 * (B + B.conj().swapaxes(-1, -2))
    w, V = np.linalg.eigh(B)
    if np.min(w) <= 0:
        raise SchemaError("metric path endpoint not positive")
    logB = (V * np.log(w)[..., None, :]) @ V.conj().swapaxes(-1, -2)
    return Rinv @ logB @ R


def chslo(fam: FlatFamily, g1, theta_nodes=32, u_nodes=16) -> ScalarForm:
    """Transgression form between g0 = fam.g and g1 along g_u = g0 (g0^{-1}g1)^u.

    d chslo = cho(nabla, g1) - cho(nabla, g0) and the parallel rescaling
    g1 = r^{N} g0 gives (log r / 2) str(N) in degree zero.
    """
    gens = fam._gens()
    m = metric_log(fam, np.asarray(g1, dtype=np.complex128))
    us, wu = gauss_nodes(u_nodes, 0.0, 1.0)
    thetas, wt = gauss_nodes(theta_nodes, 0.0, np.pi / 2)
    total = ScalarForm(gens, fam.grid)
    mform = SuperForm.from_matrix(fam.space, gens, fam.grid, 0.5 * m)
    for u, wu_i in zip(us, wu):
        gu = fam.g @ _expm_stack(u * m)
        fam_u = FlatFamily(fam.space, fam.grid, fam.gamma, {}, gu)
        om_u = omega_superform(fam_u, gens)
        inner = ScalarForm(gens, fam.grid)
        for theta, wt_i in zip(thetas, wt):
            a = float(2.0 * np.sin(theta) * np.cos(theta))  # sqrt(4 s (1-s))
            kern = 2.0 * np.sin(theta) * np.cos(theta)      # ds = sin(2 theta) d theta
            val = mform.mul(f_prime_even(0.5 * a * om_u)).supertrace()
            inner = inner + (wt_i * kern) * val
        total = total + wu_i * inner
    return normalize_chern(total, shift=0)


# -- harmonic family ----------------------------------------------------------


@dataclass
class HarmonicFamily:
    """Fibrewise cohomology as a flat bundle in a global flat frame."""

    space: GradedSpace           # dims = Betti numbers
    grid: TorusGrid
    frame: np.ndarray            # (*grid, n, bH): harmonic representatives
    metric: np.ndarray           # (*grid, bH, bH): induced metric g^H_V

    def as_family(self):
        bH = self.space.total_dim
        return FlatFamily(
            space=self.space,
            grid=self.grid,
            gamma=np.zeros((self.grid.dim,) + self.grid.shape + (bH, bH), dtype=np.complex128),
            a={},
            g=self.metric,
        )


def harmonic_family(fam: FlatFamily, cutoff=1e-9) -> HarmonicFamily:
    """Harmonic model of H with the metric induced by the g-harmonic embedding.

    Requires the recorded constant frame: flat sections of H are gauge
    transports of constant-representative classes, so the induced connection
    vanishes identically in this frame.
    """
    prov = fam.provenance
    if "constants" not in prov or "gauge_matrix" not in prov:
        raise SchemaError("harmonic family needs a generated (gauge) family")
    c0 = np.asarray(prov["constants"][0], dtype=np.complex128)
    U = np.asarray(prov["gauge_matrix"], dtype=np.complex128)
    space = fam.space
    n = space.total_dim

    # constant representatives: standard harmonics of c0, degree by degree
    lap = c0.conj().T @ c0 + c0 @ c0.conj().T
    scale = max(float(np.abs(lap).max(initial=0.0)), 1.0)
    betti = []
    reps = []
    for j in space.degrees:
        blk = space.block(j)
        sub = lap[blk, blk]
        if space.dim(j) == 0:
            betti.append(0)
            continue
        w, V = np.linalg.eigh(sub)
        keep = w <= cutoff * scale
        betti.append(int(keep.sum()))
        for i in np.nonzero(keep)[0]:
            v = np.zeros(n, dtype=np.complex128)
            v[blk] = V[:, i]
            reps.append(v)
    bH = len(reps)

    if bH == 0:
        h_space = _empty_like(space)
        frame = np.zeros(fam.grid.shape + (n, 0), dtype=np.complex128)
        metric = np.zeros(fam.grid.shape + (0, 0), dtype=np.complex128)
        return HarmonicFamily(h_space, fam.grid, frame, metric)

    rep_mat = np.stack(reps, axis=1)              # (n, bH)
    Uinv = U.conj().swapaxes(-1, -2)
    flat_frame = Uinv @ rep_mat                    # flat sections spanning classes

    # pointwise harmonic projector with respect to (a0(x), g(x))
    a0 = fam.a.get(0)
    if a0 is None:
        a0 = np.zeros(fam.grid.shape + (n, n), dtype=np.complex128)
    a_adj = fam.metric_adjoint(a0)
    lapx = a_adj @ a0 + a0 @ a_adj
    # kernel projector via eigendecomposition in the g frame
    R = fam.gram_factor()
    Rinv = np.linalg.inv(R)
    lap_on = R @ lapx @ Rinv
    lap_on = 0.5 * (lap_on + lap_on.conj().swapaxes(-1, -2))
    w, V = np.linalg.eigh(lap_on)
    scale = np.maximum(w.max(axis=-1, keepdims=True), 1.0)
    keep = w <= cutoff * scale
    if not np.all(keep.sum(axis=-1) == bH):
        raise ContractError("harmonic rank varies over the base")
    Vk = np.where(keep[..., None, :], V, 0.0)
    proj_on = Vk @ Vk.conj().swapaxes(-1, -2)
    proj = Rinv @ proj_on @ R

    harm_frame = proj @ flat_frame
    metric = harm_frame.conj().swapaxes(-1, -2) @ fam.g @ harm_frame
    return HarmonicFamily(GradedSpace(space.j_min, tuple(betti)), fam.grid, harm_frame, metric)
