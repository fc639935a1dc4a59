"""Graded linear algebra: complexes, metrics, adjoints, Laplacians, harmonics.

A graded space is a finite direct sum V = (+)_j V^j over an explicit integer
degree window.  All maps are dense complex blocks; metrics are positive
Hermitian forms per degree, represented as block-diagonal matrices on the
total space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np


class SchemaError(ValueError):
    """Malformed instance data (bad shapes, missing fields, unknown keys)."""


class ContractError(RuntimeError):
    """A numerical invariant failed beyond its stated tolerance."""

    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        super().__init__(f"{invariant}: {detail}" if detail else invariant)


@dataclass(frozen=True)
class GradedSpace:
    """Dimension table of a Z-graded space over [j_min, j_max]."""

    j_min: int
    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if any(d < 0 for d in dims):
            raise SchemaError("negative dimension")
        if sum(dims) <= 0:
            raise SchemaError("total dimension must be positive")
        object.__setattr__(self, "dims", dims)

    @property
    def j_max(self):
        return self.j_min + len(self.dims) - 1

    @property
    def degrees(self):
        return range(self.j_min, self.j_max + 1)

    @property
    def total_dim(self):
        return sum(self.dims)

    def dim(self, j):
        if self.j_min <= j <= self.j_max:
            return self.dims[j - self.j_min]
        return 0

    def offset(self, j):
        """Start index of the degree-j block in the total space."""
        return sum(self.dims[: j - self.j_min])

    def block(self, j):
        o = self.offset(j)
        return slice(o, o + self.dim(j))

    def degree_vector(self):
        """Degree of each total-space basis vector."""
        out = np.empty(self.total_dim, dtype=np.int64)
        for j in self.degrees:
            out[self.block(j)] = j
        return out

    def sign_vector(self):
        """(-1)^degree per basis vector."""
        return np.where(self.degree_vector() % 2 == 0, 1.0, -1.0)

    def number_operator(self):
        """N acting by j on V^j, as a dense matrix."""
        return np.diag(self.degree_vector().astype(np.complex128))

    def euler_chars(self):
        chi = sum((-1) ** j * self.dim(j) for j in self.degrees)
        chi_prime = sum((-1) ** j * j * self.dim(j) for j in self.degrees)
        return chi, chi_prime


def euler_chars(space: GradedSpace):
    """(chi, chi') = (sum (-1)^j dim V^j, sum (-1)^j j dim V^j)."""
    return space.euler_chars()


def supertrace(space: GradedSpace, mat):
    """str(X) = tr((-1)^N X) for a matrix on the total space."""
    s = space.sign_vector()
    return np.einsum("i,...ii->...", s, np.asarray(mat, dtype=np.complex128))


def blocks_to_matrix(space: GradedSpace, blocks):
    """Assemble degree-(+1) blocks a0^j : V^j -> V^{j+1} into a total matrix."""
    n = space.total_dim
    a = np.zeros((n, n), dtype=np.complex128)
    for j, blk in blocks.items():
        blk = np.asarray(blk, dtype=np.complex128)
        if blk.size == 0:
            continue
        rows, cols = space.dim(j + 1), space.dim(j)
        if blk.shape != (rows, cols):
            raise SchemaError(
                f"block a0^{j} has shape {blk.shape}, expected {(rows, cols)}"
            )
        a[space.block(j + 1), space.block(j)] = blk
    return a


def matrix_degree_component(space: GradedSpace, mat, k):
    """Restrict a total-space matrix to its degree-k part (V^j -> V^{j+k})."""
    out = np.zeros_like(mat)
    for j in space.degrees:
        if space.dim(j) and space.dim(j + k):
            out[space.block(j + k), space.block(j)] = mat[space.block(j + k), space.block(j)]
    return out


def check_complex(space: GradedSpace, blocks) -> float:
    """Max Frobenius norm of consecutive compositions a0^{j+1} a0^j.

    Zero (to rounding) certifies a valid complex.  Shapes are validated by
    blocks_to_matrix.
    """
    a = blocks_to_matrix(space, blocks)
    resid = 0.0
    for j in space.degrees:
        if space.dim(j) and space.dim(j + 2):
            comp = a[space.block(j + 2), space.block(j + 1)] @ a[space.block(j + 1), space.block(j)]
            resid = max(resid, float(np.linalg.norm(comp)))
    return resid


def check_metric(space: GradedSpace, g):
    """Validate a positive-definite Hermitian block-diagonal metric."""
    g = np.asarray(g, dtype=np.complex128)
    n = space.total_dim
    if g.shape != (n, n):
        raise SchemaError(f"metric has shape {g.shape}, expected {(n, n)}")
    if np.linalg.norm(g - g.conj().T) > 1e-10 * (1 + np.linalg.norm(g)):
        raise SchemaError("metric is not Hermitian")
    w = np.linalg.eigvalsh(g)
    if w.min() <= 0:
        raise SchemaError("metric is not positive definite")
    for j in space.degrees:
        for k in space.degrees:
            if k != j and space.dim(j) and space.dim(k):
                if np.linalg.norm(g[space.block(j), space.block(k)]) > 1e-12 * (1 + np.linalg.norm(g)):
                    raise SchemaError("metric mixes degrees")
    return g


def adjoint(space: GradedSpace, op, g):
    """g-adjoint of a total-space map: g(op x, y) = g(x, adjoint(op) y).

    For the identity metric this is the conjugate transpose.
    """
    g = np.asarray(g, dtype=np.complex128)
    op = np.asarray(op, dtype=np.complex128)
    return np.linalg.solve(g, op.conj().swapaxes(-1, -2) @ g)


@dataclass
class GradedComplex:
    """Finite-dimensional complex (V, a0, g) with a0 of degree +1, a0^2 = 0."""

    space: GradedSpace
    a0: np.ndarray
    g: np.ndarray = None
    tol: float = 1e-12

    def __post_init__(self):
        n = self.space.total_dim
        self.a0 = np.asarray(self.a0, dtype=np.complex128)
        if self.a0.shape != (n, n):
            raise SchemaError(f"a0 has shape {self.a0.shape}, expected {(n, n)}")
        off = self.a0 - matrix_degree_component(self.space, self.a0, 1)
        if np.linalg.norm(off) > 1e-12 * (1 + np.linalg.norm(self.a0)):
            raise SchemaError("a0 is not homogeneous of degree +1")
        if self.g is None:
            self.g = np.eye(n, dtype=np.complex128)
        self.g = check_metric(self.space, self.g)
        scale = self.tol * (1 + np.linalg.norm(self.a0) ** 2)
        resid = np.linalg.norm(self.a0 @ self.a0)
        if resid > scale:
            raise ContractError("a0^2 = 0", f"residual {resid:.3e} > {scale:.3e}")

    @classmethod
    def from_blocks(cls, space, blocks, g=None, tol=1e-12):
        return cls(space, blocks_to_matrix(space, blocks), g=g, tol=tol)

    def adjoint_differential(self):
        return adjoint(self.space, self.a0, self.g)

    def laplacian(self):
        a, b = self.a0, self.adjoint_differential()
        return b @ a + a @ b

    def gram_factor(self):
        """Cholesky factor R with g = R^H R; maps to a g-orthonormal frame."""
        return np.linalg.cholesky(self.g).conj().swapaxes(-1, -2)


@dataclass
class HarmonicData:
    """Harmonic subspace of a complex: projector, basis, induced metric."""

    space: GradedSpace          # of the ambient complex
    h_space: GradedSpace        # dims = Betti numbers
    projector: np.ndarray       # g-orthogonal projector onto ker(a0+a0*)
    basis: np.ndarray           # columns: g-orthonormal harmonic basis
    metric: np.ndarray          # induced metric on H in that basis (identity)

    def betti(self):
        return self.h_space.dims


def laplacian_and_harmonics(c: GradedComplex, cutoff=1e-9):
    """Per-degree Laplacians and the harmonic model of cohomology.

    The harmonic subspace is the eigenspace of the g-self-adjoint Laplacian
    below cutoff * spectral radius; the cutoff exists because floating point
    replaces exact algebra.
    """
    n = c.space.total_dim
    R = c.gram_factor()
    Rinv = np.linalg.inv(R)
    delta = c.laplacian()
    delta_on = R @ delta @ Rinv          # Hermitian in the orthonormal frame
    delta_on = 0.5 * (delta_on + delta_on.conj().T)
    deltas = {j: delta[c.space.block(j), c.space.block(j)] for j in c.space.degrees}

    basis_cols = []
    betti = []
    for j in c.space.degrees:
        blk = c.space.block(j)
        dj = delta_on[blk, blk]
        if c.space.dim(j) == 0:
            betti.append(0)
            continue
        w, v = np.linalg.eigh(dj)
        rad = max(w.max(initial=0.0), 1.0e-300)
        keep = w <= cutoff * max(rad, 1.0)
        betti.append(int(keep.sum()))
        if keep.any():
            cols = np.zeros((n, int(keep.sum())), dtype=np.complex128)
            cols[blk, :] = v[:, keep]
            basis_cols.append(cols)

    if basis_cols:
        basis_on = np.concatenate(basis_cols, axis=1)
    else:
        basis_on = np.zeros((n, 0), dtype=np.complex128)
    # back to the original frame; columns stay g-orthonormal
    basis = Rinv @ basis_on
    proj_on = basis_on @ basis_on.conj().T
    projector = Rinv @ proj_on @ R

    h_space = GradedSpace(c.space.j_min, tuple(betti)) if sum(betti) else GradedSpace(c.space.j_min, (0,) * len(c.space.dims)) if False else None
    if sum(betti) == 0:
        # keep the degree window; an all-zero space is useful downstream
        h_space = _empty_like(c.space)
    else:
        h_space = GradedSpace(c.space.j_min, tuple(betti))
    hd = HarmonicData(
        space=c.space,
        h_space=h_space,
        projector=projector,
        basis=basis,
        metric=np.eye(basis.shape[1], dtype=np.complex128),
    )
    return deltas, hd


class _EmptyGradedSpace(GradedSpace):
    """Zero space kept only for bookkeeping (chi = chi' = 0)."""

    def __post_init__(self):  # bypass the positive-dimension invariant
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


def _empty_like(space: GradedSpace):
    return _EmptyGradedSpace(space.j_min, (0,) * len(space.dims))


def betti_numbers(space: GradedSpace, a0):
    """Rank-nullity oracle: b_j = dim ker a0|_j - rank a0 into degree j."""
    out = []
    for j in space.degrees:
        blk_j = a0[space.block(j + 1), space.block(j)] if space.dim(j + 1) else np.zeros((0, space.dim(j)))
        rank_out = np.linalg.matrix_rank(blk_j) if min(blk_j.shape) else 0
        if space.dim(j - 1):
            blk_in = a0[space.block(j), space.block(j - 1)]
            rank_in = np.linalg.matrix_rank(blk_in) if min(blk_in.shape) else 0
        else:
            rank_in = 0
        out.append(space.dim(j) - rank_out - rank_in)
    return tuple(out)
