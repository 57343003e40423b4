"""
=============================================================================
process/innovations.py - Sparse Innovation Form of the Random-Effect Density
=============================================================================

Every random effect is a linear function of earlier effects plus an
independent Gaussian innovation:

    e = A(phi) u - c(mu, phi),   e ~ N(0, diag(D))

A(phi) = A0 + phi * A1 is unit lower triangular in the natural layout, so
log|A| = 0 and the precision of u is A' D^-1 A.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve_triangular

from etc.exceptions import ProcessError
from .state import LOG_2PI, blup_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class InnovationForm:
    A: sparse.csr_matrix
    c: np.ndarray
    D: np.ndarray

    def residual(self, u):
        return self.A @ u - self.c

    def loglik(self, u):
        e = self.residual(u)
        return float(-0.5 * (np.log(self.D).sum() + self.D.size * LOG_2PI + (e * e / self.D).sum()))

    def gradient(self, u):
        """Gradient of the log-density in u"""
        return -(self.A.T @ (self.residual(u) / self.D))

    def precision(self):
        return (self.A.T @ sparse.diags(1.0 / self.D) @ self.A).tocsc()

    def sample(self, rng):
        """One unconditional draw of u"""
        rhs = self.c + np.sqrt(self.D) * rng.standard_normal(self.D.size)
        return spsolve_triangular(self.A, rhs, lower=True, unit_diagonal=True)


class InnovationOperator:
    """
    Coefficient pattern of A0 and A1 for one (structure, layout) pair. The
    pattern is fixed; evaluate() fills in mu, phi, sigma and tau.
    """

    def __init__(self, structure, layout):
        if layout.n_refs != structure.n_refs:
            raise ProcessError("Layout and spatial structure disagree on the reference count.")
        self.structure = structure
        self.layout = layout
        n = layout.n_effects
        entries0, entries1 = [], []
        T, M = layout.n_times, layout.n_refs
        eps_ix = layout.eps_index
        ref_ix = layout.ref_index

        def a0(row, col, value):
            entries0.append((row, col, value))

        def a1(row, col, value):
            entries1.append((row, col, value))

        # temporal rows
        for t in range(T):
            a0(eps_ix(t), eps_ix(t), 1.0)
            if t > 0:
                a1(eps_ix(t), eps_ix(t - 1), -1.0)

        # persistent rows
        parents = structure.dag.persistent_parents
        for t in range(T):
            for i in range(M):
                row = ref_ix(t, i)
                b = structure.node_weights[i]
                P = parents[i]
                a0(row, row, 1.0)
                a0(row, eps_ix(t), -(1.0 - b.sum()))
                for j, weight in zip(P, b):
                    a0(row, ref_ix(t, j), -weight)
                if t > 0:
                    a1(row, ref_ix(t - 1, i), -1.0)
                    a1(row, eps_ix(t - 1), 1.0 - b.sum())
                    for j, weight in zip(P, b):
                        a1(row, ref_ix(t - 1, j), weight)

        # transient rows
        tparents = structure.dag.transient_parents
        for k, (t, loc) in enumerate(layout.transient_keys):
            row = layout.transient_index(k)
            b = structure.transient_weights[loc]
            P = tparents[loc]
            a0(row, row, 1.0)
            a0(row, eps_ix(t), -(1.0 - b.sum()))
            for j, weight in zip(P, b):
                a0(row, ref_ix(t, j), -weight)
            if t > 0:
                a = blup_weights(b)
                a1(row, eps_ix(t - 1), 1.0 - b.sum())
                for j, weight, blup in zip(P, b, a):
                    a1(row, ref_ix(t - 1, j), weight - blup)

        self.A0 = _assemble(entries0, n)
        self.A1 = _assemble(entries1, n)

        self._deficits = np.concatenate([
            np.tile(structure.node_deficits, T),
            structure.transient_deficits[[loc for _, loc in layout.transient_keys]]
            if layout.n_transient else np.zeros(0),
        ])
        logger.debug("Innovation operator: %d effects, %d + %d non-zeros", n, self.A0.nnz, self.A1.nnz)

    def evaluate(self, p, tau=None):
        """InnovationForm at temporal parameters p and spatial scale tau"""
        structure = self.structure if tau is None else self.structure.with_tau(tau)
        T = self.layout.n_times
        A = (self.A0 + p.phi * self.A1).tocsr()
        c = np.zeros(self.layout.n_effects)
        c[0] = p.mu
        c[1:T] = (1.0 - p.phi) * p.mu
        D = np.empty(self.layout.n_effects)
        D[0] = p.stationary_variance
        D[1:T] = p.sigma ** 2
        D[T:] = structure.marginal_variance * self._deficits
        if not np.all(D > 0):
            raise ProcessError("Innovation variances must be positive.")
        return InnovationForm(A=A, c=c, D=D)


def _assemble(entries, n):
    if not entries:
        return sparse.csr_matrix((n, n))
    rows, cols, values = zip(*entries)
    matrix = sparse.csr_matrix((values, (rows, cols)), shape=(n, n))
    matrix.sum_duplicates()
    return matrix
