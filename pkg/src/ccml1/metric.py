"""Contraction-metric fields: evaluation, factorization, and condition checking.

A metric field carries the state-dependent SPD matrix used as a Riemannian
metric by the geodesic solver and the tracking controller, together with its
dual (inverse), per-coordinate partial derivatives, a contraction rate, and
uniform eigenvalue bounds over a validated domain.

Metrics are specified through the *dual* matrix as polynomial-coefficient
tables (the form in which such certificates are usually synthesized and
published); the metric itself is obtained by pointwise inversion, and its
partials through d(inv) = -inv * d(dual) * inv.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .errors import MetricDomainError, MetricValidationError


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetric part times two: a + a.T (the form contraction conditions use)."""
    return a + a.swapaxes(-1, -2)


class PolyMatrix:
    """Matrix-valued polynomial stored as {monomial powers -> coefficient matrix}.

    Evaluation is vectorized over batches of states: for each distinct
    monomial the scalar value is computed once and scales one coefficient
    matrix, so evaluation cost is O(#monomials) numpy ops regardless of
    matrix size.
    """

    def __init__(self, dim_in: int, shape: tuple[int, int],
                 terms: Sequence[tuple[tuple[int, ...], np.ndarray]]):
        self.dim_in = int(dim_in)
        self.shape = (int(shape[0]), int(shape[1]))
        clean = {}
        for powers, coeff in terms:
            powers = tuple(int(p) for p in powers)
            if len(powers) != self.dim_in:
                raise ValueError("monomial power tuple has wrong length")
            coeff = np.asarray(coeff, dtype=float)
            if coeff.shape != self.shape:
                raise ValueError("coefficient matrix has wrong shape")
            if powers in clean:
                clean[powers] = clean[powers] + coeff
            else:
                clean[powers] = coeff
        self.terms = [(p, c) for p, c in sorted(clean.items()) if np.any(c != 0.0)]
        if not self.terms:
            self.terms = [((0,) * self.dim_in, np.zeros(self.shape))]
        # stacked form for vectorized evaluation
        self._powers = np.array([p for p, _ in self.terms], dtype=float)
        self._coeffs = np.stack([c for _, c in self.terms])

    @property
    def is_constant(self) -> bool:
        zero = (0,) * self.dim_in
        return all(p == zero for p, _ in self.terms)

    @property
    def is_zero(self) -> bool:
        return all(np.all(c == 0.0) for _, c in self.terms)

    def sum_coeffs(self) -> np.ndarray:
        """Sum of coefficient matrices (= the value when is_constant)."""
        return self._coeffs.sum(axis=0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.eval_batch(np.asarray(x, dtype=float)[None, :])[0]

    def eval_batch(self, xs: np.ndarray) -> np.ndarray:
        """Evaluate at a (k, dim_in) batch of states -> (k, *shape)."""
        xs = np.asarray(xs, dtype=float)
        if self.is_constant:
            return np.broadcast_to(self._coeffs.sum(axis=0),
                                   (xs.shape[0],) + self.shape).copy()
        scales = np.prod(xs[:, None, :] ** self._powers[None, :, :], axis=2)
        return np.tensordot(scales, self._coeffs, axes=(1, 0))

    def partial(self, coord: int) -> "PolyMatrix":
        """Closed-form partial derivative with respect to one coordinate."""
        terms = []
        for powers, coeff in self.terms:
            p = powers[coord]
            if p == 0:
                continue
            new_p = list(powers)
            new_p[coord] = p - 1
            terms.append((tuple(new_p), p * coeff))
        return PolyMatrix(self.dim_in, self.shape, terms)

    def to_entry_table(self) -> list[list[list[dict]]]:
        """Serialize as per-entry monomial lists (scenario-file form)."""
        rows = []
        for i in range(self.shape[0]):
            row = []
            for j in range(self.shape[1]):
                entry = []
                for powers, coeff in self.terms:
                    if coeff[i, j] != 0.0:
                        entry.append({"coeff": float(coeff[i, j]),
                                      "powers": list(powers)})
                row.append(entry)
            rows.append(row)
        return rows

    @classmethod
    def from_entry_table(cls, dim_in: int, table) -> "PolyMatrix":
        """Inverse of :meth:`to_entry_table`."""
        rows = len(table)
        cols = len(table[0]) if rows else 0
        acc: dict[tuple[int, ...], np.ndarray] = {}
        for i in range(rows):
            if len(table[i]) != cols:
                raise ValueError("ragged entry table")
            for j in range(cols):
                for term in table[i][j]:
                    powers = tuple(int(p) for p in term["powers"])
                    mat = acc.setdefault(powers, np.zeros((rows, cols)))
                    mat[i, j] += float(term["coeff"])
        return cls(dim_in, (rows, cols), list(acc.items()))


@dataclass
class MetricField:
    """A validated contraction metric with rate and eigenvalue envelope.

    ``eig_floor``/``eig_ceil`` bound the metric's eigenvalues over ``domain``;
    they are re-validated by sampling at construction because every downstream
    tube radius leans on them.
    """

    dim: int
    contraction_rate: float
    eig_floor: float
    eig_ceil: float
    dual_poly: PolyMatrix
    domain: "object" = None  # SafeSet-like (needs .sample/.contains) or None
    _dual_partials: list[PolyMatrix] = dc_field(default=None, repr=False)

    def __post_init__(self):
        if self._dual_partials is None:
            self._dual_partials = [self.dual_poly.partial(i) for i in range(self.dim)]
        # coordinates the dual actually depends on; the rest have zero partials
        self._active_coords = [i for i, p in enumerate(self._dual_partials)
                               if not p.is_zero]
        self._const_metric = (np.linalg.inv(self.dual_poly.sum_coeffs())
                              if self.dual_poly.is_constant else None)

    @property
    def is_constant(self) -> bool:
        return self._const_metric is not None

    # -- constructors -------------------------------------------------------

    @classmethod
    def from_dual_polynomial(cls, dual: PolyMatrix, contraction_rate: float,
                             eig_floor: float, eig_ceil: float, domain=None,
                             validate: bool = True, n_samples: int = 2000,
                             seed: int = 0) -> "MetricField":
        fld = cls(dim=dual.shape[0], contraction_rate=float(contraction_rate),
                  eig_floor=float(eig_floor), eig_ceil=float(eig_ceil),
                  dual_poly=dual, domain=domain)
        if validate and domain is not None:
            fld.validate_bounds(n_samples=n_samples, seed=seed)
        return fld

    @classmethod
    def constant_dual(cls, dual_matrix, contraction_rate: float,
                      eig_floor: float = None, eig_ceil: float = None,
                      domain=None) -> "MetricField":
        dual_matrix = np.asarray(dual_matrix, dtype=float)
        n = dual_matrix.shape[0]
        poly = PolyMatrix(n, (n, n), [((0,) * n, dual_matrix)])
        eigs = np.linalg.eigvalsh(np.linalg.inv(dual_matrix))
        if eig_floor is None:
            eig_floor = float(eigs[0])
        if eig_ceil is None:
            eig_ceil = float(eigs[-1])
        return cls(dim=n, contraction_rate=float(contraction_rate),
                   eig_floor=float(eig_floor), eig_ceil=float(eig_ceil),
                   dual_poly=poly, domain=domain)

    @classmethod
    def identity(cls, dim: int, contraction_rate: float = 1.0) -> "MetricField":
        return cls.constant_dual(np.eye(dim), contraction_rate)

    # -- evaluation ---------------------------------------------------------

    def dual(self, x) -> np.ndarray:
        return self.dual_poly(x)

    def metric(self, x) -> np.ndarray:
        return self.metric_batch(np.asarray(x, dtype=float)[None, :])[0]

    def metric_batch(self, xs: np.ndarray, check_pd: bool = True) -> np.ndarray:
        if self._const_metric is not None:
            return np.broadcast_to(self._const_metric,
                                   (xs.shape[0],) + self._const_metric.shape).copy()
        duals = self.dual_poly.eval_batch(xs)
        if check_pd:
            try:
                np.linalg.cholesky(duals)
            except np.linalg.LinAlgError:
                bad = _first_non_pd(duals, xs)
                raise MetricDomainError("dual metric not positive definite", x=bad)
        return _inv_batch(duals)

    def dual_partials(self, x) -> np.ndarray:
        """Stack of closed-form partials of the dual, shape (dim, n, n)."""
        return np.stack([p(x) for p in self._dual_partials])

    def partials(self, x) -> np.ndarray:
        """Partials of the metric via d(inv) = -inv d(dual) inv, shape (dim, n, n)."""
        return self.partials_batch(np.asarray(x, dtype=float)[None, :])[0]

    def partials_batch(self, xs: np.ndarray) -> np.ndarray:
        """(k, dim, n, n) metric partials for a batch of states."""
        return self.metric_and_partials_batch(xs)[1]

    def metric_and_partials_batch(self, xs: np.ndarray, check_pd: bool = True):
        m = self.metric_batch(xs, check_pd=check_pd)
        dm = np.zeros((xs.shape[0], self.dim) + self.dual_poly.shape)
        for i in self._active_coords:
            dm[:, i] = -m @ self._dual_partials[i].eval_batch(xs) @ m
        return m, dm

    def factorize(self, x):
        """Upper-triangular factors (theta, ell) with theta.T@theta = metric,
        ell.T@ell = dual."""
        m = self.metric(x)
        w = self.dual(x)
        try:
            theta = np.linalg.cholesky(m).T
            ell = np.linalg.cholesky(w).T
        except np.linalg.LinAlgError:
            raise MetricDomainError("factorization failed: not positive definite",
                                    x=np.asarray(x, dtype=float))
        return theta, ell

    # -- validation ---------------------------------------------------------

    def validate_bounds(self, n_samples: int = 2000, seed: int = 0,
                        rel_slack: float = 1e-9) -> None:
        """Sample the domain and confirm the declared eigenvalue envelope.

        Raises MetricValidationError when any sampled eigenvalue falls outside
        [eig_floor*(1-rel_slack), eig_ceil*(1+rel_slack)].
        """
        if self.domain is None:
            return
        rng = np.random.default_rng(seed)
        pts = self.domain.sample(n_samples, rng, include_extremes=True)
        eigs = np.linalg.eigvalsh(self.metric_batch(pts))
        lo, hi = eigs[:, 0].min(), eigs[:, -1].max()
        if lo < self.eig_floor * (1.0 - rel_slack) or hi > self.eig_ceil * (1.0 + rel_slack):
            raise MetricValidationError(
                f"sampled metric eigenvalues [{lo:.6g}, {hi:.6g}] violate the "
                f"declared envelope [{self.eig_floor:.6g}, {self.eig_ceil:.6g}]")

    @property
    def overshoot(self) -> float:
        """Eigenvalue-ratio overshoot factor eig_ceil/eig_floor."""
        return self.eig_ceil / self.eig_floor


def _first_non_pd(duals: np.ndarray, xs: np.ndarray):
    for w, x in zip(duals, xs):
        try:
            np.linalg.cholesky(w)
        except np.linalg.LinAlgError:
            return np.array(x)
    return None


def _inv_batch(mats: np.ndarray) -> np.ndarray:
    """Batched inverse; closed-form adjugate for the 2x2/3x3 sizes that
    dominate here (avoids LAPACK per-call overhead on tiny matrices)."""
    n = mats.shape[-1]
    if n == 2:
        a, b = mats[..., 0, 0], mats[..., 0, 1]
        c, d = mats[..., 1, 0], mats[..., 1, 1]
        det = a * d - b * c
        out = np.empty_like(mats)
        out[..., 0, 0] = d
        out[..., 0, 1] = -b
        out[..., 1, 0] = -c
        out[..., 1, 1] = a
        return out / det[..., None, None]
    if n == 3:
        a = mats
        out = np.empty_like(a)
        out[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
        out[..., 0, 1] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
        out[..., 0, 2] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
        out[..., 1, 0] = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
        out[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
        out[..., 1, 2] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
        out[..., 2, 0] = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
        out[..., 2, 1] = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
        out[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
        det = (a[..., 0, 0] * out[..., 0, 0] + a[..., 0, 1] * out[..., 1, 0]
               + a[..., 0, 2] * out[..., 2, 0])
        return out / det[..., None, None]
    return np.linalg.inv(mats)


def eval_metric(field: MetricField, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (metric, dual, metric partials) at one state.

    The returned dual is the closed-form polynomial value; the metric is its
    inverse, so their product is the identity to floating-point accuracy.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise MetricDomainError("non-finite query state", x=x)
    w = field.dual(x)
    m = field.metric(x)
    dm = field.partials(x)
    return m, w, dm


@dataclass
class CcmCheckReport:
    """Worst-case margins of the three pointwise metric conditions.

    All margins are oriented so that nonnegative means satisfied:
      * ``eig_margin`` - smallest slack of the eigenvalue envelope,
      * ``contraction_margin`` - minus the largest eigenvalue of the projected
        contraction matrix on the null space of (input^T metric),
      * ``killing_margin`` - minus the largest per-column residual norm of the
        input-direction invariance condition.
    """

    eig_margin: float
    contraction_margin: float
    killing_margin: float
    n_samples: int
    violations: list
    tol_eig: float
    tol_contraction: float
    tol_killing: float

    @property
    def passed(self) -> bool:
        return (self.eig_margin >= -self.tol_eig
                and self.contraction_margin >= -self.tol_contraction
                and self.killing_margin >= -self.tol_killing)

    def as_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "eig_margin": float(self.eig_margin),
            "contraction_margin": float(self.contraction_margin),
            "killing_margin": float(self.killing_margin),
            "n_samples": int(self.n_samples),
            "n_violations": len(self.violations),
            "violations": [list(map(float, v)) for v in self.violations[:20]],
        }


def ccm_check(model, field: MetricField, region=None, n_samples: int = 10_000,
              seed: int = 0, slack: float = 1e-8,
              rank_tol_scale: float = 1e-10) -> CcmCheckReport:
    """Sample a region and evaluate the three pointwise metric conditions.

    The conditional contraction condition is tested on the null space of
    (input^T metric), computed with a full orthogonal decomposition at rank
    tolerance ``rank_tol_scale * ||input^T metric||``; the projected block
    must be negative semidefinite up to ``slack``.
    """
    region = region if region is not None else field.domain
    if region is None:
        raise ValueError("no sampling region: pass region= or give the field a domain")
    rng = np.random.default_rng(seed)
    pts = region.sample(n_samples, rng, include_extremes=True)

    eig_margin = np.inf
    contraction_margin = np.inf
    killing_margin = np.inf
    violations: list = []
    lam = field.contraction_rate

    ms, dms = field.metric_and_partials_batch(pts)
    eigs = np.linalg.eigvalsh(ms)
    slack_eig = 1e-9 * field.eig_ceil
    for x, m, dm, ev in zip(pts, ms, dms, eigs):
        e_marg = min(ev[0] - field.eig_floor, field.eig_ceil - ev[-1])
        eig_margin = min(eig_margin, e_marg)

        b = model.input_matrix(x)
        jac = model.jac_drift(x)
        fx = model.drift(x)

        # directional derivative of the metric along the drift
        d_along_f = np.tensordot(fx, dm, axes=(0, 0))
        contraction_mat = d_along_f + sym(m @ jac) + 2.0 * lam * m

        bm = b.T @ m
        sv = np.linalg.svd(bm, compute_uv=False)
        tol = rank_tol_scale * (sv[0] if sv.size else 1.0)
        rank = int(np.sum(sv > tol))
        c_marg = np.inf
        if rank < field.dim:
            _, _, vt = np.linalg.svd(bm)
            basis = vt[rank:].T
            proj = basis.T @ contraction_mat @ basis
            c_marg = -np.linalg.eigvalsh(proj)[-1]
            contraction_margin = min(contraction_margin, c_marg)

        k_marg = np.inf
        for j in range(model.input_dim):
            col = b[:, j]
            d_along_b = np.tensordot(col, dm, axes=(0, 0))
            col_jac = model.d_input_col_jac(x, j)
            resid = d_along_b + sym(m @ col_jac)
            k_marg = min(k_marg, -np.linalg.norm(resid, 2))
        killing_margin = min(killing_margin, k_marg)

        if e_marg < -slack_eig or c_marg < -slack or k_marg < -slack:
            violations.append(np.array(x))

    return CcmCheckReport(
        eig_margin=float(eig_margin),
        contraction_margin=float(contraction_margin),
        killing_margin=float(killing_margin),
        n_samples=len(pts), violations=violations,
        tol_eig=slack_eig, tol_contraction=slack, tol_killing=slack)


def dual_F(model, field: MetricField, x) -> np.ndarray:
    """Dual-form contraction matrix used by the feedback-magnitude constant.

    F = -(directional derivative of dual along drift) + jac@dual + dual@jac^T
        + 2*rate*dual; symmetric by construction.
    """
    x = np.asarray(x, dtype=float)
    w = field.dual(x)
    dw = field.dual_partials(x)
    fx = model.drift(x)
    jac = model.jac_drift(x)
    d_along_f = np.tensordot(fx, dw, axes=(0, 0))
    return -d_along_f + sym(jac @ w) + 2.0 * field.contraction_rate * w
