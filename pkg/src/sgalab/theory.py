"""Numerical certification of the Gram-alignment properties.

Three families of checks:

* gauge invariance - the SGA loss and the Gram matrix do not see a right
  multiplication of normalized features by an orthogonal matrix;
* spectral / subspace matching - Hoffman-Wielandt for the sorted spectra
  and a Davis-Kahan sin-theta bound with constant 2 for top-k eigenspaces;
* containment of zero-loss sets - ``sga <= 4 * repa``, an explicit orbit
  construction of the orthogonal map between two equal-Gram feature sets,
  and the orthogonal-Procrustes displacement gap.

All randomized checks are driven by :class:`RngState` and are reproducible.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .alignment import gram, repa_loss, row_l2_normalize, sga_loss
from .errors import ContractError, NumericalError, ShapeError
from .numerics.linalg import complete_basis, svd, sym_eig
from .numerics.rng import RngState

EIGENGAP_MIN = 1e-9
RANK_TOL = 1e-10


@dataclass
class SubspaceReport:
    k: int
    eigengap: float
    sin_theta_frobenius: float
    bound_value: float
    satisfied: bool
    evaluable: bool


@dataclass
class OrbitWitness:
    q: np.ndarray
    residual: float
    orthogonality: float
    sga: float
    rank: int


@dataclass
class CheckResult:
    name: str
    trials: int
    worst: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    note: str = ""


def _fix_column_signs(q):
    # first nonzero entry of each column made nonnegative
    nz = np.abs(q) > 0
    first = np.argmax(nz, axis=-2)
    vals = np.take_along_axis(q, first[..., None, :], axis=-2)
    return q * np.where(vals < 0, -1.0, 1.0)


def random_orthogonal(c: int, rng: RngState, count: int | None = None) -> np.ndarray:
    """Orthonormalized standard-normal square matrix (or a stack of ``count``)."""
    if c < 1:
        raise ShapeError("dimension must be >= 1")
    shape = (c, c) if count is None else (count, c, c)
    q, _ = np.linalg.qr(rng.normal(shape))
    return _fix_column_signs(q)


def random_features(rng: RngState, n: int, c: int) -> np.ndarray:
    return rng.normal((n, c))


def check_gauge_invariance(h_g, h_f, trials: int, rng: RngState):
    """Worst loss change and worst row-norm drift under random orthogonal maps.

    Returns ``(max_loss_deviation, max_row_norm_deviation)``.
    """
    ug = row_l2_normalize(h_g)
    base = sga_loss(ug, h_f)
    qs = random_orthogonal(ug.shape[1], rng, count=trials)
    rotated = np.einsum("nc,tcd->tnd", ug, qs)
    norm_dev = float(np.abs(np.linalg.norm(rotated, axis=-1) - 1.0).max())
    devs = [abs(sga_loss(r, h_f) - base) for r in rotated]
    return float(max(devs)), norm_dev


def _require_symmetric(m, name):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got {m.shape}")
    asym = np.abs(m - m.T).max()
    if asym > 1e-6:
        raise ContractError(f"{name} asymmetric by {asym:.3e}")
    return m


def check_spectral_bound(g_g, g_f, eig_g=None, eig_f=None):
    """Hoffman-Wielandt: ``sum (lam_i(G_g) - lam_i(G_f))^2 <= ||G_g - G_f||_F^2``.

    Returns ``(lhs, rhs, satisfied)`` with eigenvalues paired in
    non-increasing order.
    """
    g_g = _require_symmetric(g_g, "G_g")
    g_f = _require_symmetric(g_f, "G_f")
    if g_g.shape != g_f.shape:
        raise ShapeError(f"Gram sizes differ: {g_g.shape} vs {g_f.shape}")
    lam_g = (eig_g or sym_eig(g_g))[0]
    lam_f = (eig_f or sym_eig(g_f))[0]
    lhs = float(np.sum((lam_g - lam_f) ** 2))
    rhs = float(np.sum((g_g - g_f) ** 2))
    return lhs, rhs, lhs <= rhs + 1e-9


def check_subspace_bound(g_g, g_f, k: int, eig_g=None, eig_f=None) -> SubspaceReport:
    """Davis-Kahan: ``||sin Theta(U_g, U_f)||_F <= 2 ||G_g - G_f||_F / delta_k``."""
    g_g = _require_symmetric(g_g, "G_g")
    g_f = _require_symmetric(g_f, "G_f")
    n = g_f.shape[0]
    if not 1 <= k < n:
        raise ShapeError(f"k={k} outside [1, {n - 1}]")
    _, vec_g = eig_g or sym_eig(g_g)
    lam_f, vec_f = eig_f or sym_eig(g_f)
    gap = float(lam_f[k - 1] - lam_f[k])
    # ||sin Theta||_F = ||U_f_perp^T U_g||_F; avoids the cancellation in k - ||U_f^T U_g||^2
    sin_theta = float(np.linalg.norm(vec_f[:, k:].T @ vec_g[:, :k]))
    if gap <= EIGENGAP_MIN:
        return SubspaceReport(k, max(gap, 0.0), sin_theta, float("inf"), True, False)
    bound = 2.0 * float(np.linalg.norm(g_g - g_f)) / gap
    return SubspaceReport(k, gap, sin_theta, bound, sin_theta <= bound + 1e-9, True)


def orbit_map(h_f_unit, h_g_unit, rank_tol=RANK_TOL):
    """Orthogonal Q with ``H~_f Q = H~_g`` for two feature sets sharing a Gram matrix.

    Follows the compact-SVD construction: with ``H~_f = U_r S_r V_f^T`` and
    ``H~_g = U_r S_r V_g^T``, ``Q = V_f V_g^T + V_f_perp V_g_perp^T``.
    """
    lam, u = sym_eig(h_f_unit @ h_f_unit.T)
    r = int(np.sum(lam > rank_tol * max(lam[0], 0.0))) if lam[0] > 0 else 0
    u_r = u[:, :r]
    s_r = np.sqrt(lam[:r])
    v_f = (h_f_unit.T @ u_r) / s_r
    v_g = (h_g_unit.T @ u_r) / s_r
    q = v_f @ v_g.T + complete_basis(v_f) @ complete_basis(v_g).T
    return q, r


def construct_zero_loss_orthogonal(h_f, rng: RngState, q=None):
    """Draw Q, set ``H~_g = H~_f Q`` and rebuild an orthogonal witness from the pair.

    Returns ``(h_g, witness)``; raises :class:`NumericalError` if the rebuilt
    map fails the residual or orthogonality tolerance (1e-8) or the SGA
    loss is not at zero (1e-10).
    """
    uf = row_l2_normalize(np.asarray(h_f, dtype=np.float64))
    c = uf.shape[1]
    if q is None:
        q = random_orthogonal(c, rng)
    h_g = uf @ q
    q_hat, r = orbit_map(uf, h_g)
    residual = float(np.linalg.norm(uf @ q_hat - h_g))
    ortho = float(np.linalg.norm(q_hat.T @ q_hat - np.eye(c)))
    loss = sga_loss(h_g, uf)
    witness = OrbitWitness(q_hat, residual, ortho, loss, r)
    if residual > 1e-8 or ortho > 1e-8 or loss > 1e-10:
        raise NumericalError(
            f"orbit construction failed: residual={residual:.3e}, "
            f"orthogonality={ortho:.3e}, sga={loss:.3e}"
        )
    return h_g, witness


def check_domination(h_g, h_f):
    """``(sga, repa, sga <= 4 * repa + 1e-9)``."""
    s = sga_loss(h_g, h_f)
    r = repa_loss(h_g, h_f)
    return s, r, s <= 4.0 * r + 1e-9


def procrustes(a, b):
    """Orthogonal Q minimising ``||a Q - b||_F`` (full O(C), det may be -1)."""
    u, _, v = svd(a.T @ b)
    return u @ v.T


def minimum_displacement_gap(h_g_star, h_f, restarts: int = 0, rng: RngState | None = None):
    """Distance to the REPA zero set versus distance to the SGA zero-loss orbit.

    Returns ``(repa_distance, sga_orbit_distance)``.  ``restarts`` random
    orthogonal maps are also tried as a sanity check that the Procrustes
    solution is not beaten.
    """
    ug = row_l2_normalize(np.asarray(h_g_star, dtype=np.float64))
    uf = row_l2_normalize(np.asarray(h_f, dtype=np.float64))
    repa_dist = float(np.linalg.norm(ug - uf))
    q = procrustes(uf, ug)
    orbit_dist = float(np.linalg.norm(ug - uf @ q))
    if restarts and rng is not None:
        qs = random_orthogonal(uf.shape[1], rng, count=restarts)
        trial = np.linalg.norm(ug[None] - np.einsum("nc,tcd->tnd", uf, qs), axis=(1, 2))
        if trial.min() < orbit_dist - 1e-9:
            raise NumericalError("a random orthogonal map beat the Procrustes solution")
    if orbit_dist > repa_dist + 1e-9:
        raise NumericalError(f"orbit distance {orbit_dist} exceeds direct distance {repa_dist}")
    return repa_dist, orbit_dist


# --------------------------------------------------------------------------
# Monte-Carlo certification suite


def _shape(rng, n_max=32, c_max=16):
    n = 2 + int(rng.integers(n_max - 1))
    c = 2 + int(rng.integers(c_max - 1))
    return n, c


def _feature_pair(rng, n, c, kind):
    h_f = rng.normal((n, c))
    if kind == "independent":
        return rng.normal((n, c)), h_f
    if kind == "permuted":
        return h_f[rng.permutation(n)], h_f
    eps = 10.0 ** (-4.0 + 4.0 * rng.uniform())
    return h_f + eps * rng.normal((n, c)), h_f


_PAIR_KINDS = ("independent", "perturbed", "perturbed", "permuted")


def certify_gauge(instances=1000, transforms=100, seed=0):
    rng = RngState(seed)
    worst_loss = worst_norm = worst_gram = 0.0
    for i in range(instances):
        r = rng.split(i)
        n, c = _shape(r)
        h_g, h_f = r.normal((n, c)), r.normal((n, c))
        dev, ndev = check_gauge_invariance(h_g, h_f, transforms, r)
        worst_loss, worst_norm = max(worst_loss, dev), max(worst_norm, ndev)
        u = row_l2_normalize(h_g)
        q = random_orthogonal(c, r)
        worst_gram = max(worst_gram, float(np.abs(gram(u @ q) - gram(u)).max()))
    return [
        CheckResult("gauge_loss_invariance", instances * transforms, worst_loss, 1e-9, worst_loss <= 1e-9),
        CheckResult("gauge_row_norms", instances * transforms, worst_norm, 1e-9, worst_norm <= 1e-9),
        CheckResult("gauge_gram_invariance", instances, worst_gram, 1e-10, worst_gram <= 1e-10),
    ]


def certify_spectral(pairs=1000, ks=(1, 2, 3), gap_min=0.05, seed=1):
    rng = RngState(seed)
    worst_hw = -np.inf
    worst_dk = {k: -np.inf for k in ks}
    counted = {k: 0 for k in ks}
    for i in range(pairs):
        r = rng.split(i)
        n, c = _shape(r)
        n = max(n, max(ks) + 1)
        h_g, h_f = _feature_pair(r, n, c, _PAIR_KINDS[i % len(_PAIR_KINDS)])
        g_g, g_f = gram(row_l2_normalize(h_g)), gram(row_l2_normalize(h_f))
        eg, ef = sym_eig(g_g), sym_eig(g_f)
        lhs, rhs, _ = check_spectral_bound(g_g, g_f, eg, ef)
        worst_hw = max(worst_hw, lhs - rhs)
        for k in ks:
            rep = check_subspace_bound(g_g, g_f, k, eg, ef)
            if rep.evaluable and rep.eigengap > gap_min:
                counted[k] += 1
                worst_dk[k] = max(worst_dk[k], rep.sin_theta_frobenius - rep.bound_value)
    out = [CheckResult("hoffman_wielandt", pairs, worst_hw, 1e-9, worst_hw <= 1e-9)]
    for k in ks:
        w = worst_dk[k] if counted[k] else 0.0
        out.append(CheckResult(f"davis_kahan_k{k}", counted[k], w, 1e-9, w <= 1e-9,
                               note=f"pairs with gap > {gap_min}"))
    return out


def certify_containment(pairs=1000, orbits=200, displacements=500, seed=2):
    rng = RngState(seed)
    worst_dom = -np.inf
    for i in range(pairs):
        r = rng.split(i)
        n, c = _shape(r)
        h_g, h_f = _feature_pair(r, n, c, _PAIR_KINDS[i % len(_PAIR_KINDS)])
        s, rp, _ = check_domination(h_g, h_f)
        worst_dom = max(worst_dom, s - 4.0 * rp)

    worst_sga = worst_res = worst_orth = 0.0
    failures = 0
    rng = RngState(seed).split(10_001)
    for i in range(orbits):
        r = rng.split(i)
        n, c = _shape(r)
        h_f = r.normal((n, c))
        if i % 3 == 0:
            # duplicated rows make H_f rank-deficient
            h_f = np.vstack([h_f, h_f[: max(1, n // 2)]])
        try:
            _, w = construct_zero_loss_orthogonal(h_f, r)
        except NumericalError:
            failures += 1
            continue
        worst_sga = max(worst_sga, w.sga)
        worst_res = max(worst_res, w.residual)
        worst_orth = max(worst_orth, w.orthogonality)

    r = RngState(seed).split(20_002)
    h_f = r.normal((16, 8))
    anti = abs(sga_loss(-h_f, h_f)) + abs(repa_loss(-h_f, h_f) - 4.0)

    worst_gap = -np.inf
    strict = 0
    rng = RngState(seed).split(30_003)
    for i in range(displacements):
        r = rng.split(i)
        n, c = _shape(r)
        h_g, h_f = r.normal((n, c)), r.normal((n, c))
        d_repa, d_orbit = minimum_displacement_gap(h_g, h_f)
        worst_gap = max(worst_gap, d_orbit - d_repa)
        strict += d_orbit < d_repa - 1e-12
    frac = strict / displacements

    return [
        CheckResult("domination_sga_le_4repa", pairs, worst_dom, 1e-9, worst_dom <= 1e-9),
        CheckResult("orbit_zero_sga", orbits, worst_sga, 1e-10, failures == 0 and worst_sga <= 1e-10,
                    note=f"{failures} failed constructions"),
        CheckResult("orbit_residual", orbits, worst_res, 1e-8, failures == 0 and worst_res <= 1e-8),
        CheckResult("orbit_orthogonality", orbits, worst_orth, 1e-8, failures == 0 and worst_orth <= 1e-8),
        CheckResult("antipodal_sga0_repa4", 1, anti, 1e-9, anti <= 1e-9),
        CheckResult("procrustes_gap", displacements, worst_gap, 1e-9,
                    worst_gap <= 1e-9 and frac > 0.95, note=f"strict in {frac:.1%}"),
    ]


def certify_linalg(trials=20, seed=3):
    rng = RngState(seed)
    worst_eig = worst_svd = 0.0
    for i in range(trials):
        r = rng.split(i)
        n = 2 + int(r.integers(63))
        s = r.normal((n, n))
        s = s + s.T
        w, v = sym_eig(s)
        worst_eig = max(worst_eig, float(np.linalg.norm(v * w @ v.T - s) / np.linalg.norm(s)))
        m = r.normal((n, 2 + int(r.integers(63))))
        u, sig, vv = svd(m)
        worst_svd = max(worst_svd, float(np.linalg.norm(u * sig @ vv.T - m) / np.linalg.norm(m)))
    return [
        CheckResult("sym_eig_reconstruction", trials, worst_eig, 1e-8, worst_eig <= 1e-8),
        CheckResult("svd_reconstruction", trials, worst_svd, 1e-8, worst_svd <= 1e-8),
    ]


def run_verification(seed: int = 0, scale: float = 1.0) -> list[CheckResult]:
    """Run every certification; ``scale`` multiplies all trial counts."""

    def n(x):
        return max(1, int(round(x * scale)))

    suites = [
        (certify_linalg, dict(trials=n(20), seed=seed + 3)),
        (certify_gauge, dict(instances=n(1000), transforms=100, seed=seed)),
        (certify_spectral, dict(pairs=n(1000), seed=seed + 1)),
        (certify_containment, dict(pairs=n(1000), orbits=n(200), displacements=n(500), seed=seed + 2)),
    ]
    results = []
    for fn, kwargs in suites:
        t0 = time.perf_counter()
        rows = fn(**kwargs)
        dt = time.perf_counter() - t0
        for row in rows:
            row.seconds = dt / len(rows)
        results.extend(rows)
    return results


REPORT_COLUMNS = ("check", "trials", "worst_deviation", "tolerance", "status")


def _row(r: CheckResult):
    return (r.name, str(r.trials), f"{r.worst:.3e}", f"{r.tolerance:.0e}", "PASS" if r.passed else "FAIL")


def format_report(results) -> str:
    rows = [REPORT_COLUMNS] + [_row(r) for r in results]
    widths = [max(len(row[i]) for row in rows) for i in range(len(REPORT_COLUMNS))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def report_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in results:
        w.writerow(_row(r))
    return buf.getvalue()
