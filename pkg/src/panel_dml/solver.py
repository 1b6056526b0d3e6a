"""L1-penalized quadratic moment solver.

Minimizes (M - G rho)' Omega (M - G rho) + 2 r ||rho||_1 by cyclic coordinate
descent with soft thresholding on the normal-equation pair H = G'Omega G,
c = G'Omega M. Convergence is certified by the KKT stationarity conditions,
not by step size: |[c - H rho]_j| <= r + tol everywhere, with equality and
sign agreement on active coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

FREEZE_DIAG = 1e-12


@dataclass(frozen=True)
class MomentSystem:
    """Quadratic moment-fitting problem. G: (m, p) moment Jacobian, M: (m,)
    target moments, omega: (m, m) PSD weighting or None for identity."""

    G: np.ndarray
    M: np.ndarray
    omega: np.ndarray | None = None

    def __post_init__(self):
        G = np.asarray(self.G, dtype=float)
        M = np.asarray(self.M, dtype=float)
        if G.ndim != 2:
            raise ShapeError(f"G must be 2-d, got shape {G.shape}")
        if M.shape != (G.shape[0],):
            raise ShapeError(f"M has shape {M.shape}, expected ({G.shape[0]},)")
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(M))):
            raise NumericError("moment system contains non-finite values")
        omega = self.omega
        if omega is not None:
            omega = np.asarray(omega, dtype=float)
            if omega.shape != (G.shape[0], G.shape[0]):
                raise ShapeError(f"omega has shape {omega.shape}, expected square of dim {G.shape[0]}")
            if not np.all(np.isfinite(omega)):
                raise NumericError("omega contains non-finite values")
            if np.max(np.abs(omega - omega.T)) > 1e-10:
                raise NumericError("omega is not symmetric to tolerance 1e-10")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "omega", omega)

    @property
    def n_params(self):
        return self.G.shape[1]

    def normal_pair(self):
        """H = G'Omega G, c = G'Omega M and the constant M'Omega M."""
        if self.omega is None:
            H = self.G.T @ self.G
            c = self.G.T @ self.M
            const = float(self.M @ self.M)
        else:
            WG = self.omega @ self.G
            H = self.G.T @ WG
            c = WG.T @ self.M
            const = float(self.M @ self.omega @ self.M)
        return H, c, const

    def criterion(self, rho: np.ndarray) -> float:
        """Unpenalized GMM criterion (M - G rho)' Omega (M - G rho)."""
        resid = self.M - self.G @ np.asarray(rho, dtype=float)
        if self.omega is None:
            return float(resid @ resid)
        return float(resid @ self.omega @ resid)


@dataclass(frozen=True)
class PenalizedSolution:
    rho: np.ndarray
    penalty: float
    objective_value: float
    kkt_violation: float
    n_iter: int
    converged: bool
    frozen: np.ndarray


def soft_threshold(z, r):
    return np.sign(z) * np.maximum(np.abs(z) - r, 0.0)


def _kkt_violation(grad, rho, r, active_mask):
    """Stationarity gap of 0.5 * grad = c - H rho against the subdifferential."""
    viol = np.where(
        rho != 0.0,
        np.abs(grad - r * np.sign(rho)),
        np.maximum(np.abs(grad) - r, 0.0),
    )
    viol = np.where(active_mask, viol, 0.0)
    return float(np.max(viol)) if viol.size else 0.0


def kkt_violation(system: MomentSystem, rho: np.ndarray, r: float) -> float:
    """Independent KKT certificate for a candidate solution."""
    H, c, _ = system.normal_pair()
    active = np.diag(H) >= FREEZE_DIAG
    return _kkt_violation(c - H @ rho, np.asarray(rho, float), r, active)


def _solve_quadratic_l1(H, c, r, init, tol, max_iter):
    """Cyclic coordinate descent on rho'H rho - 2 c'rho + 2 r ||rho||_1.

    Maintains u = H rho so each coordinate update is one axpy. Coordinates
    with H_jj below 1e-12 are frozen at zero. After each full pass the descent
    cycles on the current nonzero set until that set's own KKT gap closes
    (cheap passes; the moment matrices here are poorly conditioned and the
    full-dimension passes dominate cost otherwise). The objective is asserted
    non-increasing across sweeps; every sweep, full or restricted, counts
    toward max_iter.
    """
    p = H.shape[0]
    diag = np.ascontiguousarray(np.diag(H))
    frozen = diag < FREEZE_DIAG
    rho = np.zeros(p) if init is None else np.array(init, dtype=float)
    if rho.shape != (p,):
        raise ShapeError(f"warm start has shape {rho.shape}, expected ({p},)")
    rho[frozen] = 0.0
    u = H @ rho
    unfrozen = ~frozen
    all_idx = np.flatnonzero(unfrozen)

    def sweep(indices):
        nonlocal u
        for j in indices:
            old = rho[j]
            z = c[j] - u[j] + diag[j] * old
            new = soft_threshold(z, r) / diag[j]
            if new != old:
                rho[j] = new
                u += H[:, j] * (new - old)

    def objective(x, ux):
        return float(x @ ux) - 2.0 * float(c @ x) + 2.0 * r * float(np.sum(np.abs(x)))

    obj = objective(rho, u)

    def check_descent():
        nonlocal obj
        new_obj = objective(rho, u)
        assert new_obj <= obj + 1e-9 * (1.0 + abs(obj)), "coordinate descent objective increased"
        obj = new_obj

    def try_polish(viol):
        """Active-set finisher: on a trial support A solve the stationarity
        equations H_AA rho_A = c_A - r sign_A exactly, dropping coordinates
        whose sign flips and adding the worst KKT violator outside A, until
        the full certificate accepts the candidate. CD alone crawls on these
        ill-conditioned moment matrices; every jump is certificate-gated, so
        a failed polish just hands back to the sweeps."""
        nonlocal rho, u, obj
        support = np.flatnonzero((rho != 0.0) & unfrozen)
        signs = np.sign(rho[support])
        for _ in range(3 * p):
            if support.size == 0:
                return viol
            try:
                sol = np.linalg.solve(H[np.ix_(support, support)],
                                      c[support] - r * signs)
            except np.linalg.LinAlgError:
                return viol
            flipped = np.sign(sol) != signs
            if flipped.any():
                support, signs = support[~flipped], signs[~flipped]
                continue
            cand = np.zeros(p)
            cand[support] = sol
            u_cand = H @ cand
            grad = c - u_cand
            outside = unfrozen.copy()
            outside[support] = False
            slack = np.where(outside, np.abs(grad) - r, -np.inf)
            worst = int(np.argmax(slack))
            if slack[worst] > tol:
                support = np.append(support, worst)
                signs = np.append(signs, np.sign(grad[worst]))
                continue
            cand_viol = _kkt_violation(grad, cand, r, unfrozen)
            cand_obj = objective(cand, u_cand)
            if cand_viol <= tol or (cand_obj < obj and cand_viol < viol):
                rho, u, obj = cand, u_cand, cand_obj
                return cand_viol
            return viol
        return viol

    n_iter = 0
    viol = _kkt_violation(c - u, rho, r, unfrozen)
    while viol > tol and n_iter < max_iter:
        sweep(all_idx)
        n_iter += 1
        check_descent()
        for _ in range(8):
            working = (rho != 0.0) & unfrozen
            idx = np.flatnonzero(working)
            if idx.size == 0 or n_iter >= max_iter:
                break
            sweep(idx)
            n_iter += 1
            check_descent()
            if _kkt_violation(c - u, rho, r, working) <= tol:
                break
        viol = _kkt_violation(c - u, rho, r, unfrozen)
        if viol > tol:
            viol = try_polish(viol)
    return rho, viol, n_iter, viol <= tol, frozen


def solve_penalized_gmm(system: MomentSystem, penalty: float, init=None,
                        tol: float = 1e-8, max_iter: int = 100000) -> PenalizedSolution:
    """Solve min_rho (M - G rho)' Omega (M - G rho) + 2 * penalty * ||rho||_1."""
    if penalty < 0:
        raise ConfigError(f"penalty must be nonnegative, got {penalty}")
    H, c, const = system.normal_pair()
    rho, viol, n_iter, converged, frozen = _solve_quadratic_l1(
        H, c, penalty, init, tol, max_iter
    )
    obj = const + float(rho @ (H @ rho)) - 2.0 * float(c @ rho) \
        + 2.0 * penalty * float(np.sum(np.abs(rho)))
    return PenalizedSolution(
        rho=rho, penalty=float(penalty), objective_value=obj,
        kkt_violation=viol, n_iter=n_iter, converged=converged, frozen=frozen,
    )


def solve_path(system: MomentSystem, penalties, tol: float = 1e-8,
               max_iter: int = 100000):
    """Warm-started solutions along a nonincreasing penalty sequence."""
    penalties = [float(r) for r in penalties]
    if not penalties:
        raise ConfigError("empty penalty path")
    for a, b in zip(penalties, penalties[1:]):
        if b > a:
            raise ConfigError("penalty path must be nonincreasing")
    if penalties[-1] < 0:
        raise ConfigError("penalties must be nonnegative")
    H, c, const = system.normal_pair()
    solutions = []
    warm = None
    for r in penalties:
        rho, viol, n_iter, converged, frozen = _solve_quadratic_l1(
            H, c, r, warm, tol, max_iter
        )
        obj = const + float(rho @ (H @ rho)) - 2.0 * float(c @ rho) \
            + 2.0 * r * float(np.sum(np.abs(rho)))
        solutions.append(PenalizedSolution(
            rho=rho, penalty=r, objective_value=obj, kkt_violation=viol,
            n_iter=n_iter, converged=converged, frozen=frozen,
        ))
        warm = rho.copy()
    return solutions


def default_penalty_grid(system: MomentSystem, size: int = 50,
                         min_ratio: float = 1e-4) -> np.ndarray:
    """Log-spaced descending grid from r_max = ||G'Omega M||_inf, the smallest
    penalty with an all-zero solution, down to min_ratio * r_max."""
    _, c, _ = system.normal_pair()
    r_max = float(np.max(np.abs(c))) if c.size else 0.0
    if r_max <= 0.0:
        return np.array([0.0])
    if size < 1:
        raise ConfigError("grid size must be positive")
    if size == 1:
        return np.array([r_max])
    return np.geomspace(r_max, r_max * min_ratio, size)


@dataclass(frozen=True)
class CvResult:
    penalty: float
    grid: np.ndarray
    mean_scores: np.ndarray
    fold_scores: np.ndarray


def cross_validate_penalty(builder, n_units: int, grid, cv_folds: int = 5,
                           seed: int = 0, tol: float = 1e-8,
                           max_iter: int = 100000) -> CvResult:
    """Select a penalty by k-fold cross-validation over estimation units.

    builder(train_idx, val_idx) must return (train_system, val_system) built
    from those unit rows. Each grid point is fit on the training system
    (warm-started along the path) and scored by the unpenalized GMM criterion
    on the validation system; ties break toward the larger penalty.
    """
    grid = np.asarray(list(grid), dtype=float)
    if cv_folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    if n_units < cv_folds:
        raise ConfigError(f"cannot split {n_units} units into {cv_folds} cv folds")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = rng.permutation(n_units)
    base, extra = divmod(n_units, cv_folds)
    fold_scores = np.empty((cv_folds, len(grid)))
    start = 0
    for fold in range(cv_folds):
        size = base + (1 if fold < extra else 0)
        val_idx = np.sort(order[start:start + size])
        train_idx = np.sort(np.concatenate([order[:start], order[start + size:]]))
        start += size
        train_system, val_system = builder(train_idx, val_idx)
        solutions = solve_path(train_system, grid, tol=tol, max_iter=max_iter)
        for gi, sol in enumerate(solutions):
            fold_scores[fold, gi] = val_system.criterion(sol.rho)
    mean_scores = fold_scores.mean(axis=0)
    best = int(np.argmin(mean_scores))  # grid is descending: first min = largest r
    return CvResult(
        penalty=float(grid[best]), grid=grid,
        mean_scores=mean_scores, fold_scores=fold_scores,
    )


def solve_lasso(X, y, penalty: float, init=None, tol: float = 1e-8,
                max_iter: int = 100000) -> PenalizedSolution:
    """Lasso min_b ||y - X b||^2 / n + 2 * penalty * ||b||_1 via the same
    coordinate-descent core (G = X/sqrt(n), M = y/sqrt(n) gives H = X'X/n)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"incompatible lasso shapes X {X.shape}, y {y.shape}")
    n = X.shape[0]
    if n == 0:
        raise ShapeError("empty design")
    scale = 1.0 / np.sqrt(n)
    return solve_penalized_gmm(
        MomentSystem(G=X * scale, M=y * scale), penalty,
        init=init, tol=tol, max_iter=max_iter,
    )


def lasso_system(X, y) -> MomentSystem:
    """MomentSystem whose GMM criterion is mean squared error ||y - Xb||^2/n."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    scale = 1.0 / np.sqrt(n)
    return MomentSystem(G=X * scale, M=y * scale)


@dataclass(frozen=True)
class PenaltySpec:
    """How to pick the L1 penalty: a fixed value, k-fold cross-validation over
    a log-spaced grid anchored at r_max = ||G'Omega M||_inf, or the rate rule
    r = scale * sqrt(log(q*p) / n) that keeps the penalty above the moment
    estimation noise (value holds the scale, default 1)."""

    kind: str = "cv"
    value: float | None = None
    grid_size: int = 50
    grid_min_ratio: float = 1e-4
    cv_folds: int = 5

    def __post_init__(self):
        if self.kind not in ("cv", "fixed", "rate"):
            raise ConfigError(
                f"penalty kind must be 'cv', 'fixed' or 'rate', got {self.kind!r}"
            )
        if self.kind == "fixed" and (self.value is None or self.value < 0):
            raise ConfigError("fixed penalty needs a nonnegative value")
        if self.kind == "rate" and self.value is not None and self.value <= 0:
            raise ConfigError("rate penalty scale must be positive")


def rate_penalty(system: MomentSystem, n_units: int, scale: float = 1.0) -> float:
    """Noise-level penalty sqrt(log(q*p)/n) times scale.

    The moment matrices are averages over n units, so their entrywise error is
    on the order of sqrt(log(dim)/n) after standardization; keeping r at that
    level dominates the noise without drowning the signal.
    """
    if n_units < 1:
        raise ConfigError("rate penalty needs a positive unit count")
    q, p = system.G.shape
    return scale * math.sqrt(math.log(max(q * p, 2)) / n_units)


def fit_penalized(system: MomentSystem, spec: PenaltySpec, builder=None,
                  n_units: int | None = None, seed: int = 0,
                  tol: float = 1e-8, max_iter: int = 100000):
    """Select a penalty per the spec and solve the full system at it.

    Cross-validated selection warm-starts down the grid to the chosen point.
    Returns (PenalizedSolution, CvResult or None).
    """
    if spec.kind == "fixed":
        return solve_penalized_gmm(system, spec.value, tol=tol, max_iter=max_iter), None
    if spec.kind == "rate":
        if n_units is None:
            raise ConfigError("rate penalty needs n_units")
        r = rate_penalty(system, n_units, 1.0 if spec.value is None else spec.value)
        return solve_penalized_gmm(system, r, tol=tol, max_iter=max_iter), None
    if builder is None or n_units is None:
        raise ConfigError("cross-validated penalty needs a builder and n_units")
    grid = default_penalty_grid(system, spec.grid_size, spec.grid_min_ratio)
    cv = cross_validate_penalty(builder, n_units, grid, cv_folds=spec.cv_folds,
                                seed=seed, tol=tol, max_iter=max_iter)
    stop = int(np.flatnonzero(grid == cv.penalty)[0])
    solution = solve_path(system, grid[:stop + 1], tol=tol, max_iter=max_iter)[-1]
    return solution, cv
