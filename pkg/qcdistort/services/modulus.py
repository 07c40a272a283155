"""p-modulus of finite measure families, discrete modulus over ball covers, and grid extremal length.

The convex program  min sum mu_j rho_j^p  s.t.  Lambda rho >= 1, rho >= 0  is
solved with a primal log-barrier Newton method. Newton systems are reduced to
the constraint space, so each step costs one sparse product and one dense
k x k solve. The barrier multipliers lambda = 1/(t s) are dual feasible and
give a certified lower bound at every outer step.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import shapely
from scipy import stats
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from qcdistort.config import Settings
from qcdistort.exceptions import NonConvergenceError
from qcdistort.models.schemas import DeltaExponentDocument, ModulusDocument, PropertySuiteDocument

logger = logging.getLogger(__name__)

_MAX_NEWTON = 200
_MAX_BARRIER = 1e16
_EDGE_FLOOR = 1e-12


# --- Families ---
@dataclass(eq=False)
class DiscreteMeasureFamily:
    measures: sp.csr_matrix
    atom_ids: list[str] = field(default_factory=list)
    positions: np.ndarray | None = None
    tag: str = ""
    oracle: dict = field(default_factory=dict)

    def __post_init__(self):
        m = sp.csr_matrix(self.measures, dtype=float)
        m.eliminate_zeros()
        if m.nnz and (m.data.min() < 0 or not np.all(np.isfinite(m.data))):
            raise ValueError("Measure weights must be finite and nonnegative")
        self.measures = m
        if not self.atom_ids:
            self.atom_ids = [f"a{j}" for j in range(m.shape[1])]
        if len(self.atom_ids) != m.shape[1]:
            raise ValueError(f"Expected {m.shape[1]} atom ids, got {len(self.atom_ids)}")

    @classmethod
    def from_dense(cls, rows, **kwargs) -> "DiscreteMeasureFamily":
        return cls(sp.csr_matrix(np.atleast_2d(np.asarray(rows, dtype=float))), **kwargs)

    @property
    def n_measures(self) -> int:
        return self.measures.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.measures.shape[1]

    @property
    def degenerate_rows(self) -> np.ndarray:
        return np.flatnonzero(self.measures.getnnz(axis=1) == 0)

    @property
    def degenerate(self) -> bool:
        return self.degenerate_rows.size > 0

    def subfamily(self, rows: Sequence[int]) -> "DiscreteMeasureFamily":
        return DiscreteMeasureFamily(self.measures[list(rows)], list(self.atom_ids), self.positions, self.tag)

    def union(self, other: "DiscreteMeasureFamily") -> "DiscreteMeasureFamily":
        if other.n_atoms != self.n_atoms:
            raise ValueError("Families live on different atom sets")
        return DiscreteMeasureFamily(sp.vstack([self.measures, other.measures]).tocsr(),
                                     list(self.atom_ids), self.positions, self.tag)

    def scaled(self, factor: float) -> "DiscreteMeasureFamily":
        if factor <= 0:
            raise ValueError(f"Scale factor must be positive, got {factor}")
        return DiscreteMeasureFamily(self.measures * factor, list(self.atom_ids), self.positions, self.tag)


@dataclass(eq=False)
class BaseMeasure:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("Base measure weights must be finite and nonnegative")
        if not w.sum() > 0:
            raise ValueError("Base measure must have positive total mass")
        self.weights = w


def product_modulus_exact(lambda_e: float, nu_y: float, p: float) -> float:
    """nu(Y) / lambda(E)^(p-1) for the family of horizontal fibres of E x Y."""
    return nu_y / lambda_e ** (p - 1)


def product_family(e_weights, y_weights) -> tuple[DiscreteMeasureFamily, BaseMeasure]:
    """Fibres E x {y} on the product atoms, with base measure lambda x nu."""
    lam = np.asarray(e_weights, dtype=float).reshape(-1)
    nu = np.asarray(y_weights, dtype=float).reshape(-1)
    if lam.size == 0 or nu.size == 0 or lam.sum() <= 0 or np.any(lam < 0) or np.any(nu < 0):
        raise ValueError("Product factors need nonnegative weights with positive mass on E")
    ne, ny = lam.size, nu.size
    rows = np.repeat(np.arange(ny), ne)
    cols = (np.arange(ny)[:, None] * ne + np.arange(ne)[None, :]).reshape(-1)
    data = np.tile(lam, ny)
    family = DiscreteMeasureFamily(
        sp.csr_matrix((data, (rows, cols)), shape=(ny, ne * ny)),
        atom_ids=[f"e{a}:y{b}" for b in range(ny) for a in range(ne)],
        tag="product",
        oracle={"lambda_E": float(lam.sum()), "nu_Y": float(nu.sum())},
    )
    return family, BaseMeasure(np.outer(nu, lam).reshape(-1))


# --- Solver ---
@dataclass
class SolverStep:
    iteration: int
    primal: float
    dual: float
    worst_violation: float


@dataclass(eq=False)
class ModulusResult:
    value: float
    rho: np.ndarray
    active: list[int]
    iterations: int
    certified_gap: float
    p: float
    status: str = "converged"
    dual_bound: float = 0.0
    kkt_residual: float = 0.0
    worst_violation: float = 0.0
    degenerate_row: int | None = None
    history: list[SolverStep] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status in ("converged", "infinite", "trivial")

    def to_document(self) -> dict:
        return ModulusDocument(
            value=self.value,
            p=self.p,
            rho=np.asarray(self.rho, dtype=float).tolist(),
            active=[int(i) for i in self.active],
            iterations=int(self.iterations),
            certified_gap=self.certified_gap,
            dual_bound=self.dual_bound,
            kkt_residual=self.kkt_residual,
            worst_violation=self.worst_violation,
            status=self.status,
            degenerate_row=self.degenerate_row,
        ).model_dump(mode="json")


class ModulusSolver:
    def __init__(self, settings: Settings):
        cfg = settings.modulus_config
        self.feasibility_tol = float(cfg.get("feasibility_tol", 1e-8))
        self.gap_tol = float(cfg.get("gap_tol", 1e-6))
        self.max_iterations = int(cfg.get("max_iterations", 100_000))
        self.barrier_growth = float(cfg.get("barrier_growth", 10.0))
        self.newton_tol = float(cfg.get("newton_tol", 1e-10))
        self.fraction_to_boundary = float(cfg.get("fraction_to_boundary", 0.99))
        self.active_tol = float(cfg.get("active_tol", 1e-6))

    def solve(
        self,
        family: DiscreteMeasureFamily,
        base: BaseMeasure,
        p: float,
        warm_start: np.ndarray | None = None,
        gap_tol: float | None = None,
        feasibility_tol: float | None = None,
    ) -> ModulusResult:
        """Minimize sum mu rho^p over rho >= 0 with every measure giving rho mass at least 1."""
        if not p > 1:
            raise ValueError(f"p must exceed 1 (the p = 1 linear program is not supported), got {p}")
        A = family.measures
        mu = base.weights
        if mu.size != family.n_atoms:
            raise ValueError(f"Base measure has {mu.size} atoms, family has {family.n_atoms}")
        rho = np.zeros(family.n_atoms)
        if family.n_measures == 0:
            return ModulusResult(0.0, rho, [], 0, 0.0, p, status="trivial")
        degenerate = family.degenerate_rows
        if degenerate.size:
            logger.info(f"Family has an all-zero measure (row {degenerate[0]}); modulus is infinite")
            return ModulusResult(math.inf, rho, [], 0, 0.0, p, status="infinite",
                                 dual_bound=math.inf, degenerate_row=int(degenerate[0]))

        # rows charging a zero-weight atom are met at no cost
        free_cols = mu == 0
        free_rows = np.zeros(family.n_measures, dtype=bool)
        if free_cols.any():
            free_rows = A[:, np.flatnonzero(free_cols)].getnnz(axis=1) > 0
            for i in np.flatnonzero(free_rows):
                row = A.getrow(i)
                mask = free_cols[row.indices]
                j = row.indices[mask][np.argmax(row.data[mask])]
                rho[j] = max(rho[j], 1.0 / row.data[mask].max())
        kept_rows = np.flatnonzero(~free_rows)
        if kept_rows.size == 0:
            return ModulusResult(0.0, rho, [], 0, 0.0, p, status="trivial")
        sub = A[kept_rows][:, ~free_cols]
        cols_used = np.flatnonzero(sub.getnnz(axis=0) > 0)
        col_index = np.flatnonzero(~free_cols)[cols_used]
        sub = sub[:, cols_used].tocsr()
        warm = None if warm_start is None else np.asarray(warm_start, dtype=float)[col_index]

        rho_sub, info = self._barrier(
            sub, mu[col_index], p, warm,
            self.gap_tol if gap_tol is None else gap_tol,
            self.feasibility_tol if feasibility_tol is None else feasibility_tol,
        )
        rho[col_index] = rho_sub
        value = float(np.sum(mu * rho**p))
        mass = A @ rho
        active = np.flatnonzero(mass - 1.0 <= self.active_tol * np.maximum(1.0, mass)).tolist()
        result = ModulusResult(
            value=value,
            rho=rho,
            active=active,
            iterations=info["iterations"],
            certified_gap=info["gap"],
            p=p,
            status=info["status"],
            dual_bound=info["dual"],
            kkt_residual=info["kkt"],
            worst_violation=float(max(0.0, 1.0 - mass.min())),
            history=info["history"],
        )
        if result.status != "converged":
            logger.warning(f"Modulus solve stopped with status {result.status} after {result.iterations} steps")
        else:
            logger.debug(f"Modulus p={p}: {value:.10g} in {result.iterations} Newton steps (gap {result.certified_gap:.2e})")
        return result

    def _barrier(self, A: sp.csr_matrix, w: np.ndarray, p: float, warm, gap_tol: float,
                 feasibility_tol: float) -> tuple[np.ndarray, dict]:
        k, n = A.shape
        At = A.T.tocsr()
        if warm is not None and np.all(np.isfinite(warm)):
            rho = np.maximum(warm, 1e-3 * max(warm.mean(), 1e-12))
            rho *= 1.5 / max((A @ rho).min(), 1e-300)
        else:
            rho = np.full(n, 2.0 / (A @ np.ones(n)).min())
        objective = float(np.sum(w * rho**p))
        t = (k + n) / max(objective, 1e-300)
        history: list[SolverStep] = []
        iterations = 0
        gap = math.inf
        dual = -math.inf

        def phi(r: np.ndarray) -> float:
            s = A @ r - 1.0
            if np.any(s <= 0) or np.any(r <= 0):
                return math.inf
            return t * float(np.sum(w * r**p)) - float(np.sum(np.log(s))) - float(np.sum(np.log(r)))

        while True:
            for _ in range(_MAX_NEWTON):
                s = A @ rho - 1.0
                grad = t * p * w * rho ** (p - 1) - At @ (1.0 / s) - 1.0 / rho
                hess_diag = t * p * (p - 1) * w * rho ** (p - 2) + 1.0 / rho**2
                dinv = 1.0 / hess_diag
                reduced = (A @ sp.diags(dinv) @ At).toarray()
                reduced[np.diag_indices(k)] += s**2
                r = dinv * grad
                try:
                    y = scipy.linalg.solve(reduced, A @ r, assume_a="pos")
                except (scipy.linalg.LinAlgError, ValueError):
                    y = scipy.linalg.lstsq(reduced, A @ r)[0]
                delta = -r + dinv * (At @ y)
                decrement = float(-grad @ delta)
                if decrement / 2.0 <= self.newton_tol:
                    break

                step = 1.0
                neg = delta < 0
                if neg.any():
                    step = min(step, self.fraction_to_boundary * float(np.min(-rho[neg] / delta[neg])))
                a_delta = A @ delta
                neg = a_delta < 0
                if neg.any():
                    step = min(step, self.fraction_to_boundary * float(np.min(-s[neg] / a_delta[neg])))
                if decrement >= 0.25:
                    current = phi(rho)
                    while step > 1e-14 and phi(rho + step * delta) > current - 1e-4 * step * decrement:
                        step *= 0.5
                    if step <= 1e-14:
                        break
                rho = rho + step * delta
                iterations += 1
                if iterations >= self.max_iterations:
                    break

            s = A @ rho - 1.0
            lam = 1.0 / (t * s)
            load = At @ lam
            rho_dual = (load / (p * w)) ** (1.0 / (p - 1.0))
            primal = float(np.sum(w * rho**p))
            dual = float(np.sum(lam) - (p - 1.0) * np.sum(w * rho_dual**p))
            gap = max(0.0, (primal - dual) / max(primal, 1e-300))
            history.append(SolverStep(iterations, primal, dual, float(max(0.0, -s.min()))))
            logger.debug(f"barrier t={t:.3e} primal={primal:.12g} dual={dual:.12g} gap={gap:.2e}")
            if gap <= gap_tol and 1.0 / t <= feasibility_tol:
                status = "converged"
                break
            if iterations >= self.max_iterations or t > _MAX_BARRIER:
                status = "max_iterations"
                break
            t *= self.barrier_growth

        return rho, {
            "iterations": iterations,
            "gap": gap,
            "dual": dual,
            "kkt": 1.0 / t,
            "status": status,
            "history": history,
        }


# --- Discrete modulus ---
@dataclass(eq=False)
class BallCover:
    centers: np.ndarray
    radii: np.ndarray
    shrink: float = 0.2
    delta: float | None = None
    metric: str = "chebyshev"

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if len(r) != len(c) or len(c) == 0:
            raise ValueError("A cover needs one radius per ball and at least one ball")
        if not 0 < self.shrink <= 1:
            raise ValueError(f"Shrink factor must lie in (0, 1], got {self.shrink}")
        if np.any(r <= 0):
            raise ValueError("Ball radii must be positive")
        if self.metric not in ("chebyshev", "euclidean"):
            raise ValueError(f"Unsupported metric: {self.metric}")
        if self.delta is None:
            self.delta = float(r.max())
        if r.max() > self.delta * (1 + 1e-12):
            raise ValueError(f"Ball radius {r.max()} exceeds the declared delta {self.delta}")
        self.centers, self.radii = c, r
        self._check_disjoint()

    @property
    def norm_order(self) -> float:
        return math.inf if self.metric == "chebyshev" else 2.0

    def _check_disjoint(self) -> None:
        tree = cKDTree(self.centers)
        reach = 2.0 * self.shrink * float(self.radii.max())
        for i, j in sorted(tree.query_pairs(reach, p=self.norm_order)):
            gap = np.linalg.norm(self.centers[i] - self.centers[j], ord=self.norm_order)
            if gap < self.shrink * (self.radii[i] + self.radii[j]) - 1e-12:
                raise ValueError(f"Shrunken balls {i} and {j} overlap")

    @classmethod
    def dyadic_intervals(cls, level: int, shrink: float = 1.0, lo: float = 0.0, hi: float = 1.0) -> "BallCover":
        side = 2.0 ** (-level)
        count = int(round((hi - lo) / side))
        centers = lo + side * (np.arange(count) + 0.5)
        return cls(centers[:, None], np.full(count, side / 2), shrink, side / 2)

    @classmethod
    def dyadic_squares(cls, level: int, shrink: float = 1.0) -> "BallCover":
        side = 2.0 ** (-level)
        count = 2**level
        ticks = side * (np.arange(count) + 0.5)
        xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
        centers = np.column_stack([xx.ravel(), yy.ravel()])
        return cls(centers, np.full(len(centers), side / 2), shrink, side / 2)

    def incidence(self, sets: Sequence[np.ndarray]) -> sp.csr_matrix:
        """0/1 matrix: set E (row) meets shrunken ball B (column) at an interior point."""
        rows, cols = [], []
        for i, pts in enumerate(sets):
            arr = np.asarray(pts, dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            if arr.shape[1] != self.centers.shape[1]:
                raise ValueError(f"Set {i} has dimension {arr.shape[1]}, cover has {self.centers.shape[1]}")
            tree = cKDTree(arr)
            hits = tree.query_ball_point(self.centers, self.shrink * self.radii * (1 - 1e-12), p=self.norm_order)
            for b, found in enumerate(hits):
                if found:
                    rows.append(i)
                    cols.append(b)
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(len(sets), len(self.radii)))


def discrete_modulus(sets: Sequence[np.ndarray], cover: BallCover, p: float, solver: ModulusSolver) -> ModulusResult:
    """dmod_p: weights v on balls, each set needs total weight 1 on the shrunken balls it meets."""
    family = DiscreteMeasureFamily(cover.incidence(sets), positions=cover.centers)
    result = solver.solve(family, BaseMeasure(np.ones(family.n_atoms)), p)
    if math.isfinite(result.value):
        result.rho = np.minimum(result.rho, 1.0)
        result.value = float(np.sum(result.rho**p))
    return result


@dataclass
class DeltaExponentReport:
    p_grid: list[float]
    deltas: list[float]
    raw_values: list[list[float]]
    values: list[list[float]]
    slopes: list[float]
    estimate: float
    no_transition: bool
    monotonicity_flags: list[tuple[int, int]] = field(default_factory=list)
    bound: float | None = None

    def to_document(self) -> dict:
        return DeltaExponentDocument(
            p_grid=self.p_grid,
            deltas=self.deltas,
            raw_values=self.raw_values,
            values=self.values,
            slopes=self.slopes,
            estimate=self.estimate,
            no_transition=self.no_transition,
            monotonicity_flags=self.monotonicity_flags,
            bound=self.bound,
        ).model_dump(mode="json")


def dmod_vanishing_bound(dim_x: float, inf_dim_e: float) -> float:
    """dim X / inf dim E: above this exponent the discrete modulus vanishes."""
    if inf_dim_e <= 0:
        raise ValueError(f"Fibre dimension must be positive, got {inf_dim_e}")
    return dim_x / inf_dim_e


def delta_exponent(
    sets: Sequence[np.ndarray],
    covers: Sequence[BallCover],
    p_grid: Sequence[float],
    solver: ModulusSolver,
    slope_tol: float = 0.05,
    monotone_tol: float = 1e-6,
) -> DeltaExponentReport:
    """Threshold p where dmod_p stops being bounded away from 0 as delta -> 0."""
    if len(covers) < 3:
        raise ValueError(f"Need at least 3 cover refinement levels, got {len(covers)}")
    ps = sorted(float(p) for p in p_grid)
    if not ps:
        raise ValueError("Empty p grid")
    deltas = [float(c.delta) for c in covers]
    raw = [[discrete_modulus(sets, cover, p, solver).value for cover in covers] for p in ps]

    values = [list(raw[0])]
    flags: list[tuple[int, int]] = []
    for a in range(1, len(ps)):
        row = []
        for level, v in enumerate(raw[a]):
            prev = values[a - 1][level]
            if math.isfinite(v) and math.isfinite(prev) and v > prev * (1 + monotone_tol):
                flags.append((a, level))
            row.append(min(v, prev))
        values.append(row)
    if flags:
        logger.warning(f"dmod is not monotone in p at {len(flags)} (p, level) entries")

    x = np.log(1.0 / np.asarray(deltas))
    slopes = []
    for row in values:
        if not all(math.isfinite(v) and v > 0 for v in row):
            slopes.append(math.inf)
            continue
        slopes.append(float(stats.linregress(x, np.log(row)).slope))

    vanishing = [s < -slope_tol for s in slopes]
    estimate = math.inf
    no_transition = not any(vanishing)
    if not no_transition:
        first = vanishing.index(True)
        if first == 0:
            estimate = ps[0]
        else:
            p0, p1 = ps[first - 1], ps[first]
            s0, s1 = slopes[first - 1], slopes[first]
            estimate = p0 if not math.isfinite(s0) else p0 + (0.0 - s0) / (s1 - s0) * (p1 - p0)
            estimate = min(max(estimate, p0), p1)
    logger.info(f"Delta exponent estimate {estimate} from slopes {[round(s, 4) for s in slopes]}")
    return DeltaExponentReport(ps, deltas, raw, values, slopes, estimate, no_transition, flags)


# --- Property checks ---
def brute_force_modulus(family: DiscreteMeasureFamily, base: BaseMeasure, p: float,
                        pitch: float = 1e-3, upper: float = 2.0) -> float:
    """Grid search over rho in [0, upper]^atoms, refined tenfold around the best point down to `pitch`."""
    n = family.n_atoms
    if n > 4:
        raise ValueError(f"Brute force handles at most 4 atoms, got {n}")
    A = family.measures.toarray()
    mu = base.weights
    lo = np.zeros(n)
    hi = np.full(n, upper)
    step = 0.1
    best_value, best = math.inf, None
    while True:
        axes = [np.arange(lo[j], hi[j] + step / 2, step) for j in range(n)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        feasible = np.all(grid @ A.T >= 1.0 - 1e-12, axis=1)
        if feasible.any():
            values = (grid[feasible] ** p) @ mu
            i = int(np.argmin(values))
            if values[i] < best_value:
                best_value, best = float(values[i]), grid[feasible][i]
        if step <= pitch * (1 + 1e-9) or best is None:
            break
        lo = np.maximum(best - 1.5 * step, 0.0)
        hi = np.minimum(best + 1.5 * step, upper)
        step /= 10.0
    return best_value


@dataclass
class PropertySuiteReport:
    trials: int
    monotonicity_failures: int
    subadditivity_failures: int
    scaling_failures: int
    oracle_trials: int
    oracle_failures: int
    max_oracle_error: float
    max_gap: float

    @property
    def passed(self) -> bool:
        return not (self.monotonicity_failures or self.subadditivity_failures
                    or self.scaling_failures or self.oracle_failures)

    def to_document(self) -> dict:
        return PropertySuiteDocument(
            trials=self.trials,
            monotonicity_failures=self.monotonicity_failures,
            subadditivity_failures=self.subadditivity_failures,
            scaling_failures=self.scaling_failures,
            oracle_trials=self.oracle_trials,
            oracle_failures=self.oracle_failures,
            max_oracle_error=self.max_oracle_error,
            max_gap=self.max_gap,
            passed=self.passed,
        ).model_dump(mode="json")


def _random_family(rng: np.random.Generator, measures: int, atoms: int) -> DiscreteMeasureFamily:
    rows = rng.random((measures, atoms)) * (rng.random((measures, atoms)) < 0.6)
    for i in np.flatnonzero(rows.sum(axis=1) == 0):
        rows[i, rng.integers(atoms)] = rng.random() + 0.1
    return DiscreteMeasureFamily.from_dense(rows)


def property_suite(solver: ModulusSolver, trials: int = 100, oracle_trials: int = 20,
                   seed: int = 0, p: float = 2.0, tol: float = 1e-6) -> PropertySuiteReport:
    """Monotonicity, subadditivity and scaling on random families, and brute-force agreement on tiny ones."""
    rng = np.random.default_rng(seed)
    mono = sub = scale = 0
    max_gap = 0.0
    for _ in range(trials):
        atoms = int(rng.integers(2, 21))
        family = _random_family(rng, int(rng.integers(2, 11)), atoms)
        base = BaseMeasure(rng.random(atoms) + 0.1)
        full = solver.solve(family, base, p)
        max_gap = max(max_gap, full.certified_gap)
        split = int(rng.integers(1, family.n_measures))
        first = solver.solve(family.subfamily(range(split)), base, p)
        second = solver.solve(family.subfamily(range(split, family.n_measures)), base, p)
        if first.value > full.value * (1 + tol) + tol:
            mono += 1
        if full.value > (first.value + second.value) * (1 + tol) + tol:
            sub += 1
        c = float(rng.uniform(0.5, 2.0))
        scaled = solver.solve(family.scaled(c), base, p)
        if abs(scaled.value - full.value * c**-p) > 1e-5 * max(1.0, full.value):
            scale += 1

    oracle_failures = 0
    max_err = 0.0
    for _ in range(oracle_trials):
        atoms = int(rng.integers(1, 5))
        family = _random_family(rng, int(rng.integers(1, 4)), atoms)
        rows = family.measures.toarray()
        # keep rho <= 2 feasible for the grid search
        family = DiscreteMeasureFamily.from_dense(np.maximum(rows, (rows > 0) * 0.5))
        base = BaseMeasure(rng.random(atoms) + 0.1)
        exact = solver.solve(family, base, p).value
        brute = brute_force_modulus(family, base, p)
        err = abs(brute - exact) / max(1.0, exact)
        max_err = max(max_err, err)
        if err > 1e-2:
            oracle_failures += 1
    report = PropertySuiteReport(trials, mono, sub, scale, oracle_trials, oracle_failures, max_err, max_gap)
    logger.info(f"Modulus property suite: passed={report.passed}, max oracle error {max_err:.2e}")
    return report


# --- Grid extremal length ---
@dataclass(eq=False)
class GridRegion:
    """Pixels of pitch 1/resolution meeting a polygon, with their covered area fractions."""
    polygon: shapely.Geometry
    resolution: int
    pixels: np.ndarray
    fractions: np.ndarray

    @property
    def pitch(self) -> float:
        return 1.0 / self.resolution

    @property
    def centers(self) -> np.ndarray:
        return (self.pixels + 0.5) * self.pitch

    @property
    def areas(self) -> np.ndarray:
        return self.fractions * self.pitch**2

    @classmethod
    def from_polygon(cls, polygon, resolution: int) -> "GridRegion":
        if resolution < 1:
            raise ValueError(f"resolution must be at least 1, got {resolution}")
        if polygon.is_empty or polygon.area <= 0:
            raise ValueError("Region must have positive area")
        h = 1.0 / resolution
        x0, y0, x1, y1 = polygon.bounds
        ii = np.arange(math.floor(x0 / h + 1e-9), math.ceil(x1 / h - 1e-9))
        jj = np.arange(math.floor(y0 / h + 1e-9), math.ceil(y1 / h - 1e-9))
        gi, gj = np.meshgrid(ii, jj, indexing="ij")
        gi, gj = gi.ravel(), gj.ravel()
        boxes = shapely.box(gi * h, gj * h, (gi + 1) * h, (gj + 1) * h)
        fractions = shapely.area(shapely.intersection(boxes, polygon)) / h**2
        keep = fractions > 1e-9
        return cls(polygon, resolution, np.column_stack([gi[keep], gj[keep]]), np.minimum(fractions[keep], 1.0))

    @classmethod
    def from_cells(cls, cells: Sequence[tuple[int, int]], resolution: int) -> "GridRegion":
        boxes = [shapely.box(c, r, c + 1, r + 1) for c, r in cells]
        return cls.from_polygon(shapely.union_all(boxes), resolution)


@dataclass(eq=False)
class ExtremalLengthResult:
    value: float
    modulus: float
    rounds: int
    paths: int
    shortest: float
    status: str
    result: ModulusResult | None = None
    trace: list[tuple[int, int, float]] = field(default_factory=list)
    grid: GridRegion | None = None
    bounds: tuple[float, float] = (0.0, math.inf)

    @property
    def rho(self) -> np.ndarray | None:
        return None if self.result is None else self.result.rho


class _PixelGraph:
    def __init__(self, region: GridRegion, ends):
        self.region = region
        h = region.pitch
        pix = region.pixels
        n = len(pix)
        lo = pix.min(axis=0)
        shape = pix.max(axis=0) - lo + 1
        lookup = np.full(shape, -1, dtype=int)
        lookup[pix[:, 0] - lo[0], pix[:, 1] - lo[1]] = np.arange(n)

        def node(i, j):
            ok = (i >= 0) & (j >= 0) & (i < shape[0]) & (j < shape[1])
            out = np.full(i.shape, -1)
            out[ok] = lookup[i[ok], j[ok]]
            return out

        li, lj = pix[:, 0] - lo[0], pix[:, 1] - lo[1]
        src, dst, length = [], [], []
        for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
            nb = node(li + di, lj + dj)
            ok = nb >= 0
            if di and dj:
                # diagonal moves may not cut a corner of the region
                ok &= (node(li + di, lj) >= 0) | (node(li, lj + dj) >= 0)
            a = np.flatnonzero(ok)
            src.append(a)
            dst.append(nb[ok])
            length.append(np.full(a.size, math.hypot(di, dj) * h))
        a = np.concatenate(src)
        b = np.concatenate(dst)
        ell = np.concatenate(length)
        self.src = np.concatenate([a, b])
        self.dst = np.concatenate([b, a])
        self.length = np.concatenate([ell, ell])
        self.n = n

        boxes = shapely.box(pix[:, 0] * h, pix[:, 1] * h, (pix[:, 0] + 1) * h, (pix[:, 1] + 1) * h)
        centers = shapely.points(region.centers)
        self.end_nodes = []
        self.end_costs = []
        for end in ends:
            touch = np.flatnonzero(shapely.intersects(boxes, shapely.buffer(end, 1e-9 * h)))
            if touch.size == 0:
                raise ValueError("Each end must lie on the region boundary")
            self.end_nodes.append(touch)
            self.end_costs.append(shapely.distance(centers[touch], end))

    def shortest(self, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """rho-lengths of the shortest paths from every entry pixel to every exit pixel."""
        weights = np.maximum(0.5 * (rho[self.src] + rho[self.dst]) * self.length, _EDGE_FLOOR)
        graph = sp.csr_matrix((weights, (self.src, self.dst)), shape=(self.n, self.n))
        starts, finishes = self.end_nodes
        dist, pred = dijkstra(graph, directed=True, indices=starts, return_predecessors=True)
        totals = (
            (rho[starts] * self.end_costs[0])[:, None]
            + dist[:, finishes]
            + (rho[finishes] * self.end_costs[1])[None, :]
        )
        return totals, pred

    def path(self, pred: np.ndarray, s: int, e: int) -> tuple[int, ...]:
        start = int(self.end_nodes[0][s])
        nodes = [int(self.end_nodes[1][e])]
        while nodes[-1] != start:
            nodes.append(int(pred[s, nodes[-1]]))
        return tuple(reversed(nodes))

    def path_row(self, path: Sequence[int], s: int, e: int) -> tuple[np.ndarray, np.ndarray]:
        nodes = np.asarray(path)
        steps = np.hypot(*np.diff(self.region.pixels[nodes], axis=0).T) * self.region.pitch
        vals = np.zeros(len(nodes))
        vals[:-1] += steps / 2
        vals[1:] += steps / 2
        vals[0] += self.end_costs[0][s]
        vals[-1] += self.end_costs[1][e]
        order = np.argsort(nodes)
        return nodes[order], vals[order]


def _candidate_pairs(totals: np.ndarray) -> list[tuple[int, int]]:
    """Best exit per entry and best entry per exit, in (length, entry, exit) order."""
    pairs = {(s, int(e)) for s, e in enumerate(np.argmin(totals, axis=1))}
    pairs |= {(int(s), e) for e, s in enumerate(np.argmin(totals, axis=0))}
    return sorted((p for p in pairs if math.isfinite(totals[p])), key=lambda p: (totals[p], p))


def _stack_rows(rows: list[tuple[np.ndarray, np.ndarray]], n: int) -> sp.csr_matrix:
    indptr = np.concatenate([[0], np.cumsum([len(idx) for idx, _ in rows])])
    indices = np.concatenate([idx for idx, _ in rows])
    data = np.concatenate([vals for _, vals in rows])
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), n))


def prolong_density(coarse: GridRegion, rho: np.ndarray, fine: GridRegion) -> np.ndarray:
    """Copy a pixel density onto a grid refined by an integer factor."""
    if fine.resolution % coarse.resolution:
        raise ValueError(f"Resolution {fine.resolution} does not refine {coarse.resolution}")
    factor = fine.resolution // coarse.resolution
    lo = coarse.pixels.min(axis=0)
    shape = coarse.pixels.max(axis=0) - lo + 1
    table = np.full(shape, np.nan)
    table[coarse.pixels[:, 0] - lo[0], coarse.pixels[:, 1] - lo[1]] = rho
    parent = fine.pixels // factor - lo
    ok = np.all((parent >= 0) & (parent < shape), axis=1)
    out = np.full(len(fine.pixels), np.nan)
    out[ok] = table[parent[ok, 0], parent[ok, 1]]
    out[np.isnan(out)] = float(np.mean(rho)) if len(rho) else 1.0
    return out


def extremal_length_grid(
    region,
    resolution: int,
    ends,
    solver: ModulusSolver,
    batch: int = 32,
    path_tol: float = 1e-6,
    max_rounds: int = 400,
    coarse_from: int | None = None,
    initial_rho: np.ndarray | None = None,
    loose_gap: float = 1e-4,
    loose_feasibility: float = 1e-5,
    prune_slack: float = 0.25,
) -> ExtremalLengthResult:
    """1 / m_2 of the grid paths joining the two ends, by constraint generation on shortest paths.

    Every round runs Dijkstra from each entry pixel and adds up to `batch` violated paths.
    Intermediate restricted problems are solved loosely; the last one is solved to the
    solver's own tolerances. With `coarse_from`, the problem is first solved at half the
    resolution (recursively, down to `coarse_from`) and that density seeds the paths.
    """
    grid = region if isinstance(region, GridRegion) else GridRegion.from_polygon(region, resolution)
    if initial_rho is None and coarse_from and resolution % 2 == 0 and resolution // 2 >= coarse_from:
        coarse = extremal_length_grid(
            grid.polygon, resolution // 2, ends, solver, batch, path_tol, max_rounds,
            coarse_from, loose_gap=loose_gap, loose_feasibility=loose_feasibility, prune_slack=prune_slack,
        )
        if coarse.status == "converged":
            initial_rho = prolong_density(coarse.grid, coarse.rho, grid)
    graph = _PixelGraph(grid, ends)
    base = BaseMeasure(grid.areas)
    rho = np.ones(graph.n) if initial_rho is None else np.asarray(initial_rho, dtype=float)
    rows: list[tuple[np.ndarray, np.ndarray]] = []
    keys: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()
    result: ModulusResult | None = None
    trace: list[tuple[int, int, float]] = []
    tight = False

    def solve() -> ModulusResult:
        family = DiscreteMeasureFamily(_stack_rows(rows, graph.n))
        if tight:
            out = solver.solve(family, base, 2.0, warm_start=rho)
        else:
            out = solver.solve(family, base, 2.0, warm_start=rho, gap_tol=loose_gap,
                               feasibility_tol=loose_feasibility)
        if not out.converged:
            raise NonConvergenceError("Modulus solve inside extremal length did not converge", trace)
        return out

    def finish(round_no: int, shortest: float) -> ExtremalLengthResult:
        value = 1.0 / result.value
        lower = shortest**2 / result.value
        upper = 1.0 / result.dual_bound if result.dual_bound > 0 else math.inf
        logger.info(f"Extremal length {value:.6g} at resolution {resolution} after {round_no} rounds "
                    f"and {len(rows)} paths")
        return ExtremalLengthResult(value, result.value, round_no, len(rows), shortest, "converged",
                                    result, trace, grid, (min(lower, value), max(upper, value)))

    for round_no in range(1, max_rounds + 1):
        totals, pred = graph.shortest(rho)
        shortest = float(totals.min())
        trace.append((round_no, len(rows), shortest))
        if not math.isfinite(shortest):
            logger.info("Ends are disconnected inside the region; extremal length is infinite")
            return ExtremalLengthResult(math.inf, 0.0, round_no, len(rows), shortest, "disconnected",
                                        trace=trace, grid=grid)
        if rows and shortest >= 1.0 - path_tol:
            if tight:
                return finish(round_no, shortest)
            tight = True
            result = solve()
            rho = result.rho
            continue

        added = 0
        first_round = not rows
        for s, e in _candidate_pairs(totals):
            if added >= batch:
                break
            if not first_round and totals[s, e] >= 1.0 - path_tol:
                break
            key = graph.path(pred, s, e)
            if key in seen:
                continue
            seen.add(key)
            keys.append(key)
            rows.append(graph.path_row(key, s, e))
            added += 1
        if added == 0:
            if tight:
                return finish(round_no, shortest)
            tight = True

        result = solve()
        rho = result.rho
        if prune_slack is not None and len(rows) > batch:
            mass = _stack_rows(rows, graph.n) @ rho
            keep = mass <= 1.0 + prune_slack
            if not keep.all():
                for key, kept in zip(keys, keep):
                    if not kept:
                        seen.discard(key)
                rows = [r for r, kept in zip(rows, keep) if kept]
                keys = [k for k, kept in zip(keys, keep) if kept]
        logger.debug(f"round {round_no}: {len(rows)} paths, modulus {result.value:.8g}")

    raise NonConvergenceError(f"Extremal length did not converge in {max_rounds} rounds", trace)
