# correspondence_transfer/gmsolver.py

import itertools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .affinity import build_affinity_matrix, stripe_search_space
from .config import SINKHORN_SWEEPS, SOLVER_ALPHA, SOLVER_BETA, Settings, SolverSettings
from .errors import LayoutMismatchError, NumericalError, SolverSizeError
from .models import AffinityMatrix, Assignment, AttributedGraph, CorrespondenceTemplate, SoftAssignment

log = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 8
IMPROVEMENT_EPS = 1e-12


def assignment_objective(K: AffinityMatrix, matches: Sequence[Tuple[int, int]]) -> float:
    """x^T K x of the binary vector selecting the given (probe, gallery) candidates."""
    idx = np.array([i1 * K.n2 + i2 for i1, i2 in matches], dtype=np.int64)
    return float(K.entries[np.ix_(idx, idx)].sum())


def _balance(X: np.ndarray, sweeps: int) -> np.ndarray:
    """Alternating row/column normalisation; surplus gallery capacity goes to virtual slack rows."""
    n1, n2 = X.shape
    X = np.maximum(X, np.finfo(np.float64).tiny)
    if n2 > n1:
        slack = np.full((n2 - n1, n2), X.mean())
        X = np.vstack([X, slack])
    for _ in range(sweeps):
        X = X / X.sum(axis=1, keepdims=True)
        X = X / X.sum(axis=0, keepdims=True)
    return X[:n1]


def solve_relaxed(K: AffinityMatrix, n1: int, n2: int, max_iters: int, tol: float,
                  beta: float = SOLVER_BETA, sweeps: int = SINKHORN_SWEEPS,
                  alpha: float = SOLVER_ALPHA) -> SoftAssignment:
    """Reweighted random walk on K.

    Each step walks on K scaled by its largest row sum, then mixes the walk with a
    jump to the Sinkhorn-balanced reweighting of it: x <- alpha*jump + (1-alpha)*walk.
    The result is L1-normalised.
    """
    A = K.entries
    if np.isnan(A).any():
        raise NumericalError("affinity matrix contains NaN")
    if A.shape != (n1 * n2, n1 * n2):
        raise NumericalError(f"affinity order {A.shape[0]} does not match n1*n2={n1 * n2}")

    degree = A.sum(axis=1).max()
    if degree > 0:
        A = A / degree

    uniform = np.full(n1 * n2, 1.0 / (n1 * n2))
    x = uniform
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        walk = A @ x
        total = walk.sum()
        walk = walk / total if total > 0 else uniform
        jump = np.power(walk / walk.max(), beta)
        jump = _balance(jump.reshape(n1, n2), sweeps).ravel()
        x_next = alpha * jump / jump.sum() + (1.0 - alpha) * walk
        x_next = x_next / x_next.sum()
        step = np.abs(x_next - x).max()
        x = x_next
        if step < tol:
            converged = True
            break

    if not converged:
        log.debug(f"Relaxed solver stopped after {iterations} iterations without reaching tol={tol}")
    return SoftAssignment(weights=x.reshape(n1, n2), iterations_used=iterations, converged=converged)


def discretize(soft: SoftAssignment, K: AffinityMatrix) -> Assignment:
    """Greedy binarisation: largest weight first, ties by lowest (probe, gallery) index."""
    W = soft.weights
    n1, n2 = W.shape
    rows, cols = np.divmod(np.arange(n1 * n2), n2)
    order = np.lexsort((cols, rows, -W.ravel()))

    used_rows, used_cols = set(), set()
    matches: List[Tuple[int, int]] = []
    for flat in order:
        r, c = int(rows[flat]), int(cols[flat])
        if r in used_rows or c in used_cols:
            continue
        matches.append((r, c))
        used_rows.add(r)
        used_cols.add(c)
        if len(matches) == min(n1, n2):
            break

    matches.sort()
    return Assignment(matches=matches, objective=assignment_objective(K, matches))


def brute_force_matching(K: AffinityMatrix, n1: int, n2: int) -> Assignment:
    """Exhaustive search over injections probe -> gallery; ties go to the lexicographically first."""
    if n1 > BRUTE_FORCE_LIMIT or n2 > BRUTE_FORCE_LIMIT:
        raise SolverSizeError(f"brute force is limited to {BRUTE_FORCE_LIMIT}x{BRUTE_FORCE_LIMIT}, got {n1}x{n2}")
    if n1 > n2:
        raise SolverSizeError(f"need n1 <= n2 for a full probe injection, got {n1}x{n2}")

    best: Optional[List[Tuple[int, int]]] = None
    best_value = -np.inf
    for targets in itertools.permutations(range(n2), n1):
        matches = list(enumerate(targets))
        value = assignment_objective(K, matches)
        if value > best_value:
            best, best_value = matches, value
    return Assignment(matches=best, objective=best_value)


def refine_assignment(assignment: Assignment, K: AffinityMatrix) -> Assignment:
    """Best-improvement local search: move a probe to a free gallery node, or swap two galleries.

    Stops when no move raises the objective; ties go to the first move found.
    """
    if not assignment.matches:
        return assignment
    A = (K.entries + K.entries.T) / 2.0
    diag = np.diag(A)
    n2 = K.n2
    probes = np.array([p for p, _ in assignment.matches], dtype=np.int64)
    cols = np.array([g for _, g in assignment.matches], dtype=np.int64)
    m = len(probes)
    upper = np.triu(np.ones((m, m), dtype=bool), k=1)

    moves = 0
    while True:
        sel = probes * n2 + cols
        s = A[:, sel].sum(axis=1)
        removal = 2.0 * s[sel] - diag[sel]
        eps = IMPROVEMENT_EPS * max(1.0, abs(float(s[sel].sum())))

        best_gain, best_move = eps, None
        free = np.setdiff1d(np.arange(n2), cols)
        if free.size:
            cand = probes[:, None] * n2 + free[None, :]
            gain = 2.0 * (s[cand] - A[cand, sel[:, None]]) + diag[cand] - removal[:, None]
            i, f = np.unravel_index(int(np.argmax(gain)), gain.shape)
            if gain[i, f] > best_gain:
                best_gain, best_move = gain[i, f], ("move", int(i), int(free[f]))

        if m >= 2:
            # bi: probe i takes the gallery of probe j; bj is the mirror
            bi = probes[:, None] * n2 + cols[None, :]
            bj = bi.T
            ai, aj = sel[:, None], sel[None, :]
            removed = removal[:, None] + removal[None, :] - 2.0 * A[ai, aj]
            added = (2.0 * (s[bi] - A[bi, ai] - A[bi, aj]) + 2.0 * (s[bj] - A[bj, ai] - A[bj, aj])
                     + diag[bi] + diag[bj] + 2.0 * A[bi, bj])
            gain = np.where(upper, added - removed, -np.inf)
            i, j = np.unravel_index(int(np.argmax(gain)), gain.shape)
            if gain[i, j] > best_gain:
                best_gain, best_move = gain[i, j], ("swap", int(i), int(j))

        if best_move is None:
            break
        kind, i, other = best_move
        if kind == "move":
            cols[i] = other
        else:
            cols[i], cols[other] = cols[other], cols[i]
        moves += 1

    matches = sorted(zip(probes.tolist(), cols.tolist()))
    refined = Assignment(matches=matches, objective=assignment_objective(K, matches))
    log.debug(f"Local search made {moves} moves: {assignment.objective:.6f} -> {refined.objective:.6f}")
    return refined


def _linear_start(W: np.ndarray, K: AffinityMatrix) -> Assignment:
    rows, cols = linear_sum_assignment(W, maximize=True)
    matches = sorted(zip(rows.tolist(), cols.tolist()))
    return Assignment(matches=matches, objective=assignment_objective(K, matches))


def solve_matching(K: AffinityMatrix, solver: SolverSettings) -> Tuple[SoftAssignment, Assignment]:
    """Relaxed solve and greedy discretisation, then local search from three starts.

    The starts are the greedy assignment, the linear assignment maximising the soft
    weights, and the one maximising the node affinities. The best refined objective
    wins; ties keep the earlier start.
    """
    soft = solve_relaxed(K, K.n1, K.n2, max_iters=solver.max_iters, tol=solver.tol,
                         beta=solver.beta, sweeps=solver.sinkhorn_sweeps, alpha=solver.alpha)
    greedy = discretize(soft, K)
    if not solver.refine:
        return soft, greedy

    starts = [
        greedy,
        _linear_start(soft.weights, K),
        _linear_start(np.diag(K.entries).reshape(K.n1, K.n2), K),
    ]
    best: Optional[Assignment] = None
    for start in starts:
        candidate = refine_assignment(start, K)
        if best is None or candidate.objective > best.objective:
            best = candidate
    return soft, best


def match_image_pair(probe: AttributedGraph, gallery: AttributedGraph, settings: Settings,
                     pair_id: str = "") -> CorrespondenceTemplate:
    """Stripe-constrained graph matching; one correspondence per probe patch."""
    if not probe.layout.same_grid(gallery.layout):
        raise LayoutMismatchError(
            f"probe grid {probe.layout.grid_signature()} differs from gallery grid {gallery.layout.grid_signature()}"
        )

    matches: List[Tuple[int, int]] = []
    for stripe in range(probe.layout.n_stripes):
        problem = stripe_search_space(probe.layout, gallery.layout, stripe, settings.patch.expand_rows)
        K = build_affinity_matrix(probe, gallery, problem, settings.affinity.sigma_p, settings.affinity.sigma_f)
        soft, assignment = solve_matching(K, settings.solver)
        log.debug(f"[{pair_id}] stripe {stripe}: {soft.iterations_used} iters, objective {assignment.objective:.4f}")
        matches.extend(
            (int(problem.probe_nodes[i1]), int(problem.gallery_nodes[i2])) for i1, i2 in assignment.matches
        )

    matches.sort()
    return CorrespondenceTemplate(pair_id=pair_id, matches=np.array(matches, dtype=np.int64))
