"""Binary quadratic optimization testbed.

A quadratic loss L(W) = 0.5 (W - W*)' A (W - W*) is minimized over the
corners {-1,+1}^d by sign-of-hidden-weight dynamics: the hidden vector is
updated with the gradient evaluated at the current corner,
W_{t+1} = W_t - eta * A (sign(W_t) - W*). The dimension is kept small
enough that the true binary optimum is available by exhaustive
enumeration, which makes every other quantity here checkable against an
independent route: the loss increase when one coordinate of a corner is
flipped has the closed form -2*c_i*g_i + 2*A_ii with g = A(c - W*).

All computation in this module is float64.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

MAX_ENUM_DIM = 24
_ENUM_CHUNK = 1 << 16

TOY_SALT = 501


@dataclass(frozen=True)
class QuadraticProblem:
    a: np.ndarray        # symmetric positive-definite [d, d]
    w_star: np.ndarray   # global optimum of the unconstrained loss [d]

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        w_star = np.asarray(self.w_star, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"A must be square, got shape {a.shape}")
        if w_star.shape != (a.shape[0],):
            raise ValueError("W* dimension does not match A")
        if np.abs(a - a.T).max() > 1e-9:
            raise ValueError("A must be symmetric (within 1e-9)")
        if np.linalg.eigvalsh(a).min() <= 0:
            raise ValueError("A must be positive definite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w_star", w_star)

    @property
    def d(self) -> int:
        return self.a.shape[0]


def random_problem(d, seed, w_star_bound=0.95, ridge=0.05):
    """Seeded random instance: A = v v' + ridge*I with standard-normal v,
    W* uniform in (-w_star_bound, w_star_bound)^d.

    The rank-one-plus-ridge form generalizes the strongly coupled
    two-dimensional worked example (one long valley): with isotropic
    full-rank coupling the diagonal dominates and a coordinate's flip cost
    decouples from its divergence rate, washing out the magnitude/importance
    correspondence this testbed exists to exhibit. The default bound keeps
    the optimum strictly inside the hypercube."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(d)
    a = np.outer(v, v) + ridge * np.eye(d)
    w_star = rng.uniform(-w_star_bound, w_star_bound, size=d)
    return QuadraticProblem(a=a, w_star=w_star)


def _check_corner(p, c):
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (p.d,):
        raise ValueError(f"corner shape {c.shape} does not match d={p.d}")
    return c


def corner_loss(p, c) -> float:
    """0.5 (c - W*)' A (c - W*), always >= 0."""
    u = _check_corner(p, c) - p.w_star
    return 0.5 * float(u @ p.a @ u)


def _corner_block(start, stop, d):
    """Corners for integer codes [start, stop): bit (d-1-k) of the code is
    coordinate k, with 0 -> -1 and 1 -> +1. Ascending codes enumerate
    corners in lexicographic order with -1 < +1."""
    codes = np.arange(start, stop, dtype=np.int64)
    shifts = d - 1 - np.arange(d)
    bits = (codes[:, None] >> shifts) & 1
    return bits.astype(np.float64) * 2.0 - 1.0


def brute_force_optimum(p):
    """Exact argmin of corner_loss over all 2^d corners (d <= 24); ties go
    to the lexicographically smallest corner with -1 < +1."""
    if p.d > MAX_ENUM_DIM:
        raise ValueError(f"d={p.d} exceeds enumeration limit {MAX_ENUM_DIM}")
    best_loss = np.inf
    best_corner = None
    total = 1 << p.d
    for start in range(0, total, _ENUM_CHUNK):
        corners = _corner_block(start, min(start + _ENUM_CHUNK, total), p.d)
        u = corners - p.w_star
        losses = 0.5 * np.einsum("ij,ij->i", u @ p.a, u)
        i = int(np.argmin(losses))
        if losses[i] < best_loss:
            best_loss = float(losses[i])
            best_corner = corners[i]
    return best_corner, best_loss


def flip_importance(p, c, i) -> float:
    """Loss increase when coordinate i of corner c is switched to its
    opposite value, by direct evaluation of both corners."""
    c = _check_corner(p, c)
    if not 0 <= i < p.d:
        raise IndexError(f"index {i} out of range for d={p.d}")
    flipped = c.copy()
    flipped[i] = -flipped[i]
    return corner_loss(p, flipped) - corner_loss(p, c)


def flip_importance_closed(p, c, i) -> float:
    """Same quantity via the closed form -2*c_i*g_i + 2*A_ii, g = A(c-W*)."""
    c = _check_corner(p, c)
    if not 0 <= i < p.d:
        raise IndexError(f"index {i} out of range for d={p.d}")
    g_i = float(p.a[i] @ (c - p.w_star))
    return -2.0 * c[i] * g_i + 2.0 * p.a[i, i]


def flip_importance_all(p, c) -> np.ndarray:
    """Closed-form flip importance of every coordinate at corner c."""
    c = _check_corner(p, c)
    g = p.a @ (c - p.w_star)
    return -2.0 * c * g + 2.0 * np.diag(p.a)


@dataclass
class Trajectory:
    eta: float
    steps: int
    snapshots: list          # (step, hidden-weight copy), includes t=0 and t=T
    corner_events: list      # (step, corner copy) whenever the corner changes
    wh_final: np.ndarray

    def corner_at(self, t):
        """Corner occupied when leaving step t (i.e. used for update t)."""
        corner = self.corner_events[0][1]
        for step, c in self.corner_events:
            if step > t:
                break
            corner = c
        return corner


def run_dynamics(p, eta, steps, wh0, record_every=1):
    """Iterate W_{t+1} = W_t - eta * A (sign(W_t) - W*) for `steps` steps.

    sign(0) = +1. The corner gradient is recomputed only when the corner
    changes (it is constant in between, so the trajectory is exactly
    linear on constant-corner stretches). Raises on non-finite state with
    the offending step index.
    """
    if eta < 0:
        raise ValueError("eta must be >= 0")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    w = np.array(wh0, dtype=np.float64).copy()
    if w.shape != (p.d,):
        raise ValueError(f"wh0 shape {w.shape} does not match d={p.d}")

    snapshots = [(0, w.copy())]
    corner = np.where(w >= 0, 1.0, -1.0)
    corner_events = [(0, corner.copy())]
    grad = p.a @ (corner - p.w_star)

    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(steps):
            w -= eta * grad
            if not np.isfinite(w).all():
                raise OverflowError(
                    f"hidden weights left the finite range at step {t + 1}")
            new_corner = np.where(w >= 0, 1.0, -1.0)
            if not np.array_equal(new_corner, corner):
                corner = new_corner
                corner_events.append((t + 1, corner.copy()))
                grad = p.a @ (corner - p.w_star)
            if (t + 1) % record_every == 0 or t + 1 == steps:
                snapshots.append((t + 1, w.copy()))

    return Trajectory(eta=eta, steps=steps, snapshots=snapshots,
                      corner_events=corner_events, wh_final=w)


def most_visited_corner(traj, window_frac=0.1):
    """Corner occupied for the most steps during the trailing fraction of
    the run (ties: the one encountered first)."""
    if traj.steps == 0:
        return traj.corner_events[0][1].copy()
    t_lo = int(np.ceil(traj.steps * (1.0 - window_frac)))
    counts = {}
    order = []
    events = traj.corner_events
    for j, (step, corner) in enumerate(events):
        nxt = events[j + 1][0] if j + 1 < len(events) else traj.steps
        lo = max(step, t_lo)
        if nxt > lo:
            key = tuple(corner)
            if key not in counts:
                counts[key] = 0
                order.append(key)
            counts[key] += nxt - lo
    best = max(order, key=lambda k: counts[k])
    return np.asarray(best, dtype=np.float64)


@dataclass
class ImportanceReport:
    """Per-coordinate divergence/importance table for one problem."""
    problem_id: int
    wh_abs: np.ndarray        # |W_h| at the final step
    wh_norm: np.ndarray       # |W_h| / max |W_h|
    delta_l: np.ndarray       # flip importance at the binary optimum
    delta_l_visited: np.ndarray  # flip importance at the most-visited late corner
    spearman: float           # rank corr. of wh_abs vs delta_l
    spearman_visited: float
    bin_edges: np.ndarray
    bin_means: np.ndarray     # mean delta_l per wh_norm bin (NaN if empty)
    optimum: np.ndarray
    optimum_loss: float

    def rows(self):
        """(i, delta_l, wh_abs, wh_norm) per coordinate."""
        for i in range(len(self.wh_abs)):
            yield (i, float(self.delta_l[i]), float(self.wh_abs[i]),
                   float(self.wh_norm[i]))


def divergence_importance_report(p, eta, steps=None, seed=0, bins=10,
                                 wh0=None, problem_id=0):
    """Run the corner dynamics and relate final hidden-weight magnitudes to
    flip importance at the exhaustively-found binary optimum.

    The importance at the most-visited corner of the last 10% of steps is
    reported alongside, since either reference is defensible. Default step
    budget is 20*d/eta.
    """
    if steps is None:
        steps = int(round(20.0 * p.d / eta))
    if wh0 is None:
        rng = np.random.default_rng([seed, TOY_SALT, problem_id])
        wh0 = rng.uniform(-0.1, 0.1, size=p.d)
    record_every = max(1, steps // 100)
    traj = run_dynamics(p, eta, steps, wh0, record_every=record_every)

    wh_abs = np.abs(traj.wh_final)
    wh_norm = wh_abs / wh_abs.max() if wh_abs.max() > 0 else wh_abs.copy()
    optimum, optimum_loss = brute_force_optimum(p)
    delta_l = flip_importance_all(p, optimum)
    visited = most_visited_corner(traj)
    delta_l_visited = flip_importance_all(p, visited)

    spearman = float(stats.spearmanr(wh_abs, delta_l).statistic)
    spearman_visited = float(stats.spearmanr(wh_abs, delta_l_visited).statistic)

    bin_edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.digitize(wh_norm, bin_edges[1:-1]), 0, bins - 1)
    bin_means = np.full(bins, np.nan)
    for b in range(bins):
        members = delta_l[which == b]
        if len(members):
            bin_means[b] = members.mean()

    return ImportanceReport(
        problem_id=problem_id, wh_abs=wh_abs, wh_norm=wh_norm,
        delta_l=delta_l, delta_l_visited=delta_l_visited,
        spearman=spearman, spearman_visited=spearman_visited,
        bin_edges=bin_edges, bin_means=bin_means,
        optimum=optimum, optimum_loss=optimum_loss,
    )
