"""Streaming learners with constant step size and tail averaging.

Four algorithms share one driver:

* ``linear_ctd``: linear categorical TD in the CDF parametrization.
* ``ssgd_pmf``: the same semi-gradient with an extra ``C C^T`` factor, i.e.
  plain SSGD on the probability-mass parametrization written in CDF coordinates.
* ``linear_td``: classic linear TD(0) on the value function.
* ``tabular_ctd``: categorical TD on a per-state PMF table.

A batch of transitions averages the per-sample update terms from the same
pre-step parameter before one step is taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bellman_matrices import cached_kernel, projected_bellman_matrix, projected_bellman_triplets, to_cdf
from .categorical_measures import CategoricalGrid, SignedCategoricalMeasure, pushforward_project
from .fixed_point_solver import PsiParam, ThetaParam
from .mdp_model import FeatureMap, MrpModel, SampleStream, Transitions, stationary_distribution

ALGORITHMS = ("linear_ctd", "ssgd_pmf", "linear_td", "tabular_ctd")
DRAW_CHUNK = 512


@dataclass(frozen=True)
class LearnerConfig:
    alpha: float
    T: int
    batch: int = 1
    mode: str = "generative"
    seed: int = 0
    algorithm: str = "linear_ctd"
    stream_id: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ValueError(f"alpha must be finite and non-negative, got {self.alpha}")
        if self.T < 2 or self.T % 2:
            raise ValueError(f"T must be a positive even integer, got {self.T}")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.mode not in ("generative", "markovian"):
            raise ValueError(f"unknown mode {self.mode!r}")


class CompensatedSum:
    """Kahan summation of equally shaped arrays.

    Running sums of iterates grow while each addend stays bounded, which is the
    regime where plain Kahan compensation suffices.
    """

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)
        self.count = 0

    def add(self, x):
        y = x - self.comp
        t = self.total + y
        self.comp = (t - self.total) - y
        self.total = t
        self.count += 1

    def value(self):
        return self.total - self.comp


@dataclass
class LearnerState:
    param: np.ndarray
    t: int = 0
    tail_start: int = 0
    tail: CompensatedSum | None = None
    diverged: bool = False

    def __post_init__(self):
        self.param = np.array(self.param, dtype=float)
        if self.tail is None:
            self.tail = CompensatedSum(self.param.shape)
        if self.t >= self.tail_start:
            self.tail.add(self.param)

    def advance(self, new_param):
        self.param = new_param
        self.t += 1
        if not np.all(np.isfinite(new_param)):
            self.diverged = True
        if self.t >= self.tail_start and not self.diverged:
            self.tail.add(new_param)
        return self

    def tail_average(self):
        if self.tail.count == 0:
            raise ValueError("tail window has not started")
        return self.tail.value() / self.tail.count


class KernelTable:
    """Shift-kernel data for a fixed set of reward levels, stacked for batching."""

    def __init__(self, grid: CategoricalGrid, rewards):
        self.grid = grid
        self.rewards = np.asarray(sorted(set(float(r) for r in rewards)))
        kernels = [cached_kernel(float(r), grid.K, grid.gamma) for r in self.rewards]
        self.lower = np.stack([k.lower for k in kernels])
        self.frac = np.stack([k.frac for k in kernels])
        self.gK = np.stack([k.gK for k in kernels])
        self.b_vec = np.stack([k.b_vec for k in kernels])

    def levels(self, r):
        idx = np.searchsorted(self.rewards, r)
        idx = np.clip(idx, 0, len(self.rewards) - 1)
        if not np.allclose(self.rewards[idx], r, rtol=0, atol=0):
            raise KeyError("reward not present in the kernel table")
        return idx

    def apply_Y(self, Q, level):
        """Columnwise C Gt(r_b) C^{-1} q_b for a K x B block, O(K) per column."""
        K, B = Q.shape
        V = np.diff(Q, axis=0, prepend=0.0)
        Vp = np.vstack([V, np.zeros((1, B))])
        low = self.lower[level].T
        fr = self.frac[level].T
        cols = np.arange(B)
        flat = low * B + cols
        n = (K + 2) * B
        out = np.bincount(flat.ravel(), ((1.0 - fr) * Vp).ravel(), minlength=n)
        out += np.bincount((flat + B).ravel(), (fr * Vp).ravel(), minlength=n)
        out = out[: K * B].reshape(K, B)
        out -= self.gK[level].T * V.sum(axis=0)
        return np.cumsum(out, axis=0)


class OutcomeEngine:
    """Batched CTD directions for samples drawn from a model's finite outcome set.

    A batch only enters the update through how often each outcome occurs, so
    the direction is ``M1 Theta - sum_l N_l Theta Y_l^T - V^T b`` with small
    ``d x d`` moment matrices per reward level ``l``. Each ``Y_l`` has at most
    two nonzeros per column (``G`` has two adjacent nonzeros per column), and
    all levels are applied in one gather/scatter pass over ``O(K)`` entries.
    """

    def __init__(self, m: MrpModel, f: FeatureMap, grid: CategoricalGrid):
        st, _, rw, nx, lv = m.outcome_arrays()
        self.grid = grid
        self.n_out = len(st)
        self.d = d = f.d
        self.L = L = len(m.reward_levels)
        K = grid.K
        Phs, Phn = f.Phi[:, st], f.Phi[:, nx]
        self.P1 = np.einsum("io,jo->oij", Phs, Phs).reshape(self.n_out, d * d)
        self.P2 = np.einsum("io,jo->oij", Phs, Phn).reshape(self.n_out, d * d)
        self.Ph = Phs.T.copy()
        self.sel = np.zeros((L, self.n_out))
        self.sel[lv, np.arange(self.n_out)] = 1.0
        self.b_vec = np.stack([cached_kernel(float(r), K, grid.gamma).b_vec for r in m.reward_levels])
        width = L * d
        src, dst, val = [], [], []
        for l, r in enumerate(m.reward_levels):
            rows, cols, vals = projected_bellman_triplets(float(r), grid)
            for c in range(d):
                col = l * d + c
                src.append(cols * width + col)
                dst.append(rows * d + c)  # levels accumulate into the same K x d slot
                val.append(vals)
        self.src = np.concatenate(src)
        self.dst = np.concatenate(dst)
        self.val = np.concatenate(val)
        self.size = K * d

    def weights(self, outcome):
        return np.bincount(outcome, minlength=self.n_out) / len(outcome)

    def direction(self, Theta, w, pmf=False):
        d, L, K = self.d, self.L, self.grid.K
        M1 = (w @ self.P1).reshape(d, d)
        W = self.sel * w
        N = (W @ self.P2).reshape(L, d, d)
        V = W @ self.Ph
        # Q[:, l*d + a] = Theta^T N_l^T e_a
        Q = Theta.T @ N.transpose(2, 0, 1).reshape(d, L * d)
        YQ = np.bincount(self.dst, self.val * Q.ravel()[self.src], minlength=self.size)
        YQ = YQ.reshape(K, d)
        D = M1 @ Theta - YQ.T - V.T @ self.b_vec
        if pmf:
            D = np.cumsum(np.cumsum(D[:, ::-1], axis=1)[:, ::-1], axis=1)
        return D


def _as_transitions(transition) -> Transitions:
    if isinstance(transition, Transitions):
        return transition
    s, r, s2 = transition
    return Transitions(np.atleast_1d(np.asarray(s, dtype=int)), np.atleast_1d(np.asarray(r, dtype=float)),
                       np.atleast_1d(np.asarray(s2, dtype=int)), None)


def ctd_bracket(Theta, f: FeatureMap, tr: Transitions, table: KernelTable, level=None, dense=False):
    """K x B block of bracket rows phi(s)^T Theta - phi(s')^T Theta Y^T - b^T, transposed."""
    if level is None:
        level = table.levels(tr.r)
    Phs = f.Phi[:, tr.s]
    Phn = f.Phi[:, tr.s_next]
    cur = Theta.T @ Phs
    q = Theta.T @ Phn
    if dense:
        nxt = np.column_stack([projected_bellman_matrix(float(r), table.grid) @ q[:, b]
                               for b, r in enumerate(tr.r)])
    else:
        nxt = table.apply_Y(q, level)
    return cur - nxt - table.b_vec[level].T


def linear_ctd_direction(Theta, f, tr, table, level=None, dense=False):
    br = ctd_bracket(Theta, f, tr, table, level, dense)
    return f.Phi[:, tr.s] @ br.T / br.shape[1]


def ssgd_pmf_direction(Theta, f, tr, table, level=None, dense=False):
    br = ctd_bracket(Theta, f, tr, table, level, dense)
    # row vector times C C^T: reverse cumulative sum, then cumulative sum
    br = np.cumsum(np.cumsum(br[::-1], axis=0)[::-1], axis=0)
    return f.Phi[:, tr.s] @ br.T / br.shape[1]


def linear_td_direction(psi, f, tr, gamma):
    Phs = f.Phi[:, tr.s]
    err = Phs.T @ psi - gamma * (f.Phi[:, tr.s_next].T @ psi) - tr.r
    return Phs @ err / len(err)


def tabular_ctd_direction(P, tr, grid):
    """Average over the batch of p(s) - projected target, scattered to visited states."""
    D = np.zeros_like(P)
    for s, r, s2 in zip(tr.s, tr.r, tr.s_next):
        target = pushforward_project(SignedCategoricalMeasure(grid, P[:, s2]), float(r), grid).p
        D[:, s] += P[:, s] - target
    return D / len(tr.s)


def _table_for(grid, tr):
    return KernelTable(grid, np.unique(tr.r))


def linear_ctd_step(state: LearnerState, transition, f: FeatureMap, grid: CategoricalGrid, alpha: float,
                    dense=False) -> LearnerState:
    tr = _as_transitions(transition)
    with np.errstate(over="ignore", invalid="ignore"):
        D = linear_ctd_direction(state.param, f, tr, _table_for(grid, tr), dense=dense)
        return state.advance(state.param - alpha * D)


def ssgd_pmf_step(state, transition, f, grid, alpha, dense=False):
    tr = _as_transitions(transition)
    with np.errstate(over="ignore", invalid="ignore"):
        D = ssgd_pmf_direction(state.param, f, tr, _table_for(grid, tr), dense=dense)
        return state.advance(state.param - alpha * D)


def linear_td_step(state, transition, f, alpha, gamma):
    tr = _as_transitions(transition)
    with np.errstate(over="ignore", invalid="ignore"):
        return state.advance(state.param - alpha * linear_td_direction(state.param, f, tr, gamma))


def tabular_ctd_step(state, transition, grid, alpha):
    tr = _as_transitions(transition)
    with np.errstate(over="ignore", invalid="ignore"):
        return state.advance(state.param - alpha * tabular_ctd_direction(state.param, tr, grid))


@dataclass
class RunTrace:
    rows: list = field(default_factory=list)

    COLUMNS = ("t", "loss_l2_mu", "loss_w1_mu", "theta_norm", "diverged")

    def append(self, t, l2, w1, norm, diverged):
        self.rows.append((int(t), float(l2), float(w1), float(norm), int(bool(diverged))))

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        lines += [f"{t},{l2!r},{w1!r},{n!r},{dv}" for t, l2, w1, n, dv in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str):
        """Parse ``to_csv`` output; ``#`` lines are skipped, errors cite physical rows."""
        lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1)
                 if ln.strip() and not ln.startswith("#")]
        if not lines or tuple(lines[0][1].split(",")) != cls.COLUMNS:
            row = lines[0][0] if lines else 1
            raise ValueError(f"row {row}: trace header must be " + ",".join(cls.COLUMNS))
        tr = cls()
        for i, ln in lines[1:]:
            parts = ln.split(",")
            if len(parts) != len(cls.COLUMNS):
                raise ValueError(f"row {i}: expected {len(cls.COLUMNS)} fields, got {len(parts)}")
            try:
                tr.append(int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]), int(parts[4]))
            except ValueError as exc:
                raise ValueError(f"row {i}: {exc}") from None
        return tr


@dataclass
class RunResult:
    trace: RunTrace
    param_bar: np.ndarray
    param_last: np.ndarray
    diverged: bool
    converged_at: int | None
    steps: int


class LossMetrics:
    """Loss functionals of a parameter against a reference parameter."""

    def __init__(self, algorithm, m, f, grid, reference):
        self.algorithm = algorithm
        self.mu = stationary_distribution(m)
        self.f = f
        self.grid = grid
        self.ref = None if reference is None else np.asarray(reference, dtype=float)
        self.Sigma = (f.Phi * self.mu) @ f.Phi.T if f is not None else None

    def cdf_gap(self, param):
        delta = param - self.ref
        if self.algorithm == "tabular_ctd":
            return to_cdf(delta)
        return delta.T @ self.f.Phi

    def losses(self, param):
        """(mu-weighted Cramer, mu-weighted W1) distance to the reference."""
        if self.ref is None:
            return math.nan, math.nan
        with np.errstate(over="ignore", invalid="ignore"):
            if self.algorithm == "linear_td":
                gap = self.f.Phi.T @ (param - self.ref)
                return math.sqrt(float(self.mu @ np.abs(gap))), math.sqrt(float(self.mu @ gap**2))
            gap = self.cdf_gap(param)
            iota = self.grid.iota
            l2 = math.sqrt(iota * float(self.mu @ (gap**2).sum(axis=0)))
            w1 = math.sqrt(float(self.mu @ (iota * np.abs(gap).sum(axis=0)) ** 2))
        return l2, w1

    def plotted_loss(self, param):
        """(1 - gamma) * l2^2, which equals (1/K)||theta - theta*||^2 in the I kron Sigma norm."""
        l2, _ = self.losses(param)
        if self.algorithm == "linear_td":
            return l2**2
        return (1.0 - self.grid.gamma) * l2**2


def initial_param(algorithm, f, grid, m=None):
    if algorithm in ("linear_ctd", "ssgd_pmf"):
        return np.zeros((f.d, grid.K))
    if algorithm == "linear_td":
        return np.zeros(f.d)
    return np.full((grid.K, m.S), 1.0 / (grid.K + 1))


def run(config: LearnerConfig, m: MrpModel, f: FeatureMap, grid: CategoricalGrid, checkpoints=(),
        reference=None, param0=None, epsilon=None, divergence=1e6, check_every=10,
        on_checkpoint=None) -> RunResult:
    """Drive one learner for ``config.T`` steps.

    ``checkpoints`` are even iteration counts; at each one the tail average over
    ``[c/2, c]`` is scored against ``reference``. When ``epsilon`` is given the
    run stops at the first checkpoint whose plotted loss is at most ``epsilon``.
    Divergence (non-finite parameter or plotted loss of the current iterate at
    least ``divergence``) is recorded and ends the run early.
    ``on_checkpoint(t, average)`` is called with every scored tail average.
    """
    alg = config.algorithm
    T = config.T
    cps = sorted(set(int(c) for c in checkpoints if 0 < c <= T) | {T})
    if any(c % 2 for c in cps):
        raise ValueError("checkpoints must be even")
    param = initial_param(alg, f, grid, m) if param0 is None else np.array(param0, dtype=float)
    metrics = LossMetrics(alg, m, f, grid, reference)
    trace = RunTrace()
    stream = SampleStream(m, config.seed, config.mode, config.stream_id)
    engine = OutcomeEngine(m, f, grid) if alg in ("linear_ctd", "ssgd_pmf") else None
    pmf = alg == "ssgd_pmf"
    halves = {c // 2 for c in cps}
    # tail averages over [c/2, c] come from differences of one running prefix sum
    prefix = CompensatedSum(param.shape)
    prefix.add(param)
    snaps = {0: (prefix.value(), param.copy())} if 0 in halves else {}
    B = config.batch
    alpha = config.alpha
    converged_at = None
    diverged = False
    avg = None
    buf, pos = None, 0
    t = 0
    loss_scale = 1.0 if alg == "linear_td" else 1.0 - grid.gamma

    for t in range(1, T + 1):
        if config.mode == "generative":
            if buf is None or pos + B > len(buf.s):
                buf, pos = stream.draw(B * DRAW_CHUNK), 0
            sl = slice(pos, pos + B)
            tr = Transitions(buf.s[sl], buf.r[sl], buf.s_next[sl], buf.level[sl], buf.outcome[sl])
            pos += B
        else:
            tr = stream.draw(B)
        with np.errstate(over="ignore", invalid="ignore"):
            if engine is not None:
                param = param - alpha * engine.direction(param, engine.weights(tr.outcome), pmf)
            elif alg == "linear_td":
                param = param - alpha * linear_td_direction(param, f, tr, m.gamma)
            else:
                param = param - alpha * tabular_ctd_direction(param, tr, grid)
        prefix.add(param)
        if t in halves:
            snaps[t] = (prefix.value(), param.copy())
        is_cp = t == cps[0]
        if is_cp or t % check_every == 0:
            norm = float(np.linalg.norm(param))
            blown = not math.isfinite(norm)
            if not blown and metrics.ref is not None:
                blown = not (metrics.plotted_loss(param) < divergence)
            if blown:
                diverged = True
                trace.append(t, math.inf, math.inf, norm, True)
                break
        if is_cp:
            cps.pop(0)
            h = t // 2
            s_h, p_h = snaps.pop(h)
            avg = (prefix.value() - s_h + p_h) / (t - h + 1)
            l2, w1 = metrics.losses(avg)
            if on_checkpoint is not None:
                on_checkpoint(t, avg)
            trace.append(t, l2, w1, norm, False)
            if epsilon is not None and loss_scale * l2**2 <= epsilon:
                converged_at = t
                break

    param_bar = param if diverged else avg
    return RunResult(trace, param_bar, param, diverged, converged_at, t)


def value_of(param, f: FeatureMap, grid: CategoricalGrid | None = None, algorithm="linear_ctd"):
    """Per-state mean return of a parameter of any learner."""
    if isinstance(param, ThetaParam):
        grid, param = param.grid, param.Theta
    if isinstance(param, PsiParam):
        param = param.psi
    if algorithm == "linear_td":
        return f.Phi.T @ param
    if algorithm == "tabular_ctd":
        masses = np.vstack([param, 1.0 - param.sum(axis=0, keepdims=True)])
        return grid.x @ masses
    return 0.5 * grid.upper - grid.iota * (f.Phi.T @ param.sum(axis=1))


def matched_psi0(f: FeatureMap, grid: CategoricalGrid, Theta0=None):
    """psi_0 with V_psi0 equal to V_theta0; needs constants in the feature span."""
    Theta0 = np.zeros((f.d, grid.K)) if Theta0 is None else Theta0
    target = value_of(Theta0, f, grid)
    psi, *_ = np.linalg.lstsq(f.Phi.T, target, rcond=None)
    if np.max(np.abs(f.Phi.T @ psi - target)) > 1e-10:
        raise ValueError("initial values are not representable by the features")
    return psi
