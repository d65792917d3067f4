"""Finite Markov reward processes with a fixed policy folded in.

Each state owns a finite table of ``(probability, reward, next_state)``
outcomes, so every expectation over a transition is an exact finite sum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True, eq=False)
class MrpModel:
    gamma: float
    outcomes: tuple  # per state: tuple of (prob, reward, next_state)
    mu: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        rows = tuple(tuple((float(p), float(r), int(n)) for p, r, n in table) for table in self.outcomes)
        S = len(rows)
        if S == 0:
            raise ValueError("model needs at least one state")
        for s, table in enumerate(rows):
            if not table:
                raise ValueError(f"state {s} has no outcomes")
            total = sum(p for p, _, _ in table)
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"state {s}: probabilities sum to {total!r}")
            for p, r, n in table:
                if p < 0:
                    raise ValueError(f"state {s}: negative probability {p}")
                if not 0.0 <= r <= 1.0:
                    raise ValueError(f"state {s}: reward {r} outside [0, 1]")
                if not 0 <= n < S:
                    raise ValueError(f"state {s}: next state {n} out of range")
        object.__setattr__(self, "outcomes", rows)
        object.__setattr__(self, "gamma", float(self.gamma))
        flat = [(s, p, r, n) for s, table in enumerate(rows) for p, r, n in table]
        object.__setattr__(self, "_state", np.array([f[0] for f in flat], dtype=int))
        object.__setattr__(self, "_prob", np.array([f[1] for f in flat]))
        object.__setattr__(self, "_reward", np.array([f[2] for f in flat]))
        object.__setattr__(self, "_next", np.array([f[3] for f in flat], dtype=int))
        levels, level_idx = np.unique(self._reward, return_inverse=True)
        object.__setattr__(self, "reward_levels", levels)
        object.__setattr__(self, "_level", level_idx.astype(int))
        width = max(len(t) for t in rows)
        cum = np.ones((S, width))
        offsets = np.zeros(S, dtype=int)
        for s, table in enumerate(rows):
            c = np.cumsum([p for p, _, _ in table])
            c[-1] = 1.0
            cum[s, : len(c)] = c
            if s + 1 < S:
                offsets[s + 1] = offsets[s] + len(table)
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "_n_out", np.array([len(t) for t in rows]))
        if self.mu is not None:
            mu = np.asarray(self.mu, dtype=float)
            if mu.shape != (S,) or np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
                raise ValueError("mu must be a probability vector over states")
            object.__setattr__(self, "mu", mu)

    @property
    def S(self) -> int:
        return len(self.outcomes)

    def transition_matrix(self) -> np.ndarray:
        P = np.zeros((self.S, self.S))
        np.add.at(P, (self._state, self._next), self._prob)
        return P

    def outcome_arrays(self):
        """Flat arrays (state, prob, reward, next_state, reward_level) over all outcomes."""
        return self._state, self._prob, self._reward, self._next, self._level

    def joint_weights(self) -> np.ndarray:
        """mu(s) * P(outcome | s) for every flat outcome."""
        return stationary_distribution(self)[self._state] * self._prob

    def mean_reward(self) -> np.ndarray:
        return np.bincount(self._state, self._prob * self._reward, minlength=self.S)


def _reachable(P, start):
    seen = {start}
    stack = [start]
    while stack:
        s = stack.pop()
        for n in np.nonzero(P[s] > 0)[0]:
            if n not in seen:
                seen.add(int(n))
                stack.append(int(n))
    return seen


def is_irreducible(P) -> bool:
    S = P.shape[0]
    return all(len(_reachable(P, s)) == S for s in range(S))


def stationary_distribution(m: MrpModel) -> np.ndarray:
    """Stationary law of the state chain; a supplied ``mu`` takes precedence."""
    if m.mu is not None:
        return m.mu
    P = m.transition_matrix()
    if not is_irreducible(P):
        raise ValueError("transition matrix is reducible; supply mu explicitly")
    S = m.S
    # replace one balance equation by the normalization constraint
    M = P.T - np.eye(S)
    M[-1, :] = 1.0
    rhs = np.zeros(S)
    rhs[-1] = 1.0
    mu = np.linalg.solve(M, rhs)
    mu += np.linalg.solve(M, rhs - M @ mu)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature matrix Phi (d x S) with one column per state."""

    Phi: np.ndarray
    tabular: bool = False
    check_norm: bool = field(default=True)

    def __post_init__(self):
        Phi = np.array(self.Phi, dtype=float)
        if Phi.ndim != 2:
            raise ValueError("Phi must be a d x S matrix")
        if not np.all(np.isfinite(Phi)):
            raise ValueError("Phi has non-finite entries")
        if self.check_norm and np.linalg.norm(Phi, axis=0).max() > 1.0 + 1e-12:
            raise ValueError("feature vectors must satisfy ||phi(s)|| <= 1")
        Phi.setflags(write=False)
        object.__setattr__(self, "Phi", Phi)

    @property
    def d(self) -> int:
        return self.Phi.shape[0]

    @classmethod
    def normalized(cls, Phi):
        """Rescale all columns by the largest column norm, preserving the span."""
        Phi = np.asarray(Phi, dtype=float)
        return cls(Phi / max(np.linalg.norm(Phi, axis=0).max(), 1e-300))

    @classmethod
    def one_hot(cls, S):
        return cls(np.eye(S), tabular=True)


def feature_covariance(m: MrpModel, f: FeatureMap) -> np.ndarray:
    mu = stationary_distribution(m)
    return (f.Phi * mu) @ f.Phi.T


class Transitions(NamedTuple):
    s: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    level: np.ndarray
    outcome: np.ndarray | None = None


class SampleStream:
    """Seeded transition sampler; one stream per worker.

    The generator is PCG64 seeded from ``SeedSequence([seed, stream_id])``, so
    (seed, stream_id) pairs give independent reproducible streams.
    """

    def __init__(self, model: MrpModel, seed: int, mode="generative", stream_id=0, start_state=None):
        if mode not in ("generative", "markovian"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        self.model = model
        self.mode = mode
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream_id])))
        self._mu_cum = np.cumsum(stationary_distribution(model))
        self._mu_cum[-1] = 1.0
        if start_state is None:
            start_state = int(np.searchsorted(self._mu_cum, self.rng.random(), side="right"))
        self.state = start_state

    def _outcomes(self, s, u):
        m = self.model
        pick = (u[:, None] >= m._cum[s]).sum(axis=1)
        pick = np.minimum(pick, m._n_out[s] - 1)
        return m._offsets[s] + pick

    def draw(self, n=1) -> Transitions:
        m = self.model
        if self.mode == "generative":
            s = np.searchsorted(self._mu_cum, self.rng.random(n), side="right")
            s = np.minimum(s, m.S - 1)
            idx = self._outcomes(s, self.rng.random(n))
        else:
            u = self.rng.random(n)
            idx = np.empty(n, dtype=int)
            s = np.empty(n, dtype=int)
            cur = self.state
            for i in range(n):
                s[i] = cur
                idx[i] = self._outcomes(np.array([cur]), u[i : i + 1])[0]
                cur = int(m._next[idx[i]])
            self.state = cur
        return Transitions(s, m._reward[idx], m._next[idx], m._level[idx], idx)


def draw_transition(stream: SampleStream, m: MrpModel):
    if stream.model is not m:
        raise ValueError("stream was built for a different model")
    t = stream.draw(1)
    return int(t.s[0]), float(t.r[0]), int(t.s_next[0])


def make_experiment_mdp(seed: int, S=3, d=3, gamma=0.75, reward_levels=5, rewards_per_pair=2, max_cond=2.0):
    """Seeded random MRP with rewards on an equispaced grid and full-rank features.

    Feature draws whose condition number exceeds ``max_cond`` are rejected, so
    the smallest eigenvalue of the feature covariance is not vanishingly small.
    """
    if S < 1 or d < 1 or reward_levels < 1:
        raise ValueError("S, d and reward_levels must be positive")
    if d > S:
        raise ValueError("d > S makes the feature covariance singular")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 7919])))
    grid = np.linspace(0.0, 1.0, reward_levels) if reward_levels > 1 else np.array([0.5])
    outcomes = []
    for _ in range(S):
        P = rng.dirichlet(np.ones(S))
        table = []
        for n in range(S):
            k = min(rewards_per_pair, reward_levels)
            levels = rng.choice(reward_levels, size=k, replace=False)
            split = rng.dirichlet(np.ones(k))
            table.extend((P[n] * w, float(grid[l]), n) for w, l in zip(split, levels))
        total = sum(p for p, _, _ in table)
        table = [(p / total, r, n) for p, r, n in table]
        outcomes.append(table)
    # absorb rounding so each row sums to one exactly
    for table in outcomes:
        p0, r0, n0 = table[0]
        table[0] = (1.0 - sum(p for p, _, _ in table[1:]), r0, n0)
    for _ in range(10000):
        Phi = rng.standard_normal((d, S))
        sv = np.linalg.svd(Phi, compute_uv=False)
        if sv.min() > 1e-6 and sv.max() <= max_cond * sv.min():
            break
    else:
        raise ValueError("could not draw a full-rank feature matrix")
    return MrpModel(gamma, outcomes), FeatureMap.normalized(Phi)


def save_model(path, m: MrpModel, f: FeatureMap):
    doc = {
        "gamma": m.gamma,
        "states": m.S,
        "outcomes": [[list(o) for o in table] for table in m.outcomes],
        "Phi": f.Phi.tolist(),
    }
    if m.mu is not None:
        doc["mu"] = m.mu.tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    m = MrpModel(doc["gamma"], doc["outcomes"], doc.get("mu"))
    if doc.get("states", m.S) != m.S:
        raise ValueError(f"{path}: 'states' disagrees with the outcome table")
    return m, FeatureMap(np.asarray(doc["Phi"]))
