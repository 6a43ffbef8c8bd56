"""Exact finite-ring computations used as ground truth for the simulator.

The full product state space of a small ring is enumerated, the jump
generator assembled as a sparse matrix, and exp(tL) evaluated through
uniformization (a Poisson mixture of powers of a stochastic matrix) with
a computable truncation bound.  Ring sizes divisible by 3 are the
asserted-stationarity mode mirroring the finite-interval argument for
the reversed-rate identity; other sizes get diagnostic residuals only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import equilibrium as eq
from .errors import SpaceTooLarge
from .models import ModelSpec

_SIZE_GUARD = 200_000


@dataclass(frozen=True)
class StateSpace:
    """Enumeration of all ring configurations over a finite local alphabet."""

    L: int
    z_lo: int
    z_hi: int
    configs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        W = self.z_hi - self.z_lo + 1
        n = W**self.L
        if n > _SIZE_GUARD:
            raise SpaceTooLarge(f"{W}^{self.L} = {n} states exceeds guard {_SIZE_GUARD}")
        # mixed-radix enumeration, site 0 fastest
        idx = np.arange(n, dtype=np.int64)
        cfg = np.empty((n, self.L), dtype=np.int64)
        for i in range(self.L):
            cfg[:, i] = self.z_lo + (idx // W**i) % W
        object.__setattr__(self, "configs", cfg)
        cfg.setflags(write=False)

    @property
    def W(self) -> int:
        return self.z_hi - self.z_lo + 1

    @property
    def n_states(self) -> int:
        return self.W**self.L

    def encode(self, config: np.ndarray) -> int:
        W = self.W
        idx = 0
        for i in range(self.L - 1, -1, -1):
            idx = idx * W + (int(config[i]) - self.z_lo)
        return idx


@dataclass
class Generator:
    """Sparse ring generator with truncation-leak accounting."""

    space: StateSpace
    Q: sp.csr_matrix
    leak_rate: np.ndarray  # per-state rate mass dropped by the alphabet cap

    def leak_bound(self, mu: np.ndarray) -> float:
        return float(mu @ self.leak_rate)


def _window_for(spec: ModelSpec, theta: float | None, cap: int) -> tuple[int, int]:
    """Local alphabet: full support when finite, else the cap-sized window
    of maximal marginal mass (centered window when theta is unknown)."""
    sup = spec.support
    if sup.finite_below and sup.finite_above:
        return int(sup.omega_min), int(sup.omega_max)
    if theta is None:
        if sup.finite_below:
            return int(sup.omega_min), int(sup.omega_min) + cap - 1
        return -(cap // 2), cap - 1 - cap // 2
    m = eq.build_marginal(spec, theta, eps=1e-14)
    w = m.weights
    if len(w) <= cap:
        return m.z_lo, m.z_hi
    sums = np.convolve(w, np.ones(cap), mode="valid")
    k = int(np.argmax(sums))
    return m.z_lo + k, m.z_lo + k + cap - 1


def build_generator(
    spec: ModelSpec,
    L: int,
    cap: int = 8,
    theta: float | None = None,
    reversed_rates: bool = False,
) -> Generator:
    """Assemble the ring generator over the enumerated space.

    With reversed_rates=True the adjoint-process generator is built
    instead: rates r*(z, y) = r(y, z) driving the reversed move
    (z, y) -> (z+1, y-1).
    """
    z_lo, z_hi = _window_for(spec, theta, cap)
    space = StateSpace(L, z_lo, z_hi)
    cfg = space.configs
    n = space.n_states
    W = space.W

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    leak = np.zeros(n)
    diag = np.zeros(n)

    # rate lookup table over the window
    tab = np.zeros((W, W))
    for zi in range(W):
        for yi in range(W):
            z, y = z_lo + zi, z_lo + yi
            tab[zi, yi] = spec.rate(y, z) if reversed_rates else spec.rate(z, y)

    dz = +1 if reversed_rates else -1  # change applied to site i
    for i in range(L):
        j = (i + 1) % L
        zi = cfg[:, i] - z_lo
        yi = cfg[:, j] - z_lo
        r = tab[zi, yi]
        active = r > 0.0
        stays = active & (zi + dz >= 0) & (zi + dz < W) & (yi - dz >= 0) & (yi - dz < W)
        # target index differs only in the two touched digits
        shift = dz * W**i - dz * W**j
        src = np.nonzero(stays)[0]
        rows.append(src)
        cols.append(src + shift)
        vals.append(r[stays])
        diag[stays] -= r[stays]
        leak[active & ~stays] += r[active & ~stays]

    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    Q = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    return Generator(space, Q, leak)


def product_measure(spec: ModelSpec, theta: float, space: StateSpace) -> np.ndarray:
    """Product of single-site marginals restricted to the space, renormalized."""
    m = eq.build_marginal(spec, theta, eps=1e-14)
    w1 = np.array([m.weight(z) for z in range(space.z_lo, space.z_hi + 1)])
    mu = np.ones(space.n_states)
    for i in range(space.L):
        mu *= w1[space.configs[:, i] - space.z_lo]
    total = mu.sum()
    if total <= 0:
        raise ValueError("product measure has no mass on the capped space")
    return mu / total


def stationarity_residual(
    spec: ModelSpec, theta: float, L: int, cap: int = 8
) -> tuple[float, float]:
    """(||mu^T Q||_inf, leak bound).  Zero residual certifies stationarity
    of the product measure on this ring; with a capped alphabet the
    residual is only meaningful up to the reported leak."""
    gen = build_generator(spec, L, cap=cap, theta=theta)
    mu = product_measure(spec, theta, gen.space)
    residual = float(np.abs(mu @ gen.Q).max())
    return residual, gen.leak_bound(mu)


def uniformized_action(
    Q: sp.csr_matrix, t: float, v: np.ndarray, tol: float = 1e-10, transpose: bool = False
) -> tuple[np.ndarray, float]:
    """(exp(tQ) v, truncation bound) through the Poissonized power series.

    transpose=True evolves a distribution row-vector instead (v exp(tQ)).
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    lam = float(np.abs(Q.diagonal()).max())
    if t == 0.0 or lam == 0.0:
        return v.astype(np.float64).copy(), 0.0
    if lam * t > 500.0:
        raise ValueError(f"uniformization with Lambda*t = {lam * t:.1f} is too stiff")
    P = (sp.eye(Q.shape[0], format="csr") + Q.multiply(1.0 / lam)).tocsr()
    if transpose:
        P = P.T.tocsr()
    vmax = float(np.abs(v).max()) or 1.0
    acc = np.zeros_like(v, dtype=np.float64)
    term = v.astype(np.float64).copy()
    weight = math.exp(-lam * t)
    cum = 0.0
    k = 0
    while True:
        acc += weight * term
        cum += weight
        tail = 1.0 - cum
        if tail * vmax < tol:
            return acc, tail * vmax
        k += 1
        if k > 100_000:
            raise RuntimeError("uniformization failed to converge")
        term = P @ term
        weight *= lam * t / k


def exact_correlation(
    spec: ModelSpec, theta: float, L: int, n: int, t: float, cap: int = 8
) -> float:
    """E(w~_0(0) w~_n(t)) on the ring, via the generator's matrix exponential."""
    gen = build_generator(spec, L, cap=cap, theta=theta)
    mu = product_measure(spec, theta, gen.space)
    cfg = gen.space.configs
    rho = float(mu @ cfg[:, 0])
    v = cfg[:, n % L].astype(np.float64) - rho
    w, _ = uniformized_action(gen.Q, t, v)
    return float(mu @ ((cfg[:, 0] - rho) * w))


@dataclass
class AdjointReport:
    trials: int
    max_discrepancy: float
    min_dirichlet: float

    @property
    def ok(self) -> bool:
        return self.max_discrepancy < 1e-9 and self.min_dirichlet > -1e-12


def adjoint_check(
    spec: ModelSpec, theta: float, L: int, trials: int = 100, seed: int = 0, cap: int = 8
) -> AdjointReport:
    """E(psi L phi) = E(phi L* psi) for random function pairs, with the
    reversed generator built from r*(z, y) = r(y, z)."""
    gen = build_generator(spec, L, cap=cap, theta=theta)
    gen_star = build_generator(spec, L, cap=cap, theta=theta, reversed_rates=True)
    mu = product_measure(spec, theta, gen.space)
    rng = np.random.default_rng(seed)
    n = gen.space.n_states
    worst = 0.0
    min_dirichlet = math.inf
    for _ in range(trials):
        phi = rng.standard_normal(n)
        psi = rng.standard_normal(n)
        lhs = float(mu @ (psi * (gen.Q @ phi)))
        rhs = float(mu @ (phi * (gen_star.Q @ psi)))
        worst = max(worst, abs(lhs - rhs))
        min_dirichlet = min(min_dirichlet, -float(mu @ (phi * (gen.Q @ phi))))
    return AdjointReport(trials, worst, min_dirichlet)


def exact_distribution(
    spec: ModelSpec,
    L: int,
    start: np.ndarray,
    t: float,
    cap: int = 8,
    theta: float | None = None,
    tol: float = 1e-10,
) -> tuple[np.ndarray, float, StateSpace]:
    """Distribution over states at time t from a deterministic start."""
    gen = build_generator(spec, L, cap=cap, theta=theta)
    d0 = np.zeros(gen.space.n_states)
    d0[gen.space.encode(np.asarray(start))] = 1.0
    d, err = uniformized_action(gen.Q, t, d0, tol=tol, transpose=True)
    return d, err, gen.space
