"""Event-driven simulation of a single deposition model on a ring.

Direct-method kinetic Monte Carlo: per-edge rates live in a Fenwick tree,
so selecting the next event and updating the three edges a move touches
both cost O(log L).  Currents are reconstructed from per-column brick
counters plus the stored initial configuration, which keeps all height
bookkeeping in bounded integers.

The same jitted advance routine backs the single-step API and the
replica-parallel batch kernel, so both paths produce bit-identical
trajectories for identical streams.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np
from numba import njit, prange

from ._fenwick import fenwick_add, fenwick_build, fenwick_find, top_bit
from ._rng import exponential, make_state, sample_cdf, uniform01
from .equilibrium import Marginal, build_marginal, sample_configuration
from .errors import DeposimError, WindowWrap
from .models import ModelSpec

#: exact total-rate recompute cadence (events) to bound floating-point drift
RECOMPUTE_EVERY = 1 << 20

# advance status codes
OK = 0
FROZEN = 1
NEED_EXPAND = 2


# --------------------------------------------------------------------------
# rate tables: windowed caches of the pure rate function
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class RateWindow:
    """r(z, y) tabulated on [z_lo, z_hi]^2 for the event kernels.

    Dynamics that would leave the window signal NEED_EXPAND instead of
    evaluating outside the table, so the cache never changes the law.
    """

    z_lo: int
    z_hi: int
    tab: np.ndarray

    @classmethod
    def from_spec(cls, spec: ModelSpec, z_lo: int, z_hi: int) -> "RateWindow":
        n = z_hi - z_lo + 1
        tab = np.empty((n, n), dtype=np.float64)
        for i in range(n):
            for j in range(n):
                tab[i, j] = spec.rate(z_lo + i, z_lo + j)
        tab.setflags(write=False)
        return cls(z_lo, z_hi, tab)

    def expanded(self, spec: ModelSpec, pad: int = 4) -> "RateWindow":
        sup = spec.support
        lo = self.z_lo - pad if not sup.finite_below else int(sup.omega_min)
        hi = self.z_hi + pad if not sup.finite_above else int(sup.omega_max)
        lo = min(lo, self.z_lo)
        hi = max(hi, self.z_hi)
        return RateWindow.from_spec(spec, lo, hi)


def default_window(spec: ModelSpec, marginal: Marginal, pad: int = 8) -> RateWindow:
    """Marginal window padded on the open support sides."""
    sup = spec.support
    lo = marginal.z_lo - (0 if sup.finite_below else pad)
    hi = marginal.z_hi + (0 if sup.finite_above else pad)
    if sup.finite_below:
        lo = int(sup.omega_min)
    if sup.finite_above:
        hi = int(sup.omega_max)
    return RateWindow.from_spec(spec, lo, hi)


# --------------------------------------------------------------------------
# jitted core
# --------------------------------------------------------------------------
@njit(cache=True)
def _build_edge_rates(omega, tab, z_lo):
    L = omega.shape[0]
    out = np.empty(L, dtype=np.float64)
    for i in range(L):
        j = i + 1 if i + 1 < L else 0
        out[i] = tab[omega[i] - z_lo, omega[j] - z_lo]
    return out


@njit(cache=True)
def _exact_rebuild(edge_rates, tree):
    L = edge_rates.shape[0]
    total = 0.0
    for k in range(L + 1):
        tree[k] = 0.0
    for k in range(L):
        fenwick_add(tree, L, k, edge_rates[k])
        total += edge_rates[k]
    return total


@njit(cache=True)
def _ring_advance(
    omega, bricks, edge_rates, tree, tab, z_lo, z_hi, rng_state, meta_f, meta_i, t_end, max_events
):
    """Advance until t_end or max_events.  meta_f = [now, total_rate],
    meta_i = [events_since_rebuild, total_events].  Returns (status, edge)."""
    L = omega.shape[0]
    bitmask = top_bit(L)
    now = meta_f[0]
    total = meta_f[1]
    since = meta_i[0]
    done = np.int64(0)
    last_edge = np.int64(-1)
    while done < max_events:
        if total <= 1e-300:
            total = _exact_rebuild(edge_rates, tree)
            since = 0
            if total <= 0.0:
                meta_f[0] = now
                meta_f[1] = 0.0
                meta_i[0] = since
                meta_i[1] += done
                return FROZEN, last_edge
        dt = exponential(rng_state, total)
        if now + dt > t_end:
            meta_f[0] = t_end
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return OK, last_edge
        now += dt
        u2 = uniform01(rng_state) * total
        i = fenwick_find(tree, L, bitmask, u2)
        if i >= L or edge_rates[i] <= 0.0:
            # floating-point drift put the draw in a dead zone: the draw is
            # a thinning rejection; resync the index exactly and carry on
            total = _exact_rebuild(edge_rates, tree)
            since = 0
            continue
        j = i + 1 if i + 1 < L else 0
        if omega[i] - 1 < z_lo or omega[j] + 1 > z_hi:
            meta_f[0] = now - dt
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return NEED_EXPAND, i
        omega[i] -= 1
        omega[j] += 1
        bricks[i] += 1
        im1 = i - 1 if i > 0 else L - 1
        for k in (im1, i, j):
            kp = k + 1 if k + 1 < L else 0
            newr = tab[omega[k] - z_lo, omega[kp] - z_lo]
            d = newr - edge_rates[k]
            if d != 0.0:
                edge_rates[k] = newr
                fenwick_add(tree, L, k, d)
                total += d
        done += 1
        since += 1
        last_edge = i
        if since >= RECOMPUTE_EVERY:
            total = _exact_rebuild(edge_rates, tree)
            since = 0
    meta_f[0] = now
    meta_f[1] = total
    meta_i[0] = since
    meta_i[1] += done
    return OK, last_edge


@njit(cache=True, inline="always")
def _height_offset(prefix, omega0, site):
    """h_site(0) - h_0(0) from the stored initial slopes (site may be < 0)."""
    L = omega0.shape[0]
    if site > 0:
        return -(prefix[site + 1] - prefix[1])
    if site == 0:
        return np.int64(0)
    return (prefix[L] - prefix[L + site + 1]) + omega0[0]


@njit(cache=True, parallel=True)
def _batch_simulate(
    L,
    tab,
    z_lo,
    z_hi,
    cdf,
    z_lo_m,
    omega_init,
    use_init,
    t_arr,
    sites,
    n_arr,
    rho,
    master_seed,
    streams,
    J_out,
    corr_out,
    w0_out,
    bricks0_out,
    omega_final,
    status_out,
):
    n_reps = streams.shape[0]
    nt = t_arr.shape[0]
    nV = sites.shape[1]
    nn = n_arr.shape[0]
    for r in prange(n_reps):
        rng = make_state(master_seed, streams[r])
        omega = np.empty(L, dtype=np.int64)
        if use_init:
            omega[:] = omega_init
        else:
            for i in range(L):
                omega[i] = z_lo_m + sample_cdf(rng, cdf)
        omega0 = omega.copy()
        prefix = np.zeros(L + 1, dtype=np.int64)
        for i in range(L):
            prefix[i + 1] = prefix[i] + omega0[i]
        bricks = np.zeros(L, dtype=np.int64)
        edge_rates = _build_edge_rates(omega, tab, z_lo)
        tree = fenwick_build(edge_rates)
        meta_f = np.zeros(2, dtype=np.float64)
        meta_i = np.zeros(2, dtype=np.int64)
        meta_f[1] = edge_rates.sum()
        status = OK
        for ti in range(nt):
            status, _ = _ring_advance(
                omega,
                bricks,
                edge_rates,
                tree,
                tab,
                z_lo,
                z_hi,
                rng,
                meta_f,
                meta_i,
                t_arr[ti],
                np.int64(2**62),
            )
            if status == NEED_EXPAND:
                break
            for vi in range(nV):
                s = sites[ti, vi]
                J_out[r, ti, vi] = bricks[s % L] + _height_offset(prefix, omega0, s)
            for ni in range(nn):
                c = 0.0
                for i in range(L):
                    ip = (i + n_arr[ni]) % L
                    c += (omega0[i] - rho) * (omega[ip] - rho)
                corr_out[r, ti, ni] = c / L
            w0_out[r, ti] = omega[0]
            bricks0_out[r, ti] = bricks[0]
        status_out[r] = status
        for i in range(L):
            omega_final[r, i] = omega[i]


# --------------------------------------------------------------------------
# python-facing state
# --------------------------------------------------------------------------
@dataclass
class EventRecord:
    time: float
    edge: int
    moved: bool
    frozen: bool = False


class Observer(Protocol):
    times: Sequence[float]

    def record(self, state: "RingState", t: float) -> None: ...


@dataclass
class CurrentObserver:
    """Records J^(V) for each requested speed at each scheduled time."""

    times: Sequence[float]
    speeds: Sequence[float] = (0.0,)
    rows: list = field(default_factory=list)

    def record(self, state: "RingState", t: float) -> None:
        for v in self.speeds:
            self.rows.append((t, v, current(state, v, t), int(state.bricks[0])))


@dataclass
class ProfileObserver:
    times: Sequence[float]
    profiles: list = field(default_factory=list)

    def record(self, state: "RingState", t: float) -> None:
        self.profiles.append((t, state.omega.copy()))


@dataclass
class RingState:
    """Mutable simulation state of one ring replica."""

    spec: ModelSpec
    L: int
    window: RateWindow
    omega: np.ndarray
    omega0: np.ndarray
    bricks: np.ndarray
    edge_rates: np.ndarray
    tree: np.ndarray
    rng_state: np.ndarray
    _meta_f: np.ndarray
    _meta_i: np.ndarray

    @property
    def now(self) -> float:
        return float(self._meta_f[0])

    @property
    def total_rate(self) -> float:
        return float(self._meta_f[1])

    @property
    def events(self) -> int:
        return int(self.bricks.sum())

    def rebuild_rates(self) -> float:
        """Recompute all edge rates from scratch; returns the max absolute
        difference against the incrementally maintained values."""
        fresh = _build_edge_rates(self.omega, self.window.tab, self.window.z_lo)
        diff = float(np.abs(fresh - self.edge_rates).max())
        self.edge_rates[:] = fresh
        self._meta_f[1] = _exact_rebuild(self.edge_rates, self.tree)
        return diff

    def _expand(self) -> None:
        self.window = self.window.expanded(self.spec)
        self.edge_rates[:] = _build_edge_rates(self.omega, self.window.tab, self.window.z_lo)
        self._meta_f[1] = _exact_rebuild(self.edge_rates, self.tree)

    def step(self) -> EventRecord:
        """Apply a single event; a frozen state returns without advancing."""
        while True:
            status, edge = _ring_advance(
                self.omega,
                self.bricks,
                self.edge_rates,
                self.tree,
                self.window.tab,
                self.window.z_lo,
                self.window.z_hi,
                self.rng_state,
                self._meta_f,
                self._meta_i,
                math.inf,
                np.int64(1),
            )
            if status == NEED_EXPAND:
                self._expand()
                continue
            if status == FROZEN:
                return EventRecord(self.now, -1, False, frozen=True)
            return EventRecord(self.now, int(edge), True)

    def advance(self, t_end: float) -> None:
        """Run all events with time <= t_end (no observers)."""
        if t_end < self.now:
            raise DeposimError(f"t_end={t_end} is before now={self.now}")
        while True:
            status, _ = _ring_advance(
                self.omega,
                self.bricks,
                self.edge_rates,
                self.tree,
                self.window.tab,
                self.window.z_lo,
                self.window.z_hi,
                self.rng_state,
                self._meta_f,
                self._meta_i,
                t_end,
                np.int64(2**62),
            )
            if status == NEED_EXPAND:
                self._expand()
                continue
            if status == FROZEN:
                self._meta_f[0] = t_end
            return


def init(spec: ModelSpec, marginal: Marginal, L: int, seed: int) -> RingState:
    """Fresh ring sampled iid from the marginal, counters zeroed."""
    if L < 2:
        raise DeposimError("ring needs L >= 2")
    rng_state = make_state(seed, 0)
    omega = _sample_with_state(marginal, L, rng_state)
    return from_configuration(spec, omega, marginal, rng_state)


def _sample_with_state(marginal: Marginal, L: int, rng_state: np.ndarray) -> np.ndarray:
    omega = np.empty(L, dtype=np.int64)
    for i in range(L):
        omega[i] = marginal.z_lo + sample_cdf(rng_state, marginal.cdf)
    return omega


def from_configuration(
    spec: ModelSpec,
    omega: np.ndarray,
    marginal: Marginal | None = None,
    rng_state: np.ndarray | None = None,
    seed: int = 0,
    window: RateWindow | None = None,
) -> RingState:
    """Ring state from an explicit starting configuration."""
    omega = np.asarray(omega, dtype=np.int64).copy()
    L = len(omega)
    if window is not None:
        pass
    elif marginal is not None:
        window = default_window(spec, marginal)
    else:
        lo = min(int(omega.min()), 0) - 8
        hi = max(int(omega.max()), 1) + 8
        sup = spec.support
        if sup.finite_below:
            lo = int(sup.omega_min)
        if sup.finite_above:
            hi = int(sup.omega_max)
        window = RateWindow.from_spec(spec, lo, hi)
    if omega.min() < window.z_lo or omega.max() > window.z_hi:
        raise DeposimError("initial configuration outside the rate window")
    if rng_state is None:
        rng_state = make_state(seed, 0)
    edge_rates = _build_edge_rates(omega, window.tab, window.z_lo)
    tree = fenwick_build(edge_rates)
    meta_f = np.array([0.0, edge_rates.sum()], dtype=np.float64)
    meta_i = np.zeros(2, dtype=np.int64)
    return RingState(
        spec=spec,
        L=L,
        window=window,
        omega=omega,
        omega0=omega.copy(),
        bricks=np.zeros(L, dtype=np.int64),
        edge_rates=edge_rates,
        tree=tree,
        rng_state=rng_state,
        _meta_f=meta_f,
        _meta_i=meta_i,
    )


def run_until(state: RingState, t_end: float, observers: Iterable[Observer] = ()) -> RingState:
    """Drive the state to t_end, firing observers at their scheduled times."""
    observers = list(observers)
    schedule: list[tuple[float, Observer]] = []
    for obs in observers:
        times = sorted(obs.times)
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DeposimError("observer times must be strictly increasing")
        schedule.extend((t, obs) for t in times if state.now <= t <= t_end)
    schedule.sort(key=lambda pair: pair[0])
    for t, obs in schedule:
        state.advance(t)
        obs.record(state, t)
    state.advance(t_end)
    return state


def current(state: RingState, V: float, t: float | None = None) -> int:
    """Net growth J^(V)(t) seen by an observer moving at speed V.

    Uses floor(V t) for V >= 0 and ceil(V t) for V < 0; the observation
    window must stay strictly inside half the ring.
    """
    if t is None:
        t = state.now
    site = math.floor(V * t) if V >= 0 else math.ceil(V * t)
    if abs(V) * t >= state.L / 2:
        raise WindowWrap(f"|V| t = {abs(V) * t} reaches L/2 = {state.L / 2}")
    if site == 0:
        return int(state.bricks[0])
    prefix = np.zeros(state.L + 1, dtype=np.int64)
    np.cumsum(state.omega0, out=prefix[1:])
    return int(state.bricks[site % state.L] + _height_offset(prefix, state.omega0, site))


# --------------------------------------------------------------------------
# replica batches
# --------------------------------------------------------------------------
@dataclass
class BatchResult:
    """Replica-indexed observables from a batch run."""

    t_list: np.ndarray
    V_list: np.ndarray
    n_list: np.ndarray
    J: np.ndarray  # (replicas, nt, nV) currents
    corr: np.ndarray  # (replicas, nt, nn) translation-averaged correlations
    w0: np.ndarray  # (replicas, nt) site-0 value at each time
    bricks0: np.ndarray  # (replicas, nt)
    omega_final: np.ndarray  # (replicas, L) int16
    rho: float


def observation_sites(t_list, V_list, L) -> np.ndarray:
    """floor/ceil(V t) with the window-wrap guard enforced."""
    sites = np.empty((len(t_list), len(V_list)), dtype=np.int64)
    for ti, t in enumerate(t_list):
        for vi, v in enumerate(V_list):
            if abs(v) * t >= L / 2:
                raise WindowWrap(f"|V| t = {abs(v) * t} reaches L/2 = {L / 2}")
            sites[ti, vi] = math.floor(v * t) if v >= 0 else math.ceil(v * t)
    return sites


def simulate_batch(
    spec: ModelSpec,
    theta: float,
    L: int,
    t_list: Sequence[float],
    V_list: Sequence[float] = (0.0,),
    n_list: Sequence[int] = (),
    replicas: int = 1000,
    seed: int = 0,
    eps: float = 1e-12,
    omega_init: np.ndarray | None = None,
    max_retries: int = 6,
) -> BatchResult:
    """Independent replicas with per-replica derived streams.

    Replica r uses the stream (seed, r), so results are independent of
    execution order and thread count.
    """
    t_arr = np.asarray(sorted(t_list), dtype=np.float64)
    V_arr = np.asarray(list(V_list), dtype=np.float64)
    n_arr = np.asarray(list(n_list), dtype=np.int64)
    marginal = build_marginal(spec, theta, eps)
    window = default_window(spec, marginal)
    sites = observation_sites(t_arr, V_arr, L)
    rho = float(marginal.weights @ marginal.values)

    if omega_init is not None:
        omega_init = np.asarray(omega_init, dtype=np.int64)
        if len(omega_init) != L:
            raise DeposimError("omega_init length must equal L")
        use_init = True
    else:
        omega_init = np.zeros(L, dtype=np.int64)
        use_init = False

    nt, nV, nn = len(t_arr), len(V_arr), len(n_arr)
    J = np.zeros((replicas, nt, nV), dtype=np.int64)
    corr = np.zeros((replicas, nt, nn), dtype=np.float64)
    w0 = np.zeros((replicas, nt), dtype=np.int64)
    bricks0 = np.zeros((replicas, nt), dtype=np.int64)
    omega_final = np.zeros((replicas, L), dtype=np.int16)
    status = np.zeros(replicas, dtype=np.int64)

    def run_streams(streams, win):
        k = len(streams)
        out = (
            np.zeros((k, nt, nV), dtype=np.int64),
            np.zeros((k, nt, nn), dtype=np.float64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, L), dtype=np.int16),
            np.zeros(k, dtype=np.int64),
        )
        _batch_simulate(
            L,
            win.tab,
            win.z_lo,
            win.z_hi,
            marginal.cdf,
            marginal.z_lo,
            omega_init,
            use_init,
            t_arr,
            sites,
            n_arr,
            rho,
            seed,
            streams,
            *out,
        )
        return out

    pending = np.arange(replicas, dtype=np.int64)
    for attempt in range(max_retries + 1):
        Jr, corr_r, w0r, b0r, of_r, st_r = run_streams(pending, window)
        J[pending], corr[pending], w0[pending] = Jr, corr_r, w0r
        bricks0[pending], omega_final[pending], status[pending] = b0r, of_r, st_r
        pending = pending[st_r == NEED_EXPAND]
        if len(pending) == 0:
            break
        if attempt == max_retries:
            raise DeposimError("rate window kept overflowing; check the model setup")
        window = window.expanded(spec)

    return BatchResult(t_arr, V_arr, n_arr, J, corr, w0, bricks0, omega_final, rho)
