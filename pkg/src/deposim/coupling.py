"""Coupled dynamics: ordered pairs, second-class particles and walkers.

Three engines share one clock discipline:

* the generic edge-based basic coupling (any rate function): per edge the
  three channels "upper lays alone", "lower lays alone", "both lay"; the
  lone-lay channels move second-class particles.  A single discrepancy is
  the defect tracer; with a positive density of discrepancies an
  auxiliary walker rides them, moving with a uniformly chosen particle.
* sitewise sandwich couplings for BL and totally asymmetric ZR, which tie
  the defect tracer to the walker whenever they share a site so that the
  order (tracer below the upper walker, above the lower one) is exact.
* a sitewise pair coupling preserving configuration order and tracer
  order simultaneously (two copies, two tracers).

All tracers carry unwrapped integer positions so displacement laws stay
meaningful on the ring.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit, prange

from ._fenwick import fenwick_add, fenwick_build, fenwick_find, top_bit
from ._rng import exponential, make_state, sample_cdf, uniform01
from .equilibrium import Marginal, build_marginal
from .errors import (
    DeposimError,
    NegativeChannelRate,
    StochasticOrderViolation,
    Unsupported,
)
from .models import ModelSpec
from .dynamics import FROZEN, NEED_EXPAND, OK, RateWindow, default_window

DEFECT = 0
SWARM = 1

NEG_RATE = 3  # advance status: a channel rate was genuinely negative

_NEG_TOL = 1e-12


# ==========================================================================
# generic edge-based basic coupling
# ==========================================================================
@njit(cache=True, inline="always")
def _channels(tab, z_lo, ei, ej, zi, zj):
    """Table-1 channel rates at one edge: (upper alone, lower alone, joint)."""
    joint = tab[ei - z_lo, zj - z_lo]
    ch1 = tab[zi - z_lo, zj - z_lo] - joint
    ch2 = tab[ei - z_lo, ej - z_lo] - joint
    return ch1, ch2, joint


@njit(cache=True)
def _coupled_edge_rates(eta, zeta, tab, z_lo, viol):
    L = eta.shape[0]
    out = np.empty(L, dtype=np.float64)
    for i in range(L):
        j = i + 1 if i + 1 < L else 0
        ch1, ch2, joint = _channels(tab, z_lo, eta[i], eta[j], zeta[i], zeta[j])
        if ch1 < -_NEG_TOL or ch2 < -_NEG_TOL:
            viol[1] += 1
        out[i] = max(ch1, 0.0) + max(ch2, 0.0) + joint
    return out


@njit(cache=True)
def _coupled_advance(
    eta,
    zeta,
    bricks_eta,
    bricks_zeta,
    j2nd,
    edge_rates,
    tree,
    tab,
    z_lo,
    z_hi,
    rng_state,
    meta_f,
    meta_i,
    mode,
    qs,
    viol,
    t_end,
    max_events,
):
    """Advance the coupled pair.  qs = [q_site, q_pos, s_site, s_pos].
    Returns (status, edge, channel)."""
    L = eta.shape[0]
    bitmask = top_bit(L)
    now = meta_f[0]
    total = meta_f[1]
    since = meta_i[0]
    done = np.int64(0)
    last_edge = np.int64(-1)
    last_channel = np.int64(-1)
    while done < max_events:
        if total <= 1e-300:
            total = 0.0
            for k in range(L + 1):
                tree[k] = 0.0
            fresh = _coupled_edge_rates(eta, zeta, tab, z_lo, viol)
            for k in range(L):
                edge_rates[k] = fresh[k]
                fenwick_add(tree, L, k, fresh[k])
                total += fresh[k]
            since = 0
            if total <= 0.0:
                meta_f[0] = now
                meta_f[1] = 0.0
                meta_i[0] = since
                meta_i[1] += done
                return FROZEN, last_edge, last_channel
        dt = exponential(rng_state, total)
        if now + dt > t_end:
            meta_f[0] = t_end
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return OK, last_edge, last_channel
        now += dt
        u2 = uniform01(rng_state) * total
        i = fenwick_find(tree, L, bitmask, u2)
        if i >= L or edge_rates[i] <= 0.0:
            total = 0.0
            for k in range(L + 1):
                tree[k] = 0.0
            fresh = _coupled_edge_rates(eta, zeta, tab, z_lo, viol)
            for k in range(L):
                edge_rates[k] = fresh[k]
                fenwick_add(tree, L, k, fresh[k])
                total += fresh[k]
            since = 0
            continue
        j = i + 1 if i + 1 < L else 0
        ch1, ch2, joint = _channels(tab, z_lo, eta[i], eta[j], zeta[i], zeta[j])
        if ch1 < -_NEG_TOL or ch2 < -_NEG_TOL:
            viol[1] += 1
            meta_f[0] = now - dt
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return NEG_RATE, i, np.int64(-1)
        ch1 = max(ch1, 0.0)
        ch2 = max(ch2, 0.0)
        u = uniform01(rng_state) * (ch1 + ch2 + joint)
        move_eta = False
        move_zeta = False
        if u < ch1:
            channel = 0  # upper lays alone; second-class particle i -> j
            move_zeta = True
        elif u < ch1 + ch2:
            channel = 1  # lower lays alone; second-class particle j -> i
            move_eta = True
        else:
            channel = 2
            move_eta = True
            move_zeta = True
        # window check before applying
        if move_zeta and (zeta[i] - 1 < z_lo or zeta[j] + 1 > z_hi):
            meta_f[0] = now - dt
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return NEED_EXPAND, i, channel
        if move_eta and (eta[i] - 1 < z_lo or eta[j] + 1 > z_hi):
            meta_f[0] = now - dt
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return NEED_EXPAND, i, channel
        if channel == 0:
            n_disc = zeta[i] - eta[i]
            zeta[i] -= 1
            zeta[j] += 1
            bricks_zeta[i] += 1
            j2nd[i] += 1
            if mode == DEFECT:
                if qs[0] == i:
                    qs[0] = j
                    qs[1] += 1
            else:
                if qs[2] == i and uniform01(rng_state) * n_disc < 1.0:
                    qs[2] = j
                    qs[3] += 1
        elif channel == 1:
            n_disc = zeta[j] - eta[j]
            eta[i] -= 1
            eta[j] += 1
            bricks_eta[i] += 1
            j2nd[i] -= 1
            if mode == DEFECT:
                if qs[0] == j:
                    qs[0] = i
                    qs[1] -= 1
            else:
                if qs[2] == j and uniform01(rng_state) * n_disc < 1.0:
                    qs[2] = i
                    qs[3] -= 1
        else:
            eta[i] -= 1
            eta[j] += 1
            zeta[i] -= 1
            zeta[j] += 1
            bricks_eta[i] += 1
            bricks_zeta[i] += 1
        if zeta[i] < eta[i] or zeta[j] < eta[j]:
            viol[0] += 1
        if mode == SWARM and zeta[qs[2]] - eta[qs[2]] < 1:
            viol[2] += 1
        im1 = i - 1 if i > 0 else L - 1
        for k in (im1, i, j):
            kp = k + 1 if k + 1 < L else 0
            c1, c2, cj = _channels(tab, z_lo, eta[k], eta[kp], zeta[k], zeta[kp])
            newr = max(c1, 0.0) + max(c2, 0.0) + cj
            d = newr - edge_rates[k]
            if d != 0.0:
                edge_rates[k] = newr
                fenwick_add(tree, L, k, d)
                total += d
        done += 1
        since += 1
        last_edge = i
        last_channel = channel
        if since >= (1 << 20):
            total = 0.0
            for k in range(L + 1):
                tree[k] = 0.0
            for k in range(L):
                fenwick_add(tree, L, k, edge_rates[k])
                total += edge_rates[k]
            since = 0
    meta_f[0] = now
    meta_f[1] = total
    meta_i[0] = since
    meta_i[1] += done
    return OK, last_edge, last_channel


@dataclass
class CoupledEvent:
    time: float
    edge: int
    channel: int  # 0 upper-alone, 1 lower-alone, 2 joint
    frozen: bool = False


@dataclass
class CoupledState:
    """Ordered pair sharing one clock, with discrepancy bookkeeping."""

    spec: ModelSpec
    L: int
    window: RateWindow
    eta: np.ndarray
    zeta: np.ndarray
    bricks_eta: np.ndarray
    bricks_zeta: np.ndarray
    j2nd: np.ndarray
    edge_rates: np.ndarray
    tree: np.ndarray
    rng_state: np.ndarray
    _meta_f: np.ndarray
    _meta_i: np.ndarray
    mode: int
    qs: np.ndarray  # [q_site, q_pos, s_site, s_pos]
    viol: np.ndarray  # [order violations, negative channel rates, lost walker]

    @property
    def now(self) -> float:
        return float(self._meta_f[0])

    @property
    def total_rate(self) -> float:
        return float(self._meta_f[1])

    @property
    def discrepancies(self) -> int:
        return int((self.zeta - self.eta).sum())

    @property
    def q_position(self) -> int:
        return int(self.qs[1])

    @property
    def s_position(self) -> int:
        return int(self.qs[3])

    def check_health(self) -> None:
        if self.viol[0]:
            raise DeposimError(f"sitewise order broken {self.viol[0]} times")
        if self.viol[1]:
            raise NegativeChannelRate(
                f"{self.viol[1]} negative channel rates (monotonicity violated)"
            )

    def _expand(self) -> None:
        self.window = self.window.expanded(self.spec)
        fresh = _coupled_edge_rates(self.eta, self.zeta, self.window.tab, self.window.z_lo, self.viol)
        self.edge_rates[:] = fresh
        self.tree[:] = fenwick_build(fresh)
        self._meta_f[1] = fresh.sum()

    def step(self) -> CoupledEvent:
        while True:
            status, edge, channel = _coupled_advance(
                self.eta,
                self.zeta,
                self.bricks_eta,
                self.bricks_zeta,
                self.j2nd,
                self.edge_rates,
                self.tree,
                self.window.tab,
                self.window.z_lo,
                self.window.z_hi,
                self.rng_state,
                self._meta_f,
                self._meta_i,
                self.mode,
                self.qs,
                self.viol,
                math.inf,
                np.int64(1),
            )
            if status == NEED_EXPAND:
                self._expand()
                continue
            if status == NEG_RATE:
                raise NegativeChannelRate(f"negative channel rate at edge {edge}")
            if status == FROZEN:
                return CoupledEvent(self.now, -1, -1, frozen=True)
            return CoupledEvent(self.now, int(edge), int(channel))

    def advance(self, t_end: float) -> None:
        if t_end < self.now:
            raise DeposimError(f"t_end={t_end} is before now={self.now}")
        while True:
            status, _, _ = _coupled_advance(
                self.eta,
                self.zeta,
                self.bricks_eta,
                self.bricks_zeta,
                self.j2nd,
                self.edge_rates,
                self.tree,
                self.window.tab,
                self.window.z_lo,
                self.window.z_hi,
                self.rng_state,
                self._meta_f,
                self._meta_i,
                self.mode,
                self.qs,
                self.viol,
                t_end,
                np.int64(2**62),
            )
            if status == NEED_EXPAND:
                self._expand()
                continue
            if status == NEG_RATE:
                raise NegativeChannelRate("negative channel rate during advance")
            if status == FROZEN:
                self._meta_f[0] = t_end
            return


def basic_step(coupled: CoupledState) -> CoupledEvent:
    """One event of the basic coupling (any mode)."""
    return coupled.step()


def swarm_step(coupled: CoupledState) -> CoupledEvent:
    """One event with walker bookkeeping; requires swarm mode."""
    if coupled.mode != SWARM:
        raise DeposimError("swarm_step needs a state built by two_density_init")
    return coupled.step()


def _fresh_coupled(
    spec: ModelSpec,
    eta: np.ndarray,
    zeta: np.ndarray,
    window: RateWindow,
    rng_state: np.ndarray,
    mode: int,
    qs: Sequence[int],
) -> CoupledState:
    if (zeta < eta).any():
        raise StochasticOrderViolation("initial pair not ordered")
    L = len(eta)
    viol = np.zeros(3, dtype=np.int64)
    edge_rates = _coupled_edge_rates(eta, zeta, window.tab, window.z_lo, viol)
    tree = fenwick_build(edge_rates)
    return CoupledState(
        spec=spec,
        L=L,
        window=window,
        eta=eta,
        zeta=zeta,
        bricks_eta=np.zeros(L, dtype=np.int64),
        bricks_zeta=np.zeros(L, dtype=np.int64),
        j2nd=np.zeros(L, dtype=np.int64),
        edge_rates=edge_rates,
        tree=tree,
        rng_state=rng_state,
        _meta_f=np.array([0.0, edge_rates.sum()]),
        _meta_i=np.zeros(2, dtype=np.int64),
        mode=mode,
        qs=np.array(qs, dtype=np.int64),
        viol=viol,
    )


def attach_defect(
    spec: ModelSpec,
    omega: np.ndarray | None = None,
    marginal: Marginal | None = None,
    L: int | None = None,
    seed: int = 0,
) -> CoupledState:
    """Lower copy omega, upper copy omega + delta_0, tracer at the origin.

    When omega is sampled here and the support is bounded above, site 0 is
    resampled conditioned on omega_0 < omega_max so the defect fits.
    """
    rng_state = make_state(seed, 0)
    sup = spec.support
    if omega is None:
        if marginal is None or L is None:
            raise DeposimError("attach_defect needs omega or (marginal, L)")
        omega = np.empty(L, dtype=np.int64)
        for i in range(L):
            omega[i] = marginal.z_lo + sample_cdf(rng_state, marginal.cdf)
        if sup.finite_above:
            guard = 0
            while omega[0] >= sup.omega_max:
                omega[0] = marginal.z_lo + sample_cdf(rng_state, marginal.cdf)
                guard += 1
                if guard > 10_000:
                    raise DeposimError("cannot resample origin below omega_max")
    else:
        omega = np.asarray(omega, dtype=np.int64).copy()
        if sup.finite_above and omega[0] >= sup.omega_max:
            raise DeposimError("omega_0 at omega_max; defect does not fit")
    zeta = omega.copy()
    zeta[0] += 1
    if marginal is not None:
        window = default_window(spec, marginal)
        if zeta.max() > window.z_hi:
            window = window.expanded(spec)
    else:
        lo = min(int(omega.min()), 0) - 8
        hi = max(int(zeta.max()), 1) + 8
        if sup.finite_below:
            lo = int(sup.omega_min)
        if sup.finite_above:
            hi = int(sup.omega_max)
        window = RateWindow.from_spec(spec, lo, hi)
    return _fresh_coupled(spec, omega, zeta, window, rng_state, DEFECT, (0, 0, 0, 0))


def quantile_pair(m1: Marginal, m2: Marginal, u: float) -> tuple[int, int]:
    """Monotone-coupling draw: both inverse CDFs applied to one uniform."""
    x = m1.z_lo + int(np.searchsorted(m1.cdf, u, side="right"))
    y = m2.z_lo + int(np.searchsorted(m2.cdf, u, side="right"))
    return x, y


def quantile_coupling_table(m1: Marginal, m2: Marginal) -> dict[tuple[int, int], float]:
    """Joint law mu(x, y) of the quantile coupling, as a sparse dict."""
    table: dict[tuple[int, int], float] = {}
    cuts = np.unique(np.concatenate([[0.0], m1.cdf, m2.cdf]))
    cuts = cuts[cuts <= 1.0]
    lo = 0.0
    for hi in cuts[1:]:
        if hi <= lo:
            continue
        mid = 0.5 * (lo + hi)
        x, y = quantile_pair(m1, m2, mid)
        table[(x, y)] = table.get((x, y), 0.0) + (hi - lo)
        lo = hi
    return table


def palm_origin_table(m1: Marginal, m2: Marginal) -> dict[tuple[int, int], float]:
    """Size-biased origin law mu^(x, y) = mu(x, y) (y - x) / E(zeta - eta)."""
    base = quantile_coupling_table(m1, m2)
    weighted = {k: p * (k[1] - k[0]) for k, p in base.items() if k[1] > k[0]}
    norm = sum(weighted.values())
    if norm <= 0.0:
        raise DeposimError("palm reweighting needs E(zeta - eta) > 0")
    return {k: p / norm for k, p in weighted.items()}


def shifted_origin_table(m1: Marginal, m2: Marginal) -> dict[tuple[int, int], float]:
    """Origin law mu'(x, y) = mu(x, y) mu_2(y-1) / mu_2(y).

    Its upper marginal is mu_2 shifted by one, which is what lets the
    upper component carry a defect on top of an equilibrium copy.
    """
    base = quantile_coupling_table(m1, m2)
    out: dict[tuple[int, int], float] = {}
    for (x, y), p in base.items():
        wy = m2.weight(y)
        wy1 = m2.weight(y - 1)
        if wy <= 0.0:
            raise DeposimError(f"mu_2({y}) = 0 in shifted-origin reweighting")
        val = p * wy1 / wy
        if val > 0.0:
            out[(x, y)] = val
    total = sum(out.values())
    if abs(total - 1.0) > 1e-9:
        raise DeposimError(f"shifted origin law sums to {total}, not 1")
    return {k: v / total for k, v in out.items()}


def _sample_table(table: dict[tuple[int, int], float], rng: np.random.Generator):
    keys = sorted(table.keys())
    probs = np.array([table[k] for k in keys])
    idx = rng.choice(len(keys), p=probs / probs.sum())
    return keys[idx]


def two_density_init(
    spec: ModelSpec,
    theta1: float,
    theta2: float,
    L: int,
    seed: int = 0,
    eps: float = 1e-12,
    origin: str = "plain",
    walker_start: str = "right",
) -> CoupledState:
    """Sitewise quantile coupling of the two product measures.

    origin: 'plain' | 'palm' | 'shifted' selects the site-0 pair law.
    walker_start: 'right' starts the walker on the first discrepancy at or
    right of the origin, 'left' on the first at or left of it.
    """
    if not theta1 < theta2:
        raise DeposimError("needs theta1 < theta2")
    m1 = build_marginal(spec, theta1, eps)
    m2 = build_marginal(spec, theta2, eps)
    rng_state = make_state(seed, 0)
    eta = np.empty(L, dtype=np.int64)
    zeta = np.empty(L, dtype=np.int64)
    for i in range(L):
        u = uniform01(rng_state)
        x, y = quantile_pair(m1, m2, u)
        if x > y:
            raise StochasticOrderViolation(f"quantile coupling gave ({x}, {y}) at site {i}")
        eta[i], zeta[i] = x, y
    if origin != "plain":
        table = palm_origin_table(m1, m2) if origin == "palm" else shifted_origin_table(m1, m2)
        rng = np.random.default_rng((seed, 0xC0FFEE))
        eta[0], zeta[0] = _sample_table(table, rng)
    if not (zeta > eta).any():
        raise DeposimError("no discrepancy on the ring; enlarge L or theta gap")
    if walker_start == "right":
        s_site = next(i for i in range(L) if zeta[i] > eta[i])
        s_pos = s_site
    else:
        s_site = next(i % L for i in range(0, -L, -1) if zeta[i % L] > eta[i % L])
        s_pos = s_site - L if s_site > 0 else 0
    window = default_window(spec, m2)
    lo = min(window.z_lo, int(eta.min()))
    hi = max(window.z_hi, int(zeta.max()))
    if lo < window.z_lo or hi > window.z_hi:
        window = RateWindow.from_spec(spec, lo, hi)
    return _fresh_coupled(spec, eta, zeta, window, rng_state, SWARM, (0, 0, s_site, s_pos))


def palm_reweight_origin(
    spec: ModelSpec, theta1: float, theta2: float, L: int, seed: int = 0
) -> CoupledState:
    """Two-density pair whose origin pair is drawn from the Palm law."""
    return two_density_init(spec, theta1, theta2, L, seed, origin="palm")


# ==========================================================================
# batch driver for the generic coupling
# ==========================================================================
@njit(cache=True, parallel=True)
def _coupled_batch(
    L,
    tab,
    z_lo,
    z_hi,
    cdf1,
    z_lo1,
    cdf2,
    z_lo2,
    mode,
    resample_origin_max,
    origin_x,
    origin_y,
    use_origin,
    walker_left,
    t_arr,
    master_seed,
    streams,
    Q_out,
    S_out,
    j2nd0_out,
    disc_out,
    site0_eta,
    site0_zeta,
    omega00_out,
    viol_out,
    status_out,
):
    n_reps = streams.shape[0]
    nt = t_arr.shape[0]
    for r in prange(n_reps):
        rng = make_state(master_seed, streams[r])
        eta = np.empty(L, dtype=np.int64)
        zeta = np.empty(L, dtype=np.int64)
        if mode == DEFECT:
            for i in range(L):
                eta[i] = z_lo1 + sample_cdf(rng, cdf1)
            if resample_origin_max >= 0:
                guard = 0
                while eta[0] >= resample_origin_max and guard < 10_000:
                    eta[0] = z_lo1 + sample_cdf(rng, cdf1)
                    guard += 1
            for i in range(L):
                zeta[i] = eta[i]
            zeta[0] += 1
        else:
            for i in range(L):
                u = uniform01(rng)
                xi = 0
                lo = 0
                hi = cdf1.shape[0] - 1
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cdf1[mid] > u:
                        hi = mid
                    else:
                        lo = mid + 1
                eta[i] = z_lo1 + lo
                lo = 0
                hi = cdf2.shape[0] - 1
                while lo < hi:
                    mid = (lo + hi) // 2
                    if cdf2[mid] > u:
                        hi = mid
                    else:
                        lo = mid + 1
                zeta[i] = z_lo2 + lo
            if use_origin:
                eta[0] = origin_x[r]
                zeta[0] = origin_y[r]
        omega00_out[r] = eta[0]
        qs = np.zeros(4, dtype=np.int64)
        if mode == SWARM:
            found = False
            if walker_left:
                for k in range(L):
                    site = (-k) % L
                    if zeta[site] > eta[site]:
                        qs[2] = site
                        qs[3] = -k
                        found = True
                        break
            else:
                for k in range(L):
                    if zeta[k] > eta[k]:
                        qs[2] = k
                        qs[3] = k
                        found = True
                        break
            if not found:
                status_out[r] = 99
                continue
        viol = np.zeros(3, dtype=np.int64)
        j2nd = np.zeros(L, dtype=np.int64)
        bricks_eta = np.zeros(L, dtype=np.int64)
        bricks_zeta = np.zeros(L, dtype=np.int64)
        edge_rates = _coupled_edge_rates(eta, zeta, tab, z_lo, viol)
        tree = fenwick_build(edge_rates)
        meta_f = np.zeros(2, dtype=np.float64)
        meta_i = np.zeros(2, dtype=np.int64)
        meta_f[1] = edge_rates.sum()
        status = OK
        for ti in range(nt):
            status, _, _ = _coupled_advance(
                eta,
                zeta,
                bricks_eta,
                bricks_zeta,
                j2nd,
                edge_rates,
                tree,
                tab,
                z_lo,
                z_hi,
                rng,
                meta_f,
                meta_i,
                mode,
                qs,
                viol,
                t_arr[ti],
                np.int64(2**62),
            )
            if status == NEED_EXPAND:
                break
            Q_out[r, ti] = qs[1]
            S_out[r, ti] = qs[3]
            j2nd0_out[r, ti] = j2nd[0]
            d = np.int64(0)
            for i in range(L):
                d += zeta[i] - eta[i]
            disc_out[r, ti] = d
            site0_eta[r, ti] = eta[0]
            site0_zeta[r, ti] = zeta[0]
        status_out[r] = status
        for k in range(3):
            viol_out[r, k] = viol[k]


@dataclass
class CoupledBatchResult:
    t_list: np.ndarray
    Q: np.ndarray  # (reps, nt) tracer displacement
    S: np.ndarray  # (reps, nt) walker displacement
    j2nd0: np.ndarray  # (reps, nt) second-class current through edge 0
    disc: np.ndarray  # (reps, nt) total discrepancy count
    site0_eta: np.ndarray
    site0_zeta: np.ndarray
    omega00: np.ndarray  # (reps,) initial lower value at the origin
    viol: np.ndarray  # (reps, 3)
    status: np.ndarray

    def check_health(self) -> None:
        if self.viol[:, 0].any():
            raise DeposimError("sitewise order broken in a batch replica")
        if self.viol[:, 1].any() or (self.status == NEG_RATE).any():
            raise NegativeChannelRate("negative channel rate in a batch replica")
        if (self.status == 99).any():
            raise DeposimError("a replica had no discrepancy to carry the walker")


def coupled_batch(
    spec: ModelSpec,
    L: int,
    t_list: Sequence[float],
    mode: int,
    theta: float | None = None,
    theta1: float | None = None,
    theta2: float | None = None,
    replicas: int = 1000,
    seed: int = 0,
    eps: float = 1e-12,
    origin: str = "plain",
    walker_start: str = "right",
    max_retries: int = 6,
) -> CoupledBatchResult:
    """Replica batch of defect (mode=DEFECT, needs theta) or two-density
    (mode=SWARM, needs theta1 < theta2) coupled runs."""
    t_arr = np.asarray(sorted(t_list), dtype=np.float64)
    nt = len(t_arr)
    if mode == DEFECT:
        if theta is None:
            raise DeposimError("defect mode needs theta")
        m1 = build_marginal(spec, theta, eps)
        m2 = m1
    else:
        if theta1 is None or theta2 is None or not theta1 < theta2:
            raise DeposimError("swarm mode needs theta1 < theta2")
        m1 = build_marginal(spec, theta1, eps)
        m2 = build_marginal(spec, theta2, eps)
    window = default_window(spec, m2)
    if window.z_lo > m1.z_lo:
        window = RateWindow.from_spec(spec, m1.z_lo, window.z_hi)
    sup = spec.support
    resample_max = int(sup.omega_max) if (mode == DEFECT and sup.finite_above) else -1

    use_origin = origin != "plain"
    origin_x = np.zeros(replicas, dtype=np.int64)
    origin_y = np.zeros(replicas, dtype=np.int64)
    if use_origin:
        table = palm_origin_table(m1, m2) if origin == "palm" else shifted_origin_table(m1, m2)
        keys = sorted(table.keys())
        probs = np.array([table[k] for k in keys])
        rng = np.random.default_rng((seed, 0xC0FFEE))
        idx = rng.choice(len(keys), size=replicas, p=probs / probs.sum())
        origin_x[:] = [keys[k][0] for k in idx]
        origin_y[:] = [keys[k][1] for k in idx]

    Q = np.zeros((replicas, nt), dtype=np.int64)
    S = np.zeros((replicas, nt), dtype=np.int64)
    j2 = np.zeros((replicas, nt), dtype=np.int64)
    disc = np.zeros((replicas, nt), dtype=np.int64)
    s0e = np.zeros((replicas, nt), dtype=np.int64)
    s0z = np.zeros((replicas, nt), dtype=np.int64)
    om00 = np.zeros(replicas, dtype=np.int64)
    viol = np.zeros((replicas, 3), dtype=np.int64)
    status = np.zeros(replicas, dtype=np.int64)

    pending = np.arange(replicas, dtype=np.int64)
    for attempt in range(max_retries + 1):
        k = len(pending)
        outs = (
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros(k, dtype=np.int64),
            np.zeros((k, 3), dtype=np.int64),
            np.zeros(k, dtype=np.int64),
        )
        _coupled_batch(
            L,
            window.tab,
            window.z_lo,
            window.z_hi,
            m1.cdf,
            m1.z_lo,
            m2.cdf,
            m2.z_lo,
            mode,
            resample_max,
            origin_x[pending],
            origin_y[pending],
            use_origin,
            walker_start == "left",
            t_arr,
            seed,
            pending,
            *outs,
        )
        Q[pending], S[pending], j2[pending], disc[pending] = outs[0], outs[1], outs[2], outs[3]
        s0e[pending], s0z[pending], om00[pending] = outs[4], outs[5], outs[6]
        viol[pending], status[pending] = outs[7], outs[8]
        pending = pending[outs[8] == NEED_EXPAND]
        if len(pending) == 0:
            break
        if attempt == max_retries:
            raise DeposimError("rate window kept overflowing in coupled batch")
        window = window.expanded(spec)

    return CoupledBatchResult(t_arr, Q, S, j2, disc, s0e, s0z, om00, viol, status)


# ==========================================================================
# sitewise sandwich couplings (BL and totally asymmetric ZR)
# ==========================================================================
UPPER = 0  # tracer below the walker:  Q <= S
LOWER = 1  # tracer above the walker:  S' <= Q


def _f_values(spec: ModelSpec, z_lo: int, z_hi: int) -> tuple[int, np.ndarray]:
    """Tabulate the single-site function over every argument the sitewise
    channels can touch for values in [z_lo, z_hi]."""
    if spec.f is None:
        raise Unsupported("sandwich couplings need a ZR or BL rate function")
    f_lo = min(z_lo, -z_hi) - 1
    f_hi = max(z_hi, -z_lo) + 1
    tab = np.array([spec.f(z) for z in range(f_lo, f_hi + 1)], dtype=np.float64)
    return f_lo, tab


def check_convexity(spec: ModelSpec, z_lo: int = -16, z_hi: int = 16) -> None:
    """The sandwich channel rates need convex f (growth-rate condition)."""
    f = spec.f
    if f is None:
        raise Unsupported("sandwich couplings apply to ZR and BL families only")
    lo = z_lo if not spec.support.finite_below else int(spec.support.omega_min)
    prev = f(lo + 1) - f(lo)
    for z in range(lo + 1, z_hi):
        slope = f(z + 1) - f(z)
        if slope < prev - 1e-12:
            raise NegativeChannelRate(f"f is not convex at z={z}; sandwich rates go negative")
        prev = slope


@njit(cache=True, inline="always")
def _fv(f_tab, f_lo, z):
    return f_tab[z - f_lo]


@njit(cache=True)
def _sandwich_site_total(low, up, f_tab, f_lo, kind, i, q_site, coincident):
    """Total event intensity of the bricklayer at site i."""
    if kind == 0:  # upper: low = omega (tracer host), up = zeta
        total = _fv(f_tab, f_lo, up[i]) + _fv(f_tab, f_lo, -low[i])
        if i == q_site and not coincident:
            total += _fv(f_tab, f_lo, low[i] + 1) - _fv(f_tab, f_lo, low[i])
        return total
    # lower: low = eta', up = zeta' (tracer rides on top of up)
    total = _fv(f_tab, f_lo, up[i]) + _fv(f_tab, f_lo, -low[i])
    if i == q_site and not coincident:
        extra = _fv(f_tab, f_lo, -up[i] + 1) - _fv(f_tab, f_lo, -low[i])
        if extra > 0.0:
            total += extra
    return total


@njit(cache=True)
def _sandwich_rebuild(low, up, f_tab, f_lo, kind, q_site, coincident, site_rates, tree):
    L = low.shape[0]
    total = 0.0
    for k in range(L + 1):
        tree[k] = 0.0
    for k in range(L):
        site_rates[k] = _sandwich_site_total(low, up, f_tab, f_lo, kind, k, q_site, coincident)
        fenwick_add(tree, L, k, site_rates[k])
        total += site_rates[k]
    return total


@njit(cache=True)
def _sandwich_advance(
    low,
    up,
    j2nd,
    site_rates,
    tree,
    f_tab,
    f_lo,
    z_lo,
    z_hi,
    rng_state,
    meta_f,
    meta_i,
    kind,
    qs,
    viol,
    t_end,
    max_events,
):
    """One clock for (configurations, tracer Q, walker S).

    kind=UPPER: low=omega with tracer Q, up=zeta carrying the walker;
    channel split per the 'step right/left at the shared site' tables,
    preserving Q <= S.  kind=LOWER mirrors it with S' <= Q, the tracer
    riding on up (omega = up - delta_Q).
    qs = [q_site, q_pos, s_site, s_pos].
    """
    L = low.shape[0]
    bitmask = top_bit(L)
    now = meta_f[0]
    total = meta_f[1]
    since = meta_i[0]
    done = np.int64(0)
    while done < max_events:
        coincident = qs[1] == qs[3]
        if total <= 1e-300:
            total = _sandwich_rebuild(low, up, f_tab, f_lo, kind, qs[0], coincident, site_rates, tree)
            since = 0
            if total <= 0.0:
                meta_f[0] = now
                meta_f[1] = 0.0
                meta_i[0] = since
                meta_i[1] += done
                return FROZEN
        dt = exponential(rng_state, total)
        if now + dt > t_end:
            meta_f[0] = t_end
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return OK
        now += dt
        u2 = uniform01(rng_state) * total
        i = fenwick_find(tree, L, bitmask, u2)
        if i >= L or site_rates[i] <= 0.0:
            total = _sandwich_rebuild(low, up, f_tab, f_lo, kind, qs[0], coincident, site_rates, tree)
            since = 0
            continue
        im1 = i - 1 if i > 0 else L - 1
        j = i + 1 if i + 1 < L else 0
        at_c = coincident and (i == qs[0])
        u = uniform01(rng_state) * site_rates[i]

        # decisions: which configurations lay, where, and who walks
        lay_low_right = False
        lay_up_right = False
        lay_low_left = False
        lay_up_left = False
        q_move = 0
        s_move = 0
        second_right = False
        second_left = False

        R = _fv(f_tab, f_lo, up[i])
        if kind == 0:
            Lr = _fv(f_tab, f_lo, -low[i])
            extra = 0.0
            if (i == qs[0]) and not coincident:
                extra = _fv(f_tab, f_lo, low[i] + 1) - _fv(f_tab, f_lo, low[i])
            if u < R:
                if at_c:
                    n = up[i] - low[i]
                    A = R - _fv(f_tab, f_lo, low[i])
                    row4 = _fv(f_tab, f_lo, low[i])
                    row3 = _fv(f_tab, f_lo, low[i] + 1) - _fv(f_tab, f_lo, low[i])
                    share = A / n
                    row2 = share - row3
                    row1 = A - share
                    if row1 < -_NEG_TOL or row2 < -_NEG_TOL or row3 < -_NEG_TOL:
                        viol[1] += 1
                        meta_f[0] = now - dt
                        meta_f[1] = total
                        meta_i[0] = since
                        meta_i[1] += done
                        return NEG_RATE
                    if u < row4:
                        lay_low_right = True
                        lay_up_right = True
                    elif u < row4 + row1:
                        lay_up_right = True
                        second_right = True
                    elif u < row4 + row1 + max(row2, 0.0):
                        lay_up_right = True
                        second_right = True
                        s_move = 1
                    else:
                        lay_up_right = True
                        second_right = True
                        s_move = 1
                        q_move = 1
                elif i == qs[0]:
                    if u < _fv(f_tab, f_lo, low[i]):
                        lay_low_right = True
                        lay_up_right = True
                    else:
                        lay_up_right = True
                        second_right = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = 1
                else:
                    if u < _fv(f_tab, f_lo, low[i]):
                        lay_low_right = True
                        lay_up_right = True
                    else:
                        lay_up_right = True
                        second_right = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = 1
            elif u < R + extra:
                q_move = 1  # tracer's own extra right channel
            else:
                v = u - R - extra
                if at_c:
                    n = up[i] - low[i]
                    A = Lr - _fv(f_tab, f_lo, -up[i])
                    row4 = _fv(f_tab, f_lo, -up[i])
                    row1 = _fv(f_tab, f_lo, -low[i] - 1) - _fv(f_tab, f_lo, -up[i])
                    share = A / n
                    row3 = share
                    row2 = (Lr - _fv(f_tab, f_lo, -low[i] - 1)) - share
                    if row1 < -_NEG_TOL or row2 < -_NEG_TOL:
                        viol[1] += 1
                        meta_f[0] = now - dt
                        meta_f[1] = total
                        meta_i[0] = since
                        meta_i[1] += done
                        return NEG_RATE
                    if v < row4:
                        lay_low_left = True
                        lay_up_left = True
                    elif v < row4 + row1:
                        lay_low_left = True
                        second_left = True
                    elif v < row4 + row1 + max(row2, 0.0):
                        lay_low_left = True
                        second_left = True
                        q_move = -1
                    else:
                        lay_low_left = True
                        second_left = True
                        q_move = -1
                        s_move = -1
                elif i == qs[0]:
                    lay_low_left = True
                    if v < _fv(f_tab, f_lo, -up[i]):
                        lay_up_left = True
                    else:
                        second_left = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = -1
                    if v >= _fv(f_tab, f_lo, -low[i] - 1):
                        q_move = -1
                else:
                    lay_low_left = True
                    if v < _fv(f_tab, f_lo, -up[i]):
                        lay_up_left = True
                    else:
                        second_left = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = -1
        else:
            # kind == LOWER: low = eta', up = zeta' = omega + delta_Q
            Lr = _fv(f_tab, f_lo, -low[i])
            extra = 0.0
            if (i == qs[0]) and not coincident:
                e = _fv(f_tab, f_lo, -up[i] + 1) - Lr
                if e > 0.0:
                    extra = e
            if u < R:
                if at_c:
                    n = up[i] - low[i]
                    A = R - _fv(f_tab, f_lo, low[i])
                    row4 = _fv(f_tab, f_lo, low[i])
                    row1 = _fv(f_tab, f_lo, up[i] - 1) - _fv(f_tab, f_lo, low[i])
                    share = A / n
                    row2 = (R - _fv(f_tab, f_lo, up[i] - 1)) - share
                    row3 = share
                    if row1 < -_NEG_TOL or row2 < -_NEG_TOL:
                        viol[1] += 1
                        meta_f[0] = now - dt
                        meta_f[1] = total
                        meta_i[0] = since
                        meta_i[1] += done
                        return NEG_RATE
                    if u < row4:
                        lay_low_right = True
                        lay_up_right = True
                    elif u < row4 + row1:
                        lay_up_right = True
                        second_right = True
                    elif u < row4 + row1 + max(row2, 0.0):
                        lay_up_right = True
                        second_right = True
                        q_move = 1
                    else:
                        lay_up_right = True
                        second_right = True
                        q_move = 1
                        s_move = 1
                elif i == qs[0]:
                    lay_up_right = True
                    if u < _fv(f_tab, f_lo, low[i]):
                        lay_low_right = True
                    else:
                        second_right = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = 1
                    if u >= _fv(f_tab, f_lo, up[i] - 1):
                        q_move = 1
                else:
                    lay_up_right = True
                    if u < _fv(f_tab, f_lo, low[i]):
                        lay_low_right = True
                    else:
                        second_right = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = 1
            else:
                v = u - R
                if at_c:
                    n = up[i] - low[i]
                    A = Lr - _fv(f_tab, f_lo, -up[i])
                    B = _fv(f_tab, f_lo, -up[i] + 1) - _fv(f_tab, f_lo, -up[i])
                    row4 = _fv(f_tab, f_lo, -up[i])
                    share = A / n
                    row1 = A - share
                    row2 = share - B
                    row3 = B
                    if row1 < -_NEG_TOL or row2 < -_NEG_TOL or row3 < -_NEG_TOL:
                        viol[1] += 1
                        meta_f[0] = now - dt
                        meta_f[1] = total
                        meta_i[0] = since
                        meta_i[1] += done
                        return NEG_RATE
                    if v < row4:
                        lay_low_left = True
                        lay_up_left = True
                    elif v < row4 + row1:
                        lay_low_left = True
                        second_left = True
                    elif v < row4 + row1 + max(row2, 0.0):
                        lay_low_left = True
                        second_left = True
                        s_move = -1
                    else:
                        lay_low_left = True
                        second_left = True
                        s_move = -1
                        q_move = -1
                elif i == qs[0]:
                    # combined block of width max(f(-eta'), f(-zeta'+1))
                    if v < Lr:
                        lay_low_left = True
                    if v < _fv(f_tab, f_lo, -up[i]):
                        lay_up_left = True
                    elif v < Lr:
                        second_left = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = -1
                    if _fv(f_tab, f_lo, -up[i]) <= v < _fv(f_tab, f_lo, -up[i] + 1):
                        q_move = -1
                else:
                    lay_low_left = True
                    if v < _fv(f_tab, f_lo, -up[i]):
                        lay_up_left = True
                    else:
                        second_left = True
                        if i == qs[2] and uniform01(rng_state) * (up[i] - low[i]) < 1.0:
                            s_move = -1

        # window check
        ok = True
        if lay_low_right and (low[i] - 1 < z_lo or low[j] + 1 > z_hi):
            ok = False
        if lay_up_right and (up[i] - 1 < z_lo or up[j] + 1 > z_hi):
            ok = False
        if lay_low_left and (low[im1] - 1 < z_lo or low[i] + 1 > z_hi):
            ok = False
        if lay_up_left and (up[im1] - 1 < z_lo or up[i] + 1 > z_hi):
            ok = False
        if not ok:
            meta_f[0] = now - dt
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return NEED_EXPAND

        if lay_low_right:
            low[i] -= 1
            low[j] += 1
        if lay_up_right:
            up[i] -= 1
            up[j] += 1
        if lay_low_left:
            low[im1] -= 1
            low[i] += 1
        if lay_up_left:
            up[im1] -= 1
            up[i] += 1
        if second_right:
            j2nd[i] += 1
        if second_left:
            j2nd[im1] -= 1
        q_old = qs[0]
        if q_move == 1:
            qs[0] = j
            qs[1] += 1
        elif q_move == -1:
            qs[0] = im1
            qs[1] -= 1
        if s_move == 1:
            qs[2] = j if i == qs[2] else (qs[2] + 1) % L
            qs[3] += 1
        elif s_move == -1:
            qs[2] = im1 if i == qs[2] else (qs[2] - 1) % L
            qs[3] -= 1

        # audits
        if kind == 0:
            if qs[1] > qs[3]:
                viol[0] += 1
        else:
            if qs[3] > qs[1]:
                viol[0] += 1
        if up[i] < low[i] or up[j] < low[j] or up[im1] < low[im1]:
            viol[0] += 1
        if up[qs[2]] - low[qs[2]] < 1:
            viol[2] += 1

        # refresh the touched site intensities
        coincident = qs[1] == qs[3]
        for k in (im1, i, j, q_old, qs[0]):
            newr = _sandwich_site_total(low, up, f_tab, f_lo, kind, k, qs[0], coincident)
            d = newr - site_rates[k]
            if d != 0.0:
                site_rates[k] = newr
                fenwick_add(tree, L, k, d)
                total += d
        done += 1
        since += 1
        if since >= (1 << 20):
            total = _sandwich_rebuild(low, up, f_tab, f_lo, kind, qs[0], coincident, site_rates, tree)
            since = 0
    meta_f[0] = now
    meta_f[1] = total
    meta_i[0] = since
    meta_i[1] += done
    return OK


@dataclass
class SandwichState:
    """Tracer-and-walker coupling with exact pathwise order."""

    spec: ModelSpec
    kind: int
    L: int
    z_lo: int
    z_hi: int
    f_lo: int
    f_tab: np.ndarray
    low: np.ndarray
    up: np.ndarray
    j2nd: np.ndarray
    site_rates: np.ndarray
    tree: np.ndarray
    rng_state: np.ndarray
    _meta_f: np.ndarray
    _meta_i: np.ndarray
    qs: np.ndarray
    viol: np.ndarray

    @property
    def now(self) -> float:
        return float(self._meta_f[0])

    @property
    def q_position(self) -> int:
        return int(self.qs[1])

    @property
    def s_position(self) -> int:
        return int(self.qs[3])

    @property
    def omega(self) -> np.ndarray:
        """The equilibrium copy hosting the tracer."""
        if self.kind == UPPER:
            return self.low.copy()
        om = self.up.copy()
        om[self.qs[0]] -= 1
        return om

    def check_health(self) -> None:
        if self.viol[0]:
            raise DeposimError(f"sandwich order broken {self.viol[0]} times")
        if self.viol[1]:
            raise NegativeChannelRate("sandwich channel rate went negative")
        if self.viol[2]:
            raise DeposimError("walker left the discrepancy set")

    def _expand(self) -> None:
        sup = self.spec.support
        self.z_lo = self.z_lo - 4 if not sup.finite_below else self.z_lo
        self.z_hi = self.z_hi + 4 if not sup.finite_above else self.z_hi
        self.f_lo, f_tab = _f_values(self.spec, self.z_lo, self.z_hi)
        self.f_tab = f_tab
        self._meta_f[1] = _sandwich_rebuild(
            self.low,
            self.up,
            self.f_tab,
            self.f_lo,
            self.kind,
            self.qs[0],
            self.qs[1] == self.qs[3],
            self.site_rates,
            self.tree,
        )

    def _drive(self, t_end: float, max_events: int) -> int:
        while True:
            status = _sandwich_advance(
                self.low,
                self.up,
                self.j2nd,
                self.site_rates,
                self.tree,
                self.f_tab,
                self.f_lo,
                self.z_lo,
                self.z_hi,
                self.rng_state,
                self._meta_f,
                self._meta_i,
                self.kind,
                self.qs,
                self.viol,
                t_end,
                np.int64(max_events),
            )
            if status == NEED_EXPAND:
                self._expand()
                continue
            if status == NEG_RATE:
                raise NegativeChannelRate("sandwich channel rate went negative")
            if status == FROZEN and t_end < math.inf:
                self._meta_f[0] = t_end
            return status

    def step(self) -> None:
        self._drive(math.inf, 1)

    def advance(self, t_end: float) -> None:
        if t_end < self.now:
            raise DeposimError(f"t_end={t_end} is before now={self.now}")
        self._drive(t_end, 2**62)


def sandwich_upper_step(state: SandwichState) -> None:
    if state.kind != UPPER:
        raise DeposimError("state is not an upper sandwich")
    state.step()


def sandwich_lower_step(state: SandwichState) -> None:
    if state.kind != LOWER:
        raise DeposimError("state is not a lower sandwich")
    state.step()


def _sandwich_window(spec: ModelSpec, m_low: Marginal, m_up: Marginal, pad: int = 8):
    sup = spec.support
    lo = min(m_low.z_lo, m_up.z_lo)
    hi = max(m_low.z_hi, m_up.z_hi)
    if not sup.finite_below:
        lo -= pad
    else:
        lo = int(sup.omega_min)
    if not sup.finite_above:
        hi += pad
    else:
        hi = int(sup.omega_max)
    return lo, hi


def sandwich_init(
    spec: ModelSpec,
    kind: int,
    theta: float,
    theta_other: float,
    L: int,
    seed: int = 0,
    eps: float = 1e-12,
) -> SandwichState:
    """Initial sandwich state.

    UPPER: equilibrium copy at theta hosts the tracer; companion at
    theta_other > theta rides above it, walker starts on the first
    discrepancy right of the origin.  LOWER: companion at
    theta_other < theta below; the tracer copy's origin marginal is
    shifted so the defect fits; walker starts left of the origin.
    """
    if spec.family not in ("ZR", "BL"):
        raise Unsupported("sandwich couplings are defined for ZR and BL only")
    check_convexity(spec)
    rng_state = make_state(seed, 0)
    if kind == UPPER:
        if not theta < theta_other:
            raise DeposimError("upper sandwich needs theta < theta_other")
        m_low = build_marginal(spec, theta, eps)
        m_up = build_marginal(spec, theta_other, eps)
        low = np.empty(L, dtype=np.int64)
        up = np.empty(L, dtype=np.int64)
        for i in range(L):
            x, y = quantile_pair(m_low, m_up, uniform01(rng_state))
            if x > y:
                raise StochasticOrderViolation(f"({x}, {y}) at site {i}")
            low[i], up[i] = x, y
        if not (up > low).any():
            raise DeposimError("no discrepancy to carry the walker")
        s_site = next(i for i in range(L) if up[i] > low[i])
        qs = (0, 0, s_site, s_site)
    elif kind == LOWER:
        if not theta_other < theta:
            raise DeposimError("lower sandwich needs theta_other < theta")
        m_low = build_marginal(spec, theta_other, eps)
        m_up = build_marginal(spec, theta, eps)
        low = np.empty(L, dtype=np.int64)
        up = np.empty(L, dtype=np.int64)
        for i in range(L):
            x, y = quantile_pair(m_low, m_up, uniform01(rng_state))
            if x > y:
                raise StochasticOrderViolation(f"({x}, {y}) at site {i}")
            low[i], up[i] = x, y
        table = shifted_origin_table(m_low, m_up)
        rng = np.random.default_rng((seed, 0xC0FFEE))
        low[0], up[0] = _sample_table(table, rng)
        if not (up > low).any():
            raise DeposimError("no discrepancy to carry the walker")
        s_site = next(i % L for i in range(0, -L, -1) if up[i % L] > low[i % L])
        s_pos = s_site - L if s_site > 0 else 0
        qs = (0, 0, s_site, s_pos)
    else:
        raise DeposimError("kind must be UPPER or LOWER")
    z_lo, z_hi = _sandwich_window(spec, m_low, m_up)
    z_lo = min(z_lo, int(low.min()))
    z_hi = max(z_hi, int(up.max()) + 1)
    f_lo, f_tab = _f_values(spec, z_lo, z_hi)
    L_ = len(low)
    site_rates = np.zeros(L_, dtype=np.float64)
    tree = np.zeros(L_ + 1, dtype=np.float64)
    viol = np.zeros(3, dtype=np.int64)
    state = SandwichState(
        spec=spec,
        kind=kind,
        L=L_,
        z_lo=z_lo,
        z_hi=z_hi,
        f_lo=f_lo,
        f_tab=f_tab,
        low=low,
        up=up,
        j2nd=np.zeros(L_, dtype=np.int64),
        site_rates=site_rates,
        tree=tree,
        rng_state=rng_state,
        _meta_f=np.zeros(2),
        _meta_i=np.zeros(2, dtype=np.int64),
        qs=np.array(qs, dtype=np.int64),
        viol=viol,
    )
    state._meta_f[1] = _sandwich_rebuild(
        low, up, f_tab, f_lo, kind, state.qs[0], state.qs[1] == state.qs[3], site_rates, tree
    )
    return state


@njit(cache=True, parallel=True)
def _sandwich_batch(
    L,
    kind,
    f_tab0,
    f_lo0,
    z_lo,
    z_hi,
    cdf_low,
    z_lo_low,
    cdf_up,
    z_lo_up,
    origin_x,
    origin_y,
    use_origin,
    t_arr,
    master_seed,
    streams,
    Q_out,
    S_out,
    j2nd0_out,
    disc_out,
    low0_out,
    up0_out,
    viol_out,
    status_out,
):
    n_reps = streams.shape[0]
    nt = t_arr.shape[0]
    for r in prange(n_reps):
        rng = make_state(master_seed, streams[r])
        low = np.empty(L, dtype=np.int64)
        up = np.empty(L, dtype=np.int64)
        for i in range(L):
            u = uniform01(rng)
            lo = 0
            hi = cdf_low.shape[0] - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf_low[mid] > u:
                    hi = mid
                else:
                    lo = mid + 1
            low[i] = z_lo_low + lo
            lo = 0
            hi = cdf_up.shape[0] - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cdf_up[mid] > u:
                    hi = mid
                else:
                    lo = mid + 1
            up[i] = z_lo_up + lo
        if use_origin:
            low[0] = origin_x[r]
            up[0] = origin_y[r]
        qs = np.zeros(4, dtype=np.int64)
        found = False
        if kind == 0:
            for k in range(L):
                if up[k] > low[k]:
                    qs[2] = k
                    qs[3] = k
                    found = True
                    break
        else:
            for k in range(L):
                site = (-k) % L
                if up[site] > low[site]:
                    qs[2] = site
                    qs[3] = -k
                    found = True
                    break
        if not found:
            status_out[r] = 99
            continue
        viol = np.zeros(3, dtype=np.int64)
        j2nd = np.zeros(L, dtype=np.int64)
        site_rates = np.zeros(L, dtype=np.float64)
        tree = np.zeros(L + 1, dtype=np.float64)
        meta_f = np.zeros(2, dtype=np.float64)
        meta_i = np.zeros(2, dtype=np.int64)
        meta_f[1] = _sandwich_rebuild(
            low, up, f_tab0, f_lo0, kind, qs[0], qs[1] == qs[3], site_rates, tree
        )
        status = OK
        for ti in range(nt):
            status = _sandwich_advance(
                low,
                up,
                j2nd,
                site_rates,
                tree,
                f_tab0,
                f_lo0,
                z_lo,
                z_hi,
                rng,
                meta_f,
                meta_i,
                kind,
                qs,
                viol,
                t_arr[ti],
                np.int64(2**62),
            )
            if status != OK and status != FROZEN:
                break
            Q_out[r, ti] = qs[1]
            S_out[r, ti] = qs[3]
            j2nd0_out[r, ti] = j2nd[0]
            d = np.int64(0)
            for i in range(L):
                d += up[i] - low[i]
            disc_out[r, ti] = d
            low0_out[r, ti] = low[0]
            up0_out[r, ti] = up[0]
        status_out[r] = status
        for k in range(3):
            viol_out[r, k] = viol[k]


@dataclass
class SandwichBatchResult:
    t_list: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    j2nd0: np.ndarray
    disc: np.ndarray
    low0: np.ndarray
    up0: np.ndarray
    viol: np.ndarray
    status: np.ndarray

    def check_health(self) -> None:
        if self.viol[:, 0].any():
            raise DeposimError("sandwich order broken in a batch replica")
        if self.viol[:, 1].any() or (self.status == NEG_RATE).any():
            raise NegativeChannelRate("negative sandwich channel rate")
        if self.viol[:, 2].any():
            raise DeposimError("walker left the discrepancy set")
        if (self.status == 99).any():
            raise DeposimError("a replica had no discrepancy to carry the walker")


def sandwich_batch(
    spec: ModelSpec,
    kind: int,
    theta: float,
    theta_other: float,
    L: int,
    t_list: Sequence[float],
    replicas: int = 1000,
    seed: int = 0,
    eps: float = 1e-12,
    max_retries: int = 6,
) -> SandwichBatchResult:
    """Replica batch of sandwich runs (UPPER: Q <= S; LOWER: S' <= Q)."""
    if spec.family not in ("ZR", "BL"):
        raise Unsupported("sandwich couplings are defined for ZR and BL only")
    check_convexity(spec)
    t_arr = np.asarray(sorted(t_list), dtype=np.float64)
    nt = len(t_arr)
    if kind == UPPER:
        if not theta < theta_other:
            raise DeposimError("upper sandwich needs theta < theta_other")
        m_low = build_marginal(spec, theta, eps)
        m_up = build_marginal(spec, theta_other, eps)
        use_origin = False
    else:
        if not theta_other < theta:
            raise DeposimError("lower sandwich needs theta_other < theta")
        m_low = build_marginal(spec, theta_other, eps)
        m_up = build_marginal(spec, theta, eps)
        use_origin = True
    origin_x = np.zeros(replicas, dtype=np.int64)
    origin_y = np.zeros(replicas, dtype=np.int64)
    if use_origin:
        table = shifted_origin_table(m_low, m_up)
        keys = sorted(table.keys())
        probs = np.array([table[k] for k in keys])
        rng = np.random.default_rng((seed, 0xC0FFEE))
        idx = rng.choice(len(keys), size=replicas, p=probs / probs.sum())
        origin_x[:] = [keys[k][0] for k in idx]
        origin_y[:] = [keys[k][1] for k in idx]
    z_lo, z_hi = _sandwich_window(spec, m_low, m_up)

    Q = np.zeros((replicas, nt), dtype=np.int64)
    S = np.zeros((replicas, nt), dtype=np.int64)
    j2 = np.zeros((replicas, nt), dtype=np.int64)
    disc = np.zeros((replicas, nt), dtype=np.int64)
    low0 = np.zeros((replicas, nt), dtype=np.int64)
    up0 = np.zeros((replicas, nt), dtype=np.int64)
    viol = np.zeros((replicas, 3), dtype=np.int64)
    status = np.zeros(replicas, dtype=np.int64)

    pending = np.arange(replicas, dtype=np.int64)
    for attempt in range(max_retries + 1):
        f_lo, f_tab = _f_values(spec, z_lo, z_hi)
        k = len(pending)
        outs = (
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, nt), dtype=np.int64),
            np.zeros((k, 3), dtype=np.int64),
            np.zeros(k, dtype=np.int64),
        )
        _sandwich_batch(
            L,
            kind,
            f_tab,
            f_lo,
            z_lo,
            z_hi,
            m_low.cdf,
            m_low.z_lo,
            m_up.cdf,
            m_up.z_lo,
            origin_x[pending],
            origin_y[pending],
            use_origin,
            t_arr,
            seed,
            pending,
            *outs,
        )
        Q[pending], S[pending], j2[pending], disc[pending] = outs[0], outs[1], outs[2], outs[3]
        low0[pending], up0[pending] = outs[4], outs[5]
        viol[pending], status[pending] = outs[6], outs[7]
        pending = pending[outs[7] == NEED_EXPAND]
        if len(pending) == 0:
            break
        if attempt == max_retries:
            raise DeposimError("rate window kept overflowing in sandwich batch")
        sup = spec.support
        z_lo = z_lo - 4 if not sup.finite_below else z_lo
        z_hi = z_hi + 4

    return SandwichBatchResult(t_arr, Q, S, j2, disc, low0, up0, viol, status)


# ==========================================================================
# order-monotone pair coupling (two copies, two tracers)
# ==========================================================================
@njit(cache=True)
def _pair_site_total(om, omp, f_tab, f_lo, i, q_site, qp_site, coincident):
    total = _fv(f_tab, f_lo, omp[i]) + _fv(f_tab, f_lo, -om[i])
    if coincident and i == q_site:
        total += _fv(f_tab, f_lo, omp[i] + 1) - _fv(f_tab, f_lo, omp[i])
    else:
        if i == q_site:
            total += _fv(f_tab, f_lo, om[i] + 1) - _fv(f_tab, f_lo, om[i])
        if i == qp_site:
            total += _fv(f_tab, f_lo, omp[i] + 1) - _fv(f_tab, f_lo, omp[i])
    return total


@njit(cache=True)
def _pair_rebuild(om, omp, f_tab, f_lo, q_site, qp_site, coincident, site_rates, tree):
    L = om.shape[0]
    total = 0.0
    for k in range(L + 1):
        tree[k] = 0.0
    for k in range(L):
        site_rates[k] = _pair_site_total(om, omp, f_tab, f_lo, k, q_site, qp_site, coincident)
        fenwick_add(tree, L, k, site_rates[k])
        total += site_rates[k]
    return total


@njit(cache=True)
def _pair_advance(
    om,
    omp,
    site_rates,
    tree,
    f_tab,
    f_lo,
    z_lo,
    z_hi,
    rng_state,
    meta_f,
    meta_i,
    qq,
    viol,
    t_end,
    max_events,
):
    """Coupled pair of copies with tracers, preserving om <= omp and
    Q <= Q' pathwise.  qq = [q_site, q_pos, qp_site, qp_pos]."""
    L = om.shape[0]
    bitmask = top_bit(L)
    now = meta_f[0]
    total = meta_f[1]
    since = meta_i[0]
    done = np.int64(0)
    while done < max_events:
        coincident = qq[1] == qq[3]
        if total <= 1e-300:
            total = _pair_rebuild(om, omp, f_tab, f_lo, qq[0], qq[2], coincident, site_rates, tree)
            since = 0
            if total <= 0.0:
                meta_f[0] = now
                meta_f[1] = 0.0
                meta_i[0] = since
                meta_i[1] += done
                return FROZEN
        dt = exponential(rng_state, total)
        if now + dt > t_end:
            meta_f[0] = t_end
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return OK
        now += dt
        u2 = uniform01(rng_state) * total
        i = fenwick_find(tree, L, bitmask, u2)
        if i >= L or site_rates[i] <= 0.0:
            total = _pair_rebuild(om, omp, f_tab, f_lo, qq[0], qq[2], coincident, site_rates, tree)
            since = 0
            continue
        im1 = i - 1 if i > 0 else L - 1
        j = i + 1 if i + 1 < L else 0
        u = uniform01(rng_state) * site_rates[i]

        lay_low_right = False
        lay_up_right = False
        lay_low_left = False
        lay_up_left = False
        q_move = 0
        qp_move = 0

        R = _fv(f_tab, f_lo, omp[i])
        at_c = coincident and i == qq[0]
        eQ = _fv(f_tab, f_lo, om[i] + 1) - _fv(f_tab, f_lo, om[i])
        eQp = _fv(f_tab, f_lo, omp[i] + 1) - _fv(f_tab, f_lo, omp[i])
        if at_c and eQ > eQp + _NEG_TOL:
            viol[1] += 1
            meta_f[0] = now - dt
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return NEG_RATE
        if u < R:
            if u < _fv(f_tab, f_lo, om[i]):
                lay_low_right = True
                lay_up_right = True
            else:
                lay_up_right = True
        else:
            v = u - R
            extra_end = 0.0
            handled = False
            if at_c:
                if v < eQp:
                    qp_move = 1
                    if v < eQ:
                        q_move = 1
                    handled = True
                else:
                    v -= eQp
                    extra_end = eQp
            else:
                if i == qq[0]:
                    if v < eQ:
                        q_move = 1
                        handled = True
                    else:
                        v -= eQ
                if not handled and i == qq[2]:
                    if v < eQp:
                        qp_move = 1
                        handled = True
                    else:
                        v -= eQp
            if not handled:
                # left block; v in [0, f(-om_i))
                lay_low_left = True
                if v < _fv(f_tab, f_lo, -omp[i]):
                    lay_up_left = True
                if at_c:
                    a = _fv(f_tab, f_lo, -omp[i] - 1)
                    lenQ = _fv(f_tab, f_lo, -om[i]) - _fv(f_tab, f_lo, -om[i] - 1)
                    if a <= v < a + lenQ:
                        q_move = -1
                    if a <= v < _fv(f_tab, f_lo, -omp[i]):
                        qp_move = -1
                else:
                    if i == qq[0] and v >= _fv(f_tab, f_lo, -om[i] - 1):
                        q_move = -1
                    if i == qq[2] and _fv(f_tab, f_lo, -omp[i] - 1) <= v < _fv(f_tab, f_lo, -omp[i]):
                        qp_move = -1

        ok = True
        if lay_low_right and (om[i] - 1 < z_lo or om[j] + 1 > z_hi):
            ok = False
        if lay_up_right and (omp[i] - 1 < z_lo or omp[j] + 1 > z_hi):
            ok = False
        if lay_low_left and (om[im1] - 1 < z_lo or om[i] + 1 > z_hi):
            ok = False
        if lay_up_left and (omp[im1] - 1 < z_lo or omp[i] + 1 > z_hi):
            ok = False
        if not ok:
            meta_f[0] = now - dt
            meta_f[1] = total
            meta_i[0] = since
            meta_i[1] += done
            return NEED_EXPAND

        if lay_low_right:
            om[i] -= 1
            om[j] += 1
        if lay_up_right:
            omp[i] -= 1
            omp[j] += 1
        if lay_low_left:
            om[im1] -= 1
            om[i] += 1
        if lay_up_left:
            omp[im1] -= 1
            omp[i] += 1
        q_old = qq[0]
        qp_old = qq[2]
        if q_move == 1:
            qq[0] = j
            qq[1] += 1
        elif q_move == -1:
            qq[0] = im1
            qq[1] -= 1
        if qp_move == 1:
            qq[2] = j
            qq[3] += 1
        elif qp_move == -1:
            qq[2] = im1
            qq[3] -= 1

        if qq[1] > qq[3]:
            viol[0] += 1
        if om[i] > omp[i] or om[j] > omp[j] or om[im1] > omp[im1]:
            viol[0] += 1

        coincident = qq[1] == qq[3]
        for k in (im1, i, j, q_old, qq[0], qp_old, qq[2]):
            newr = _pair_site_total(om, omp, f_tab, f_lo, k, qq[0], qq[2], coincident)
            d = newr - site_rates[k]
            if d != 0.0:
                site_rates[k] = newr
                fenwick_add(tree, L, k, d)
                total += d
        done += 1
        since += 1
        if since >= (1 << 20):
            total = _pair_rebuild(om, omp, f_tab, f_lo, qq[0], qq[2], coincident, site_rates, tree)
            since = 0
    meta_f[0] = now
    meta_f[1] = total
    meta_i[0] = since
    meta_i[1] += done
    return OK


@dataclass
class MonotonePair:
    """Two ordered copies, each with its own tracer, coupled so that both
    the sitewise order and the tracer order are preserved pathwise."""

    spec: ModelSpec
    L: int
    z_lo: int
    z_hi: int
    f_lo: int
    f_tab: np.ndarray
    om: np.ndarray
    omp: np.ndarray
    site_rates: np.ndarray
    tree: np.ndarray
    rng_state: np.ndarray
    _meta_f: np.ndarray
    _meta_i: np.ndarray
    qq: np.ndarray
    viol: np.ndarray

    @property
    def now(self) -> float:
        return float(self._meta_f[0])

    @property
    def q_position(self) -> int:
        return int(self.qq[1])

    @property
    def q_prime_position(self) -> int:
        return int(self.qq[3])

    def check_health(self) -> None:
        if self.viol[0]:
            raise DeposimError(f"order broken {self.viol[0]} times")
        if self.viol[1]:
            raise NegativeChannelRate("pair coupling channel rate went negative")

    def _expand(self) -> None:
        sup = self.spec.support
        self.z_lo = self.z_lo - 4 if not sup.finite_below else self.z_lo
        self.z_hi = self.z_hi + 4
        self.f_lo, self.f_tab = _f_values(self.spec, self.z_lo, self.z_hi)
        self._meta_f[1] = _pair_rebuild(
            self.om,
            self.omp,
            self.f_tab,
            self.f_lo,
            self.qq[0],
            self.qq[2],
            self.qq[1] == self.qq[3],
            self.site_rates,
            self.tree,
        )

    def step(self) -> None:
        self._advance(math.inf, 1)

    def advance(self, t_end: float) -> None:
        if t_end < self.now:
            raise DeposimError(f"t_end={t_end} is before now={self.now}")
        self._advance(t_end, 2**62)

    def _advance(self, t_end: float, max_events: int) -> None:
        while True:
            status = _pair_advance(
                self.om,
                self.omp,
                self.site_rates,
                self.tree,
                self.f_tab,
                self.f_lo,
                self.z_lo,
                self.z_hi,
                self.rng_state,
                self._meta_f,
                self._meta_i,
                self.qq,
                self.viol,
                t_end,
                np.int64(max_events),
            )
            if status == NEED_EXPAND:
                self._expand()
                continue
            if status == NEG_RATE:
                raise NegativeChannelRate("pair coupling channel rate went negative")
            if status == FROZEN and t_end < math.inf:
                self._meta_f[0] = t_end
            return


def monotone_pair_init(
    spec: ModelSpec,
    theta1: float,
    theta2: float,
    L: int,
    q_start: int = 0,
    qp_start: int = 0,
    seed: int = 0,
    eps: float = 1e-12,
) -> MonotonePair:
    """Ordered copies at theta1 <= theta2 with tracers Q(0) <= Q'(0)."""
    if spec.family not in ("ZR", "BL"):
        raise Unsupported("the pair coupling is defined for ZR and BL only")
    check_convexity(spec)
    if q_start > qp_start:
        raise DeposimError("needs Q(0) <= Q'(0)")
    m1 = build_marginal(spec, theta1, eps)
    m2 = build_marginal(spec, theta2, eps) if theta2 != theta1 else m1
    rng_state = make_state(seed, 0)
    om = np.empty(L, dtype=np.int64)
    omp = np.empty(L, dtype=np.int64)
    for i in range(L):
        x, y = quantile_pair(m1, m2, uniform01(rng_state))
        if x > y:
            raise StochasticOrderViolation(f"({x}, {y}) at site {i}")
        om[i], omp[i] = x, y
    z_lo, z_hi = _sandwich_window(spec, m1, m2)
    z_lo = min(z_lo, int(om.min()))
    z_hi = max(z_hi, int(omp.max()) + 1)
    f_lo, f_tab = _f_values(spec, z_lo, z_hi)
    site_rates = np.zeros(L, dtype=np.float64)
    tree = np.zeros(L + 1, dtype=np.float64)
    pair = MonotonePair(
        spec=spec,
        L=L,
        z_lo=z_lo,
        z_hi=z_hi,
        f_lo=f_lo,
        f_tab=f_tab,
        om=om,
        omp=omp,
        site_rates=site_rates,
        tree=tree,
        rng_state=rng_state,
        _meta_f=np.zeros(2),
        _meta_i=np.zeros(2, dtype=np.int64),
        qq=np.array([q_start % L, q_start, qp_start % L, qp_start], dtype=np.int64),
        viol=np.zeros(3, dtype=np.int64),
    )
    pair._meta_f[1] = _pair_rebuild(
        om, omp, f_tab, f_lo, pair.qq[0], pair.qq[2], pair.qq[1] == pair.qq[3], site_rates, tree
    )
    return pair
