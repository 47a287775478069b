"""Direct transcription of the two-phase iPTM optimal control problem.

The horizon has ``n1`` driving samples of fixed length ``dt1`` followed by
``n2`` charging samples whose lengths ``dt2[k]`` are decision variables.
States are kept at every knot and the forward-Euler dynamics enter as defect
equalities, so the charging time ``sum(dt2)`` is free while the terminal
state of charge is pinned.

Decision vector layout (contiguous slices, in this order)::

    q_bat[N] q_cab[N] p_chg[n2] dt2[n2] soc[N+1] t_bat[N+1] t_cab[N+1] eps1 eps2

with ``N = n1 + n2`` (or ``N = n1`` when the charging event is not in the
horizon, in which case ``p_chg`` and ``dt2`` are empty).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .models import DiscriminantNegative, VehicleParams, VehicleState


class InfeasibleBounds(ValueError):
    """A box bound is empty (lower > upper)."""


@dataclass(frozen=True)
class HorizonSpec:
    n1: int
    dt1: float
    n2: int
    dt2_max: float
    traction_preview: tuple[float, ...] = ()
    soc_targ: float = 0.6
    charging_in_horizon: bool = True

    def __post_init__(self):
        object.__setattr__(self, "traction_preview", tuple(float(p) for p in self.traction_preview))
        if self.n1 < 0:
            raise ValueError("n1 must be nonnegative")
        if len(self.traction_preview) != self.n1:
            raise ValueError(f"traction_preview has {len(self.traction_preview)} entries, expected n1={self.n1}")
        if self.n1 > 0 and not self.dt1 > 0:
            raise ValueError("dt1 must be positive")
        if self.charging_in_horizon:
            if self.n2 < 1 or not self.dt2_max > 0:
                raise ValueError("charging horizon needs n2 >= 1 and dt2_max > 0")
        elif self.n1 < 1:
            raise ValueError("a horizon without charging needs n1 >= 1")

    @property
    def n_charge(self) -> int:
        return self.n2 if self.charging_in_horizon else 0

    @property
    def n_samples(self) -> int:
        return self.n1 + self.n_charge


@dataclass(frozen=True)
class Weights:
    alpha: float = 1e-2
    beta1: float = 1e11
    beta2: float = 1e10
    budget_t_chg: float | None = None

    def __post_init__(self):
        if min(self.alpha, self.beta1, self.beta2) < 0:
            raise ValueError("weights must be nonnegative")
        if self.budget_t_chg is not None and not self.budget_t_chg > 0:
            raise ValueError("budget_t_chg must be positive when given")


@dataclass(frozen=True)
class Limits:
    soc_min: float = 0.1
    soc_max: float = 0.95
    t_bat_min: float = 15.0
    t_bat_max: float = 35.0
    t_cab_min: float = 23.0
    t_cab_max: float = 25.0
    p_chg_max: float = 80e3

    def check(self) -> None:
        for lo, hi, name in ((self.soc_min, self.soc_max, "soc"),
                             (self.t_bat_min, self.t_bat_max, "t_bat"),
                             (self.t_cab_min, self.t_cab_max, "t_cab")):
            if lo > hi:
                raise InfeasibleBounds(f"{name} bounds are empty: {lo} > {hi}")
        if self.p_chg_max < 0:
            raise InfeasibleBounds("p_chg_max is negative")


@dataclass(frozen=True)
class ProblemParams:
    """Everything the transcription needs besides the horizon and weights."""

    vehicle: VehicleParams
    t_amb: float = 38.0
    p_aux_base: float = 500.0
    limits: Limits = field(default_factory=Limits)


@dataclass(eq=False)
class NlpProblem:
    """Bound-constrained NLP with equality and ``<= 0`` inequality residuals.

    Only ``lower``, ``upper`` and the callables are required; the scale
    vectors let the solver work in O(1) units, and ``layout`` names the
    slices of the decision vector for problems that have structure.
    """

    lower: np.ndarray
    upper: np.ndarray
    objective: Callable[[np.ndarray], float]
    objective_grad: Callable[[np.ndarray], np.ndarray]
    eq: Callable[[np.ndarray], np.ndarray]
    eq_jac: Callable[[np.ndarray], sp.spmatrix]
    ineq: Callable[[np.ndarray], np.ndarray]
    ineq_jac: Callable[[np.ndarray], sp.spmatrix]
    objective_hess: Callable[[np.ndarray], sp.spmatrix] | None = None
    eq_hess: Callable[[np.ndarray, np.ndarray], sp.spmatrix] | None = None
    x_scale: np.ndarray | None = None
    eq_scale: np.ndarray | None = None
    ineq_scale: np.ndarray | None = None
    obj_scale: float = 1.0
    layout: dict[str, slice] = field(default_factory=dict)
    spec: HorizonSpec | None = None
    x0: VehicleState | None = None
    params: ProblemParams | None = None
    weights: Weights | None = None
    n_eq: int = 0
    n_ineq: int = 0
    rollout: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise ValueError("bound arrays differ in length")
        if np.any(self.lower > self.upper):
            bad = int(np.argmax(self.lower > self.upper))
            raise InfeasibleBounds(f"empty box bound at index {bad} ({self._name_of(bad)})")
        n = self.lower.size
        if self.x_scale is None:
            self.x_scale = np.ones(n)
        if self.eq_scale is None:
            self.eq_scale = np.ones(self.n_eq)
        if self.ineq_scale is None:
            self.ineq_scale = np.ones(self.n_ineq)

    @property
    def n(self) -> int:
        return self.lower.size

    def _name_of(self, index: int) -> str:
        for name, sl in self.layout.items():
            if sl.start <= index < sl.stop:
                return f"{name}[{index - sl.start}]"
        return f"z[{index}]"

    def part(self, z: np.ndarray, name: str) -> np.ndarray:
        return z[self.layout[name]]

    def predicted_t_chg(self, z: np.ndarray) -> float | None:
        if "dt2" not in self.layout:
            return None
        return float(np.sum(z[self.layout["dt2"]]))


def _layout(spec: HorizonSpec) -> dict[str, slice]:
    n, nc = spec.n_samples, spec.n_charge
    sizes = [("q_bat", n), ("q_cab", n), ("p_chg", nc), ("dt2", nc),
             ("soc", n + 1), ("t_bat", n + 1), ("t_cab", n + 1), ("eps1", 1), ("eps2", 1)]
    layout, start = {}, 0
    for name, size in sizes:
        if size == 0 and name in ("p_chg", "dt2"):
            continue
        layout[name] = slice(start, start + size)
        start += size
    return layout


def _csr_builder(rows, cols, shape):
    """Return a function mapping COO-ordered values onto a fixed CSR pattern."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    tag = sp.coo_matrix((np.arange(1, rows.size + 1, dtype=float), (rows, cols)), shape=shape).tocsr()
    if tag.nnz != rows.size:
        raise AssertionError("duplicate entries in sparsity pattern")
    order = tag.data.astype(np.int64) - 1
    indices, indptr = tag.indices.copy(), tag.indptr.copy()

    def build(values):
        return sp.csr_matrix((np.asarray(values, dtype=float)[order], indices, indptr), shape=shape)

    return build


class _Transcription:
    """Evaluation engine behind :func:`build_nlp`; caches the last point."""

    def __init__(self, spec: HorizonSpec, x0: VehicleState, params: ProblemParams, weights: Weights,
                 gradient_perturbation: float = 0.0):
        self.spec, self.x0, self.params, self.weights = spec, x0, params, weights
        veh = params.vehicle
        bp, cp, cool = veh.battery, veh.cabin, veh.cooling
        self.U, self.R, self.cap = bp.open_circuit_voltage, bp.internal_resistance, bp.charge_capacity
        self.mcb, self.a_amb = bp.heat_capacity, bp.ambient_exchange_coeff
        self.mcc, self.g_cab = cp.heat_capacity, cp.convection_conductance
        self.cop = cool.cop
        self.t_amb = params.t_amb
        self.gradient_perturbation = gradient_perturbation

        n1, nc = spec.n1, spec.n_charge
        self.N = N = n1 + nc
        self.n1, self.nc = n1, nc
        self.layout = _layout(spec)
        self.n = self.layout["eps2"].stop
        L = self.layout
        idx = np.arange(self.n)
        self.i_qb, self.i_qc = idx[L["q_bat"]], idx[L["q_cab"]]
        self.i_pc = idx[L["p_chg"]] if nc else np.zeros(0, dtype=int)
        self.i_dt = idx[L["dt2"]] if nc else np.zeros(0, dtype=int)
        self.i_soc, self.i_tb, self.i_tc = idx[L["soc"]], idx[L["t_bat"]], idx[L["t_cab"]]
        self.i_e1, self.i_e2 = L["eps1"].start, L["eps2"].start

        # per-sample constants
        self.charging = np.r_[np.zeros(n1, bool), np.ones(nc, bool)]
        self.p_trac = np.r_[np.asarray(spec.traction_preview, float), np.zeros(nc)]
        occupied_load = cp.metabolic_load(True)
        self.cab_load = cp.solar_load + cp.ventilation_load + np.where(self.charging, 0.0, occupied_load) \
            + self.g_cab * self.t_amb
        self.p_aux = params.p_aux_base

        self._build_patterns()
        self._cache_key = None

    # ------------------------------------------------------------------ layout
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lim, cool = self.params.limits, self.params.vehicle.cooling
        lim.check()
        lo, hi = np.full(self.n, -np.inf), np.full(self.n, np.inf)
        lo[self.i_qb], hi[self.i_qb] = 0.0, cool.q_bat_max
        lo[self.i_qc], hi[self.i_qc] = 0.0, cool.q_cab_max
        if self.nc:
            lo[self.i_pc], hi[self.i_pc] = 0.0, lim.p_chg_max
            lo[self.i_dt], hi[self.i_dt] = 0.0, self.spec.dt2_max
        lo[self.i_soc], hi[self.i_soc] = lim.soc_min, lim.soc_max
        lo[self.i_tb] = lim.t_bat_min
        lo[self.i_tc] = lim.t_cab_min
        # the initial knot is the measured state
        x0 = self.x0
        for i_arr, val in ((self.i_soc, x0.soc), (self.i_tb, x0.t_bat), (self.i_tc, x0.t_cab)):
            lo[i_arr[0]] = hi[i_arr[0]] = val
        lo[self.i_e1] = lo[self.i_e2] = 0.0
        return lo, hi

    def scales(self):
        lim, cool = self.params.limits, self.params.vehicle.cooling
        x_scale = np.ones(self.n)
        x_scale[self.i_qb] = x_scale[self.i_qc] = cool.q_total_max
        if self.nc:
            x_scale[self.i_pc] = max(lim.p_chg_max, 1.0)
            x_scale[self.i_dt] = self.spec.dt2_max
        x_scale[self.i_tb] = x_scale[self.i_tc] = 10.0
        x_scale[self.i_soc] = 0.1
        N = self.N
        # unit steps: 0.1 SOC, 10 K, Qmax, p_chg_max, dt2_max
        eq_scale = np.r_[np.full(N, 10.0), np.full(2 * N, 0.1), np.full(int(self.nc > 0), 10.0)]
        in_scale = np.r_[np.ones(2 * N), np.full(N, 1.0 / cool.q_total_max), np.ones(2)]
        if self.has_budget:
            in_scale = np.r_[in_scale, 1.0 / self.spec.dt2_max]
        ref = cool.q_total_max**2 / self.cop * 100.0
        return x_scale, eq_scale, in_scale, 1.0 / ref

    @property
    def has_budget(self) -> bool:
        return self.nc > 0 and self.weights.budget_t_chg is not None

    # ------------------------------------------------------------- evaluation
    def _unpack(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n,):
            raise ValueError(f"decision vector has shape {z.shape}, expected ({self.n},)")
        return z

    def _samples(self, z):
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        qb, qc = z[self.i_qb], z[self.i_qc]
        soc, tb, tc = z[self.i_soc], z[self.i_tb], z[self.i_tc]
        dt = np.empty(self.N)
        dt[: self.n1] = self.spec.dt1
        p_bat = self.p_trac + self.p_aux + (qb + qc) / self.cop
        if self.nc:
            dt[self.n1:] = z[self.i_dt]
            p_bat[self.n1:] -= z[self.i_pc]
        disc = self.U**2 - 4.0 * self.R * p_bat
        if np.any(disc <= 0):
            raise DiscriminantNegative("battery power outside the deliverable range inside the horizon")
        sq = np.sqrt(disc)
        cur = (self.U - sq) / (2.0 * self.R)
        f_soc = -cur / self.cap
        f_bat = (self.R * cur**2 + self.a_amb * (self.t_amb - tb[:-1]) - qb) / self.mcb
        f_cab = (self.cab_load - self.g_cab * tc[:-1] - qc) / self.mcc
        out = dict(qb=qb, qc=qc, soc=soc, tb=tb, tc=tc, dt=dt, sq=sq, cur=cur,
                   f_soc=f_soc, f_bat=f_bat, f_cab=f_cab)
        self._cache_key, self._cache = key, out
        return out

    def objective(self, z):
        z = self._unpack(z)
        w = self.weights
        qb, qc = z[self.i_qb], z[self.i_qc]
        dt = np.full(self.N, float(self.spec.dt1))
        if self.nc:
            dt[self.n1:] = z[self.i_dt]
        val = np.sum((qb**2 + qc**2) / self.cop * dt)
        if self.nc:
            val += w.alpha * np.sum(z[self.i_dt] ** 2)
        val += w.beta1 * z[self.i_e1] ** 2 + w.beta2 * z[self.i_e2] ** 2
        return float(val)

    def objective_grad(self, z):
        z = self._unpack(z)
        w = self.weights
        qb, qc = z[self.i_qb], z[self.i_qc]
        dt = np.full(self.N, float(self.spec.dt1))
        if self.nc:
            dt[self.n1:] = z[self.i_dt]
        g = np.zeros(self.n)
        g[self.i_qb] = 2.0 * qb / self.cop * dt
        g[self.i_qc] = 2.0 * qc / self.cop * dt
        if self.nc:
            sl = slice(self.n1, None)
            g[self.i_dt] = (qb[sl] ** 2 + qc[sl] ** 2) / self.cop + 2.0 * w.alpha * z[self.i_dt]
        g[self.i_e1] = 2.0 * w.beta1 * z[self.i_e1]
        g[self.i_e2] = 2.0 * w.beta2 * z[self.i_e2]
        if self.gradient_perturbation:
            g[self.i_qb[0]] += self.gradient_perturbation * max(1.0, float(np.max(np.abs(g))))
        return g

    def objective_hess(self, z):
        """Exact objective Hessian (indefinite through the q*q*dt2 terms)."""
        z = self._unpack(z)
        w = self.weights
        qb, qc = z[self.i_qb], z[self.i_qc]
        c = self.cop
        n1, nc = self.n1, self.nc
        dt = np.full(self.N, float(self.spec.dt1))
        if nc:
            dt[n1:] = z[self.i_dt]
        rows = [self.i_qb, self.i_qc, [self.i_e1], [self.i_e2]]
        cols = [self.i_qb, self.i_qc, [self.i_e1], [self.i_e2]]
        vals = [2.0 * dt / c, 2.0 * dt / c, [2.0 * w.beta1], [2.0 * w.beta2]]
        if nc:
            ch = slice(n1, None)
            for i_q, q in ((self.i_qb[ch], qb[ch]), (self.i_qc[ch], qc[ch])):
                rows += [i_q, self.i_dt]
                cols += [self.i_dt, i_q]
                vals += [2.0 * q / c, 2.0 * q / c]
            rows.append(self.i_dt); cols.append(self.i_dt); vals.append(np.full(nc, 2.0 * w.alpha))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n, self.n))

    def eq_hess(self, z, weights):
        """Second derivatives of ``weights @ eq(z)``; the inequalities are linear."""
        z = self._unpack(z)
        s = self._samples(z)
        N, n1, nc = self.N, self.n1, self.nc
        w_soc, w_tb, w_tc = weights[:N], weights[N:2 * N], weights[2 * N:3 * N]
        dt, sq, cur = s["dt"], s["sq"], s["cur"]
        d1 = 1.0 / sq  # dI/dP
        d2 = 2.0 * self.R / sq**3  # d2I/dP2
        fsoc_p, fsoc_pp = -d1 / self.cap, -d2 / self.cap
        h_p = 2.0 * self.R * cur * d1
        h_pp = 2.0 * self.R * (d1**2 + cur * d2)
        # curvature of the weighted defects along battery power P
        curv_p = -dt * (w_soc * fsoc_pp + w_tb * h_pp / self.mcb)
        rows, cols, vals = [], [], []

        def put(r, c, v):
            rows.append(np.asarray(r)); cols.append(np.asarray(c)); vals.append(np.asarray(v, dtype=float))

        u_idx = [self.i_qb, self.i_qc]
        u_gain = [np.full(N, 1.0 / self.cop)] * 2
        if nc:
            pad = np.full(n1, -1)
            u_idx.append(np.r_[pad, self.i_pc])
            u_gain.append(np.r_[np.zeros(n1), -np.ones(nc)])
        for a in range(len(u_idx)):
            for b in range(len(u_idx)):
                m = (u_idx[a] >= 0) & (u_idx[b] >= 0)
                put(u_idx[a][m], u_idx[b][m], (curv_p * u_gain[a] * u_gain[b])[m])
        if nc:
            ch = slice(n1, None)
            i_dt = self.i_dt
            for a in range(len(u_idx)):
                ia, ga = u_idx[a][ch], u_gain[a][ch]
                # d/du of -(w_soc f_soc + w_tb f_bat + w_tc f_cab)
                v = -(w_soc[ch] * fsoc_p[ch] * ga + w_tb[ch] * h_p[ch] * ga / self.mcb)
                if a == 0:
                    v = v + w_tb[ch] / self.mcb
                if a == 1:
                    v = v + w_tc[ch] / self.mcc
                put(ia, i_dt, v); put(i_dt, ia, v)
            tb_i, tc_i = self.i_tb[:-1][ch], self.i_tc[:-1][ch]
            v_tb = w_tb[ch] * self.a_amb / self.mcb
            v_tc = w_tc[ch] * self.g_cab / self.mcc
            put(tb_i, i_dt, v_tb); put(i_dt, tb_i, v_tb)
            put(tc_i, i_dt, v_tc); put(i_dt, tc_i, v_tc)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.n, self.n))

    def eq(self, z):
        z = self._unpack(z)
        s = self._samples(z)
        soc, tb, tc, dt = s["soc"], s["tb"], s["tc"], s["dt"]
        parts = [
            soc[1:] - soc[:-1] - s["f_soc"] * dt,
            tb[1:] - tb[:-1] - s["f_bat"] * dt,
            tc[1:] - tc[:-1] - s["f_cab"] * dt,
        ]
        if self.nc:
            parts.append([soc[-1] - self.spec.soc_targ])
        return np.concatenate(parts)

    def ineq(self, z):
        z = self._unpack(z)
        lim, cool = self.params.limits, self.params.vehicle.cooling
        tb, tc = z[self.i_tb], z[self.i_tc]
        e1, e2 = z[self.i_e1], z[self.i_e2]
        parts = [
            tb[1:] - lim.t_bat_max - e1,
            tc[1:] - lim.t_cab_max - e2,
            z[self.i_qb] + z[self.i_qc] - cool.q_total_max,
            [-e1, -e2],
        ]
        if self.has_budget:
            parts.append([np.sum(z[self.i_dt]) - self.weights.budget_t_chg])
        return np.concatenate(parts)

    # -------------------------------------------------------------- Jacobians
    def _build_patterns(self):
        N, n1, nc = self.N, self.n1, self.nc
        k = np.arange(N)
        r_soc, r_tb, r_tc = k, N + k, 2 * N + k
        rows, cols = [], []

        def add(r, c):
            rows.append(np.asarray(r))
            cols.append(np.asarray(c))

        # soc defects
        add(r_soc, self.i_soc[1:]); add(r_soc, self.i_soc[:-1])
        add(r_soc, self.i_qb); add(r_soc, self.i_qc)
        if nc:
            add(r_soc[n1:], self.i_pc); add(r_soc[n1:], self.i_dt)
        # battery temperature defects
        add(r_tb, self.i_tb[1:]); add(r_tb, self.i_tb[:-1])
        add(r_tb, self.i_qb); add(r_tb, self.i_qc)
        if nc:
            add(r_tb[n1:], self.i_pc); add(r_tb[n1:], self.i_dt)
        # cabin defects
        add(r_tc, self.i_tc[1:]); add(r_tc, self.i_tc[:-1]); add(r_tc, self.i_qc)
        if nc:
            add(r_tc[n1:], self.i_dt)
            add([3 * N], [self.i_soc[-1]])
        self._n_eq = 3 * N + (1 if nc else 0)
        self._eq_build = _csr_builder(np.concatenate(rows), np.concatenate(cols), (self._n_eq, self.n))

        rows, cols, vals = [], [], []
        kk = np.arange(N)
        for r, c, v in (
            (kk, self.i_tb[1:], 1.0), (kk, np.full(N, self.i_e1), -1.0),
            (N + kk, self.i_tc[1:], 1.0), (N + kk, np.full(N, self.i_e2), -1.0),
            (2 * N + kk, self.i_qb, 1.0), (2 * N + kk, self.i_qc, 1.0),
            ([3 * N], [self.i_e1], -1.0), ([3 * N + 1], [self.i_e2], -1.0),
        ):
            rows.append(np.asarray(r)); cols.append(np.asarray(c)); vals.append(np.full(len(r), v))
        if self.has_budget:
            rows.append(np.full(nc, 3 * N + 2)); cols.append(self.i_dt); vals.append(np.ones(nc))
        self._n_ineq = 3 * N + 2 + (1 if self.has_budget else 0)
        self._ineq_jac = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self._n_ineq, self.n)
        )

    def eq_jac(self, z):
        z = self._unpack(z)
        s = self._samples(z)
        n1, nc, N = self.n1, self.nc, self.N
        dt, sq, cur = s["dt"], s["sq"], s["cur"]
        dI_dP = 1.0 / sq
        dfsoc_dP = -dI_dP / self.cap
        dfbat_dP = 2.0 * self.R * cur * dI_dP / self.mcb
        ones = np.ones(N)
        vals = [
            ones, -ones,
            -dt * dfsoc_dP / self.cop, -dt * dfsoc_dP / self.cop,
        ]
        if nc:
            ch = slice(n1, None)
            vals += [dt[ch] * dfsoc_dP[ch], -s["f_soc"][ch]]
        vals += [
            ones, -ones + dt * self.a_amb / self.mcb,
            -dt * (dfbat_dP / self.cop - 1.0 / self.mcb), -dt * dfbat_dP / self.cop,
        ]
        if nc:
            vals += [dt[ch] * dfbat_dP[ch], -s["f_bat"][ch]]
        vals += [ones, -ones + dt * self.g_cab / self.mcc, dt / self.mcc]
        if nc:
            vals += [-s["f_cab"][ch], [1.0]]
        return self._eq_build(np.concatenate(vals))

    def ineq_jac(self, z):
        self._unpack(z)
        return self._ineq_jac

    # --------------------------------------------------------------- helpers
    def rollout(self, z):
        """Overwrite the state slices of ``z`` by Euler rollout from the first knot."""
        z = np.array(z, dtype=float)
        qb, qc = z[self.i_qb], z[self.i_qc]
        soc, tb, tc = self.x0.soc, self.x0.t_bat, self.x0.t_cab
        z[self.i_soc[0]], z[self.i_tb[0]], z[self.i_tc[0]] = soc, tb, tc
        for i in range(self.N):
            dt = self.spec.dt1 if i < self.n1 else z[self.i_dt[i - self.n1]]
            p = self.p_trac[i] + self.p_aux + (qb[i] + qc[i]) / self.cop
            if i >= self.n1:
                p -= z[self.i_pc[i - self.n1]]
            disc = self.U**2 - 4.0 * self.R * p
            if disc <= 0:
                raise DiscriminantNegative("rollout left the deliverable power range")
            cur = (self.U - np.sqrt(disc)) / (2.0 * self.R)
            f_soc = -cur / self.cap
            f_bat = (self.R * cur**2 + self.a_amb * (self.t_amb - tb) - qb[i]) / self.mcb
            f_cab = (self.cab_load[i] - self.g_cab * tc - qc[i]) / self.mcc
            soc, tb, tc = soc + f_soc * dt, tb + f_bat * dt, tc + f_cab * dt
            z[self.i_soc[i + 1]], z[self.i_tb[i + 1]], z[self.i_tc[i + 1]] = soc, tb, tc
        return z


def build_nlp(spec: HorizonSpec, x0: VehicleState, params: ProblemParams, weights: Weights,
              *, gradient_perturbation: float = 0.0) -> NlpProblem:
    """Transcribe one MPC horizon into an :class:`NlpProblem`.

    ``gradient_perturbation`` corrupts the analytic objective gradient and is
    only meant as a negative control for the gradient checker.
    """
    tr = _Transcription(spec, x0, params, weights, gradient_perturbation)
    lo, hi = tr.bounds()
    x_scale, eq_scale, in_scale, obj_scale = tr.scales()
    nlp = NlpProblem(
        lower=lo, upper=hi,
        objective=tr.objective, objective_grad=tr.objective_grad,
        eq=tr.eq, eq_jac=tr.eq_jac, ineq=tr.ineq, ineq_jac=tr.ineq_jac,
        objective_hess=tr.objective_hess, eq_hess=tr.eq_hess,
        x_scale=x_scale, eq_scale=eq_scale, ineq_scale=in_scale, obj_scale=obj_scale,
        layout=dict(tr.layout), spec=spec, x0=x0, params=params, weights=weights,
        n_eq=tr._n_eq, n_ineq=tr._n_ineq, rollout=tr.rollout,
    )
    return nlp


def eval_objective(nlp: NlpProblem, z) -> float:
    return nlp.objective(np.asarray(z, dtype=float))


def eval_constraints(nlp: NlpProblem, z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    return nlp.eq(z), nlp.ineq(z)


def eval_gradients(nlp: NlpProblem, z) -> tuple[np.ndarray, sp.csr_matrix, sp.csr_matrix]:
    """Objective gradient plus equality and inequality Jacobians."""
    z = np.asarray(z, dtype=float)
    return nlp.objective_grad(z), sp.csr_matrix(nlp.eq_jac(z)), sp.csr_matrix(nlp.ineq_jac(z))


def initial_guess(nlp: NlpProblem, budget: float | None = None) -> np.ndarray:
    """Cold-start point: controls at mid-bounds, equal charging steps, rolled-out states."""
    z = np.zeros(nlp.n)
    for name in ("q_bat", "q_cab", "p_chg"):
        if name in nlp.layout:
            sl = nlp.layout[name]
            z[sl] = 0.5 * (nlp.lower[sl] + nlp.upper[sl])
    if "dt2" in nlp.layout:
        sl = nlp.layout["dt2"]
        n2 = sl.stop - sl.start
        total = budget if budget is not None else 0.5 * n2 * nlp.spec.dt2_max
        z[sl] = np.clip(total / n2, nlp.lower[sl], nlp.upper[sl])
    return nlp.rollout(z)


def dump_json(nlp: NlpProblem, z=None) -> str:
    """Layout, bounds and (optionally) residuals at ``z`` as a JSON document."""

    def clean(a):
        return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

    doc = {
        "n": nlp.n,
        "n_eq": nlp.n_eq,
        "n_ineq": nlp.n_ineq,
        "layout": {k: [v.start, v.stop] for k, v in nlp.layout.items()},
        "lower": clean(nlp.lower),
        "upper": clean(nlp.upper),
    }
    if nlp.spec is not None:
        doc["spec"] = {
            "n1": nlp.spec.n1, "dt1": nlp.spec.dt1, "n2": nlp.spec.n2, "dt2_max": nlp.spec.dt2_max,
            "soc_targ": nlp.spec.soc_targ, "charging_in_horizon": nlp.spec.charging_in_horizon,
        }
    if z is not None:
        eq, ineq = eval_constraints(nlp, z)
        doc["point"] = {
            "z": clean(z),
            "objective": eval_objective(nlp, z),
            "eq_residuals": clean(eq),
            "ineq_residuals": clean(ineq),
        }
    return json.dumps(doc, indent=1)
