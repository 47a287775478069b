"""Augmented-Lagrangian NLP solver for :class:`~iptm.transcription.NlpProblem`.

Equalities ``c(z) = 0`` and inequalities ``g(z) <= 0`` are moved into a
Powell-Hestenes-Rockafellar augmented Lagrangian; the box bounds stay explicit
and each subproblem is minimised by a projected Newton method on the exact
augmented-Lagrangian Hessian, shifted towards positive definiteness when a
Cholesky factorisation fails.  All work happens in scaled variables
``x = z / x_scale``.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .models import DiscriminantNegative
from .transcription import NlpProblem


class DimensionMismatch(ValueError):
    """Two horizons cannot be mapped onto each other for warm starting."""


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"
    EVALUATION_ERROR = "evaluation_error"


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-4
    feas_tol: float = 1e-5
    max_outer_iters: int = 40
    max_inner_iters: int = 200
    initial_penalty: float = 10.0
    penalty_growth_factor: float = 10.0
    inner_grad_tol: float = 1e-7
    max_penalty: float = 1e12
    trace: Callable[[dict], None] | None = None

    def __post_init__(self):
        for name in ("kkt_tol", "feas_tol", "inner_grad_tol", "initial_penalty"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.penalty_growth_factor > 1:
            raise ValueError("penalty_growth_factor must exceed 1")


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    eq_feas: float
    ineq_feas: float
    complementarity: float

    def satisfied(self, opts: SolverOptions) -> bool:
        return (self.stationarity <= opts.kkt_tol and self.eq_feas <= opts.feas_tol
                and self.ineq_feas <= opts.feas_tol and self.complementarity <= opts.kkt_tol)

    def as_dict(self) -> dict:
        return {"stationarity": self.stationarity, "eq_feas": self.eq_feas,
                "ineq_feas": self.ineq_feas, "complementarity": self.complementarity}


@dataclass
class Solution:
    z_star: np.ndarray
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    status: Status
    kkt: KktResiduals
    objective: float
    outer_iters: int = 0
    inner_iters: int = 0
    wall_time: float = 0.0
    penalty: float = 0.0
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


def ndjson_trace(stream) -> Callable[[dict], None]:
    """Trace callback writing one JSON object per outer iteration."""

    def emit(record: dict) -> None:
        stream.write(json.dumps(record) + "\n")

    return emit


class _Scaled:
    """The problem seen in scaled variables, with a one-point cache."""

    def __init__(self, nlp: NlpProblem):
        self.nlp = nlp
        self.s = np.asarray(nlp.x_scale, dtype=float)
        self.es = np.asarray(nlp.eq_scale, dtype=float)
        self.gs = np.asarray(nlp.ineq_scale, dtype=float)
        self.fs = float(nlp.obj_scale)
        self.lo = nlp.lower / self.s
        self.hi = nlp.upper / self.s
        self.fixed = self.lo == self.hi
        self.S = sp.diags(self.s)

    def z(self, x):
        return x * self.s

    def values(self, x):
        z = self.z(x)
        f = self.fs * self.nlp.objective(z)
        c = self.es * self.nlp.eq(z)
        g = self.gs * self.nlp.ineq(z)
        return f, c, g

    def derivatives(self, x):
        z = self.z(x)
        gf = self.fs * self.s * self.nlp.objective_grad(z)
        Jc = sp.csr_matrix(sp.diags(self.es) @ sp.csr_matrix(self.nlp.eq_jac(z)) @ self.S)
        Jg = sp.csr_matrix(sp.diags(self.gs) @ sp.csr_matrix(self.nlp.ineq_jac(z)) @ self.S)
        return gf, Jc, Jg

    def hess_f(self, x):
        if self.nlp.objective_hess is None:
            return sp.csr_matrix((x.size, x.size))
        H = sp.csr_matrix(self.nlp.objective_hess(self.z(x)))
        return sp.csr_matrix(self.fs * (self.S @ H @ self.S))

    def hess_c(self, x, lam_hat):
        """Hessian of ``lam_hat @ c(x)`` for scaled equalities."""
        if self.nlp.eq_hess is None or lam_hat.size == 0:
            return sp.csr_matrix((x.size, x.size))
        H = sp.csr_matrix(self.nlp.eq_hess(self.z(x), lam_hat * self.es))
        return sp.csr_matrix(self.S @ H @ self.S)


def _proj_grad_norm(x, grad, lo, hi):
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x - np.clip(x - grad, lo, hi))))


def _kkt_scaled(P: _Scaled, x, lam, mu) -> KktResiduals:
    _, c, g = P.values(x)
    gf, Jc, Jg = P.derivatives(x)
    grad_l = gf + Jc.T @ lam + Jg.T @ mu
    return KktResiduals(
        stationarity=_proj_grad_norm(x, grad_l, P.lo, P.hi),
        eq_feas=float(np.max(np.abs(c))) if c.size else 0.0,
        ineq_feas=float(max(np.max(g), 0.0)) if g.size else 0.0,
        complementarity=float(np.max(np.abs(np.minimum(mu, -g)))) if g.size else 0.0,
    )


def check_kkt(nlp: NlpProblem, z, multipliers: tuple[np.ndarray, np.ndarray],
              opts: SolverOptions | None = None) -> KktResiduals:
    """KKT residuals at ``z`` for unscaled multipliers ``(lambda_eq, mu_ineq)``.

    Stationarity is the infinity norm of the projected Lagrangian gradient in
    scaled variables; feasibility norms use the problem's row scaling.
    """
    P = _Scaled(nlp)
    lam, mu = multipliers
    lam = np.asarray(lam, dtype=float) * P.fs / np.where(P.es == 0, 1.0, P.es)
    mu = np.asarray(mu, dtype=float) * P.fs / np.where(P.gs == 0, 1.0, P.gs)
    return _kkt_scaled(P, np.asarray(z, dtype=float) / P.s, lam, mu)


class _AugLag:
    def __init__(self, P: _Scaled, lam, mu, rho):
        self.P, self.lam, self.mu, self.rho = P, lam, mu, rho

    def value(self, x):
        try:
            f, c, g = self.P.values(x)
        except (DiscriminantNegative, FloatingPointError):
            return np.inf
        rho, lam, mu = self.rho, self.lam, self.mu
        val = f + lam @ c + 0.5 * rho * (c @ c)
        shifted = np.maximum(0.0, mu + rho * g)
        val += (shifted @ shifted - mu @ mu) / (2.0 * rho)
        return float(val) if np.isfinite(val) else np.inf

    def gradient_and_hessian(self, x):
        P, rho = self.P, self.rho
        _, c, g = P.values(x)
        gf, Jc, Jg = P.derivatives(x)
        lam_hat = self.lam + rho * c
        mu_hat = np.maximum(0.0, self.mu + rho * g)
        grad = gf + Jc.T @ lam_hat + Jg.T @ mu_hat
        active = (self.mu + rho * g) > 0
        Ja = Jg[active]
        H = P.hess_f(x) + P.hess_c(x, lam_hat) + rho * (Jc.T @ Jc) + rho * (Ja.T @ Ja)
        return grad, sp.csr_matrix(H)


def _newton_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``(H + tau I) d = -g`` with the smallest tau that factorises."""
    scale = max(float(np.max(np.abs(np.diag(H)))), 1e-12)
    tau = 0.0
    eye = np.eye(H.shape[0])
    for _ in range(40):
        try:
            factor = cho_factor(H + tau * eye, check_finite=False)
            d = -cho_solve(factor, g, check_finite=False)
            if np.all(np.isfinite(d)):
                return d
        except LinAlgError:
            pass
        tau = max(10.0 * tau, 1e-10 * scale)
    return -g / scale


def _inner_solve(al: _AugLag, x, tol, max_iters):
    """Projected Newton iterations on the augmented Lagrangian within the box."""
    P = al.P
    lo, hi, fixed = P.lo, P.hi, P.fixed
    phi = al.value(x)
    iters, stalled = 0, False
    for iters in range(1, max_iters + 1):
        grad, H = al.gradient_and_hessian(x)
        pg = _proj_grad_norm(x, grad, lo, hi)
        if pg <= tol:
            iters -= 1
            break
        eps = min(1e-3, pg)
        bound = ((x <= lo + eps) & (grad > 0)) | ((x >= hi - eps) & (grad < 0))
        free = ~(bound | fixed)
        d = np.zeros_like(x)
        d[bound] = -grad[bound]
        if free.any():
            idx = np.flatnonzero(free)
            d[idx] = _newton_direction(H[idx][:, idx].toarray(), grad[idx])
        t, accepted = 1.0, False
        while t > 1e-14:
            xn = np.clip(x + t * d, lo, hi)
            phin = al.value(xn)
            if phin <= phi + 1e-4 * (grad @ (xn - x)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            stalled = True
            break
        rel_change = abs(phi - phin) / max(1.0, abs(phi))
        x, phi = xn, phin
        if rel_change < 1e-15 and np.max(np.abs(t * d)) < 1e-14:
            stalled = True
            break
    return x, iters, stalled


def solve(nlp: NlpProblem, z_init, opts: SolverOptions | None = None, *,
          warm: Solution | None = None,
          multipliers: tuple[np.ndarray, np.ndarray] | None = None) -> Solution:
    """Minimise ``nlp`` starting from ``z_init`` (clipped into the box).

    ``warm`` (or explicit unscaled ``multipliers``) seeds the multiplier
    estimates when their dimensions match the problem.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    P = _Scaled(nlp)
    z_init = np.asarray(z_init, dtype=float)
    if z_init.shape != (nlp.n,):
        raise DimensionMismatch(f"z_init has shape {z_init.shape}, expected ({nlp.n},)")
    x = np.clip(z_init / P.s, P.lo, P.hi)

    lam = np.zeros(nlp.n_eq)
    mu = np.zeros(nlp.n_ineq)
    rho = opts.initial_penalty
    if warm is not None and multipliers is None:
        multipliers = (warm.eq_multipliers, warm.ineq_multipliers)
    if multipliers is not None:
        lam0, mu0 = (np.asarray(m, dtype=float) for m in multipliers)
        if lam0.shape == lam.shape and mu0.shape == mu.shape:
            lam = lam0 * P.fs / P.es
            mu = np.maximum(mu0 * P.fs / P.gs, 0.0)
            if warm is not None and warm.penalty > 0:
                rho = max(rho, min(warm.penalty, 1e4 * opts.initial_penalty))

    def finish(status, kkt, outer, inner, message=""):
        z = np.clip(x * P.s, nlp.lower, nlp.upper)
        try:
            obj = float(nlp.objective(z))
        except Exception:  # noqa: BLE001
            obj = float("nan")
        return Solution(
            z_star=z,
            eq_multipliers=lam * P.es / P.fs,
            ineq_multipliers=mu * P.gs / P.fs,
            status=status, kkt=kkt, objective=obj,
            outer_iters=outer, inner_iters=inner,
            wall_time=time.perf_counter() - t0, penalty=rho, message=message,
        )

    nan_kkt = KktResiduals(np.inf, np.inf, np.inf, np.inf)
    try:
        P.values(x)
    except DiscriminantNegative as exc:
        return finish(Status.EVALUATION_ERROR, nan_kkt, 0, 0, str(exc))

    omega = max(1e-2, opts.kkt_tol)
    viol_prev = np.inf
    inner_total = 0
    stall_tightened = False
    kkt = nan_kkt
    for outer in range(1, opts.max_outer_iters + 1):
        al = _AugLag(P, lam, mu, rho)
        try:
            x, its, stalled = _inner_solve(al, x, omega, opts.max_inner_iters)
            _, c, g = P.values(x)
        except DiscriminantNegative as exc:
            return finish(Status.EVALUATION_ERROR, nan_kkt, outer, inner_total, str(exc))
        inner_total += its
        viol = max(float(np.max(np.abs(c))) if c.size else 0.0,
                   float(np.max(np.abs(np.maximum(g, -mu / rho)))) if g.size else 0.0)
        lam = lam + rho * c
        mu = np.maximum(0.0, mu + rho * g)
        kkt = _kkt_scaled(P, x, lam, mu)
        if opts.trace is not None:
            opts.trace({"outer": outer, "inner": its, "objective": P.values(x)[0] / P.fs,
                        "penalty": rho, **kkt.as_dict()})
        if kkt.satisfied(opts):
            return finish(Status.CONVERGED, kkt, outer, inner_total)
        if stalled:
            if stall_tightened and viol >= viol_prev:
                break
            stall_tightened = True
            rho = min(rho * opts.penalty_growth_factor, opts.max_penalty)
        elif viol > 0.25 * viol_prev or viol > opts.feas_tol and kkt.stationarity <= opts.kkt_tol:
            if rho >= opts.max_penalty and viol > opts.feas_tol and viol >= viol_prev:
                return finish(Status.INFEASIBLE, kkt, outer, inner_total,
                              "penalty cap reached with feasibility stalled")
            rho = min(rho * opts.penalty_growth_factor, opts.max_penalty)
        viol_prev = min(viol, viol_prev)
        omega = max(0.5 * opts.kkt_tol, 0.1 * omega)
    return finish(Status.MAX_ITERATIONS, kkt, opts.max_outer_iters, inner_total)


# --------------------------------------------------------------- warm start
def warm_start(prev: Solution, old: NlpProblem, new: NlpProblem, elapsed: float = 0.0) -> np.ndarray:
    return shifted_start(prev, old, new, elapsed)[0]


def shifted_start(prev: Solution, old: NlpProblem, new: NlpProblem,
                  elapsed: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Shift a previous solution onto a new horizon.

    Driving samples that have elapsed are dropped.  In a charging-only
    horizon the elapsed time is drained from the leading ``dt2`` entries;
    a sample that is used up is removed and the last charging sample is
    repeated (with zero length) to keep ``n2`` fixed.  States are re-rolled
    from the new initial state so the defects start at zero.  Also returns,
    for each new sample, the index of the old sample it was copied from.
    """
    if old.spec == new.spec and elapsed == 0.0 and old.x0 == new.x0:
        return prev.z_star.copy(), np.arange(old.spec.n_samples)
    z_old = prev.z_star
    if z_old.shape != (old.n,):
        raise DimensionMismatch("previous solution does not belong to the old problem")
    so, sn = old.spec, new.spec
    if so is None or sn is None:
        raise DimensionMismatch("warm start needs transcribed problems")
    if sn.n_charge != so.n_charge or (sn.n_charge and sn.n2 != so.n2):
        raise DimensionMismatch("charging phase entered, left or resized between solves")
    if sn.n1 > so.n1:
        raise DimensionMismatch("driving horizon grew between solves")
    shift = so.n1 - sn.n1
    qb, qc = z_old[old.layout["q_bat"]], z_old[old.layout["q_cab"]]
    sample_map = np.arange(shift, so.n_samples)
    z = np.zeros(new.n)
    if sn.n_charge:
        pc = z_old[old.layout["p_chg"]].copy()
        dt2 = z_old[old.layout["dt2"]].copy()
        charge_map = np.arange(so.n1, so.n_samples)
        remaining = elapsed if (sn.n1 == 0 and shift == 0) else 0.0
        while remaining > 0 and dt2.size:
            if dt2[0] > remaining:
                dt2[0] -= remaining
                remaining = 0.0
            else:
                remaining -= dt2[0]
                dt2 = np.r_[dt2[1:], 0.0]
                pc = np.r_[pc[1:], pc[-1]]
                charge_map = np.r_[charge_map[1:], charge_map[-1]]
        sample_map = np.r_[np.arange(shift, so.n1), charge_map]
        z[new.layout["p_chg"]] = pc
        z[new.layout["dt2"]] = dt2
    z[new.layout["q_bat"]] = qb[sample_map]
    z[new.layout["q_cab"]] = qc[sample_map]
    z[new.layout["eps1"]] = z_old[old.layout["eps1"]]
    z[new.layout["eps2"]] = z_old[old.layout["eps2"]]
    z = np.clip(z, new.lower, new.upper)
    return new.rollout(z), sample_map


def shift_multipliers(prev: Solution, old: NlpProblem, new: NlpProblem,
                      sample_map: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Re-index per-sample multiplier blocks with the warm-start sample map."""
    No, Nn = old.spec.n_samples, new.spec.n_samples
    if len(sample_map) != Nn:
        return None
    lam_o, mu_o = prev.eq_multipliers, prev.ineq_multipliers
    lam = np.concatenate([lam_o[b * No:(b + 1) * No][sample_map] for b in range(3)]
                         + [lam_o[3 * No:]])
    mu = np.concatenate([mu_o[b * No:(b + 1) * No][sample_map] for b in range(3)]
                        + [mu_o[3 * No:]])
    if lam.size != new.n_eq or mu.size != new.n_ineq:
        return None
    return lam, mu
