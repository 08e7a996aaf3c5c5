"""Derivative-free search for pulse sequences meeting the gate conditions.

The search space is the timing/frequency part of a chosen parametrization
(durations, gaps, shared or per-pulse drive frequency, discrete phase
offsets); at every trial point the pulse amplitudes are obtained by a
linear least-squares solve of a subset of the closure and light-shift
conditions (these are linear in the amplitudes), the sequence is scaled so
the mean entangling phase is pi, and the mean infidelity is the objective.
A Nelder-Mead simplex refines each random start and simulated-annealing
perturbations escape plateaus.  Everything is deterministic under a fixed
seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    MODES,
    Pulse,
    PulseSequence,
    TrapConfig,
    CouplingTable,
    SequenceError,
    free_parameter_count,
    total_area,
    validate,
)
from .fidelity import (
    ConditionResiduals,
    NormalizationError,
    _Aggregate,
    averaged_epsilon,
    condition_residuals,
    lightshift_theta_plus,
    normalize_psi,
)

_PENALTY = 1.0e6
_TINY = 1.0e-300

# ---------------------------------------------------------------------------
# Nelder-Mead simplex
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NelderMeadOptions:
    initial_step: float = 0.1
    xtol: float = 1e-12
    ftol: float = 1e-14
    max_iter: int = 2000


@dataclass(frozen=True)
class NelderMeadResult:
    x: np.ndarray
    fun: float
    iterations: int
    converged: bool


def nelder_mead(
    objective, x0, options: NelderMeadOptions | None = None
) -> NelderMeadResult:
    """Standard simplex minimization (reflection, expansion, contraction,
    shrink) with deterministic stable-sort ordering, so ties break toward
    the lowest vertex index and identical inputs give identical
    trajectories."""
    opts = options or NelderMeadOptions()
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    alpha, gamma, rho, sigma = 1.0, 2.0, 0.5, 0.5

    simplex = [x0]
    for i in range(n):
        step = opts.initial_step * (abs(x0[i]) if x0[i] != 0.0 else 1.0)
        v = x0.copy()
        v[i] += step
        simplex.append(v)
    simplex = np.array(simplex)
    values = np.array([objective(v) for v in simplex])

    iterations = 0
    converged = False
    while iterations < opts.max_iter:
        order = np.argsort(values, kind="stable")
        simplex = simplex[order]
        values = values[order]

        f_spread = abs(values[-1] - values[0])
        x_spread = np.max(np.abs(simplex[1:] - simplex[0]))
        if f_spread <= opts.ftol * (1.0 + abs(values[0])) and x_spread <= opts.xtol * (
            1.0 + np.max(np.abs(simplex[0]))
        ):
            converged = True
            break
        iterations += 1

        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + alpha * (centroid - simplex[-1])
        fr = objective(xr)
        if values[0] <= fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[0]:
            xe = centroid + gamma * (centroid - simplex[-1])
            fe = objective(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        xc = centroid + rho * (simplex[-1] - centroid)
        fc = objective(xc)
        if fc < values[-1]:
            simplex[-1], values[-1] = xc, fc
            continue
        for i in range(1, n + 1):
            simplex[i] = simplex[0] + sigma * (simplex[i] - simplex[0])
            values[i] = objective(simplex[i])

    order = np.argsort(values, kind="stable")
    return NelderMeadResult(
        x=simplex[order[0]].copy(),
        fun=float(values[order[0]]),
        iterations=iterations,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# Parametrization families
# ---------------------------------------------------------------------------


class _Family:
    """Maps a flat search vector to per-pulse arrays plus the grouping of
    pulses into amplitude classes (class 0 is the reference amplitude)."""

    kind: str

    def __init__(self, n_pulses: int, dphi: np.ndarray | None = None):
        self.n = n_pulses
        self.dphi_fixed = dphi

    # subclasses define: dim, sample(rng, cfg), unpack(x) -> (t0, tau, omega,
    # dphi, groups) and bounds_penalty(x)

    def groups(self) -> list[list[int]]:
        raise NotImplementedError

    def amp_from_groups(self, group_amps: np.ndarray) -> np.ndarray:
        amp = np.zeros(self.n)
        for k, members in enumerate(self.groups()):
            for i in members:
                amp[i] = group_amps[k]
        return amp


class _SymmetricFamily(_Family):
    """x = [durations (ceil(N/2)), gaps (floor(N/2)), omega]; amplitudes
    are mirrored classes."""

    def __init__(self, n_pulses: int, equal_amplitude: bool = False, dphi=None):
        super().__init__(n_pulses, dphi)
        self.half = (n_pulses + 1) // 2
        self.n_gaps = n_pulses // 2
        self.equal_amplitude = equal_amplitude
        self.kind = "equal-amplitude" if equal_amplitude else "symmetric"
        self.dim = self.half + self.n_gaps + 1

    def groups(self) -> list[list[int]]:
        if self.equal_amplitude:
            return [list(range(self.n))]
        out = []
        for k in range(self.half):
            members = sorted({k, self.n - 1 - k})
            out.append(members)
        return out

    def sample(self, rng, cfg: "SearchConfig") -> np.ndarray:
        d = rng.uniform(*cfg.duration_bounds, size=self.half)
        g = rng.uniform(*cfg.gap_bounds, size=self.n_gaps)
        w = rng.uniform(*cfg.omega_bounds)
        return np.concatenate([d, g, [w]])

    def unpack(self, x):
        d = x[: self.half]
        g = x[self.half : self.half + self.n_gaps]
        w = x[-1]
        durations = np.concatenate([d, d[: self.n - self.half][::-1]])
        gaps = np.concatenate([g, g[: (self.n - 1) - self.n_gaps][::-1]])
        t0 = np.zeros(self.n)
        for i in range(1, self.n):
            t0[i] = t0[i - 1] + durations[i - 1] + gaps[i - 1]
        omega = np.full(self.n, w)
        dphi = self.dphi_fixed if self.dphi_fixed is not None else np.zeros(self.n)
        return t0, durations, omega, dphi

    def violation(self, x) -> float:
        v = 0.0
        v += float(np.sum(np.maximum(1e-4 - x[: self.half], 0.0)))
        v += float(np.sum(np.maximum(-x[self.half : self.half + self.n_gaps], 0.0)))
        v += max(0.0, 1e-3 - x[-1])
        return v


class _ShapedFamily(_Family):
    """Contiguous segments: x = [durations (N), omega]."""

    kind = "shaped"

    def __init__(self, n_pulses: int, dphi=None):
        super().__init__(n_pulses, dphi)
        self.dim = n_pulses + 1

    def groups(self) -> list[list[int]]:
        return [[i] for i in range(self.n)]

    def sample(self, rng, cfg: "SearchConfig") -> np.ndarray:
        d = rng.uniform(*cfg.duration_bounds, size=self.n)
        w = rng.uniform(*cfg.omega_bounds)
        return np.concatenate([d, [w]])

    def unpack(self, x):
        d = np.asarray(x[: self.n])
        t0 = np.concatenate([[0.0], np.cumsum(d)[:-1]])
        omega = np.full(self.n, x[-1])
        dphi = self.dphi_fixed if self.dphi_fixed is not None else np.zeros(self.n)
        return t0, d, omega, dphi

    def violation(self, x) -> float:
        v = float(np.sum(np.maximum(1e-4 - x[: self.n], 0.0)))
        return v + max(0.0, 1e-3 - x[-1])


class _GeneralFamily(_Family):
    """Shared or per-pulse frequency general trains.

    fixed-omega: x = [durations (N), gaps (N-1), omega], dphi = 0.
    general:     x = [durations (N), gaps (N-1), omegas (N), dphis (N-1)]
                 (first pulse's dphi pinned to 0 as the phase origin).
    """

    def __init__(self, n_pulses: int, per_pulse_omega: bool, dphi=None):
        super().__init__(n_pulses, dphi)
        self.per_pulse_omega = per_pulse_omega
        self.kind = "general" if per_pulse_omega else "fixed-omega"
        if per_pulse_omega:
            self.dim = n_pulses + (n_pulses - 1) + n_pulses + (n_pulses - 1)
        else:
            self.dim = n_pulses + (n_pulses - 1) + 1

    def groups(self) -> list[list[int]]:
        return [[i] for i in range(self.n)]

    def sample(self, rng, cfg: "SearchConfig") -> np.ndarray:
        d = rng.uniform(*cfg.duration_bounds, size=self.n)
        g = rng.uniform(*cfg.gap_bounds, size=self.n - 1)
        if self.per_pulse_omega:
            w = rng.uniform(*cfg.omega_bounds, size=self.n)
            ph = rng.uniform(0.0, 2.0 * math.pi, size=self.n - 1)
            return np.concatenate([d, g, w, ph])
        return np.concatenate([d, g, [rng.uniform(*cfg.omega_bounds)]])

    def unpack(self, x):
        n = self.n
        d = np.asarray(x[:n])
        g = np.asarray(x[n : n + n - 1])
        t0 = np.zeros(n)
        for i in range(1, n):
            t0[i] = t0[i - 1] + d[i - 1] + g[i - 1]
        if self.per_pulse_omega:
            omega = np.asarray(x[2 * n - 1 : 3 * n - 1])
            dphi = np.concatenate([[0.0], x[3 * n - 1 :]])
        else:
            omega = np.full(n, x[2 * n - 1])
            dphi = self.dphi_fixed if self.dphi_fixed is not None else np.zeros(n)
        return t0, d, omega, dphi

    def violation(self, x) -> float:
        n = self.n
        v = float(np.sum(np.maximum(1e-4 - np.asarray(x[:n]), 0.0)))
        v += float(np.sum(np.maximum(-np.asarray(x[n : n + n - 1]), 0.0)))
        if self.per_pulse_omega:
            v += float(np.sum(np.maximum(1e-3 - np.asarray(x[2 * n - 1 : 3 * n - 1]), 0.0)))
        else:
            v += max(0.0, 1e-3 - x[2 * n - 1])
        return v


def _make_family(parametrization: str, n_pulses: int, dphi=None) -> _Family:
    if parametrization == "symmetric":
        return _SymmetricFamily(n_pulses, equal_amplitude=False, dphi=dphi)
    if parametrization == "equal-amplitude":
        return _SymmetricFamily(n_pulses, equal_amplitude=True, dphi=dphi)
    if parametrization == "shaped":
        return _ShapedFamily(n_pulses, dphi=dphi)
    if parametrization == "fixed-omega":
        return _GeneralFamily(n_pulses, per_pulse_omega=False, dphi=dphi)
    if parametrization == "general":
        return _GeneralFamily(n_pulses, per_pulse_omega=True, dphi=dphi)
    raise ValueError(f"unknown parametrization {parametrization!r}")


# ---------------------------------------------------------------------------
# Linear amplitude solve
# ---------------------------------------------------------------------------

_CONSTRAINT_NAMES = (
    "dac_plus",
    "dac_minus",
    "das_plus",
    "das_minus",
    "theta_plus",
)


class _CanonicalEngine:
    """Single-pass evaluation of the canonical-coupling metrics for one
    timing configuration, sharing the per-pulse unit quantities between
    the linear amplitude columns and the infidelity.

    Unit quantities are per (mode, pulse) values for unit pulse amplitude:
    the displacement components scale linearly and the area self-terms
    quadratically with the amplitudes.
    """

    def __init__(self, t0, tau, omega, dphi, trap: TrapConfig):
        from .phasespace import _circle_diff, _drift_fn, circle_fn

        self.trap = trap
        n = len(t0)
        self.n = n
        freqs = np.array([trap.omega_c, trap.omega_s])
        eta_ratio = np.array([1.0, trap.eta_s / trap.eta_c])

        # stack both modes: leading axis is the mode
        w0 = freqs[:, None]
        dp = w0 + omega[None, :]
        dm = w0 - omega[None, :]
        scale = eta_ratio[:, None]
        cp = circle_fn(dp, tau[None, :])
        cm = circle_fn(dm, tau[None, :])
        self.u_plus = 1j * scale * np.exp(1j * (dp * t0[None, :] + dphi[None, :])) * cp
        self.u_minus = -1j * scale * np.exp(1j * (dm * t0[None, :] - dphi[None, :])) * cm

        phase = omega * t0 + dphi
        sc2 = scale * scale
        self.b0 = sc2 * (_drift_fn(dp, tau[None, :]) + _drift_fn(dm, tau[None, :]))
        two_w = np.broadcast_to(2.0 * omega[None, :], dp.shape)
        self.b_plus = -sc2 * np.exp(2j * phase)[None, :] * _circle_diff(two_w, dm, tau[None, :])
        self.b_minus = -sc2 * np.exp(-2j * phase)[None, :] * _circle_diff(-two_w, dp, tau[None, :])
        # light-shift unit terms (2/eta_c relative drive)
        self.u_theta = (-1j / trap.eta_c) * np.exp(1j * phase) * circle_fn(omega, tau)

    def constraint_columns(self, groups, names):
        """Linear constraint values per amplitude group (complex matrix,
        constraints x groups)."""
        cols = []
        for members in groups:
            sel = np.zeros(self.n)
            sel[members] = 1.0
            vals = {
                # reference states carry factor -1 relative to the units
                "dac_plus": -np.sum(self.u_plus[0] * sel),
                "dac_minus": -np.sum(self.u_minus[0] * sel),
                "das_plus": -np.sum(self.u_plus[1] * sel),
                "das_minus": -np.sum(self.u_minus[1] * sel),
                "theta_plus": np.sum(self.u_theta * sel),
            }
            cols.append([vals[name] for name in names])
        return np.array(cols, dtype=complex).T

    def mode_sums(self, amp):
        a_plus = amp[None, :] * self.u_plus
        a_minus = amp[None, :] * self.u_minus
        amp2 = (amp * amp)[None, :]
        alpha_plus = np.cumsum(a_plus, axis=1) - a_plus
        alpha_minus = np.cumsum(a_minus, axis=1) - a_minus
        i0 = np.sum(
            np.conj(alpha_plus) * a_plus + np.conj(alpha_minus) * a_minus + amp2 * self.b0,
            axis=1,
        )
        ip = np.sum(np.conj(alpha_minus) * a_plus + amp2 * self.b_plus, axis=1)
        im = np.sum(np.conj(alpha_plus) * a_minus + amp2 * self.b_minus, axis=1)
        dap = np.sum(a_plus, axis=1)
        dam = np.sum(a_minus, axis=1)
        return dap, dam, i0, ip, im

    def normalized_epsilon(self, amp) -> float:
        """Mean infidelity with the entangling phase scaled to pi; when the
        mean phase is not positive, the unscaled value (whose phase term
        penalizes the shortfall) is returned."""
        dap, dam, i0, ip, im = self.mode_sums(amp)
        theta = np.sum(amp * self.u_theta)

        psi = 2.0 * (i0[0].imag - i0[1].imag)
        k_psi = 2.0 * ((ip[0] - np.conj(im[0])) - (ip[1] - np.conj(im[1])))
        w = (1.0 + 2.0 * np.array([self.trap.nbar_c, self.trap.nbar_s])) / 4.0
        disp = 2.0 * float(np.sum(w * (np.abs(dap) ** 2 + np.abs(dam) ** 2)))

        s2 = math.pi / psi if psi > 0.0 else 1.0
        dpsi2 = (s2 * psi - math.pi) ** 2 + 0.5 * abs(s2 * k_psi) ** 2
        var_th = 4.0 * abs(math.sqrt(s2) * theta) ** 2 if psi > 0 else 4.0 * abs(theta) ** 2
        return s2 * disp + dpsi2 / 9.0 + var_th / 5.0


def _constraint_values(t0, tau, amp, omega, dphi, trap, coupling, names):
    """Selected closure / light-shift constraint values for given amplitudes.

    All of these are linear in the per-pulse amplitudes.
    """
    agg = _Aggregate.from_arrays(t0, tau, amp, omega, dphi, trap, coupling)
    res = agg.residuals(coupling)
    table = res.as_dict()
    return np.array([table[name] for name in names], dtype=complex)


def solve_amplitudes(
    template: PulseSequence,
    trap: TrapConfig,
    coupling: CouplingTable,
    constraints: tuple[str, ...] = ("dac_plus", "dac_minus", "theta_plus"),
    max_rows: int | None = None,
    amplitude_groups: list[list[int]] | None = None,
) -> tuple[np.ndarray, bool]:
    """Amplitudes zeroing (in least squares) a subset of the linear
    conditions, with the first amplitude class fixed at 1 as the scale.

    template supplies timings, frequencies and phase offsets; its
    amplitudes are ignored.  amplitude_groups collects pulses sharing one
    amplitude (default: one group per pulse).  Real and imaginary parts of
    the selected constraints are stacked in order and truncated to
    max_rows (default N-1).  Returns (per-pulse amplitudes, degenerate)
    where degenerate marks a rank-deficient system solved in minimum norm.
    """
    for name in constraints:
        if name not in _CONSTRAINT_NAMES:
            raise ValueError(f"unknown constraint {name!r}")
    n = template.n_pulses
    groups = amplitude_groups if amplitude_groups is not None else [[i] for i in range(n)]
    t0 = np.array([p.t_start for p in template.pulses])
    tau = np.array([p.duration for p in template.pulses])
    omega = np.array([p.omega for p in template.pulses])
    dphi = np.array([p.dphi for p in template.pulses])

    cols = []
    for members in groups:
        unit = np.zeros(n)
        unit[members] = 1.0
        cols.append(_constraint_values(t0, tau, unit, omega, dphi, trap, coupling, constraints))
    m = np.array(cols).T  # constraints x groups, complex

    rows_re_im = np.concatenate([m.real, m.imag], axis=0)
    # interleave Re/Im per constraint so truncation keeps whole conditions first
    order = np.arange(2 * len(constraints)).reshape(2, -1).T.ravel()
    rows = rows_re_im[order]
    limit = max_rows if max_rows is not None else max(1, n - 1)
    rows = rows[:limit]

    if len(groups) == 1:
        return _expand_group_amps(groups, n, np.array([1.0])), False

    a = rows[:, 1:]
    b = -rows[:, 0]
    solution, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    degenerate = rank < a.shape[1]
    group_amps = np.concatenate([[1.0], solution])
    return _expand_group_amps(groups, n, group_amps), degenerate


def _expand_group_amps(groups, n, group_amps) -> np.ndarray:
    amp = np.zeros(n)
    for k, members in enumerate(groups):
        for i in members:
            amp[i] = group_amps[k]
    return amp


# ---------------------------------------------------------------------------
# Search configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnealSchedule:
    t_start: float = 1.0  # decades of infidelity
    cooling: float = 0.95
    steps: int = 200
    step_scale: float = 0.08


@dataclass(frozen=True)
class SearchConfig:
    n_pulses: int
    parametrization: str = "symmetric"
    seed: int = 0
    n_restarts: int = 8
    duration_bounds: tuple[float, float] = (0.02, 0.45)
    gap_bounds: tuple[float, float] = (0.0, 0.45)
    omega_bounds: tuple[float, float] = (4.0, 24.0)
    dphi_grid: tuple[float, ...] = (0.0,)
    max_total_tau: float | None = None
    eps_threshold: float | None = None
    use_linear_solve: bool = True
    constraints: tuple[str, ...] = ("dac_plus", "dac_minus", "theta_plus")
    max_rows: int | None = None
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    nm: NelderMeadOptions = field(default_factory=lambda: NelderMeadOptions(max_iter=4000))

    def threshold(self) -> float:
        """Default acceptance threshold: 1e-8, relaxed to 3e-5 for
        parametrizations with fewer than seven free parameters."""
        if self.eps_threshold is not None:
            return self.eps_threshold
        if free_parameter_count(self.parametrization, self.n_pulses) < 7:
            return 3.0e-5
        return 1.0e-8


@dataclass(frozen=True)
class Solution:
    """A sequence meeting the configured infidelity threshold, normalized
    to mean entangling phase pi, with its quality numbers and provenance."""

    sequence: PulseSequence
    eps_avg: float
    residuals: ConditionResiduals
    total_duration: float
    total_area: float
    parametrization: str
    n_pulses: int
    provenance: dict

    def summary_row(self) -> dict:
        return {
            "n_pulses": self.n_pulses,
            "tau": self.total_duration,
            "tau_over_period": self.total_duration / (2.0 * math.pi),
            "area": self.total_area,
            "eps": self.eps_avg,
            "parametrization": self.parametrization,
        }


def _is_canonical(coupling: CouplingTable) -> bool:
    from .core import canonical_coupling

    ref = canonical_coupling()
    return coupling.force == ref.force and coupling.light_shift == ref.light_shift


class _Objective:
    """Mean normalized infidelity as a function of the timing vector."""

    def __init__(self, family: _Family, trap, coupling, cfg: SearchConfig):
        self.family = family
        self.trap = trap
        self.coupling = coupling
        self.cfg = cfg
        self.groups = family.groups()
        self.evals = 0
        self.fast = _is_canonical(coupling)
        if len(self.groups) > 1:
            # Re/Im interleaving order for the constraint rows
            self._row_order = (
                np.arange(2 * len(cfg.constraints)).reshape(2, -1).T.ravel()
            )
            self._row_limit = (
                cfg.max_rows if cfg.max_rows is not None else max(1, family.n - 1)
            )

    def _solve_amps(self, columns: np.ndarray) -> np.ndarray:
        rows = np.concatenate([columns.real, columns.imag], axis=0)
        rows = rows[self._row_order][: self._row_limit]
        a = rows[:, 1:]
        b = -rows[:, 0]
        # normal equations with a tiny ridge; orders of magnitude faster
        # than lstsq for these tiny systems and the regularization keeps
        # degenerate trial points finite for the outer search
        ata = a.T @ a
        ata[np.diag_indices_from(ata)] += 1e-14 * (np.trace(ata) + 1e-30)
        try:
            sol = np.linalg.solve(ata, a.T @ b)
        except np.linalg.LinAlgError:
            sol, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
        return self.family.amp_from_groups(np.concatenate([[1.0], sol]))

    def amplitudes(self, t0, tau, omega, dphi) -> np.ndarray:
        if not self.cfg.use_linear_solve or len(self.groups) == 1:
            return self.family.amp_from_groups(np.ones(len(self.groups)))
        if self.fast:
            engine = _CanonicalEngine(t0, tau, omega, dphi, self.trap)
            return self._solve_amps(engine.constraint_columns(self.groups, self.cfg.constraints))
        cols = [
            _constraint_values(
                t0,
                tau,
                _expand_group_amps([members], self.family.n, np.ones(1)),
                omega,
                dphi,
                self.trap,
                self.coupling,
                self.cfg.constraints,
            )
            for members in self.groups
        ]
        return self._solve_amps(np.array(cols).T)

    def __call__(self, x) -> float:
        self.evals += 1
        bad = self.family.violation(x)
        if bad > 0.0:
            return _PENALTY * (1.0 + bad)
        t0, tau, omega, dphi = self.family.unpack(x)

        if self.fast:
            engine = _CanonicalEngine(t0, tau, omega, dphi, self.trap)
            if self.cfg.use_linear_solve and len(self.groups) > 1:
                amp = self._solve_amps(
                    engine.constraint_columns(self.groups, self.cfg.constraints)
                )
            else:
                amp = self.family.amp_from_groups(np.ones(len(self.groups)))
            if not np.all(np.isfinite(amp)):
                return _PENALTY
            eps = engine.normalized_epsilon(amp)
        else:
            amp = self.amplitudes(t0, tau, omega, dphi)
            if not np.all(np.isfinite(amp)):
                return _PENALTY
            agg = _Aggregate.from_arrays(t0, tau, amp, omega, dphi, self.trap, self.coupling)
            psi = agg.psi_mean()
            if psi <= 0.0:
                eps = agg.averaged_epsilon()
            else:
                eps = agg.averaged_epsilon(scale=math.sqrt(math.pi / psi))

        cap = self.cfg.max_total_tau
        if cap is not None:
            total = t0[-1] + tau[-1]
            if total > cap:
                eps += 10.0 * (total - cap) ** 2 + 0.1
        return eps

    def full_vector(self, x) -> np.ndarray:
        """Timing vector -> full vector [timings, rel amplitudes, omega]
        with the amplitudes from the inner linear solve."""
        t0, tau, omega, dphi = self.family.unpack(x)
        amp = self.amplitudes(t0, tau, omega, dphi)
        rel = [amp[members[0]] for members in self.groups[1:]]
        return np.concatenate([x[:-1], rel, [x[-1]]])


def _solution_from_full(
    family: _Family,
    x_full,
    trap: TrapConfig,
    coupling: CouplingTable,
    seed_info: dict,
) -> Solution | None:
    timing, group_amps = _split_full_vector(family, x_full)
    t0, tau, omega, dphi = family.unpack(timing)
    amp = family.amp_from_groups(group_amps)
    pulses = tuple(
        Pulse(float(t0[i]), float(tau[i]), float(amp[i]), float(omega[i]), float(dphi[i]))
        for i in range(family.n)
    )
    try:
        seq = validate(PulseSequence(pulses, tag=family.kind))
        seq, scale = normalize_psi(seq, trap, coupling)
    except (SequenceError, NormalizationError):
        return None
    eps = averaged_epsilon(seq, trap, coupling)
    res = condition_residuals(seq, trap, coupling)
    return Solution(
        sequence=seq,
        eps_avg=eps,
        residuals=res,
        total_duration=seq.total_duration,
        total_area=total_area(seq),
        parametrization=family.kind,
        n_pulses=family.n,
        provenance=dict(seed_info, scale=scale, x=[float(v) for v in x_full]),
    )


def _log10(value: float) -> float:
    return math.log10(max(value, _TINY))


def anneal_search(
    config: SearchConfig, trap: TrapConfig, coupling: CouplingTable
) -> list[Solution]:
    """Random multistart search: sample timings, refine with the simplex,
    escape plateaus with Metropolis annealing on log10(eps), polish, and
    collect deduplicated solutions below the threshold, sorted by total
    pulse area then duration."""
    threshold = config.threshold()
    solutions: list[Solution] = []

    for restart in range(config.n_restarts):
        rng = np.random.default_rng([config.seed, restart])
        dphi = None
        if tuple(config.dphi_grid) != (0.0,):
            dphi = rng.choice(config.dphi_grid, size=config.n_pulses)
        family = _make_family(config.parametrization, config.n_pulses, dphi=dphi)
        objective = _Objective(family, trap, coupling, config)

        x = family.sample(rng, config)
        if config.max_total_tau is not None:
            t0, tau, _, _ = family.unpack(x)
            total = t0[-1] + tau[-1]
            if total > config.max_total_tau:
                # shrink timing values into the budget, keep omega
                x = x.copy()
                x[:-1] *= 0.9 * config.max_total_tau / total
        result = nelder_mead(objective, x, config.nm)
        x, f = result.x, result.fun

        best_x, best_f = x.copy(), f
        temperature = config.anneal.t_start
        widths = np.maximum(np.abs(best_x), 0.05)
        for _ in range(config.anneal.steps):
            candidate = x + rng.normal(size=x.size) * widths * (
                config.anneal.step_scale * temperature
            )
            fc = objective(candidate)
            accept = fc < f or rng.random() < math.exp(
                -max(_log10(fc) - _log10(f), 0.0) / max(temperature, 1e-6)
            )
            if accept:
                x, f = candidate, fc
            if f < best_f:
                best_x, best_f = x.copy(), f
            temperature *= config.anneal.cooling

        polish = nelder_mead(
            objective, best_x, replace(config.nm, initial_step=1e-3)
        )
        if polish.fun < best_f:
            best_x, best_f = polish.x, polish.fun

        # promising points get a full-parameter least-squares finish,
        # which converges quadratically onto the solution manifold
        if best_f < max(1e4 * threshold, 1e-3):
            x_full, f_full = refine_parameters(
                config.parametrization,
                config.n_pulses,
                objective.full_vector(best_x),
                trap,
                coupling,
                NelderMeadOptions(initial_step=1e-4, max_iter=400),
                dphi=dphi,
            )
            if f_full < threshold:
                sol = _solution_from_full(
                    family,
                    x_full,
                    trap,
                    coupling,
                    {
                        "seed": config.seed,
                        "restart": restart,
                        "objective_evals": objective.evals,
                        "nm_iterations": result.iterations + polish.iterations,
                    },
                )
                if sol is not None and sol.eps_avg < threshold:
                    solutions.append(sol)

    return _dedupe(solutions)


def _dedupe(solutions: list[Solution]) -> list[Solution]:
    kept: list[Solution] = []
    for sol in sorted(solutions, key=lambda s: (s.total_area, s.total_duration)):
        duplicate = False
        for other in kept:
            if (
                sol.n_pulses == other.n_pulses
                and abs(sol.total_duration - other.total_duration) < 1e-4
                and abs(sol.total_area - other.total_area) < 1e-3 * (1 + other.total_area)
            ):
                duplicate = True
                break
        if not duplicate:
            kept.append(sol)
    return kept


# ---------------------------------------------------------------------------
# Frequency retuning and sensitivity
# ---------------------------------------------------------------------------

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def retune_frequency(
    seq: PulseSequence,
    trap: TrapConfig,
    coupling: CouplingTable,
    window: tuple[float, float],
    iterations: int = 200,
) -> tuple[float, complex]:
    """Golden-section minimization of |theta+|^2 over a shared drive
    frequency, all other parameters held fixed.

    Raises ValueError when the sequence has per-pulse frequencies or when
    no interior minimum exists in the window.
    """
    omegas = {p.omega for p in seq.pulses}
    if len(omegas) != 1:
        raise ValueError("retuning requires a shared drive frequency")
    lo, hi = window
    if not lo < hi:
        raise ValueError("empty frequency window")

    raw = np.array([p.amplitude for p in seq.pulses])

    def theta_sq(w: float) -> float:
        shifted = PulseSequence(
            tuple(replace(p, omega=w) for p in seq.pulses), tag=seq.tag
        )
        th = lightshift_theta_plus(shifted, (2.0 / trap.eta_c) * raw)
        return abs(th) ** 2

    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = theta_sq(c), theta_sq(d)
    for _ in range(iterations):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = theta_sq(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = theta_sq(d)
        if b - a < 1e-14 * max(1.0, abs(b)):
            break
    omega_star = c if fc < fd else d
    f_star = min(fc, fd)
    if f_star > min(theta_sq(lo), theta_sq(hi)) + 1e-30:
        raise ValueError("no interior minimum of |theta+|^2 in the window")

    shifted = PulseSequence(tuple(replace(p, omega=omega_star) for p in seq.pulses), tag=seq.tag)
    theta = lightshift_theta_plus(shifted, (2.0 / trap.eta_c) * raw)
    return float(omega_star), theta


@dataclass(frozen=True)
class SensitivityResult:
    parameter: str
    curvature: float
    r_squared: float
    rows: list[tuple[float, float]]
    quadratic: bool


def _perturbed(seq: PulseSequence, kind: str, index: int | None, sigma: float) -> PulseSequence:
    factor = 1.0 + sigma
    pulses = list(seq.pulses)
    targets = range(len(pulses)) if index is None else [index]
    for i in targets:
        p = pulses[i]
        if kind == "duration":
            pulses[i] = replace(p, duration=p.duration * factor)
        elif kind == "amplitude":
            pulses[i] = replace(p, amplitude=p.amplitude * factor)
        elif kind == "omega":
            pulses[i] = replace(p, omega=p.omega * factor)
        else:
            raise ValueError(f"unknown parameter kind {kind!r}")
    return PulseSequence(tuple(pulses), tag=seq.tag)


def sensitivity_scan(
    seq: PulseSequence,
    trap: TrapConfig,
    coupling: CouplingTable,
    parameter: str = "duration",
    index: int | None = None,
    sigmas=None,
) -> SensitivityResult:
    """Quadratic response of the mean infidelity to a fractional parameter
    error: scale the selected parameter by (1+sigma) for each sigma, then
    fit eps = eps0 + c*sigma^2 by least squares.

    The sequence is NOT renormalized after the perturbation (the error
    model is a miscalibration of a tuned gate).  Fits with R^2 < 0.99 are
    flagged as non-quadratic.
    """
    if sigmas is None:
        base = np.logspace(-4, -2, 9)
        sigmas = np.concatenate([-base[::-1], base])
    rows = []
    for sigma in sigmas:
        perturbed = validate(_perturbed(seq, parameter, index, float(sigma)))
        rows.append((float(sigma), averaged_epsilon(perturbed, trap, coupling)))

    s2 = np.array([r[0] ** 2 for r in rows])
    eps = np.array([r[1] for r in rows])
    design = np.stack([np.ones_like(s2), s2], axis=1)
    coef, _, _, _ = np.linalg.lstsq(design, eps, rcond=None)
    fit = design @ coef
    ss_res = float(np.sum((eps - fit) ** 2))
    ss_tot = float(np.sum((eps - eps.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    label = parameter if index is None else f"{parameter}[{index}]"
    return SensitivityResult(
        parameter=label,
        curvature=float(coef[1]),
        r_squared=r2,
        rows=rows,
        quadratic=r2 >= 0.99,
    )


# ---------------------------------------------------------------------------
# Direct parameter polishing (all parameters free)
# ---------------------------------------------------------------------------


def _split_full_vector(family: _Family, x):
    """Full-vector layout [timing..., rel_amplitudes..., omega] ->
    (timing-with-omega, group amplitudes)."""
    n_amp = len(family.groups()) - 1
    timing_len = family.dim - 1
    timing = np.concatenate([x[:timing_len], [x[-1]]])
    if n_amp:
        group_amps = np.concatenate([[1.0], x[timing_len : timing_len + n_amp]])
    else:
        group_amps = np.ones(1)
    return timing, group_amps


def _weighted_residuals(engine: _CanonicalEngine, amp, trap: TrapConfig) -> np.ndarray:
    """Real residual vector whose sum of squares is the normalized mean
    infidelity (the identically-satisfied mean-phase component omitted)."""
    dap, dam, i0, ip, im = engine.mode_sums(amp)
    theta = np.sum(amp * engine.u_theta)
    psi = 2.0 * (i0[0].imag - i0[1].imag)
    if psi <= 0.0:
        return np.full(12, 1e3 * (1.0 + abs(psi)))
    s2 = math.pi / psi
    s = math.sqrt(s2)
    k_psi = 2.0 * ((ip[0] - np.conj(im[0])) - (ip[1] - np.conj(im[1])))
    wc = math.sqrt(2.0 * (1.0 + 2.0 * trap.nbar_c) / 4.0)
    ws = math.sqrt(2.0 * (1.0 + 2.0 * trap.nbar_s) / 4.0)
    kw = s2 / (3.0 * math.sqrt(2.0))
    tw = s * math.sqrt(4.0 / 5.0)
    return np.array(
        [
            wc * s * dap[0].real,
            wc * s * dap[0].imag,
            wc * s * dam[0].real,
            wc * s * dam[0].imag,
            ws * s * dap[1].real,
            ws * s * dap[1].imag,
            ws * s * dam[1].real,
            ws * s * dam[1].imag,
            kw * k_psi.real,
            kw * k_psi.imag,
            tw * theta.real,
            tw * theta.imag,
        ]
    )


def refine_parameters(
    parametrization: str,
    n_pulses: int,
    x0,
    trap: TrapConfig,
    coupling: CouplingTable,
    options: NelderMeadOptions | None = None,
    least_squares_finish: bool = True,
    dphi=None,
) -> tuple[np.ndarray, float]:
    """Local refinement of a full parameter vector (timings, relative
    amplitudes and frequency) against the normalized mean infidelity.

    Vector layouts:
      symmetric:        [durations, gaps, rel_amplitudes, omega]
      equal-amplitude:  [durations, gaps, omega]
      shaped:           [durations, rel_amplitudes, omega]
    A simplex pass handles the rough approach; when the coupling is the
    canonical table a Levenberg-Marquardt pass on the weighted residual
    vector then converges quadratically onto the solution manifold.
    Returns (refined vector, achieved eps).
    """
    family = _make_family(parametrization, n_pulses, dphi=dphi)

    def objective(x):
        timing, group_amps = _split_full_vector(family, x)
        bad = family.violation(timing)
        if bad > 0.0:
            return _PENALTY * (1.0 + bad)
        t0, tau, omega, dphi = family.unpack(timing)
        amp = family.amp_from_groups(group_amps)
        if _is_canonical(coupling):
            return _CanonicalEngine(t0, tau, omega, dphi, trap).normalized_epsilon(amp)
        agg = _Aggregate.from_arrays(t0, tau, amp, omega, dphi, trap, coupling)
        psi = agg.psi_mean()
        if psi <= 0.0:
            return agg.averaged_epsilon()
        return agg.averaged_epsilon(scale=math.sqrt(math.pi / psi))

    opts = options or NelderMeadOptions(initial_step=1e-3, max_iter=20000)
    result = nelder_mead(objective, np.asarray(x0, dtype=float), opts)
    x_best, f_best = result.x, result.fun

    if least_squares_finish and _is_canonical(coupling):
        from scipy.optimize import least_squares

        def residuals(x):
            timing, group_amps = _split_full_vector(family, x)
            if family.violation(timing) > 0.0:
                return np.full(12, 1e3)
            t0, tau, omega, dphi = family.unpack(timing)
            amp = family.amp_from_groups(group_amps)
            engine = _CanonicalEngine(t0, tau, omega, dphi, trap)
            return _weighted_residuals(engine, amp, trap)

        try:
            ls = least_squares(
                residuals, x_best, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                max_nfev=20000,
            )
            f_ls = objective(ls.x)
            if f_ls < f_best:
                x_best, f_best = ls.x, f_ls
        except Exception:
            pass

    return np.asarray(x_best, dtype=float), float(f_best)
