"""Gate-level bookkeeping: per-state phases, infidelity and residuals.

Per spin state m the acquired phase is

    Phi_m(phi_o) = sum_l Im[I_lm(phi_o)] + 2 Re[e^{i phi_o} theta+_m]

and the gate quality is judged by the entangling phase
Psi = Phi_uu + Phi_dd - Phi_ud - Phi_du (target pi), the single-qubit
rotation angles theta_{1,2} = ((Phi_uu - Phi_dd) +- (Phi_ud - Phi_du))/2,
and the residual motional displacements.  The small-error infidelity is

    eps = sum_{l,m} (1+2*nbar_l)/4 |dalpha_lm|^2 + dPsi^2/9
          + (dtheta1^2 + dtheta2^2)/5

with dtheta_j measured from the uniform-phi_o mean of theta_j (constant
rotations are compensable by calibrated single-qubit gates).  Values above
0.1 are outside the small-error expansion and flagged as indicative only.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    MODES,
    PSI_SIGN,
    SPIN_FLIP,
    SPIN_STATES,
    CouplingTable,
    PulseSequence,
    TrapConfig,
    validate,
)
from .phasespace import _orbit_terms, accumulate_orbit, circle_fn, lightshift_theta_plus

#: Signs of Phi_m in the single-qubit rotation angles.
_Q1 = {"uu": 0.5, "dd": -0.5, "ud": 0.5, "du": -0.5}
_Q2 = {"uu": 0.5, "dd": -0.5, "ud": -0.5, "du": 0.5}

#: Infidelities above this are outside the quadratic error expansion.
INDICATIVE_THRESHOLD = 0.1


class NormalizationError(ValueError):
    """The entangling phase cannot be scaled to pi by a positive amplitude."""


@dataclass(frozen=True)
class _ModeSums:
    """Whole-sequence orbit quantities for one (state, mode) drive."""

    dap: complex
    dam: complex
    I0: complex
    Ip: complex
    Im: complex


@dataclass(frozen=True)
class GateMetrics:
    """Everything the infidelity formula needs, at one optical phase."""

    phi_o: float
    delta_alpha: dict[str, dict[str, complex]]
    Phi: dict[str, float]
    Psi: float
    theta1: float
    theta2: float
    dPsi: float
    epsilon: float
    indicative: bool


@dataclass(frozen=True)
class ConditionResiduals:
    """The seven complex numbers that must vanish for a phase-insensitive
    gate: four loop closures, the light-shift amplitude, and the two
    area asymmetries I+ - conj(I-)."""

    dac_plus: complex
    dac_minus: complex
    das_plus: complex
    das_minus: complex
    theta_plus: complex
    area_c: complex
    area_s: complex

    def as_dict(self) -> dict[str, complex]:
        return {
            "dac_plus": self.dac_plus,
            "dac_minus": self.dac_minus,
            "das_plus": self.das_plus,
            "das_minus": self.das_minus,
            "theta_plus": self.theta_plus,
            "area_c": self.area_c,
            "area_s": self.area_s,
        }

    def max_abs(self) -> float:
        return max(abs(v) for v in self.as_dict().values())


def _mode_sums_from_arrays(t0, tau, amp, omega, dphi, mode_freq) -> _ModeSums:
    a_plus, a_minus, b0, b_plus, b_minus = _orbit_terms(t0, tau, amp, omega, dphi, mode_freq)
    alpha_plus = np.concatenate(([0.0 + 0.0j], np.cumsum(a_plus)[:-1]))
    alpha_minus = np.concatenate(([0.0 + 0.0j], np.cumsum(a_minus)[:-1]))
    return _ModeSums(
        dap=complex(np.sum(a_plus)),
        dam=complex(np.sum(a_minus)),
        I0=complex(np.sum(np.conj(alpha_plus) * a_plus + np.conj(alpha_minus) * a_minus + b0)),
        Ip=complex(np.sum(np.conj(alpha_minus) * a_plus + b_plus)),
        Im=complex(np.sum(np.conj(alpha_plus) * a_minus + b_minus)),
    )


def _transform(base: _ModeSums, factor: complex) -> _ModeSums:
    """Orbit quantities for a drive whose per-pulse amplitudes and phase
    offsets are those of `base` times a complex factor.

    The co-rotating parts pick up the factor, the counter-rotating parts
    its conjugate, and the quadratic area terms the corresponding squares.
    """
    if factor == 0:
        return _ModeSums(0j, 0j, 0j, 0j, 0j)
    f = complex(factor)
    fc = f.conjugate()
    return _ModeSums(
        dap=f * base.dap,
        dam=fc * base.dam,
        I0=(f * fc) * base.I0,
        Ip=f * f * base.Ip,
        Im=fc * fc * base.Im,
    )


class _Aggregate:
    """Per-state, per-mode orbit sums plus light-shift amplitudes; all the
    public metrics are assembled from this."""

    def __init__(
        self,
        trap: TrapConfig,
        sums: dict[tuple[str, str], _ModeSums],
        theta: dict[str, complex],
    ):
        self.trap = trap
        self.sums = sums
        self.theta = theta

    @classmethod
    def from_arrays(cls, t0, tau, amp, omega, dphi, trap, coupling) -> "_Aggregate":
        base = {
            mode: _mode_sums_from_arrays(
                t0, tau, trap.eta(mode) / trap.eta_c * amp, omega, dphi,
                trap.mode_frequency(mode),
            )
            for mode in MODES
        }
        phase = omega * t0 + dphi
        # light-shift drive is stronger than the effective force drive by
        # 2/eta_c: sequence amplitudes are in effective (COM force) units
        theta_base = complex(
            np.sum(-1j / trap.eta_c * amp * np.exp(1j * phase) * circle_fn(omega, tau))
        )
        sums = {}
        theta = {}
        for state in SPIN_STATES:
            for mode in MODES:
                # effective amplitude factor is -g relative to the base
                # (eta/2 per unit pulse amplitude) drive
                sums[(state, mode)] = _transform(base[mode], -coupling.force_factor(state, mode))
            theta[state] = coupling.ls_factor(state) * theta_base
        return cls(trap, sums, theta)

    @classmethod
    def from_per_pulse_factors(
        cls,
        seq: PulseSequence,
        trap: TrapConfig,
        force_factors: dict[tuple[str, str], np.ndarray],
        ls_factors: dict[str, np.ndarray],
    ) -> "_Aggregate":
        """General path with per-pulse complex coupling factors (used by the
        spin-echo composite, where the two passes couple differently)."""
        sums = {}
        theta = {}
        amp = np.array([p.amplitude for p in seq.pulses])
        for state in SPIN_STATES:
            for mode in MODES:
                g = np.asarray(force_factors[(state, mode)], dtype=complex)
                eff = -(trap.eta(mode) / trap.eta_c) * np.abs(g) * amp
                offs = np.where(np.abs(g) > 0, np.angle(np.where(g == 0, 1.0, g)), 0.0)
                summary = accumulate_orbit(seq, trap, mode, eff, dphi_offsets=offs)
                sums[(state, mode)] = _ModeSums(
                    dap=summary.delta_alpha_plus,
                    dam=summary.delta_alpha_minus,
                    I0=summary.I0,
                    Ip=summary.I_plus,
                    Im=summary.I_minus,
                )
            theta[state] = lightshift_theta_plus(
                seq,
                (2.0 / trap.eta_c) * np.asarray(ls_factors[state], dtype=complex) * amp,
            )
        return cls(trap, sums, theta)

    # -- fixed optical phase -------------------------------------------------

    def metrics_at(self, phi_o: float) -> GateMetrics:
        zp = cmath.exp(1j * phi_o)
        z2 = zp * zp
        delta_alpha: dict[str, dict[str, complex]] = {}
        phi: dict[str, float] = {}
        phi_mean: dict[str, float] = {}
        disp = 0.0
        for state in SPIN_STATES:
            delta_alpha[state] = {}
            total = 0.0
            mean = 0.0
            for mode in MODES:
                sm = self.sums[(state, mode)]
                da = zp * sm.dap + sm.dam / zp
                delta_alpha[state][mode] = da
                w = (1.0 + 2.0 * self.trap.nbar(mode)) / 4.0
                disp += w * abs(da) ** 2
                total += (sm.I0 + z2 * sm.Ip + sm.Im / z2).imag
                mean += sm.I0.imag
            total += 2.0 * (zp * self.theta[state]).real
            phi[state] = total
            phi_mean[state] = mean

        psi = sum(PSI_SIGN[m] * phi[m] for m in SPIN_STATES)
        theta1 = sum(_Q1[m] * phi[m] for m in SPIN_STATES)
        theta2 = sum(_Q2[m] * phi[m] for m in SPIN_STATES)
        theta1_mean = sum(_Q1[m] * phi_mean[m] for m in SPIN_STATES)
        theta2_mean = sum(_Q2[m] * phi_mean[m] for m in SPIN_STATES)

        dpsi = psi - math.pi
        dth1 = theta1 - theta1_mean
        dth2 = theta2 - theta2_mean
        eps = disp + dpsi**2 / 9.0 + (dth1**2 + dth2**2) / 5.0
        return GateMetrics(
            phi_o=phi_o,
            delta_alpha=delta_alpha,
            Phi=phi,
            Psi=psi,
            theta1=theta1,
            theta2=theta2,
            dPsi=dpsi,
            epsilon=eps,
            indicative=eps > INDICATIVE_THRESHOLD,
        )

    # -- uniform phi_o average -----------------------------------------------

    def _harmonics(self):
        """Mean Psi, and the coherent first/second harmonic amplitudes of
        Psi, theta1, theta2 over the optical phase."""
        psi_mean = 0.0
        k_psi = 0j
        t_psi = 0j
        k1 = k2 = 0j
        t1 = t2 = 0j
        m1 = m2 = 0.0
        for state in SPIN_STATES:
            s = PSI_SIGN[state]
            q1 = _Q1[state]
            q2 = _Q2[state]
            th = self.theta[state]
            t_psi += s * th
            t1 += q1 * th
            t2 += q2 * th
            for mode in MODES:
                sm = self.sums[(state, mode)]
                k = sm.Ip - sm.Im.conjugate()
                psi_mean += s * sm.I0.imag
                m1 += q1 * sm.I0.imag
                m2 += q2 * sm.I0.imag
                k_psi += s * k
                k1 += q1 * k
                k2 += q2 * k
        return psi_mean, k_psi, t_psi, (m1, t1, k1), (m2, t2, k2)

    def displacement_power(self) -> float:
        """Thermally weighted sum_{l,m} (|da+|^2 + |da-|^2), i.e. the
        uniform-phi_o mean of the displacement infidelity term."""
        disp = 0.0
        for state in SPIN_STATES:
            for mode in MODES:
                sm = self.sums[(state, mode)]
                w = (1.0 + 2.0 * self.trap.nbar(mode)) / 4.0
                disp += w * (abs(sm.dap) ** 2 + abs(sm.dam) ** 2)
        return disp

    def psi_mean(self) -> float:
        return self._harmonics()[0]

    def averaged_epsilon(self, scale: float = 1.0) -> float:
        """Uniform-phi_o mean of the infidelity, optionally with all pulse
        amplitudes multiplied by `scale` (orbit terms scale quadratically,
        light-shift terms linearly)."""
        psi_mean, k_psi, t_psi, h1, h2 = self._harmonics()
        s2 = scale * scale
        disp = self.displacement_power() * s2
        var_psi = 0.5 * abs(s2 * k_psi) ** 2 + 2.0 * abs(scale * t_psi) ** 2
        dpsi2 = (s2 * psi_mean - math.pi) ** 2 + var_psi
        var_th = 0.0
        for _, t, k in (h1, h2):
            var_th += 2.0 * abs(scale * t) ** 2 + 0.5 * abs(s2 * k) ** 2
        return disp + dpsi2 / 9.0 + var_th / 5.0

    def normalized_averaged_epsilon(self) -> tuple[float, float]:
        """Closed-form mean infidelity after scaling amplitudes so the mean
        entangling phase equals pi.  Returns (eps, scale); raises
        NormalizationError when the mean phase is not positive."""
        psi_mean = self.psi_mean()
        if psi_mean <= 0.0:
            raise NormalizationError(f"mean entangling phase {psi_mean} is not positive")
        scale = math.sqrt(math.pi / psi_mean)
        return self.averaged_epsilon(scale=scale), scale

    def residuals(self, coupling: CouplingTable) -> ConditionResiduals:
        """Seven closure/area/light-shift conditions, evaluated for the first
        spin state that actually drives each mode."""

        def ref_state(mode: str) -> str | None:
            for state in SPIN_STATES:
                if coupling.force_factor(state, mode) != 0:
                    return state
            return None

        vals = {}
        for mode, names in (("c", ("dac_plus", "dac_minus", "area_c")),
                            ("s", ("das_plus", "das_minus", "area_s"))):
            state = ref_state(mode)
            if state is None:
                sm = _ModeSums(0j, 0j, 0j, 0j, 0j)
            else:
                sm = self.sums[(state, mode)]
            vals[names[0]] = sm.dap
            vals[names[1]] = sm.dam
            vals[names[2]] = sm.Ip - sm.Im.conjugate()
        theta = 0j
        for state in SPIN_STATES:
            if coupling.ls_factor(state) != 0:
                theta = self.theta[state]
                break
        return ConditionResiduals(
            dac_plus=vals["dac_plus"],
            dac_minus=vals["dac_minus"],
            das_plus=vals["das_plus"],
            das_minus=vals["das_minus"],
            theta_plus=theta,
            area_c=vals["area_c"],
            area_s=vals["area_s"],
        )


def _aggregate(seq: PulseSequence, trap: TrapConfig, coupling: CouplingTable) -> _Aggregate:
    seq = validate(seq)
    t0 = np.array([p.t_start for p in seq.pulses])
    tau = np.array([p.duration for p in seq.pulses])
    amp = np.array([p.amplitude for p in seq.pulses])
    omega = np.array([p.omega for p in seq.pulses])
    dphi = np.array([p.dphi for p in seq.pulses])
    return _Aggregate.from_arrays(t0, tau, amp, omega, dphi, trap, coupling)


def gate_metrics(
    seq: PulseSequence, trap: TrapConfig, coupling: CouplingTable, phi_o: float = 0.0
) -> GateMetrics:
    """Full gate metrics (displacements, phases, infidelity) at one value
    of the optical phase."""
    return _aggregate(seq, trap, coupling).metrics_at(phi_o)


def averaged_epsilon(seq: PulseSequence, trap: TrapConfig, coupling: CouplingTable) -> float:
    """Closed-form mean infidelity over a uniform optical-phase distribution."""
    return _aggregate(seq, trap, coupling).averaged_epsilon()


def condition_residuals(
    seq: PulseSequence, trap: TrapConfig, coupling: CouplingTable
) -> ConditionResiduals:
    """The seven complex conditions for a phase-insensitive gate."""
    return _aggregate(seq, trap, coupling).residuals(coupling)


def psi_mean(seq: PulseSequence, trap: TrapConfig, coupling: CouplingTable) -> float:
    """Uniform-phi_o mean of the entangling phase Psi."""
    return _aggregate(seq, trap, coupling).psi_mean()


def normalize_psi(
    seq: PulseSequence, trap: TrapConfig, coupling: CouplingTable
) -> tuple[PulseSequence, float]:
    """Scale all amplitudes by s = sqrt(pi / <Psi>) so the mean entangling
    phase is exactly pi.  Orbit phases scale as s^2, the light-shift
    amplitude as s.  Raises NormalizationError when <Psi> <= 0."""
    mean = psi_mean(seq, trap, coupling)
    if mean <= 0.0:
        raise NormalizationError(
            f"mean entangling phase {mean} is not positive; cannot reach pi by scaling"
        )
    scale = math.sqrt(math.pi / mean)
    return seq.scaled(scale), scale


@dataclass(frozen=True)
class SpinEchoEvaluation:
    """Metrics of the doubled protocol: the sequence applied twice with an
    instantaneous spin flip between the passes.

    The second pass replays the same waveform (each pulse keeps its phase
    relative to its own start), so per-state light-shift amplitudes of the
    two passes are equal and the flip makes the single-qubit light-shift
    phases cancel identically in phi_o.
    """

    sequence: PulseSequence
    total_duration: float
    _agg: _Aggregate
    _coupling: CouplingTable

    def metrics_at(self, phi_o: float) -> GateMetrics:
        return self._agg.metrics_at(phi_o)

    def epsilon_at(self, phi_o: float) -> float:
        return self._agg.metrics_at(phi_o).epsilon

    def averaged_epsilon(self, scale: float = 1.0) -> float:
        return self._agg.averaged_epsilon(scale=scale)

    def normalized_averaged_epsilon(self) -> tuple[float, float]:
        return self._agg.normalized_averaged_epsilon()

    def psi_mean(self) -> float:
        return self._agg.psi_mean()

    def residuals(self) -> ConditionResiduals:
        return self._agg.residuals(self._coupling)


def spin_echo(
    seq: PulseSequence,
    trap: TrapConfig,
    coupling: CouplingTable,
    gap: float = 0.0,
) -> SpinEchoEvaluation:
    """Evaluate the spin-echo composite of a sequence.

    Pass 2 is the same sequence time-shifted by total_duration + gap; the
    intervening spin flip relabels each state's coupling for the second
    pass.  Displacements compose additively; the light-shift closure
    condition is satisfied by construction, at the cost of doubled time.
    """
    if gap < 0:
        raise ValueError("gap must be >= 0")
    first = validate(seq)
    tau = first.total_duration
    second = first.shifted(tau + gap)
    composite = PulseSequence(first.pulses + second.pulses, tag="general")

    n = first.n_pulses
    force_factors = {}
    ls_factors = {}
    for state in SPIN_STATES:
        flipped = SPIN_FLIP[state]
        for mode in MODES:
            g1 = coupling.force_factor(state, mode)
            g2 = coupling.force_factor(flipped, mode)
            force_factors[(state, mode)] = np.array([g1] * n + [g2] * n, dtype=complex)
        ls_factors[state] = np.array(
            [coupling.ls_factor(state)] * n + [coupling.ls_factor(flipped)] * n, dtype=complex
        )

    agg = _Aggregate.from_per_pulse_factors(composite, trap, force_factors, ls_factors)
    return SpinEchoEvaluation(
        sequence=composite,
        total_duration=2.0 * tau + gap,
        _agg=agg,
        _coupling=coupling,
    )
