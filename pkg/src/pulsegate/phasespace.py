"""Closed-form phase-space kinematics of a square-pulse drive.

For a mode of frequency w0 driven during pulse n by an effective force
amplitude W_n * sin(w_n t + phi_o + dphi_n), the displacement splits into
co- and counter-rotating parts,

    dalpha(t, phi_o) = e^{+i phi_o} A_n^+(t) + e^{-i phi_o} A_n^-(t),
    A_n^pm(t) = +-i W_n e^{i(d_pm t_n +- dphi_n)} (1 - e^{i d_pm (t-t_n)}) / d_pm,

with detunings d_pm = w0 +- w_n.  The enclosed-area integral
I = int alpha* dalpha likewise splits as I = I0 + e^{2i phi_o} I+ +
e^{-2i phi_o} I-, and each piece has a closed form built from prefix sums
of the per-pulse displacements plus self terms B_n (see accumulate_orbit).

All removable singularities (resonant detunings, zero drive frequency) are
evaluated by series so the formulas stay accurate to ~1e-15 everywhere.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .core import Pulse, PulseSequence, TrapConfig

# Switch to series evaluation when |freq * tau| is below this.
_SERIES_RADIUS = 0.5
_N_SERIES_TERMS = 22


def _as_array(x):
    return np.asarray(x, dtype=float)


def circle_fn(omega, tau):
    """Elementary integral of one square pulse: C(w) = (1 - e^{i w tau}) / w.

    Accepts scalars or arrays; uses the Taylor series
    C = -i tau * sum_k (i w tau)^k / (k+1)!  for small |w tau| to avoid
    cancellation (C(0, tau) = -i tau).
    """
    w = _as_array(omega)
    t = _as_array(tau)
    w, t = np.broadcast_arrays(w, t)
    x = w * t
    small = np.abs(x) < _SERIES_RADIUS
    out = np.empty(np.shape(x), dtype=complex)

    if np.any(~small):
        ws = np.where(small, 1.0, w)  # avoid division warnings on the small branch
        out[~small] = ((1.0 - np.exp(1j * x)) / ws)[~small]
    if np.any(small):
        ix = 1j * x[small]
        acc = np.zeros(ix.shape, dtype=complex)
        for k in range(_N_SERIES_TERMS, 0, -1):
            acc = (acc + 1.0) * ix / (k + 1)
        out[small] = -1j * t[small] * (acc + 1.0)
    if out.ndim == 0:
        return complex(out)
    return out


def _drift_fn(delta, tau):
    """g(d) = (1 + i d tau - e^{i d tau}) / d^2 = i tau/d + C(d)/d.

    This is the self-term kernel of the area integral; the series
    g = tau^2 * sum_k (i d tau)^k / (k+2)!  keeps it finite on resonance
    (g -> tau^2/2 as d -> 0).
    """
    d = _as_array(delta)
    t = _as_array(tau)
    d, t = np.broadcast_arrays(d, t)
    x = d * t
    small = np.abs(x) < _SERIES_RADIUS
    out = np.empty(np.shape(x), dtype=complex)

    if np.any(~small):
        ds = np.where(small, 1.0, d)
        out[~small] = ((1.0 + 1j * x - np.exp(1j * x)) / ds**2)[~small]
    if np.any(small):
        ix = 1j * x[small]
        acc = np.zeros(ix.shape, dtype=complex)
        for k in range(_N_SERIES_TERMS, 0, -1):
            acc = (acc + 1.0) * ix / (k + 2)
        out[small] = t[small] ** 2 * (acc + 1.0) / 2.0
    return out


def _circle_diff(a, d, tau):
    """Stable divided difference (C(a + d) - C(a)) / d.

    Uses the exact identity
        (C(a+d) - C(a)) / d = (e^{i a tau} C(d) - C(a)) / (a + d)
                            = (e^{i (a+d) tau} C(-d) - C(a+d)) / a,
    picking whichever form has the larger denominator, so cancellation
    never occurs: small arguments only ever enter through C itself.
    """
    a = _as_array(a)
    d = _as_array(d)
    t = _as_array(tau)
    a, d, t = np.broadcast_arrays(a, d, t)
    b = a + d
    use_first = np.abs(b) >= np.abs(a)

    out = np.empty(np.shape(a), dtype=complex)
    if np.any(use_first):
        m = use_first
        bm = np.where(m, b, 1.0)
        out_m = (np.exp(1j * a * t) * circle_fn(d, t) - circle_fn(a, t)) / bm
        out[m] = np.asarray(out_m)[m]
    if np.any(~use_first):
        m = ~use_first
        am = np.where(m, a, 1.0)
        out_m = (np.exp(1j * b * t) * circle_fn(-d, t) - circle_fn(b, t)) / am
        out[m] = np.asarray(out_m)[m]
    return out


@dataclass(frozen=True)
class OrbitSummary:
    """Closed-form orbit bookkeeping for one mode.

    A_plus/A_minus are the complete per-pulse displacement components,
    alpha_plus/alpha_minus their exclusive prefix sums (alpha[0] = 0),
    delta_alpha_* the whole-sequence sums.  I0 is the optical-phase
    independent part of the area integral; I_plus/I_minus multiply
    e^{+-2i phi_o}.
    """

    mode: str
    A_plus: np.ndarray
    A_minus: np.ndarray
    alpha_plus: np.ndarray
    alpha_minus: np.ndarray
    delta_alpha_plus: complex
    delta_alpha_minus: complex
    I0: complex
    I_plus: complex
    I_minus: complex


@dataclass(frozen=True)
class LightShiftSummary:
    """Complex amplitude of the phi_o-dependent light-shift phase for the
    reference spin state; other states scale by their ls coupling factor."""

    theta_plus: complex


def pulse_A_pm(pulse: Pulse, mode_freq: float, t: float) -> tuple[complex, complex]:
    """Partial displacement components of one pulse at time t inside it.

    The pulse amplitude must already be the effective per-mode force
    amplitude (coupling factor and -eta/2 included by the caller).
    """
    dt = t - pulse.t_start
    dp = mode_freq + pulse.omega
    dm = mode_freq - pulse.omega
    cp = circle_fn(dp, dt)
    cm = circle_fn(dm, dt)
    a_plus = 1j * pulse.amplitude * cmath.exp(1j * (dp * pulse.t_start + pulse.dphi)) * cp
    a_minus = -1j * pulse.amplitude * cmath.exp(1j * (dm * pulse.t_start - pulse.dphi)) * cm
    return a_plus, a_minus


def _orbit_terms(t0, tau, amp, omega, dphi, mode_freq):
    """Vectorized per-pulse A_pm and self terms; shared by the public ops."""
    dp = mode_freq + omega
    dm = mode_freq - omega
    cp = circle_fn(dp, tau)
    cm = circle_fn(dm, tau)
    a_plus = 1j * amp * np.exp(1j * (dp * t0 + dphi)) * cp
    a_minus = -1j * amp * np.exp(1j * (dm * t0 - dphi)) * cm

    phase = omega * t0 + dphi
    amp2 = amp * amp
    b0 = amp2 * (_drift_fn(dp, tau) + _drift_fn(dm, tau))
    # B_pm = W^2 e^{+-2i phase} (C(+-2w) - C(d_pm)) / d_mp, written as a
    # stable divided difference since d_pm = +-2w + d_mp.
    b_plus = -amp2 * np.exp(2j * phase) * _circle_diff(2.0 * omega, dm, tau)
    b_minus = -amp2 * np.exp(-2j * phase) * _circle_diff(-2.0 * omega, dp, tau)
    return a_plus, a_minus, b0, b_plus, b_minus


def accumulate_orbit(
    seq: PulseSequence,
    trap: TrapConfig,
    mode: str,
    eff_amplitudes,
    dphi_offsets=None,
) -> OrbitSummary:
    """Whole-sequence displacement components and area integrals for one mode.

    eff_amplitudes are the per-pulse effective force amplitudes for the
    spin state under consideration (signed reals).  dphi_offsets, when
    given, are added to each pulse's dphi (used to fold complex coupling
    phases in).  The sequence must already be in validated order.
    """
    if not seq.pulses:
        z = np.zeros(0, dtype=complex)
        return OrbitSummary(mode, z, z, z, z, 0j, 0j, 0j, 0j, 0j)
    t0 = np.array([p.t_start for p in seq.pulses])
    tau = np.array([p.duration for p in seq.pulses])
    omega = np.array([p.omega for p in seq.pulses])
    dphi = np.array([p.dphi for p in seq.pulses])
    if dphi_offsets is not None:
        dphi = dphi + np.asarray(dphi_offsets, dtype=float)
    amp = np.asarray(eff_amplitudes, dtype=float)
    if amp.shape != t0.shape:
        raise ValueError("eff_amplitudes must have one entry per pulse")
    w0 = trap.mode_frequency(mode)

    a_plus, a_minus, b0, b_plus, b_minus = _orbit_terms(t0, tau, amp, omega, dphi, w0)

    alpha_plus = np.concatenate(([0.0 + 0.0j], np.cumsum(a_plus)[:-1]))
    alpha_minus = np.concatenate(([0.0 + 0.0j], np.cumsum(a_minus)[:-1]))

    i0 = np.sum(np.conj(alpha_plus) * a_plus + np.conj(alpha_minus) * a_minus + b0)
    i_plus = np.sum(np.conj(alpha_minus) * a_plus + b_plus)
    i_minus = np.sum(np.conj(alpha_plus) * a_minus + b_minus)

    return OrbitSummary(
        mode=mode,
        A_plus=a_plus,
        A_minus=a_minus,
        alpha_plus=alpha_plus,
        alpha_minus=alpha_minus,
        delta_alpha_plus=complex(np.sum(a_plus)),
        delta_alpha_minus=complex(np.sum(a_minus)),
        I0=complex(i0),
        I_plus=complex(i_plus),
        I_minus=complex(i_minus),
    )


def lightshift_theta_plus(seq: PulseSequence, ls_amplitudes) -> complex:
    """Complex light-shift amplitude theta+ = sum_n (-i W_n/2) e^{i phase_n} C_n(w_n).

    ls_amplitudes are the per-pulse light-shift drive amplitudes for the
    state under consideration (may be complex to carry a coupling phase).
    The full phase is theta_LS(phi_o) = 2 Re[e^{i phi_o} theta+].
    """
    if not seq.pulses:
        return 0.0 + 0.0j
    t0 = np.array([p.t_start for p in seq.pulses])
    tau = np.array([p.duration for p in seq.pulses])
    omega = np.array([p.omega for p in seq.pulses])
    dphi = np.array([p.dphi for p in seq.pulses])
    ls = np.asarray(ls_amplitudes, dtype=complex)
    if ls.shape != t0.shape:
        raise ValueError("ls_amplitudes must have one entry per pulse")
    phase = omega * t0 + dphi
    return complex(np.sum(-0.5j * ls * np.exp(1j * phase) * circle_fn(omega, tau)))


def compose_at_phase(summary: OrbitSummary, phi_o: float) -> tuple[complex, float]:
    """Physical net displacement and orbit phase at a given optical phase:
    dalpha = e^{i phi} da+ + e^{-i phi} da-,  Phi = Im[I0 + e^{2i phi} I+ + e^{-2i phi} I-].
    """
    zp = cmath.exp(1j * phi_o)
    delta_alpha = zp * summary.delta_alpha_plus + summary.delta_alpha_minus / zp
    big_i = summary.I0 + zp * zp * summary.I_plus + summary.I_minus / (zp * zp)
    return delta_alpha, big_i.imag


def orbit_trajectory(
    seq: PulseSequence,
    trap: TrapConfig,
    mode: str,
    phi_o: float,
    samples_per_pulse: int = 64,
    eff_amplitudes=None,
) -> list[tuple[float, complex]]:
    """Sampled phase-space orbit alpha(t), starting from alpha(0) = 0.

    The orbit moves only inside pulses (gaps are free evolution, which is
    invisible in the rotating frame).  When eff_amplitudes is None the
    reference drive (eta_l/2 per unit amplitude) is used.
    """
    if samples_per_pulse < 2:
        raise ValueError("need at least 2 samples per pulse")
    if eff_amplitudes is None:
        scale = -trap.eta(mode) / trap.eta_c
        eff_amplitudes = [scale * p.amplitude for p in seq.pulses]
    amp = np.asarray(eff_amplitudes, dtype=float)
    summary = accumulate_orbit(seq, trap, mode, amp)
    zp = cmath.exp(1j * phi_o)

    points: list[tuple[float, complex]] = [(0.0, 0.0 + 0.0j)]
    for n, pulse in enumerate(seq.pulses):
        prefix = zp * summary.alpha_plus[n] + summary.alpha_minus[n] / zp
        eff = Pulse(pulse.t_start, pulse.duration, amp[n], pulse.omega, pulse.dphi)
        for t in np.linspace(pulse.t_start, pulse.t_end, samples_per_pulse):
            a_p, a_m = pulse_A_pm(eff, trap.mode_frequency(mode), float(t))
            points.append((float(t), prefix + zp * a_p + a_m / zp))
    return points
