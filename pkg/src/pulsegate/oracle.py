"""Independent verification of the closed forms by adaptive quadrature.

Every quantity the closed-form module produces is also computable by
numerically integrating its defining integral:

    dalpha(phi_o) = 2i int e^{i w0 t} W(t) sin(w(t) t + phi_o + dphi(t)) dt
    I(phi_o)      = int alpha*(t) dalpha/dt dt
    theta+        = - int (W_ls(t)/2) e^{i (w(t) t + dphi(t))} dt

Integration always splits at pulse boundaries; inside a pulse the
integrand is smooth so adaptive Gauss-Kronrod panels converge fast.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .core import CouplingTable, PulseSequence, TrapConfig
from .phasespace import pulse_A_pm
from .core import Pulse

_MIN_TOL = 1e-13
_MAX_TOL = 1e-6


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""


@dataclass(frozen=True)
class ForceSpec:
    """Piecewise drive description for one mode and spin state.

    t_starts/durations/omegas/dphis describe the pulse train; amplitudes
    are the effective per-mode force amplitudes, ls_amplitudes the
    light-shift amplitudes (zero outside pulse supports in both cases).
    """

    t_starts: np.ndarray
    durations: np.ndarray
    amplitudes: np.ndarray
    omegas: np.ndarray
    dphis: np.ndarray
    mode_freq: float
    ls_amplitudes: np.ndarray = field(default=None)

    @classmethod
    def from_sequence(
        cls,
        seq: PulseSequence,
        trap: TrapConfig,
        coupling: CouplingTable,
        state: str,
        mode: str,
    ) -> "ForceSpec":
        g = coupling.force_factor(state, mode)
        g_ls = coupling.ls_factor(state)
        t0 = np.array([p.t_start for p in seq.pulses])
        tau = np.array([p.duration for p in seq.pulses])
        raw = np.array([p.amplitude for p in seq.pulses])
        omega = np.array([p.omega for p in seq.pulses])
        dphi = np.array([p.dphi for p in seq.pulses])
        amp = -(trap.eta(mode) / trap.eta_c) * abs(g) * raw
        if g != 0:
            dphi = dphi + cmath.phase(g)
        return cls(
            t_starts=t0,
            durations=tau,
            amplitudes=amp,
            omegas=omega,
            dphis=dphi,
            mode_freq=trap.mode_frequency(mode),
            ls_amplitudes=(2.0 / trap.eta_c) * g_ls * raw,
        )

    @property
    def t_end(self) -> float:
        if len(self.t_starts) == 0:
            return 0.0
        return float(self.t_starts[-1] + self.durations[-1])

    def envelope(self, t: float) -> float:
        """Piecewise-constant force amplitude W(t)."""
        for n in range(len(self.t_starts)):
            if self.t_starts[n] < t <= self.t_starts[n] + self.durations[n]:
                return float(self.amplitudes[n])
        return 0.0


def _check_tol(tol: float) -> float:
    if not (_MIN_TOL <= tol <= _MAX_TOL):
        raise ValueError(f"tol must be in [{_MIN_TOL}, {_MAX_TOL}], got {tol}")
    return tol


def _quad_complex(f, a: float, b: float, tol: float) -> complex:
    """Adaptive quadrature of a smooth complex integrand on [a, b]."""
    re, re_err, re_info = quad(lambda t: f(t).real, a, b, epsabs=tol, epsrel=tol, full_output=1)[:3]
    im, im_err, im_info = quad(lambda t: f(t).imag, a, b, epsabs=tol, epsrel=tol, full_output=1)[:3]
    scale = max(1.0, abs(re), abs(im))
    if max(re_err, im_err) > 50.0 * tol * scale:
        raise QuadratureError(
            f"integral on [{a}, {b}] reached error {max(re_err, im_err):.2e} > tol {tol:.2e}"
        )
    return complex(re, im)


def quad_delta_alpha(
    spec: ForceSpec, phi_o: float, t_end: float | None = None, tol: float = 1e-11
) -> complex:
    """Net displacement by direct integration of the forced-oscillator law,
    dalpha = 2i int_0^t e^{i w0 t'} W(t') sin(w t' + phi_o + dphi) dt'."""
    _check_tol(tol)
    if t_end is None:
        t_end = spec.t_end
    total = 0.0 + 0.0j
    w0 = spec.mode_freq
    for n in range(len(spec.t_starts)):
        a = float(spec.t_starts[n])
        if a >= t_end:
            break
        b = min(float(spec.t_starts[n] + spec.durations[n]), t_end)
        if b <= a:
            continue
        amp = float(spec.amplitudes[n])
        if amp == 0.0:
            continue
        wn = float(spec.omegas[n])
        ph = float(spec.dphis[n]) + phi_o

        def integrand(t, amp=amp, wn=wn, ph=ph):
            return 2j * amp * cmath.exp(1j * w0 * t) * math.sin(wn * t + ph)

        total += _quad_complex(integrand, a, b, tol)
    return total


def _alpha_analytic(spec: ForceSpec, phi_o: float):
    """alpha(t) inside each pulse from the per-pulse closed form, plus the
    prefix displacement accumulated over earlier pulses.

    Returns (prefixes, pulse_fn) where pulse_fn(n, t) evaluates alpha(t)
    during pulse n.  Only the single-pulse kinematics is used here, so the
    area integral below remains independent of the closed-form area sums.
    """
    zp = cmath.exp(1j * phi_o)
    n_pulses = len(spec.t_starts)
    prefixes = np.zeros(n_pulses + 1, dtype=complex)
    pulses = [
        Pulse(
            t_start=float(spec.t_starts[n]),
            duration=float(spec.durations[n]),
            amplitude=float(spec.amplitudes[n]),
            omega=float(spec.omegas[n]),
            dphi=float(spec.dphis[n]),
        )
        for n in range(n_pulses)
    ]
    for n, p in enumerate(pulses):
        a_p, a_m = pulse_A_pm(p, spec.mode_freq, p.t_end)
        prefixes[n + 1] = prefixes[n] + zp * a_p + a_m / zp

    def alpha_at(n: int, t: float) -> complex:
        a_p, a_m = pulse_A_pm(pulses[n], spec.mode_freq, t)
        return prefixes[n] + zp * a_p + a_m / zp

    return prefixes, alpha_at


def quad_orbit_integral(
    spec: ForceSpec, phi_o: float, tol: float = 1e-11, pure: bool = False
) -> complex:
    """Area integral I = int alpha* (dalpha/dt) dt by quadrature.

    Default mode evaluates alpha(t) from the per-pulse analytic kinematics;
    pure=True instead builds alpha(t) on a refining mesh by panelwise
    cumulative quadrature and integrates with the trapezoid rule (slower,
    fully independent of any closed form).
    """
    _check_tol(tol)
    if pure:
        return _orbit_integral_pure(spec, phi_o, tol)
    w0 = spec.mode_freq
    _, alpha_at = _alpha_analytic(spec, phi_o)
    total = 0.0 + 0.0j
    for n in range(len(spec.t_starts)):
        a = float(spec.t_starts[n])
        b = a + float(spec.durations[n])
        amp = float(spec.amplitudes[n])
        if amp == 0.0:
            continue
        wn = float(spec.omegas[n])
        ph = float(spec.dphis[n]) + phi_o

        def integrand(t, n=n, amp=amp, wn=wn, ph=ph):
            vel = 2j * amp * cmath.exp(1j * w0 * t) * math.sin(wn * t + ph)
            return alpha_at(n, t).conjugate() * vel

        total += _quad_complex(integrand, a, b, tol)
    return total


def _orbit_integral_pure(spec: ForceSpec, phi_o: float, tol: float) -> complex:
    """Trapezoid path integral with alpha built by cumulative Gauss panels,
    refined until two successive meshes agree."""
    w0 = spec.mode_freq

    def velocity(t: np.ndarray, n: int) -> np.ndarray:
        amp = float(spec.amplitudes[n])
        wn = float(spec.omegas[n])
        ph = float(spec.dphis[n]) + phi_o
        return 2j * amp * np.exp(1j * w0 * t) * np.sin(wn * t + ph)

    # Gauss-Legendre nodes reused for all panels.
    nodes, weights = np.polynomial.legendre.leggauss(12)

    def evaluate(samples_per_pulse: int) -> complex:
        total = 0.0 + 0.0j
        alpha0 = 0.0 + 0.0j
        for n in range(len(spec.t_starts)):
            a = float(spec.t_starts[n])
            b = a + float(spec.durations[n])
            edges = np.linspace(a, b, samples_per_pulse + 1)
            h = 0.5 * (edges[1:] - edges[:-1])
            mid = 0.5 * (edges[1:] + edges[:-1])
            pts = mid[:, None] + h[:, None] * nodes[None, :]
            vals = velocity(pts.ravel(), n).reshape(pts.shape)
            panel = (vals * weights[None, :]).sum(axis=1) * h
            alpha_edges = alpha0 + np.concatenate(([0.0], np.cumsum(panel)))
            v_edges = velocity(edges, n)
            f = np.conj(alpha_edges) * v_edges
            total += np.sum((f[1:] + f[:-1]) * 0.5 * (edges[1:] - edges[:-1]))
            alpha0 = alpha_edges[-1]
        return complex(total)

    samples = 64
    prev = evaluate(samples)
    for _ in range(8):
        samples *= 2
        cur = evaluate(samples)
        if abs(cur - prev) < max(tol, 1e-12) * max(1.0, abs(cur)) * 10:
            return cur
        prev = cur
    raise QuadratureError("pure-mode path integral did not converge")


def quad_orbit_phase(spec: ForceSpec, phi_o: float, tol: float = 1e-11, pure: bool = False) -> float:
    """Orbit phase Phi = Im[I] at the given optical phase."""
    return quad_orbit_integral(spec, phi_o, tol, pure=pure).imag


def quad_theta_plus(spec: ForceSpec, tol: float = 1e-11) -> complex:
    """Light-shift amplitude theta+ = - int (W_ls(t)/2) e^{i(w t + dphi)} dt."""
    _check_tol(tol)
    if spec.ls_amplitudes is None:
        raise ValueError("spec has no light-shift amplitudes")
    total = 0.0 + 0.0j
    for n in range(len(spec.t_starts)):
        ls = complex(spec.ls_amplitudes[n])
        if ls == 0.0:
            continue
        a = float(spec.t_starts[n])
        b = a + float(spec.durations[n])
        wn = float(spec.omegas[n])
        ph = float(spec.dphis[n])

        def integrand(t, ls=ls, wn=wn, ph=ph):
            return -0.5 * ls * cmath.exp(1j * (wn * t + ph))

        total += _quad_complex(integrand, a, b, tol)
    return total


def grid_average_epsilon(
    seq: PulseSequence,
    trap: TrapConfig,
    coupling: CouplingTable,
    n_phi: int = 256,
) -> float:
    """Mean infidelity over a uniform optical-phase grid, via the full
    fixed-phase metric at each grid point."""
    from .fidelity import gate_metrics

    if n_phi < 16:
        raise ValueError("n_phi must be >= 16")
    phis = np.arange(n_phi) * (2.0 * math.pi / n_phi)
    return float(np.mean([gate_metrics(seq, trap, coupling, float(p)).epsilon for p in phis]))
