"""Domain types, unit conventions and pulse-sequence parametrizations.

Everything is dimensionless: the COM mode frequency omega_c sets the unit
system (omega_c = 1 by default), times are measured in 1/omega_c and drive
amplitudes in omega_c.  The two-ion crystal has a stretch mode at
sqrt(3)*omega_c with Lamb-Dicke parameter eta_c / 3**0.25.

A drive is a train of square ("top hat") pulses.  Pulse n switches on at
t_start, lasts `duration`, and oscillates as amplitude*sin(omega*t + phi)
where phi = phi_o + dphi and phi_o is the (uncontrolled) optical phase.
Amplitudes are real but signed; a sign flip is equivalent to dphi -> dphi+pi.

Amplitudes are quoted on the effective-force scale of the COM mode: a unit
coupling factor drives the COM mode with effective amplitude equal to the
pulse amplitude, the stretch mode weaker by eta_s/eta_c, and the light
shift stronger by 2/eta_c.  On this scale a slow single-pulse gate has
total area close to pi.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

TWO_PI = 2.0 * math.pi

#: Two-ion spin states, in the fixed order used throughout.
SPIN_STATES = ("uu", "dd", "ud", "du")

#: Normal modes: COM ("c") and stretch ("s").
MODES = ("c", "s")

#: State relabelling applied by an instantaneous spin flip on both ions.
SPIN_FLIP = {"uu": "dd", "dd": "uu", "ud": "du", "du": "ud"}

#: Sign of each state's phase in the entangling combination
#: psi = phi_uu + phi_dd - phi_ud - phi_du.
PSI_SIGN = {"uu": 1.0, "dd": 1.0, "ud": -1.0, "du": -1.0}

# Relative slack allowed when two pulses are meant to be contiguous.
_OVERLAP_TOL = 1e-9


class SequenceError(ValueError):
    """A pulse sequence violates ordering, overlap or duration invariants."""


@dataclass(frozen=True)
class TrapConfig:
    """Trap and thermal parameters of the two-ion crystal.

    omega_s and eta_s are derived, not independent: for two equal-mass ions
    omega_s = sqrt(3)*omega_c, and the mode ground-state size scales as
    omega**-0.5 so eta_s = eta_c / 3**0.25.
    """

    omega_c: float = 1.0
    eta_c: float = 0.1
    nbar_c: float = 1.0
    nbar_s: float = 1.0

    def __post_init__(self):
        if self.omega_c <= 0:
            raise ValueError("omega_c must be positive")
        if self.eta_c <= 0:
            raise ValueError("eta_c must be positive")
        if self.nbar_c < 0 or self.nbar_s < 0:
            raise ValueError("thermal occupancies must be >= 0")

    @property
    def omega_s(self) -> float:
        return math.sqrt(3.0) * self.omega_c

    @property
    def eta_s(self) -> float:
        return self.eta_c / 3.0**0.25

    def mode_frequency(self, mode: str) -> float:
        if mode == "c":
            return self.omega_c
        if mode == "s":
            return self.omega_s
        raise ValueError(f"unknown mode {mode!r}")

    def eta(self, mode: str) -> float:
        if mode == "c":
            return self.eta_c
        if mode == "s":
            return self.eta_s
        raise ValueError(f"unknown mode {mode!r}")

    def nbar(self, mode: str) -> float:
        if mode == "c":
            return self.nbar_c
        if mode == "s":
            return self.nbar_s
        raise ValueError(f"unknown mode {mode!r}")


@dataclass(frozen=True)
class Pulse:
    """One square pulse of the drive.

    amplitude is the effective COM-force drive strength in units of
    omega_c; per-mode, per-spin-state amplitudes are obtained by
    multiplying with the coupling factors and -eta_l/eta_c (see
    CouplingTable).
    """

    t_start: float
    duration: float
    amplitude: float
    omega: float
    dphi: float = 0.0

    def __post_init__(self):
        if not self.duration > 0:
            raise SequenceError(f"pulse duration must be positive, got {self.duration}")

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration


@dataclass(frozen=True)
class PulseSequence:
    """Ordered, non-overlapping train of pulses plus a parametrization tag.

    tag is one of "general", "symmetric", "shaped", "equal-amplitude"; it
    records how the sequence was constructed and is carried through file
    round-trips but has no effect on the physics.
    """

    pulses: tuple[Pulse, ...]
    tag: str = "general"

    def __post_init__(self):
        object.__setattr__(self, "pulses", tuple(self.pulses))

    @property
    def n_pulses(self) -> int:
        return len(self.pulses)

    @property
    def total_duration(self) -> float:
        """t_N + tau_N - t_1; zero for an empty sequence."""
        if not self.pulses:
            return 0.0
        return self.pulses[-1].t_end - self.pulses[0].t_start

    def scaled(self, factor: float) -> "PulseSequence":
        """Same timings, all amplitudes multiplied by `factor`."""
        return PulseSequence(
            tuple(replace(p, amplitude=p.amplitude * factor) for p in self.pulses),
            tag=self.tag,
        )

    def shifted(self, dt: float) -> "PulseSequence":
        """Translate in time by dt, adjusting dphi by -omega*dt per pulse.

        The phase adjustment keeps the physical waveform of every pulse
        unchanged relative to its own start, so all gate quantities are
        invariant.
        """
        return PulseSequence(
            tuple(
                replace(
                    p,
                    t_start=p.t_start + dt,
                    dphi=math.fmod(p.dphi - p.omega * dt, TWO_PI),
                )
                for p in self.pulses
            ),
            tag=self.tag,
        )


@dataclass(frozen=True)
class CouplingTable:
    """Per-spin-state drive factors for forces and light shifts.

    force[(state, mode)] is a complex factor: its magnitude multiplies the
    pulse amplitude for that state/mode and its argument adds to the pulse
    phase offset.  light_shift[state] plays the same role for the a.c. Stark
    shift term.
    """

    force: dict[tuple[str, str], complex]
    light_shift: dict[str, complex]

    def force_factor(self, state: str, mode: str) -> complex:
        return self.force.get((state, mode), 0.0 + 0.0j)

    def ls_factor(self, state: str) -> complex:
        return self.light_shift.get(state, 0.0 + 0.0j)


def canonical_coupling() -> CouplingTable:
    """Coupling table for equal and opposite single-ion light shifts,
    balanced beam intensities, and ion spacing an integer number of
    walking-wave periods.

    With both ions coupled as C_up = -C_down and equal intensities, the sum
    coordinate (COM) is driven only when the spins are aligned and the
    difference coordinate (stretch) only when they are anti-aligned; the
    single-ion light shifts add for aligned spins and cancel otherwise.
    """
    force = {
        ("uu", "c"): 1.0 + 0.0j,
        ("dd", "c"): -1.0 + 0.0j,
        ("ud", "s"): 1.0 + 0.0j,
        ("du", "s"): -1.0 + 0.0j,
    }
    light_shift = {
        "uu": 1.0 + 0.0j,
        "dd": -1.0 + 0.0j,
        "ud": 0.0 + 0.0j,
        "du": 0.0 + 0.0j,
    }
    return CouplingTable(force=force, light_shift=light_shift)


def validate(seq: PulseSequence) -> PulseSequence:
    """Return the canonical form of a sequence, enforcing the invariants.

    Pulses are sorted by start time and checked for overlap (contiguous
    pulses, t_{n+1} == t_n + tau_n, are allowed).  The sequence is then
    translated so t_1 = 0, with the compensating dphi adjustment, and dphi
    is reduced to [0, 2*pi).  Idempotent.
    """
    if not seq.pulses:
        raise SequenceError("sequence has no pulses")
    pulses = sorted(seq.pulses, key=lambda p: p.t_start)
    for a, b in zip(pulses, pulses[1:]):
        slack = _OVERLAP_TOL * (1.0 + abs(a.t_end))
        if b.t_start < a.t_end - slack:
            raise SequenceError(
                f"pulses overlap: one ends at t={a.t_end} but the next starts at t={b.t_start}"
            )
    t0 = pulses[0].t_start
    out = []
    for p in pulses:
        dphi = math.fmod(p.dphi + p.omega * t0, TWO_PI)
        if dphi < 0.0:
            dphi += TWO_PI
        out.append(replace(p, t_start=p.t_start - t0, dphi=dphi))
    if out:
        out[0] = replace(out[0], t_start=0.0)
    return PulseSequence(tuple(out), tag=seq.tag)


def total_area(seq: PulseSequence) -> float:
    """Total pulse area sum_n |amplitude_n| * duration_n."""
    return sum(abs(p.amplitude) * p.duration for p in seq.pulses)


@dataclass(frozen=True)
class SymmetricParams:
    """Parameters of a time-symmetric sequence.

    durations hold the first ceil(N/2) pulse lengths, gaps the first
    floor(N/2) inter-pulse gaps; both are mirrored about the sequence
    midpoint.  rel_amplitudes are the amplitudes of pulses 2..ceil(N/2)
    relative to pulse 1 (amplitude 1); they are mirrored as well.  All
    pulses share one drive frequency and dphi = 0.

    Free parameter count is ceil(3N/2): N timing values, ceil(N/2)-1
    amplitude ratios, and the shared frequency.
    """

    durations: tuple[float, ...]
    gaps: tuple[float, ...]
    rel_amplitudes: tuple[float, ...]
    omega: float

    def __post_init__(self):
        object.__setattr__(self, "durations", tuple(self.durations))
        object.__setattr__(self, "gaps", tuple(self.gaps))
        object.__setattr__(self, "rel_amplitudes", tuple(self.rel_amplitudes))


def expand_symmetric(
    params: SymmetricParams, n_pulses: int, tag: str = "symmetric"
) -> PulseSequence:
    """Expand mirrored half-sequence parameters into a full sequence.

    For odd N the middle pulse is its own mirror image; for even N the
    middle gap is.  Raises SequenceError when the stored counts do not
    match n_pulses or a duration is not positive.
    """
    n = n_pulses
    if n < 1:
        raise SequenceError("n_pulses must be >= 1")
    n_dur = (n + 1) // 2
    n_gap = n // 2
    if len(params.durations) != n_dur:
        raise SequenceError(
            f"expected {n_dur} durations for N={n}, got {len(params.durations)}"
        )
    if len(params.gaps) != n_gap:
        raise SequenceError(f"expected {n_gap} gaps for N={n}, got {len(params.gaps)}")
    if params.rel_amplitudes and len(params.rel_amplitudes) != n_dur - 1:
        raise SequenceError(
            f"expected {n_dur - 1} relative amplitudes for N={n}, "
            f"got {len(params.rel_amplitudes)}"
        )
    if any(d <= 0 for d in params.durations):
        raise SequenceError("durations must be positive")
    if any(g < 0 for g in params.gaps):
        raise SequenceError("gaps must be >= 0")

    half_amps = [1.0]
    half_amps += list(params.rel_amplitudes) if params.rel_amplitudes else [1.0] * (n_dur - 1)

    # Mirror the half profiles about the midpoint.
    durations = list(params.durations) + list(params.durations[: n - n_dur][::-1])
    amps = half_amps + half_amps[: n - n_dur][::-1]
    gaps = list(params.gaps) + list(params.gaps[: (n - 1) - n_gap][::-1])

    pulses = []
    t = 0.0
    for i in range(n):
        pulses.append(
            Pulse(t_start=t, duration=durations[i], amplitude=amps[i], omega=params.omega)
        )
        t += durations[i]
        if i < n - 1:
            t += gaps[i]
    return PulseSequence(tuple(pulses), tag=tag)


def expand_shaped(
    durations: Sequence[float], amplitudes: Sequence[float], omega: float
) -> PulseSequence:
    """Contiguous segments forming a single shaped pulse (zero gaps,
    shared omega, dphi = 0)."""
    if len(durations) == 0:
        raise SequenceError("shaped pulse needs at least one segment")
    if len(durations) != len(amplitudes):
        raise SequenceError("durations and amplitudes must have equal length")
    if any(d <= 0 for d in durations):
        raise SequenceError("segment durations must be positive")
    pulses = []
    t = 0.0
    for d, a in zip(durations, amplitudes):
        pulses.append(Pulse(t_start=t, duration=d, amplitude=a, omega=omega))
        t += d
    return PulseSequence(tuple(pulses), tag="shaped")


def free_parameter_count(tag: str, n_pulses: int) -> int:
    """Number of free parameters of an N-pulse description after removing
    the start time, the phase origin, and the overall amplitude scale.

    general:          5N - 3   (t, tau, amplitude, omega, dphi per pulse)
    fixed-omega:      3N - 1   (shared omega, dphi = 0)
    symmetric:        ceil(3N/2)
    equal-amplitude:  ceil(3N/2) - (ceil(N/2) - 1)
    shaped:           2N       (contiguous, shared omega and phase origin)
    """
    n = n_pulses
    if tag == "general":
        return 5 * n - 3
    if tag == "fixed-omega":
        return 3 * n - 1
    if tag == "symmetric":
        return math.ceil(3 * n / 2)
    if tag == "equal-amplitude":
        return math.ceil(3 * n / 2) - ((n + 1) // 2 - 1)
    if tag == "shaped":
        return 2 * n
    raise ValueError(f"unknown parametrization tag {tag!r}")


def sequence_arrays(seq: PulseSequence):
    """Per-pulse (t_start, duration, amplitude, omega, dphi) as numpy arrays."""
    import numpy as np

    t0 = np.array([p.t_start for p in seq.pulses], dtype=float)
    tau = np.array([p.duration for p in seq.pulses], dtype=float)
    amp = np.array([p.amplitude for p in seq.pulses], dtype=float)
    omega = np.array([p.omega for p in seq.pulses], dtype=float)
    dphi = np.array([p.dphi for p in seq.pulses], dtype=float)
    return t0, tau, amp, omega, dphi
