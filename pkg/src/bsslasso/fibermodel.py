"""Physical model of a faulty fiber link: backscatter profile in distance and
its complex response over a swept subcarrier band.

A link is described by an ordered list of events. Every event drops the
backscatter level by ``loss_db`` (dB of level, round-trip); a reflective event
additionally puts a localized power spike at its position. The distance-domain
profile is a staircase of attenuated steps plus impulses; the frequency-domain
response is its integral against ``A * exp(j*2*kappa*z)`` and has a closed
form per event.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import czt

__all__ = [
    "Event",
    "FiberLink",
    "PhysicalConstants",
    "StepCoefficients",
    "FrequencyProfile",
    "DEFAULT_CONSTANTS",
    "MagnitudeError",
    "coefficients_from_magnitudes",
    "magnitudes_from_coefficients",
    "time_domain_profile",
    "frequency_response_analytic",
    "frequency_response_numeric",
    "fault_response",
    "reflection_response",
    "default_z_grid",
    "default_frequency_grid",
    "link_to_dict",
    "link_from_dict",
    "profile_to_csv",
    "profile_from_csv",
]


class MagnitudeError(ValueError):
    """Step-coefficient recursion failed.

    ``mode`` is ``"negative_radicand"`` when a coefficient exceeds the level
    available at its position, ``"zero_level"`` when the running level product
    has vanished, and ``"non_finite"`` for invalid inputs. ``index`` is the
    0-based event index at which the recursion broke.
    """

    def __init__(self, message: str, mode: str, index: int):
        super().__init__(message)
        self.mode = mode
        self.index = index


@dataclass(frozen=True)
class Event:
    """One fault: a backscatter-level drop, optionally with a reflection."""

    position: float            # m, > 0
    loss_db: float             # dB drop of the backscatter level
    reflectance_db: float | None = None   # dB above local level; None = non-reflective

    def __post_init__(self):
        if not (self.position > 0 and math.isfinite(self.position)):
            raise ValueError(f"event position must be positive, got {self.position}")
        if not (self.loss_db >= 0 and math.isfinite(self.loss_db)):
            raise ValueError(f"event loss_db must be >= 0, got {self.loss_db}")
        if self.reflectance_db is not None and not (
            self.reflectance_db >= 0 and math.isfinite(self.reflectance_db)
        ):
            raise ValueError(f"reflectance_db must be >= 0, got {self.reflectance_db}")

    @property
    def is_reflective(self) -> bool:
        return self.reflectance_db is not None


@dataclass(frozen=True)
class FiberLink:
    """A fiber of given length with strictly increasing fault positions."""

    length: float              # m
    events: tuple[Event, ...]
    seed: int | None = None    # generation provenance, if any

    def __post_init__(self):
        if not (self.length > 0 and math.isfinite(self.length)):
            raise ValueError(f"link length must be positive, got {self.length}")
        object.__setattr__(self, "events", tuple(self.events))
        pos = [e.position for e in self.events]
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise ValueError("event positions must be strictly increasing")
        if pos and pos[-1] > self.length:
            raise ValueError("event positions must not exceed the link length")

    @property
    def positions(self) -> np.ndarray:
        return np.array([e.position for e in self.events])


@dataclass(frozen=True)
class PhysicalConstants:
    """Fiber and acquisition constants.

    ``alpha`` is the field-form attenuation (round-trip power decays as
    exp(-2*alpha*z)); ``spike_width`` is the equivalent width in meters of the
    discrete impulse a reflection is modeled as, so that impulse weights carry
    units of level*length.
    """

    alpha: float = 0.2 * math.log(10.0) / 10.0 / 1000.0   # 0.2 dB/km in 1/m
    group_index: float = 1.468
    light_speed: float = 299_792_458.0
    amplitude_scale: float = 1.0
    spike_width: float = 10.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.group_index < 1:
            raise ValueError("group_index must be >= 1")
        if self.light_speed <= 0 or self.amplitude_scale <= 0 or self.spike_width <= 0:
            raise ValueError("light_speed, amplitude_scale, spike_width must be > 0")

    def wavenumber(self, frequencies) -> np.ndarray:
        """Round-trip modulation wavenumber 2*kappa = 4*pi*f*n/c."""
        return 4.0 * math.pi * np.asarray(frequencies, dtype=float) * self.group_index / self.light_speed


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class StepCoefficients:
    """Per-event step weights ``phi`` and impulse weights ``theta``.

    ``phi[b]`` is the drop of the normalized backscatter staircase at event b;
    the level after event b equals ``1 - sum(phi[:b+1])``. ``theta[r]`` is
    None for non-reflective events.
    """

    phi: tuple[float, ...]
    theta: tuple[float | None, ...]

    def __post_init__(self):
        object.__setattr__(self, "phi", tuple(float(p) for p in self.phi))
        object.__setattr__(self, "theta", tuple(None if t is None else float(t) for t in self.theta))
        if len(self.phi) != len(self.theta):
            raise ValueError("phi and theta must have the same length")
        if any(not (0.0 <= p <= 1.0) for p in self.phi):
            raise ValueError("phi entries must lie in [0, 1]")
        if sum(self.phi) > 1.0 + 1e-12:
            raise ValueError("sum of phi must not exceed 1")
        if any(t is not None and t < 0 for t in self.theta):
            raise ValueError("theta entries must be >= 0")

    def levels(self) -> np.ndarray:
        """Backscatter level after each event (level before the first is 1)."""
        return 1.0 - np.cumsum(self.phi)


@dataclass(frozen=True)
class FrequencyProfile:
    """Complex response samples on a strictly increasing positive grid."""

    frequencies: np.ndarray
    samples: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        s = np.asarray(self.samples, dtype=complex)
        if f.ndim != 1 or s.shape != f.shape:
            raise ValueError("frequencies and samples must be 1-d and same length")
        if f.size == 0:
            raise ValueError("profile must not be empty")
        if not (np.all(f > 0) and np.all(np.diff(f) > 0)):
            raise ValueError("frequencies must be positive and strictly increasing")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(s))):
            raise ValueError("profile values must be finite")
        f.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.frequencies.size


def default_frequency_grid(start: float = 100.0, stop: float = 100_000.0, step: float = 100.0) -> np.ndarray:
    return np.arange(start, stop + step / 2, step)


def default_z_grid(length: float, step: float = 0.25) -> np.ndarray:
    """Uniform grid over [0, length] with spacing <= step."""
    n = max(2, int(math.ceil(length / step)))
    return np.linspace(0.0, length, n + 1)


def _levels_before(link: FiberLink) -> np.ndarray:
    """Backscatter level just before each event (round-trip transmissions)."""
    xi2 = 10.0 ** (-np.array([e.loss_db for e in link.events]) / 10.0)
    return np.concatenate([[1.0], np.cumprod(xi2)[:-1]])


def coefficients_from_magnitudes(
    link: FiberLink, constants: PhysicalConstants = DEFAULT_CONSTANTS
) -> StepCoefficients:
    """Convert per-event dB magnitudes into staircase/impulse weights.

    The level drop at event b is ``level_before * (1 - xi_b^2)`` with
    ``xi_b^2 = 10**(-loss_db/10)``; a reflection of R dB weighs
    ``level_before * 10**(R/10) * spike_width``.
    """
    phi: list[float] = []
    theta: list[float | None] = []
    level = 1.0
    for i, ev in enumerate(link.events):
        xi2 = 10.0 ** (-ev.loss_db / 10.0)
        p = level * (1.0 - xi2)
        if not math.isfinite(p) or p < 0:
            raise MagnitudeError(f"non-finite step weight at event {i}", "non_finite", i)
        phi.append(p)
        if ev.reflectance_db is None:
            theta.append(None)
        else:
            theta.append(level * 10.0 ** (ev.reflectance_db / 10.0) * constants.spike_width)
        level *= xi2
    return StepCoefficients(tuple(phi), tuple(theta))


def magnitude_recursion(phis) -> list[float]:
    """Recursion ``xi_b = sqrt(1 - phi_b / prod_{j<b} xi_j^2)`` on a raw
    (possibly invalid) weight sequence, as produced by an estimator.

    Raises
    ------
    MagnitudeError
        With ``mode="negative_radicand"`` when a weight exceeds the remaining
        level, or ``mode="zero_level"`` when the running product has hit zero.
    """
    xi: list[float] = []
    prod = 1.0
    for i, p in enumerate(phis):
        p = float(p)
        if not math.isfinite(p):
            raise MagnitudeError(f"non-finite weight at event {i}", "non_finite", i)
        if prod <= 0.0:
            raise MagnitudeError(f"level product is zero before event {i}", "zero_level", i)
        radicand = 1.0 - p / prod
        if radicand < -1e-12:
            raise MagnitudeError(f"step weight at event {i} exceeds available level", "negative_radicand", i)
        x = math.sqrt(max(radicand, 0.0))
        xi.append(x)
        prod *= x * x
    return xi


def magnitudes_from_coefficients(coeffs: StepCoefficients) -> list[float]:
    """Recover linear fault magnitudes xi_b from validated step weights.

    Inverse of :func:`coefficients_from_magnitudes` for the loss part. A
    negative radicand cannot occur for inputs satisfying the
    :class:`StepCoefficients` invariants; a zero running level can (total
    loss followed by further events) and is reported as ``zero_level``.
    """
    return magnitude_recursion(coeffs.phi)


def _box_samples(z: np.ndarray, x: float) -> np.ndarray:
    """Samples of u(z) - u(z - x) with midpoint value at an interior on-grid
    edge and the one-sided limit at the grid boundary (keeps the trapezoid
    rule exact for sample-aligned steps)."""
    v = np.where(z < x, 1.0, 0.0)
    hits = np.nonzero(z == x)[0]
    if hits.size:
        v[hits] = 1.0 if hits[0] == z.size - 1 else 0.5
    return v


def _nearest_index(z: np.ndarray, x: float) -> int:
    i = int(np.searchsorted(z, x))
    if i >= z.size:
        return z.size - 1
    if i > 0 and (x - z[i - 1]) <= (z[i] - x):
        return i - 1
    return i


def _trapezoid_weights(z: np.ndarray) -> np.ndarray:
    w = np.empty_like(z)
    w[1:-1] = (z[2:] - z[:-2]) / 2.0
    w[0] = (z[1] - z[0]) / 2.0
    w[-1] = (z[-1] - z[-2]) / 2.0
    return w


def time_domain_profile(
    link: FiberLink,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    z_grid: np.ndarray | None = None,
) -> np.ndarray:
    """Sample the distance-domain backscatter profile on ``z_grid``.

    Steps are attenuated boxes; a reflection contributes its impulse weight
    divided by the trapezoid weight of the nearest sample, so quadrature of
    the sampled profile preserves the impulse integral.
    """
    if z_grid is None:
        z_grid = default_z_grid(link.length)
    z = np.asarray(z_grid, dtype=float)
    if z.size == 0:
        raise ValueError("z_grid must not be empty")
    if np.any(np.diff(z) <= 0):
        raise ValueError("z_grid must be strictly increasing")
    if z[0] < 0 or z[-1] > link.length + 1e-9:
        raise ValueError("z_grid must lie within [0, link.length]")
    coeffs = coefficients_from_magnitudes(link, constants)
    profile = np.zeros_like(z)
    for ev, p in zip(link.events, coeffs.phi):
        if p != 0.0:
            profile += p * _box_samples(z, ev.position)
    profile *= np.exp(-2.0 * constants.alpha * z)
    w_tr = _trapezoid_weights(z)
    for ev, t in zip(link.events, coeffs.theta):
        if t is None:
            continue
        i = _nearest_index(z, ev.position)
        profile[i] += t * math.exp(-2.0 * constants.alpha * z[i]) / w_tr[i]
    return profile


def fault_response(frequencies, positions, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Closed-form response of a unit step ending at each position.

    Shape is ``(len(frequencies), len(positions))``; scalar axes are kept.
    """
    f = np.atleast_1d(np.asarray(frequencies, dtype=float))
    x = np.atleast_1d(np.asarray(positions, dtype=float))
    k = constants.wavenumber(f)[:, None]
    denom = 1j * k - 2.0 * constants.alpha
    out = np.empty((f.size, x.size), dtype=complex)
    safe = np.abs(denom[:, 0]) > 0
    out[safe, :] = (np.exp(denom[safe] * x[None, :]) - 1.0) / denom[safe]
    out[~safe, :] = x[None, :]   # f -> 0, alpha = 0 limit
    return out


def reflection_response(frequencies, positions, constants: PhysicalConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Closed-form response of a unit impulse at each position."""
    f = np.atleast_1d(np.asarray(frequencies, dtype=float))
    x = np.atleast_1d(np.asarray(positions, dtype=float))
    k = constants.wavenumber(f)[:, None]
    return np.exp((1j * k - 2.0 * constants.alpha) * x[None, :])


def frequency_response_analytic(
    link: FiberLink,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    frequencies: np.ndarray | None = None,
) -> FrequencyProfile:
    """Closed-form response of a link: superposition of per-event terms."""
    if frequencies is None:
        frequencies = default_frequency_grid()
    f = np.asarray(frequencies, dtype=float)
    coeffs = coefficients_from_magnitudes(link, constants)
    a = constants.amplitude_scale
    samples = np.zeros(f.size, dtype=complex)
    pos = link.positions
    phi = np.array(coeffs.phi)
    active = phi != 0.0
    if np.any(active):
        samples += (fault_response(f, pos[active], constants) * (a * phi[active])).sum(axis=1)
    r_pos = [ev.position for ev, t in zip(link.events, coeffs.theta) if t is not None]
    r_th = [t for t in coeffs.theta if t is not None]
    if r_pos:
        samples += (reflection_response(f, np.array(r_pos), constants) * (a * np.array(r_th))).sum(axis=1)
    return FrequencyProfile(f, samples)


def frequency_response_numeric(
    z_grid: np.ndarray,
    profile: np.ndarray,
    constants: PhysicalConstants = DEFAULT_CONSTANTS,
    frequencies: np.ndarray | None = None,
) -> FrequencyProfile:
    """Trapezoid quadrature of a sampled profile against the sweep kernel.

    Attenuation already lives in the sampled profile; the kernel is
    ``A * exp(j*2*kappa*z)`` only. A uniform frequency grid goes through a
    chirp-z transform; anything else falls back to direct summation.
    """
    if frequencies is None:
        frequencies = default_frequency_grid()
    f = np.asarray(frequencies, dtype=float)
    z = np.asarray(z_grid, dtype=float)
    p = np.asarray(profile, dtype=float)
    if z.size < 2 or p.shape != z.shape:
        raise ValueError("need a sampled profile on a grid of length >= 2")
    dz_all = np.diff(z)
    dz = dz_all[0]
    if not np.allclose(dz_all, dz, rtol=1e-9, atol=0.0):
        raise ValueError("z_grid must be uniform")
    k_max = constants.wavenumber(f[-1])
    if k_max * dz > 0.5:
        raise ValueError(
            f"z grid too coarse for f_max={f[-1]:g} Hz: 2*kappa_max*dz = {k_max * dz:.3g} > 0.5"
        )
    if np.all(p == 0.0):
        return FrequencyProfile(f, np.zeros(f.size, dtype=complex))
    c1 = 4.0 * math.pi * constants.group_index / constants.light_speed
    df_all = np.diff(f)
    if f.size > 2 and np.allclose(df_all, df_all[0], rtol=1e-9, atol=0.0):
        # sum_i p_i exp(j*c1*f_k*z_i) for the whole grid in one chirp-z pass
        x = p * np.exp(1j * c1 * f[0] * z)
        series = czt(x, m=f.size, w=np.exp(1j * c1 * df_all[0] * dz), a=1.0)
    else:
        series = np.empty(f.size, dtype=complex)
        chunk = max(1, int(2e6 // z.size))
        for lo in range(0, f.size, chunk):
            ker = np.exp(1j * c1 * np.outer(f[lo : lo + chunk], z))
            series[lo : lo + chunk] = ker @ p
    ends = 0.5 * (p[0] * np.exp(1j * c1 * f * z[0]) + p[-1] * np.exp(1j * c1 * f * z[-1]))
    samples = constants.amplitude_scale * dz * (series - ends)
    return FrequencyProfile(f, samples)


# ---------------------------------------------------------------------------
# serialization

def link_to_dict(link: FiberLink) -> dict:
    return {
        "length_m": link.length,
        "events": [
            {
                "position_m": e.position,
                "loss_db": e.loss_db,
                "reflectance_db": e.reflectance_db,
            }
            for e in link.events
        ],
        "seed": link.seed,
    }


def link_from_dict(d: dict) -> FiberLink:
    try:
        events = tuple(
            Event(
                position=float(ev["position_m"]),
                loss_db=float(ev["loss_db"]),
                reflectance_db=None if ev.get("reflectance_db") is None else float(ev["reflectance_db"]),
            )
            for ev in d["events"]
        )
        return FiberLink(length=float(d["length_m"]), events=events, seed=d.get("seed"))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed link record: {exc}") from exc


def profile_to_csv(profile: FrequencyProfile) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frequency_hz", "re", "im"])
    for f, s in zip(profile.frequencies, profile.samples):
        writer.writerow([repr(float(f)), repr(float(s.real)), repr(float(s.imag))])
    return buf.getvalue()


def profile_from_csv(text: str) -> FrequencyProfile:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:3]] != ["frequency_hz", "re", "im"]:
        raise ValueError("expected CSV header 'frequency_hz,re,im'")
    freqs, samples = [], []
    for row in reader:
        if not row:
            continue
        if len(row) < 3:
            raise ValueError(f"malformed profile row: {row!r}")
        freqs.append(float(row[0]))
        samples.append(complex(float(row[1]), float(row[2])))
    return FrequencyProfile(np.array(freqs), np.array(samples))
