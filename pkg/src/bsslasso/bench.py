"""Randomized test-bench generation and its on-disk manifest format.

Every link draws from its own counter-based random stream keyed by
``(bench seed, link index)``, so single links regenerate independently and
generation order does not matter. A bench directory holds ``bench.json``
(the spec echo plus per-link ground truth) and one profile CSV per link.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fibermodel import (
    DEFAULT_CONSTANTS,
    Event,
    FiberLink,
    FrequencyProfile,
    PhysicalConstants,
    default_frequency_grid,
    default_z_grid,
    frequency_response_numeric,
    link_from_dict,
    link_to_dict,
    profile_from_csv,
    profile_to_csv,
    time_domain_profile,
)

__all__ = [
    "BenchSpec",
    "BenchError",
    "sample_link",
    "generate_bench",
    "save_bench",
    "load_bench",
]

_SCHEMA = "bsslasso-bench/1"
_KNOWN_TOP_KEYS = {"schema", "spec", "links"}
_POSITION_RETRIES = 1000
_LENGTH_RETRIES = 100


class BenchError(ValueError):
    """Manifest or spec problem, with enough context to locate it."""


@dataclass(frozen=True)
class BenchSpec:
    """Parameters of one randomized bench."""

    n_links: int = 100
    n_faults: int = 1
    length_range: tuple[float, float] = (2000.0, 15000.0)
    fault_floor: float = 2000.0              # interior faults start here
    reflection_probability: float = 0.5
    loss_range: tuple[float, float] = (1.0, 5.0)
    reflectance_max: float = 20.0
    min_spacing: float = 10.0                # one estimator grid step
    seed: int = 0
    freq_start: float = 100.0
    freq_stop: float = 100_000.0
    freq_step: float = 100.0
    z_step: float = 0.25
    noise_sigma: float = 0.0                 # additive complex Gaussian, off by default
    constants: PhysicalConstants = DEFAULT_CONSTANTS

    def __post_init__(self):
        lo, hi = self.length_range
        if not (0 < lo <= hi):
            raise BenchError("length_range must satisfy 0 < lo <= hi")
        if self.fault_floor > lo:
            raise BenchError("fault_floor must not exceed the minimum length")
        if not (0.0 <= self.reflection_probability <= 1.0):
            raise BenchError("reflection_probability must lie in [0, 1]")
        if self.n_links < 1 or self.n_faults < 1:
            raise BenchError("n_links and n_faults must be positive")
        llo, lhi = self.loss_range
        if not (0 <= llo <= lhi):
            raise BenchError("loss_range must satisfy 0 <= lo <= hi")
        if self.reflectance_max <= 0 or self.min_spacing <= 0:
            raise BenchError("reflectance_max and min_spacing must be positive")

    def frequencies(self) -> np.ndarray:
        return default_frequency_grid(self.freq_start, self.freq_stop, self.freq_step)

    def to_dict(self) -> dict:
        c = self.constants
        return {
            "n_links": self.n_links,
            "n_faults": self.n_faults,
            "length_range": list(self.length_range),
            "fault_floor": self.fault_floor,
            "reflection_probability": self.reflection_probability,
            "loss_range": list(self.loss_range),
            "reflectance_max": self.reflectance_max,
            "min_spacing": self.min_spacing,
            "seed": self.seed,
            "freq_start": self.freq_start,
            "freq_stop": self.freq_stop,
            "freq_step": self.freq_step,
            "z_step": self.z_step,
            "noise_sigma": self.noise_sigma,
            "constants": {
                "alpha": c.alpha,
                "group_index": c.group_index,
                "light_speed": c.light_speed,
                "amplitude_scale": c.amplitude_scale,
                "spike_width": c.spike_width,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchSpec":
        d = dict(d)
        consts = d.pop("constants", None)
        kwargs = {}
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            warnings.warn(f"ignoring unknown bench spec fields: {sorted(extra)}")
        for k in known & set(d):
            v = d[k]
            if k in ("length_range", "loss_range"):
                v = tuple(v)
            kwargs[k] = v
        if consts is not None:
            kwargs["constants"] = PhysicalConstants(**consts)
        return cls(**kwargs)


def _link_rng(spec_seed: int, index: int) -> np.random.Generator:
    key = np.array([spec_seed & 0xFFFFFFFFFFFFFFFF, index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_link(spec: BenchSpec, index: int) -> FiberLink:
    """Ground truth for one link, independent of every other link.

    Draw order (fixed for reproducibility): length, interior positions
    (resampled until spacing holds), reflective flags, losses, reflectances.
    A length too short to host the interior faults is redrawn.
    """
    rng = _link_rng(spec.seed, index)
    lo, hi = spec.length_range
    n_interior = spec.n_faults - 1
    for _ in range(_LENGTH_RETRIES):
        length = float(rng.uniform(lo, hi))
        if length - spec.fault_floor >= (n_interior + 1) * spec.min_spacing or n_interior == 0:
            break
    else:
        raise BenchError(f"link {index}: no feasible length after {_LENGTH_RETRIES} draws")
    positions = [length]
    if n_interior:
        for _ in range(_POSITION_RETRIES):
            cand = np.sort(rng.uniform(spec.fault_floor, length, size=n_interior))
            allpos = np.append(cand, length)
            if np.all(np.diff(allpos) >= spec.min_spacing):
                positions = list(allpos)
                break
        else:
            raise BenchError(f"link {index}: spacing unsatisfiable after {_POSITION_RETRIES} draws")
    reflective = rng.random(size=spec.n_faults) < spec.reflection_probability
    losses = rng.uniform(spec.loss_range[0], spec.loss_range[1], size=spec.n_faults)
    # uniform on (0, max]: complement of the half-open uniform draw
    reflectances = spec.reflectance_max * (1.0 - rng.random(size=spec.n_faults))
    events = tuple(
        Event(
            position=float(p),
            loss_db=float(l),
            reflectance_db=float(r) if flag else None,
        )
        for p, l, r, flag in zip(positions, losses, reflectances, reflective)
    )
    return FiberLink(length=float(positions[-1]), events=events, seed=index)


def synthesize_profile(spec: BenchSpec, link: FiberLink, index: int | None = None) -> FrequencyProfile:
    """Observation for a link: quadrature of its sampled distance profile."""
    z = default_z_grid(link.length, spec.z_step)
    p = time_domain_profile(link, spec.constants, z)
    prof = frequency_response_numeric(z, p, spec.constants, spec.frequencies())
    if spec.noise_sigma > 0.0:
        if index is None:
            raise BenchError("noisy profiles need the link index for the noise stream")
        rng = _link_rng(spec.seed ^ 0x6E6F6973, index)
        noise = spec.noise_sigma * (
            rng.standard_normal(len(prof)) + 1j * rng.standard_normal(len(prof))
        )
        prof = FrequencyProfile(prof.frequencies, prof.samples + noise)
    return prof


def generate_bench(spec: BenchSpec) -> list[tuple[FiberLink, FrequencyProfile]]:
    """All links and their profiles, in index order."""
    out = []
    for i in range(spec.n_links):
        link = sample_link(spec, i)
        out.append((link, synthesize_profile(spec, link, i)))
    return out


def save_bench(spec: BenchSpec, items: list[tuple[FiberLink, FrequencyProfile]], path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    links = []
    for i, (link, prof) in enumerate(items):
        csv_name = f"link_{i}.csv"
        (root / csv_name).write_text(profile_to_csv(prof))
        entry = link_to_dict(link)
        entry["index"] = i
        entry["profile_csv"] = csv_name
        links.append(entry)
    manifest = {"schema": _SCHEMA, "spec": spec.to_dict(), "links": links}
    (root / "bench.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_bench(path) -> tuple[BenchSpec, list[tuple[FiberLink, FrequencyProfile]]]:
    """Read a bench directory back; unknown fields warn, damage raises."""
    root = Path(path)
    manifest_path = root / "bench.json"
    if not manifest_path.is_file():
        raise BenchError(f"{manifest_path}: missing manifest")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise BenchError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if manifest.get("schema") != _SCHEMA:
        raise BenchError(f"{manifest_path}: unsupported schema {manifest.get('schema')!r}")
    extra = set(manifest) - _KNOWN_TOP_KEYS
    if extra:
        warnings.warn(f"{manifest_path}: ignoring unknown fields {sorted(extra)}")
    if "spec" not in manifest or "links" not in manifest:
        raise BenchError(f"{manifest_path}: missing 'spec' or 'links'")
    spec = BenchSpec.from_dict(manifest["spec"])
    items = []
    for n, entry in enumerate(manifest["links"]):
        try:
            link = link_from_dict(entry)
        except ValueError as exc:
            raise BenchError(f"{manifest_path}: links[{n}]: {exc}") from exc
        csv_name = entry.get("profile_csv")
        if csv_name is None:
            raise BenchError(f"{manifest_path}: links[{n}]: missing 'profile_csv'")
        csv_path = root / csv_name
        if not csv_path.is_file():
            raise BenchError(f"{csv_path}: missing profile file")
        try:
            prof = profile_from_csv(csv_path.read_text())
        except ValueError as exc:
            raise BenchError(f"{csv_path}: {exc}") from exc
        items.append((link, prof))
    return spec, items
