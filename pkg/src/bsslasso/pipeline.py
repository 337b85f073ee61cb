"""Three-stage sparse detection over the phasor dictionary, with cluster
narrowing and grid-search magnitude reconstruction.

Stage 1 (selection) runs the penalized path with unit weights. Stage 2/3
(correction) rebuild the weight vector from ones each pass, discounting the
step-atom penalty wherever the previous pass put non-negligible impulse
coefficients, and re-run the path: an impulse found at a position is strong
evidence of a step at that same position, and the discount lets the step
relocate there. The treatment stage narrows every contiguous run of positive
coefficients to the single best position by exhaustive refit.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import nnls

from .dictionary import Dictionary, build_dictionary, build_observation, position_grid
from .fibermodel import (
    DEFAULT_CONSTANTS,
    FrequencyProfile,
    MagnitudeError,
    PhysicalConstants,
    fault_response,
    magnitude_recursion,
    reflection_response,
)
from .lasso import LassoProblem, LassoSolution, default_lambda_grid, solve_path

__all__ = [
    "DetectorConfig",
    "SelectionVector",
    "StageOutput",
    "Cluster",
    "EventEstimate",
    "DetectionReport",
    "selection_stage",
    "correction_stage",
    "find_clusters",
    "treatment_stage",
    "detect",
    "reconstruct_magnitudes",
    "naive_magnitudes",
    "report_to_dict",
    "report_from_dict",
]

MODES = ("bss-lasso", "bss-1", "sinclasso")


@dataclass(frozen=True)
class DetectorConfig:
    """Everything the detector needs besides the measured profile."""

    mode: str = "bss-lasso"
    fiber_length_m: float | None = None
    grid_step_m: float = 10.0
    grid_margin_m: float = 1500.0
    gamma: float = 0.5                 # penalty discount in the correction passes
    epsilon: float = 0.05              # impulse significance threshold, rel. to max
    ebic_gamma: float = 1.0
    lambda_count: int = 100
    lambda_decades: float = 3.0
    penalty_scaling: str = "column-norm"
    include_intercept: bool = False
    cluster_reflections: bool = True   # narrow impulse runs too, not only step runs
    enumeration_cap: int = 100_000
    reflect_flag_rtol: float = 1e-8
    reconstruct_target: str = "fitted"   # or "observation"
    loss_search_max_db: float = 5.0
    loss_coarse_db: float = 0.5
    loss_fine_db: float = 0.1
    reflect_search_max_db: float = 20.0
    reflect_step_db: float = 2.0
    constants: PhysicalConstants = DEFAULT_CONSTANTS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.grid_step_m <= 0 or self.grid_margin_m < 0:
            raise ValueError("grid_step_m must be positive, grid_margin_m >= 0")
        if self.lambda_count < 2 or self.lambda_decades <= 0:
            raise ValueError("lambda grid needs >= 2 points over > 0 decades")
        if self.reconstruct_target not in ("fitted", "observation"):
            raise ValueError("reconstruct_target must be 'fitted' or 'observation'")

    def to_dict(self) -> dict:
        c = self.constants
        return {
            "mode": self.mode,
            "fiber_length_m": self.fiber_length_m,
            "grid_step_m": self.grid_step_m,
            "grid_margin_m": self.grid_margin_m,
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "ebic_gamma": self.ebic_gamma,
            "lambda_count": self.lambda_count,
            "lambda_decades": self.lambda_decades,
            "penalty_scaling": self.penalty_scaling,
            "include_intercept": self.include_intercept,
            "cluster_reflections": self.cluster_reflections,
            "enumeration_cap": self.enumeration_cap,
            "reflect_flag_rtol": self.reflect_flag_rtol,
            "reconstruct_target": self.reconstruct_target,
            "loss_search_max_db": self.loss_search_max_db,
            "loss_coarse_db": self.loss_coarse_db,
            "loss_fine_db": self.loss_fine_db,
            "reflect_search_max_db": self.reflect_search_max_db,
            "reflect_step_db": self.reflect_step_db,
            "constants": {
                "alpha": c.alpha,
                "group_index": c.group_index,
                "light_speed": c.light_speed,
                "amplitude_scale": c.amplitude_scale,
                "spike_width": c.spike_width,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        consts = d.pop("constants", None)
        if consts is not None:
            d["constants"] = PhysicalConstants(**consts)
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class SelectionVector:
    """Coefficient vector split into a step block and an impulse block."""

    values: np.ndarray
    n_fault: int
    n_reflect: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != self.n_fault + self.n_reflect:
            raise ValueError("selection length must equal n_fault + n_reflect")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def fault(self) -> np.ndarray:
        return self.values[: self.n_fault]

    @property
    def reflect(self) -> np.ndarray:
        return self.values[self.n_fault :]


@dataclass(frozen=True)
class StageOutput:
    beta: SelectionVector
    stage: str                        # selection | correction_2 | correction_3 | treated
    weights_used: np.ndarray
    lambda_chosen: float
    ebic: float
    rss: float
    intercept: float = 0.0


@dataclass(frozen=True)
class Cluster:
    """A maximal run of adjacent positive coefficients in one block."""

    indices: tuple[int, ...]          # grid indices, contiguous
    block: str                        # "fault" | "reflection"

    def __post_init__(self):
        if not self.indices:
            raise ValueError("cluster must be nonempty")
        if any(b - a != 1 for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("cluster indices must be contiguous")
        if self.block not in ("fault", "reflection"):
            raise ValueError("block must be 'fault' or 'reflection'")


@dataclass(frozen=True)
class EventEstimate:
    position_m: float
    is_reflective: bool
    loss_db: float | None = None
    reflectance_db: float | None = None


@dataclass(frozen=True)
class DetectionReport:
    estimates: tuple[EventEstimate, ...]
    fitted_profile: FrequencyProfile
    diagnostics: tuple[StageOutput, ...]
    config: DetectorConfig
    runtime_s: float
    grid_positions: np.ndarray

    def fault_positions(self) -> np.ndarray:
        return np.array([e.position_m for e in self.estimates])


def _solution_to_stage(sol: LassoSolution, dictionary: Dictionary, stage: str) -> StageOutput:
    q = dictionary.q
    n_r = q if dictionary.has_reflections else 0
    return StageOutput(
        beta=SelectionVector(sol.beta[: q + n_r], q, n_r),
        stage=stage,
        weights_used=sol.weights,
        lambda_chosen=sol.lambda_chosen,
        ebic=sol.ebic,
        rss=sol.rss,
        intercept=sol.intercept,
    )


def _base_problem(y: np.ndarray, dictionary: Dictionary, config: DetectorConfig) -> LassoProblem:
    w = np.ones(dictionary.n_penalized)
    problem = LassoProblem(
        dictionary, y, w, np.array([2.0, 1.0]),
        penalty_scaling=config.penalty_scaling, ebic_gamma=config.ebic_gamma,
    )
    grid = default_lambda_grid(problem, count=config.lambda_count, decades=config.lambda_decades)
    return problem.with_weights(w, grid)


def selection_stage(y: np.ndarray, dictionary: Dictionary,
                    config: DetectorConfig = DetectorConfig()) -> StageOutput:
    """First pass: penalized path with unit weights."""
    problem = _base_problem(y, dictionary, config)
    return _solution_to_stage(solve_path(problem), dictionary, "selection")


def correction_stage(y: np.ndarray, dictionary: Dictionary, selection: StageOutput,
                     gamma: float = 0.5, epsilon: float = 0.05,
                     config: DetectorConfig | None = None) -> StageOutput:
    """Up to two re-runs with the step penalty discounted at positions whose
    impulse coefficient is non-negligible; returns the input unchanged when
    there is nothing reflective to act on."""
    if not dictionary.has_reflections:
        raise ValueError("correction requires the impulse block in the dictionary")
    if config is None:
        config = DetectorConfig(gamma=gamma, epsilon=epsilon)
    q = dictionary.q
    problem = _base_problem(y, dictionary, config)
    out = selection
    for k in (2, 3):
        refl = out.beta.reflect
        top = float(refl.max()) if refl.size else 0.0
        if top <= 0.0:
            return out
        w = np.ones(dictionary.n_penalized)
        w[:q][refl > epsilon * top] = gamma
        problem = problem.with_weights(w, default_lambda_grid(
            problem.with_weights(w), count=config.lambda_count, decades=config.lambda_decades))
        out = _solution_to_stage(solve_path(problem), dictionary, f"correction_{k}")
    return out


def find_clusters(beta: SelectionVector, include_reflections: bool = True) -> list[Cluster]:
    """Maximal runs of strictly positive coefficients, per block."""
    out: list[Cluster] = []
    for block, vec in (("fault", beta.fault), ("reflection", beta.reflect)):
        if block == "reflection" and not include_reflections:
            continue
        run: list[int] = []
        for j, v in enumerate(vec):
            if v > 0.0:
                run.append(j)
            elif run:
                out.append(Cluster(tuple(run), block))
                run = []
        if run:
            out.append(Cluster(tuple(run), block))
    return out


def _narrow_by_weighted_average(cluster: Cluster, values: np.ndarray) -> Cluster:
    """Collapse a cluster to the magnitude-weighted mean index; ties between
    neighbors resolve to the lower index."""
    idx = np.array(cluster.indices)
    w = values[idx]
    center = float((idx * w).sum() / w.sum())
    lo = math.floor(center)
    pick = lo + 1 if (center - lo) > 0.5 else lo
    pick = min(max(pick, cluster.indices[0]), cluster.indices[-1])
    return Cluster((pick,), cluster.block)


def treatment_stage(y: np.ndarray, dictionary: Dictionary, clusters: list[Cluster],
                    config: DetectorConfig = DetectorConfig(),
                    amplitudes: SelectionVector | None = None) -> StageOutput:
    """Pick one position per cluster by exhaustive nonnegative refit.

    All single-index-per-cluster combinations are enumerated and scored by
    residual sum of squares; when the combination count exceeds the cap the
    widest clusters are first collapsed to their magnitude-weighted mean
    position (``amplitudes``, when given, supplies the weights).
    """
    q = dictionary.q
    n_r = q if dictionary.has_reflections else 0
    width = q + n_r
    if not clusters:
        sel = SelectionVector(np.zeros(width), q, n_r)
        return StageOutput(sel, "treated", np.ones(dictionary.n_penalized), math.nan,
                           math.nan, float(y @ y))
    X = dictionary.matrix
    if dictionary.has_intercept:
        Xp = X[:, :-1]
        y_fit = y - y.mean()
        X_fit = Xp - Xp.mean(axis=0)
    else:
        y_fit = y
        X_fit = X

    def col_of(j: int, block: str) -> int:
        return j if block == "fault" else q + j

    # collapse widest clusters until the combination count is workable
    work = list(clusters)

    def n_comb(cl):
        n = 1
        for c in cl:
            n *= len(c.indices)
            if n > config.enumeration_cap:
                return n
        return n

    if n_comb(work) > config.enumeration_cap:
        if amplitudes is not None:
            block_values = {"fault": amplitudes.fault, "reflection": amplitudes.reflect}
        else:
            block_values = {"fault": np.ones(q), "reflection": np.ones(q)}
        order = sorted(range(len(work)), key=lambda i: (-len(work[i].indices), work[i].indices[0]))
        for i in order:
            if n_comb(work) <= config.enumeration_cap:
                break
            work[i] = _narrow_by_weighted_average(work[i], block_values[work[i].block])
        if n_comb(work) > config.enumeration_cap:
            raise RuntimeError("cluster combination count exceeds the cap even after narrowing")

    best_rss = math.inf
    best_combo: tuple[int, ...] | None = None
    best_coef: np.ndarray | None = None
    for combo in itertools.product(*[c.indices for c in work]):
        cols = [col_of(j, c.block) for j, c in zip(combo, work)]
        A = np.ascontiguousarray(X_fit[:, cols])
        coef, rnorm = nnls(A, y_fit)
        rss = rnorm * rnorm
        if best_combo is None or rss < best_rss * (1.0 - 1e-12):
            best_rss = rss
            best_combo = combo
            best_coef = coef
    values = np.zeros(width)
    for j, c, v in zip(best_combo, work, best_coef):
        values[col_of(j, c.block)] += v
    intercept = 0.0
    if dictionary.has_intercept:
        cols = [col_of(j, c.block) for j, c in zip(best_combo, work)]
        intercept = float(y.mean() - X[:, cols].mean(axis=0) @ best_coef)
    return StageOutput(
        beta=SelectionVector(values, q, n_r),
        stage="treated",
        weights_used=np.ones(dictionary.n_penalized),
        lambda_chosen=0.0,
        ebic=math.nan,
        rss=float(best_rss),
        intercept=intercept,
    )


def detect(profile: FrequencyProfile, config: DetectorConfig) -> DetectionReport:
    """Run the configured stages on one measured profile."""
    t0 = time.perf_counter()
    if config.fiber_length_m is None:
        raise ValueError("config.fiber_length_m is required to build the position grid")
    grid = position_grid(config.fiber_length_m, config.grid_step_m, config.grid_margin_m)
    dictionary = build_dictionary(
        grid,
        profile.frequencies,
        config.constants,
        include_reflections=(config.mode != "sinclasso"),
        include_intercept=config.include_intercept,
    )
    y = build_observation(profile)
    stages = [selection_stage(y, dictionary, config)]
    if config.mode == "bss-lasso" and dictionary.has_reflections:
        corrected = correction_stage(y, dictionary, stages[0], config.gamma, config.epsilon, config)
        if corrected is not stages[0]:
            stages.append(corrected)
    clusters = find_clusters(stages[-1].beta, include_reflections=config.cluster_reflections)
    treated = treatment_stage(y, dictionary, clusters, config, amplitudes=stages[-1].beta)
    stages.append(treated)

    q = dictionary.q
    tvals = treated.beta.values
    flag_floor = config.reflect_flag_rtol * float(tvals.max()) if tvals.size else 0.0
    estimates = []
    for j in np.flatnonzero(treated.beta.fault > 0.0):
        reflective = bool(
            dictionary.has_reflections and treated.beta.reflect[j] > max(flag_floor, 0.0)
        )
        estimates.append(EventEstimate(float(grid.positions[j]), reflective))
    estimates.sort(key=lambda e: e.position_m)

    fitted_stack = dictionary.matrix[:, : q + (q if dictionary.has_reflections else 0)] @ tvals
    fitted_stack = fitted_stack + treated.intercept
    m = profile.frequencies.size
    fitted = FrequencyProfile(profile.frequencies, fitted_stack[:m] + 1j * fitted_stack[m:])
    return DetectionReport(
        estimates=tuple(estimates),
        fitted_profile=fitted,
        diagnostics=tuple(stages),
        config=config,
        runtime_s=time.perf_counter() - t0,
        grid_positions=grid.positions,
    )


# ---------------------------------------------------------------------------
# magnitude reconstruction


def _candidate_amplitudes(positions, reflective_flags, losses_grid, refl_grid, constants):
    """Amplitude vectors (step weights then impulse weights) for every
    combination of per-event loss values and per-reflective-event impulse
    levels. Returns (n_cand, n_atoms) with losses varying fastest last."""
    n = len(positions)
    refl_idx = [i for i, r in enumerate(reflective_flags) if r]
    axes = [np.asarray(losses_grid[i], dtype=float) for i in range(n)]
    axes += [np.asarray(refl_grid[r], dtype=float) for r in range(len(refl_idx))]
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = [m.reshape(-1) for m in mesh]
    losses = np.stack(flat[:n], axis=1)                      # (N, n)
    xi2 = 10.0 ** (-losses / 10.0)
    levels = np.concatenate(
        [np.ones((losses.shape[0], 1)), np.cumprod(xi2, axis=1)[:, :-1]], axis=1
    )
    phi = levels * (1.0 - xi2)
    cols = [phi]
    if refl_idx:
        refls = np.stack(flat[n:], axis=1)                   # (N, n_refl)
        theta = levels[:, refl_idx] * 10.0 ** (refls / 10.0) * constants.spike_width
        cols.append(theta)
    amps = np.concatenate(cols, axis=1) * constants.amplitude_scale
    return amps, losses, (np.stack(flat[n:], axis=1) if refl_idx else np.zeros((losses.shape[0], 0)))


def _grid_search(atoms: np.ndarray, target: np.ndarray, amps: np.ndarray) -> int:
    """Index of the candidate amplitude vector closest to the target in l2."""
    gram = atoms.T @ atoms
    cross = atoms.T @ target
    scores = np.einsum("ij,jk,ik->i", amps, gram, amps) - 2.0 * (amps @ cross)
    return int(np.argmin(scores))


def reconstruct_magnitudes(report: DetectionReport, constants: PhysicalConstants | None = None,
                           config: DetectorConfig | None = None,
                           observation: FrequencyProfile | None = None) -> DetectionReport:
    """Fill in loss and reflectance estimates by forward-model grid search.

    Candidate profiles are synthesized analytically at the estimated
    positions over a coarse loss/reflectance grid, scored by l2 distance to
    the fitted profile (or the raw observation), then losses are refined on
    a fine grid around the coarse winner.
    """
    config = config or report.config
    constants = constants or config.constants
    if not report.estimates:
        return report
    if config.reconstruct_target == "observation":
        if observation is None:
            raise ValueError("reconstruct_target='observation' needs the measured profile")
        target_profile = observation
    else:
        target_profile = report.fitted_profile
    f = target_profile.frequencies
    target = np.concatenate([target_profile.samples.real, target_profile.samples.imag])

    positions = [e.position_m for e in report.estimates]
    flags = [e.is_reflective for e in report.estimates]
    n = len(positions)
    atom_cols = [fault_response(f, np.array(positions), constants)]
    refl_positions = [p for p, r in zip(positions, flags) if r]
    if refl_positions:
        atom_cols.append(reflection_response(f, np.array(refl_positions), constants))
    atoms_c = np.concatenate(atom_cols, axis=1)
    atoms = np.vstack([atoms_c.real, atoms_c.imag])

    n_refl = sum(flags)
    coarse_losses = [np.arange(0.0, config.loss_search_max_db + 1e-9, config.loss_coarse_db)] * n
    coarse_refl = [np.arange(0.0, config.reflect_search_max_db + 1e-9, config.reflect_step_db)] * n_refl
    amps, losses, refls = _candidate_amplitudes(positions, flags, coarse_losses, coarse_refl, constants)
    k = _grid_search(atoms, target, amps)
    loss_c = losses[k]
    refl_c = refls[k]

    fine_losses = [
        np.clip(
            np.arange(l - config.loss_coarse_db, l + config.loss_coarse_db + 1e-9, config.loss_fine_db),
            0.0,
            config.loss_search_max_db,
        )
        for l in loss_c
    ]
    fine_refl = [np.array([r]) for r in refl_c]
    amps2, losses2, refls2 = _candidate_amplitudes(positions, flags, fine_losses, fine_refl, constants)
    k2 = _grid_search(atoms, target, amps2)
    loss_f = losses2[k2]
    refl_f = refls2[k2]

    refl_iter = iter(refl_f)
    new_estimates = []
    for i, est in enumerate(report.estimates):
        new_estimates.append(
            replace(
                est,
                loss_db=float(loss_f[i]),
                reflectance_db=float(next(refl_iter)) if est.is_reflective else None,
            )
        )
    return replace(report, estimates=tuple(new_estimates))


def naive_magnitudes(report: DetectionReport) -> list[dict]:
    """Back out dB magnitudes directly from the treated coefficients.

    The amplitude-to-magnitude recursion is ill-conditioned and can fail on
    estimated coefficients; failures are reported per event with the mode
    (``negative_radicand`` or ``zero_level``) instead of raising.
    """
    treated = report.diagnostics[-1]
    if treated.stage != "treated":
        raise ValueError("report has no treated stage")
    grid = report.grid_positions
    length_norm = float(grid[-1])
    idx = np.flatnonzero(treated.beta.fault > 0.0)
    phis = treated.beta.fault[idx] / (length_norm * report.config.constants.amplitude_scale)
    out = []
    xi: list[float] = []
    failure: str | None = None
    fail_at = -1
    try:
        xi = magnitude_recursion(phis)
    except MagnitudeError as exc:
        failure = exc.mode
        fail_at = exc.index
    levels = np.concatenate([[1.0], np.cumprod([x * x for x in xi])])
    for rank, j in enumerate(idx):
        entry: dict = {"position_m": float(grid[j])}
        if failure is not None and rank >= fail_at:
            entry["loss_db"] = math.inf
            entry["failure"] = failure
        else:
            x = xi[rank]
            entry["loss_db"] = math.inf if x == 0.0 else -20.0 * math.log10(x)
            entry["failure"] = None
        if treated.beta.n_reflect and treated.beta.reflect[j] > 0.0 and rank < levels.size:
            theta = treated.beta.reflect[j] / (length_norm * report.config.constants.amplitude_scale)
            level = levels[rank] if rank < len(levels) else 0.0
            if level > 0.0 and (failure is None or rank < fail_at):
                entry["reflectance_db"] = 10.0 * math.log10(
                    theta / (level * report.config.constants.spike_width)
                )
            else:
                entry["reflectance_db"] = math.inf
        out.append(entry)
    return out


# ---------------------------------------------------------------------------
# report serialization


def report_to_dict(report: DetectionReport, fitted_profile_ref: str | None = None,
                   include_runtime: bool = False, link_info: dict | None = None) -> dict:
    stages = []
    for s in report.diagnostics:
        support = []
        for block, vec in (("fault", s.beta.fault), ("reflection", s.beta.reflect)):
            for j in np.flatnonzero(vec > 0.0):
                support.append(
                    {
                        "block": block,
                        "index": int(j),
                        "position_m": float(report.grid_positions[j]),
                        "value": float(vec[j]),
                    }
                )
        stages.append(
            {
                "stage": s.stage,
                "lambda": None if math.isnan(s.lambda_chosen) else s.lambda_chosen,
                "ebic": None if math.isnan(s.ebic) else s.ebic,
                "rss": s.rss,
                "intercept": s.intercept,
                "support": support,
            }
        )
    return {
        "schema": "bsslasso-report/1",
        "config": report.config.to_dict(),
        "estimates": [
            {
                "position_m": e.position_m,
                "is_reflective": e.is_reflective,
                "loss_db": e.loss_db,
                "reflectance_db": e.reflectance_db,
            }
            for e in report.estimates
        ],
        "stage_diagnostics": stages,
        "fitted_profile_ref": fitted_profile_ref,
        "runtime_ms": report.runtime_s * 1e3 if include_runtime else None,
        "link": link_info,
    }


def report_from_dict(d: dict) -> dict:
    """Light validation for consumers that only need estimates + config."""
    if d.get("schema") != "bsslasso-report/1":
        raise ValueError(f"unsupported report schema {d.get('schema')!r}")
    if "estimates" not in d or "config" not in d:
        raise ValueError("report is missing estimates or config")
    return d
