"""MAE evaluation, experiment orchestration, and structured CSV results.

A trial is: generate scenario -> per-node DOA posteriors -> K-best selection
-> pairwise candidates -> mean shift -> top-B centers -> MAE against ground
truth. Trials are independently seeded, so parallel execution cannot change
any result. runtime_ms is kept on the in-memory records but stays out of the
CSV, which must be byte-identical across reruns of one config+seed.
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import permutations
from pathlib import Path

import numpy as np

from . import nn
from .doa import (
    AzimuthGrid,
    DoaEstimate,
    DoaPosterior,
    cnn_posterior,
    exact_local_angles,
    music_broadband,
    oracle_posterior,
    peaks_to_estimate,
    pick_peaks,
    srp_phat,
)
from .fusion import (
    CandidateCloud,
    ClusterResult,
    build_candidates,
    mean_shift,
    resolve_speakers,
    select_nodes,
)
from .geometry import Point2D
from .room_sim import (
    RirSpec,
    Scenario,
    ScenarioConfig,
    bandlimited_noise,
    generate_scenario,
    render_node_audio,
    rir_for_scenario,
)
from .sigproc import phase_map, stft

THREADS_ENV_VAR = "ADHOC_LOCATE_THREADS"
ESTIMATOR_NAMES = ("oracle", "srp_phat", "music", "cnn")

CSV_HEADER = "scenario_id,estimator,selection,B,snr_db,t60_s,mae_m,per_speaker_errors,status"
SWEEP_HEADER = "estimator,selection,B,trials_ok,trials_failed,mae_m,mae_success_m"


@dataclass(frozen=True)
class MaeResult:
    mae_m: float
    per_speaker_errors: tuple
    missed: tuple  # truth indices left unmatched


def mae(truth, predicted, miss_penalty: float | None = None) -> MaeResult:
    """Mean Euclidean error under the optimal truth-prediction assignment.

    Exhaustive over permutations (B <= 3 in practice). Unmatched truth
    speakers each cost miss_penalty, which must be provided when predictions
    are missing.
    """
    if len(truth) == 0:
        raise ValueError("truth positions must be non-empty")
    if len(predicted) > len(truth):
        raise ValueError("more predictions than ground-truth speakers")
    if len(predicted) < len(truth) and miss_penalty is None:
        raise ValueError("missing predictions need a miss_penalty")

    dists = np.array(
        [[t.distance_to(p) for p in predicted] for t in truth]
    ) if predicted else np.zeros((len(truth), 0))
    best_total, best_assign = math.inf, None
    for perm in permutations(range(len(truth)), len(predicted)):
        total = sum(dists[t_idx][p_idx] for p_idx, t_idx in enumerate(perm))
        if total < best_total:
            best_total, best_assign = total, perm

    errors = [miss_penalty] * len(truth)
    for p_idx, t_idx in enumerate(best_assign):
        errors[t_idx] = float(dists[t_idx][p_idx])
    missed = tuple(i for i in range(len(truth)) if i not in best_assign)
    return MaeResult(float(np.mean(errors)), tuple(errors), missed)


@dataclass(frozen=True)
class EstimatorConfig:
    name: str = "oracle"
    grid_classes: int = 37
    angular_noise_deg: float = 0.0
    quantize: bool = True  # oracle only: snap bearings to the grid
    source_duration_s: float = 0.5
    source_band_hz: tuple = (200.0, 6000.0)
    reflection_order: int = 6
    weights_path: str | None = None
    snr_reference: str = "node"

    def __post_init__(self):
        if self.name not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator {self.name!r}, expected one of {ESTIMATOR_NAMES}")


@dataclass(frozen=True)
class FusionConfig:
    include_ghosts: bool = True
    bandwidth_m: float = 0.18
    tol_m: float = 1e-4
    max_iter: int = 300
    merge_radius_m: float | None = None  # None -> bandwidth / 2
    min_members: int = 2
    weighting: str = "posterior"  # "uniform" reproduces unweighted clustering
    bound_margin_m: float | None = 1.0  # None disables out-of-room culling
    peak_separation_classes: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    selection_k: int | None = None  # None selects all nodes
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.estimator.name == "cnn":
            if not self.estimator.weights_path:
                raise ValueError("estimator 'cnn' needs weights_path")
            if not Path(self.estimator.weights_path).exists():
                raise FileNotFoundError(
                    f"CNN weights file not found: {self.estimator.weights_path}"
                )

    def to_dict(self) -> dict:
        est = self.estimator
        fus = self.fusion
        return {
            "scenario": self.scenario.to_dict(),
            "estimator": {
                "name": est.name,
                "grid_classes": est.grid_classes,
                "angular_noise_deg": est.angular_noise_deg,
                "quantize": est.quantize,
                "source_duration_s": est.source_duration_s,
                "source_band_hz": list(est.source_band_hz),
                "reflection_order": est.reflection_order,
                "weights_path": est.weights_path,
                "snr_reference": est.snr_reference,
            },
            "fusion": {
                "include_ghosts": fus.include_ghosts,
                "bandwidth_m": fus.bandwidth_m,
                "tol_m": fus.tol_m,
                "max_iter": fus.max_iter,
                "merge_radius_m": fus.merge_radius_m,
                "min_members": fus.min_members,
                "weighting": fus.weighting,
                "bound_margin_m": fus.bound_margin_m,
                "peak_separation_classes": fus.peak_separation_classes,
            },
            "selection_k": self.selection_k,
            "trials": self.trials,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        est = dict(data.get("estimator", {}))
        if "source_band_hz" in est:
            est["source_band_hz"] = tuple(est["source_band_hz"])
        return cls(
            scenario=ScenarioConfig.from_dict(data.get("scenario", {})),
            estimator=EstimatorConfig(**est),
            fusion=FusionConfig(**data.get("fusion", {})),
            selection_k=data.get("selection_k"),
            trials=data.get("trials", 1),
            seed=data.get("seed", 0),
        )


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def save_experiment_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


@dataclass
class EvalRecord:
    scenario_id: str
    estimator: str
    selection: str
    B: int
    snr_db: float | None
    t60_s: float
    mae_m: float | None
    per_speaker_errors: tuple
    runtime_ms: float
    missed: int = 0
    status: str = "ok"


@dataclass
class LocalizationResult:
    positions: list
    selected: list
    posteriors: dict
    estimates: dict
    cloud: CandidateCloud
    clusters: ClusterResult


def _trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def _render_sources(scenario: Scenario, est: EstimatorConfig, trial_seed: int):
    n = int(est.source_duration_s * 16000)
    return [
        bandlimited_noise(n, 16000, np.random.default_rng([trial_seed, 2, b]), est.source_band_hz)
        for b in range(scenario.speaker_count)
    ]


def _node_posteriors(
    scenario: Scenario,
    est: EstimatorConfig,
    grid: AzimuthGrid,
    peak_separation: int,
    trial_seed: int,
    model: nn.NetworkWeights | None,
):
    """Sentence posteriors and peak estimates for every node."""
    B = scenario.speaker_count
    posteriors: dict[int, DoaPosterior] = {}
    estimates: dict[int, DoaEstimate] = {}

    if est.name == "oracle":
        for nid, pose in enumerate(scenario.node_poses):
            rng = np.random.default_rng([trial_seed, 1, nid])
            post = oracle_posterior(scenario, pose, grid, est.angular_noise_deg, rng=rng)
            posteriors[nid] = post
            if est.quantize:
                estimates[nid] = peaks_to_estimate(
                    nid, pick_peaks(post.sentence, B, peak_separation), grid, B
                )
            else:
                rng_exact = np.random.default_rng([trial_seed, 1, nid])
                thetas = []
                for theta in exact_local_angles(scenario, pose):
                    if est.angular_noise_deg > 0:
                        theta += est.angular_noise_deg * rng_exact.standard_normal()
                    thetas.append(min(max(theta, 0.0), 180.0))
                estimates[nid] = DoaEstimate(
                    nid, tuple((t, 1.0 / B) for t in sorted(thetas, reverse=True)), B
                )
        return posteriors, estimates

    sources = _render_sources(scenario, est, trial_seed)
    rir = rir_for_scenario(scenario, est.reflection_order)
    for nid, pose in enumerate(scenario.node_poses):
        audio = render_node_audio(
            scenario,
            pose,
            sources,
            rir,
            rng=np.random.default_rng([trial_seed, 3, nid]),
            snr_reference=est.snr_reference,
        )
        tensor = stft(audio)
        if est.name == "srp_phat":
            post = srp_phat(tensor, pose, grid)
        elif est.name == "music":
            post = music_broadband(tensor, pose, grid, min(B, pose.mic_count - 1))
        elif est.name == "cnn":
            post = cnn_posterior(phase_map(tensor), model, grid)
        else:  # pragma: no cover - guarded by EstimatorConfig
            raise ValueError(f"unknown estimator {est.name!r}")
        posteriors[nid] = post
        estimates[nid] = peaks_to_estimate(
            nid, pick_peaks(post.sentence, B, peak_separation), grid, B
        )
    return posteriors, estimates


def localize_scenario(
    scenario: Scenario,
    estimator: EstimatorConfig,
    fusion: FusionConfig,
    selection_k: int | None = None,
    model: nn.NetworkWeights | None = None,
    posterior_override: dict | None = None,
    trial_seed: int | None = None,
) -> LocalizationResult:
    """Run the full pipeline on one scenario and return every intermediate."""
    grid = AzimuthGrid(estimator.grid_classes)
    B = scenario.speaker_count
    if estimator.name == "cnn" and model is None:
        model = nn.load_weights(estimator.weights_path)
    seed = scenario.seed if trial_seed is None else trial_seed

    if posterior_override is not None:
        posteriors = {
            nid: DoaPosterior(np.asarray(vec)[np.newaxis, :], np.asarray(vec))
            for nid, vec in posterior_override.items()
        }
        estimates = {
            nid: peaks_to_estimate(
                nid, pick_peaks(p.sentence, B, fusion.peak_separation_classes), grid, B
            )
            for nid, p in posteriors.items()
        }
    else:
        posteriors, estimates = _node_posteriors(
            scenario, estimator, grid, fusion.peak_separation_classes, seed, model
        )

    k = len(posteriors) if selection_k is None else selection_k
    selected = select_nodes(posteriors, B, k)
    poses = {nid: pose for nid, pose in enumerate(scenario.node_poses)}
    bounds = None
    if fusion.bound_margin_m is not None:
        w, d, _ = scenario.room_size
        bounds = ((0.0, w), (0.0, d))
    cloud = build_candidates(
        selected,
        estimates,
        poses,
        include_ghosts=fusion.include_ghosts,
        room_bounds=bounds,
        bound_margin_m=fusion.bound_margin_m or 0.0,
        weighting=fusion.weighting,
    )
    if len(cloud) == 0:
        raise RuntimeError("no triangulation candidates survived")
    clusters = mean_shift(
        cloud,
        fusion.bandwidth_m,
        tol=fusion.tol_m,
        max_iter=fusion.max_iter,
        merge_radius=fusion.merge_radius_m,
    )
    positions = resolve_speakers(clusters, B, fusion.min_members)
    return LocalizationResult(positions, selected, posteriors, estimates, cloud, clusters)


def _selection_label(selection_k: int | None) -> str:
    return "all" if selection_k is None else f"K={selection_k}"


def run_trial(config: ExperimentConfig, trial: int, model=None) -> EvalRecord:
    started = time.perf_counter()
    seed = _trial_seed(config.seed, trial)
    label = _selection_label(config.selection_k)
    try:
        scenario = generate_scenario(config.scenario, seed)
        result = localize_scenario(
            scenario,
            config.estimator,
            config.fusion,
            config.selection_k,
            model=model,
            trial_seed=seed,
        )
        w, d, _ = scenario.room_size
        scored = mae(
            list(scenario.speaker_positions),
            result.positions,
            miss_penalty=math.hypot(w, d),
        )
        return EvalRecord(
            scenario_id=f"trial-{trial:04d}",
            estimator=config.estimator.name,
            selection=label,
            B=scenario.speaker_count,
            snr_db=scenario.snr_db,
            t60_s=scenario.t60,
            mae_m=scored.mae_m,
            per_speaker_errors=scored.per_speaker_errors,
            runtime_ms=(time.perf_counter() - started) * 1e3,
            missed=len(scored.missed),
        )
    except Exception as exc:  # failed trials are recorded, the run continues
        return EvalRecord(
            scenario_id=f"trial-{trial:04d}",
            estimator=config.estimator.name,
            selection=label,
            B=config.scenario.speaker_count,
            snr_db=None,
            t60_s=float("nan"),
            mae_m=None,
            per_speaker_errors=(),
            runtime_ms=(time.perf_counter() - started) * 1e3,
            status=f"failed:{type(exc).__name__}",
        )


def _worker_count() -> int:
    cap = os.environ.get(THREADS_ENV_VAR)
    workers = os.cpu_count() or 1
    if cap:
        workers = min(workers, max(1, int(cap)))
    return workers


def run_experiment(config: ExperimentConfig) -> list[EvalRecord]:
    """All trial records, ordered by trial index regardless of completion order."""
    model = None
    if config.estimator.name == "cnn":
        model = nn.load_weights(config.estimator.weights_path)
    workers = _worker_count()
    if workers <= 1 or config.trials == 1:
        return [run_trial(config, t, model) for t in range(config.trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_trial, config, t, model) for t in range(config.trials)]
        return [f.result() for f in futures]


def aggregate_mae(records: list[EvalRecord], success_only: bool = False) -> tuple:
    """(mean mae, count) over completed trials; optionally only full-B ones."""
    rows = [r for r in records if r.status == "ok" and r.mae_m is not None]
    if success_only:
        rows = [r for r in rows if r.missed == 0]
    if not rows:
        return (None, 0)
    return (float(np.mean([r.mae_m for r in rows])), len(rows))


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.6f}"


def records_to_csv(records: list[EvalRecord]) -> str:
    """Trial rows plus the penalty-inclusive and success-only aggregate rows."""
    lines = [CSV_HEADER]
    for r in records:
        errors = ";".join(_fmt(e) for e in r.per_speaker_errors)
        lines.append(
            ",".join(
                [
                    r.scenario_id,
                    r.estimator,
                    r.selection,
                    str(r.B),
                    _fmt(r.snr_db),
                    "" if math.isnan(r.t60_s) else _fmt(r.t60_s),
                    _fmt(r.mae_m),
                    errors,
                    r.status,
                ]
            )
        )
    for name, success_only in (("aggregate", False), ("aggregate_success", True)):
        value, count = aggregate_mae(records, success_only)
        ref = records[0] if records else None
        lines.append(
            ",".join(
                [
                    name,
                    ref.estimator if ref else "",
                    ref.selection if ref else "",
                    str(ref.B) if ref else "",
                    "",
                    "",
                    _fmt(value),
                    "",
                    f"n={count}",
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_records_csv(records: list[EvalRecord], path: str | Path) -> None:
    Path(path).write_text(records_to_csv(records), newline="\n")


def run_sweep(config: ExperimentConfig, k_values: list) -> str:
    """K-ablation: one aggregate CSV row per selection size (None = all)."""
    lines = [SWEEP_HEADER]
    for k in k_values:
        records = run_experiment(replace(config, selection_k=k))
        all_mae, n_ok = aggregate_mae(records)
        success_mae, _ = aggregate_mae(records, success_only=True)
        n_failed = sum(1 for r in records if r.status != "ok")
        lines.append(
            ",".join(
                [
                    config.estimator.name,
                    _selection_label(k),
                    str(config.scenario.speaker_count),
                    str(n_ok),
                    str(n_failed),
                    _fmt(all_mae),
                    _fmt(success_mae),
                ]
            )
        )
    return "\n".join(lines) + "\n"
