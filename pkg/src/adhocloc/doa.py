"""Per-node DOA estimation as sentence-level posteriors over azimuth classes.

Every estimator returns the same contract: per-frame simplex rows plus their
time average. SRP-PHAT and MUSIC spectra become "posteriors" by
sum-normalization so all estimators are interchangeable upstream of fusion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .geometry import NodePose, bearing_of, wrap180
from .room_sim import Scenario
from .sigproc import PhaseMap, StftTensor

_PHAT_FLOOR = 1e-12


@dataclass(frozen=True)
class AzimuthGrid:
    """L grid points spanning [0, 180] inclusively; spacing 180/(L-1)."""

    class_count: int = 37

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("grid needs at least 2 classes")

    @property
    def class_width(self) -> float:
        return 180.0 / (self.class_count - 1)

    def angles(self) -> np.ndarray:
        return np.linspace(0.0, 180.0, self.class_count)

    def quantize(self, theta_deg: float) -> int:
        """Index of the nearest grid angle; theta is clipped into [0, 180]."""
        theta = min(max(float(theta_deg), 0.0), 180.0)
        return int(round(theta / self.class_width))

    def angle_of(self, index: int) -> float:
        return float(index) * self.class_width


@dataclass(frozen=True)
class DoaPosterior:
    """Per-frame rows (T, L) and their time-average sentence row (L,)."""

    per_frame: np.ndarray
    sentence: np.ndarray

    def __post_init__(self):
        pf = np.asarray(self.per_frame, dtype=np.float64)
        st = np.asarray(self.sentence, dtype=np.float64)
        if pf.ndim != 2 or st.ndim != 1 or pf.shape[1] != st.shape[0]:
            raise ValueError(f"inconsistent posterior shapes {pf.shape} / {st.shape}")
        if np.any(pf < 0) or np.any(st < 0):
            raise ValueError("posteriors must be non-negative")
        if not np.allclose(pf.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("per-frame rows must sum to 1")
        if not math.isclose(st.sum(), 1.0, abs_tol=1e-6):
            raise ValueError("sentence row must sum to 1")
        object.__setattr__(self, "per_frame", pf)
        object.__setattr__(self, "sentence", st)

    @classmethod
    def from_frames(cls, per_frame: np.ndarray) -> "DoaPosterior":
        return cls(per_frame, average_posterior(per_frame))


@dataclass(frozen=True)
class DoaEstimate:
    """Top-B peaks of one node's sentence posterior, sorted by value."""

    node_id: int
    peaks: tuple  # ((theta_deg, posterior_value), ...)
    requested_B: int

    def __post_init__(self):
        object.__setattr__(self, "peaks", tuple((float(t), float(v)) for t, v in self.peaks))
        if len(self.peaks) > self.requested_B:
            raise ValueError("more peaks than requested")
        values = [v for _, v in self.peaks]
        if any(a < b for a, b in zip(values, values[1:])):
            raise ValueError("peaks must be sorted by descending posterior")


def average_posterior(per_frame: np.ndarray) -> np.ndarray:
    """Sentence-level posterior: unweighted mean of the per-frame rows."""
    pf = np.asarray(per_frame, dtype=np.float64)
    if pf.ndim != 2 or pf.shape[0] == 0:
        raise ValueError(f"need a non-empty (frames, classes) array, got shape {pf.shape}")
    return pf.mean(axis=0)


def pick_peaks(
    sentence: np.ndarray, B: int, min_separation_classes: int = 1
) -> list[tuple[int, float]]:
    """Greedy top-B peak picking with non-maximum suppression.

    Returns (class_index, value) pairs in descending value order; ties go to
    the lower index. Fewer than B peaks come back when suppression exhausts
    the candidates.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    values = np.asarray(sentence, dtype=np.float64)
    available = np.ones(values.shape[0], dtype=bool)
    peaks = []
    while len(peaks) < B and available.any():
        masked = np.where(available, values, -np.inf)
        idx = int(np.argmax(masked))  # argmax breaks ties toward the lower index
        peaks.append((idx, float(values[idx])))
        lo = max(0, idx - min_separation_classes)
        hi = min(values.shape[0], idx + min_separation_classes + 1)
        available[lo:hi] = False
    return peaks


def peaks_to_estimate(
    node_id: int, peaks: list[tuple[int, float]], grid: AzimuthGrid, B: int
) -> DoaEstimate:
    return DoaEstimate(node_id, tuple((grid.angle_of(i), v) for i, v in peaks), B)


def _normalize_rows(power: np.ndarray) -> np.ndarray:
    """Floor at zero and scale each row to a simplex; degenerate rows go uniform."""
    power = np.maximum(power, 0.0)
    sums = power.sum(axis=1, keepdims=True)
    flat = (sums <= 0.0).ravel()
    power[flat] = 1.0
    sums[flat] = power.shape[1]
    return power / sums


def _steering_phases(
    pose: NodePose, grid: AzimuthGrid, freqs_hz: np.ndarray, speed_of_sound: float = 343.0
) -> np.ndarray:
    """exp(+j 2 pi f p_i cos(theta) / c) shaped (L, F, M).

    Matches the rendering convention: a wave from local azimuth theta reaches
    the microphone at axis offset p_i earlier by p_i cos(theta) / c.
    """
    offsets = np.array(pose.mic_offsets())
    cos_t = np.cos(np.radians(grid.angles()))
    delay = cos_t[:, None] * offsets[None, :] / speed_of_sound  # (L, M)
    return np.exp(2j * np.pi * freqs_hz[None, :, None] * delay[:, None, :])


def srp_phat(
    tensor: StftTensor, pose: NodePose, grid: AzimuthGrid | None = None
) -> DoaPosterior:
    """Steered response power with phase transform over all microphone pairs.

    The pairwise SRP is recovered from the full beamformer power by removing
    the constant auto-terms; frames are normalized independently.
    """
    if grid is None:
        grid = AzimuthGrid(180)
    if tensor.channel_count < 2:
        raise ValueError("SRP-PHAT needs at least 2 channels")
    if tensor.channel_count != pose.mic_count:
        raise ValueError(
            f"tensor has {tensor.channel_count} channels but pose expects {pose.mic_count}"
        )
    X = tensor.values[:, :, 1:]  # drop DC
    freqs = tensor.bin_frequencies()[1:]
    U = X / np.maximum(np.abs(X), _PHAT_FLOOR)
    steer = _steering_phases(pose, grid, freqs)  # (L, F, M)
    # beam (T, L): | sum_i U_i e^{-j phi_i} |^2 summed over bins
    beam = np.einsum("itf,lfi->tlf", U, steer.conj())
    power = np.abs(beam) ** 2
    total = power.sum(axis=2)
    auto = (np.abs(U) ** 2).sum(axis=(0, 2))  # (T,) auto-term energy
    pair_power = (total - auto[:, None]) / 2.0
    return DoaPosterior.from_frames(_normalize_rows(pair_power))


def music_broadband(
    tensor: StftTensor,
    pose: NodePose,
    grid: AzimuthGrid | None = None,
    source_count: int = 1,
) -> DoaPosterior:
    """Incoherent broadband MUSIC: per-bin noise-subspace pseudo-spectra, averaged.

    The covariance averaging collapses the frame dimension, so per_frame
    holds the single broadband row.
    """
    if grid is None:
        grid = AzimuthGrid(180)
    M = tensor.channel_count
    if source_count >= M:
        raise ValueError(f"source_count {source_count} must be below channel count {M}")
    if M != pose.mic_count:
        raise ValueError(f"tensor has {M} channels but pose expects {pose.mic_count}")
    X = tensor.values[:, :, 1:]
    freqs = tensor.bin_frequencies()[1:]
    T = tensor.frame_count
    # spatial covariance per bin: (F, M, M)
    R = np.einsum("itf,jtf->fij", X, X.conj()) / max(T, 1)
    traces = np.einsum("fii->f", R).real
    loading = 1e-6 * np.maximum(traces, _PHAT_FLOOR) / M
    R = R + loading[:, None, None] * np.eye(M)[None, :, :]
    eigvals, eigvecs = np.linalg.eigh(R)  # ascending eigenvalues
    noise_space = eigvecs[:, :, : M - source_count]  # (F, M, M-D)
    steer = _steering_phases(pose, grid, freqs)  # (L, F, M)
    proj = np.einsum("lfm,fmk->lfk", steer.conj(), noise_space)
    denom = np.maximum(np.sum(np.abs(proj) ** 2, axis=2), _PHAT_FLOOR)  # (L, F)
    pseudo = (1.0 / denom).mean(axis=1)
    return DoaPosterior.from_frames(_normalize_rows(pseudo[np.newaxis, :]))


def cnn_posterior(
    phase_map: PhaseMap, model: nn.NetworkWeights, grid: AzimuthGrid | None = None
) -> DoaPosterior:
    """Per-frame CNN forward passes over the phase map, then the time average."""
    if grid is None:
        grid = AzimuthGrid(37)
    expected = (1, phase_map.channel_count, phase_map.bin_count)
    if tuple(model.input_shape) != expected:
        raise nn.ShapeMismatchError(
            f"model input {model.input_shape} does not fit phase map {expected}"
        )
    if model.output_dim != grid.class_count:
        raise nn.ShapeMismatchError(
            f"model emits {model.output_dim} classes, grid has {grid.class_count}"
        )
    rows = [
        nn.forward(model, phase_map.frame(t)[np.newaxis, :, :])
        for t in range(phase_map.frame_count)
    ]
    return DoaPosterior.from_frames(np.stack(rows))


def oracle_posterior(
    scenario: Scenario,
    node: NodePose,
    grid: AzimuthGrid,
    angular_noise_deg: float = 0.0,
    rng: np.random.Generator | int | None = None,
) -> DoaPosterior:
    """Ground-truth posterior: true local angles, optional Gaussian noise, grid-quantized.

    Each speaker contributes mass 1/B on its quantized class; collisions
    merge. Isolates fusion-stage behavior from estimator quality.
    """
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    elif isinstance(rng, int):
        rng = np.random.default_rng(rng)
    B = scenario.speaker_count
    sentence = np.zeros(grid.class_count)
    for speaker in scenario.speaker_positions:
        theta = node.local_angle_to(speaker)
        if angular_noise_deg > 0:
            theta += angular_noise_deg * rng.standard_normal()
        theta = min(max(theta, 0.0), 180.0)
        sentence[grid.quantize(theta)] += 1.0 / B
    return DoaPosterior(sentence[np.newaxis, :], sentence)


def exact_local_angles(scenario: Scenario, node: NodePose) -> list[float]:
    """Continuous (unquantized) true local angles of every speaker."""
    return [node.local_angle_to(s) for s in scenario.speaker_positions]


def load_posteriors(path: str | Path) -> dict[int, np.ndarray]:
    """Read externally computed sentence posteriors: JSON node_id -> vector."""
    data = json.loads(Path(path).read_text())
    out = {}
    for key, vec in data.items():
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1 or not math.isclose(arr.sum(), 1.0, abs_tol=1e-6):
            raise ValueError(f"node {key}: posterior must be a probability vector")
        out[int(key)] = arr
    return out


def save_posteriors(path: str | Path, posteriors: dict[int, np.ndarray]) -> None:
    payload = {str(k): list(map(float, v)) for k, v in posteriors.items()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
