"""Scenario generation and shoebox image-source rendering with controlled SNR.

The renderer is a frequency-independent Allen-Berkley-style image-source
model with fractional delays (Hann-windowed sinc taps) and 1/(4*pi*r)
spreading. Noise is independent white Gaussian per microphone; snr_db = None
renders noiseless audio.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .geometry import NodePose, Point2D, bearing_of, normalize_deg, wrap180
from .sigproc import MultichannelAudio

SPEED_OF_SOUND = 343.0
ARRAY_HEIGHT_M = 1.25  # nodes and sources share one height; the problem is planar
_SINC_HALF_WIDTH = 40  # taps on each side of the fractional-delay kernel


@dataclass(frozen=True)
class RirSpec:
    max_reflection_order: int = 6
    reflection_coefficient: float = 0.0
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        if self.max_reflection_order < 0:
            raise ValueError("max_reflection_order must be >= 0")
        if not 0.0 <= self.reflection_coefficient < 1.0:
            raise ValueError("reflection_coefficient must be in [0, 1)")


@dataclass(frozen=True)
class Scenario:
    room_size: tuple  # (width, depth, height) meters
    t60: float
    node_poses: tuple
    speaker_positions: tuple
    speaker_count: int
    snr_db: float | None
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "room_size", tuple(float(v) for v in self.room_size))
        object.__setattr__(self, "node_poses", tuple(self.node_poses))
        object.__setattr__(self, "speaker_positions", tuple(self.speaker_positions))
        if self.speaker_count < 1 or self.speaker_count != len(self.speaker_positions):
            raise ValueError("speaker_count must match speaker_positions and be >= 1")
        if len(self.node_poses) < 2:
            raise ValueError("a scenario needs at least 2 nodes")
        w, d, _ = self.room_size
        for p in [n.position for n in self.node_poses] + list(self.speaker_positions):
            if not (0.0 < p.x < w and 0.0 < p.y < d):
                raise ValueError(f"point ({p.x}, {p.y}) outside the {w}x{d} room footprint")


@dataclass(frozen=True)
class ScenarioConfig:
    """Sampling ranges for random scenarios; (lo, hi) pairs are uniform."""

    room_width_m: tuple = (5.0, 5.0)
    room_depth_m: tuple = (7.0, 7.0)
    room_height_m: tuple = (2.5, 2.5)
    t60_s: tuple = (0.4, 0.4)
    snr_db: tuple | None = (30.0, 30.0)
    node_count: int = 20
    speaker_count: int = 1
    mic_count: int = 4
    mic_spacing_m: float = 0.08
    wall_margin_m: float = 0.3
    min_node_speaker_m: float = 0.5
    min_speaker_separation_m: float = 1.0
    face_speakers: bool = False  # orient every node so all speakers are front-side

    def to_dict(self) -> dict:
        return {
            "room_width_m": list(self.room_width_m),
            "room_depth_m": list(self.room_depth_m),
            "room_height_m": list(self.room_height_m),
            "t60_s": list(self.t60_s),
            "snr_db": list(self.snr_db) if self.snr_db is not None else None,
            "node_count": self.node_count,
            "speaker_count": self.speaker_count,
            "mic_count": self.mic_count,
            "mic_spacing_m": self.mic_spacing_m,
            "wall_margin_m": self.wall_margin_m,
            "min_node_speaker_m": self.min_node_speaker_m,
            "min_speaker_separation_m": self.min_speaker_separation_m,
            "face_speakers": self.face_speakers,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        kwargs = dict(data)
        for key in ("room_width_m", "room_depth_m", "room_height_m", "t60_s", "snr_db"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


class PlacementError(ValueError):
    """Constraints cannot be satisfied inside the room."""


def _uniform(rng, bounds):
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _facing_orientation(rng, node_xy: Point2D, speakers, max_tries=64) -> float | None:
    """An orientation putting every speaker strictly on the front side, or None.

    Front side means the local angle wrap180(alpha - beta) falls in (0, 180),
    which requires all speaker bearings to fit inside a half-circle.
    """
    alphas = [bearing_of(node_xy, s) for s in speakers]
    for _ in range(max_tries):
        beta = float(rng.uniform(0.0, 360.0))
        if all(1e-6 < wrap180(a - beta) % 360.0 < 180.0 - 1e-6 for a in alphas):
            return beta
    return None


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Sample a scenario uniformly within the configured ranges; deterministic per seed."""
    rng = np.random.default_rng(seed)
    width = _uniform(rng, config.room_width_m)
    depth = _uniform(rng, config.room_depth_m)
    height = _uniform(rng, config.room_height_m)
    t60 = _uniform(rng, config.t60_s)
    snr = _uniform(rng, config.snr_db) if config.snr_db is not None else None

    margin = config.wall_margin_m
    if 2 * margin >= width or 2 * margin >= depth:
        raise PlacementError(
            f"wall margin {margin} m leaves no interior in a {width}x{depth} m room"
        )
    if height <= ARRAY_HEIGHT_M:
        raise PlacementError(f"room height {height} m is below the array height")

    def sample_point():
        return Point2D(
            float(rng.uniform(margin, width - margin)),
            float(rng.uniform(margin, depth - margin)),
        )

    speakers: list[Point2D] = []
    tries = 0
    while len(speakers) < config.speaker_count:
        if tries > 10_000:
            raise PlacementError("could not place speakers with the given separation")
        tries += 1
        p = sample_point()
        if all(p.distance_to(s) >= config.min_speaker_separation_m for s in speakers):
            speakers.append(p)

    poses: list[NodePose] = []
    tries = 0
    while len(poses) < config.node_count:
        if tries > 10_000:
            raise PlacementError("could not place nodes with the given clearances")
        tries += 1
        p = sample_point()
        if any(p.distance_to(s) < config.min_node_speaker_m for s in speakers):
            continue
        if config.face_speakers:
            beta = _facing_orientation(rng, p, speakers)
            if beta is None:
                continue
        else:
            beta = float(rng.uniform(0.0, 360.0))
        poses.append(NodePose(p, beta, config.mic_count, config.mic_spacing_m))

    return Scenario(
        room_size=(width, depth, height),
        t60=t60,
        node_poses=tuple(poses),
        speaker_positions=tuple(speakers),
        speaker_count=config.speaker_count,
        snr_db=snr,
        seed=int(seed),
    )


def t60_to_reflection(t60: float, room_size) -> float:
    """Uniform wall reflection coefficient from T60 via Eyring's formula."""
    if t60 <= 0:
        raise ValueError(f"t60 must be positive, got {t60}")
    w, d, h = room_size
    volume = w * d * h
    surface = 2.0 * (w * d + w * h + d * h)
    absorption = 1.0 - math.exp(-0.161 * volume / (surface * t60))
    return math.sqrt(max(0.0, 1.0 - absorption))


def rir_for_scenario(scenario: Scenario, max_reflection_order: int = 6) -> RirSpec:
    coeff = (
        t60_to_reflection(scenario.t60, scenario.room_size)
        if max_reflection_order > 0
        else 0.0
    )
    return RirSpec(max_reflection_order, coeff)


def mic_positions_3d(node: NodePose) -> np.ndarray:
    """Microphone coordinates (M, 3) at the shared array height."""
    beta = math.radians(node.orientation_beta)
    axis = np.array([math.cos(beta), math.sin(beta), 0.0])
    center = np.array([node.position.x, node.position.y, ARRAY_HEIGHT_M])
    return np.array([center + off * axis for off in node.mic_offsets()])


def _image_grid_1d(source: float, size: float, order: int):
    """(coordinate, reflection_count) pairs along one axis, count <= order."""
    coords, counts = [], []
    reach = order // 2 + 1
    for q in (0, 1):
        for m in range(-reach, reach + 1):
            count = abs(m - q) + abs(m)
            if count <= order:
                coords.append((1 - 2 * q) * source + 2 * m * size)
                counts.append(count)
    return np.array(coords), np.array(counts)


def image_source_rir(
    room_size,
    source_xyz: np.ndarray,
    mic_xyz: np.ndarray,
    spec: RirSpec,
    sample_rate: int = 16000,
) -> np.ndarray:
    """Impulse responses (mics, taps) from one source to each microphone."""
    order = spec.max_reflection_order
    per_axis = [
        _image_grid_1d(float(source_xyz[k]), float(room_size[k]), order) for k in range(3)
    ]
    cx, cy, cz = np.meshgrid(*(p[0] for p in per_axis), indexing="ij")
    nx, ny, nz = np.meshgrid(*(p[1] for p in per_axis), indexing="ij")
    counts = (nx + ny + nz).ravel()
    keep = counts <= order
    images = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)[keep]
    counts = counts[keep]

    dists = np.linalg.norm(images[:, None, :] - mic_xyz[None, :, :], axis=2)  # (I, M)
    if spec.reflection_coefficient > 0.0:
        gains = spec.reflection_coefficient ** counts
    else:
        gains = (counts == 0).astype(np.float64)  # anechoic keeps only the direct path
    amps = gains[:, None] / (4.0 * np.pi * np.maximum(dists, 1e-6))
    delays = dists / spec.speed_of_sound * sample_rate  # fractional samples

    hw = _SINC_HALF_WIDTH
    n_mics = mic_xyz.shape[0]
    length = int(np.ceil(delays.max())) + hw + 2
    rir = np.zeros((n_mics, length))

    flat_delay = delays.ravel()
    flat_amp = amps.ravel()
    mic_idx = np.broadcast_to(np.arange(n_mics), dists.shape).ravel()
    start = np.ceil(flat_delay - hw).astype(int)
    offsets = np.arange(2 * hw + 1)
    idx = start[:, None] + offsets[None, :]
    t = idx - flat_delay[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * t / hw))
    window[np.abs(t) > hw] = 0.0
    taps = flat_amp[:, None] * np.sinc(t) * window
    valid = (idx >= 0) & (idx < length)
    flat_target = (mic_idx[:, None] * length + idx)[valid]
    np.add.at(rir.ravel(), flat_target, taps[valid])
    return rir


def render_node_audio(
    scenario: Scenario,
    node: NodePose,
    sources,
    rir: RirSpec,
    sample_rate: int = 16000,
    rng: np.random.Generator | int | None = None,
    snr_reference: str = "node",
) -> MultichannelAudio:
    """Reverberant multichannel audio at one node plus white noise at the scenario SNR.

    sources is one sample sequence per speaker, matching scenario speaker
    order. snr_reference "node" scales noise against the received reverberant
    speech power; "source" scales against the clean source power instead.
    """
    if len(sources) == 0:
        raise ValueError("no source signals given")
    if len(sources) != scenario.speaker_count:
        raise ValueError(
            f"{len(sources)} sources for {scenario.speaker_count} speakers"
        )
    if snr_reference not in ("node", "source"):
        raise ValueError(f"unknown snr_reference {snr_reference!r}")
    if rng is None:
        rng = np.random.default_rng(scenario.seed)
    elif isinstance(rng, int):
        rng = np.random.default_rng(rng)

    mics = mic_positions_3d(node)
    rendered = []
    for speaker, source in zip(scenario.speaker_positions, sources):
        src_xyz = np.array([speaker.x, speaker.y, ARRAY_HEIGHT_M])
        h = image_source_rir(scenario.room_size, src_xyz, mics, rir, sample_rate)
        rendered.append(fftconvolve(np.atleast_2d(source), h, axes=1))
    length = max(r.shape[1] for r in rendered)
    clean = np.zeros((mics.shape[0], length))
    for r in rendered:
        clean[:, : r.shape[1]] += r

    if scenario.snr_db is None:
        return MultichannelAudio(clean, sample_rate)
    if snr_reference == "node":
        ref_power = float(np.mean(clean**2))
    else:
        ref_power = float(np.mean([np.mean(np.asarray(s) ** 2) for s in sources]))
    noise_power = ref_power / (10.0 ** (scenario.snr_db / 10.0))
    noise = math.sqrt(noise_power) * rng.standard_normal(clean.shape)
    return MultichannelAudio(clean + noise, sample_rate)


def bandlimited_noise(
    n_samples: int,
    sample_rate: int,
    rng: np.random.Generator,
    band_hz: tuple = (200.0, 6000.0),
) -> np.ndarray:
    """Unit-power Gaussian noise brick-walled to the given band."""
    white = rng.standard_normal(n_samples)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
    spectrum[(freqs < band_hz[0]) | (freqs > band_hz[1])] = 0.0
    out = np.fft.irfft(spectrum, n_samples)
    return out / np.sqrt(np.mean(out**2))


# --- scenario files ----------------------------------------------------------


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "room_size": list(scenario.room_size),
        "t60_s": scenario.t60,
        "snr_db": scenario.snr_db,
        "seed": scenario.seed,
        "speaker_count": scenario.speaker_count,
        "node_poses": [
            {
                "position": [n.position.x, n.position.y],
                "orientation_deg": n.orientation_beta,
                "mic_count": n.mic_count,
                "mic_spacing_m": n.mic_spacing,
            }
            for n in scenario.node_poses
        ],
        "speaker_positions": [[s.x, s.y] for s in scenario.speaker_positions],
    }


def scenario_from_dict(data: dict) -> Scenario:
    poses = tuple(
        NodePose(
            Point2D(*entry["position"]),
            entry["orientation_deg"],
            entry["mic_count"],
            entry["mic_spacing_m"],
        )
        for entry in data["node_poses"]
    )
    speakers = tuple(Point2D(*xy) for xy in data["speaker_positions"])
    return Scenario(
        room_size=tuple(data["room_size"]),
        t60=data["t60_s"],
        node_poses=poses,
        speaker_positions=speakers,
        speaker_count=data["speaker_count"],
        snr_db=data["snr_db"],
        seed=data["seed"],
    )


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2) + "\n")


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))
