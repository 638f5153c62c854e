"""Parametric acoustic simulation of a four-talker, four-mic cross-talk setup.

Each microphone ``i`` records ``sum_j path_ji(s_j)`` where the path from talker
``j`` is a gain, a propagation delay and, in reverberant rooms, a synthetic
impulse response.  Plans are pure data derived from a seed; labels derive from
plans alone, never from rendered audio.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from . import N_CHANNELS, SAMPLE_RATE
from .audio_io import AudioBuffer, read_wav, resample, write_wav

SEGMENT_SECONDS = 20.0
LABEL_MIN_OVERLAP_S = 0.2
RIR_SECONDS = 0.25


class EmptySourcePoolError(ValueError):
    pass


# --------------------------------------------------------------------------- configs


@dataclass
class LayoutConfig:
    talker_positions: np.ndarray
    mic_positions: np.ndarray
    speed_of_sound: float = 343.0

    def __post_init__(self):
        self.talker_positions = np.asarray(self.talker_positions, dtype=float).reshape(N_CHANNELS, 2)
        self.mic_positions = np.asarray(self.mic_positions, dtype=float).reshape(N_CHANNELS, 2)
        d = self.distances()
        if np.any(d <= 0):
            raise ValueError("talkers and mics must not coincide")

    def distances(self) -> np.ndarray:
        """(j, i) -> distance from talker j to mic i."""
        diff = self.mic_positions[None, :, :] - self.talker_positions[:, None, :]
        return np.linalg.norm(diff, axis=-1)

    def to_dict(self):
        return {
            "talker_positions": self.talker_positions.tolist(),
            "mic_positions": self.mic_positions.tolist(),
            "speed_of_sound": self.speed_of_sound,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def arc_layout(
    radius: float = 1.25,
    angles_deg=(0.0, 60.0, 120.0, 180.0),
    mic_distance: float = 1.0,
    rotation_deg: float = 0.0,
) -> LayoutConfig:
    """Talkers on an arc facing outward, each mic ``mic_distance`` further out."""
    a = np.deg2rad(np.asarray(angles_deg, dtype=float) + rotation_deg)
    u = np.stack([np.cos(a), np.sin(a)], axis=1)
    return LayoutConfig(radius * u, (radius + mic_distance) * u)


def default_layout() -> LayoutConfig:
    """Semicircle of diameter 2.5 m, mics 1 m outward from their talkers."""
    return arc_layout()


def square_layout(half_diagonal: float = 1.25, mic_distance: float = 1.0) -> LayoutConfig:
    return arc_layout(half_diagonal, (45.0, 135.0, 225.0, 315.0), mic_distance)


@dataclass
class RoomConfig:
    t60_s: float = 0.35
    drr_db_range: tuple = (8.0, 14.0)
    cross_gain_jitter_db: float = 1.0
    off_axis_deg: float = 60.0
    off_axis_db: float = -10.0
    talker_directivity: bool = True

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["drr_db_range"] = tuple(d["drr_db_range"])
        return cls(**d)


@dataclass
class SimConfig:
    p_active: float = 0.6
    rms_levels_db: tuple = (-35.0, -25.0, -15.0)
    layout: LayoutConfig = field(default_factory=default_layout)
    room: RoomConfig = field(default_factory=RoomConfig)
    noise_floor_db: float = -60.0
    channel_gain_db: tuple = ()
    utterance_s_range: tuple = (14.0, 20.0)
    source_mode: str = "synthetic"
    source_dir: str | None = None
    segment_s: float = SEGMENT_SECONDS
    sample_rate: int = SAMPLE_RATE
    condition_name: str = "set_a"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["layout"] = self.layout.to_dict()
        d["room"] = self.room.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layout"] = LayoutConfig.from_dict(d["layout"])
        d["room"] = RoomConfig.from_dict(d["room"])
        for key in ("rms_levels_db", "channel_gain_db", "utterance_s_range"):
            d[key] = tuple(d[key])
        return cls(**d)


def condition_preset(name: str, **overrides) -> SimConfig:
    """Named acoustic conditions for matched / mismatched evaluation.

    ``set_a`` is the training room.  ``set_b`` moves to a livelier room with a
    slightly wider, rotated arc; ``set_c`` additionally puts the talkers on the
    vertices of a square.  Both mismatched sets apply per-channel mic gain
    offsets of +/-10 dB.
    """
    if name == "set_a":
        cfg = SimConfig()
    elif name == "set_b":
        cfg = SimConfig(
            layout=arc_layout(radius=1.4, mic_distance=1.1, rotation_deg=10.0),
            room=RoomConfig(t60_s=0.6, drr_db_range=(5.0, 11.0)),
            channel_gain_db=(-10.0, 10.0),
        )
    elif name == "set_c":
        cfg = SimConfig(
            layout=square_layout(),
            room=RoomConfig(t60_s=0.6, drr_db_range=(5.0, 11.0)),
            channel_gain_db=(-10.0, 10.0),
        )
    else:
        raise ValueError(f"unknown condition preset {name!r}")
    cfg.condition_name = name
    return dataclasses.replace(cfg, **overrides)


# --------------------------------------------------------------------------- plans


@dataclass
class PathParams:
    gain: float
    delay_s: float
    drr_db: float
    rir_seed: int | None = None

    def __post_init__(self):
        if self.gain < 0 or self.delay_s < 0:
            raise ValueError("gain and delay must be non-negative")


@dataclass
class ChannelPlan:
    active: bool
    source_ref: str | None = None
    utterance_interval: tuple | None = None
    target_rms_db: float | None = None

    def __post_init__(self):
        if not self.active:
            if self.utterance_interval is not None:
                raise ValueError("inactive channels carry no utterance interval")
            return
        start, end = self.utterance_interval
        if not 0.0 <= start < end <= SEGMENT_SECONDS + 1e-9:
            raise ValueError(f"bad utterance interval {self.utterance_interval}")
        self.utterance_interval = (float(start), float(end))


@dataclass
class SegmentPlan:
    segment_id: str
    channels: list
    path_matrix: list
    t60_s: float
    noise_floor_db: float | None
    noise_seed: int
    channel_gain_db: tuple = (0.0, 0.0, 0.0, 0.0)
    sample_rate: int = SAMPLE_RATE
    segment_s: float = SEGMENT_SECONDS

    @property
    def n_samples(self) -> int:
        return int(round(self.segment_s * self.sample_rate))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = [
            ChannelPlan(
                c["active"],
                c["source_ref"],
                tuple(c["utterance_interval"]) if c["utterance_interval"] is not None else None,
                c["target_rms_db"],
            )
            for c in d["channels"]
        ]
        d["path_matrix"] = [[PathParams(**p) for p in row] for row in d["path_matrix"]]
        d["channel_gain_db"] = tuple(d["channel_gain_db"])
        return cls(**d)


@dataclass
class MultiChannelSegment:
    audio: AudioBuffer
    plan: SegmentPlan
    clip_count: int = 0


# --------------------------------------------------------------------------- sources


def _resonator(x, freq, bw, sr):
    r = math.exp(-math.pi * bw / sr)
    theta = 2.0 * math.pi * freq / sr
    a = [1.0, -2.0 * r * math.cos(theta), r * r]
    b = [1.0 - r]
    return signal.lfilter(b, a, x)


def gen_synthetic_utterance(duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Speech-like mono signal, deterministic in ``seed``.

    Alternates 200-400 ms voiced stretches (harmonics of a wandering f0 in
    80-300 Hz through two formant resonators) with unvoiced stretches of
    band-limited noise.  Scaled to -20 dB RMS.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    # f0 contour: smooth random walk around a per-talker base pitch
    base = rng.uniform(100.0, 220.0)
    knots = np.arange(0.0, duration_s + 0.2, 0.1)
    walk = np.cumsum(rng.normal(0.0, 0.06, len(knots)))
    f0 = np.clip(base * np.exp(np.interp(t, knots, walk - walk.mean())), 80.0, 300.0)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate

    nyq_guard = 0.5 * sample_rate - 200.0
    voiced_src = np.zeros(n)
    # sin(k*phase) by the Chebyshev recurrence, far cheaper than 60 sin() calls
    two_cos = 2.0 * np.cos(phase)
    s_prev, s_k = np.zeros(n), np.sin(phase)
    for k in range(1, 60):
        band = k * f0 < nyq_guard
        if not band.any():
            break
        voiced_src += np.where(band, k**-1.2 * s_k, 0.0)
        s_prev, s_k = s_k, two_cos * s_k - s_prev

    out = np.zeros(n)
    pos = 0
    voiced = bool(rng.integers(2))
    while pos < n:
        seg_len = int(rng.uniform(0.2, 0.4) * sample_rate)
        end = min(n, pos + seg_len)
        length = end - pos
        env = np.ones(length)
        ramp = min(80, length // 2)
        if ramp:
            r = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 1) / (ramp + 1))
            env[:ramp] = r
            env[length - ramp :] = r[::-1]
        # amplitude drift inside a stretch keeps the envelope from being flat
        env *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * np.arange(length) / sample_rate)
        if voiced:
            f1, f2 = rng.uniform(300.0, 900.0), rng.uniform(900.0, 2500.0)
            chunk = voiced_src[max(0, pos - 400) : end]
            shaped = _resonator(chunk, f1, 90.0, sample_rate) + 0.5 * _resonator(chunk, f2, 140.0, sample_rate)
            piece = shaped[-length:]
            piece = piece / (np.sqrt(np.mean(piece**2)) + 1e-12)
        else:
            centre = rng.uniform(1500.0, 3500.0)
            sos = signal.butter(4, [centre * 0.7, centre * 1.3], btype="band", fs=sample_rate, output="sos")
            piece = signal.sosfilt(sos, rng.normal(size=length + 256))[256:]
            piece = 0.3 * piece / (np.sqrt(np.mean(piece**2)) + 1e-12)
        out[pos:end] = piece * env
        pos = end
        voiced = not voiced

    out *= 10 ** (-20 / 20) / (np.sqrt(np.mean(out**2)) + 1e-12)
    return AudioBuffer(out, sample_rate)


def _rms_db(x) -> float:
    return 20.0 * math.log10(max(float(np.sqrt(np.mean(np.square(x)))), 1e-12))


def list_source_pool(source_dir) -> list:
    """Assign WAV files to talker positions.

    Files inside a per-speaker subdirectory are pooled by speaker, speaker
    directories being dealt round-robin to positions so no speaker appears at
    two positions.  Loose files are dealt round-robin individually.
    """
    root = Path(source_dir)
    files = sorted(p for p in root.rglob("*.wav") if p.is_file())
    groups: dict[str, list] = {}
    for p in files:
        rel = p.relative_to(root)
        key = rel.parts[0] if len(rel.parts) > 1 else str(rel)
        groups.setdefault(key, []).append(str(rel))
    pools = [[] for _ in range(N_CHANNELS)]
    for k, key in enumerate(sorted(groups)):
        pools[k % N_CHANNELS].extend(groups[key])
    return pools


def load_source(ref: str, config: SimConfig) -> AudioBuffer:
    """Materialise a ``source_ref`` as mono audio at the simulation rate."""
    kind, _, rest = ref.partition(":")
    if kind == "synth":
        seed_s, dur_s = rest.split("@")
        return gen_synthetic_utterance(float(dur_s), int(seed_s), config.sample_rate)
    if kind == "file":
        buf = read_wav(Path(config.source_dir) / rest)
        mono = np.asarray(buf.samples, dtype=np.float64).mean(axis=0)
        buf = AudioBuffer(mono, buf.sample_rate)
        if buf.sample_rate != config.sample_rate:
            buf = resample(buf, config.sample_rate)
        return buf
    raise ValueError(f"unrecognised source_ref {ref!r}")


# --------------------------------------------------------------------------- paths


def _off_axis_deg(axis: np.ndarray, direction: np.ndarray) -> float:
    c = float(axis @ direction) / (np.linalg.norm(axis) * np.linalg.norm(direction))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def derive_paths(layout: LayoutConfig, room: RoomConfig, seed) -> list:
    """4x4 matrix ``paths[j][i]`` describing talker j -> mic i.

    Gains are relative to each mic's own direct path: the inverse-distance
    ratio times a two-zone directivity (mic aimed at its talker, talker facing
    away from the array centre) times a small random jitter on cross paths.
    Directivity only attenuates the direct sound, so cross paths also get a
    correspondingly lower direct-to-reverberant ratio.
    """
    rng = np.random.default_rng(seed)
    dist = layout.distances()
    centre = layout.talker_positions.mean(axis=0)
    drr_ref = rng.uniform(*room.drr_db_range)
    paths = []
    for j in range(N_CHANNELS):
        row = []
        for i in range(N_CHANNELS):
            direct_db = -20.0 * math.log10(dist[j, i] / dist[i, i])
            mic_axis = layout.talker_positions[i] - layout.mic_positions[i]
            arrival = layout.talker_positions[j] - layout.mic_positions[i]
            if _off_axis_deg(mic_axis, arrival) > room.off_axis_deg:
                direct_db += room.off_axis_db
            if room.talker_directivity:
                facing = layout.talker_positions[j] - centre
                towards = layout.mic_positions[i] - layout.talker_positions[j]
                if np.linalg.norm(facing) > 1e-9 and _off_axis_deg(facing, towards) > room.off_axis_deg:
                    direct_db += room.off_axis_db
            jitter = 0.0
            if j != i and room.cross_gain_jitter_db > 0:
                jitter = rng.uniform(-room.cross_gain_jitter_db, room.cross_gain_jitter_db)
            gain = 10 ** ((direct_db + jitter) / 20)
            if j != i:
                gain = min(gain, 0.99)
            delay = dist[j, i] / layout.speed_of_sound
            # the reverberant field is diffuse, so its level does not follow the
            # direct path: DRR drops by exactly the direct-path attenuation
            drr = drr_ref + 20.0 * math.log10(gain)
            rir_seed = int(rng.integers(2**31)) if room.t60_s > 0 else None
            row.append(PathParams(gain=gain, delay_s=delay, drr_db=drr, rir_seed=rir_seed))
        paths.append(row)
    return paths


def make_rir(path: PathParams, t60_s: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray | None:
    """Unit direct tap at the path delay followed by an exponentially decaying
    noise tail (0.25 s) whose energy sits ``drr_db`` below the direct tap."""
    if t60_s <= 0 or path.rir_seed is None:
        return None
    rng = np.random.default_rng(path.rir_seed)
    d = int(round(path.delay_s * sample_rate))
    n_tail = int(round(RIR_SECONDS * sample_rate))
    t = np.arange(1, n_tail + 1) / sample_rate
    tail = rng.normal(size=n_tail) * np.exp(-6.91 * t / t60_s)
    tail *= math.sqrt(10 ** (-path.drr_db / 10) / np.sum(tail**2))
    tail = np.clip(tail, -0.95, 0.95)
    rir = np.zeros(d + 1 + n_tail)
    rir[d] = 1.0
    rir[d + 1 :] = tail
    return rir


def apply_path(x: np.ndarray, path: PathParams, t60_s: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Delay, scale and (optionally) reverberate; output keeps the input length."""
    n = len(x)
    rir = make_rir(path, t60_s, sample_rate)
    if rir is None:
        d = int(round(path.delay_s * sample_rate))
        y = np.zeros(n)
        if d < n:
            y[d:] = x[: n - d]
        return path.gain * y
    return path.gain * signal.oaconvolve(x, rir)[:n]


# --------------------------------------------------------------------------- plan / render


def build_segment_plan(config: SimConfig, seed, segment_id: str = "", source_pool=None) -> SegmentPlan:
    rng = np.random.default_rng(seed)
    active = rng.random(N_CHANNELS) < config.p_active
    if config.source_mode == "corpus" and active.any():
        pools = source_pool if source_pool is not None else list_source_pool(config.source_dir)
        if any(active[i] and not pools[i] for i in range(N_CHANNELS)):
            raise EmptySourcePoolError("no source utterances available for an active talker position")
    channels = []
    seg = config.segment_s
    for i in range(N_CHANNELS):
        if not active[i]:
            channels.append(ChannelPlan(False))
            continue
        if config.source_mode == "synthetic":
            dur = float(rng.uniform(*config.utterance_s_range))
            dur = min(seg, round(dur * config.sample_rate) / config.sample_rate)
            ref = f"synth:{int(rng.integers(2**31))}@{dur!r}"
        elif config.source_mode == "corpus":
            rel = pools[i][int(rng.integers(len(pools[i])))]
            ref = f"file:{rel}"
            dur = min(seg, load_source(ref, config).duration)
        else:
            raise ValueError(f"unknown source mode {config.source_mode!r}")
        start = float(rng.uniform(0.0, seg - dur))
        start = round(start * config.sample_rate) / config.sample_rate
        level = float(rng.choice(config.rms_levels_db))
        channels.append(ChannelPlan(True, ref, (start, min(seg, start + dur)), level))

    paths = derive_paths(config.layout, config.room, int(rng.integers(2**31)))
    noise_seed = int(rng.integers(2**31))
    if config.channel_gain_db:
        gains = tuple(float(g) for g in rng.choice(config.channel_gain_db, N_CHANNELS))
    else:
        gains = (0.0,) * N_CHANNELS
    return SegmentPlan(
        segment_id=segment_id,
        channels=channels,
        path_matrix=paths,
        t60_s=config.room.t60_s,
        noise_floor_db=config.noise_floor_db,
        noise_seed=noise_seed,
        channel_gain_db=gains,
        sample_rate=config.sample_rate,
        segment_s=seg,
    )


def prepare_sources(plan: SegmentPlan, config: SimConfig) -> list:
    """Per-channel utterances cropped to their interval and scaled to target RMS."""
    sources = []
    for ch in plan.channels:
        if not ch.active:
            sources.append(None)
            continue
        buf = load_source(ch.source_ref, config)
        start, end = ch.utterance_interval
        n = int(round((end - start) * plan.sample_rate))
        x = np.asarray(buf.samples[0, :n], dtype=np.float64)
        x = x * 10 ** ((ch.target_rms_db - _rms_db(x)) / 20)
        sources.append(AudioBuffer(x, plan.sample_rate))
    return sources


def render_components(plan: SegmentPlan, sources) -> dict:
    """Separately rendered own-talk, cross-talk and noise, each (4, n).

    Per-channel mic gains are already applied to every component.
    """
    n = plan.n_samples
    placed = np.zeros((N_CHANNELS, n))
    for j, ch in enumerate(plan.channels):
        if not ch.active:
            continue
        if sources[j] is None:
            raise ValueError(f"missing source for active channel {j}")
        start = int(round(ch.utterance_interval[0] * plan.sample_rate))
        m = int(round((ch.utterance_interval[1] - ch.utterance_interval[0]) * plan.sample_rate))
        src = np.asarray(sources[j].samples[0], dtype=np.float64)
        if len(src) < m:
            raise ValueError(f"source for channel {j} shorter than its planned interval")
        m = min(m, n - start)
        placed[j, start : start + m] = src[:m]

    own = np.zeros((N_CHANNELS, n))
    cross = np.zeros((N_CHANNELS, n))
    for j in range(N_CHANNELS):
        if not placed[j].any():
            continue
        for i in range(N_CHANNELS):
            y = apply_path(placed[j], plan.path_matrix[j][i], plan.t60_s, plan.sample_rate)
            if i == j:
                own[i] += y
            else:
                cross[i] += y

    noise = np.zeros((N_CHANNELS, n))
    if plan.noise_floor_db is not None:
        rng = np.random.default_rng(plan.noise_seed)
        noise = rng.normal(size=(N_CHANNELS, n)) * 10 ** (plan.noise_floor_db / 20)
    g = 10 ** (np.asarray(plan.channel_gain_db, dtype=float) / 20)[:, None]
    return {"own": own * g, "cross": cross * g, "noise": noise * g}


def render_segment(plan: SegmentPlan, sources) -> MultiChannelSegment:
    comp = render_components(plan, sources)
    x = comp["own"] + comp["cross"] + comp["noise"]
    clipped = int(np.count_nonzero(np.abs(x) > 1.0))
    x = np.clip(x, -1.0, 1.0)
    return MultiChannelSegment(AudioBuffer(x, plan.sample_rate), plan, clipped)


def derive_labels(plan: SegmentPlan) -> np.ndarray:
    """(4, W) grid; cell (i, w) is 1 iff channel i's utterance covers at least
    200 ms of second w."""
    n_win = int(math.floor(plan.segment_s + 1e-9))
    grid = np.zeros((N_CHANNELS, n_win), dtype=np.int8)
    w0 = np.arange(n_win, dtype=float)
    for i, ch in enumerate(plan.channels):
        if not ch.active:
            continue
        start, end = ch.utterance_interval
        overlap = np.minimum(end, w0 + 1.0) - np.maximum(start, w0)
        grid[i] = overlap >= LABEL_MIN_OVERLAP_S - 1e-9
    return grid


# --------------------------------------------------------------------------- corpus


@dataclass
class CorpusManifest:
    root: Path
    entries: list

    def __len__(self):
        return len(self.entries)

    def path(self, entry, key) -> Path:
        return self.root / entry[key]

    def total_seconds(self) -> float:
        return sum(read_plan(self.path(e, "plan_path")).segment_s for e in self.entries)

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(json.dumps(e, sort_keys=True).encode())
        return h.hexdigest()[:16]

    def subset(self, indices) -> "CorpusManifest":
        return CorpusManifest(self.root, [self.entries[k] for k in indices])


MANIFEST_NAME = "manifest.jsonl"


def write_plan(path, plan: SegmentPlan):
    with open(path, "w") as f:
        json.dump(plan.to_dict(), f, indent=1, sort_keys=True)


def read_plan(path) -> SegmentPlan:
    with open(path) as f:
        return SegmentPlan.from_dict(json.load(f))


def write_labels(path, grid: np.ndarray):
    with open(path, "w") as f:
        json.dump({"window_s": 1.0, "labels": np.asarray(grid).astype(int).tolist()}, f)


def read_labels(path) -> np.ndarray:
    with open(path) as f:
        return np.asarray(json.load(f)["labels"], dtype=np.int8)


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path) as f:
        entries = [json.loads(line) for line in f if line.strip()]
    return CorpusManifest(path.parent, entries)


def load_sim_config(corpus_dir) -> SimConfig:
    with open(Path(corpus_dir) / "sim_config.json") as f:
        return SimConfig.from_dict(json.load(f))


def segment_seeds(seed: int, n_segments: int) -> list:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n_segments)]


def generate_corpus(config: SimConfig, n_segments: int, out_dir, seed: int) -> CorpusManifest:
    """Render ``n_segments`` labelled 4-channel segments into ``out_dir``.

    Layout::

        out_dir/manifest.jsonl
        out_dir/sim_config.json
        out_dir/segments/<id>.wav          4-channel float32
        out_dir/segments/<id>.plan.json
        out_dir/segments/<id>.labels.json
    """
    out = Path(out_dir)
    (out / "segments").mkdir(parents=True, exist_ok=True)
    with open(out / "sim_config.json", "w") as f:
        json.dump(config.to_dict(), f, indent=1, sort_keys=True)
    pool = list_source_pool(config.source_dir) if config.source_mode == "corpus" else None

    entries = []
    for k, s in enumerate(segment_seeds(seed, n_segments)):
        sid = f"{config.condition_name}_{k:05d}"
        plan = build_segment_plan(config, s, sid, pool)
        seg = render_segment(plan, prepare_sources(plan, config))
        rel = {
            "wav_path": f"segments/{sid}.wav",
            "plan_path": f"segments/{sid}.plan.json",
            "labels_path": f"segments/{sid}.labels.json",
        }
        write_wav(out / rel["wav_path"], seg.audio, "float32")
        write_plan(out / rel["plan_path"], plan)
        write_labels(out / rel["labels_path"], derive_labels(plan))
        entries.append(
            {"segment_id": sid, **rel, "condition_name": config.condition_name, "seed": s,
             "clip_count": seg.clip_count}
        )

    with open(out / MANIFEST_NAME, "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    return CorpusManifest(out, entries)


def talker_count_histogram(manifest: CorpusManifest) -> np.ndarray:
    """Counts of 1 s windows by number of active talkers (0..4), from plans only."""
    hist = np.zeros(N_CHANNELS + 1, dtype=int)
    for e in manifest.entries:
        grid = derive_labels(read_plan(manifest.path(e, "plan_path")))
        hist += np.bincount(grid.sum(axis=0), minlength=N_CHANNELS + 1)
    return hist

