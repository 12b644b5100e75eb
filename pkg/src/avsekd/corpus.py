"""Synthetic audio-lip-tongue corpus, noise mixing and mini-batch assembly."""
from __future__ import annotations

import csv
import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import signal
from scipy.interpolate import PchipInterpolator

from . import media
from .seeding import derive_rng, derive_seed
from .spectral import ComplexMask, ComplexSpectrogram, SpectralConfig, ideal_complex_mask, stft

log = logging.getLogger(__name__)

VIDEO_FPS = 81.5
FRAME_HEIGHT = 64
FRAME_WIDTH = 128
NOISE_CLASSES = ("white", "pink", "babble_like", "hum", "speech_shaped")
TRAIN_SNRS = (0.0, -5.0, -10.0)
EVAL_SNRS = (2.5, -2.5, -7.5)
SPLITS = ("train", "valid", "test")
MIN_BATCH_FRAMES = 8


# ---------------------------------------------------------------------------
# noise


def mix_at_snr(clean, noise, snr_db: float, seed: int) -> np.ndarray:
    """Add ``noise`` to ``clean`` so the utterance-level SNR is exactly ``snr_db``.

    The noise is read cyclically from a seeded random offset until it covers
    the clean signal, then scaled by ``sqrt(P_clean / (P_noise * 10**(snr/10)))``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.size == 0 or noise.size == 0:
        raise ValueError("clean and noise must be nonempty")
    offset = int(derive_rng(seed, "noise_offset").integers(0, len(noise)))
    segment = noise[(offset + np.arange(len(clean))) % len(noise)]
    p_clean = np.mean(clean**2)
    p_noise = np.mean(segment**2)
    if p_clean == 0 or p_noise == 0:
        raise ValueError("SNR is undefined for zero-power clean speech or noise")
    gain = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * segment


def _unit(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    return x / x.std()


def _shape_spectrum(white: np.ndarray, gain_fn, sample_rate: int) -> np.ndarray:
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(len(white), 1.0 / sample_rate)
    return np.fft.irfft(spec * gain_fn(freqs), n=len(white))


def _pink_gain(freqs):
    gain = np.zeros_like(freqs)
    gain[1:] = 1.0 / np.sqrt(freqs[1:])
    return gain


def _speech_shaped_gain(freqs):
    # flat to 500 Hz, then -6 dB/octave
    return np.where(freqs <= 500.0, 1.0, 500.0 / np.maximum(freqs, 500.0))


def _babble(length: int, rng: np.random.Generator, sample_rate: int, talkers: int = 6):
    t = np.arange(length) / sample_rate
    nyq = sample_rate / 2
    out = np.zeros(length)
    lp = signal.butter(2, 4.0, fs=sample_rate, output="sos")
    for _ in range(talkers):
        f0 = rng.uniform(100, 250)
        vibrato = 1 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t + rng.uniform(0, 2 * np.pi))
        phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sample_rate
        n_harm = int(4000 // (f0 * 1.03))
        tone = np.zeros(length)
        for k in range(1, n_harm + 1):
            tone += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
        # syllabic-rate amplitude modulation
        env = signal.sosfiltfilt(lp, rng.standard_normal(length))
        env = np.maximum(env / (np.abs(env).max() + 1e-12) + 0.3, 0.0)
        lo = rng.uniform(200, 1200)
        bp = signal.butter(2, [lo, min(lo * rng.uniform(2, 4), 0.9 * nyq)], btype="band", fs=sample_rate, output="sos")
        out += signal.sosfilt(bp, tone * env)
    return out


def _hum(length: int, rng: np.random.Generator, sample_rate: int):
    t = np.arange(length) / sample_rate
    mains = rng.choice([50.0, 60.0])
    out = 0.05 * rng.standard_normal(length)
    for h in range(1, 9):
        out += rng.uniform(0.2, 1.0) / h * np.sin(2 * np.pi * mains * h * t + rng.uniform(0, 2 * np.pi))
    return out


def synth_noise(noise_class: str, length: int, seed: int, sample_rate: int = 16000) -> np.ndarray:
    """Deterministic unit-variance stand-ins for the recorded noise types.

    Results are memoised (training re-mixes every utterance each epoch), so
    the returned array is read-only.
    """
    return _synth_noise_cached(noise_class, int(length), int(seed), int(sample_rate))


@functools.lru_cache(maxsize=128)
def _synth_noise_cached(noise_class: str, length: int, seed: int, sample_rate: int) -> np.ndarray:
    out = _synth_noise(noise_class, length, seed, sample_rate)
    out.setflags(write=False)
    return out


def _synth_noise(noise_class: str, length: int, seed: int, sample_rate: int) -> np.ndarray:
    if noise_class not in NOISE_CLASSES:
        raise ValueError(f"unknown noise class {noise_class!r}; expected one of {NOISE_CLASSES}")
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    rng = derive_rng(seed, "noise", noise_class)
    if noise_class == "white":
        return rng.standard_normal(length)
    if noise_class == "pink":
        return _unit(_shape_spectrum(rng.standard_normal(length), _pink_gain, sample_rate))
    if noise_class == "speech_shaped":
        return _unit(_shape_spectrum(rng.standard_normal(length), _speech_shaped_gain, sample_rate))
    if noise_class == "hum":
        return _unit(_hum(length, rng, sample_rate))
    return _unit(_babble(length, rng, sample_rate))


# ---------------------------------------------------------------------------
# synthetic utterances


@dataclass
class SyntheticUtterance:
    audio: np.ndarray
    lip_frames: np.ndarray
    tongue_frames: np.ndarray
    fps: float
    sample_rate: int
    # control trajectories sampled at the video frame times
    aperture: np.ndarray
    first_formant: np.ndarray


def _smooth_curve(rng, duration: float, step: float, low: float, high: float):
    knots = np.arange(0.0, duration + 2 * step, step)
    return PchipInterpolator(knots, rng.uniform(low, high, len(knots)))


def _envelope(rng, duration: float):
    step = 1.0 / rng.uniform(3.5, 5.5)  # syllable rate
    knots = np.arange(0.0, duration + 2 * step, step / 2)
    values = rng.uniform(0.1, 1.0, len(knots))
    values[1::2] *= rng.uniform(0.0, 0.3, len(values[1::2]))  # troughs between syllables
    values[rng.uniform(size=len(knots)) < 0.12] = 0.0  # short pauses
    values[0] = 0.0
    curve = PchipInterpolator(knots, values)

    def env(t):
        taper = np.clip(np.minimum(t, duration - t) / 0.05, 0.0, 1.0)
        return np.clip(curve(t), 0.0, None) * taper

    return env


def _lorentz(freq, centre, bandwidth):
    return 1.0 / np.sqrt(1.0 + ((freq - centre) / (bandwidth / 2)) ** 2)


def _render_lips(aperture: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:FRAME_HEIGHT, 0:FRAME_WIDTH].astype(np.float64)
    cy, cx, half_width = FRAME_HEIGHT / 2, FRAME_WIDTH / 2, 36.0
    skin = 0.72 - 0.1 * (yy / FRAME_HEIGHT)
    frames = np.empty((len(aperture), FRAME_HEIGHT, FRAME_WIDTH))
    for i, a in enumerate(aperture):
        half_height = 1.5 + 22.0 * a
        r = np.sqrt(((xx - cx) / half_width) ** 2 + ((yy - cy) / half_height) ** 2)
        inside = 1.0 / (1.0 + np.exp(-(1.0 - r) * 12.0))
        lip_ring = 0.15 * np.exp(-(((r - 1.15) / 0.12) ** 2))
        frames[i] = skin - lip_ring - (skin - 0.08) * inside
    frames += 0.01 * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0)


def _render_tongue(f1: np.ndarray, rng: np.random.Generator, f1_range) -> np.ndarray:
    yy, xx = np.mgrid[0:FRAME_HEIGHT, 0:FRAME_WIDTH].astype(np.float64)
    speckle = 0.08 + 0.04 * rng.uniform(size=(FRAME_HEIGHT, FRAME_WIDTH))
    fade = np.exp(-(((xx - FRAME_WIDTH / 2) / 52.0) ** 4))
    frames = np.empty((len(f1), FRAME_HEIGHT, FRAME_WIDTH))
    lo, hi = f1_range
    for i, f in enumerate(f1):
        # high F1 = open vowel = low tongue; image rows grow downwards
        y0 = 12.0 + 30.0 * (f - lo) / (hi - lo)
        surface = y0 + 18.0 * ((xx - FRAME_WIDTH / 2) / (FRAME_WIDTH / 2)) ** 2
        frames[i] = speckle + 0.85 * fade * np.exp(-0.5 * ((yy - surface) / 1.5) ** 2)
    frames += 0.02 * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0)


def synth_utterance(
    seed: int,
    duration_s: float,
    sample_rate: int = 16000,
    fps: float = VIDEO_FPS,
) -> SyntheticUtterance:
    """A voiced pseudo-utterance with matching lip and tongue videos.

    The audio is a harmonic source (pitch 90-220 Hz) shaped by two moving
    formants and a syllabic amplitude envelope. Lip aperture follows the
    envelope; the tongue arc height follows the first formant.
    """
    if not 0.5 <= duration_s <= 10:
        raise ValueError(f"duration must be within [0.5, 10] s, got {duration_s}")
    rng = derive_rng(seed, "utterance")
    n = int(round(duration_s * sample_rate))
    duration = n / sample_rate
    t = np.arange(n) / sample_rate

    f1_range = (300.0, 850.0)
    pitch = np.clip(_smooth_curve(rng, duration, 0.25, 100.0, 210.0)(t), 90.0, 220.0)
    f1_curve = _smooth_curve(rng, duration, 0.15, *f1_range)
    f2_curve = _smooth_curve(rng, duration, 0.2, 900.0, 2400.0)
    env_fn = _envelope(rng, duration)

    f1 = np.clip(f1_curve(t), *f1_range)
    f2 = f2_curve(t)
    n_harm = int(0.45 * sample_rate // 90)
    phase = 2 * np.pi * np.cumsum(pitch) / sample_rate
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    source = np.zeros(n)
    power = np.zeros(n)
    amps = []
    for k in range(1, n_harm + 1):
        fk = k * pitch
        a = (_lorentz(fk, f1, 90.0) + 0.7 * _lorentz(fk, f2, 130.0) + 0.02) / np.sqrt(k)
        a = np.where(fk < 0.45 * sample_rate, a, 0.0)
        amps.append(a)
        power += a**2 / 2
    norm = 1.0 / np.sqrt(power)
    for k, a in enumerate(amps, start=1):
        source += a * norm * np.sin(k * phase + offsets[k - 1])
    env = env_fn(t)
    audio = 0.25 * env * source
    peak_abs = np.abs(audio).max()
    if peak_abs > 0.9:  # keep PCM16 storage unclipped
        audio *= 0.9 / peak_abs

    n_video = int(np.floor(duration * fps))
    t_video = (np.arange(n_video) + 0.5) / fps
    peak = env.max()
    aperture = env_fn(t_video) / peak if peak > 0 else np.zeros(n_video)
    f1_video = np.clip(f1_curve(t_video), *f1_range)
    lips = _render_lips(aperture, derive_rng(seed, "lip_texture"))
    tongue = _render_tongue(f1_video, derive_rng(seed, "tongue_texture"), f1_range)
    return SyntheticUtterance(audio, lips, tongue, fps, sample_rate, aperture, f1_video)


# ---------------------------------------------------------------------------
# articulation preprocessing


@dataclass
class ArticulationSequence:
    """Frames plus per-utterance pixel mean/std, exposed as ``3 x T x H x W``.

    The mean and std channels are stored once and broadcast on access; a
    crop keeps the statistics of the full utterance.
    """

    frames: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    fps: float = VIDEO_FPS
    modality: str = "lip"

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def pixels(self) -> np.ndarray:
        shape = self.frames.shape
        return np.stack(
            [self.frames, np.broadcast_to(self.mean, shape), np.broadcast_to(self.std, shape)]
        )

    def pixel_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """``pixels`` as a tensor, converted before broadcasting."""
        frames = torch.from_numpy(self.frames).to(dtype)
        mean = torch.from_numpy(self.mean).to(dtype).expand_as(frames)
        std = torch.from_numpy(self.std).to(dtype).expand_as(frames)
        return torch.stack([frames, mean, std])

    def crop(self, start: int, stop: int) -> "ArticulationSequence":
        return ArticulationSequence(self.frames[start:stop], self.mean, self.std, self.fps, self.modality)


def resize_frames(frames: np.ndarray, height: int = FRAME_HEIGHT, width: int = FRAME_WIDTH) -> np.ndarray:
    if frames.shape[1:] == (height, width):
        return frames
    x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float64))[:, None]
    x = F.interpolate(x, size=(height, width), mode="bilinear", align_corners=False)
    return x[:, 0].numpy()


def articulation_preprocess(
    frames, modality: str = "lip", fps: float = VIDEO_FPS, size=(FRAME_HEIGHT, FRAME_WIDTH)
) -> ArticulationSequence:
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        frames = frames / 255.0
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError(f"expected a nonempty T x H x W sequence, got shape {frames.shape}")
    frames = resize_frames(np.asarray(frames, dtype=np.float64), *size)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)  # population std: defined for T = 1
    return ArticulationSequence(frames, mean, std, fps, modality)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    clean_path: str
    lip_path: str
    tongue_path: str
    split: str


@dataclass(frozen=True)
class NoiseAssignment:
    utt_id: str
    noise_class: str
    snr_db: float
    seed: int


@dataclass
class CorpusManifest:
    records: list[UtteranceRecord]
    noise_plan: list[NoiseAssignment]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.utt_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utt_id in manifest")
        known = set(ids)
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"{r.utt_id}: unknown split {r.split!r}")
        for a in self.noise_plan:
            if a.utt_id not in known:
                raise ValueError(f"noise plan refers to unknown utt_id {a.utt_id!r}")
            if a.noise_class not in NOISE_CLASSES:
                raise ValueError(f"{a.utt_id}: unknown noise class {a.noise_class!r}")
        self._plan = {a.utt_id: a for a in self.noise_plan}

    def split(self, name: str) -> list[UtteranceRecord]:
        return [r for r in self.records if r.split == name]

    def noise_for(self, utt_id: str) -> NoiseAssignment:
        return self._plan[utt_id]

    def write(self, directory) -> None:
        directory = Path(directory)
        with open(directory / "manifest.tsv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            for r in self.records:
                w.writerow([r.utt_id, r.clean_path, r.lip_path, r.tongue_path, r.split])
        with open(directory / "noise_plan.tsv", "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, delimiter="\t", lineterminator="\n")
            for a in self.noise_plan:
                w.writerow([a.utt_id, a.noise_class, repr(float(a.snr_db)), a.seed])

    @classmethod
    def read(cls, directory) -> "CorpusManifest":
        directory = Path(directory)
        records, plan = [], []
        with open(directory / "manifest.tsv", encoding="utf-8") as f:
            for row in csv.reader(f, delimiter="\t"):
                if row:
                    records.append(UtteranceRecord(*row))
        plan_path = directory / "noise_plan.tsv"
        if plan_path.exists():
            with open(plan_path, encoding="utf-8") as f:
                for row in csv.reader(f, delimiter="\t"):
                    if row:
                        plan.append(NoiseAssignment(row[0], row[1], float(row[2]), int(row[3])))
        return cls(records, plan, directory)


def generate_corpus(
    out_dir,
    n_train: int = 50,
    n_valid: int = 10,
    n_test: int = 10,
    seed: int = 0,
    min_duration: float = 1.0,
    max_duration: float = 3.0,
    sample_rate: int = 16000,
) -> CorpusManifest:
    """Write a synthetic corpus (WAV + UVF files, manifest and noise plan)."""
    out_dir = Path(out_dir)
    for sub in ("wav", "lip", "tongue"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records, plan = [], []
    index = 0
    for split, count in zip(SPLITS, (n_train, n_valid, n_test)):
        snrs = TRAIN_SNRS if split == "train" else EVAL_SNRS
        for _ in range(count):
            utt_id = f"{split}_{index:04d}"
            utt_seed = derive_seed(seed, "utt", index)
            rng = derive_rng(seed, "utt", index, "plan")
            duration = round(float(rng.uniform(min_duration, max_duration)), 2)
            utt = synth_utterance(utt_seed, duration, sample_rate)
            media.write_wav(out_dir / "wav" / f"{utt_id}.wav", utt.audio, sample_rate)
            media.write_uvf(out_dir / "lip" / f"{utt_id}.uvf", utt.lip_frames, utt.fps)
            media.write_uvf(out_dir / "tongue" / f"{utt_id}.uvf", utt.tongue_frames, utt.fps)
            records.append(
                UtteranceRecord(utt_id, f"wav/{utt_id}.wav", f"lip/{utt_id}.uvf", f"tongue/{utt_id}.uvf", split)
            )
            plan.append(
                NoiseAssignment(
                    utt_id,
                    NOISE_CLASSES[int(rng.integers(len(NOISE_CLASSES)))],
                    float(snrs[int(rng.integers(len(snrs)))]),
                    derive_seed(seed, "utt", index, "noise"),
                )
            )
            index += 1
    manifest = CorpusManifest(records, plan, out_dir)
    manifest.write(out_dir)
    return manifest


# ---------------------------------------------------------------------------
# loading and batching


@dataclass
class Utterance:
    utt_id: str
    clean: np.ndarray
    noisy: np.ndarray
    lip: ArticulationSequence
    tongue: ArticulationSequence | None = None


def noisy_version(clean: np.ndarray, assignment: NoiseAssignment, snr_db: float | None = None,
                  sample_rate: int = 16000) -> np.ndarray:
    snr = assignment.snr_db if snr_db is None else snr_db
    noise = synth_noise(assignment.noise_class, len(clean) + sample_rate, assignment.seed, sample_rate)
    return mix_at_snr(clean, noise, snr, assignment.seed)


def load_utterance(
    manifest: CorpusManifest,
    record: UtteranceRecord,
    snr_db: float | None = None,
    with_tongue: bool = True,
) -> Utterance:
    clean, sr = media.read_wav(manifest.root / record.clean_path)
    noisy = noisy_version(clean, manifest.noise_for(record.utt_id), snr_db, sr)
    lip_frames, fps = media.read_uvf(manifest.root / record.lip_path)
    lip = articulation_preprocess(lip_frames, "lip", fps)
    tongue = None
    if with_tongue:
        tongue_frames, fps_t = media.read_uvf(manifest.root / record.tongue_path)
        tongue = articulation_preprocess(tongue_frames, "tongue", fps_t)
    return Utterance(record.utt_id, clean, noisy, lip, tongue)


@dataclass
class TrainingBatch:
    utt_ids: list[str]
    noisy_specs: list[ComplexSpectrogram]
    clean_specs: list[ComplexSpectrogram]
    ideal_masks: list[ComplexMask]
    lips: list[ArticulationSequence]
    tongues: list[ArticulationSequence] | None
    crop_offsets: list[int]

    @property
    def n_frames(self) -> int:
        return self.noisy_specs[0].n_frames

    def __len__(self):
        return len(self.utt_ids)

    def tensors(self, dtype=torch.float32) -> dict[str, torch.Tensor]:
        """Stacked ``B x 2 x F x T`` spectra/masks and ``B x 3 x T x H x W`` videos."""
        def stack(arrays):
            return torch.from_numpy(np.stack(arrays)).to(dtype)

        out = {
            "noisy": stack([s.stacked() for s in self.noisy_specs]),
            "clean": stack([s.stacked() for s in self.clean_specs]),
            "mask": stack([m.stacked() for m in self.ideal_masks]),
            "lips": torch.stack([a.pixel_tensor(dtype) for a in self.lips]),
        }
        if self.tongues is not None:
            out["tongues"] = torch.stack([a.pixel_tensor(dtype) for a in self.tongues])
        return out


def effective_length(utt: Utterance, config: SpectralConfig) -> int:
    lengths = [config.n_frames(len(utt.noisy)), utt.lip.n_frames]
    if utt.tongue is not None:
        lengths.append(utt.tongue.n_frames)
    return min(lengths)


def assemble_batch(
    utts: Sequence[Utterance],
    seed: int,
    config: SpectralConfig | None = None,
    mask_bound: float = 1.0,
    mask_epsilon: float = 1e-8,
) -> TrainingBatch:
    """Crop every utterance to the shortest one at a seeded random offset.

    Audio frame ``t`` and video frame ``t`` of an item always index the same
    crop window; ideal masks are computed on the cropped spectrograms.
    """
    config = config or SpectralConfig()
    if not utts:
        raise ValueError("empty batch")
    lengths = [effective_length(u, config) for u in utts]
    for u, n in zip(utts, lengths):
        if n < MIN_BATCH_FRAMES:
            raise ValueError(f"{u.utt_id}: only {n} aligned frames (< {MIN_BATCH_FRAMES})")
    n_batch = min(lengths)
    rng = derive_rng(seed, "crop")
    offsets = [int(rng.integers(0, n - n_batch + 1)) for n in lengths]
    with_tongue = all(u.tongue is not None for u in utts)

    noisy, clean, masks, lips, tongues = [], [], [], [], []
    for u, off in zip(utts, offsets):
        y = stft(u.noisy, config).frames(off, off + n_batch)
        s = stft(u.clean, config).frames(off, off + n_batch)
        noisy.append(y)
        clean.append(s)
        masks.append(ideal_complex_mask(s, y, mask_epsilon, mask_bound))
        lips.append(u.lip.crop(off, off + n_batch))
        if with_tongue:
            tongues.append(u.tongue.crop(off, off + n_batch))
    return TrainingBatch(
        [u.utt_id for u in utts], noisy, clean, masks, lips, tongues if with_tongue else None, offsets
    )
