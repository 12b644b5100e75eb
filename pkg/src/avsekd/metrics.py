"""Objective speech metrics: segmental SNR, STOI and an external PESQ bridge,
plus corpus-level evaluation of enhanced speech."""
from __future__ import annotations

import logging
import math
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import resample_poly
from scipy.signal.windows import hann

from . import media
from .corpus import EVAL_SNRS, CorpusManifest, load_utterance
from .spectral import SpectralConfig

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# segmental SNR

SEGSNR_FLOOR = -10.0
SEGSNR_CEILING = 35.0


def segsnr(ref, est, frame: int = 256, hop: int = 128, clamp=(SEGSNR_FLOOR, SEGSNR_CEILING),
           energy_floor: float = 1e-8) -> float:
    """Mean of clamped per-frame SNRs over frames where the reference is not silent."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ValueError(f"segsnr needs equal-length 1-D signals, got {ref.shape} and {est.shape}")
    if len(ref) < frame:
        raise ValueError(f"signals have {len(ref)} samples, fewer than one frame ({frame})")
    n = 1 + (len(ref) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    signal_energy = np.sum(ref[idx] ** 2, axis=1)
    error_energy = np.sum((ref[idx] - est[idx]) ** 2, axis=1)
    keep = signal_energy >= energy_floor
    if not keep.any():
        raise ValueError("reference is silent in every frame")
    low, high = clamp
    values = np.full(int(keep.sum()), float(high))
    err = error_energy[keep]
    nonzero = err > 0
    values[nonzero] = np.clip(10 * np.log10(signal_energy[keep][nonzero] / err[nonzero]), low, high)
    return float(values.mean())


# ---------------------------------------------------------------------------
# STOI

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
_EPS = np.finfo(np.float64).eps


def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Band-summing matrix (bands x bins) and centre frequencies; band edges snap to bins."""
    freqs = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands, dtype=np.float64)
    centre = 2.0 ** (k / 3) * min_freq
    low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, len(freqs)))
    for i in range(n_bands):
        lo_bin = int(np.argmin((freqs - low[i]) ** 2))
        hi_bin = int(np.argmin((freqs - high[i]) ** 2))
        obm[i, lo_bin:hi_bin] = 1.0
    return obm, centre


def _octave_resample(x: np.ndarray, up: int, down: int) -> np.ndarray:
    """Polyphase resampling with the Kaiser-windowed sinc of Octave's ``resample``."""
    g = math.gcd(up, down)
    p, q = up // g, down // g
    cutoff = 1.0 / (2 * max(p, q))
    rejection_db = 60.0
    half = math.ceil((rejection_db - 8) / (28.714 * cutoff / 10))
    t = np.arange(-half, half + 1)
    ideal = 2 * p * cutoff * np.sinc(2 * cutoff * t)
    beta = 0.1102 * (rejection_db - 8.7)
    h = np.kaiser(2 * half + 1, beta) * ideal
    return resample_poly(x, up, down, window=h / h.sum())


def _frames(x: np.ndarray, length: int, hop: int) -> np.ndarray:
    # the final full frame is left out, as in the reference implementation
    starts = range(0, len(x) - length, hop)
    window = hann(length + 2)[1:-1]
    return np.array([window * x[i : i + length] for i in starts]).reshape(-1, length)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n, length = frames.shape
    out = np.zeros((n - 1) * hop + length if n else 0)
    for i in range(n):
        out[i * hop : i * hop + length] += frames[i]
    return out


def remove_silent_frames(ref: np.ndarray, est: np.ndarray, dyn_range=STOI_DYN_RANGE,
                         length=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest reference frame."""
    ref_frames = _frames(ref, length, hop)
    est_frames = _frames(est, length, hop)
    energies = 20 * np.log10(np.linalg.norm(ref_frames, axis=1) + _EPS)
    keep = (np.max(energies) - dyn_range - energies) < 0
    return _overlap_add(ref_frames[keep], hop), _overlap_add(est_frames[keep], hop)


def stoi(ref, est, sample_rate: int = 16000) -> float:
    """Short-time objective intelligibility of ``est`` against clean ``ref``."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape or ref.ndim != 1:
        raise ValueError(f"stoi needs equal-length 1-D signals, got {ref.shape} and {est.shape}")
    min_samples = math.ceil(0.384 * sample_rate)
    if len(ref) < min_samples:
        raise ValueError(f"stoi needs at least 384 ms of audio, got {len(ref)} samples at {sample_rate} Hz")
    if not np.any(ref):
        raise ValueError("reference signal is silent")
    if sample_rate != STOI_FS:
        ref = _octave_resample(ref, STOI_FS, sample_rate)
        est = _octave_resample(est, STOI_FS, sample_rate)
    ref, est = remove_silent_frames(ref, est)

    ref_spec = np.fft.rfft(_frames(ref, STOI_FRAME, STOI_FRAME // 2), n=STOI_NFFT).T
    est_spec = np.fft.rfft(_frames(est, STOI_FRAME, STOI_FRAME // 2), n=STOI_NFFT).T
    if ref_spec.shape[1] < STOI_SEGMENT:
        raise ValueError(
            f"only {ref_spec.shape[1]} non-silent frames remain, need {STOI_SEGMENT}"
        )
    obm, _ = third_octave_matrix()
    ref_bands = np.sqrt(obm @ np.abs(ref_spec) ** 2)
    est_bands = np.sqrt(obm @ np.abs(est_spec) ** 2)

    n_seg = ref_bands.shape[1] - STOI_SEGMENT + 1
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_seg)[:, None]
    x = ref_bands[:, idx].transpose(1, 0, 2)  # segments x bands x frames
    y = est_bands[:, idx].transpose(1, 0, 2)
    scale = np.linalg.norm(x, axis=2, keepdims=True) / (np.linalg.norm(y, axis=2, keepdims=True) + _EPS)
    y = np.minimum(y * scale, x * (1 + 10 ** (-STOI_BETA / 20)))
    y = y - y.mean(axis=2, keepdims=True)
    x = x - x.mean(axis=2, keepdims=True)
    y = y / (np.linalg.norm(y, axis=2, keepdims=True) + _EPS)
    x = x / (np.linalg.norm(x, axis=2, keepdims=True) + _EPS)
    return float(np.sum(x * y) / (x.shape[0] * x.shape[1]))


# ---------------------------------------------------------------------------
# PESQ bridge

DEFAULT_PESQ_ARGS = ("+16000", "+wb", "{ref}", "{est}")
DEFAULT_PESQ_PATTERN = r"=\s*([-+]?\d+(?:\.\d+)?)\s*$"


class PesqError(RuntimeError):
    pass


def parse_pesq_output(text: str, pattern: str = DEFAULT_PESQ_PATTERN) -> float:
    """Score from the last line of ``text`` matching ``pattern`` (first group)."""
    regex = re.compile(pattern)
    score = None
    for line in text.splitlines():
        m = regex.search(line)
        if m:
            score = float(m.group(1))
    if score is None:
        raise PesqError("no PESQ score found in tool output")
    return score


def pesq_bridge(ref_wav, est_wav, executable: str | None, args: Sequence[str] = DEFAULT_PESQ_ARGS,
                pattern: str = DEFAULT_PESQ_PATTERN, timeout: float = 120.0) -> float | None:
    """Run an external wideband PESQ tool; ``None`` when no executable is configured."""
    if not executable:
        return None
    argv = [executable] + [a.format(ref=str(ref_wav), est=str(est_wav)) for a in args]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise PesqError(f"could not run {executable}: {exc}") from exc
    if proc.returncode != 0:
        raise PesqError(f"{executable} exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
    return parse_pesq_output(proc.stdout, pattern)


@dataclass(frozen=True)
class PesqSettings:
    executable: str | None = None
    args: tuple[str, ...] = DEFAULT_PESQ_ARGS
    pattern: str = DEFAULT_PESQ_PATTERN


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass(frozen=True)
class MetricRow:
    utt_id: str
    condition: float
    system: str
    segsnr_db: float
    stoi: float
    pesq: float | None = None


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)
    failures: list[tuple[str, float, str]] = field(default_factory=list)
    with_pesq: bool = False

    def systems(self) -> list[str]:
        return list(dict.fromkeys(r.system for r in self.rows))

    def conditions(self) -> list[float]:
        return list(dict.fromkeys(r.condition for r in self.rows))

    def aggregates(self) -> dict[tuple[str, float], dict[str, float]]:
        """Arithmetic means per (system, condition)."""
        out = {}
        for system in self.systems():
            for cond in self.conditions():
                rows = [r for r in self.rows if r.system == system and r.condition == cond]
                if not rows:
                    continue
                agg = {
                    "segsnr_db": float(np.mean([r.segsnr_db for r in rows])),
                    "stoi": float(np.mean([r.stoi for r in rows])),
                    "count": len(rows),
                }
                pesq = [r.pesq for r in rows if r.pesq is not None]
                if self.with_pesq and pesq:
                    agg["pesq"] = float(np.mean(pesq))
                out[(system, cond)] = agg
        return out

    def rows_tsv(self) -> str:
        header = ["utt_id", "condition", "system", "segsnr_db", "stoi"] + (["pesq"] if self.with_pesq else [])
        lines = ["\t".join(header)]
        for r in self.rows:
            cells = [r.utt_id, repr(r.condition), r.system, repr(r.segsnr_db), repr(r.stoi)]
            if self.with_pesq:
                cells.append("" if r.pesq is None else repr(r.pesq))
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def summary_tsv(self) -> str:
        header = ["system", "condition", "count", "segsnr_db", "stoi"] + (["pesq"] if self.with_pesq else [])
        lines = ["\t".join(header)]
        for (system, cond), agg in self.aggregates().items():
            cells = [system, repr(cond), str(agg["count"]), repr(agg["segsnr_db"]), repr(agg["stoi"])]
            if self.with_pesq:
                cells.append(repr(agg["pesq"]) if "pesq" in agg else "")
            lines.append("\t".join(cells))
        lines.append(f"# failed\t{len(self.failures)}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        """Systems as rows, one metric block per SNR condition."""
        metrics = ["segsnr_db", "stoi"] + (["pesq"] if self.with_pesq else [])
        conds = self.conditions()
        aggs = self.aggregates()
        head = f"{'system':<10}" + "".join(
            f"{m + '@' + format(c, 'g') + 'dB':>18}" for c in conds for m in metrics
        )
        lines = [head]
        for system in self.systems():
            cells = []
            for c in conds:
                agg = aggs.get((system, c), {})
                for m in metrics:
                    cells.append(f"{agg[m]:>18.4f}" if m in agg else f"{'-':>18}")
            lines.append(f"{system:<10}" + "".join(cells))
        if self.failures:
            lines.append(f"({len(self.failures)} utterance/condition pairs failed and are excluded)")
        return "\n".join(lines)


def _score(clean, est, sample_rate, pesq: PesqSettings | None, workdir: Path | None):
    score = None
    if pesq is not None and pesq.executable:
        ref_path, est_path = workdir / "ref.wav", workdir / "est.wav"
        media.write_wav(ref_path, clean, sample_rate)
        media.write_wav(est_path, est, sample_rate)
        try:
            score = pesq_bridge(ref_path, est_path, pesq.executable, pesq.args, pesq.pattern)
        except PesqError as exc:
            log.warning("PESQ failed: %s", exc)
    return segsnr(clean, est), stoi(clean, est, sample_rate), score


def evaluate_corpus(
    manifest: CorpusManifest,
    checkpoint=None,
    conditions: Sequence[float] = EVAL_SNRS,
    split: str = "test",
    include_oracle: bool = False,
    pesq: PesqSettings | None = None,
) -> MetricReport:
    """Mix, enhance and score every utterance of ``split`` at each SNR condition.

    Rows are emitted for the unprocessed mixture (``noisy``), the network named
    by its kind when a checkpoint is given, and the ideal-mask ceiling
    (``oracle``) on request. All systems are scored on the frame-aligned length.
    """
    from .checkpoint import load_checkpoint
    from .training import enhance_arrays, oracle_enhance, spectral_from_meta

    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    net = None
    config = SpectralConfig()
    if checkpoint is not None:
        net, meta = load_checkpoint(checkpoint)
        config = spectral_from_meta(meta)
    with_pesq = pesq is not None and bool(pesq.executable)
    report = MetricReport(with_pesq=with_pesq)
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        for record in records:
            for cond in conditions:
                cond = float(cond)
                try:
                    utt = load_utterance(manifest, record, snr_db=cond, with_tongue=net is not None and net.kind == "teacher")
                    sr = config.sample_rate
                    systems = {}
                    if net is not None:
                        systems[net.kind] = enhance_arrays(net, utt.noisy, utt.lip, utt.tongue, config)
                        length = len(systems[net.kind])
                    else:
                        length = config.n_samples(min(config.n_frames(len(utt.noisy)), utt.lip.n_frames))
                    clean = utt.clean[:length]
                    noisy = utt.noisy[:length]
                    if include_oracle:
                        systems["oracle"] = oracle_enhance(clean, noisy, config=config)
                    scored = [("noisy", _score(clean, noisy, sr, pesq, workdir))]
                    scored += [(name, _score(clean, est, sr, pesq, workdir)) for name, est in systems.items()]
                except Exception as exc:  # one bad utterance must not sink the run
                    log.warning("%s @ %g dB failed: %s", record.utt_id, cond, exc)
                    report.failures.append((record.utt_id, cond, str(exc)))
                    continue
                for name, (seg, st, pq) in scored:
                    report.rows.append(MetricRow(record.utt_id, cond, name, seg, st, pq))
    return report
