"""Teacher and student training loops, the plateau learning-rate schedule and
the inference path.

Both loops share one objective: the mask loss plus the weighted spectrogram
loss, with the distillation terms added for a student that has a teacher.
Validation runs one full utterance at a time with batch norm in inference
mode, and the best-validation parameters are what gets written out.
"""
from __future__ import annotations

import copy
import logging
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import media
from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import (
    CorpusManifest,
    articulation_preprocess,
    assemble_batch,
    load_utterance,
)
from .losses import (
    LossBalancer,
    LossWeights,
    loss_kd_mse,
    loss_mask,
    loss_spkd,
    loss_stft,
    loss_student,
    loss_teacher,
)
from .model import AVSENet, ModelConfig, build_student, build_teacher
from .seeding import derive_rng, derive_seed
from .spectral import (
    ComplexMask,
    SpectralConfig,
    apply_mask,
    ideal_complex_mask,
    istft,
    stft,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay_factor: float = 0.1
    plateau_patience: int = 10
    max_epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # None disables gradient-norm clipping
    grad_clip: float | None = 5.0
    mask_epsilon: float = 1e-8
    spectral: SpectralConfig = field(default_factory=SpectralConfig)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay_factor must be in (0, 1), got {self.decay_factor}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError(f"grad_clip must be positive or None, got {self.grad_clip}")


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without a strict improvement of the validation loss."""

    def __init__(self, learning_rate: float, factor: float = 0.1, patience: int = 10):
        self.lr = learning_rate
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.since_improvement = 0

    def step(self, value: float) -> bool:
        """Record one epoch's validation loss; returns True on a new best."""
        if value < self.best:
            self.best = value
            self.since_improvement = 0
            return True
        self.since_improvement += 1
        if self.since_improvement >= self.patience:
            self.lr *= self.factor
            self.since_improvement = 0
        return False


@dataclass
class TrainState:
    epoch: int
    schedule: PlateauSchedule
    best_epoch: int = 0
    best_params: dict | None = None


@contextmanager
def _single_thread():
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


class TrainingLog:
    """``epoch<TAB>split<TAB>loss_name<TAB>value<TAB>lr`` lines."""

    def __init__(self, path: Path):
        self.path = path
        self.path.write_text("", encoding="utf-8")

    def write(self, epoch: int, split: str, name: str, value: float, lr: float):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"{epoch}\t{split}\t{name}\t{value!r}\t{lr!r}\n")


def read_log(path) -> list[tuple[int, str, str, float, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        epoch, split, name, value, lr = line.split("\t")
        rows.append((int(epoch), split, name, float(value), float(lr)))
    return rows


def log_series(path, split: str, name: str) -> list[float]:
    """Values of one logged quantity in epoch order (epoch 0 first)."""
    return [v for _, s, n, v, _ in read_log(path) if s == split and n == name]


def _batches(manifest: CorpusManifest, split: str, batch_size: int, seed: int, epoch: int, with_tongue: bool):
    records = manifest.split(split)
    order = derive_rng(seed, "shuffle", epoch).permutation(len(records))
    for k in range(0, len(order), batch_size):
        chunk = [records[i] for i in order[k : k + batch_size]]
        utts = [load_utterance(manifest, r, with_tongue=with_tongue) for r in chunk]
        yield k // batch_size, utts


def _forward(net: AVSENet, tensors: dict[str, torch.Tensor]):
    if net.kind == "teacher":
        return net(tensors["noisy"], tensors["lips"], tensors["tongues"])
    return net(tensors["noisy"], tensors["lips"])


def validate(net: AVSENet, manifest: CorpusManifest, train_config: TrainConfig, split: str = "valid") -> dict[str, float]:
    """Mean per-utterance losses over a split, whole utterances, inference-mode batch norm."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    was_training = net.training
    net.eval()
    totals = {"mask": 0.0, "stft": 0.0, "loss": 0.0}
    dtype = next(net.parameters()).dtype
    with torch.no_grad():
        for r in records:
            utt = load_utterance(manifest, r, with_tongue=net.kind == "teacher")
            batch = assemble_batch(
                [utt], 0, train_config.spectral, net.config.mask_bound, train_config.mask_epsilon
            )
            tensors = batch.tensors(dtype)
            out = _forward(net, tensors)
            l_mask = loss_mask(out.mask, tensors["mask"])
            l_stft = loss_stft(out.enhanced, tensors["clean"])
            totals["mask"] += float(l_mask)
            totals["stft"] += float(l_stft)
            totals["loss"] += float(loss_teacher(l_mask, l_stft, train_config.weights))
    net.train(was_training)
    return {k: v / len(records) for k, v in totals.items()}


def check_trace_compatible(teacher: AVSENet, student: AVSENet, frames: int = 8):
    """Probe both networks with a small input and compare their traces."""
    cfg_t, cfg_s = teacher.config, student.config
    if cfg_t.n_freq_bins != cfg_s.n_freq_bins:
        raise ValueError(f"teacher expects {cfg_t.n_freq_bins} bins, student {cfg_s.n_freq_bins}")
    dtype = next(student.parameters()).dtype
    noisy = torch.zeros(1, 2, cfg_s.n_freq_bins, frames, dtype=dtype)
    video = torch.zeros(1, 3, frames, 64, 128, dtype=dtype)
    was_training = student.training
    student.eval()
    with torch.no_grad():
        trace_t = teacher(noisy.to(next(teacher.parameters()).dtype), video, video).trace
        trace_s = student(noisy, video).trace
    student.train(was_training)
    if trace_t.names != trace_s.names:
        raise ValueError(f"trace names differ: {trace_t.names} vs {trace_s.names}")
    for name, a, b in zip(trace_t.names, trace_t.shapes, trace_s.shapes):
        if a != b:
            raise ValueError(f"trace shape mismatch at {name}: teacher {a}, student {b}")


def _train(
    net: AVSENet,
    manifest: CorpusManifest,
    train_config: TrainConfig,
    out_dir,
    teacher: AVSENet | None = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = net.kind
    if net.config.n_freq_bins != train_config.spectral.n_bins:
        raise ValueError(
            f"model expects {net.config.n_freq_bins} bins, spectral settings give {train_config.spectral.n_bins}"
        )
    if not manifest.split("train"):
        raise ValueError("train split is empty")
    if not manifest.split("valid"):
        raise ValueError("valid split is empty")
    weights = train_config.weights
    use_teacher = teacher is not None and (weights.gamma1 != 0 or weights.gamma2 != 0)
    if use_teacher:
        check_trace_compatible(teacher, net)
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)

    dtype = next(net.parameters()).dtype
    tlog = TrainingLog(out_dir / f"{name}_log.tsv")
    schedule = PlateauSchedule(train_config.learning_rate, train_config.decay_factor, train_config.plateau_patience)
    state = TrainState(0, schedule)
    optimizer = torch.optim.Adam(
        net.parameters(), lr=schedule.lr, betas=tuple(train_config.betas), eps=train_config.eps
    )
    balancer = LossBalancer()
    seed = train_config.seed

    initial = validate(net, manifest, train_config)
    for key in ("loss", "mask", "stft"):
        tlog.write(0, "valid", key, initial[key], schedule.lr)

    for epoch in range(1, train_config.max_epochs + 1):
        state.epoch = epoch
        for group in optimizer.param_groups:
            group["lr"] = schedule.lr
        net.train()
        sums = {"loss": 0.0, "mask": 0.0, "stft": 0.0}
        n_batches = 0
        with_tongue = net.kind == "teacher" or use_teacher
        for k, utts in _batches(manifest, "train", train_config.batch_size, seed, epoch, with_tongue):
            batch = assemble_batch(
                utts,
                derive_seed(seed, "batch", epoch, k),
                train_config.spectral,
                net.config.mask_bound,
                train_config.mask_epsilon,
            )
            tensors = batch.tensors(dtype)
            out = _forward(net, tensors)
            l_mask = loss_mask(out.mask, tensors["mask"])
            l_stft = loss_stft(out.enhanced, tensors["clean"])
            l_kd = l_sp = None
            if use_teacher:
                with torch.no_grad():
                    ref = teacher(tensors["noisy"], tensors["lips"], tensors["tongues"])
                if weights.gamma1 != 0:
                    l_kd = loss_kd_mse(ref.trace, out.trace, weights.kd_batch_normalize)
                if weights.gamma2 != 0:
                    l_sp = loss_spkd(ref.trace, out.trace)
            loss = loss_student(l_mask, l_stft, l_kd, l_sp, weights, balancer)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite {name} loss at epoch {epoch}, batch {k}")
            optimizer.zero_grad()
            loss.backward()
            if train_config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(net.parameters(), train_config.grad_clip)
            optimizer.step()
            sums["loss"] += loss.item()
            sums["mask"] += l_mask.item()
            sums["stft"] += l_stft.item()
            n_batches += 1
        lr_used = schedule.lr
        for key in ("loss", "mask", "stft"):
            tlog.write(epoch, "train", key, sums[key] / n_batches, lr_used)

        result = validate(net, manifest, train_config)
        for key in ("loss", "mask", "stft"):
            tlog.write(epoch, "valid", key, result[key], lr_used)
        if schedule.step(result["loss"]):
            state.best_epoch = epoch
            state.best_params = copy.deepcopy(net.state_dict())
        log.info("%s epoch %d: valid loss %.6g (lr %g)", name, epoch, result["loss"], lr_used)

    net.load_state_dict(state.best_params)
    net.eval()
    path = out_dir / f"{name}.avck"
    extra = {"best_epoch": str(state.best_epoch), "seed": str(seed), **spectral_to_dict(train_config.spectral)}
    save_checkpoint(path, net, extra)
    return path


def train_teacher(manifest: CorpusManifest, model_config: ModelConfig, train_config: TrainConfig, out_dir) -> Path:
    """Train the audio-lip-tongue network; returns the best-validation checkpoint path."""
    with _single_thread():
        net = build_teacher(model_config, train_config.seed)
        return _train(net, manifest, train_config, out_dir)


def train_student(
    manifest: CorpusManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir,
    teacher_checkpoint=None,
) -> Path:
    """Train the audio-lip network, distilled from ``teacher_checkpoint`` when given."""
    with _single_thread():
        teacher = None
        if teacher_checkpoint is not None:
            teacher, _ = load_checkpoint(teacher_checkpoint)
            if teacher.kind != "teacher":
                raise ValueError(f"{teacher_checkpoint} holds a {teacher.kind}, not a teacher")
        net = build_student(model_config, train_config.seed)
        return _train(net, manifest, train_config, out_dir, teacher)


# ---------------------------------------------------------------------------
# inference


def enhance_arrays(net: AVSENet, noisy: np.ndarray, lip, tongue=None, config: SpectralConfig | None = None) -> np.ndarray:
    """Enhance one waveform given preprocessed articulation sequences."""
    config = config or SpectralConfig()
    if net.kind == "student" and tongue is not None:
        warnings.warn("student network ignores the tongue video", stacklevel=2)
        tongue = None
    if net.kind == "teacher" and tongue is None:
        raise ValueError("teacher checkpoint needs a tongue video")
    spec = stft(noisy, config)
    lengths = [spec.n_frames, lip.n_frames] + ([tongue.n_frames] if tongue is not None else [])
    n = min(lengths)
    spec = spec.frames(0, n)
    dtype = next(net.parameters()).dtype
    x = torch.from_numpy(spec.stacked()[None]).to(dtype)
    lips = torch.from_numpy(lip.crop(0, n).pixels[None]).to(dtype)
    tongues = torch.from_numpy(tongue.crop(0, n).pixels[None]).to(dtype) if tongue is not None else None
    net.eval()
    with torch.no_grad():
        out = net(x, lips, tongues)
    mask = out.mask[0].double().numpy()
    enhanced = apply_mask(spec, ComplexMask(mask[0], mask[1], net.config.mask_bound))
    return istft(enhanced)


SPECTRAL_KEYS = ("sample_rate", "win_length", "hop_length", "fft_size")


def spectral_to_dict(config: SpectralConfig) -> dict[str, str]:
    return {f"spectral.{k}": str(getattr(config, k)) for k in SPECTRAL_KEYS}


def spectral_from_meta(meta: dict[str, str]) -> SpectralConfig:
    """Analysis settings stored with a checkpoint (defaults when absent)."""
    return SpectralConfig(**{k: int(meta[f"spectral.{k}"]) for k in SPECTRAL_KEYS if f"spectral.{k}" in meta})


def enhance(checkpoint, noisy_wav, lip_video, tongue_video=None, out_wav=None) -> np.ndarray:
    """Enhance a noisy WAV file with a trained network; optionally write the result."""
    net, meta = load_checkpoint(checkpoint)
    config = spectral_from_meta(meta)
    if net.kind == "teacher" and tongue_video is None:
        raise ValueError("teacher checkpoint needs a tongue video")
    noisy, sr = media.read_wav(noisy_wav)
    if sr != config.sample_rate:
        raise ValueError(f"{noisy_wav} is sampled at {sr} Hz, the network expects {config.sample_rate} Hz")
    lip_frames, fps = media.read_uvf(lip_video)
    lip = articulation_preprocess(lip_frames, "lip", fps)
    tongue = None
    if tongue_video is not None:
        tongue_frames, fps_t = media.read_uvf(tongue_video)
        tongue = articulation_preprocess(tongue_frames, "tongue", fps_t)
    with _single_thread():
        out = enhance_arrays(net, noisy, lip, tongue, config)
    if out_wav is not None:
        media.write_wav(out_wav, out, sr)
    return out


def oracle_enhance(clean: np.ndarray, noisy: np.ndarray, epsilon: float = 1e-8,
                   config: SpectralConfig | None = None) -> np.ndarray:
    """Apply the unclipped ideal complex mask; the ceiling for any mask estimator."""
    config = config or SpectralConfig()
    y = stft(noisy, config)
    s = stft(clean, config)
    return istft(apply_mask(y, ideal_complex_mask(s, y, epsilon, bound=np.inf)))
