"""Audio-lip(-tongue) U-Net mask estimator with per-layer feature capture.

Internal feature maps are laid out ``batch x channels x frames x freq`` so a
captured layer is directly the ``b x c x t x f`` map the distillation losses
expect. The network takes ``B x 2 x F x T`` noisy spectra and
``B x 3 x T x H x W`` articulation videos and returns a bounded complex mask
in the spectrogram layout.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field, fields

import torch
from torch import nn

from .spectral import complex_multiply

MODALITIES = ("lip", "tongue")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    articulation_channels: tuple[int, ...] = (8, 16, 32)
    n_feature_blocks: int = 7
    lstm_layers: int = 2
    lstm_hidden: int = 256
    mask_bound: float = 1.0
    leaky_slope: float = 0.2
    n_freq_bins: int = 257
    # None captures every point listed by all_trace_points()
    trace_points: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "articulation_channels", tuple(self.articulation_channels))
        if self.trace_points is not None:
            object.__setattr__(self, "trace_points", tuple(self.trace_points))
        if self.base_channels < 1 or self.lstm_hidden < 1 or self.lstm_layers < 1:
            raise ValueError("channel widths and layer counts must be positive")
        if self.n_feature_blocks < 1 or len(self.articulation_channels) < 1:
            raise ValueError("need at least one feature block and one articulation conv layer")
        if self.n_freq_bins < 3:
            raise ValueError(f"n_freq_bins must be at least 3, got {self.n_freq_bins}")
        if not self.mask_bound > 0:
            raise ValueError(f"mask_bound must be positive, got {self.mask_bound}")
        known = set(self.all_trace_points())
        chosen = self.selected_trace_points()
        unknown = [p for p in chosen if p not in known]
        if unknown:
            raise ValueError(f"unknown trace points: {unknown}")
        if len(set(chosen)) != len(chosen):
            raise ValueError("duplicate trace point names")

    @property
    def canonical(self) -> bool:
        return self.n_feature_blocks == 7 and self.lstm_layers == 2

    def block_channels(self) -> list[int]:
        """Widths of the feature blocks: base x 1, 2, 2, 4, 4, 8, 8, ..."""
        return [self.base_channels * 2 ** ((i + 1) // 2) for i in range(self.n_feature_blocks)]

    def all_trace_points(self) -> list[str]:
        n = self.n_feature_blocks
        return (
            ["encoder.conv"]
            + [f"encoder.block{i}" for i in range(1, n + 1)]
            + [f"lstm.{i}" for i in range(1, self.lstm_layers + 1)]
            + [f"decoder.block{i}" for i in range(n, 0, -1)]
            + ["decoder.conv"]
        )

    def selected_trace_points(self) -> list[str]:
        if self.trace_points is None:
            return self.all_trace_points()
        return list(self.trace_points)

    def freq_ladder(self) -> list[int]:
        """Frequency widths: input, after each audio conv, after each block."""
        widths = [self.n_freq_bins]
        for _ in range(2):
            widths.append((widths[-1] - 1) // 2 + 1)
        for _ in range(self.n_feature_blocks):
            widths.append(-(-widths[-1] // 2))
        return widths

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "trace_points":
                value = "" if value is None else ",".join(value)
            elif isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            out[f.name] = str(value)
        return out

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            if f.name == "trace_points":
                kwargs[f.name] = tuple(p for p in raw.split(",") if p) if raw else None
            elif f.name == "articulation_channels":
                kwargs[f.name] = tuple(int(v) for v in raw.split(","))
            elif f.name in ("mask_bound", "leaky_slope"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def capture_trace_points(config: ModelConfig) -> list[str]:
    return config.selected_trace_points()


class FeatureTrace:
    """Ordered ``(name, b x c x t x f)`` feature maps from one forward pass."""

    def __init__(self, entries=None):
        self.entries: list[tuple[str, torch.Tensor]] = list(entries or [])

    def append(self, name: str, value: torch.Tensor):
        self.entries.append((name, value))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(v.shape) for _, v in self.entries]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


@dataclass
class NetworkOutput:
    mask: torch.Tensor  # B x 2 x F x T
    enhanced: torch.Tensor  # B x 2 x F x T
    trace: FeatureTrace = field(default_factory=FeatureTrace)


def halve_freq(x: torch.Tensor) -> torch.Tensor:
    """Average-pool pairs of frequency bins, ceil semantics (odd widths repeat the last bin)."""
    if x.shape[-1] == 1:
        return x
    if x.shape[-1] % 2:
        x = torch.cat([x, x[..., -1:]], dim=-1)
    return 0.5 * (x[..., 0::2] + x[..., 1::2])


def upsample_freq(x: torch.Tensor, width: int) -> torch.Tensor:
    return x.repeat_interleave(2, dim=-1)[..., :width]


class FeatureBlock(nn.Module):
    """3x3 conv, batch norm, LeakyReLU, frequency halving."""

    def __init__(self, cin, cout, slope):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return halve_freq(self.act(self.bn(self.conv(x))))


class ArticulationStream(nn.Module):
    """Strided 3D convs over one video, then feature blocks on a per-frame map."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        layers = []
        cin = 3
        for cout in config.articulation_channels:
            layers += [
                nn.Conv3d(cin, cout, 3, stride=(1, 2, 2), padding=1),
                nn.BatchNorm3d(cout),
                nn.LeakyReLU(config.leaky_slope),
            ]
            cin = cout
        self.conv = nn.Sequential(*layers)
        widths = [cin] + config.block_channels()
        self.blocks = nn.ModuleList(
            FeatureBlock(widths[i], widths[i + 1], config.leaky_slope) for i in range(config.n_feature_blocks)
        )

    def forward(self, video):
        x = self.conv(video)  # B x C x T x h x w
        b, c, t, h, w = x.shape
        x = x.reshape(b, c, t, h * w)
        levels = [x]
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return levels


class DecoderBlock(nn.Module):
    def __init__(self, cin, cout, slope):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 3, padding=1)
        self.bn = nn.BatchNorm2d(cout)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x, width):
        return upsample_freq(self.act(self.bn(self.conv(x))), width)


class AVSENet(nn.Module):
    """Teacher (``modalities=("lip", "tongue")``) or student (``("lip",)``)."""

    def __init__(self, config: ModelConfig, modalities=MODALITIES):
        super().__init__()
        if not config.canonical:
            warnings.warn(
                f"non-canonical model: {config.n_feature_blocks} feature blocks, "
                f"{config.lstm_layers} LSTM layers (reference design uses 7 and 2)",
                stacklevel=2,
            )
        modalities = tuple(modalities)
        if not modalities or any(m not in MODALITIES for m in modalities):
            raise ValueError(f"modalities must be drawn from {MODALITIES}, got {modalities}")
        self.config = config
        self.modalities = modalities
        slope = config.leaky_slope
        n = config.n_feature_blocks
        base = config.base_channels
        audio_widths = [base] + config.block_channels()
        arti_widths = [config.articulation_channels[-1]] + config.block_channels()
        self.freqs = config.freq_ladder()

        self.articulation = nn.ModuleDict({m: ArticulationStream(config) for m in modalities})
        # per-bin linear fusion of the modality streams at every level
        self.fusion = nn.ModuleList(
            nn.Conv2d(len(modalities) * c, c, 1) for c in arti_widths
        )
        self.projection = nn.ModuleList(nn.Linear(ca, cx) for ca, cx in zip(arti_widths, audio_widths))

        self.audio_conv = nn.Sequential(
            nn.Conv2d(2, base, 3, stride=(1, 2), padding=1),
            nn.BatchNorm2d(base),
            nn.LeakyReLU(slope),
            nn.Conv2d(base, base, 3, stride=(1, 2), padding=1),
            nn.BatchNorm2d(base),
            nn.LeakyReLU(slope),
        )
        self.audio_blocks = nn.ModuleList(
            FeatureBlock(audio_widths[i], audio_widths[i + 1], slope) for i in range(n)
        )

        lstm_in = 2 * audio_widths[-1] * self.freqs[-1]
        hidden = config.lstm_hidden
        self.lstm = nn.ModuleList(
            nn.LSTM(lstm_in if i == 0 else hidden, hidden, batch_first=True) for i in range(config.lstm_layers)
        )

        # decoder level l consumes [previous output, multimodal level l]
        self.decoder = nn.ModuleList()
        for level in range(n, 0, -1):
            prev = hidden if level == n else audio_widths[level]
            self.decoder.append(DecoderBlock(prev + 2 * audio_widths[level], audio_widths[level - 1], slope))
        self.decoder_conv1 = nn.ConvTranspose2d(3 * base, base, 3, stride=(1, 2), padding=1)
        self.decoder_bn1 = nn.BatchNorm2d(base)
        self.decoder_conv2 = nn.ConvTranspose2d(base, base, 3, stride=(1, 2), padding=1)
        self.decoder_bn2 = nn.BatchNorm2d(base)
        self.act = nn.LeakyReLU(slope)
        self.head = nn.Conv2d(base, 2, 1)

    @property
    def kind(self) -> str:
        return "teacher" if "tongue" in self.modalities else "student"

    def _fused_articulation(self, videos: dict[str, torch.Tensor]) -> list[torch.Tensor]:
        streams = [self.articulation[m](videos[m]) for m in self.modalities]
        return [fuse(torch.cat(level, dim=1)) for fuse, level in zip(self.fusion, zip(*streams))]

    def _multimodal(self, level: int, audio: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        pooled = fused.mean(dim=-1).transpose(1, 2)  # B x T x C
        projected = self.projection[level](pooled).transpose(1, 2).unsqueeze(-1)
        return torch.cat([audio, projected.expand(-1, -1, -1, audio.shape[-1])], dim=1)

    def forward(self, noisy: torch.Tensor, lips: torch.Tensor, tongues: torch.Tensor | None = None) -> NetworkOutput:
        videos = {"lip": lips}
        if tongues is not None and "tongue" in self.modalities:
            videos["tongue"] = tongues
        missing = [m for m in self.modalities if m not in videos]
        if missing:
            raise ValueError(f"{self.kind} network needs {missing} input")
        if noisy.dim() != 4 or noisy.shape[1] != 2 or noisy.shape[2] != self.config.n_freq_bins:
            raise ValueError(
                f"noisy input must be B x 2 x {self.config.n_freq_bins} x T, got {tuple(noisy.shape)}"
            )
        n_frames = noisy.shape[-1]
        for m, v in videos.items():
            if v.dim() != 5 or v.shape[1] != 3:
                raise ValueError(f"{m} input must be B x 3 x T x H x W, got {tuple(v.shape)}")
            if v.shape[2] != n_frames or v.shape[0] != noisy.shape[0]:
                raise ValueError(
                    f"{m} video has {v.shape[2]} frames x {v.shape[0]} items, "
                    f"audio has {n_frames} frames x {noisy.shape[0]} items"
                )

        wanted = set(self.config.selected_trace_points())
        captured: dict[str, torch.Tensor] = {}

        def capture(name, value):
            if not torch.isfinite(value).all():
                raise FloatingPointError(f"non-finite activations in layer {name}")
            if name in wanted:
                captured[name] = value

        fused = self._fused_articulation(videos)
        x = self.audio_conv(noisy.transpose(2, 3))  # B x C x T x F
        skips = [self._multimodal(0, x, fused[0])]
        capture("encoder.conv", skips[0])
        for i, block in enumerate(self.audio_blocks, start=1):
            x = block(x)
            skips.append(self._multimodal(i, x, fused[i]))
            capture(f"encoder.block{i}", skips[i])

        b, c, t, f = skips[-1].shape
        h = skips[-1].permute(0, 2, 1, 3).reshape(b, t, c * f)
        for i, lstm in enumerate(self.lstm, start=1):
            h, _ = lstm(h)
            capture(f"lstm.{i}", h.unsqueeze(1))

        n = self.config.n_feature_blocks
        x = h.transpose(1, 2).unsqueeze(-1).expand(-1, -1, -1, f)
        for block, level in zip(self.decoder, range(n, 0, -1)):
            x = block(torch.cat([x, skips[level]], dim=1), self.freqs[level + 1])
            capture(f"decoder.block{level}", x)
        x = torch.cat([x, skips[0]], dim=1)
        x = self.act(self.decoder_bn1(self.decoder_conv1(x, output_size=[t, self.freqs[1]])))
        x = self.act(self.decoder_bn2(self.decoder_conv2(x, output_size=[t, self.freqs[0]])))
        capture("decoder.conv", x)

        mask = (self.config.mask_bound * torch.tanh(self.head(x))).transpose(2, 3)
        if not torch.isfinite(mask).all():
            raise FloatingPointError("non-finite activations in layer head")
        re, im = complex_multiply(mask[:, 0], mask[:, 1], noisy[:, 0], noisy[:, 1])
        trace = FeatureTrace((name, captured[name]) for name in self.config.selected_trace_points())
        return NetworkOutput(mask, torch.stack([re, im], dim=1), trace)


def init_parameters(net: nn.Module, seed: int) -> nn.Module:
    """Seeded uniform fan-in initialisation, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d)):
                fan_in = module.in_channels * math.prod(module.kernel_size)
            elif isinstance(module, nn.Linear):
                fan_in = module.in_features
            elif isinstance(module, nn.LSTM):
                fan_in = module.hidden_size
            elif isinstance(module, nn.modules.batchnorm._BatchNorm):
                module.reset_parameters()
                continue
            else:
                continue
            bound = 1.0 / math.sqrt(fan_in)
            for p in module.parameters(recurse=False):
                p.uniform_(-bound, bound, generator=g)
    return net


def build_teacher(config: ModelConfig | None = None, seed: int = 0) -> AVSENet:
    return init_parameters(AVSENet(config or ModelConfig(), ("lip", "tongue")), seed)


def build_student(config: ModelConfig | None = None, seed: int = 0) -> AVSENet:
    return init_parameters(AVSENet(config or ModelConfig(), ("lip",)), seed)


def teacher_forward(net: AVSENet, noisy, lips, tongues) -> NetworkOutput:
    if tongues is None:
        raise ValueError("teacher forward needs tongue videos")
    return net(noisy, lips, tongues)


def student_forward(net: AVSENet, noisy, lips) -> NetworkOutput:
    return net(noisy, lips)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def parameter_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in net.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
