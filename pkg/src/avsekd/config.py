"""Flat ``key = value`` run configuration with namespaced, documented keys."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .corpus import EVAL_SNRS
from .losses import LossWeights
from .metrics import DEFAULT_PESQ_ARGS, DEFAULT_PESQ_PATTERN, PesqSettings
from .model import ModelConfig
from .spectral import SpectralConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    default: str
    kind: str  # int, float, bool, str, ints, floats
    help: str


KEYS: dict[str, Key] = {
    "spectral.sample_rate": Key("16000", "int", "audio sample rate in Hz"),
    "spectral.win_length": Key("512", "int", "STFT window length in samples"),
    "spectral.hop_length": Key("196", "int", "STFT hop in samples"),
    "spectral.fft_size": Key("512", "int", "FFT size; the network sees fft_size/2+1 bins"),
    "corpus.n_train": Key("50", "int", "synthetic training utterances"),
    "corpus.n_valid": Key("10", "int", "synthetic validation utterances"),
    "corpus.n_test": Key("10", "int", "synthetic test utterances"),
    "corpus.seed": Key("0", "int", "root seed of the synthetic corpus"),
    "corpus.min_duration": Key("1.0", "float", "shortest synthetic utterance in seconds"),
    "corpus.max_duration": Key("3.0", "float", "longest synthetic utterance in seconds"),
    "model.base_channels": Key("16", "int", "audio stream width after the input convolutions"),
    "model.articulation_channels": Key("8,16,32", "ints", "3D convolution widths of each articulation stream"),
    "model.n_feature_blocks": Key("7", "int", "feature blocks per stream (7 is the reference design)"),
    "model.lstm_layers": Key("2", "int", "LSTM layers in the bottleneck (2 is the reference design)"),
    "model.lstm_hidden": Key("256", "int", "LSTM hidden size"),
    "model.mask_bound": Key("1.0", "float", "mask components are limited to [-bound, bound]"),
    "model.leaky_slope": Key("0.2", "float", "LeakyReLU negative slope"),
    "model.trace_points": Key("", "str", "comma-separated capture points; empty selects all"),
    "train.learning_rate": Key("0.001", "float", "initial Adam learning rate"),
    "train.decay_factor": Key("0.1", "float", "learning-rate multiplier on a plateau"),
    "train.plateau_patience": Key("10", "int", "epochs without improvement before decaying"),
    "train.max_epochs": Key("30", "int", "training epochs"),
    "train.batch_size": Key("4", "int", "utterances per mini-batch"),
    "train.seed": Key("0", "int", "seed for initialisation, shuffling and cropping"),
    "train.alpha": Key("1.0", "float", "weight of the spectrogram loss"),
    "train.gamma1": Key("1.0", "float", "weight of the feature MSE distillation loss"),
    "train.gamma2": Key("1.0", "float", "weight of the similarity-preserving distillation loss"),
    "train.auto_balance": Key("true", "bool", "scale auxiliary losses to the mask loss by running means"),
    "train.kd_batch_normalize": Key("true", "bool", "divide the feature MSE sum by the batch size"),
    "train.beta1": Key("0.9", "float", "Adam first-moment decay"),
    "train.beta2": Key("0.999", "float", "Adam second-moment decay"),
    "train.eps": Key("1e-08", "float", "Adam epsilon"),
    "train.grad_clip": Key("5.0", "float", "gradient-norm clip; 0 disables"),
    "train.mask_epsilon": Key("1e-08", "float", "stabiliser of the ideal-mask denominator"),
    "metrics.conditions": Key(",".join(format(s, "g") for s in EVAL_SNRS), "floats", "evaluation SNRs in dB"),
    "metrics.split": Key("test", "str", "manifest split to evaluate"),
    "metrics.include_oracle": Key("false", "bool", "also score the ideal-mask ceiling"),
    "metrics.pesq_executable": Key("", "str", "external PESQ program; empty disables PESQ"),
    "metrics.pesq_args": Key(" ".join(DEFAULT_PESQ_ARGS), "str", "PESQ arguments; {ref} and {est} are substituted"),
    "metrics.pesq_pattern": Key(DEFAULT_PESQ_PATTERN, "str", "regular expression capturing the PESQ score"),
}


def _convert(key: str, raw: str):
    kind = KEYS[key].kind
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


class RunConfig:
    """Documented defaults, overridden by a config file, overridden by ``--set``."""

    def __init__(self, values: dict[str, str] | None = None):
        self.raw = {k: v.default for k, v in KEYS.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value: str):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        _convert(key, value)
        self.raw[key] = value

    def __getitem__(self, key: str):
        return _convert(key, self.raw[key])

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))

    def apply_overrides(self, assignments) -> "RunConfig":
        for item in assignments or ():
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            self.set(key.strip(), value.strip())
        return self

    def spectral(self) -> SpectralConfig:
        return SpectralConfig(
            sample_rate=self["spectral.sample_rate"],
            win_length=self["spectral.win_length"],
            hop_length=self["spectral.hop_length"],
            fft_size=self["spectral.fft_size"],
        )

    def model(self) -> ModelConfig:
        points = tuple(p.strip() for p in self["model.trace_points"].split(",") if p.strip())
        return ModelConfig(
            base_channels=self["model.base_channels"],
            articulation_channels=self["model.articulation_channels"],
            n_feature_blocks=self["model.n_feature_blocks"],
            lstm_layers=self["model.lstm_layers"],
            lstm_hidden=self["model.lstm_hidden"],
            mask_bound=self["model.mask_bound"],
            leaky_slope=self["model.leaky_slope"],
            n_freq_bins=self.spectral().n_bins,
            trace_points=points or None,
        )

    def train(self) -> TrainConfig:
        clip = self["train.grad_clip"]
        return TrainConfig(
            learning_rate=self["train.learning_rate"],
            decay_factor=self["train.decay_factor"],
            plateau_patience=self["train.plateau_patience"],
            max_epochs=self["train.max_epochs"],
            batch_size=self["train.batch_size"],
            seed=self["train.seed"],
            weights=LossWeights(
                alpha=self["train.alpha"],
                gamma1=self["train.gamma1"],
                gamma2=self["train.gamma2"],
                auto_balance=self["train.auto_balance"],
                kd_batch_normalize=self["train.kd_batch_normalize"],
            ),
            betas=(self["train.beta1"], self["train.beta2"]),
            eps=self["train.eps"],
            grad_clip=clip if clip > 0 else None,
            mask_epsilon=self["train.mask_epsilon"],
            spectral=self.spectral(),
        )

    def pesq(self) -> PesqSettings:
        return PesqSettings(
            self["metrics.pesq_executable"] or None,
            tuple(self["metrics.pesq_args"].split()),
            self["metrics.pesq_pattern"],
        )


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = value.strip()
    return values


def describe_keys() -> str:
    width = max(len(k) for k in KEYS)
    lines = ["config keys (file lines 'key = value', or --set key=value):"]
    for key, entry in KEYS.items():
        default = entry.default if entry.default else '""'
        lines.append(f"  {key:<{width}}  default {default}  ({entry.help})")
    return "\n".join(lines)
