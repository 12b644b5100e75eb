"""Training objectives for the teacher (mask + spectrogram MSE) and the
distilled student (adds feature MSE and frame-wise similarity preservation).

Feature traces are sequences of ``(name, tensor)`` pairs with tensors laid
out ``batch x channels x frames x features``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

Trace = Sequence[tuple[str, torch.Tensor]]


@dataclass
class LossWeights:
    alpha: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    auto_balance: bool = True
    # divide the feature-MSE sum by the batch size
    kd_batch_normalize: bool = True

    def __post_init__(self):
        for name in ("alpha", "gamma1", "gamma2"):
            value = float(getattr(self, name))
            if not (value >= 0 and value < float("inf")):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: dimension mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_mask(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every real/imag component."""
    _same_shape(pred, target, "loss_mask")
    return torch.mean((pred - target) ** 2)


def loss_stft(pred: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, clean, "loss_stft")
    return torch.mean((pred - clean) ** 2)


def loss_teacher(l_mask, l_stft, weights: LossWeights):
    return l_mask + weights.alpha * l_stft


def _check_aligned(trace_t: Trace, trace_s: Trace):
    if len(trace_t) != len(trace_s):
        raise ValueError(f"trace lengths differ: {len(trace_t)} vs {len(trace_s)}")
    for (name_t, ft), (name_s, fs) in zip(trace_t, trace_s):
        if name_t != name_s:
            raise ValueError(f"trace layer names differ: {name_t!r} vs {name_s!r}")
        if ft.shape != fs.shape:
            raise ValueError(
                f"layer {name_t!r}: teacher shape {tuple(ft.shape)} != student shape {tuple(fs.shape)}"
            )


def loss_kd_mse(trace_t: Trace, trace_s: Trace, batch_normalize: bool = True) -> torch.Tensor:
    """Sum over layers of the summed squared feature difference, over ``b``."""
    _check_aligned(trace_t, trace_s)
    total = sum(((ft - fs) ** 2).sum() for (_, ft), (_, fs) in zip(trace_t, trace_s))
    if batch_normalize and trace_t:
        total = total / trace_t[0][1].shape[0]
    return total


def frame_features(layer: torch.Tensor, j: int) -> torch.Tensor:
    """Frame ``j`` of a ``b x c x t x f`` map flattened channel-major to ``b x (c*f)``."""
    b, c, t, f = layer.shape
    if not 0 <= j < t:
        raise IndexError(f"frame {j} out of range for {t} frames")
    return layer[:, :, j, :].reshape(b, c * f)


def _row_normalize(g: torch.Tensor) -> torch.Tensor:
    sq = (g**2).sum(dim=-1, keepdim=True)
    nonzero = sq > 0
    # keep the gradient finite on all-zero rows
    norm = torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq)))
    return torch.where(nonzero, g / norm, torch.zeros_like(g))


def similarity_matrix(a: torch.Tensor) -> torch.Tensor:
    """Row-L2-normalised Gram matrix ``A A^T`` of a ``b x f'`` matrix."""
    return _row_normalize(a @ a.transpose(-1, -2))


def frame_similarities(layer: torch.Tensor) -> torch.Tensor:
    """All per-frame similarity matrices of a layer, shape ``t x b x b``."""
    b, c, t, f = layer.shape
    frames = layer.permute(2, 0, 1, 3).reshape(t, b, c * f)
    return similarity_matrix(frames)


def loss_spkd(trace_t: Trace, trace_s: Trace) -> torch.Tensor:
    _check_aligned(trace_t, trace_s)
    if not trace_t:
        return torch.zeros(())
    b = trace_t[0][1].shape[0]
    total = sum(
        ((frame_similarities(ft) - frame_similarities(fs)) ** 2).sum()
        for (_, ft), (_, fs) in zip(trace_t, trace_s)
    )
    return total / b**2


class LossBalancer:
    """Running means used to bring every auxiliary term to the mask loss scale.

    The returned divisors are plain floats, so they act as constants for
    back-propagation.
    """

    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def update(self, terms: dict[str, torch.Tensor]) -> dict[str, float]:
        self.count += 1
        for key, value in terms.items():
            self.sums[key] = self.sums.get(key, 0.0) + float(value.detach())
        ref = self.sums["mask"]
        divisors = {}
        for key, total in self.sums.items():
            if key == "mask":
                continue
            divisors[key] = total / ref if ref > 0 and total > 0 else 1.0
        return divisors


def loss_student(l_mask, l_stft, l_kd_mse, l_spkd, weights: LossWeights,
                 balancer: LossBalancer | None = None):
    """Mask loss plus the weighted, optionally balanced, auxiliary terms.

    ``l_kd_mse`` and ``l_spkd`` may be ``None`` when their weight is 0.
    """
    terms = {"stft": (weights.alpha, l_stft), "kd_mse": (weights.gamma1, l_kd_mse),
             "spkd": (weights.gamma2, l_spkd)}
    active = {k: v for k, (w, v) in terms.items() if w != 0 and v is not None}
    divisors = {}
    if weights.auto_balance and balancer is not None:
        divisors = balancer.update({"mask": l_mask, **active})
    total = l_mask
    for key, value in active.items():
        total = total + terms[key][0] * value / divisors.get(key, 1.0)
    return total
