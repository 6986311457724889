"""Channel-layer maths: complex packing, power normalization, AWGN and SNR handling.

Noise variances are per complex symbol (summed over both quadratures), so each
real quadrature carries ``variance / 2`` and ``SNR = 10 log10(P / variance)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

SeedLike = Union[int, Sequence[int]]


class DegenerateCodeError(ValueError):
    """Raised when a code has zero energy and cannot be power-normalized."""


def derive_seed(*key: int) -> int:
    """Collapse an integer key (seed, step, index, ...) into one 63-bit seed."""
    state = np.random.SeedSequence([int(k) for k in key]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 ^ int(state[1])


def _generator(seed: SeedLike) -> torch.Generator:
    g = torch.Generator()
    if isinstance(seed, (int, np.integer)):
        g.manual_seed(int(seed))
    else:
        g.manual_seed(derive_seed(*seed))
    return g


@dataclass
class LatentCode:
    """Encoder output: ``k`` complex channel symbols per image under power budget ``P``."""

    symbols: torch.Tensor
    power_budget: float = 1.0

    @property
    def k(self) -> int:
        return self.symbols.shape[-1]

    def average_power(self) -> torch.Tensor:
        return self.symbols.abs().pow(2).mean(dim=-1)


@dataclass
class ChannelOutput:
    received: torch.Tensor
    noise_variance: Union[float, torch.Tensor]
    rng_seed: SeedLike | None = None


@dataclass
class SnrEstimate:
    true_snr: float
    estimated_snr: float
    estimation_noise_variance: float
    derived_variance: float


@dataclass
class PilotBlock:
    pilot_symbols: torch.Tensor
    received_pilots: torch.Tensor


# ---------------------------------------------------------------------------
# complex packing
# ---------------------------------------------------------------------------


def pack_complex(real_features: torch.Tensor) -> torch.Tensor:
    """Pair consecutive reals along the last axis: ``[a, b, c, d] -> [a+bi, c+di]``."""
    n = real_features.shape[-1]
    if n % 2:
        raise ValueError(f"pack_complex needs an even trailing length, got {n}")
    pairs = real_features.reshape(*real_features.shape[:-1], n // 2, 2)
    return torch.view_as_complex(pairs.contiguous())


def unpack_complex(symbols: torch.Tensor) -> torch.Tensor:
    real = torch.view_as_real(symbols)
    return real.reshape(*symbols.shape[:-1], 2 * symbols.shape[-1])


# ---------------------------------------------------------------------------
# power constraint
# ---------------------------------------------------------------------------


def normalize_power(raw_code: torch.Tensor, power: float = 1.0) -> torch.Tensor:
    """Scale each code (last axis) so that its average symbol power equals ``power``.

    ``y = raw * sqrt(k P / sum |raw_j|^2)``, applied independently to every
    leading index, so the constraint holds per image rather than per batch.
    """
    if power <= 0:
        raise ValueError(f"power budget must be positive, got {power}")
    k = raw_code.shape[-1]
    if k < 1:
        raise ValueError("cannot normalize an empty code")
    energy = raw_code.abs().pow(2).sum(dim=-1, keepdim=True)
    if bool((energy == 0).any()):
        raise DegenerateCodeError("all-zero code: power normalization is undefined")
    return raw_code * torch.sqrt(k * power / energy)


# ---------------------------------------------------------------------------
# AWGN
# ---------------------------------------------------------------------------


def complex_noise(
    shape: Sequence[int],
    variance: Union[float, torch.Tensor],
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """CN(0, variance) samples; a tensor ``variance`` broadcasts over leading axes."""
    std = torch.as_tensor(variance, dtype=dtype)
    if bool((std < 0).any()):
        raise ValueError("noise variance must be non-negative")
    std = torch.sqrt(std / 2)
    if std.ndim:
        std = std.reshape(*std.shape, *([1] * (len(shape) - std.ndim)))
    base = torch.randn(*shape, 2, generator=generator, dtype=dtype)
    return torch.view_as_complex(base) * std


def awgn(
    y: torch.Tensor,
    variance: Union[float, torch.Tensor],
    seed: SeedLike | None = None,
    generator: torch.Generator | None = None,
) -> ChannelOutput:
    """Pass complex symbols through an additive white Gaussian noise channel.

    ``variance`` may be a float or a tensor with one entry per leading row
    (per-image channels). Zero variance is a noiseless pass-through. Noise
    is drawn from ``generator`` if given, else from a fresh one seeded by
    ``seed``; gradients flow to ``y`` only.
    """
    var_t = torch.as_tensor(variance)
    if bool((var_t < 0).any()):
        raise ValueError(f"noise variance must be non-negative, got {variance}")
    if not bool((var_t > 0).any()):
        return ChannelOutput(y, variance, seed)
    if generator is None:
        generator = _generator(0 if seed is None else seed)
    real_dtype = y.real.dtype if y.is_complex() else y.dtype
    noise = complex_noise(y.shape, variance, generator, real_dtype)
    return ChannelOutput(y + noise, variance, seed)


# ---------------------------------------------------------------------------
# SNR <-> variance
# ---------------------------------------------------------------------------


def snr_to_variance(snr_db: float, power: float = 1.0) -> float:
    if power <= 0:
        raise ValueError(f"power must be positive, got {power}")
    return power * 10.0 ** (-snr_db / 10.0)


def variance_to_snr(variance: float, power: float = 1.0) -> float:
    if power <= 0 or variance <= 0:
        raise ValueError("power and variance must be positive")
    return 10.0 * math.log10(power / variance)


def perturb_snr_estimate(
    snr_db: float, estimation_var: float, seed: SeedLike, power: float = 1.0
) -> SnrEstimate:
    """Noisy receiver-side SNR estimate ``S + E`` with ``E ~ N(0, estimation_var)`` in dB.

    The decoder consumes ``derived_variance``, the channel noise variance
    solved back from the perturbed dB value.
    """
    if estimation_var < 0:
        raise ValueError(f"estimation variance must be non-negative, got {estimation_var}")
    if estimation_var == 0:
        est = float(snr_db)
    else:
        e = np.random.default_rng(seed).standard_normal()
        est = float(snr_db + math.sqrt(estimation_var) * e)
    return SnrEstimate(float(snr_db), est, float(estimation_var), snr_to_variance(est, power))


# ---------------------------------------------------------------------------
# pilots
# ---------------------------------------------------------------------------


def make_pilots(m: int = 64, seed: SeedLike = 0, power: float = 1.0) -> torch.Tensor:
    """Seeded QPSK pilot sequence of length ``m``; every symbol has power ``power``."""
    if m < 1:
        raise ValueError("pilot length must be at least 1")
    bits = np.random.default_rng(seed).integers(0, 2, size=(m, 2))
    pts = (1 - 2 * bits).astype(np.float64) * math.sqrt(power / 2)
    return torch.view_as_complex(torch.from_numpy(np.ascontiguousarray(pts)))


def transmit_pilots(
    pilots: torch.Tensor, variance: float, seed: SeedLike | None = None
) -> PilotBlock:
    return PilotBlock(pilots, awgn(pilots, variance, seed=seed).received)


def estimate_variance_from_pilots(block: PilotBlock) -> float:
    """ML noise-variance estimate ``mean |received - pilot|^2`` from known pilots."""
    p, r = block.pilot_symbols, block.received_pilots
    if p.numel() == 0:
        raise ValueError("empty pilot block")
    if p.shape != r.shape:
        raise ValueError(f"pilot/received shape mismatch: {tuple(p.shape)} vs {tuple(r.shape)}")
    return float((r - p).abs().pow(2).mean())
