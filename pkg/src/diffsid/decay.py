"""Gumbel noise and the two schedules that shrink it during training.

SDUD sets a single noise standard deviation from the smoothed generation
loss, ``sigma = max(0, sqrt(L_gen) - lambda)``. FrqUD keeps an EMA of code
usage per level and only perturbs codes used more than ``r / K`` of the
time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import softmax_np

EULER_GAMMA = 0.5772156649015329
# standard Gumbel(0, 1) has standard deviation pi / sqrt(6)
_UNIT_STD = math.sqrt(6.0) / math.pi

VARIANTS = ("none", "sdud", "frqud", "both")


def noise_stream(seed: int, *counters: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *counters)``."""
    key = np.random.SeedSequence([seed, *counters]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def standard_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.gumbel(0.0, 1.0, size=shape)


def scale_gumbel(standard: np.ndarray, std: float | None) -> np.ndarray:
    """Map Gumbel(0, 1) draws to the noise actually added to the logits.

    ``std=None`` keeps the raw Gumbel(0, 1) draws. A number re-centres them to
    mean zero and rescales to that standard deviation; zero gives exact zeros.
    """
    if std is None:
        return standard
    if std < 0:
        raise ValueError("noise standard deviation must be non-negative")
    if std == 0:
        return np.zeros_like(standard)
    return std * _UNIT_STD * (standard - EULER_GAMMA)


@dataclass(frozen=True)
class LevelNoise:
    """Noise applied at one quantization level.

    ``std`` follows :func:`scale_gumbel`; ``hot`` restricts the noise to the
    flagged codes (``None`` means all codes); ``active=False`` turns it off.
    """

    std: float | None = None
    hot: np.ndarray | None = None
    active: bool = True

    @property
    def deterministic(self) -> bool:
        if not self.active or self.std == 0:
            return True
        return self.hot is not None and not self.hot.any()

    def sample(self, standard: np.ndarray) -> np.ndarray:
        if self.deterministic:
            return np.zeros_like(standard)
        g = scale_gumbel(standard, self.std)
        if self.hot is not None:
            g = np.where(self.hot, g, 0.0)
        return g


@dataclass(frozen=True)
class NoiseDirective:
    levels: tuple[LevelNoise, ...]

    @classmethod
    def off(cls, m: int) -> "NoiseDirective":
        return cls(tuple(LevelNoise(active=False) for _ in range(m)))

    @classmethod
    def standard(cls, m: int) -> "NoiseDirective":
        return cls(tuple(LevelNoise() for _ in range(m)))

    @property
    def deterministic(self) -> bool:
        return all(level.deterministic for level in self.levels)


def gumbel_softmax_probs(logits, std: float | None, tau: float, standard_draws) -> np.ndarray:
    """Probabilities ``softmax((logits + g) / tau)`` with ``g`` from :func:`scale_gumbel`."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    g = scale_gumbel(np.asarray(standard_draws, dtype=np.float64), std)
    return softmax_np((logits + g) / tau)


def assign_hard(logits, noise) -> int | np.ndarray:
    """Argmax of ``logits + noise`` over the last axis; ties go to the lowest index."""
    z = np.asarray(logits, dtype=np.float64) + np.asarray(noise, dtype=np.float64)
    return np.argmax(z, axis=-1)


# ---------------------------------------------------------------------------
# SDUD


def sdud_loss(gen_loss: float, sigma: float, lam: float) -> float:
    s = sigma + lam
    if s <= 0:
        raise ValueError("sigma + lambda must be positive")
    return gen_loss / (2.0 * s * s) + math.log(s)


def sdud_sigma(gen_loss: float, lam: float) -> float:
    """Stationary point of :func:`sdud_loss`, clamped at zero."""
    return max(0.0, math.sqrt(gen_loss) - lam)


@dataclass(frozen=True)
class SdudState:
    lam: float = 1.4
    sigma: float = 0.0
    loss_ema: float | None = None
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("loss EMA decay must lie in [0, 1)")


def sdud_step(state: SdudState, gen_loss: float) -> SdudState:
    if not math.isfinite(gen_loss) or gen_loss < 0:
        raise ValueError(f"generation loss must be finite and non-negative, got {gen_loss}")
    if state.loss_ema is None:
        ema = gen_loss
    else:
        ema = gen_loss + state.ema_decay * (state.loss_ema - gen_loss)
    return replace(state, loss_ema=ema, sigma=sdud_sigma(ema, state.lam))


# ---------------------------------------------------------------------------
# FrqUD


@dataclass(frozen=True)
class FrqState:
    freqs: np.ndarray  # (levels, K), each row sums to 1
    beta: float = 0.25
    ratio: float = 1.5

    def __post_init__(self):
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.ratio <= 0:
            raise ValueError("threshold ratio must be positive")

    @classmethod
    def uniform(cls, levels: int, K: int, beta: float = 0.25, ratio: float = 1.5) -> "FrqState":
        return cls(np.full((levels, K), 1.0 / K), beta, ratio)

    @property
    def K(self) -> int:
        return self.freqs.shape[1]

    @property
    def gamma(self) -> float:
        return self.ratio / self.K


def frq_update(state: FrqState, raw) -> FrqState:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != state.freqs.shape:
        raise ValueError(f"raw frequencies have shape {raw.shape}, expected {state.freqs.shape}")
    if (raw < 0).any():
        raise ValueError("raw frequencies must be non-negative")
    if np.abs(raw.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("raw frequencies must sum to one per level")
    return replace(state, freqs=state.beta * state.freqs + (1.0 - state.beta) * raw)


def frq_partition(state: FrqState) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per level ``(hot, cold)`` index arrays; hot codes have ``f > r / K``."""
    out = []
    for f in state.freqs:
        hot = f > state.gamma
        out.append((np.flatnonzero(hot), np.flatnonzero(~hot)))
    return out


def hot_masks(state: FrqState) -> np.ndarray:
    return state.freqs > state.gamma


def frq_probs(logits, hot, tau: float, standard_draws, std: float | None = None):
    """Probabilities with Gumbel noise on hot codes only, one shared normaliser.

    Returns ``(probs, hard_code)``.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    noise = LevelNoise(std=std, hot=np.asarray(hot, dtype=bool)).sample(
        np.asarray(standard_draws, dtype=np.float64)
    )
    z = logits + noise
    return softmax_np(z / tau), np.argmax(z, axis=-1)


# ---------------------------------------------------------------------------


def decay_policy(variant: str, levels: int, sdud: SdudState | None = None, frq: FrqState | None = None) -> NoiseDirective:
    """Noise directive for one epoch of training.

    ``none``: standard Gumbel everywhere; ``sdud``: centred noise with the
    current sigma everywhere; ``frqud``: standard Gumbel on hot codes;
    ``both``: sigma-scaled noise on hot codes.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown decay variant {variant!r}; expected one of {VARIANTS}")
    if variant == "none":
        return NoiseDirective.standard(levels)
    if variant in ("sdud", "both") and sdud is None:
        raise ValueError(f"variant {variant!r} needs an SDUD state")
    if variant in ("frqud", "both") and frq is None:
        raise ValueError(f"variant {variant!r} needs an FrqUD state")
    if variant == "sdud":
        return NoiseDirective(tuple(LevelNoise(std=sdud.sigma) for _ in range(levels)))
    masks = hot_masks(frq)
    std = sdud.sigma if variant == "both" else None
    return NoiseDirective(tuple(LevelNoise(std=std, hot=masks[j]) for j in range(levels)))
