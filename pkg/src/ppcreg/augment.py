"""Domain-randomization style augmentation of DRRs.

Pipeline: min-max normalize to [0, 1], gamma, brightness, optional
inversion, seeded Gaussian noise, clamp to [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .drr import Image2D
from .errors import InvalidArgumentError

GAMMA_RANGE = (0.5, 2.0)
BRIGHTNESS_RANGE = (-0.2, 0.2)
INVERT_PROB = 0.5
SIGMA_RANGE = (0.0, 0.05)


def make_rng(*key: int) -> np.random.Generator:
    """PCG64 generator for an integer key, e.g. ``(dataset_seed, sample_index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class StyleAugmentation:
    gamma: float = 1.0
    brightness: float = 0.0
    invert: bool = False
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise InvalidArgumentError("gamma must be > 0")
        if not self.noise_sigma >= 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StyleAugmentation:
        return cls(float(d["gamma"]), float(d["brightness"]), bool(d["invert"]),
                   float(d["noise_sigma"]), int(d["seed"]))


def normalize(data) -> np.ndarray:
    """Min-max normalization; a constant image maps to zeros."""
    a = np.asarray(data, dtype=float)
    lo, hi = a.min(), a.max()
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def apply(img: Image2D, aug: StyleAugmentation) -> Image2D:
    x = normalize(img.data) ** aug.gamma
    x = x + aug.brightness
    if aug.invert:
        x = 1.0 - x
    if aug.noise_sigma > 0:
        x = x + aug.noise_sigma * make_rng(aug.seed).standard_normal(x.shape)
    return Image2D(np.clip(x, 0.0, 1.0), img.pixel_spacing, "augmented")


def sample_augmentation(rng_seed, gamma_range=GAMMA_RANGE, brightness_range=BRIGHTNESS_RANGE,
                        invert_prob=INVERT_PROB, sigma_range=SIGMA_RANGE) -> StyleAugmentation:
    """Draw augmentation parameters from a PCG64 stream keyed by ``rng_seed``.

    ``rng_seed`` is an int or a tuple of ints. The noise seed of the result is
    drawn from the same stream, so one key fixes every output byte.
    """
    key = rng_seed if isinstance(rng_seed, (tuple, list)) else (rng_seed,)
    rng = make_rng(*key)
    gamma = rng.uniform(*gamma_range)
    brightness = rng.uniform(*brightness_range)
    invert = bool(rng.random() < invert_prob)
    sigma = rng.uniform(*sigma_range)
    seed = int(rng.integers(0, 2**63 - 1))
    return StyleAugmentation(float(gamma), float(brightness), invert, float(sigma), seed)
