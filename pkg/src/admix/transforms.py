"""Input transformations used to diversify attack gradients.

Every transform that takes an image as a :class:`~admix.tensor.Tensor` is
built from differentiable ops, so a copy produced from a watched image
carries the chain-rule factor (for example the scale ``gamma``) back into
the image gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, SamplingError, ShapeError
from .tensor import Tensor

DIM_RATIO = 330 / 299


@dataclass(frozen=True)
class TransformConfig:
    """Hyperparameters shared by the input transformations.

    ``gamma_schedule`` defaults to ``1/2**i`` for ``i < m1``.
    """

    m1: int = 5
    m2: int = 3
    eta: float = 0.2
    gamma_schedule: tuple | None = None
    dim_prob: float = 0.5
    dim_max_ratio: float = DIM_RATIO
    tim_kernel_size: int = 7
    tim_sigma_span: float = 3.0

    def __post_init__(self):
        if self.gamma_schedule is not None:
            object.__setattr__(self, "gamma_schedule", tuple(float(g) for g in self.gamma_schedule))
        if self.m1 < 1:
            raise ConfigError(f"m1 must be >= 1, got {self.m1}")
        if self.m2 < 0:
            raise ConfigError(f"m2 must be >= 0, got {self.m2}")
        if not 0.0 <= self.eta < 1.0:
            raise ConfigError(f"eta must lie in [0, 1), got {self.eta}")
        if len(self.gammas) != self.m1:
            raise ConfigError(f"gamma schedule has {len(self.gammas)} entries, m1 is {self.m1}")
        if any(not 0.0 < g <= 1.0 for g in self.gammas):
            raise ConfigError(f"every gamma must lie in (0, 1], got {self.gammas}")
        if not 0.0 <= self.dim_prob <= 1.0:
            raise ConfigError(f"dim_prob must lie in [0, 1], got {self.dim_prob}")
        if self.dim_max_ratio <= 1.0:
            raise ConfigError(f"dim_max_ratio must exceed 1, got {self.dim_max_ratio}")
        if self.tim_kernel_size < 1 or self.tim_kernel_size % 2 == 0:
            raise ConfigError(f"tim_kernel_size must be odd, got {self.tim_kernel_size}")
        if self.tim_sigma_span <= 0:
            raise ConfigError(f"tim_sigma_span must be positive, got {self.tim_sigma_span}")

    @property
    def gammas(self) -> tuple:
        if self.gamma_schedule is not None:
            return self.gamma_schedule
        return tuple(1.0 / 2 ** i for i in range(self.m1))


@dataclass
class SamplePool:
    """Images that may be mixed into an input, with their labels."""

    images: np.ndarray  # [N,C,H,W]
    labels: np.ndarray  # [N]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")

    @classmethod
    def from_dataset(cls, dataset) -> "SamplePool":
        return cls(dataset.images, dataset.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def tensor(self, i: int) -> Tensor:
        t = self._cache.get(i)
        if t is None:
            t = self._cache[i] = Tensor(self.images[i])
        return t


def sample_other_indices(pool: SamplePool, y: int, m2: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``m2`` pool images whose label differs from ``y``, drawn
    uniformly without replacement."""
    if m2 == 0:
        return np.zeros(0, dtype=np.int64)
    if len(np.unique(pool.labels)) < 2:
        raise SamplingError("sample pool needs at least two distinct labels")
    eligible = np.flatnonzero(pool.labels != y)
    if len(eligible) < m2:
        raise SamplingError(f"need {m2} images from other categories than {y}, pool has {len(eligible)}")
    return rng.choice(eligible, size=m2, replace=False)


def sample_other_category(pool: SamplePool, y: int, m2: int, rng: np.random.Generator) -> list[Tensor]:
    return [pool.tensor(int(i)) for i in sample_other_indices(pool, y, m2, rng)]


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "images differ in shape", x=list(a.shape), other=list(b.shape))


def admix(x: Tensor, x_prime: Tensor, gamma: float, eta: float) -> Tensor:
    """gamma * (x + eta * x_prime); not clipped to the pixel range."""
    _same_shape("admix", x, x_prime)
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    if not 0.0 <= eta < 1.0:
        raise ConfigError(f"eta must lie in [0, 1), got {eta}")
    return T.scale(T.add(x, T.scale(x_prime, eta)), gamma)


def admix_copies(x: Tensor, others: list[Tensor], cfg: TransformConfig) -> list[tuple[Tensor, float]]:
    """All m1 * len(others) admixed copies, ordered with the sampled image in
    the outer loop and the scale in the inner loop."""
    if not others:
        raise ConfigError("admix_copies needs at least one sampled image")
    return [(admix(x, xp, g, cfg.eta), g) for xp in others for g in cfg.gammas]


def sim_copies(x: Tensor, m: int) -> list[tuple[Tensor, float]]:
    """Scaled copies x / 2**i for i < m."""
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    return [(T.scale(x, 1.0 / 2 ** i), 1.0 / 2 ** i) for i in range(m)]


def dim_transform(x: Tensor, p: float, max_ratio: float, rng: np.random.Generator) -> Tensor:
    """Random resize and pad, applied with probability ``p``.

    For an S x S image: draw r uniformly from [S, S_max) with
    S_max = round(S * max_ratio), resize to r x r, zero-pad to S_max x S_max at
    a uniformly drawn offset, then resize back to S x S so fixed-input models
    can consume the result.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"p must lie in [0, 1], got {p}")
    if rng.random() >= p:
        return x
    h, w = x.shape[-2:]
    if h != w:
        raise ShapeError("dim_transform", "image must be square", height=h, width=w)
    size = h
    size_max = int(round(size * max_ratio))
    if size_max <= size:
        return x
    r = int(rng.integers(size, size_max))
    top = int(rng.integers(0, size_max - r + 1))
    left = int(rng.integers(0, size_max - r + 1))
    out = T.resize_nearest(x, r, r)
    out = T.pad_constant(out, top, size_max - r - top, left, size_max - r - left, 0.0)
    return T.resize_nearest(out, size, size)


@lru_cache(maxsize=None)
def _tim_kernel(k: int, sigma_span: float) -> Tensor:
    pts = np.linspace(-sigma_span, sigma_span, k)
    g = np.exp(-0.5 * pts ** 2)
    kern = np.outer(g, g)
    return Tensor(kern / kern.sum())


def tim_kernel(k: int, sigma_span: float = 3.0) -> Tensor:
    """k x k Gaussian smoothing kernel, normalised to sum to one.

    The 1-D profile samples a standard normal at k evenly spaced points in
    [-sigma_span, sigma_span]."""
    if k < 1 or k % 2 == 0:
        raise ShapeError("tim_kernel", "kernel size must be odd", k=k)
    return _tim_kernel(int(k), float(sigma_span))


def mixup_blend(x: Tensor, y: int, x2: Tensor, y2: int, lam: float,
                variant: str = "mixup", eta: float = 0.2) -> tuple[Tensor, list[tuple[int, float]]]:
    """Blend two labelled images; returns the image and a weighted label list.

    ``variant`` selects:

    * ``"mixup"``: lam*x + (1-lam)*x2 with labels [(y, lam), (y2, 1-lam)]
    * ``"mixup_wlm"``: the same image, label y only
    * ``"admix_lm"``: admix(x, x2, lam, eta) (lam acts as the scale) with
      labels [(y, 1/(1+eta)), (y2, eta/(1+eta))]
    """
    _same_shape("mixup_blend", x, x2)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if variant == "admix_lm":
        w = 1.0 / (1.0 + eta)
        return admix(x, x2, lam, eta), _merge([(y, w), (y2, 1.0 - w)])
    blended = T.add(T.scale(x, lam), T.scale(x2, 1.0 - lam))
    if variant == "mixup":
        return blended, _merge([(y, lam), (y2, 1.0 - lam)])
    if variant == "mixup_wlm":
        return blended, [(y, 1.0)]
    raise ConfigError(f"unknown mixup variant {variant!r}")


def _merge(pairs):
    out = {}
    for label, weight in pairs:
        if weight > 0:
            out[label] = out.get(label, 0.0) + weight
    return list(out.items())


def cutmix_mask(size: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean [size,size] mask of the pasted square (True = taken from x2)."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    side = int(round(size * np.sqrt(1.0 - lam)))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    mask = np.zeros((size, size), dtype=bool)
    mask[top:top + side, left:left + side] = True
    return mask


def cutmix_blend(x: Tensor, x2: Tensor, lam: float, rng: np.random.Generator) -> Tensor:
    """Paste a square patch of x2, of side round(S*sqrt(1-lam)), into x."""
    _same_shape("cutmix_blend", x, x2)
    h, w = x.shape[-2:]
    if h != w:
        raise ShapeError("cutmix_blend", "image must be square", height=h, width=w)
    mask = np.broadcast_to(cutmix_mask(h, lam, rng), x.shape)
    return T.where(mask, x2, x)
