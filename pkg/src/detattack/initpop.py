"""Gradient-prior initial population: kernel-smoothed sign ascent on two
structurally different surrogate detectors, plus file import of externally
generated perturbations.

Each step replaces the perturbation outright with
``eps * sign(kernel * grad)`` (no accumulation across steps); the optional
momentum variant first folds the raw gradient into an L1-normalized running
velocity before smoothing and taking signs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .detection import Detection
from .oracle import ImageTensor, gradient, perturbed
from .tensorio import read_tensor, write_tensor

DEFAULT_EPSILON = 0.05

_PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Perturbation:
    """An L-infinity bounded perturbation, same shape as the image."""

    data: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"expected a (h, w, c) array, got shape {data.shape}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.abs(data).max() > self.epsilon + 1e-12:
            raise ValueError(
                f"perturbation exceeds the L-inf budget {self.epsilon}"
            )
        object.__setattr__(self, "data", data)
        data.flags.writeable = False

    @classmethod
    def zeros(cls, shape: tuple[int, int, int], epsilon: float = DEFAULT_EPSILON):
        return cls(np.zeros(shape), epsilon)

    @classmethod
    def random_signs(cls, shape, rng: np.random.Generator, epsilon: float = DEFAULT_EPSILON):
        return cls(epsilon * rng.choice([-1.0, 1.0], size=shape), epsilon)


@dataclass(frozen=True, eq=False)
class SmoothingKernel:
    """Non-negative square convolution kernel normalized to sum 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ValueError("kernel must be square with odd size")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("kernel weights must be >= 0 and sum to 1")
        object.__setattr__(self, "weights", w)
        w.flags.writeable = False

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls):
        return cls(np.ones((1, 1)))

    @classmethod
    def gaussian(cls, size: int = 5, sigma: float = 1.5):
        half = size // 2
        ax = np.arange(-half, half + 1, dtype=np.float64)
        g = np.exp(-(ax**2) / (2 * sigma**2))
        k = np.outer(g, g)
        return cls(k / k.sum())


@dataclass
class Momentum:
    """Mutable accumulator for the momentum step variant."""

    mu: float = 1.0
    velocity: np.ndarray | None = None

    def update(self, grad: np.ndarray) -> np.ndarray:
        l1 = np.abs(grad).sum()
        step = grad / l1 if l1 > 0 else grad
        if self.velocity is None:
            self.velocity = step
        else:
            self.velocity = self.mu * self.velocity + step
        return self.velocity


def cross_entropy_objective(dets: list[Detection]) -> float:
    """Sum over boxes of the log probability of each box's predicted class."""
    total = 0.0
    for det in dets:
        total += float(np.log(max(det.probs[det.class_id], _PROB_FLOOR)))
    return total


def smooth(kernel: SmoothingKernel, grad: np.ndarray) -> np.ndarray:
    """Same-padding per-channel convolution of a gradient field."""
    out = np.empty_like(grad)
    for ch in range(grad.shape[2]):
        out[:, :, ch] = convolve(grad[:, :, ch], kernel.weights, mode="constant", cval=0.0)
    return out


def ti_sign_step(
    surrogate,
    x: ImageTensor,
    delta: Perturbation,
    kernel: SmoothingKernel | None = None,
    momentum: Momentum | None = None,
) -> Perturbation:
    """One smoothed sign-ascent step on the surrogate's objective.

    Entries where the smoothed gradient is exactly zero stay zero, so the
    result is sign-valued in {-eps, 0, +eps}.
    """
    if kernel is None:
        kernel = SmoothingKernel.gaussian()
    g = gradient(surrogate, perturbed(x, delta.data))
    if momentum is not None:
        g = momentum.update(g)
    stepped = delta.epsilon * np.sign(smooth(kernel, g))
    return Perturbation(stepped, delta.epsilon)


def build_mixed_population(
    x: ImageTensor,
    surrogate_a,
    surrogate_b,
    iters: int = 20,
    epsilon: float = DEFAULT_EPSILON,
    kernel: SmoothingKernel | None = None,
    momentum: bool = False,
) -> tuple[Perturbation, Perturbation]:
    """Run the sign-ascent loop on each surrogate independently.

    The two surrogates should differ structurally (e.g. the skip vs chain
    synthetic heads) so their sign patterns diverge and seed the population
    with diversity.
    """
    shape = x.pixels.shape
    pair = []
    for surrogate in (surrogate_a, surrogate_b):
        delta = Perturbation.zeros(shape, epsilon)
        state = Momentum() if momentum else None
        for _ in range(iters):
            delta = ti_sign_step(surrogate, x, delta, kernel, state)
        pair.append(delta)
    return pair[0], pair[1]


def save_seed_perturbation(path: str | Path, delta: Perturbation) -> None:
    write_tensor(path, delta.data)


def load_seed_perturbation(
    path: str | Path,
    shape: tuple[int, int, int],
    epsilon: float = DEFAULT_EPSILON,
) -> Perturbation:
    """Read a perturbation file, validating shape and clamping to the budget."""
    data = read_tensor(path).astype(np.float64)
    if data.shape != tuple(shape):
        raise ValueError(f"{path}: shape {data.shape} does not match target {tuple(shape)}")
    peak = np.abs(data).max()
    # float32 storage puts nominal +-epsilon values a hair over the budget;
    # only genuine excursions deserve a warning
    if peak > epsilon * (1 + 1e-5):
        warnings.warn(
            f"{path}: values up to {peak:.6g} clamped to the budget {epsilon}",
            stacklevel=2,
        )
    data = np.clip(data, -epsilon, epsilon)
    return Perturbation(data, epsilon)
