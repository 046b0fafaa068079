"""Black-box detector interface, budget accounting and a synthetic detector.

The synthetic detector keeps attacks cheap and deterministic: grid cells
whose mean brightness exceeds a threshold propose a box (a seeded, per-cell
inflation of the cell rectangle), and class probabilities come from a seeded
projection of the box's per-channel pixel means through a softmax. The
"chain" and "skip" head variants exist so surrogate pairs are structurally
distinct; all heads expose analytic input gradients of the summed
log-probability objective, which is what the gradient-prior initialization
ascends.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .detection import BoundingBox, Detection


class BudgetExhausted(Exception):
    """Raised when a detect call would exceed the query budget."""


class OracleUnavailable(Exception):
    """Raised when a remote oracle fails to answer."""


class UnsupportedOracle(Exception):
    """Raised when gradients are requested from a non-differentiable oracle."""


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """An image with values in [0, 1], stored as a (h, w, c) float array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or min(px.shape) < 1:
            raise ValueError(f"expected a (h, w, c) array, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)
        px.flags.writeable = False

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _trusted_image(pixels: np.ndarray) -> ImageTensor:
    # Constructor bypass for arrays already known to be valid (h, w, c) in
    # [0, 1]; clamping on the hot path guarantees that.
    image = object.__new__(ImageTensor)
    object.__setattr__(image, "pixels", pixels)
    pixels.flags.writeable = False
    return image


def perturbed(image: ImageTensor, delta: np.ndarray) -> ImageTensor:
    """The adversarial image clamp(x + delta, 0, 1)."""
    out = image.pixels + delta
    np.clip(out, 0.0, 1.0, out=out)
    return _trusted_image(out)


class QueryBudget:
    """Monotone, thread-safe query counter with a hard limit."""

    def __init__(self, limit: int = 4000):
        if limit < 0:
            raise ValueError("budget limit must be >= 0")
        self.limit = int(limit)
        self._used = 0
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return self._used

    @property
    def remaining(self) -> int:
        return self.limit - self._used

    def consume(self) -> int:
        with self._lock:
            if self._used >= self.limit:
                raise BudgetExhausted(f"query budget of {self.limit} exhausted")
            self._used += 1
            return self._used


@dataclass(frozen=True)
class SyntheticDetectorSpec:
    """Deterministic recipe for a synthetic detector.

    ``head`` selects the projection structure: "linear" (single seeded map),
    "chain" (two strictly layered maps with a tanh in between) or "skip"
    (the chain plus an additive linear shortcut).
    """

    seed: int = 7
    grid: int = 12
    threshold: float = 0.5
    class_count: int = 12
    scale: float = 12.0
    head: str = "linear"

    def __post_init__(self):
        if self.grid < 2:
            raise ValueError("grid cell size must be >= 2")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if self.head not in ("linear", "chain", "skip"):
            raise ValueError(f"unknown head {self.head!r}")


# Per-cell box inflation factors and their sampling weights; chosen so a
# corpus with 12px cells exercises the S/M/L area buckets.
_INFLATE = np.array([0.95, 2.8, 8.1])
_INFLATE_P = np.array([0.66, 0.22, 0.12])

_HIDDEN = 8  # width of the chain/skip hidden layer


class _CellModel:
    """Seeded per-cell parameters: box shape and the class projection."""

    def __init__(self, spec: SyntheticDetectorSpec, row: int, col: int, channels: int):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, row, col)))
        self.inflate = float(rng.choice(_INFLATE, p=_INFLATE_P))
        c = spec.class_count
        w1 = rng.normal(size=(_HIDDEN, channels))
        w1 /= np.linalg.norm(w1, axis=1, keepdims=True)
        w2 = rng.normal(size=(c, _HIDDEN))
        w2 /= np.linalg.norm(w2, axis=1, keepdims=True)
        skip = rng.normal(size=(c, channels))
        skip /= np.linalg.norm(skip, axis=1, keepdims=True)
        proj = rng.normal(size=(c, channels))
        proj /= np.linalg.norm(proj, axis=1, keepdims=True)
        self.w1, self.w2, self.skip, self.proj = w1, w2, skip, proj
        self.bias = rng.normal(size=c) * 0.25

    def logits(self, feat: np.ndarray, spec: SyntheticDetectorSpec) -> np.ndarray:
        v = feat - 0.5
        if spec.head == "linear":
            out = self.proj @ v
        elif spec.head == "chain":
            out = self.w2 @ np.tanh(self.w1 @ v)
        else:  # skip
            out = self.w2 @ np.tanh(self.w1 @ v) + self.skip @ v
        return spec.scale * out + self.bias

    def logit_jacobian(self, feat: np.ndarray, spec: SyntheticDetectorSpec) -> np.ndarray:
        """d logits / d feat, shape (class_count, channels)."""
        v = feat - 0.5
        if spec.head == "linear":
            jac = self.proj
        else:
            h = self.w1 @ v
            inner = (1.0 - np.tanh(h) ** 2)[:, None] * self.w1
            jac = self.w2 @ inner
            if spec.head == "skip":
                jac = jac + self.skip
        return spec.scale * jac


class SyntheticDetector:
    """Deterministic grid detector; the stand-in victim and surrogate."""

    def __init__(self, spec: SyntheticDetectorSpec, budget: QueryBudget | None = None):
        self.spec = spec
        self.budget = budget if budget is not None else QueryBudget()
        self._cells: dict[tuple[int, int, int], _CellModel] = {}

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def _cell(self, row: int, col: int, channels: int) -> _CellModel:
        key = (row, col, channels)
        model = self._cells.get(key)
        if model is None:
            model = _CellModel(self.spec, row, col, channels)
            self._cells[key] = model
        return model

    def _cell_means(self, pixels: np.ndarray) -> np.ndarray:
        """Mean brightness per grid cell, (rows, cols).

        The image is zero-padded up to a grid multiple so the sums reduce to
        one reshape; true cell areas divide the edge cells.
        """
        g = self.spec.grid
        h, w, c = pixels.shape
        rows, cols = (h + g - 1) // g, (w + g - 1) // g
        if h % g or w % g:
            padded = np.zeros((rows * g, cols * g, c))
            padded[:h, :w] = pixels
        else:
            padded = pixels
        sums = padded.reshape(rows, g, cols, g, c).sum(axis=(1, 3, 4))
        ys = np.minimum(np.arange(1, rows + 1) * g, h) - np.arange(rows) * g
        xs = np.minimum(np.arange(1, cols + 1) * g, w) - np.arange(cols) * g
        return sums / (np.outer(ys, xs) * c)

    def _proposals(self, image: ImageTensor) -> list[tuple[int, int, BoundingBox]]:
        g = self.spec.grid
        h, w = image.height, image.width
        means = self._cell_means(image.pixels)
        out = []
        for row, col in zip(*np.nonzero(means > self.spec.threshold)):
            row, col = int(row), int(col)
            y1, y2 = row * g, min((row + 1) * g, h)
            x1, x2 = col * g, min((col + 1) * g, w)
            model = self._cell(row, col, image.channels)
            cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            half = model.inflate * g / 2.0
            box = BoundingBox(
                max(0.0, cx - half),
                max(0.0, cy - half),
                min(float(w), cx + half),
                min(float(h), cy + half),
            )
            out.append((row, col, box))
        return out

    @staticmethod
    def _box_features(pixels: np.ndarray, box: BoundingBox) -> tuple[np.ndarray, tuple]:
        # Per-channel pixel means over the integer footprint of the box.
        y1, y2 = int(np.floor(box.y1)), int(np.ceil(box.y2))
        x1, x2 = int(np.floor(box.x1)), int(np.ceil(box.x2))
        region = pixels[y1:y2, x1:x2]
        feat = region.sum(axis=(0, 1)) / ((y2 - y1) * (x2 - x1))
        return feat, (y1, y2, x1, x2)

    def _raw_detections(self, image: ImageTensor):
        px = image.pixels
        out = []
        for row, col, box in self._proposals(image):
            model = self._cell(row, col, image.channels)
            feat, footprint = self._box_features(px, box)
            logits = model.logits(feat, self.spec)
            z = logits - logits.max()
            probs = np.exp(z)
            probs /= probs.sum()
            out.append((Detection(box=box, probs=probs), model, feat, footprint))
        return out

    def detect(self, image: ImageTensor) -> list[Detection]:
        """One budgeted forward pass."""
        self.budget.consume()
        return [entry[0] for entry in self._raw_detections(image)]

    def gradient(self, image: ImageTensor) -> np.ndarray:
        """Analytic pixel gradient of the summed log-probability objective.

        The objective is the sum over predicted boxes of the log probability
        of each box's predicted class; box existence and class choice are
        treated as locally constant, so this is exact away from threshold
        and argmax boundaries. Not counted against the query budget.
        """
        grad = np.zeros_like(image.pixels)
        for det, model, feat, (y1, y2, x1, x2) in self._raw_detections(image):
            c = det.class_id
            dlogit = -det.probs.copy()
            dlogit[c] += 1.0
            dfeat = model.logit_jacobian(feat, self.spec).T @ dlogit
            npix = (y2 - y1) * (x2 - x1)
            grad[y1:y2, x1:x2, :] += dfeat[None, None, :] / npix
        return grad


def detect(oracle, image: ImageTensor) -> list[Detection]:
    return oracle.detect(image)


def detect_clipped(oracle, image: ImageTensor, delta: np.ndarray) -> list[Detection]:
    """Evaluate the oracle on clamp(x + delta, 0, 1)."""
    return oracle.detect(perturbed(image, delta))


def gradient(oracle, image: ImageTensor) -> np.ndarray:
    grad_fn = getattr(oracle, "gradient", None)
    if grad_fn is None:
        raise UnsupportedOracle(f"{type(oracle).__name__} exposes no gradients")
    return grad_fn(image)


class CountingOracle:
    """Test/audit wrapper: forwards detect calls and tallies them."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    @property
    def budget(self) -> QueryBudget:
        return self.inner.budget

    @property
    def class_count(self) -> int:
        return self.inner.class_count

    def detect(self, image: ImageTensor) -> list[Detection]:
        dets = self.inner.detect(image)
        self.calls += 1
        return dets
