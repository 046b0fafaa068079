"""Detector backends served over the wire protocol.

Every backend returns ``(boxes, probs)`` where ``boxes`` is a list of
``[x1, y1, x2, y2]`` and ``probs`` a matching list of full-length
probability vectors. Vectors are renormalized here so the server never
emits anything the engine's Detection invariants would reject.
"""

from __future__ import annotations

import numpy as np


class EchoModel:
    """Test double: a fixed box set for any input.

    Boxes scale with the image so they stay in bounds; probabilities are a
    deterministic function of the class count alone.
    """

    thread_safe = True

    def __init__(self, class_count: int = 12):
        self.class_count = class_count

    def detect(self, pixels: np.ndarray) -> tuple[list[list[float]], list[np.ndarray]]:
        h, w = pixels.shape[0], pixels.shape[1]
        boxes = [
            [0.1 * w, 0.1 * h, 0.45 * w, 0.5 * h],
            [0.5 * w, 0.4 * h, 0.9 * w, 0.85 * h],
        ]
        probs = []
        for idx in range(len(boxes)):
            vec = np.ones(self.class_count)
            vec[(3 * idx + 1) % self.class_count] = self.class_count
            probs.append(vec / vec.sum())
        return boxes, probs


class TorchvisionModel:
    """Adapter for torchvision detection models.

    The wrapped models expose only a post-NMS (label, score) per box, so the
    full-length vector is synthesized: the label gets the score, the rest
    share the remainder. Requires the ``torch`` extra.
    """

    thread_safe = False

    def __init__(self, name: str, device: str = "cpu", class_count: int = 91,
                 score_threshold: float = 0.05):
        import torch
        import torchvision

        factory = getattr(torchvision.models.detection, name, None)
        if factory is None:
            raise ValueError(f"unknown torchvision detection model {name!r}")
        self._torch = torch
        self.model = factory(weights="DEFAULT").to(device).eval()
        self.device = device
        self.class_count = class_count
        self.score_threshold = score_threshold

    def detect(self, pixels: np.ndarray):
        torch = self._torch
        tensor = torch.from_numpy(pixels.astype(np.float32)).permute(2, 0, 1)
        with torch.no_grad():
            output = self.model([tensor.to(self.device)])[0]
        boxes, probs = [], []
        for box, label, score in zip(
            output["boxes"].cpu().numpy(),
            output["labels"].cpu().numpy(),
            output["scores"].cpu().numpy(),
        ):
            if score < self.score_threshold:
                continue
            vec = np.full(self.class_count, (1.0 - score) / (self.class_count - 1))
            vec[int(label) % self.class_count] = score
            boxes.append([float(v) for v in box])
            probs.append(vec)
        return boxes, probs


def load_model(selector: str, class_count: int, device: str, score_threshold: float):
    """Build a backend from a selector string: ``echo`` or
    ``torchvision:<model_name>``."""
    if selector == "echo":
        return EchoModel(class_count)
    if selector.startswith("torchvision:"):
        return TorchvisionModel(
            selector.split(":", 1)[1], device, class_count, score_threshold
        )
    raise ValueError(f"unknown model selector {selector!r}")


def normalize_probs(vec: np.ndarray) -> np.ndarray:
    """Clamp and renormalize so the vector is a valid distribution."""
    vec = np.clip(np.asarray(vec, dtype=np.float64), 0.0, None)
    total = vec.sum()
    if total <= 0:
        return np.full(vec.size, 1.0 / vec.size)
    return vec / total
