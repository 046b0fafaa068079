"""Ground-truth corpus files and a deterministic synthetic demo corpus.

A corpus is a line-delimited text file: one JSON record per image with an
``image_path`` (relative to the corpus file, raw tensor format) and
``boxes`` as ``[x1, y1, x2, y2, class_id]`` rows.

The demo corpus renders flat-background images with a few bright rectangles
(objects) and a few dim ones (latent false-positive sites just under the
detector threshold), then labels each image with the synthetic detector's
own clean detections, so the clean corpus scores a perfect mAP and attack
damage is measured against an exact baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detection import BoundingBox, GroundTruthObject
from .oracle import ImageTensor, QueryBudget, SyntheticDetector, SyntheticDetectorSpec
from .tensorio import read_tensor, write_tensor


@dataclass(frozen=True)
class CorpusRecord:
    image_path: str
    objects: tuple[GroundTruthObject, ...]


def save_corpus(path: str | Path, records: list[CorpusRecord]) -> None:
    lines = []
    for rec in records:
        boxes = [
            [g.box.x1, g.box.y1, g.box.x2, g.box.y2, g.class_id]
            for g in rec.objects
        ]
        lines.append(
            json.dumps({"image_path": rec.image_path, "boxes": boxes},
                       separators=(",", ":"))
        )
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_corpus(path: str | Path) -> list[CorpusRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        objects = tuple(
            GroundTruthObject(BoundingBox(b[0], b[1], b[2], b[3]), int(b[4]))
            for b in payload["boxes"]
        )
        records.append(CorpusRecord(payload["image_path"], objects))
    return records


def load_image(corpus_path: str | Path, record: CorpusRecord) -> ImageTensor:
    img_path = Path(corpus_path).parent / record.image_path
    return ImageTensor(np.clip(read_tensor(img_path).astype(np.float64), 0.0, 1.0))


def _render_image(
    rng: np.random.Generator, width: int, height: int, channels: int
) -> np.ndarray:
    img = np.full((height, width, channels), 0.30)
    # A few bright object rectangles, sized around the detector grid so each
    # triggers one to a handful of cells; kept sparse so sampled patches
    # miss objects most of the time.
    for _ in range(3):
        w = int(rng.integers(14, 26))
        h = int(rng.integers(14, 26))
        x = int(rng.integers(0, max(1, width - w)))
        y = int(rng.integers(0, max(1, height - h)))
        shade = rng.uniform(0.53, 0.67, size=channels)
        img[y : y + h, x : x + w] = shade
    # Dim rectangles parked just below the proposal threshold; with the
    # right perturbation sign these become fresh false positives.
    for _ in range(int(rng.integers(3, 6))):
        w = int(rng.integers(12, 20))
        h = int(rng.integers(12, 20))
        x = int(rng.integers(0, max(1, width - w)))
        y = int(rng.integers(0, max(1, height - h)))
        img[y : y + h, x : x + w] = rng.uniform(0.44, 0.49, size=channels)
    return np.clip(img, 0.0, 1.0)


def make_demo_corpus(
    out_dir: str | Path,
    spec: SyntheticDetectorSpec = SyntheticDetectorSpec(),
    seed: int = 7,
    count: int = 20,
    width: int = 120,
    height: int = 120,
    channels: int = 3,
) -> Path:
    """Write images plus ground truth labelled by the detector itself.

    Returns the path of the corpus file. Fully determined by (spec, seed,
    count, dims).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    detector = SyntheticDetector(spec, QueryBudget(limit=count * 4))
    records = []
    for idx in range(count):
        rng = np.random.default_rng(np.random.SeedSequence((seed, idx)))
        pixels = _render_image(rng, width, height, channels)
        name = f"img_{idx:03d}.dtf"
        write_tensor(out_dir / name, pixels)
        image = ImageTensor(np.clip(read_tensor(out_dir / name).astype(np.float64), 0.0, 1.0))
        dets = detector.detect(image)
        objects = tuple(
            GroundTruthObject(d.box, d.class_id) for d in dets
        )
        records.append(CorpusRecord(name, objects))
    corpus_path = out_dir / "corpus.jsonl"
    save_corpus(corpus_path, records)
    return corpus_path
