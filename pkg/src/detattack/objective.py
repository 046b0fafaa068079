"""Attack losses: CW margins, scalarized fitness and patch-local sub-fitness.

The search maximizes ``w1 * tp_term - w2 * fp_term``: pushing true positives
toward misclassification (their margins up) while keeping existing false
positives confidently wrong (their margins down). The sub-fitness weights
each margin by how much of the detection a sampled patch covers, with an
"irrelevant" sentinel when the patch touches no detection at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detection import BoundingBox, Detection, MatchResult, coverage


@dataclass(frozen=True)
class FitnessWeights:
    w1: float = 0.5
    w2: float = 0.5

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or self.w1 + self.w2 <= 0:
            raise ValueError(f"weights must be >= 0 with positive sum, got {self}")


@dataclass(frozen=True)
class FitnessValue:
    value: float
    tp_term: float
    fp_term: float


@dataclass(frozen=True)
class SubFitness:
    """Patch-local fitness; ``value`` is None when the patch is irrelevant."""

    value: float | None = None

    @property
    def relevant(self) -> bool:
        return self.value is not None

    def sort_key(self) -> tuple[int, float]:
        # Any relevant value outranks irrelevant.
        if self.value is None:
            return (0, 0.0)
        return (1, self.value)


IRRELEVANT = SubFitness(None)


def cw_margin(probs: np.ndarray, c: int) -> float:
    """Highest non-target probability minus the target probability.

    Negative while class ``c`` dominates, positive once it is beaten.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size < 2:
        raise ValueError("need at least two classes for a margin")
    if not 0 <= c < probs.size:
        raise ValueError(f"class index {c} out of range for {probs.size} classes")
    rest = np.delete(probs, c)
    return float(rest.max() - probs[c])


def individual_fitness(
    dets: list[Detection],
    match: MatchResult,
    w: FitnessWeights = FitnessWeights(),
) -> FitnessValue:
    """Whole-image fitness of one candidate, to be maximized by the search."""
    tp_term = sum(cw_margin(dets[i].probs, dets[i].class_id) for i in match.tp_indices)
    fp_term = sum(cw_margin(dets[i].probs, dets[i].class_id) for i in match.fp_indices)
    return FitnessValue(
        value=w.w1 * tp_term - w.w2 * fp_term, tp_term=tp_term, fp_term=fp_term
    )


def subcomponent_fitness(
    dets: list[Detection],
    match: MatchResult,
    patch: BoundingBox,
    w: FitnessWeights = FitnessWeights(),
    image_size: tuple[int, int] | None = None,
) -> SubFitness:
    """Fitness restricted to a patch region.

    Each detection's margin is scaled by the fraction of its box the patch
    covers (equal to their IoU for a patch inside the box, and exactly 1 for
    a patch spanning the whole image, where this reduces to
    ``individual_fitness``). Returns the irrelevant sentinel when every
    weight is zero.
    """
    if image_size is not None:
        iw, ih = image_size
        if patch.x1 < 0 or patch.y1 < 0 or patch.x2 > iw or patch.y2 > ih:
            raise ValueError(f"patch {patch} outside image bounds {iw}x{ih}")

    weights = [coverage(d.box, patch) for d in dets]
    if not any(wgt > 0 for wgt in weights):
        return IRRELEVANT

    tp_term = sum(
        weights[i] * cw_margin(dets[i].probs, dets[i].class_id)
        for i in match.tp_indices
    )
    fp_term = sum(
        weights[i] * cw_margin(dets[i].probs, dets[i].class_id)
        for i in match.fp_indices
    )
    return SubFitness(w.w1 * tp_term - w.w2 * fp_term)
