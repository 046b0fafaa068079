import numpy as np
import pytest

from detattack.corpus import load_corpus, load_image, make_demo_corpus
from detattack.initpop import build_mixed_population
from detattack.oracle import QueryBudget, SyntheticDetector, SyntheticDetectorSpec

VICTIM_SPEC = SyntheticDetectorSpec()  # the committed demo victim, seed 7


def make_surrogates(base_seed: int = 0):
    """The two structurally distinct gradient surrogates used everywhere."""
    return (
        SyntheticDetector(
            SyntheticDetectorSpec(seed=base_seed + 101, head="skip"), QueryBudget(1)
        ),
        SyntheticDetector(
            SyntheticDetectorSpec(seed=base_seed + 202, head="chain"), QueryBudget(1)
        ),
    )


@pytest.fixture(scope="session")
def demo_corpus_path(tmp_path_factory):
    """The committed 20-image synthetic corpus (seed 7), regenerated
    deterministically."""
    out = tmp_path_factory.mktemp("demo_corpus")
    return make_demo_corpus(out, VICTIM_SPEC, seed=7, count=20)


@pytest.fixture(scope="session")
def demo_scenes(demo_corpus_path):
    """(image, ground truth, mixed init) triples for the demo corpus."""
    surrogate_a, surrogate_b = make_surrogates()
    scenes = []
    for record in load_corpus(demo_corpus_path):
        image = load_image(demo_corpus_path, record)
        init = build_mixed_population(image, surrogate_a, surrogate_b, iters=20)
        scenes.append((image, list(record.objects), init))
    return scenes
