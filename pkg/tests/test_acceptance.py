"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with ``pytest -s tests/test_acceptance.py``).

Everything here runs against the synthetic oracle only; no bridge process
is involved.
"""

import time

import numpy as np
import pytest

from detattack.corpus import load_corpus, load_image
from detattack.detection import average_precision, match_detections
from detattack.initpop import cross_entropy_objective
from detattack.objective import FitnessWeights
from detattack.oracle import (
    ImageTensor,
    QueryBudget,
    SyntheticDetector,
    SyntheticDetectorSpec,
)
from detattack.search import GAParams, attack
from detattack.subsetsel import PartitionScheme, SelectParams, dc_subset_select, make_instance
from tests.conftest import VICTIM_SPEC
from tests.test_detection import exhaustive_match, random_instance

EPSILON = 0.05


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] {name}" + (f": {detail}" if detail else ""))
    assert ok, f"{name} failed: {detail}"


def test_theory_bounds_hold_on_committed_grid():
    """Both selection bounds hold on >= 300 monotone instances, every
    quantity brute-forced, tolerance 1e-9, under 2 minutes."""
    start = time.time()
    checked = 0
    worst_block = np.inf
    worst_selected = np.inf
    for family in ("modular", "coverage", "facility"):
        for n in (6, 8, 10):
            for z in (2, 3, 4):
                for i in (1, 2, 4):
                    for seed in (0, 1, 2, 3):
                        f = make_instance(family, n, seed)
                        rng = np.random.default_rng(
                            np.random.SeedSequence((n, z, i, seed, 99))
                        )
                        _, rep = dc_subset_select(
                            f, PartitionScheme.even(n, i), z, SelectParams(), rng
                        )
                        checked += 1
                        worst_block = min(
                            worst_block, max(rep.block_best) - rep.block_bound
                        )
                        worst_selected = min(
                            worst_selected, rep.achieved - rep.selected_bound
                        )
                        assert rep.block_bound_holds(1e-9)
                        assert rep.selected_bound_holds(1e-9)
    elapsed = time.time() - start
    report(
        "theory bounds (per-block and selection)",
        checked >= 300 and elapsed < 120 and worst_block > -1e-9 and worst_selected > -1e-9,
        f"{checked} instances, worst slacks {worst_block:.3g}/{worst_selected:.3g}, "
        f"{elapsed:.1f}s",
    )


def test_matching_equals_exhaustive_oracle():
    """Greedy matching equals brute-force matching on >= 1000 random small
    instances, zero mismatches."""
    rng = np.random.default_rng(20240811)
    mismatches = 0
    for _ in range(1000):
        dets, gts = random_instance(rng)
        if match_detections(dets, gts).tp_indices != exhaustive_match(dets, gts):
            mismatches += 1
    report("matching oracle equivalence", mismatches == 0, f"{mismatches} mismatches")


def test_surrogate_gradients_match_finite_differences():
    """Analytic gradients of both surrogates match central differences to
    1e-4 relative on 100 random coordinates each."""
    rng = np.random.default_rng(5150)
    worst = 0.0
    for head, seed in (("skip", 101), ("chain", 202)):
        det = SyntheticDetector(
            SyntheticDetectorSpec(seed=seed, head=head), QueryBudget(10**7)
        )
        base = np.clip(rng.uniform(0.35, 0.75, (60, 60, 3)), 0, 1)
        grad = det.gradient(ImageTensor(base))

        def objective(arr):
            return cross_entropy_objective(det.detect(ImageTensor(arr)))

        h = 1e-5
        for _ in range(100):
            i, j, k = rng.integers(0, 60), rng.integers(0, 60), rng.integers(0, 3)
            plus, minus = base.copy(), base.copy()
            plus[i, j, k] += h
            minus[i, j, k] -= h
            fd = (objective(plus) - objective(minus)) / (2 * h)
            an = grad[i, j, k]
            scale = max(abs(fd), abs(an), 1e-6)
            worst = max(worst, abs(fd - an) / scale)
    report("surrogate gradient checks", worst < 1e-4, f"worst relative error {worst:.2e}")


class _FeasibilityAuditOracle:
    """Asserts every candidate the search submits respects the L-inf budget
    and forwards to the real oracle."""

    def __init__(self, inner, clean: ImageTensor):
        self.inner = inner
        self.clean = clean
        self.budget = inner.budget
        self.violations = 0

    def detect(self, image):
        implied = image.pixels - self.clean.pixels
        # submitted images are clamp(x + delta); the implied delta at
        # unclamped pixels bounds the real one
        if np.abs(implied).max() > EPSILON + 1e-9:
            self.violations += 1
        return self.inner.detect(image)


def test_feasibility_and_budget_invariants(demo_scenes):
    """50 seeded runs: every oracle-evaluated candidate within the budget
    ball, queries <= 4000, non-decreasing best series, zero violations."""
    params = GAParams(t_max=300)
    violations = 0
    runs = 0
    for seed in range(50):
        image, gts, init = demo_scenes[seed % len(demo_scenes)]
        audit = _FeasibilityAuditOracle(
            SyntheticDetector(VICTIM_SPEC, QueryBudget(params.t_max)), image
        )
        _, trace = attack(image, gts, audit, init, params, rng=seed)
        runs += 1
        series = [rec.best_fitness for rec in trace.records]
        if audit.violations:
            violations += 1
        if trace.queries != audit.budget.used or trace.queries > 4000:
            violations += 1
        if any(b < a for a, b in zip(series, series[1:])):
            violations += 1
    report(
        "feasibility and budget invariants",
        runs == 50 and violations == 0,
        f"{runs} runs, {violations} violations",
    )


def test_attack_halves_map_on_demo_corpus(demo_corpus_path, demo_scenes):
    """On the committed 20-image corpus (seed 7, default parameters) the
    attack cuts aggregate mAP@0.5 by at least half within the 4000-query
    budget, in under 5 minutes."""
    start = time.time()
    clean_pairs, adv_pairs = [], []
    for idx, (image, gts, init) in enumerate(demo_scenes):
        oracle = SyntheticDetector(VICTIM_SPEC, QueryBudget(4000))
        rng = np.random.default_rng(np.random.SeedSequence((7, idx)))
        _, trace = attack(image, gts, oracle, init, GAParams(), rng=rng)
        assert trace.queries <= 4000
        clean = SyntheticDetector(VICTIM_SPEC, QueryBudget(4)).detect(image)
        clean_pairs.append((clean, gts))
        adv_pairs.append((trace.best_detections, gts))
    clean_map = average_precision(clean_pairs, 0.5, "all")
    adv_map = average_precision(adv_pairs, 0.5, "all")
    elapsed = time.time() - start
    reduction = 1.0 - adv_map / clean_map
    report(
        "attack efficacy at desk scale",
        reduction >= 0.5 and elapsed < 300,
        f"mAP {clean_map:.3f} -> {adv_map:.3f} ({reduction:.0%} reduction), {elapsed:.0f}s",
    )


def test_final_fitness_beats_initial_on_demo_corpus(demo_scenes):
    """Search progress: final best strictly above both initial fitness
    values on at least 18 of the 20 committed images."""
    improved = 0
    params = GAParams(t_max=1200)
    for idx, (image, gts, init) in enumerate(demo_scenes):
        oracle = SyntheticDetector(VICTIM_SPEC, QueryBudget(params.t_max))
        rng = np.random.default_rng(np.random.SeedSequence((7, idx)))
        _, trace = attack(image, gts, oracle, init, params, rng=rng)
        initial = [rec.best_fitness for rec in trace.records[:2]]
        if trace.best_fitness > max(initial):
            improved += 1
    report(
        "search improves on the mixed init",
        improved >= 18,
        f"{improved}/20 images improved",
    )


def test_ablation_direction(demo_scenes):
    """Median final fitness over 10 seeds: GARSDC >= GARS >= GA with ties
    allowed and GARSDC strictly above GA, on the committed 4-image suite."""
    suite = demo_scenes[:4]
    params = GAParams(t_max=1500)
    medians = {}
    for variant in ("ga", "gars", "garsdc"):
        per_seed = []
        for seed in range(10):
            fits = []
            for image, gts, init in suite:
                oracle = SyntheticDetector(VICTIM_SPEC, QueryBudget(params.t_max))
                rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
                _, trace = attack(image, gts, oracle, init, params, rng=rng, variant=variant)
                fits.append(trace.best_fitness)
            per_seed.append(float(np.mean(fits)))
        medians[variant] = float(np.median(per_seed))
    ok = (
        medians["garsdc"] >= medians["gars"] >= medians["ga"]
        and medians["garsdc"] > medians["ga"]
    )
    report(
        "ablation direction",
        ok,
        "medians "
        + ", ".join(f"{k}={v:.4f}" for k, v in medians.items()),
    )


def test_determinism_of_trace_and_report(demo_corpus_path, tmp_path):
    """Identical seed and config give byte-identical traces and reports,
    including under the parallel-quadrant mode."""
    from detattack.cli import RunConfig, run_attack

    outputs = []
    for run in range(2):
        config = RunConfig(
            corpus=str(demo_corpus_path),
            seed=7,
            out_dir=str(tmp_path / f"run{run}"),
            params=GAParams(t_max=200),
            init_mode="gradient-prior",
            parallel_quadrants=True,
        )
        report_obj = run_attack(config)
        report_bytes = (tmp_path / f"run{run}" / "report.jsonl").read_bytes()
        trace_bytes = b"".join(
            sorted(p.read_bytes() for p in (tmp_path / f"run{run}").glob("trace_*.jsonl"))
        )
        outputs.append((report_obj.to_jsonl(), report_bytes, trace_bytes))
    serial_vs_parallel = []
    for parallel in (False, True):
        image, gts, init = None, None, None
        rec = load_corpus(demo_corpus_path)[0]
        image = load_image(demo_corpus_path, rec)
        gts = list(rec.objects)
        from tests.conftest import make_surrogates
        from detattack.initpop import build_mixed_population

        sa, sb = make_surrogates()
        init = build_mixed_population(image, sa, sb, iters=20)
        oracle = SyntheticDetector(VICTIM_SPEC, QueryBudget(200))
        _, trace = attack(
            image, gts, oracle, init, GAParams(t_max=200),
            rng=np.random.default_rng(3), parallel_quadrants=parallel,
        )
        serial_vs_parallel.append(trace.to_jsonl())
    ok = outputs[0] == outputs[1] and serial_vs_parallel[0] == serial_vs_parallel[1]
    report("determinism (trace and report, parallel merge)", ok)
