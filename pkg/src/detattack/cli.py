"""Command-line front end: corpus attacks, the theory grid, one-shot oracle
probes and init-perturbation generation.

Configuration layers, lowest to highest precedence: built-in defaults, an
INI config file, the DETATTACK_ORACLE / DETATTACK_OUT environment variables,
then command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import CorpusRecord, load_corpus, load_image
from .detection import Detection, GroundTruthObject, average_precision
from .initpop import (
    DEFAULT_EPSILON,
    Perturbation,
    build_mixed_population,
    load_seed_perturbation,
    save_seed_perturbation,
)
from .objective import FitnessWeights
from .oracle import (
    ImageTensor,
    OracleUnavailable,
    QueryBudget,
    SyntheticDetector,
    SyntheticDetectorSpec,
)
from .search import AttackTrace, GAParams, attack
from .subsetsel import (
    MAX_RATIO_GROUND,
    BoundReport,
    FAMILIES,
    PartitionScheme,
    SelectParams,
    dc_subset_select,
    make_instance,
)
from .tensorio import read_tensor
from .wire import WireEndpoint, WireOracle

ENV_ORACLE = "DETATTACK_ORACLE"
ENV_OUT = "DETATTACK_OUT"

INIT_MODES = ("gradient-prior", "files", "random-sign")


@dataclass(frozen=True)
class RunConfig:
    corpus: str
    oracle: str = "synthetic"
    epsilon: float = DEFAULT_EPSILON
    weights: FitnessWeights = FitnessWeights()
    params: GAParams = GAParams()
    seed: int = 0
    out_dir: str = "out"
    init_mode: str = "gradient-prior"
    init_files: tuple[str, str] | None = None
    init_iters: int = 20
    init_momentum: bool = False
    variant: str = "garsdc"
    parallel_quadrants: bool = False
    parallel_images: int = 1
    timeout: float = 30.0

    def validate(self) -> None:
        if not Path(self.corpus).exists():
            raise FileNotFoundError(f"corpus file {self.corpus} does not exist")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        if self.init_mode == "files":
            if not self.init_files or len(self.init_files) != 2:
                raise ValueError("init mode 'files' needs exactly two perturbation files")
            for p in self.init_files:
                if not Path(p).exists():
                    raise FileNotFoundError(f"init perturbation {p} does not exist")


def parse_oracle_selector(text: str, budget: QueryBudget, timeout: float):
    """Build an oracle from a selector string.

    ``synthetic`` or ``synthetic:key=value,...`` creates the deterministic
    detector; ``tcp:...``/``cmd:...`` connect to an external bridge.
    """
    if text.startswith(("tcp:", "cmd:")):
        return WireOracle(WireEndpoint.parse(text), budget, timeout)
    if text == "synthetic":
        return SyntheticDetector(SyntheticDetectorSpec(), budget)
    if text.startswith("synthetic:"):
        spec_kwargs: dict = {}
        casts = {
            "seed": int,
            "grid": int,
            "threshold": float,
            "class_count": int,
            "scale": float,
            "head": str,
        }
        for pair in text[len("synthetic:") :].split(","):
            key, _, value = pair.partition("=")
            if key not in casts:
                raise ValueError(f"unknown synthetic detector field {key!r}")
            spec_kwargs[key] = casts[key](value)
        return SyntheticDetector(SyntheticDetectorSpec(**spec_kwargs), budget)
    raise ValueError(f"unknown oracle selector {text!r}")


def _surrogates(config: RunConfig):
    base = SyntheticDetectorSpec()
    spec_a = replace(base, seed=config.seed + 101, head="skip")
    spec_b = replace(base, seed=config.seed + 202, head="chain")
    no_budget = QueryBudget(limit=1)  # gradients only; never queried
    return SyntheticDetector(spec_a, no_budget), SyntheticDetector(spec_b, no_budget)


def build_init(
    config: RunConfig, image: ImageTensor, rng: np.random.Generator
) -> tuple[Perturbation, Perturbation]:
    shape = image.pixels.shape
    if config.init_mode == "random-sign":
        return (
            Perturbation.random_signs(shape, rng, config.epsilon),
            Perturbation.random_signs(shape, rng, config.epsilon),
        )
    if config.init_mode == "files":
        return (
            load_seed_perturbation(config.init_files[0], shape, config.epsilon),
            load_seed_perturbation(config.init_files[1], shape, config.epsilon),
        )
    surrogate_a, surrogate_b = _surrogates(config)
    pair = build_mixed_population(
        image,
        surrogate_a,
        surrogate_b,
        iters=config.init_iters,
        epsilon=config.epsilon,
        momentum=config.init_momentum,
    )
    # The replace-each-step sign iteration can end on an all-zero member
    # when a surrogate saw nothing at the final iterate; a zero member can
    # never gain content from sign flips, so fall back to random signs.
    out = []
    for member in pair:
        if not np.any(member.data):
            member = Perturbation.random_signs(shape, rng, config.epsilon)
        out.append(member)
    return out[0], out[1]


@dataclass
class ImageResult:
    image_path: str
    queries: int
    final_fitness: float | None
    success: bool
    error: str | None
    gts: list[GroundTruthObject]
    clean_detections: list[Detection]
    adv_detections: list[Detection]

    def to_json(self) -> str:
        def dump_dets(dets):
            return [
                {
                    "x1": d.box.x1, "y1": d.box.y1, "x2": d.box.x2, "y2": d.box.y2,
                    "probs": [float(p) for p in d.probs],
                }
                for d in dets
            ]

        return json.dumps(
            {
                "type": "image",
                "image_path": self.image_path,
                "queries": self.queries,
                "final_fitness": self.final_fitness,
                "success": self.success,
                "error": self.error,
                "gts": [
                    [g.box.x1, g.box.y1, g.box.x2, g.box.y2, g.class_id]
                    for g in self.gts
                ],
                "clean_detections": dump_dets(self.clean_detections),
                "adv_detections": dump_dets(self.adv_detections),
            },
            separators=(",", ":"),
        )


@dataclass
class AttackReport:
    images: list[ImageResult]
    aggregate: dict = field(default_factory=dict)

    def compute_aggregate(self) -> dict:
        clean_pairs = [(r.clean_detections, r.gts) for r in self.images]
        adv_pairs = [(r.adv_detections, r.gts) for r in self.images]
        agg: dict = {"type": "aggregate", "images": len(self.images)}
        for bucket in ("all", "S", "M", "L"):
            agg[f"clean_map_{bucket}"] = average_precision(clean_pairs, 0.5, bucket)
            agg[f"adv_map_{bucket}"] = average_precision(adv_pairs, 0.5, bucket)
        agg["average_queries"] = (
            float(np.mean([r.queries for r in self.images])) if self.images else 0.0
        )
        agg["failed_images"] = sum(1 for r in self.images if r.error is not None)
        return agg

    def to_jsonl(self) -> str:
        lines = [r.to_json() for r in self.images]
        lines.append(json.dumps(self.aggregate, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)


def _attack_one(
    config: RunConfig, corpus_path: Path, index: int, record: CorpusRecord
) -> tuple[ImageResult, AttackTrace | None]:
    gts = list(record.objects)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, index)))
    try:
        image = load_image(corpus_path, record)
        # One extra query on top of the attack budget pays for the clean
        # baseline detection pass.
        oracle = parse_oracle_selector(
            config.oracle, QueryBudget(config.params.t_max + 1), config.timeout
        )
        clean_dets = oracle.detect(image)
        init = build_init(config, image, rng)
        best, trace = attack(
            image,
            gts,
            oracle,
            init,
            params=config.params,
            weights=config.weights,
            rng=rng,
            variant=config.variant,
            parallel_quadrants=config.parallel_quadrants,
        )
        result = ImageResult(
            image_path=record.image_path,
            queries=trace.queries,
            final_fitness=trace.best_fitness,
            success=trace.success,
            error=trace.error,
            gts=gts,
            clean_detections=clean_dets,
            adv_detections=trace.best_detections,
        )
        return result, trace
    except (OracleUnavailable, OSError, ValueError) as exc:
        result = ImageResult(
            image_path=record.image_path,
            queries=0,
            final_fitness=None,
            success=False,
            error=str(exc),
            gts=gts,
            clean_detections=[],
            adv_detections=[],
        )
        return result, None


def run_attack(config: RunConfig) -> AttackReport:
    """Attack every corpus image and assemble the report.

    Deterministic for a fixed seed and the synthetic oracle: each image gets
    its own random stream derived from the master seed, so the sequential
    and parallel-images modes produce identical reports.
    """
    config.validate()
    corpus_path = Path(config.corpus)
    records = load_corpus(corpus_path)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.parallel_images > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=config.parallel_images) as pool:
            outcomes = list(
                pool.map(
                    lambda pair: _attack_one(config, corpus_path, pair[0], pair[1]),
                    enumerate(records),
                )
            )
    else:
        outcomes = [
            _attack_one(config, corpus_path, idx, rec)
            for idx, rec in enumerate(records)
        ]

    report = AttackReport(images=[res for res, _ in outcomes])
    report.aggregate = report.compute_aggregate()

    (out_dir / "report.jsonl").write_text(report.to_jsonl())
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "query", "best_fitness", "event"])
        for (res, trace) in outcomes:
            if trace is None:
                continue
            stem = Path(res.image_path).stem
            (out_dir / f"trace_{stem}.jsonl").write_text(trace.to_jsonl())
            for rec in trace.records:
                writer.writerow([res.image_path, rec.query, repr(rec.best_fitness), rec.event])
    return report


@dataclass(frozen=True)
class TheoryGrid:
    ns: tuple[int, ...] = (6, 8, 10)
    zs: tuple[int, ...] = (2, 3, 4)
    blocks: tuple[int, ...] = (1, 2, 4)
    families: tuple[str, ...] = ("modular", "coverage", "facility")
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    iterations: int | None = None


@dataclass
class TheoryOutcome:
    reports: list[BoundReport]
    violations: int
    refused: list[str]
    skipped: list[str]


def run_theory(grid: TheoryGrid) -> TheoryOutcome:
    """One bound report per tractable grid cell, brute-forcing every quantity."""
    reports: list[BoundReport] = []
    refused: list[str] = []
    skipped: list[str] = []
    violations = 0
    for family in grid.families:
        if family not in FAMILIES:
            raise ValueError(f"unknown instance family {family!r}")
        for n in grid.ns:
            for z in grid.zs:
                for i in grid.blocks:
                    for seed in grid.seeds:
                        cell = f"{family}/n{n}/z{z}/i{i}/s{seed}"
                        if n > MAX_RATIO_GROUND or i > n or z > n:
                            skipped.append(cell)
                            continue
                        f = make_instance(family, n, seed)
                        if not f.monotone:
                            refused.append(cell)
                            continue
                        partition = PartitionScheme.even(n, i)
                        rng = np.random.default_rng(
                            np.random.SeedSequence((n, z, i, seed, 99))
                        )
                        _, report = dc_subset_select(
                            f, partition, z,
                            SelectParams(iterations=grid.iterations), rng,
                        )
                        reports.append(report)
                        if not (report.block_bound_holds() and report.selected_bound_holds()):
                            violations += 1
    return TheoryOutcome(reports, violations, refused, skipped)


# ---------------------------------------------------------------------------
# argument parsing


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(f"config file {path} does not exist")
    section = parser["detattack"] if parser.has_section("detattack") else parser["DEFAULT"]
    return dict(section)


def _layered(args: argparse.Namespace, file_cfg: dict, key: str, default, cast):
    """flag > environment > config file > default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key == "oracle" and os.environ.get(ENV_ORACLE):
        return os.environ[ENV_ORACLE]
    if key == "out-dir" and os.environ.get(ENV_OUT):
        return os.environ[ENV_OUT]
    if key in file_cfg:
        return cast(file_cfg[key])
    return default


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _build_run_config(args: argparse.Namespace) -> RunConfig:
    file_cfg = _load_config_file(args.config)

    def get(key, default, cast):
        return _layered(args, file_cfg, key, default, cast)

    params = GAParams(
        cr=float(get("cr", 0.8, float)),
        mr=float(get("mr", 0.3, float)),
        t_dc=int(get("t-dc", 4, int)),
        t_max=int(get("t-max", 4000, int)),
        milestones=tuple(
            int(v) for v in str(get("milestones", "20,100,400,1000,2000", str)).split(",")
        ),
    )
    weights = FitnessWeights(
        w1=float(get("w1", 0.5, float)), w2=float(get("w2", 0.5, float))
    )
    seed = get("seed", None, int)
    if seed is None:
        raise ValueError("a seed is mandatory; pass --seed or set it in the config file")
    init_files = None
    if args.init_file:
        if len(args.init_file) != 2:
            raise ValueError("pass --init-file exactly twice (one per member)")
        init_files = (args.init_file[0], args.init_file[1])
    return RunConfig(
        corpus=args.corpus,
        oracle=str(get("oracle", "synthetic", str)),
        epsilon=float(get("epsilon", DEFAULT_EPSILON, float)),
        weights=weights,
        params=params,
        seed=int(seed),
        out_dir=str(get("out-dir", "out", str)),
        init_mode=str(get("init-mode", "gradient-prior", str)),
        init_files=init_files,
        init_iters=int(get("init-iters", 20, int)),
        init_momentum=args.init_momentum or _as_bool(file_cfg.get("init-momentum", False)),
        variant=str(get("variant", "garsdc", str)),
        parallel_quadrants=args.parallel_quadrants
        or _as_bool(file_cfg.get("parallel-quadrants", False)),
        parallel_images=int(get("parallel-images", 1, int)),
        timeout=float(get("timeout", 30.0, float)),
    )


def _cmd_attack(args: argparse.Namespace) -> int:
    config = _build_run_config(args)
    report = run_attack(config)
    agg = report.aggregate
    for res in report.images:
        status = "failed" if res.error else ("success" if res.success else "done")
        print(f"{res.image_path}: {status}, queries={res.queries}, "
              f"fitness={res.final_fitness}")
    print(f"clean mAP@0.5: {agg['clean_map_all']}")
    print(f"adversarial mAP@0.5: {agg['adv_map_all']}")
    print(f"average queries: {agg['average_queries']}")
    print(f"report written to {config.out_dir}/report.jsonl")
    return 0 if agg["failed_images"] == 0 else 1


def _cmd_theory(args: argparse.Namespace) -> int:
    grid = TheoryGrid(
        ns=tuple(int(v) for v in args.n.split(",")),
        zs=tuple(int(v) for v in args.z.split(",")),
        blocks=tuple(int(v) for v in args.blocks.split(",")),
        families=tuple(args.families.split(",")),
        seeds=tuple(range(args.seeds)),
        iterations=args.iterations,
    )
    outcome = run_theory(grid)
    out_path = Path(args.out) if args.out else None
    if out_path:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(
            "".join(rep.to_json() + "\n" for rep in outcome.reports)
        )
    for cell in outcome.refused:
        print(f"refused (non-monotone): {cell}")
    for cell in outcome.skipped:
        print(f"skipped (intractable): {cell}")
    held = sum(
        1 for r in outcome.reports
        if r.block_bound_holds() and r.selected_bound_holds()
    )
    print(f"{held}/{len(outcome.reports)} cells satisfied both bounds")
    if outcome.violations:
        return 1
    if outcome.refused or outcome.skipped:
        return 2
    return 0


def _cmd_detect(args: argparse.Namespace) -> int:
    oracle = parse_oracle_selector(
        args.oracle or os.environ.get(ENV_ORACLE, "synthetic"),
        QueryBudget(limit=1),
        args.timeout,
    )
    pixels = np.clip(read_tensor(args.image).astype(np.float64), 0.0, 1.0)
    dets = oracle.detect(ImageTensor(pixels))
    for d in dets:
        print(json.dumps({
            "x1": d.box.x1, "y1": d.box.y1, "x2": d.box.x2, "y2": d.box.y2,
            "class_id": d.class_id, "score": d.score,
        }, separators=(",", ":")))
    return 0


def _cmd_seedgen(args: argparse.Namespace) -> int:
    pixels = np.clip(read_tensor(args.image).astype(np.float64), 0.0, 1.0)
    image = ImageTensor(pixels)
    rng = np.random.default_rng(args.seed)
    config = RunConfig(
        corpus=args.image,  # not used by build_init
        seed=args.seed,
        epsilon=args.epsilon,
        init_mode="random-sign" if args.random_sign else "gradient-prior",
        init_iters=args.iters,
        init_momentum=args.init_momentum,
    )
    d1, d2 = build_init(config, image, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_seed_perturbation(out / "init_1.dtf", d1)
    save_seed_perturbation(out / "init_2.dtf", d2)
    print(f"wrote {out}/init_1.dtf and {out}/init_2.dtf")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detattack",
        description="Black-box detector attack engine and theory harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="attack every image in a corpus")
    p_attack.add_argument("corpus", help="ground-truth corpus (JSON lines)")
    p_attack.add_argument("--config", help="INI config file")
    p_attack.add_argument("--oracle", help="synthetic[:k=v,...] | tcp:host:port | cmd:...")
    p_attack.add_argument("--epsilon", type=float)
    p_attack.add_argument("--w1", type=float)
    p_attack.add_argument("--w2", type=float)
    p_attack.add_argument("--cr", type=float)
    p_attack.add_argument("--mr", type=float)
    p_attack.add_argument("--t-dc", type=int, dest="t_dc")
    p_attack.add_argument("--t-max", type=int, dest="t_max")
    p_attack.add_argument("--milestones")
    p_attack.add_argument("--seed", type=int)
    p_attack.add_argument("--out-dir", dest="out_dir")
    p_attack.add_argument("--init-mode", dest="init_mode", choices=INIT_MODES)
    p_attack.add_argument("--init-file", action="append", default=[],
                          help="perturbation file; pass twice for the two members")
    p_attack.add_argument("--init-iters", type=int, dest="init_iters")
    p_attack.add_argument("--init-momentum", action="store_true")
    p_attack.add_argument("--variant", choices=("ga", "gars", "garsdc"))
    p_attack.add_argument("--parallel-quadrants", action="store_true")
    p_attack.add_argument("--parallel-images", type=int, dest="parallel_images")
    p_attack.add_argument("--timeout", type=float)
    p_attack.set_defaults(func=_cmd_attack)

    p_theory = sub.add_parser("theory", help="verify the subset-selection bounds")
    p_theory.add_argument("--n", default="6,8,10")
    p_theory.add_argument("--z", default="2,3,4")
    p_theory.add_argument("--blocks", default="1,2,4")
    p_theory.add_argument("--families", default="modular,coverage,facility")
    p_theory.add_argument("--seeds", type=int, default=4)
    p_theory.add_argument("--iterations", type=int, default=None)
    p_theory.add_argument("--out", help="write bound reports (JSON lines) here")
    p_theory.set_defaults(func=_cmd_theory)

    p_detect = sub.add_parser("detect", help="one-shot oracle probe on a tensor file")
    p_detect.add_argument("image", help="raw tensor image file")
    p_detect.add_argument("--oracle")
    p_detect.add_argument("--timeout", type=float, default=30.0)
    p_detect.set_defaults(func=_cmd_detect)

    p_seed = sub.add_parser("seedgen", help="write init perturbations for an image")
    p_seed.add_argument("image", help="raw tensor image file")
    p_seed.add_argument("--seed", type=int, required=True)
    p_seed.add_argument("--out-dir", dest="out_dir", default="out")
    p_seed.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p_seed.add_argument("--iters", type=int, default=20)
    p_seed.add_argument("--random-sign", action="store_true")
    p_seed.add_argument("--init-momentum", action="store_true")
    p_seed.set_defaults(func=_cmd_seedgen)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OracleUnavailable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
