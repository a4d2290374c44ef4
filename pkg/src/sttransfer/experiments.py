"""Multi-seed experiments: transfer ordering, convergence, similarity table, steering.

Every number is a pure function of the :class:`ExperimentSetup` (which holds
the root seed). Datasets are generated once per setup; model seed ``k`` is
derived from ``(root_seed, k)``. Seeds run in worker processes when
``workers > 1``; each worker regenerates the (deterministic) data itself, so
results do not depend on the worker count.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .network import NetworkConfig
from .salient import compute_maps, generate_salient_subset, select_subset
from .similarity import SimilarityReport, compare_datasets, dataset_similarity, format_table, scenario_cosine_study
from .synthdata import (
    generate_approach_scenarios,
    generate_dataset,
    generate_noise_dataset,
    generate_steering_dataset,
    get_domain,
)
from .transfer import (
    AblationFlags,
    TrainConfig,
    evaluate,
    harvest_bundle,
    init_phase2,
    phase2_config,
    train_phase1,
    train_phase2,
)

EXPERIMENTS = ("transfer-ordering", "convergence", "similarity-table", "steering")

# Fig.-4 style variants: (transfer flags, salient augmentation)
CONVERGENCE_VARIANTS = {
    "full": (AblationFlags(True, True, True), True),
    "no-lstm-transfer": (AblationFlags(True, False, False), True),
    "no-cnn-transfer": (AblationFlags(False, True, True), True),
    "no-data-aug": (AblationFlags(True, True, True), False),
}
ORDERING_VARIANTS = {
    "baseline": (AblationFlags.none(), False),
    "weights-only": (AblationFlags(True, True, True), False),
    "full": (AblationFlags(True, True, True), True),
}


@dataclass(frozen=True)
class ExperimentSetup:
    source: str = "townA"
    target: str = "townB"
    shifted: str = "townC"
    n_train: int = 2000
    n_test: int = 500
    steps: int = 15
    height: int = 24
    width: int = 32
    collision_ratio: float = 0.5
    seeds: int = 5
    root_seed: int = 0
    batch_size: int = 32
    learning_rate: float = 1e-3
    phase1_epochs: int = 5
    phase2_epochs: int = 3
    salient_ratio: float = 0.10
    test_map_ratio: float = 1.0
    convergence_threshold: float = 0.95
    convergence_max_epochs: int = 12
    steering_phase1_epochs: int = 6
    steering_phase2_epochs: int = 5
    similarity_sequences: int = 200
    similarity_pairs: int = 500
    scenario_per_level: int = 40
    workers: int = 1

    def digest(self) -> str:
        d = asdict(self)
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def model_seed(self, k: int) -> int:
        return int(np.random.SeedSequence([self.root_seed, k]).generate_state(1)[0])

    def data_seed(self, role: str) -> int:
        return int(np.random.SeedSequence([self.root_seed, *role.encode()]).generate_state(1)[0])

    def net_config(self, head: str = "classification") -> NetworkConfig:
        return NetworkConfig(frame_height=self.height, frame_width=self.width, sequence_length=self.steps, head=head)

    def train_config(self, seed: int, epochs: int, stop_at: float | None = None) -> TrainConfig:
        return TrainConfig(epochs=epochs, batch_size=self.batch_size, learning_rate=self.learning_rate, seed=seed,
                           salient_subset_ratio=self.salient_ratio, stop_at_accuracy=stop_at)


@dataclass
class ExperimentResult:
    name: str
    table: str
    data: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"experiment": self.name, **self.data}, indent=2, sort_keys=True)


class Workbench:
    """Lazily generated datasets and per-seed Phase-1 models for one setup."""

    def __init__(self, setup: ExperimentSetup):
        self.setup = setup
        self._data: dict = {}
        self._phase1: dict = {}

    def domain(self, name: str):
        return get_domain(name, self.setup.height, self.setup.width)

    def data(self, domain: str, split: str, task: str = "collision"):
        key = (domain, split, task)
        if key not in self._data:
            s = self.setup
            n = s.n_train if split == "train" else s.n_test
            seed = s.data_seed(f"{task}/{domain}/{split}")
            if task == "collision":
                self._data[key] = generate_dataset(self.domain(domain), n, s.collision_ratio, s.steps, seed)
            else:
                self._data[key] = generate_steering_dataset(self.domain(domain), n, s.steps, seed)
        return self._data[key]

    def phase1(self, k: int, task: str = "collision"):
        """(params, start hidden, history) trained on the source domain with model seed k."""
        key = (k, task)
        if key not in self._phase1:
            s = self.setup
            head = "classification" if task == "collision" else "regression"
            epochs = s.phase1_epochs if task == "collision" else s.steering_phase1_epochs
            self._phase1[key] = train_phase1(self.data(s.source, "train", task), s.net_config(head),
                                             s.train_config(s.model_seed(k), epochs))
        return self._phase1[key]


def _run_variant(wb: Workbench, k: int, flags: AblationFlags, augmented: bool, task: str,
                 epochs: int, stop_at: float | None, train_maps, eval_sets):
    s = wb.setup
    seed = s.model_seed(k)
    p1, _, _ = wb.phase1(k, task)
    bundle = harvest_bundle(p1, wb.data(s.source, "train", task), flags)
    params, h0 = init_phase2(bundle, phase2_config(p1.config, augmented), seed)
    _, hist = train_phase2(params, h0, wb.data(s.target, "train", task), train_maps if augmented else None,
                           s.train_config(seed, epochs, stop_at))
    scores = {name: evaluate(params, h0, ds, maps if augmented else None).value for name, (ds, maps) in eval_sets.items()}
    return hist, scores


def _maps(wb: Workbench, k: int, task: str, with_tests: bool = True):
    """Salient maps from the Phase-1 model: a random subset of target training data, and test sets."""
    s = wb.setup
    p1, h1, _ = wb.phase1(k, task)
    seed = s.model_seed(k)
    train = generate_salient_subset(p1, wb.data(s.target, "train", task), s.salient_ratio, seed, h1)
    tests = {}
    for dom in (s.target, s.shifted) if with_tests else ():
        ds = wb.data(dom, "test", task)
        idx = select_subset(len(ds), s.test_map_ratio, seed + 1)
        tests[dom] = compute_maps(p1, [ds[i] for i in idx], h1)
    return train, tests


def _ordering_seed(wb: Workbench, k: int) -> dict:
    s = wb.setup
    train_maps, test_maps = _maps(wb, k, "collision")
    evals = {"in_domain": (wb.data(s.target, "test"), test_maps[s.target]),
             "shifted": (wb.data(s.shifted, "test"), test_maps[s.shifted])}
    out = {}
    for name, (flags, aug) in ORDERING_VARIANTS.items():
        _, scores = _run_variant(wb, k, flags, aug, "collision", s.phase2_epochs, None, train_maps, evals)
        out[name] = scores
    return out


def _convergence_seed(wb: Workbench, k: int) -> dict:
    s = wb.setup
    train_maps, _ = _maps(wb, k, "collision", with_tests=False)
    out = {}
    variants = {"scratch": (AblationFlags.none(), False), **CONVERGENCE_VARIANTS}
    for name, (flags, aug) in variants.items():
        hist, _ = _run_variant(wb, k, flags, aug, "collision", s.convergence_max_epochs,
                               s.convergence_threshold, train_maps, {})
        reached = hist.epochs_to(s.convergence_threshold)
        out[name] = {
            # a run that never reaches the threshold counts as max_epochs + 1
            "epochs_to_threshold": reached if reached is not None else s.convergence_max_epochs + 1,
            "reached": reached is not None,
            "train_accuracy": hist.train_metric,
        }
    return out


def _steering_seed(wb: Workbench, k: int) -> dict:
    s = wb.setup
    train_maps, test_maps = _maps(wb, k, "steering")
    evals = {"in_domain": (wb.data(s.target, "test", "steering"), test_maps[s.target]),
             "shifted": (wb.data(s.shifted, "test", "steering"), test_maps[s.shifted])}
    out = {}
    for name, (flags, aug) in ORDERING_VARIANTS.items():
        _, scores = _run_variant(wb, k, flags, aug, "steering", s.steering_phase2_epochs, None, train_maps, evals)
        out[name] = scores
    return out


_SEED_FNS = {"transfer-ordering": _ordering_seed, "convergence": _convergence_seed, "steering": _steering_seed}


def _seed_worker(args) -> dict:
    name, setup, k, precision = args
    T.set_precision(precision)
    return _SEED_FNS[name](Workbench(setup), k)


def _per_seed(name: str, wb: Workbench) -> list[dict]:
    s = wb.setup
    results = []
    if s.workers > 1 and s.seeds > 1:
        jobs = [(name, s, k, T.get_precision()) for k in range(s.seeds)]
        with ProcessPoolExecutor(max_workers=min(s.workers, s.seeds)) as pool:
            futures = [pool.submit(_seed_worker, j) for j in jobs]
            for k, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise RuntimeError(f"{name}: seed index {k} (model seed {s.model_seed(k)}) failed: {exc}") from exc
        return results
    for k in range(s.seeds):
        try:
            results.append(_SEED_FNS[name](wb, k))
        except Exception as exc:
            raise RuntimeError(f"{name}: seed index {k} (model seed {s.model_seed(k)}) failed: {exc}") from exc
    return results


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def _summarise(per_seed: list[dict], variants, columns) -> tuple[dict, list[list]]:
    summary, rows = {}, []
    for v in variants:
        summary[v] = {}
        row = [v]
        for c in columns:
            m, sd = _mean_std([r[v][c] for r in per_seed])
            summary[v][c] = {"mean": m, "std": sd}
            row.append(f"{m:.4f} +/- {sd:.4f}")
        rows.append(row)
    return summary, rows


def run_transfer_ordering(wb: Workbench) -> ExperimentResult:
    s = wb.setup
    per_seed = _per_seed("transfer-ordering", wb)
    summary, rows = _summarise(per_seed, ORDERING_VARIANTS, ("in_domain", "shifted"))
    table = format_table(["variant", f"in-domain ({s.target}) acc", f"shifted ({s.shifted}) acc"], rows)
    gap = summary["full"]["shifted"]["mean"] - summary["baseline"]["shifted"]["mean"]
    return ExperimentResult("transfer-ordering", table, {
        "setup": asdict(s), "per_seed": per_seed, "summary": summary, "full_minus_baseline_shifted": gap,
    })


def run_convergence(wb: Workbench) -> ExperimentResult:
    s = wb.setup
    per_seed = _per_seed("convergence", wb)
    variants = ["scratch", *CONVERGENCE_VARIANTS]
    summary, rows = _summarise(per_seed, variants, ("epochs_to_threshold",))
    for v, row in zip(variants, rows):
        row.append(sum(r[v]["reached"] for r in per_seed))
    table = format_table(["variant", f"epochs to {s.convergence_threshold:.0%} train acc", "seeds reached"], rows)
    curves = {v: [r[v]["train_accuracy"] for r in per_seed] for v in variants}
    return ExperimentResult("convergence", table, {
        "setup": asdict(s), "per_seed": per_seed, "summary": summary, "curves": curves,
    })


def run_steering(wb: Workbench) -> ExperimentResult:
    s = wb.setup
    per_seed = _per_seed("steering", wb)
    summary, rows = _summarise(per_seed, ORDERING_VARIANTS, ("in_domain", "shifted"))
    table = format_table(["variant", f"in-domain ({s.target}) MAE deg", f"shifted ({s.shifted}) MAE deg"], rows)
    return ExperimentResult("steering", table, {"setup": asdict(s), "per_seed": per_seed, "summary": summary})


def run_similarity_table(wb: Workbench) -> ExperimentResult:
    """Cosine/FID/SSIM across the built-in domains, plus the hidden-state scenario study.

    Uses the seed-0 Phase-1 model. ``<domain>'`` denotes a second, independently
    seeded sample of the same domain.
    """
    s = wb.setup
    p1, h1, _ = wb.phase1(0)
    n = s.similarity_sequences
    dom = {}
    for name in (s.source, s.target, s.shifted):
        dom[name] = generate_dataset(wb.domain(name), n, s.collision_ratio, s.steps, s.data_seed(f"sim/{name}"))
    resampled = generate_dataset(wb.domain(s.source), n, s.collision_ratio, s.steps, s.data_seed(f"sim/{s.source}/2"))
    for seq in resampled:
        seq.domain_id = f"{s.source}'"
    noise = generate_noise_dataset(n, s.steps, s.height, s.width, s.data_seed("sim/noise"))
    names = list(dom)
    pairs = [(dom[s.source], resampled)]
    pairs += [(dom[a], dom[b]) for i, a in enumerate(names) for b in names[i + 1 :]]
    pairs.append((dom[s.source], noise))
    seed = s.data_seed("sim/pairs")
    report = SimilarityReport(model_checksum=p1.checksum())
    report.pairs = [compare_datasets(p1, a, b, s.similarity_pairs, seed) for a, b in pairs]

    refs, probes = generate_approach_scenarios(wb.domain(s.source), s.scenario_per_level, s.steps,
                                               s.data_seed("sim/scenarios"))
    report.scenarios = scenario_cosine_study(p1, refs, probes, h1)
    ordering = {
        "same_domain": dataset_similarity(p1, dom[s.source], resampled, s.similarity_pairs, seed),
        "cross_domain": dataset_similarity(p1, dom[s.source], dom[s.target], s.similarity_pairs, seed),
        "noise": dataset_similarity(p1, dom[s.source], noise, s.similarity_pairs, seed),
    }
    return ExperimentResult("similarity-table", report.to_table(), {
        "setup": asdict(s), "report": report.to_dict(), "cosine_ordering": ordering,
    })


RUNNERS = {
    "transfer-ordering": run_transfer_ordering,
    "convergence": run_convergence,
    "similarity-table": run_similarity_table,
    "steering": run_steering,
}


def run_experiment(name: str, setup: ExperimentSetup, wb: Workbench | None = None) -> ExperimentResult:
    if name not in RUNNERS:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    wb = wb or Workbench(setup)
    if wb.setup != setup:
        raise ValueError("workbench was built for a different setup")
    with T.precision("float32"):
        return RUNNERS[name](wb)


def default_workers() -> int:
    return max(1, min(5, os.cpu_count() or 1))
