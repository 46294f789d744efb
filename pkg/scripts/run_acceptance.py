"""Run the scaled end-to-end experiments and print the measured ratios.

These take minutes to hours of CPU and are not part of the unit tests.

Usage example:
  python scripts/run_acceptance.py --experiments locality quality --out runs/acceptance
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

REPO_ROOT = Path(__file__).resolve().parents[1]
SRC_DIR = REPO_ROOT / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

from linklab.checkpoint import load_checkpoint
from linklab.cli import load_config
from linklab.evaluation import (
    ablation_sweep,
    evaluation_rng,
    evaluate,
    locality_report,
    masked_mse,
    quality_degradation,
)
from linklab.inversion import invert, local_edit
from linklab.linkreg import rect_mask
from linklab.logging_utils import configure_logging
from linklab.networks import Synthesizer
from linklab.pipeline import Trainer, load_corpus
from linklab.settings import RuntimeSettings
from linklab.synthdata import load_png_dir, sample_corpus, write_corpus
from linklab.training import init_train_state

CONFIGS = REPO_ROOT / "configs"
EXPERIMENTS = ("locality", "sweep", "quality", "tokenized", "editing", "determinism")


def _trained(name: str, out: Path) -> tuple:
    config = load_config(CONFIGS / f"{name}.json", out=out / name)
    final = Path(config.output_dir) / "final.lgl"
    state = load_checkpoint(final) if final.exists() else Trainer(config).run()
    return config, Synthesizer.from_state(state.model, chunk_size=config.eval.chunk_size)


def _check(name: str, passed: bool, detail: dict) -> bool:
    print(json.dumps({"check": name, "passed": passed, **detail}, sort_keys=True))
    return passed


def run_locality(out: Path) -> bool:
    config, trained = _trained("default", out)
    link = config.links[0]
    init = Synthesizer.from_state(init_train_state(config).model)
    results = {}
    for label, generator in (("init", init), ("trained", trained)):
        report = locality_report(
            generator, config.partition, link, config.eval.n_samples, evaluation_rng(config.seed)
        )
        results[label] = {
            "edit_in_over_out": report.mse_edit_in_e3 / max(report.mse_o_e3, 1e-12),
            "leak_in_over_edit_in": report.mse_i_e3 / max(report.mse_edit_in_e3, 1e-12),
        }
    trained_ok = (
        results["trained"]["edit_in_over_out"] >= 5.0 and results["trained"]["leak_in_over_edit_in"] <= 1 / 3
    )
    init_ok = 1 / 3 <= results["init"]["edit_in_over_out"] <= 3.0
    return _check("locality", trained_ok and init_ok, results)


def _monotone(values: list[float], increasing: bool) -> bool:
    violations = 0
    for before, after in zip(values, values[1:]):
        worse = after < before if increasing else after > before
        if worse:
            if abs(after - before) > 0.1 * max(abs(before), 1e-12):
                return False
            violations += 1
    return violations <= 1


def run_sweep(out: Path) -> bool:
    config = load_config(CONFIGS / "default.json", out=out / "sweep")
    table = ablation_sweep(config, [4, 8, 16, 32], settings=RuntimeSettings.from_env())
    mse_i = [row.mse_i_e3 for row in table.rows]
    mse_o = [row.mse_o_e3 for row in table.rows]
    passed = _monotone(mse_i, increasing=False) and _monotone(mse_o, increasing=True)
    return _check("sweep", passed, {"mse_i_e3": mse_i, "mse_o_e3": mse_o})


def run_quality(out: Path) -> bool:
    config, trained = _trained("default", out)
    warm = Synthesizer.from_state(load_checkpoint(Path(config.output_dir) / "warmstart.lgl").model)
    result = quality_degradation(
        load_corpus(config),
        trained,
        warm,
        config.eval.quality_samples,
        evaluation_rng(config.seed),
        min_samples=config.eval.min_quality_samples,
    )
    detail = {"regularized": result.regularized, "warm_start": result.warm_start, "relative": result.relative}
    return _check("quality", result.relative < 0.6, detail)


def run_tokenized(out: Path) -> bool:
    config, generator = _trained("tokenized", out)
    rng = evaluation_rng(config.seed)
    w = generator.sample_w(config.eval.n_samples, rng)
    base = generator.images(w)
    masks = [rect_mask(link.region).m2 for link in config.links]
    worst = float("inf")
    for link in config.links:
        edited = np.stack([local_edit(generator, row, link, config.partition, rng) for row in w])
        changes = [np.mean([masked_mse(e, b, m) for e, b in zip(edited, base)]) for m in masks]
        own = changes[link.fragment - 1]
        others = max(c for i, c in enumerate(changes) if i != link.fragment - 1)
        worst = min(worst, own / max(others, 1e-12))
    return _check("tokenized", worst >= 4.0, {"min_own_over_other": worst})


def run_editing(out: Path) -> bool:
    config, generator = _trained("default", out)
    link = config.links[0]
    inv = config.inversion
    rng = np.random.default_rng(config.seed)

    w0 = generator.sample_w(10, rng)
    self_mse = [
        invert(generator, generator.images(row[None])[0], inv.steps, inv.lr, rng=np.random.default_rng(i)).final_mse
        for i, row in enumerate(w0)
    ]

    data_dir = out / "editing_data"
    write_corpus(sample_corpus(config.seed + 1, 100), data_dir)
    masks = rect_mask(link.region)
    ratios = []
    for index, target in enumerate(load_png_dir(data_dir)):
        result = invert(generator, target, inv.steps, inv.lr, rng=np.random.default_rng(index))
        edited = local_edit(generator, result.w, link, config.partition, rng)
        inside = masked_mse(edited, result.reconstruction, masks.m2)
        outside = masked_mse(edited, result.reconstruction, masks.m1)
        ratios.append((inside, outside))
    inside, outside = np.mean(ratios, axis=0)
    detail = {"max_self_mse": max(self_mse), "edit_in_over_out": float(inside / max(outside, 1e-12))}
    return _check("editing", max(self_mse) < 1e-3 and detail["edit_in_over_out"] >= 5.0, detail)


def run_determinism(out: Path) -> bool:
    config = load_config(CONFIGS / "default.json", out=out / "determinism")
    final = Path(config.output_dir) / "final.lgl"
    runs = []
    for _ in range(2):
        state = Trainer(config).run()
        generator = Synthesizer.from_state(state.model, chunk_size=config.eval.chunk_size)
        report = evaluate(config, generator, real_images=load_corpus(config), checkpoint=str(final))
        runs.append((final.read_bytes(), report.model_dump_json()))
    (first_bytes, first_report), (second_bytes, second_report) = runs
    detail = {"checkpoint_identical": first_bytes == second_bytes, "report_identical": first_report == second_report}
    return _check("determinism", all(detail.values()), detail)

def main() -> None:
    parser = argparse.ArgumentParser(description="Run scaled acceptance experiments.")
    parser.add_argument("--experiments", nargs="+", choices=EXPERIMENTS, default=list(EXPERIMENTS))
    parser.add_argument("--out", type=Path, default=REPO_ROOT / "runs" / "acceptance")
    args = parser.parse_args()

    configure_logging(RuntimeSettings.from_env().log_level)
    runners = {
        "locality": run_locality,
        "sweep": run_sweep,
        "quality": run_quality,
        "tokenized": run_tokenized,
        "editing": run_editing,
        "determinism": run_determinism,
    }
    results = [runners[name](args.out) for name in args.experiments]
    sys.exit(0 if all(results) else 1)


if __name__ == "__main__":
    main()
