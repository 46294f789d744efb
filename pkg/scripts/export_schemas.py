"""Export versioned JSON Schema contracts from Pydantic models.

Usage:
  python scripts/export_schemas.py [--out-dir schemas]
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import import_module
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parents[1]
SRC_DIR = REPO_ROOT / "src"
if str(SRC_DIR) not in sys.path:
    sys.path.insert(0, str(SRC_DIR))

CONTRACTS = {
    "ExperimentConfigV1": "experiment_config.v1.json",
    "EvalReportV1": "eval_report.v1.json",
    "InversionResultV1": "inversion_result.v1.json",
    "TrainLogRecordV1": "train_log_record.v1.json",
    "SceneFactorsV1": "scene_factors.v1.json",
}


def write_schema(model: type, output_path: Path) -> None:
    """Write one model schema to disk with stable formatting."""
    schema = model.model_json_schema(by_alias=True)
    output_path.write_text(json.dumps(schema, indent=2, ensure_ascii=True) + "\n", encoding="utf-8")


def export_all(out_dir: Path) -> list[Path]:
    models_module = import_module("linklab.models")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, filename in CONTRACTS.items():
        path = out_dir / filename
        write_schema(getattr(models_module, name), path)
        written.append(path)
    return written


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Export contract JSON Schemas.")
    parser.add_argument("--out-dir", type=Path, default=REPO_ROOT / "schemas")
    args = parser.parse_args(argv)
    written = export_all(args.out_dir)
    print("Exported " + ", ".join(path.name for path in written))


if __name__ == "__main__":
    main()
