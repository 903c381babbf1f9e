"""Ablation grid runner: one train/evaluate cycle per cell, tabulated as setting / AP / AP50."""

from __future__ import annotations

import copy
import json
import logging
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from .synth import InstanceAnnotation, SceneRecord, label_records
from .train import InferConfig, TrainConfig, Trainer, evaluate

log = logging.getLogger(__name__)

BASELINE = "Mask R-CNN (mask only)"


@dataclass
class AblationRow:
    setting: str
    ap: float | None = None
    ap50: float | None = None
    status: str = "ok"
    error: str | None = None
    report: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    rows: list

    def to_json(self):
        return {
            "columns": ["setting", "AP", "AP50"],
            "rows": [
                {"setting": r.setting, "AP": r.ap, "AP50": r.ap50, "status": r.status, "error": r.error,
                 "report": r.report}
                for r in self.rows
            ],
        }

    def to_text(self):
        """Aligned text table with AP values in percent."""
        cells = [("Setting", "AP", "AP50")]
        for r in self.rows:
            if r.status == "ok":
                cells.append((r.setting, f"{100 * r.ap:.1f}", f"{100 * r.ap50:.1f}"))
            else:
                cells.append((r.setting, "failed", "failed"))
        widths = [max(len(row[i]) for row in cells) for i in range(3)]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in cells]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines)


def apply_overrides(config, overrides):
    """Copy of ``config`` with dotted-key overrides (``{"fusion.mode": "add"}``) or nested dicts."""
    d = config.to_dict()
    flat = {}
    for key, value in overrides.items():
        if isinstance(value, dict) and key in ("fusion", "model"):
            for k, v in value.items():
                flat[f"{key}.{k}"] = v
        else:
            flat[key] = value
    for key, value in flat.items():
        target = d
        parts = key.split(".")
        for p in parts[:-1]:
            target = target[p]
        if parts[-1] not in target:
            raise KeyError(f"unknown config field {key!r}")
        target[parts[-1]] = value
    return TrainConfig.from_dict(d)


def expand_grid(grid):
    """Cells as ``(setting, overrides)`` in the order given by the grid spec."""
    cells = []
    if grid.get("include_baseline"):
        cells.append((BASELINE, {"fusion.alpha": 0.0, "fusion.enabled": False, "model.keypoint": False}))
    for cell in grid.get("cells", []):
        cell = dict(cell)
        setting = str(cell.pop("setting", None) or json.dumps(cell, sort_keys=True))
        cells.append((setting, cell))
    for key, values in grid.get("vary", {}).items():
        for v in values:
            cells.append((f"{v}", {key: v}))
    return cells


def _relabel(records, config, cache):
    fc = config.fusion
    key = (fc.k, config.sampling, config.epsilon, fc.use_center, config.seed)
    if key not in cache:
        copies = [
            SceneRecord(r.image, [InstanceAnnotation(i.class_id, i.box, i.mask) for i in r.instances], r.scene_id, r.seed)
            for r in records
        ]
        cache[key] = label_records(copies, fc.k, config.sampling, config.epsilon, fc.use_center, seed=config.seed)
    return cache[key]


def run_ablation(grid, base_config, train_records, eval_records, infer_config=None, progress=None):
    """Train and evaluate one model per grid cell; failures are recorded and the run continues."""
    rows = []
    cache = {}
    for setting, overrides in expand_grid(grid):
        try:
            cfg = apply_overrides(base_config, overrides)
            train = _relabel(train_records, cfg, cache)
            held = _relabel(eval_records, cfg, cache)
            trainer = Trainer(train, cfg, keypoint=cfg.model.keypoint)
            trainer.run()
            report = evaluate(trainer.model, held, infer_config or InferConfig())
            rows.append(AblationRow(setting, report.mask_ap, report.ap50, report=report.to_dict()))
        except Exception as exc:  # noqa: BLE001 - per-cell failures are part of the result
            log.error("cell %s failed: %s", setting, exc)
            rows.append(AblationRow(setting, status="failed", error="".join(traceback.format_exception_only(exc)).strip()))
        if progress is not None:
            progress(rows[-1])
    return AblationTable(rows)


def write_table(table, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(table.to_json(), indent=2))
    (out / "ablation.txt").write_text(table.to_text() + "\n")
    return out
