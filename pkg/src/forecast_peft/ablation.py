"""Desk-scale ablation sweeps over prompt length, adapter rank, CEP depth, and components."""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .config import PeftConfig
from .errors import ConfigError
from .params import Model
from .peft import count_parameters
from .scene import Scene
from .train import TrainConfig, run_eval, run_finetune

AXES = ("prompt_length", "adapter_rank", "cep_depth", "components")

# component toggles, cumulative as in a module ablation table
COMPONENTS = {
    "cep": dict(cep_depth=None, mcp_enabled=False, adapter_msa=False, adapter_ffn=False),
    "cep+mcp": dict(cep_depth=None, mcp_enabled=True, adapter_msa=False, adapter_ffn=False),
    "cep+mcp+pa": dict(cep_depth=None, mcp_enabled=True, adapter_msa=True, adapter_ffn=True),
    "pa": dict(cep_depth=0, mcp_enabled=False, adapter_msa=True, adapter_ffn=True),
}


def cell_config(base: PeftConfig, axis: str, value) -> PeftConfig:
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    if axis != "components":
        return base.replace(**{axis: value})
    if value not in COMPONENTS:
        raise ConfigError(f"unknown component set {value!r}; expected one of {sorted(COMPONENTS)}")
    changes = {k: (base.cep_depth if v is None else v) for k, v in COMPONENTS[value].items()}
    return base.replace(**changes)


def run_ablation(sweep: dict, pretrained: Model, train_scenes: list[Scene], eval_scenes: list[Scene],
                 base_cfg: TrainConfig, out_dir=None, log=lambda msg: None) -> list[dict]:
    """Fine-tune and evaluate one cell per swept value.

    ``sweep`` maps axis names to value lists. Returns one row per cell and,
    with ``out_dir``, writes ``ablation.json``, ``ablation.csv``, and one SVG
    line plot per axis.
    """
    if not sweep:
        raise ConfigError("empty sweep")
    rows = []
    for axis, values in sweep.items():
        for value in values:
            peft_cfg = cell_config(base_cfg.peft, axis, value)
            cfg = base_cfg.replace(peft=peft_cfg)
            result = run_finetune(cfg, pretrained, train_scenes)
            report = run_eval(result.checkpoint.model, eval_scenes)
            counts = count_parameters(result.checkpoint.model)
            row = {"axis": axis, "value": value, "trainable": counts["trainable"],
                   "additive": counts["additive"], "final_loss": result.losses[-1], **report.to_dict()}
            log(f"{axis}={value}: trainable {row['trainable']} minADE {row['minADE']:.4f}")
            rows.append(row)
    if out_dir is not None:
        write_table(rows, Path(out_dir))
    return rows


def write_table(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    plot_rows(rows, out_dir)


def plot_rows(rows: list[dict], out_dir: Path, metric: str = "minADE") -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for axis in dict.fromkeys(r["axis"] for r in rows):
        sel = [r for r in rows if r["axis"] == axis]
        labels = [str(r["value"]) for r in sel]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(range(len(sel)), [r[metric] for r in sel], marker="o")
        ax.set_xticks(range(len(sel)), labels)
        ax.set_xlabel(axis)
        ax.set_ylabel(metric)
        fig.tight_layout()
        path = out_dir / f"ablation_{axis}.svg"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


__all__ = ["AXES", "COMPONENTS", "cell_config", "run_ablation", "write_table", "plot_rows"]
