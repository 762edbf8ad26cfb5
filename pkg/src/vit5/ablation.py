"""Ablation row sets, the matrix runner and the paired resolution sweep."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from . import nn
from . import tensor as T
from .config import ModelConfig
from .data import SynthSpec
from .train import TrainSpec, dataset, evaluate, spike_metrics, train

TOGGLE_COLUMNS = ("LayerScale", "RMSNorm", "SwiGLU", "RoPE", "Registers", "QK-Norm", "QKV-Bias")

# Check marks per row, columns as TOGGLE_COLUMNS. "P" marks post-norm standing in for LayerScale.
TABLE9_MARKS = {
    "Vanilla":     "NNNNNNY",
    "DeiT-III":    "YNNNNNY",
    "DINOv2":      "YNNNYNY",
    "VisionLlama": "NNYYNNY",
    "DINOv3":      "YNNNYNN",
    "NEPA":        "YNYYNYY",
    "LLaMA":       "NYYYNNN",
    "Qwen":        "NYYYNNY",
    "GPT-oss":     "PYYYNNN",
    "Gemma3":      "NYYYNYN",
    "ViT-5":       "YYNYYYN",
}

NON_TOGGLE_DIMS = ("layers", "dim", "heads", "patch", "image_size", "in_chans", "num_classes")


class AblationError(ValueError):
    pass


@dataclass(frozen=True)
class AblationRow:
    name: str
    config: ModelConfig
    setting: str = ""  # hyperparameter value for sweep rows


def marks(cfg: ModelConfig) -> str:
    t = cfg.toggles()
    out = []
    for col in TOGGLE_COLUMNS:
        v = t[col]
        out.append("P" if v == "postnorm" else ("Y" if v == "on" else "N"))
    return "".join(out)


def config_from_marks(pattern: str, base: ModelConfig) -> ModelConfig:
    ls, rms, swiglu, rope, regs, qk, bias = pattern
    registers = base.registers or 4
    return base.replace(
        layerscale={"Y": "on", "N": "off", "P": "postnorm"}[ls],
        norm="rmsnorm" if rms == "Y" else "layernorm",
        mlp="swiglu" if swiglu == "Y" else "gelu",
        rope="on" if rope == "Y" else "off",
        registers=registers if regs == "Y" else 0,
        qk_norm="on" if qk == "Y" else "off",
        qkv_bias="on" if bias == "Y" else "off",
        ape="on",
    )


def table9(base: ModelConfig | None = None) -> list[AblationRow]:
    base = base or ModelConfig()
    rows = []
    for name, pattern in TABLE9_MARKS.items():
        cfg = config_from_marks(pattern, base)
        if name == "Vanilla":
            cfg = cfg.replace(readout="mean_pool")
        rows.append(AblationRow(name, cfg))
    return rows


def table10(base: ModelConfig | None = None) -> list[AblationRow]:
    base = base or ModelConfig()
    return [
        AblationRow("remove LayerScale", base.replace(layerscale="off")),
        AblationRow("RMSNorm -> LayerNorm", base.replace(norm="layernorm")),
        AblationRow("GeLU -> SwiGLU", base.replace(mlp="swiglu")),
        AblationRow("remove 2D RoPE", base.replace(rope="off")),
        AblationRow("remove Registers", base.replace(registers=0)),
        AblationRow("remove QK-Norm", base.replace(qk_norm="off")),
        AblationRow("keep QKV-bias", base.replace(qkv_bias="on")),
        AblationRow("complete ViT-5", base),
    ]


def table1(base: ModelConfig | None = None) -> list[AblationRow]:
    base = base or ModelConfig()
    return [AblationRow("LayerScale", base.replace(layerscale="on")),
            AblationRow("post-norm", base.replace(layerscale="postnorm"))]


def table2(base: ModelConfig | None = None) -> list[AblationRow]:
    base = base or ModelConfig()
    return [AblationRow(f"LayerScale {ls} / {mlp}", base.replace(layerscale=ls, mlp=mlp))
            for ls, mlp in (("off", "gelu"), ("off", "swiglu"), ("on", "swiglu"), ("on", "gelu"))]


def table3(base: ModelConfig | None = None) -> list[AblationRow]:
    base = base or ModelConfig()
    regs = base.registers or 4
    return [AblationRow("no register", base.replace(registers=0)),
            AblationRow("vanilla registers", base.replace(registers=regs, registers_rope="none")),
            AblationRow("RoPE on registers, same base", base.replace(registers=regs, registers_rope="same_base")),
            AblationRow("RoPE on registers, high base", base.replace(registers=regs, registers_rope="high_base"))]


def table11(base: ModelConfig | None = None) -> list[AblationRow]:
    base = base or ModelConfig()
    rows = [AblationRow(f"lambda_init={v:g}", base.replace(lambda_init=v), f"{v:g}") for v in (1e-6, 1e-5, 1e-4)]
    rows += [AblationRow(f"patch_base={v:g}", base.replace(rope_bases=(v, base.rope_bases[1])), f"{v:g}")
             for v in (1e-5, 1e-4, 1e-3)]
    rows += [AblationRow(f"registers={n}", base.replace(registers=n), str(n)) for n in (4, 16, 64)]
    return rows


SUITES = {"table1": table1, "table2": table2, "table3": table3,
          "table9": table9, "table10": table10, "table11": table11}


def suite_rows(name: str, base: ModelConfig | None = None) -> list[AblationRow]:
    if name not in SUITES:
        raise AblationError(f"unknown suite {name!r}; known: {sorted(SUITES)}")
    return SUITES[name](base)


def check_homogeneous(rows: list[AblationRow]) -> None:
    if not rows:
        raise AblationError("no rows")
    ref = rows[0].config
    for r in rows[1:]:
        diff = [k for k in NON_TOGGLE_DIMS if getattr(r.config, k) != getattr(ref, k)]
        if diff:
            raise AblationError(f"row {r.name!r} differs from {rows[0].name!r} in dims {diff}")
    names = [r.name for r in rows]
    if len(set(names)) != len(names):
        raise AblationError("row names must be unique")


def _slug(name: str) -> str:
    keep = "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)
    return keep.strip("_") or "row"


def block_sparsity(model: M.Vit5Model, images: np.ndarray, threshold: float = 1e-3) -> float:
    """Mean over layers of the near-zero fraction of the scaled MLP branch output."""
    cap: dict = {}
    with T.no_grad():
        M.forward(model, images, capture=cap)
    vals = []
    for i, blk in enumerate(model.blocks):
        out = cap[i]["mlp_out"]
        if isinstance(blk.scale2, nn.LayerScaleParams):
            out = out * blk.scale2.lam.data
        vals.append(nn.gating_sparsity(out, threshold))
    return float(np.mean(vals))


def _run_row(args) -> dict:
    row, data, spec, out_dir = args
    row_dir = None if out_dir is None else Path(out_dir) / _slug(row.name)
    entry = {"name": row.name, "setting": row.setting, "marks": marks(row.config),
             "config": row.config.to_dict(), "error": None}
    try:
        model, rec = train(row.config, data, spec, out_dir=row_dir)
    except Exception as exc:  # recorded per row; the suite exits nonzero
        entry.update(error=f"{type(exc).__name__}: {exc}", nan_flag=False, steps_run=0,
                     final_loss=None, eval_accuracy=None, train_accuracy=None, spikes=0, nans=0,
                     gating_sparsity=None)
        return entry
    spikes, nans = spike_metrics(rec, spec.spike_window, spec.spike_factor)
    losses = [r["loss"] for r in rec.rows if not r["nan"]]
    sparsity = None
    if not rec.nan_flag:
        images, _ = dataset(data, "eval", data.resolution, row.config.patch)
        with T.precision(spec.precision):
            sparsity = block_sparsity(model, images[:64].astype(T.get_dtype()))
    entry.update(nan_flag=rec.nan_flag, steps_run=len(rec.rows), final_loss=losses[-1] if losses else None,
                 eval_accuracy=rec.final_eval("eval"), train_accuracy=rec.final_eval("train"),
                 spikes=spikes, nans=nans, gating_sparsity=sparsity)
    return entry


@dataclass
class AblationReport:
    suite: str
    rows: list[dict]
    data: dict
    train: dict

    @property
    def failed(self) -> list[str]:
        return [r["name"] for r in self.rows if r["error"]]

    def to_dict(self) -> dict:
        return {"suite": self.suite, "data": self.data, "train": self.train, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ("name", "setting", "marks", "eval_accuracy", "train_accuracy", "final_loss",
                "spikes", "nans", "nan_flag", "gating_sparsity", "error")
        w.writerow(cols)
        for r in self.rows:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
        return buf.getvalue()

    def render(self) -> str:
        return render_table(self.rows)

    def write(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())
        (out / "table.txt").write_text(self.render())


def render_table(rows: list[dict]) -> str:
    sym = {"Y": "✓", "N": "✗", "P": "✓*"}
    name_w = max(len("Configuration"), *(len(r["name"]) for r in rows))
    widths = [max(len(c), 2) for c in TOGGLE_COLUMNS]
    head = "Configuration".ljust(name_w) + " | " + " ".join(c.center(w) for c, w in zip(TOGGLE_COLUMNS, widths))
    head += " | Acc. (%)"
    lines = [head, "-" * len(head)]
    for r in rows:
        cells = " ".join(sym[m].center(w) for m, w in zip(r["marks"], widths))
        if r["error"]:
            acc = "error"
        elif r["nan_flag"]:
            acc = "nan"
        else:
            acc = f"{100 * r['eval_accuracy']:.2f}"
        lines.append(r["name"].ljust(name_w) + " | " + cells + " | " + acc)
    if any("P" in r["marks"] for r in rows):
        lines.append("* post-norm instead of explicit LayerScale")
    return "\n".join(lines) + "\n"


def run_ablation_matrix(rows: list[AblationRow], data: SynthSpec, spec: TrainSpec,
                        out_dir: str | os.PathLike | None = None, workers: int = 1,
                        suite: str = "custom") -> AblationReport:
    """Train every row on the same data and seed; rows may fan out to processes."""
    check_homogeneous(rows)
    jobs = [(r, data, spec, None if out_dir is None else Path(out_dir) / "rows") for r in rows]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_row, jobs))
    else:
        entries = [_run_row(j) for j in jobs]
    report = AblationReport(suite, entries, data.to_dict(), spec.to_dict())
    if out_dir is not None:
        report.write(out_dir)
    return report


# ---------------------------------------------------------------- resolution sweep

SWEEP_RESOLUTIONS = (24, 32, 48, 64)


def sweep_variants(base: ModelConfig | None = None) -> dict[str, ModelConfig]:
    """ViT-5 (APE + 2D RoPE) against its APE-only twin."""
    base = base or ModelConfig()
    return {"vit5": base.replace(rope="on", ape="on"), "ape_only": base.replace(rope="off", ape="on")}


def res_sweep(data: SynthSpec, spec: TrainSpec, resolutions=SWEEP_RESOLUTIONS,
              variants: dict[str, ModelConfig] | None = None, models: dict | None = None,
              out_dir: str | os.PathLike | None = None) -> list[dict]:
    """Train (or take from ``models``) each variant, then evaluate at every resolution."""
    variants = variants or sweep_variants()
    models = dict(models or {})
    rows = []
    for name, cfg in variants.items():
        for res in resolutions:
            if res % cfg.patch:
                raise ValueError(f"resolution {res} not divisible by patch {cfg.patch}")
        if name not in models:
            sub = None if out_dir is None else Path(out_dir) / name
            models[name], _ = train(cfg, data, spec, out_dir=sub)
        for res in resolutions:
            rows.append({"variant": name, "resolution": res,
                         "accuracy": evaluate(models[name], data, res, limit=spec.eval_samples)})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(sweep_csv(rows))
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "resolution", "accuracy"))
    for r in rows:
        w.writerow((r["variant"], r["resolution"], repr(float(r["accuracy"]))))
    return buf.getvalue()


def accuracy_drop(rows: list[dict], variant: str, train_res: int, test_res: int) -> float:
    acc = {(r["variant"], r["resolution"]): r["accuracy"] for r in rows}
    return acc[(variant, train_res)] - acc[(variant, test_res)]
