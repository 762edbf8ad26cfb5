"""AdamW training loop, cosine schedule, run records and spike counting."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from . import tensor as T
from .config import ModelConfig
from .data import SynthSpec, generate
from .rng import Rng
from .tensor import NumericError

CSV_HEADER = ("step", "loss", "lr", "grad_norm", "spike", "nan")


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup: int = 50
    steps: int = 500
    batch: int = 32
    seed: int = 0
    precision: str = "f32"
    spike_lr_multiplier: float = 1.0
    min_lr_ratio: float = 0.01
    clip_norm: float | None = 1.0
    eval_every: int = 0  # 0: only at the end
    eval_samples: int = 512
    spike_window: int = 50
    spike_factor: float = 2.0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.steps < 1 or not 0 <= self.warmup <= self.steps:
            raise ValueError("need steps >= 1 and 0 <= warmup <= steps")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")

    @property
    def peak_lr(self) -> float:
        return self.lr * self.spike_lr_multiplier

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(spec: TrainSpec, step: int) -> float:
    """Linear warmup to the peak, then cosine to ``peak * min_lr_ratio`` at the last step."""
    peak = spec.peak_lr
    if step < spec.warmup:
        return peak * step / spec.warmup
    span = spec.steps - 1 - spec.warmup
    t = (step - spec.warmup) / span if span > 0 else 1.0
    if t <= 0.0:
        return peak
    low = peak * spec.min_lr_ratio
    if t >= 1.0:
        return low
    return low + (peak - low) * 0.5 * (1.0 + math.cos(math.pi * t))


def decays(name: str, t: T.Tensor) -> bool:
    return t.ndim == 2 and "norm" not in name and name not in ("ape", "registers", "cls_token")


class AdamW:
    def __init__(self, params: dict[str, T.Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
        self.params = params
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            dt = p.data.dtype.type
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= dt(self.b1)
            m += dt(1 - self.b1) * g
            v *= dt(self.b2)
            v += dt(1 - self.b2) * (g * g)
            upd = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            decay = dt(1 - lr * self.wd) if decays(k, p) else dt(1)
            p.data = p.data * decay - dt(lr) * upd


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows], dtype=np.float64)

    @property
    def nan_flag(self) -> bool:
        return any(r["nan"] for r in self.rows)

    def final_eval(self, split: str = "eval") -> float | None:
        for e in reversed(self.evals):
            if e["split"] == split:
                return e["accuracy"]
        return None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r["step"], repr(float(r["loss"])), repr(float(r["lr"])), repr(float(r["grad_norm"])),
                        int(r["spike"]), int(r["nan"])])
        return buf.getvalue()

    def evals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("step", "split", "resolution", "accuracy"))
        for e in self.evals:
            w.writerow([e["step"], e["split"], e["resolution"], repr(float(e["accuracy"]))])
        return buf.getvalue()

    def write(self, out_dir: str | os.PathLike) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "evals.csv").write_text(self.evals_csv())
        # wall time stays in memory so reruns give byte-identical files
        persisted = {k: v for k, v in self.manifest.items() if k != "wall_time_s"}
        (out / "run.json").write_text(json.dumps(persisted, indent=1, sort_keys=True) + "\n")

    @classmethod
    def read(cls, out_dir: str | os.PathLike) -> "RunRecord":
        out = Path(out_dir)
        rows = []
        with open(out / "metrics.csv") as f:
            for r in csv.DictReader(f):
                rows.append({"step": int(r["step"]), "loss": float(r["loss"]), "lr": float(r["lr"]),
                             "grad_norm": float(r["grad_norm"]), "spike": bool(int(r["spike"])),
                             "nan": bool(int(r["nan"]))})
        evals = []
        if (out / "evals.csv").exists():
            with open(out / "evals.csv") as f:
                for e in csv.DictReader(f):
                    evals.append({"step": int(e["step"]), "split": e["split"],
                                  "resolution": int(e["resolution"]), "accuracy": float(e["accuracy"])})
        manifest = json.loads((out / "run.json").read_text()) if (out / "run.json").exists() else {}
        return cls(rows, evals, manifest)


def _is_spike(history: list[float], loss: float, window: int, factor: float) -> bool:
    if not history or not math.isfinite(loss):
        return False
    return loss > factor * float(np.median(history[-window:]))


def spike_metrics(record: RunRecord | list[float], window: int = 50, factor: float = 2.0) -> tuple[int, int]:
    """(spikes, nans): a spike is a loss above ``factor`` x the median of the previous ``window``."""
    if window < 1 or factor <= 1:
        raise ValueError("need window >= 1 and factor > 1")
    if isinstance(record, RunRecord):
        losses = list(record.losses)
        nans = sum(1 for r in record.rows if r["nan"])
    else:
        losses = [float(x) for x in record]
        nans = sum(1 for x in losses if not math.isfinite(x))
    spikes = 0
    history: list[float] = []
    for x in losses:
        if _is_spike(history, x, window, factor):
            spikes += 1
        if math.isfinite(x):
            history.append(x)
    return spikes, nans


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@lru_cache(maxsize=16)
def _split_arrays(spec: SynthSpec, split: str, resolution: int, patch: int) -> tuple[np.ndarray, np.ndarray]:
    b = generate(spec, split, range(spec.split_size(split)), resolution=resolution, patch=patch)
    b.images.setflags(write=False)
    return b.images, b.labels


def dataset(spec: SynthSpec, split: str, resolution: int | None = None, patch: int = 4):
    return _split_arrays(spec, split, spec.resolution if resolution is None else resolution, patch)


def evaluate(model: M.Vit5Model | str | os.PathLike, data: SynthSpec, resolution: int | None = None,
             split: str = "eval", limit: int | None = None) -> float:
    """Top-1 accuracy on ``split`` rendered at ``resolution``."""
    if not isinstance(model, M.Vit5Model):
        model = ckpt.load(model)
    res = data.resolution if resolution is None else resolution
    if res % model.config.patch:
        raise ValueError(f"resolution {res} not divisible by patch {model.config.patch}")
    images, labels = dataset(data, split, res, model.config.patch)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    dtype = T.get_dtype()
    preds = M.predict(model, images.astype(dtype, copy=False))
    return float(np.mean(preds == labels))


def _batch_indices(spec: TrainSpec, data: SynthSpec, step: int) -> np.ndarray:
    return Rng(spec.seed).split("batch", step).integers(0, data.train_size, size=spec.batch)


def train(model_cfg: ModelConfig, data: SynthSpec, spec: TrainSpec, out_dir: str | os.PathLike | None = None,
          log_every: int = 0) -> tuple[M.Vit5Model, RunRecord]:
    """Train from scratch; deterministic in (model_cfg, data, spec).

    A non-finite loss or activation halts the run and sets the ``nan`` column;
    it is not raised.
    """
    if model_cfg.image_size != data.resolution:
        raise ValueError(f"model image_size {model_cfg.image_size} != data resolution {data.resolution}")
    if model_cfg.num_classes != data.num_classes or model_cfg.in_chans != data.channels:
        raise ValueError("model classes/channels do not match the data spec")
    started = time.time()
    record = RunRecord()
    with T.precision(spec.precision):
        model = M.build(model_cfg, Rng(spec.seed).split("init"))
        images, labels = dataset(data, "train", data.resolution, model_cfg.patch)
        opt = AdamW(model.params, spec.beta1, spec.beta2, spec.eps, spec.weight_decay)
        dtype = T.get_dtype()
        history: list[float] = []
        for step in range(spec.steps):
            lr = lr_at(spec, step)
            idx = _batch_indices(spec, data, step)
            for p in model.params.values():
                p.grad = None
            try:
                logits = M.forward(model, images[idx].astype(dtype, copy=False))
                loss = T.cross_entropy_with_logits(logits, labels[idx])
                loss_v = float(loss.data)
                if not math.isfinite(loss_v):
                    raise NumericError("loss", step=step)
                loss.backward()
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for k, p in model.params.items()}
                gnorm = global_norm(grads)
                if not math.isfinite(gnorm):
                    raise NumericError("gradient", step=step)
            except NumericError:
                record.rows.append({"step": step, "loss": float("nan"), "lr": lr, "grad_norm": float("nan"),
                                    "spike": False, "nan": True})
                break
            spike = _is_spike(history, loss_v, spec.spike_window, spec.spike_factor)
            history.append(loss_v)
            record.rows.append({"step": step, "loss": loss_v, "lr": lr, "grad_norm": gnorm,
                                "spike": spike, "nan": False})
            if spec.clip_norm is not None and gnorm > spec.clip_norm:
                c = dtype(spec.clip_norm / (gnorm + 1e-6))
                grads = {k: g * c for k, g in grads.items()}
            opt.step(grads, lr)
            if log_every and step % log_every == 0:
                print(f"step {step:5d} loss {loss_v:.4f} lr {lr:.2e} |g| {gnorm:.3f}", flush=True)
            if spec.eval_every and (step + 1) % spec.eval_every == 0 and step + 1 < spec.steps:
                record.evals.append({"step": step + 1, "split": "eval", "resolution": data.resolution,
                                     "accuracy": evaluate(model, data, limit=spec.eval_samples)})
        last = record.rows[-1]["step"] + 1 if record.rows else 0
        if not record.nan_flag:
            for split in ("train", "eval"):
                record.evals.append({"step": last, "split": split, "resolution": data.resolution,
                                     "accuracy": evaluate(model, data, split=split, limit=spec.eval_samples)})
    spikes, nans = spike_metrics(record, spec.spike_window, spec.spike_factor)
    record.manifest = {
        "config_hash": _hash(model_cfg.to_dict()),
        "data_hash": _hash(data.to_dict()),
        "seed": spec.seed,
        "model": model_cfg.to_dict(),
        "data": data.to_dict(),
        "train": spec.to_dict(),
        "steps_run": len(record.rows),
        "spikes": spikes,
        "nans": nans,
        "wall_time_s": round(time.time() - started, 3),
    }
    if out_dir is not None:
        record.write(out_dir)
        ckpt.save(model, Path(out_dir) / "checkpoint")
    return model, record
