"""Command-line entry point: ``vit5 <subcommand> [options]``.

Exit codes: 0 success, 1 usage, 2 validation, 3 experiment failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import ablation as A
from . import checkpoint as ckpt
from . import model as M
from . import probes
from . import tensor as T
from .config import PRESETS, ConfigError, ModelConfig, count_parameters, preset
from .data import SynthSpec, generate, read_pnm, resize_nearest, write_pnm
from .gradcheck import run_gradcheck
from .train import TrainSpec, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_FAILURE = 0, 1, 2, 3
SECTIONS = ("model", "data", "train")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------- config

def default_config() -> dict:
    return {"model": ModelConfig().to_dict(), "data": SynthSpec().to_dict(), "train": TrainSpec().to_dict()}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError([f"override {item!r} is not key=value"])
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError([f"override key {key!r} must be <{'|'.join(SECTIONS)}>.<field>"])
    section, name = parts
    if name not in cfg[section]:
        raise ConfigError([f"unknown key {key!r}"])
    cfg[section][name] = _parse_value(raw)


def merge_file(cfg: dict, path: str) -> None:
    try:
        loaded = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from None
    if not isinstance(loaded, dict):
        raise ConfigError(["config file must hold a JSON object"])
    for section, values in loaded.items():
        if section not in SECTIONS:
            raise ConfigError([f"unknown section {section!r}"])
        if not isinstance(values, dict):
            raise ConfigError([f"section {section!r} must be an object"])
        for k, v in values.items():
            if k not in cfg[section]:
                raise ConfigError([f"unknown key {section}.{k}"])
            cfg[section][k] = v


def _build(cls, values: dict, section: str):
    try:
        if cls is ModelConfig:
            return ModelConfig.from_dict(values)
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"{section}: {exc}"]) from None


def resolve(args) -> tuple[dict, ModelConfig, SynthSpec, TrainSpec]:
    cfg = default_config()
    if getattr(args, "config", None):
        merge_file(cfg, args.config)
    for item in getattr(args, "set", None) or []:
        apply_override(cfg, item)
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    model_cfg = _build(ModelConfig, cfg["model"], "model")
    data = _build(SynthSpec, cfg["data"], "data")
    spec = _build(TrainSpec, cfg["train"], "train")
    problems = []
    if model_cfg.image_size != data.resolution:
        problems.append(f"model.image_size {model_cfg.image_size} != data.resolution {data.resolution}")
    if model_cfg.num_classes != data.num_classes:
        problems.append(f"model.num_classes {model_cfg.num_classes} != data.num_classes {data.num_classes}")
    if model_cfg.in_chans != data.channels:
        problems.append(f"model.in_chans {model_cfg.in_chans} != data.channels {data.channels}")
    if problems:
        raise ConfigError(problems)
    effective = {"model": model_cfg.to_dict(), "data": data.to_dict(), "train": spec.to_dict()}
    return effective, model_cfg, data, spec


def out_dir(args, seed: int) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(path: Path, effective: dict, extra: dict | None = None) -> None:
    doc = dict(effective)
    if extra:
        doc["command"] = extra
    (path / "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    effective, model_cfg, data, spec = resolve(args)
    out = out_dir(args, spec.seed)
    echo_config(out, effective)
    _, rec = train(model_cfg, data, spec, out_dir=out, log_every=args.log_every)
    acc = rec.final_eval("eval")
    print(f"steps {len(rec.rows)}  eval_accuracy {acc}  spikes {rec.manifest['spikes']}  "
          f"nan {rec.nan_flag}  wall {rec.manifest['wall_time_s']}s  -> {out}")
    return EXIT_FAILURE if rec.nan_flag else EXIT_OK


def cmd_eval(args) -> int:
    effective, _, data, spec = resolve(args)
    out = out_dir(args, spec.seed)
    echo_config(out, effective, {"checkpoint": args.checkpoint, "resolution": args.resolution, "split": args.split})
    try:
        model = ckpt.load(args.checkpoint)
    except ckpt.CheckpointError as exc:
        raise ConfigError([str(exc)]) from None
    res = args.resolution or data.resolution
    with T.precision(spec.precision):
        acc = evaluate(model, data, res, split=args.split, limit=args.limit)
    _dump(out / "eval.json", {"resolution": res, "split": args.split, "accuracy": acc})
    print(f"accuracy {acc!r} at {res}px on {args.split}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    effective, model_cfg, data, spec = resolve(args)
    out = out_dir(args, spec.seed)
    echo_config(out, effective, {"suite": args.suite, "workers": args.workers})
    rows = A.suite_rows(args.suite, model_cfg)
    report = A.run_ablation_matrix(rows, data, spec, out_dir=out, workers=args.workers, suite=args.suite)
    print(report.render(), end="")
    if report.failed:
        print(f"rows errored: {report.failed}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_res_sweep(args) -> int:
    effective, model_cfg, data, spec = resolve(args)
    resolutions = [int(r) for r in args.resolutions.split(",")]
    out = out_dir(args, spec.seed)
    echo_config(out, effective, {"resolutions": resolutions})
    for r in resolutions:
        if r % model_cfg.patch:
            raise ConfigError([f"resolution {r} not divisible by patch {model_cfg.patch}"])
    rows = A.res_sweep(data, spec, resolutions, A.sweep_variants(model_cfg), out_dir=out)
    print(A.sweep_csv(rows), end="")
    return EXIT_OK


def _attn_image(args, model: M.Vit5Model, data: SynthSpec) -> np.ndarray:
    if args.image:
        px, maxval = read_pnm(args.image)
        img = px.astype(np.float64) / maxval
        if img.shape[0] != model.config.in_chans:
            raise ConfigError([f"image has {img.shape[0]} channels, model expects {model.config.in_chans}"])
        if args.resolution:
            img = resize_nearest(img, args.resolution)
        return img
    res = args.resolution or model.config.image_size
    return generate(data, args.split, [args.index], resolution=res, patch=model.config.patch).images[0]


def cmd_attnmap(args) -> int:
    effective, _, data, spec = resolve(args)
    out = out_dir(args, spec.seed)
    echo_config(out, effective, {"checkpoint": args.checkpoint, "layer": args.layer, "head": args.head,
                                 "query": args.query, "image": args.image, "index": args.index})
    try:
        model = ckpt.load(args.checkpoint)
    except ckpt.CheckpointError as exc:
        raise ConfigError([str(exc)]) from None
    img = _attn_image(args, model, data)
    try:
        with T.precision("f64"):
            row, grid = M.attention_row(model, img, args.layer, args.head, args.query)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    write_attention(out, model, row, grid)
    print(f"attention map {grid[0]}x{grid[1]} -> {out / 'attn.pgm'}")
    return EXIT_OK


def write_attention(out: Path, model: M.Vit5Model, row: np.ndarray, grid: tuple[int, int]) -> None:
    cfg = model.config
    patch = row[model.num_prefix:].reshape(grid)
    lo, hi = patch.min(), patch.max()
    scaled = np.zeros(grid) if hi == lo else (patch - lo) / (hi - lo)
    write_pnm(out / "attn.pgm", np.round(scaled * 255).astype(np.uint8))
    names = (["class"] if cfg.has_class_token else []) + [f"register_{k}" for k in range(cfg.registers)]
    lines = ["token,row,col,weight"]
    for name, w in zip(names, row[:model.num_prefix]):
        lines.append(f"{name},,,{float(w)!r}")
    for r in range(grid[0]):
        for c in range(grid[1]):
            lines.append(f"patch,{r},{c},{float(patch[r, c])!r}")
    (out / "attn.csv").write_text("\n".join(lines) + "\n")


def cmd_probe(args) -> int:
    effective, model_cfg, _, spec = resolve(args)
    out = out_dir(args, spec.seed)
    echo_config(out, effective, {"probe": args.kind})
    results = probes.run_probe(args.kind, model_cfg, seed=spec.seed)
    for r in results:
        print(r.line())
    _dump(out / "probe.json", [r.to_dict() for r in results])
    return EXIT_FAILURE if any(r.passed is False for r in results) else EXIT_OK


def cmd_gradcheck(args) -> int:
    scopes = [s for s in args.scope.split(",") if s]
    unknown = [s for s in scopes if s not in ("ops", "components", "model")]
    if unknown:
        raise ConfigError([f"unknown scope {s!r}" for s in unknown])
    items = run_gradcheck(scopes, seed=args.seed or 0, tol=args.tol)
    for it in items:
        status = "PASS" if it.passed else "FAIL"
        extra = f"  ({it.error})" if it.error else ""
        print(f"{it.scope:10s} {it.name:28s} {it.max_rel_error:.3e} {status}{extra}")
    bad = [it for it in items if not it.passed]
    print(f"{len(items)} items, {len(bad)} failed, tolerance {args.tol:g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "gradcheck.json", [dataclasses.asdict(it) for it in items])
    return EXIT_FAILURE if bad else EXIT_OK


def cmd_info(args) -> int:
    effective, model_cfg, _, _ = resolve(args)
    doc = {"effective": effective, "table9": {}, "presets": {}}
    for row in A.table9(model_cfg):
        doc["table9"][row.name] = {"marks": A.marks(row.config), "toggles": row.config.toggles(),
                                   "config": row.config.to_dict(), "parameters": count_parameters(row.config)}
    for name in list(PRESETS) + ["vit5-tiny"]:
        cfg = preset(name)
        doc["presets"][name] = {"layers": cfg.layers, "dim": cfg.dim, "heads": cfg.heads,
                                "registers": cfg.registers, "parameters": count_parameters(cfg)}
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="JSON file with model/data/train sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    if out:
        p.add_argument("--out", help="output directory (default ./runs/<timestamp>-<seed>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vit5", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int)
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation suite")
    _common(p)
    p.add_argument("suite", choices=sorted(A.SUITES))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("res-sweep", help="paired ViT-5 vs APE-only resolution sweep")
    _common(p)
    p.add_argument("--resolutions", default=",".join(map(str, A.SWEEP_RESOLUTIONS)))
    p.set_defaults(func=cmd_res_sweep)

    p = sub.add_parser("attnmap", help="export an attention map as PGM + CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="PGM/PPM file")
    src.add_argument("--index", type=int, default=0, help="synthetic sample index")
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--resolution", type=int)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--query", default="class", help="class | register_<k> | patch_<r>_<c>")
    p.set_defaults(func=cmd_attnmap)

    p = sub.add_parser("probe", help="invariance probes")
    _common(p)
    p.add_argument("kind", choices=probes.KINDS)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--scope", default="ops,components,model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="print effective configs for presets and the table9 rows")
    _common(p, out=False)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, A.AblationError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except T.NumericError as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
