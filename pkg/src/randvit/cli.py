"""Command-line entry point.

Subcommands: train, evaluate, flops, attnmap, sample-demo, sweep.

Configuration is a flat key/value text format with dotted sections
(``model.dim = 128``); CLI flags override file values, and the fully
resolved configuration is echoed to ``<out>/manifest`` before any compute
runs.  The manifest is itself a valid config file, so re-running with
``--config out/manifest`` reproduces a run bit for bit.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (ROLLOUT_REDUCES, attention_rollout, count_flops,
                       render_heatmap, work_efficiency)
from .data import (Dataset, load_binary_corpus, normalize, read_pnm,
                   resize_bilinear, synth_glyphs, write_pnm)
from .errors import (BadCheckpoint, BadConfig, BadDim, BadImage,
                     DivisionByZeroGuard, EmptySample, EmptySplit,
                     NonDivisibleImage, NonFiniteGradient, NonStochasticInput,
                     OutOfBounds, RandVitError, SchemaMismatch, ShapeMismatch,
                     TruncatedFile)
from .model import (MODES, PRESETS, VitConfig, forward, load_checkpoint)
from .sampling import (GRID, PatchGeometry, RunStreams, grid_coords,
                       random_coords, token_count)
from .train import TrainConfig, evaluate, train_run

_CONFIG_ERRORS = (BadConfig, BadDim, EmptySample)
_DATA_ERRORS = (SchemaMismatch, TruncatedFile, BadImage, EmptySplit,
                BadCheckpoint, NonDivisibleImage)
_NUMERIC_ERRORS = (NonFiniteGradient, NonStochasticInput, OutOfBounds,
                   DivisionByZeroGuard, ShapeMismatch)

DEFAULTS = {
    "model.preset": "tiny",
    "model.patch": "8",
    "model.dim": "128",
    "model.depth": "6",
    "model.heads": "4",
    "model.mlp_ratio": "4.0",
    "model.classes": "5",
    "model.channels": "1",
    "model.temperature": "10000.0",
    "model.dtype": "float32",
    "run.mode": "grid",
    "run.r": "1.0",
    "run.seed": "0",
    "run.eval_draws": "1",
    "run.rollout_reduce": "col-mean",
    "train.epochs": "90",
    "train.batch_size": "64",
    "train.lr": "0.0007",
    "train.weight_decay": "0.0001",
    "train.beta1": "0.9",
    "train.beta2": "0.999",
    "train.eps": "1e-08",
    "train.warmup_frac": "0.0444",
    "train.mixup_alpha": "0.0",
    "train.decoupled_decay": "true",
    "data.kind": "synth",
    "data.train_n": "2000",
    "data.val_n": "500",
    "data.seed": "7",
    "data.height": "64",
    "data.width": "64",
    "data.train_path": "",
    "data.val_path": "",
}

# preset -> overriding key values (applied beneath explicit settings)
_PRESET_OVERRIDES = {
    "tiny": {},
    "vit-s16": {"model.patch": "16", "model.dim": "384", "model.depth": "12",
                "model.heads": "6", "model.channels": "3",
                "model.classes": "1000", "data.height": "224",
                "data.width": "224"},
}
_PRESET_OVERRIDES["tiny"] = {f"model.{k}": str(v)
                             for k, v in PRESETS["tiny"].items()}


class Config:
    """Resolved flat configuration with typed access."""

    def __init__(self, values: dict[str, str]):
        self.values = values

    def str(self, key: str) -> str:
        return self.values[key]

    def int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as e:
            raise BadConfig(f"{key}: expected integer, got "
                            f"{self.values[key]!r}") from e

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as e:
            raise BadConfig(f"{key}: expected number, got "
                            f"{self.values[key]!r}") from e

    def bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise BadConfig(f"{key}: expected true/false, got {self.values[key]!r}")


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise BadConfig(f"{source}:{lineno}: expected 'key = value', got {s!r}")
        key, _, val = s.partition("=")
        values[key.strip()] = val.strip()
    return values


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> Config:
    file_values = {}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise BadConfig(f"cannot read config file {config_path}: {e}") from e
        file_values = parse_config_text(text, source=str(config_path))
    explicit = {**file_values, **overrides}
    preset = explicit.get("model.preset", DEFAULTS["model.preset"])
    if preset not in _PRESET_OVERRIDES:
        raise BadConfig(f"model.preset: unknown preset {preset!r}, "
                        f"choose from {sorted(_PRESET_OVERRIDES)}")
    values = dict(DEFAULTS)
    values.update(_PRESET_OVERRIDES[preset])
    values["model.preset"] = preset
    for key, val in explicit.items():
        if key not in DEFAULTS:
            raise BadConfig(f"unknown config key {key!r}")
        values[key] = val
    return Config(values)


def model_config(cfg: Config) -> VitConfig:
    mode = cfg.str("run.mode")
    if mode not in MODES:
        raise BadConfig(f"run.mode: must be one of {MODES}, got {mode!r}")
    return VitConfig.from_mode(
        mode,
        patch=cfg.int("model.patch"),
        dim=cfg.int("model.dim"),
        depth=cfg.int("model.depth"),
        heads=cfg.int("model.heads"),
        mlp_ratio=cfg.float("model.mlp_ratio"),
        n_classes=cfg.int("model.classes"),
        channels=cfg.int("model.channels"),
        r=cfg.float("run.r"),
        temperature=cfg.float("model.temperature"),
        dtype=cfg.str("model.dtype"),
    )


def train_config(cfg: Config) -> TrainConfig:
    try:
        return TrainConfig(
            epochs=cfg.int("train.epochs"),
            batch_size=cfg.int("train.batch_size"),
            lr=cfg.float("train.lr"),
            weight_decay=cfg.float("train.weight_decay"),
            beta1=cfg.float("train.beta1"),
            beta2=cfg.float("train.beta2"),
            eps=cfg.float("train.eps"),
            warmup_frac=cfg.float("train.warmup_frac"),
            mixup_alpha=cfg.float("train.mixup_alpha"),
            seed=cfg.int("run.seed"),
            decoupled_decay=cfg.bool("train.decoupled_decay"),
            eval_draws=cfg.int("run.eval_draws"),
        )
    except ValueError as e:
        raise BadConfig(f"train config: {e}") from e


def load_split(cfg: Config, split: str) -> Dataset:
    kind = cfg.str("data.kind")
    if kind == "synth":
        n = cfg.int("data.train_n" if split == "train" else "data.val_n")
        return synth_glyphs(n, cfg.int("data.seed"), split,
                            height=cfg.int("data.height"),
                            width=cfg.int("data.width"))
    if kind == "corpus":
        key = "data.train_path" if split == "train" else "data.val_path"
        path = cfg.str(key)
        if not path:
            raise BadConfig(f"{key}: required when data.kind = corpus")
        ds = load_binary_corpus(path, split)
        images = normalize(ds.images)
        h, w = cfg.int("data.height"), cfg.int("data.width")
        if (h, w) != images.shape[2:]:
            images = np.stack([resize_bilinear(im, h, w) for im in images])
        return Dataset(images=images, labels=ds.labels,
                       n_classes=ds.n_classes, split=split)
    raise BadConfig(f"data.kind: must be synth or corpus, got {kind!r}")


def check_dataset(cfg: Config, ds: Dataset) -> None:
    if ds.n_classes != cfg.int("model.classes"):
        raise BadConfig(f"model.classes = {cfg.str('model.classes')} but the "
                        f"{ds.split} split has {ds.n_classes} classes")
    if ds.images.shape[1] != cfg.int("model.channels"):
        raise BadConfig(f"model.channels = {cfg.str('model.channels')} but the "
                        f"{ds.split} split has {ds.images.shape[1]} channels")


def write_manifest(path: Path, command: str, cfg: Config,
                   extra: dict[str, str] | None = None) -> None:
    lines = [f"# randvit {__version__} manifest",
             f"# command: {command}"]
    for key, val in sorted((extra or {}).items()):
        lines.append(f"# {key}: {val}")
    for key in sorted(cfg.values):
        lines.append(f"{key} = {cfg.values[key]}")
    path.write_text("\n".join(lines) + "\n")


def eval_tokens(mcfg: VitConfig, height: int, width: int) -> int:
    """Sequence length the eval-phase sampler will produce."""
    geom = PatchGeometry(height, width, mcfg.patch)
    if mcfg.sampler_eval == GRID:
        rows, cols = geom.grid_shape
        return rows * cols
    return token_count(mcfg.r, geom.tokens)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args))
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest", "train", cfg)
    train_ds = load_split(cfg, "train")
    val_ds = load_split(cfg, "val")
    check_dataset(cfg, train_ds)
    check_dataset(cfg, val_ds)
    print(f"training mode={mcfg.mode} r={mcfg.r} seed={tcfg.seed} "
          f"epochs={tcfg.epochs} on {len(train_ds)}/{len(val_ds)} samples")
    _, metrics = train_run(mcfg, tcfg, train_ds, val_ds, out_dir=out,
                           log=print)
    last = metrics[-1]
    print(f"done: val_top1 {100 * last.val_top1:.2f}%  "
          f"val_loss {last.val_loss:.4f}  -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args))
    params, mcfg, _ = load_checkpoint(args.checkpoint)
    if args.mode is not None or args.r is not None:
        mode = args.mode if args.mode is not None else mcfg.mode
        fields = {f.name: getattr(mcfg, f.name)
                  for f in dataclasses.fields(mcfg)
                  if f.name not in ("sampler_train", "sampler_eval")}
        if args.r is not None:
            fields["r"] = float(args.r)
        mcfg = VitConfig.from_mode(mode, **fields)
    ds = load_split(cfg, "val")
    if ds.n_classes != mcfg.n_classes or ds.images.shape[1] != mcfg.channels:
        raise BadConfig("data.*: split does not match the checkpoint's "
                        f"{mcfg.n_classes} classes / {mcfg.channels} channels")
    top1, loss = evaluate(mcfg, params, ds, eval_seed=cfg.int("run.seed"),
                          draws=cfg.int("run.eval_draws"))
    n_tok = eval_tokens(mcfg, ds.images.shape[2], ds.images.shape[3])
    gflops = count_flops(mcfg, n_tok).gflops
    print(f"mode {mcfg.mode}  r {mcfg.r}  val_top1 {100 * top1:.2f}%  "
          f"val_loss {loss:.4f}  gflops {gflops:.3f}  "
          f"top1/gflop {work_efficiency(100 * top1, gflops):.2f}")
    return 0


def cmd_flops(args) -> int:
    overrides = _flag_overrides(args)
    cfg = resolve_config(args.config, overrides)
    # a bare --r asks for the r-driven token count; an explicit mode
    # (flag or config file) still wins, so Mode B stays at the grid cost
    if args.r is not None and "run.mode" not in overrides:
        file_vals = (parse_config_text(Path(args.config).read_text(),
                                       str(args.config)) if args.config else {})
        if "run.mode" not in file_vals:
            cfg.values["run.mode"] = "A"
    mcfg = model_config(cfg)
    if args.n is not None:
        n = int(args.n)
    else:
        n = eval_tokens(mcfg, cfg.int("data.height"), cfg.int("data.width"))
    report = count_flops(mcfg, n)
    print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flops.json").write_text(
            json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def _load_image_for_model(args, mcfg: VitConfig) -> np.ndarray:
    img = normalize(read_pnm(args.image))
    if args.resize is not None:
        img = np.stack([resize_bilinear(ch[None], args.resize[0],
                                        args.resize[1])[0] for ch in img])
    if img.shape[0] != mcfg.channels:
        raise BadImage(f"{args.image}: {img.shape[0]} channels, model expects "
                       f"{mcfg.channels}")
    return img


def cmd_attnmap(args) -> int:
    params, mcfg, _ = load_checkpoint(args.checkpoint)
    img = _load_image_for_model(args, mcfg)
    heat_dir = Path(args.out) / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    from .data import denormalize
    write_pnm(heat_dir / "input.pnm", denormalize(img))
    modes = args.mode or ["grid"]
    for mode in modes:
        fields = {f.name: getattr(mcfg, f.name)
                  for f in dataclasses.fields(mcfg)
                  if f.name not in ("sampler_train", "sampler_eval")}
        if args.r is not None:
            fields["r"] = float(args.r)
        run_cfg = VitConfig.from_mode(mode, **fields)
        rng = RunStreams(args.seed).eval_sampler(0, 0, 0)
        trace = forward(img, run_cfg, params, "eval", rng)
        scores = attention_rollout(trace, reduce=args.rollout_reduce)
        geom = PatchGeometry(img.shape[1], img.shape[2], run_cfg.patch)
        heat = render_heatmap(scores, trace.coords, geom, mode=mode,
                              r=run_cfg.r, seed=args.seed)
        name = f"heatmap_{mode}_seed{args.seed}.pgm"
        write_pnm(heat_dir / name, heat.values[None])
        print(f"wrote {heat_dir / name} ({trace.coords.n_tokens} tokens, "
              f"reduce={args.rollout_reduce})")
    return 0


def _draw_box(canvas: np.ndarray, top: int, left: int, p: int,
              color: tuple[int, int, int]) -> None:
    bottom, right = top + p - 1, left + p - 1
    canvas[top, left:right + 1] = color
    canvas[bottom, left:right + 1] = color
    canvas[top:bottom + 1, left] = color
    canvas[top:bottom + 1, right] = color


def cmd_sample_demo(args) -> int:
    img = read_pnm(args.image)
    rgb = np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img
    base = np.moveaxis(rgb, 0, -1).copy()  # (H, W, 3) uint8
    geom = PatchGeometry(img.shape[1], img.shape[2], args.patch)
    grid = grid_coords(geom)
    rand = random_coords(geom, args.r, RunStreams(args.seed).sampler(0, 0, 0))
    panels = []
    for coords, color in ((grid, (0, 255, 0)), (rand, (255, 0, 0))):
        panel = base.copy()
        tops = np.floor(coords.coords[:, 0] * args.patch).astype(int)
        lefts = np.floor(coords.coords[:, 1] * args.patch).astype(int)
        for t, l in zip(tops, lefts):
            _draw_box(panel, int(t), int(l), args.patch, color)
        panels.append(panel)
    gap = np.full((base.shape[0], 4, 3), 255, dtype=np.uint8)
    combined = np.concatenate([panels[0], gap, panels[1]], axis=1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pnm(out / "sample_demo.ppm", np.moveaxis(combined, -1, 0))
    lines = ["index,z0,z1,top_px,left_px"]
    for i, (z0, z1) in enumerate(rand.coords):
        lines.append(f"{i},{z0:.10g},{z1:.10g},"
                     f"{int(np.floor(z0 * args.patch))},"
                     f"{int(np.floor(z1 * args.patch))}")
    (out / "coords.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'sample_demo.ppm'} "
          f"({grid.n_tokens} grid boxes, {rand.n_tokens} random boxes)")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args.config, _flag_overrides(args))
    tcfg = train_config(cfg)
    r_values = ([float(v) for v in args.r_list.split(",") if v.strip()]
                if args.r_list.strip() else [])
    if any(r <= 0 for r in r_values):
        raise BadConfig(f"--r-list: r values must be positive, got {args.r_list}")
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in ("A", "B"):
            raise BadConfig(f"--modes: sweep modes must be A or B, got {m!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest", "sweep", cfg,
                   extra={"r_list": ",".join(str(r) for r in r_values),
                          "modes": ",".join(modes)})
    train_ds = load_split(cfg, "train")
    val_ds = load_split(cfg, "val")
    check_dataset(cfg, train_ds)
    check_dataset(cfg, val_ds)
    h, w = train_ds.images.shape[2], train_ds.images.shape[3]
    cells = [("baseline", "grid", 1.0)]
    cells += [(f"{mode}_r{r:g}", mode, r) for r in r_values for mode in modes]
    rows = []
    for label, mode, r in cells:
        over = {"run.mode": mode, "run.r": str(r)}
        cell_cfg = Config({**cfg.values, **over})
        try:
            mcfg = model_config(cell_cfg)
            cell_dir = out / "cells" / label
            _, metrics = train_run(mcfg, tcfg, train_ds, val_ds,
                                   out_dir=cell_dir)
            top1 = 100 * metrics[-1].val_top1
            gflops = count_flops(mcfg, eval_tokens(mcfg, h, w)).gflops
            rows.append((label, mode, r, top1, gflops, "ok"))
            print(f"{label}: top1 {top1:.2f}%  gflops {gflops:.3f}")
        except RandVitError as e:
            rows.append((label, mode, r, float("nan"), float("nan"),
                         f"failed:{type(e).__name__}"))
            print(f"{label}: FAILED ({e})", file=sys.stderr)
    table = ["label,mode,r,val_top1,gflops,status"]
    eff = ["label,mode,r,val_top1,gflops,top1_per_gflop"]
    for label, mode, r, top1, gflops, status in rows:
        table.append(f"{label},{mode},{r:g},{top1:.4f},{gflops:.6f},{status}")
        if status == "ok":
            eff.append(f"{label},{mode},{r:g},{top1:.4f},{gflops:.6f},"
                       f"{work_efficiency(top1, gflops):.4f}")
    (out / "sweep.csv").write_text("\n".join(table) + "\n")
    (out / "efficiency.csv").write_text("\n".join(eff) + "\n")
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

_FLAG_KEYS = (("mode", "run.mode"), ("r", "run.r"), ("seed", "run.seed"),
              ("epochs", "train.epochs"), ("eval_draws", "run.eval_draws"),
              ("rollout_reduce", "run.rollout_reduce"))


def _flag_overrides(args) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for attr, key in _FLAG_KEYS:
        val = getattr(args, attr, None)
        if val is not None and not isinstance(val, list):
            overrides[key] = str(val)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise BadConfig(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        overrides[key.strip()] = val.strip()
    return overrides


def _add_common(p: argparse.ArgumentParser, *, mode_choices=MODES) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--mode", choices=mode_choices)
    p.add_argument("--r", type=float, help="sampling factor")
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-draws", type=int, dest="eval_draws")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="randvit",
        description="train and analyze a ViT with randomized patch sampling")
    ap.add_argument("--version", action="version",
                    version=f"randvit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training recipe")
    _add_common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("flops", help="print the inference FLOPs report")
    _add_common(p)
    p.add_argument("--n", type=int, help="token count (overrides --r)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("attnmap", help="write attention-rollout heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PGM/PPM input image")
    p.add_argument("--mode", action="append", choices=MODES,
                   help="repeatable; default grid")
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rollout-reduce", choices=ROLLOUT_REDUCES,
                   default="col-mean", dest="rollout_reduce")
    p.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_attnmap)

    p = sub.add_parser("sample-demo",
                       help="draw grid vs random patch outlines")
    p.add_argument("--image", required=True)
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_sample_demo)

    p = sub.add_parser("sweep", help="train the baseline plus an (r, mode) grid")
    _add_common(p, mode_choices=MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--r-list", default="0.5,1,2,3,4", dest="r_list")
    p.add_argument("--modes", default="A,B")
    p.add_argument("--out", default="out")
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except _DATA_ERRORS as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except _NUMERIC_ERRORS as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
