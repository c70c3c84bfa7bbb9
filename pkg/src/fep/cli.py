"""Command-line entry point: ``fep {generate,train,explain,evaluate,ablate,dct}``.

Every command resolves a :class:`~fep.config.RunConfig` from an optional JSON
file (``--config``) and then applies flag overrides; flags win.  The resolved
configuration is echoed into every artifact.  Exit codes: 0 success, 2 usage
or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ModelSettings, RunConfig
from .data import analytic_template_model, export_heatmap_frames, generate_dataset, load_dataset, save_dataset
from .dct import DctPlan, GfmConfig, dct3, idct3
from .metrics import deletion_curve, evaluate_masks
from .models import Model, load_model, save_model, train_tiny_conv
from .optimizer import NonFiniteGradientError, OptimizerConfig, ablate, explain
from .perturb import BlurKernel
from .tensor import ClipShape, FormatError, ShapeError, load_tensor, save_tensor

logger = logging.getLogger("fep")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    text = text.strip()
    if not text:
        raise UsageError("empty grid")
    if ":" in text:
        try:
            start, stop, step = (float(v) for v in text.split(":"))
        except ValueError:
            raise UsageError(f"bad grid {text!r}, expected start:stop:step") from None
        if step <= 0:
            raise UsageError(f"grid step must be positive in {text!r}")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        values = [round(start + i * step, 10) for i in range(max(n, 0))]
    else:
        try:
            values = [float(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad grid {text!r}") from None
    if not values:
        raise UsageError(f"grid {text!r} is empty")
    return values


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _resolve(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)

    data = {k: getattr(args, k) for k in ("noise_sigma", "hf_noise_amplitude", "blob_size",
                                         "blob_intensity", "start_jitter")
            if getattr(args, k, None) is not None}
    if getattr(args, "shape", None) is not None:
        data["clip_shape"] = ClipShape(*args.shape)
    if data:
        cfg = replace(cfg, data=replace(cfg.data, **data))

    model = {k: getattr(args, k) for k in ("temperature", "motion_weight", "epochs", "lr", "channels")
             if getattr(args, k, None) is not None}
    if getattr(args, "kind", None) is not None:
        model["kind"] = args.kind
    if model:
        cfg = replace(cfg, model=replace(cfg.model, **model))

    opt = {k: getattr(args, k) for k in ("epsilon", "iterations", "area_a", "mask_init", "step",
                                        "smooth_sigma", "mode")
           if getattr(args, k, None) is not None}
    if getattr(args, "lam", None) is not None:
        opt["lam"] = args.lam
    if getattr(args, "blur_sigma", None) is not None:
        opt["blur"] = BlurKernel(args.blur_sigma)
    method = getattr(args, "method", None)
    if method == "ep":
        opt["gfm"] = None
    elif method == "fep":
        base = cfg.optimizer.gfm or GfmConfig(0.5, 0.2)
        rl = base.r_l if args.rl is None else args.rl
        rh = base.r_h if args.rh is None else args.rh
        opt["gfm"] = GfmConfig(rl, rh)
    if opt:
        cfg = replace(cfg, optimizer=replace(cfg.optimizer, **opt))

    met = {k: getattr(args, k) for k in ("tau", "reference", "deletion_steps", "deletion_fill")
           if getattr(args, k, None) is not None}
    if met:
        cfg = replace(cfg, metrics=replace(cfg.metrics, **met))
    return cfg


def _load_inputs(args: argparse.Namespace, cfg: RunConfig):
    for p in (args.data, args.model):
        if not Path(p).is_file():
            raise UsageError(f"no such file: {p}")
    items = load_dataset(args.data)
    model = load_model(args.model)
    if not items:
        raise UsageError(f"{args.data} holds no clips")
    if ClipShape.of(items[0].clip) != model.clip_shape:
        raise UsageError(f"model expects clips of shape {model.clip_shape.dims}, "
                         f"dataset holds {items[0].clip.shape}")
    return items, model


def _select(items: list, index: int | None) -> list[int]:
    if index is None:
        return list(range(len(items)))
    if not 0 <= index < len(items):
        raise UsageError(f"clip index {index} out of range for {len(items)} clips")
    return [index]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args: argparse.Namespace) -> int:
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    cfg = _resolve(args)
    items = generate_dataset(cfg.data, args.n)
    out = Path(args.out)
    save_dataset(items, out)
    Path(f"{out}.json").write_text(_dump_json({"config": cfg.to_dict(), "n": args.n}))
    print(f"wrote {len(items)} clips (seed {cfg.data.seed}) to {out}")
    return EXIT_OK


def build_model(cfg: RunConfig, items: list) -> Model:
    shape = ClipShape.of(items[0].clip)
    if cfg.model.kind == "template":
        return analytic_template_model(replace(cfg.data, clip_shape=shape),
                                       cfg.model.temperature, cfg.model.motion_weight)
    m: ModelSettings = cfg.model
    return train_tiny_conv([it.clip for it in items], [it.label for it in items], cfg.data.num_classes,
                           epochs=m.epochs, lr=m.lr, channels=m.channels, seed=cfg.train_seed)


def cmd_train(args: argparse.Namespace) -> int:
    if not Path(args.data).is_file():
        raise UsageError(f"no such file: {args.data}")
    cfg = _resolve(args)
    items = load_dataset(args.data)
    if not items:
        raise UsageError(f"{args.data} holds no clips")
    model = build_model(cfg, items)
    acc = float(np.mean([model.predict(it.clip).label == it.label for it in items]))
    out = Path(args.out)
    save_model(model, out)
    Path(f"{out}.json").write_text(_dump_json({"config": cfg.to_dict(), "train_accuracy": acc}))
    print(f"{cfg.model.kind} model: training accuracy {100 * acc:.2f}% on {len(items)} clips -> {out}")
    return EXIT_OK


def _trace_csv(result) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "confidence", "objective"])
    for i, (c, o) in enumerate(zip(result.confidence_trace, result.objective_trace)):
        w.writerow([i, repr(c), repr(o)])
    return buf.getvalue()


def cmd_explain(args: argparse.Namespace) -> int:
    if args.method == "ep" and (args.rl is not None or args.rh is not None):
        raise UsageError("--rl/--rh only apply to --method fep")
    cfg = _resolve(args)
    items, model = _load_inputs(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    explained = {}
    for i in _select(items, args.clip):
        clip = items[i].clip
        label = model.predict(clip).label if args.label is None else args.label
        result = explain(model, clip, label, cfg.optimizer)
        save_tensor(result.mask, out / f"mask_{i:04d}.fept")
        (out / f"trace_{i:04d}.csv").write_text(_trace_csv(result))
        if args.heatmaps:
            export_heatmap_frames(clip, result.mask, out / f"heatmaps_{i:04d}")
        explained[f"{i:04d}"] = {"label": int(label), "final_confidence": result.confidence_trace[-1]}
        logger.info("clip %d: class %d, confidence %.4f -> %.4f", i, label,
                    result.confidence_trace[0], result.confidence_trace[-1])
    (out / "config.json").write_text(_dump_json({"config": cfg.to_dict(), "clips": explained}))
    print(f"explained {len(explained)} clip(s) into {out}")
    return EXIT_OK


def _load_masks(mask_dir: Path, n: int) -> list[np.ndarray]:
    if not mask_dir.is_dir():
        raise UsageError(f"no such mask directory: {mask_dir}")
    files = sorted(mask_dir.glob("mask_*.fept"))
    if len(files) != n:
        raise UsageError(f"{len(files)} masks in {mask_dir} for {n} clips")
    expected = [mask_dir / f"mask_{i:04d}.fept" for i in range(n)]
    if files != expected:
        raise UsageError(f"mask files in {mask_dir} are not numbered 0000..{n - 1:04d}")
    return [load_tensor(p) for p in files]


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    items, model = _load_inputs(args, cfg)
    masks = _load_masks(Path(args.masks), len(items))
    try:
        report = evaluate_masks(model, items, masks, tau=cfg.metrics.tau, reference=cfg.metrics.reference,
                                deletion_steps=cfg.metrics.deletion_steps)
    except ShapeError as exc:
        raise UsageError(str(exc)) from None
    payload = {"config": cfg.to_dict(), "report": report.to_dict()}
    if args.out:
        Path(args.out).write_text(_dump_json(payload))
    if args.curves:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["clip", "fraction", "confidence"])
        for i, (it, m) in enumerate(zip(items, masks)):
            y = model.predict(it.clip).label if cfg.metrics.reference == "predicted" else it.label
            fill_blur = cfg.optimizer.blur if cfg.metrics.deletion_fill == "blur" else None
            curve = deletion_curve(model, it.clip, m, y, cfg.metrics.deletion_steps,
                                   cfg.metrics.deletion_fill, fill_blur)
            for f, c in zip(curve.fractions, curve.confidences):
                w.writerow([i, repr(float(f)), repr(float(c))])
        Path(args.curves).write_text(buf.getvalue())
    print(f"{'clips':>6} {'DC':>8} {'Acc':>8} {'STC':>8} {'delAUC':>8} {'TV':>9}")
    print(f"{report.n_clips:>6d} {report.dc:>8.3f} {report.acc:>8.3f} {report.stc:>8.3f} "
          f"{report.deletion_auc:>8.4f} {report.tv:>9.3f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    rls = parse_grid(args.rl_grid)
    rhs = parse_grid(args.rh_grid) if args.rh_grid is not None else [args.rh]
    pairs = [(rl, rh) for rl in rls for rh in rhs]
    cfg = _resolve(args)
    items, model = _load_inputs(args, cfg)
    if args.clips is not None:
        if args.clips < 1:
            raise UsageError("--clips must be >= 1")
        items = items[: args.clips]
    rows = ablate(model, items, pairs, cfg.optimizer, tau=cfg.metrics.tau, reference=cfg.metrics.reference)
    lines = ["# config: " + json.dumps(cfg.to_dict(), sort_keys=True), rows[0].CSV_HEADER]
    lines += [r.csv() for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_dct(args: argparse.Namespace) -> int:
    if not Path(args.input).is_file():
        raise UsageError(f"no such file: {args.input}")
    t = load_tensor(args.input)
    if t.ndim != 3:
        raise UsageError(f"dct expects a rank-3 tensor, got rank {t.ndim}")
    plan = DctPlan(t.shape)
    save_tensor(idct3(plan, t) if args.inverse else dct3(plan, t), args.out)
    print(f"{'inverse' if args.inverse else 'forward'} DCT of {t.shape} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic data")
    g.add_argument("--shape", type=int, nargs=4, metavar=("T", "C", "H", "W"))
    g.add_argument("--blob-size", type=int)
    g.add_argument("--blob-intensity", type=float)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--hf-noise-amplitude", type=float)
    g.add_argument("--start-jitter", type=int)


def _add_optimizer_flags(p: argparse.ArgumentParser, method: bool = True) -> None:
    g = p.add_argument_group("optimizer")
    if method:
        g.add_argument("--method", choices=("ep", "fep"), default="ep")
        g.add_argument("--rl", type=float, help="low-band ratio for --method fep")
        g.add_argument("--rh", type=float, help="high-band ratio for --method fep")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--iterations", type=int)
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--area", dest="area_a", type=float)
    g.add_argument("--blur-sigma", type=float)
    g.add_argument("--mask-init", type=float)
    g.add_argument("--step", type=int)
    g.add_argument("--smooth-sigma", type=float)
    g.add_argument("--mode", choices=("prob", "logit"))


def _add_metric_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("metrics")
    g.add_argument("--tau", type=float)
    g.add_argument("--reference", choices=("predicted", "ground-truth"))
    g.add_argument("--deletion-steps", type=int)
    g.add_argument("--deletion-fill", choices=("zero", "blur"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fep", description="Frequency-filtered extremal perturbation for video clips.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration; flags override it")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    p = command("generate", cmd_generate, "write a synthetic FEPD dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    _add_data_flags(p)

    p = command("train", cmd_train, "build the analytic template model or train the tiny conv net")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", dest="kind", choices=("template", "tinyconv"))
    p.add_argument("--temperature", type=float)
    p.add_argument("--motion-weight", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--channels", type=int)
    _add_data_flags(p)

    p = command("explain", cmd_explain, "optimize EP or F-EP masks")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--clip", type=int, help="explain one clip (default: all)")
    p.add_argument("--label", type=int, help="class to explain (default: predicted)")
    p.add_argument("--heatmaps", action="store_true", help="also export PGM heatmap frames")
    _add_optimizer_flags(p)

    p = command("evaluate", cmd_evaluate, "score a directory of masks")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--masks", required=True, help="directory of mask_NNNN.fept files")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--curves", help="CSV path for per-clip deletion curves")
    _add_metric_flags(p)

    p = command("ablate", cmd_ablate, "sweep (r_l, r_h) band ratios")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--rl-grid", required=True, help="start:stop:step or comma list")
    p.add_argument("--rh-grid", help="start:stop:step or comma list")
    p.add_argument("--rh", type=float, default=0.0)
    p.add_argument("--clips", type=int, help="use only the first N clips")
    p.add_argument("--out", help="CSV path (default: stdout)")
    _add_optimizer_flags(p, method=False)
    _add_metric_flags(p)

    p = command("dct", cmd_dct, "forward or inverse 3-D DCT of a FEPT tensor")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--inverse", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteGradientError as exc:
        print(f"fep: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, FormatError, ShapeError, ValueError, OSError) as exc:
        print(f"fep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
