"""Command line entry point: ``pelc run|pipeline|report|colorop|inpaint``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, config_hash, load_config
from .pipeline import STAGES, Pipeline, PipelineError

EXIT_USAGE = 2
EXIT_PIPELINE = 3
EXIT_FAILURE = 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="config JSON path, or a bundled preset: desk (default), micro")
    p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    p.add_argument("--out", default=os.environ.get("PELC_OUT", "runs/desk"), help="run directory (env PELC_OUT)")
    p.add_argument("--workers", type=int, default=int(os.environ.get("PELC_WORKERS", "1")), help="torch threads (env PELC_WORKERS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pelc", description="Pixel-equivalent latent compositing experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one stage")
    run.add_argument("stage", choices=STAGES)
    run.add_argument("--force", action="store_true", help="rerun even if a matching manifest exists")
    _common(run)

    pipe = sub.add_parser("pipeline", help="run every stage in dependency order")
    pipe.add_argument("--stages", nargs="+", choices=STAGES, default=list(STAGES))
    pipe.add_argument("--force", action="store_true")
    _common(pipe)

    rep = sub.add_parser("report", help="collect metrics of a run into Markdown/CSV")
    rep.add_argument("--run", default=os.environ.get("PELC_OUT", "runs/desk"))
    rep.add_argument("--out", default=None)

    color = sub.add_parser("colorop", help="colour operator utilities")
    csub = color.add_subparsers(dest="action", required=True)
    ceval = csub.add_parser("eval", help="score model and naive baseline at one setting")
    ceval.add_argument("--gamma", type=float, default=1.0)
    ceval.add_argument("--contrast", type=float, default=1.0)
    ceval.add_argument("--brightness", type=float, default=0.0)
    ceval.add_argument("--n", type=int, default=16, help="number of held-out images")
    ceval.add_argument("--run", default=os.environ.get("PELC_OUT", "runs/desk"))

    inp = sub.add_parser("inpaint", help="inpaint one image with trained checkpoints")
    inp.add_argument("--run", default=os.environ.get("PELC_OUT", "runs/desk"))
    inp.add_argument("--image", required=True, help="RGB PNG, side divisible by the autoencoder stride")
    inp.add_argument("--mask", required=True, help="grayscale PNG, white = regenerate")
    inp.add_argument("--output", required=True, help="output PNG; a .json sidecar is written next to it")
    inp.add_argument("--variant", default="decformer+dual_sigma", choices=("heuristic", "decformer", "dual_sigma_only", "decformer+dual_sigma"))
    inp.add_argument("--steps", type=int, default=30)
    inp.add_argument("--seed", type=int, default=0)
    inp.add_argument("--lam", type=float, default=0.75)
    return parser


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config, args.seed)
    return Pipeline(cfg, args.out, workers=args.workers)


def cmd_run(args) -> int:
    man = _pipeline(args).run(args.stage, force=args.force)
    print(json.dumps({"stage": args.stage, "config_hash": man["config_hash"], "metrics": man["metrics"]}))
    return 0


def cmd_pipeline(args) -> int:
    pipe = _pipeline(args)
    for stage in STAGES:
        if stage in args.stages:
            man = pipe.run(stage, force=args.force)
            print(json.dumps({"stage": stage, "wall_clock_s": man.get("wall_clock_s")}), flush=True)
    return 0


def cmd_report(args) -> int:
    from .report import emit_report

    print(emit_report(args.run, args.out))
    return 0


def _load_models(run: Path, *names: str):
    missing = [n for n in names if not (run / "checkpoints" / f"{n}.safetensors").exists()]
    if missing:
        raise PipelineError(f"checkpoint(s) {', '.join(missing)} not found under {run / 'checkpoints'}")


def cmd_colorop(args) -> int:
    from .autoencoder.train import load_autoencoder
    from .colorop.evaluate import evaluate_color
    from .colorop.model import load_color_operator
    from .colorop.ops import ColorParams
    from .data.images import make_image_set

    run = Path(args.run)
    _load_models(run, "autoencoder", "colorop")
    if args.n < 1:
        raise ValueError("--n must be at least 1")
    ae = load_autoencoder(run / "checkpoints" / "autoencoder.safetensors")
    model = load_color_operator(run / "checkpoints" / "colorop.safetensors")
    p = ColorParams(args.gamma, args.contrast, args.brightness)
    size = model.cfg.grid[0] * ae.f
    table = evaluate_color(ae, model, make_image_set(args.n, "heldout", 4321, size), [p])
    print(json.dumps({"params": p.__dict__, "n": table.n, **table.summary()}, indent=2))
    return 0


def cmd_inpaint(args) -> int:
    import numpy as np
    import torch

    from .autoencoder.train import load_autoencoder
    from .checkpoint import file_sha256
    from .data.io import atomic_write_text, load_image_png, load_mask_png, save_image_png
    from .decformer.train import load_decformer
    from .flow.evaluate import variant_settings
    from .flow.sampling import inpaint
    from .flow.train import load_flow

    run = Path(args.run)
    needs_ds = "dual_sigma" in args.variant
    needs_dec = args.variant.startswith("decformer")
    names = ["autoencoder", "flow_dual_sigma" if needs_ds else "flow"] + (["decformer"] if needs_dec else [])
    _load_models(run, *names)
    ae = load_autoencoder(run / "checkpoints" / "autoencoder.safetensors")
    flows = {k: load_flow(run / "checkpoints" / f"{n}.safetensors") for k, n in (("base", "flow"), ("dual_sigma", "flow_dual_sigma")) if (run / "checkpoints" / f"{n}.safetensors").exists()}
    comp = load_decformer(run / "checkpoints" / "decformer.safetensors") if needs_dec else None
    x = load_image_png(args.image)
    m = load_mask_png(args.mask).data
    if x.shape[-2:] != m.shape:
        raise ValueError(f"image {x.shape[-2:]} and mask {m.shape} sizes differ")
    if comp is not None:
        comp.cfg.check_latent(x.shape[-2] // ae.f, x.shape[-1] // ae.f)
    kw = variant_settings(args.variant, flows, comp, args.lam)
    res = inpaint(ae, image=torch.from_numpy(x)[None].float(), mask=torch.from_numpy((m >= 0.5).astype(np.float32))[None], steps=args.steps, seed=args.seed, **kw)
    out = Path(args.output)
    save_image_png(out, res.image[0].numpy())
    sidecar = {
        "variant": args.variant,
        "steps": args.steps,
        "seed": args.seed,
        "lambda": args.lam if needs_ds else None,
        "checkpoints": {n: file_sha256(run / "checkpoints" / f"{n}.safetensors") for n in names},
        "diagnostics": res.diagnostics,
    }
    atomic_write_text(out.with_suffix(".json"), json.dumps(sidecar, indent=2) + "\n")
    print(out)
    return 0


COMMANDS = {"run": cmd_run, "pipeline": cmd_pipeline, "report": cmd_report, "colorop": cmd_colorop, "inpaint": cmd_inpaint}


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PipelineError as exc:
        print(json.dumps(exc.payload()), file=sys.stderr)
        return EXIT_PIPELINE
    except ConfigError as exc:
        return _fail("config_error", str(exc), EXIT_USAGE)
    except (ValueError, FileNotFoundError) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_USAGE)
    except Exception as exc:  # noqa: BLE001
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)


__all__ = ["main", "build_parser", "config_hash"]

if __name__ == "__main__":
    sys.exit(main())
