"""Command-line entry points: dataset synthesis, training, evaluation,
rendering, flow export, and a self-check.

Exit codes: 0 success, 1 usage error, 2 data/configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import coords, trainer
from .autodiff import DomainError
from .config import ConfigError, load_config
from .images import write_ppm, write_raw
from .objectives import NonFiniteLoss
from .synthetic import ManifestError, emit_dataset, load_manifest, make_scene
from .tensor_fields import OutOfBounds

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    p = _Parser(prog="kinfield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="emit an analytic benchmark dataset")
    sp.add_argument("--scene", required=True,
                    choices=["translate", "parabola", "jerky", "two_body"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=8)
    sp.add_argument("--width", type=int, default=32)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--heldout", default="",
                    help="comma-separated frame indices to hold out")
    sp.add_argument("--extra-views", default="",
                    help="comma-separated time indices that get an extra "
                         "held-out view at a seen time")

    tp = sub.add_parser("train", help="optimize a model on a dataset")
    tp.add_argument("--config", default=None, help="YAML config file")
    tp.add_argument("--manifest", default=None)
    tp.add_argument("--out", default=None)
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted config override, e.g. train.steps=100")

    ep = sub.add_parser("eval", help="evaluate a finished run")
    ep.add_argument("--run", required=True, help="training output directory")
    ep.add_argument("--checkpoint", default=None)
    ep.add_argument("--samples", type=int, default=64)

    rp = sub.add_parser("render", help="render one frame from a run")
    rp.add_argument("--run", required=True)
    rp.add_argument("--frame", type=int, required=True)
    rp.add_argument("--time", type=float, default=None)
    rp.add_argument("--out", required=True, help="output .ppm path")
    rp.add_argument("--samples", type=int, default=64)

    fp = sub.add_parser("flow", help="export per-pixel kinematics")
    fp.add_argument("--run", required=True)
    fp.add_argument("--frame", type=int, required=True)
    fp.add_argument("--out", required=True, help="output prefix (.csv/.raw)")
    fp.add_argument("--samples", type=int, default=64)

    sub.add_parser("selfcheck", help="run quick internal consistency checks")
    return p


def _load_run(args):
    run = Path(args.run)
    cfg_path = run / "resolved_config.yaml"
    if not cfg_path.exists():
        raise ManifestError(f"{cfg_path} not found; is this a training output?")
    cfg = load_config(cfg_path)
    dataset = load_manifest(cfg.manifest)
    ckpt = Path(getattr(args, "checkpoint", None) or run / "checkpoint_final.kck")
    if not ckpt.exists():
        raise ManifestError(f"checkpoint {ckpt} not found")
    model = trainer.load_model(dataset, cfg.model, ckpt,
                               eps_lambda=cfg.train.eps_lambda)
    return cfg, dataset, model


def cmd_synth(args):
    heldout = tuple(int(s) for s in args.heldout.split(",") if s.strip())
    extra = tuple(int(s) for s in args.extra_views.split(",") if s.strip())
    scene = make_scene(args.scene)
    manifest = emit_dataset(scene, args.out, n_frames=args.frames,
                            width=args.width, height=args.height,
                            heldout=heldout, extra_views=extra)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_train(args):
    overrides = list(args.set)
    if args.manifest is not None:
        overrides.append(f"manifest={args.manifest}")
    if args.out is not None:
        overrides.append(f"out_dir={args.out}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if not cfg.manifest:
        raise UsageError("a manifest is required (--manifest or config)")
    _, _, summary = trainer.train(cfg, log=lambda s: print(s, flush=True))
    print(f"done: final total {summary['final_total']}")
    return EXIT_OK


def cmd_eval(args):
    _, dataset, model = _load_run(args)
    metrics = trainer.evaluate(model, dataset, n_samples=args.samples)
    lines = [f"{k} {metrics[k]!r}" for k in
             ("psnr_seen", "ssim_seen", "psnr_novel", "ssim_novel",
              "velocity_median_rel_error")]
    for f in metrics["per_frame"]:
        lines.append(f"frame {f['index']} heldout {int(f['heldout'])} "
                     f"psnr {f['psnr']!r} ssim {f['ssim']!r}")
    text = "\n".join(lines) + "\n"
    (Path(args.run) / "metrics.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_render(args):
    _, dataset, model = _load_run(args)
    frame = dataset.frames[args.frame]
    img = trainer.render_frame(model, frame, dataset, n_samples=args.samples,
                               time=args.time)
    out = Path(args.out)
    write_ppm(out, img)
    write_raw(out.with_suffix(".raw"), img)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_flow(args):
    _, dataset, model = _load_run(args)
    frame = dataset.frames[args.frame]
    fm = trainer.flow_map(model, frame, dataset, n_samples=args.samples)
    out = Path(args.out)
    write_raw(out.with_suffix(".raw"), fm)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "vx", "vy", "vz", "ax", "ay", "az",
                    "jx", "jy", "jz", "disp"])
        H, W, _ = fm.shape
        for r in range(H):
            for c in range(W):
                w.writerow([r, c] + [repr(float(x)) for x in fm[r, c]])
    print(f"wrote {out.with_suffix('.csv')}")
    return EXIT_OK


def cmd_selfcheck(args):
    cam = coords.NdcCamera(near=2.0, far=6.0, right=0.8, top=0.8)
    rng = np.random.default_rng(0)
    p = rng.uniform(-0.9, 0.9, size=(256, 3))
    back = coords.world_to_ndc(coords.ndc_to_world(p, cam), cam)
    err = float(np.max(np.abs(back - p)))
    ok = err < 1e-9
    print(f"ndc round trip max err {err:.3e}: {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
             "render": cmd_render, "flow": cmd_flow, "selfcheck": cmd_selfcheck}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ManifestError, FileNotFoundError, ValueError) as e:
        if isinstance(e, (coords.CoordinateError, OutOfBounds)):
            print(f"numerical error: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, DomainError, ArithmeticError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
