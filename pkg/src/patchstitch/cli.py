"""Command-line entry points: gen, fit, eval, export, ablate."""

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as pio
from ._accel import set_num_threads
from .fit import VARIANTS, FitConfig, Fitter, run_ablation
from .losses import LossBreakdown
from .shapes import KINDS, ShapeSpec, gen_shape, normalize

log = logging.getLogger("patchstitch")

HISTORY_HEADER = "iter\t" + "\t".join(LossBreakdown.FIELDS)


def history_text(history):
    lines = [HISTORY_HEADER]
    for rec in history:
        lines.append(f"{rec.iteration}\t" + "\t".join(repr(x) for x in rec.losses.as_tuple()))
    return "\n".join(lines) + "\n"


def reports_text(reports):
    lines = ["iter\tcd\tm_ae\tm_s\tm_olap"]
    for it, r in reports:
        lines.append(f"{it}\t" + "\t".join("absent" if v is None else repr(float(v)) for v in r.row()))
    return "\n".join(lines) + "\n"


def _param(s):
    key, sep, val = s.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {s!r}")
    try:
        return key, float(val)
    except ValueError:
        raise argparse.ArgumentTypeError(f"parameter {key!r} needs a number") from None


def build_parser():
    p = argparse.ArgumentParser(prog="patchstitch", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, help="override the configured seed")
    g.add_argument("--threads", type=int, help="worker threads for the compiled kernels")
    g.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("gen", parents=[g], help="sample a synthetic target shape")
    s.add_argument("--kind", choices=KINDS, required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--param", type=_param, action="append", default=[], metavar="KEY=VALUE",
                   help="shape parameter, e.g. radius=1 (repeatable)")
    s.add_argument("--ascii", action="store_true")
    s.add_argument("--out", required=True)

    def fit_args(s, need_input=True):
        s.add_argument("--input", required=need_input, help="target point cloud (PLY)")
        s.add_argument("--config", help="fit configuration file")
        s.add_argument("--iters", type=int, help="override total_iters")
        s.add_argument("--pretrain", type=int, help="override pretrain_iters")
        s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("fit", parents=[g], help="fit an atlas to a point cloud")
    fit_args(s, need_input=False)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--manifest", help="replay the run recorded in this manifest")

    s = sub.add_parser("eval", parents=[g], help="evaluate a saved atlas")
    s.add_argument("--atlas", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--config", help="fit configuration (metric settings)")
    s.add_argument("--out", help="write the report here instead of stdout")

    s = sub.add_parser("export", parents=[g], help="export per-patch meshes as OBJ")
    s.add_argument("--atlas", required=True)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--out", required=True)

    s = sub.add_parser("ablate", parents=[g], help="fit several variants from one pretrained state")
    fit_args(s)
    s.add_argument("--variants", required=True, help="comma-separated variant names")
    return p


def _load_config(args):
    cfg = pio.read_config(args.config) if args.config else FitConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        over["total_iters"] = args.iters
    if getattr(args, "pretrain", None) is not None:
        over["pretrain_iters"] = args.pretrain
    if getattr(args, "variant", None) is not None:
        over["variant"] = args.variant
    return dataclasses.replace(cfg, **over) if over else cfg


def _load_target(path):
    gt, tr = normalize(pio.read_pointcloud(path))
    return gt, tr


def _progress(verbose):
    if not verbose:
        return None
    t0 = time.perf_counter()

    def cb(it, bd):
        log.info("%d\t%s\twall=%.3f", it, "\t".join(f"{x:.6g}" for x in bd.as_tuple()), time.perf_counter() - t0)

    return cb


def _write_run(out, cfg, result, command, inputs, extra=None):
    out.mkdir(parents=True, exist_ok=True)
    paths = {"atlas": out / "atlas.bin", "history": out / "history.tsv", "report": out / "report.txt",
             "reports": out / "reports.tsv", "config": out / "fit.cfg"}
    pio.save_atlas(paths["atlas"], result.atlas)
    paths["history"].write_text(history_text(result.history))
    paths["report"].write_text(result.final_report.to_text())
    paths["reports"].write_text(reports_text(result.reports))
    paths["config"].write_text(pio.config_to_text(cfg))
    pio.write_manifest(out / "manifest.json", pio.make_manifest(command, cfg, inputs, paths, extra))


def cmd_gen(args):
    spec = ShapeSpec(args.kind, n=args.n, noise=args.noise, seed=args.seed or 0, params=dict(args.param))
    pio.write_pointcloud(args.out, gen_shape(spec), ascii=args.ascii)
    log.info("wrote %d points to %s", spec.n, args.out)
    return 0


def _from_manifest(args):
    m = pio.read_manifest(args.manifest)
    if m.get("command") != "fit":
        raise ValueError("only fit manifests can be replayed")
    rec = m["inputs"]["input"]
    if args.input is None:
        args.input = rec["path"]
    if pio.file_digest(args.input) != rec["sha256"]:
        raise ValueError(f"{args.input} differs from the input recorded in the manifest")
    cfg = pio.parse_config(m["config"])
    return dataclasses.replace(cfg, seed=args.seed) if args.seed is not None else cfg


def cmd_fit(args):
    if args.manifest:
        cfg = _from_manifest(args)
    elif args.input is None:
        raise ValueError("--input is required without --manifest")
    else:
        cfg = _load_config(args)
    gt, tr = _load_target(args.input)
    f = Fitter(gt, cfg)
    result = f.run(f.init_state(), callback=_progress(args.verbose))
    _write_run(Path(args.out), cfg, result, "fit", {"input": args.input},
               {"normalization": {"center": list(tr.center), "scale": tr.scale}})
    print(result.final_report.to_text(), end="")
    return 0


def cmd_eval(args):
    # metric settings: --config, else the fit.cfg saved beside the atlas, else defaults
    cfg_path = args.config or (Path(args.atlas).parent / "fit.cfg")
    gt, _ = _load_target(args.input)
    atlas = pio.load_atlas(args.atlas)
    if args.config or Path(cfg_path).exists():
        cfg = pio.read_config(cfg_path)
    else:
        cfg = FitConfig(K=atlas.K, hidden=atlas.H, latent_dim=atlas.D, variant="dsp")
    if (cfg.K, cfg.hidden, cfg.latent_dim) != (atlas.K, atlas.H, atlas.D):
        raise pio.ArchitectureMismatchError("atlas does not match the configured architecture")
    text = Fitter(gt, cfg).evaluate(atlas).to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_export(args):
    atlas = pio.load_atlas(args.atlas)
    faces = pio.export_mesh(atlas, args.resolution, args.out)
    log.info("wrote %d patches, %d quads", len(faces), sum(faces))
    return 0


def cmd_ablate(args):
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    cfg = _load_config(args)
    gt, _ = _load_target(args.input)
    results = run_ablation(gt, cfg, variants, callback=_progress(args.verbose))
    out = Path(args.out)
    rows = ["variant\tcd\tm_ae\tm_s\tm_olap"]
    for v, res in results.items():
        _write_run(out / v, cfg.with_variant(v), res, "ablate", {"input": args.input})
        r = res.final_report
        rows.append(v + "\t" + "\t".join("absent" if x is None else repr(float(x)) for x in r.row()))
    table = "\n".join(rows) + "\n"
    (out / "table.tsv").write_text(table)
    print(table, end="")
    return 0


_COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "eval": cmd_eval, "export": cmd_export, "ablate": cmd_ablate}


def cli(argv=None):
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    if args.threads is not None:
        set_num_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"patchstitch {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
