"""Command-line entry point.

Subcommands::

    gen-data         write synthetic pairs (one directory per pair)
    train            train on pair directories, write checkpoint + loss trace
    register         apply a checkpoint to a pair, write phi and warped volume
    evaluate         Dice / ASSD / folding report for a pair and a field
    analyze-experts  expert-load table and per-voxel expert-id maps
    ablate           train and evaluate the seven MoA / SHMoE configurations

A pair directory holds fixed.shmv, moving.shmv, fixed_seg.shmv,
moving_seg.shmv and (for generated data) gt_field.shmv.

Exit status: 0 success, 2 usage or configuration error, 3 I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import ABLATION_GRID, RunConfig
from .decoder import head_parameter_count, stage_name
from .encoder import ConfigError
from .model import expert_load_tables, forward, shmoe_expert_maps
from .numerics import NumericError
from .synthetic import SyntheticPair, generate_pair
from .train import checkpoint_bytes, evaluate_pair, format_trace, model_from_checkpoint, register, train
from .volume_io import SegVolume, Volume, read_volume, write_volume

log = logging.getLogger("shmoareg")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4
PAIR_FILES = ("fixed", "moving", "fixed_seg", "moving_seg")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- pair files

def write_pair(directory, pair: SyntheticPair):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in PAIR_FILES + ("gt_field",):
        write_volume(d / f"{name}.shmv", getattr(pair, name))


def read_pair(directory) -> SyntheticPair:
    d = Path(directory)
    vols = {name: read_volume(d / f"{name}.shmv") for name in PAIR_FILES}
    for name in ("fixed", "moving"):
        if not isinstance(vols[name], Volume):
            raise UsageError(f"{d / name}.shmv holds labels, expected intensities")
    for name in ("fixed_seg", "moving_seg"):
        if not isinstance(vols[name], SegVolume):
            raise UsageError(f"{d / name}.shmv holds intensities, expected labels")
    gt = d / "gt_field.shmv"
    return SyntheticPair(gt_field=read_volume(gt) if gt.exists() else None, **vols)


# ---------------------------------------------------------------- config

def parse_levels(text: str) -> tuple:
    """``"1,1/2"`` -> ("1", "1/2"); ``""`` or ``"none"`` -> ()."""
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    return tuple(p.strip() for p in text.split(",") if p.strip())


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        over["iterations"] = args.iterations
    if getattr(args, "diff", False):
        over["diffeomorphic"] = True
    if getattr(args, "levels", None) is not None:
        over["shmoe_levels"] = parse_levels(args.levels)
    return cfg.replace(**over) if over else cfg


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pairs(args, cfg: RunConfig, required=True):
    if args.pairs:
        return [read_pair(p) for p in args.pairs]
    if required:
        raise UsageError("--pairs is required")
    return [generate_pair(nm.rng(cfg.seed + 1), cfg.size, cfg.spacing, cfg.max_disp, cfg.smoothness)]


def _checkpoint(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return model_from_checkpoint(Path(args.checkpoint).read_bytes())


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = load_config(args)
    out = _out_dir(args)
    gen = nm.rng(cfg.seed)
    for i in range(args.count):
        pair = generate_pair(gen, cfg.size, cfg.spacing, cfg.max_disp, cfg.smoothness)
        target = out if args.count == 1 else out / f"pair{i:03d}"
        write_pair(target, pair)
        log.info("wrote %s", target)


def cmd_train(args):
    cfg = load_config(args)
    out = _out_dir(args)
    pairs = _pairs(args, cfg)

    def report(it, step):
        if it % 25 == 0 or it == cfg.iterations - 1:
            log.info("iter %d total %.6f sim %.6f reg %.6f rc %.4f", it, step.total, step.sim, step.reg, step.rc)

    res = train(cfg, pairs, callback=report)
    (out / "checkpoint.shmc").write_bytes(checkpoint_bytes(res.model, cfg))
    (out / "loss_trace.tsv").write_text(format_trace(res.trace))
    log.info("wrote %s", out / "checkpoint.shmc")


def cmd_register(args):
    model, _ = _checkpoint(args)
    out = _out_dir(args)
    for i, pair in enumerate(_pairs(args, None)):
        phi, warped = register(model, pair.moving.data, pair.fixed.data)
        target = out if len(args.pairs) == 1 else out / f"pair{i:03d}"
        target.mkdir(parents=True, exist_ok=True)
        write_volume(target / "phi.shmv", Volume(phi, pair.fixed.spacing))
        write_volume(target / "warped.shmv", Volume(warped, pair.fixed.spacing))


def cmd_evaluate(args):
    out = _out_dir(args)
    if not args.pairs or len(args.pairs) != 1:
        raise UsageError("evaluate takes exactly one --pairs directory")
    pair = read_pair(args.pairs[0])
    if args.field:
        field = read_volume(args.field)
        if not isinstance(field, Volume) or field.data.shape[0] != 3:
            raise UsageError(f"{args.field} is not a 3-channel displacement field")
        phi = field.data
    else:
        phi = np.zeros((3,) + pair.fixed_seg.labels.shape)
    rep = evaluate_pair(pair, phi)
    (out / "report.tsv").write_text(rep.to_text())
    log.info("mean dice %.2f%%  mean assd %.3f  folding %.4f%%", rep.mean_dice, rep.mean_assd, rep.folding)


def expert_tables_text(rows) -> str:
    lines = ["layer\texpert\tload_pct"]
    for name, loads in rows:
        lines += [f"{name}\t{e}\t{float(v)!r}" for e, v in enumerate(loads)]
    return "\n".join(lines) + "\n"


def cmd_analyze_experts(args):
    model, cfg = _checkpoint(args)
    out = _out_dir(args)
    pair = _pairs(args, cfg)[0]
    res = forward(model, pair.moving.data, pair.fixed.data)
    rows = expert_load_tables(res, cfg.moa_experts)
    (out / "expert_load.tsv").write_text(expert_tables_text(rows))
    spacing = pair.fixed.spacing
    for (s, d), ids in shmoe_expert_maps(res).items():
        name = f"expert_map_res{stage_name(s).replace('/', '-')}_dir{'xyz'[d]}.shmv"
        stride = 2 ** s
        write_volume(out / name, SegVolume(ids, tuple(sp * stride for sp in spacing)))
    log.info("%d load rows, %d expert maps", len(rows), len(shmoe_expert_maps(res)))


def cmd_ablate(args):
    base = load_config(args)
    out = _out_dir(args)
    pairs = _pairs(args, base, required=False)
    lines = ["moa\tshmoe_levels\tparams\thead_params\tinitial_sim\tfinal_sim\tdice_pct\tfolding_pct"]
    for moa, levels in ABLATION_GRID:
        cfg = base.replace(moa=moa, shmoe_levels=levels)
        res = train(cfg, pairs)
        phi, _ = register(res.model, pairs[0].moving.data, pairs[0].fixed.data)
        rep = evaluate_pair(pairs[0], phi)
        heads = ",".join(str(head_parameter_count(h)) for h in res.model.decoder.heads)
        sim0 = res.trace[0][2] if res.trace else float("nan")
        sim1 = res.trace[-1][2] if res.trace else float("nan")
        tag = ",".join(levels) if levels else "none"
        lines.append(f"{str(moa).lower()}\t{tag}\t{res.model.parameter_count()}\t{heads}\t{sim0!r}\t{sim1!r}\t"
                     f"{rep.mean_dice!r}\t{rep.folding!r}")
        log.info("moa=%s shmoe=%s dice %.2f%%", moa, tag, rep.mean_dice)
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "analyze-experts": cmd_analyze_experts,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shmoareg", description="Mixture-of-experts deformable registration")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value run configuration file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--pairs", nargs="+", help="pair directories")
        p.add_argument("--checkpoint", help="checkpoint file written by train")
        p.add_argument("--diff", action="store_true", help="diffeomorphic variant (integrated residuals)")
        p.add_argument("--levels", help="comma separated SHMoE stages, e.g. 1,1/2 (or none)")
        p.add_argument("--iterations", type=int, help="overrides the config iteration count")
        if name == "gen-data":
            p.add_argument("--count", type=int, default=1, help="number of pairs")
        if name == "evaluate":
            p.add_argument("--field", help="displacement field volume (identity if omitted)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"shmoareg {args.command}: {exc}", file=sys.stderr)
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"shmoareg {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"shmoareg {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
