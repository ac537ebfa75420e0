"""Command-line entry point.

Every subcommand works inside one run directory given by ``--out``::

    data/<split>/          generate-data
    source_model.{json,bin} source_loss.csv       train-source
    gmm.json                                       estimate-gmm
    adapted_model.{json,bin} loss.csv              adapt (reads no source data)
    metrics.csv report.json migration_<i>.csv embeddings_{pre,post}.csv   evaluate
    ablation.csv                                   ablate
    manifest.json          config hash and seeds for every artifact written
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import io
from .config import ConfigError, config_hash, config_to_dict, load_config
from .metrics import PIXEL_SPACING, SURFACE_CONNECTIVITY
from .network import NumericalError
from .pipeline import (
    ABLATION_FIELDS,
    Datasets,
    Split,
    ablate,
    adapt,
    estimate_internal,
    evaluate,
    generate_raw,
    train_source,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

SPLITS = ("source_train", "source_val", "target_train", "target_test")
COMMANDS = ("generate-data", "train-source", "estimate-gmm", "adapt", "evaluate", "ablate")

log = logging.getLogger("sfs")


def seeds_of(cfg):
    d = cfg.data
    return {
        "source_seed": d.source_seed,
        "source_val_seed": d.source_val_seed,
        "target_seed": d.target_seed,
        "target_test_seed": d.target_test_seed,
        "init_seed": cfg.network.init_seed,
        "seed": cfg.sfs.seed,
    }


class Run:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.stamp = {"config_hash": config_hash(cfg), "seeds": seeds_of(cfg)}

    def path(self, name):
        return self.out / name

    def split(self, name):
        return Split.from_images(io.load_split(self.out / "data" / name))

    def record(self, stage, *names):
        mpath = self.out / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"artifacts": {}}
        for name in names:
            manifest["artifacts"][name] = dict(self.stamp, stage=stage)
        manifest["config"] = config_to_dict(self.cfg)
        io.write_json(mpath, manifest)


def cmd_generate_data(run: Run):
    for name, images in generate_raw(run.cfg).items():
        io.save_split(run.out / "data" / name, images, run.cfg.data.file_format)
        log.info("wrote %d images to data/%s", len(images), name)
    run.record("generate-data", *(f"data/{s}" for s in SPLITS))


def cmd_train_source(run: Run):
    train, val = run.split("source_train"), run.split("source_val")
    net, tlog = train_source(run.cfg, train, val)
    opt = run.cfg.sfs.source_optim
    io.save_checkpoint(run.path("source_model"), net, optimizer=_optim_dict(opt), step=tlog.best_step,
                       extra=dict(run.stamp, best_val_dice=tlog.best_dice))
    val_dice = dict(tlog.val)
    io.write_csv(run.path("source_loss.csv"), ["step", "ce", "val_dice"],
                 [(s, ce, val_dice.get(s)) for s, ce in tlog.steps])
    run.record("train-source", "source_model.json", "source_model.bin", "source_loss.csv")


def cmd_estimate_gmm(run: Run):
    net, _ = io.load_checkpoint(run.path("source_model"))
    dist, counts = estimate_internal(net, run.split("source_train"), run.cfg)
    io.save_gmm(run.path("gmm.json"), dist, extra=dict(run.stamp, selected_counts=[int(c) for c in counts]))
    run.record("estimate-gmm", "gmm.json")


def cmd_adapt(run: Run):
    # source images are never opened here: only the model, the mixture and target images
    net, _ = io.load_checkpoint(run.path("source_model"))
    dist = io.load_gmm(run.path("gmm.json"))
    target = run.split("target_train")
    adapted, alog = adapt(net, dist, target.images, run.cfg.sfs)
    io.save_checkpoint(run.path("adapted_model"), adapted, optimizer=_optim_dict(run.cfg.sfs.adapt_optim),
                       step=run.cfg.sfs.adapt_iters, extra=run.stamp)
    io.write_csv(run.path("loss.csv"), ["step", "ce", "swd", "total"], alog.rows)
    run.record("adapt", "adapted_model.json", "adapted_model.bin", "loss.csv")


def cmd_evaluate(run: Run):
    test = run.split("target_test")
    k = run.cfg.data.scene.num_classes
    ep = run.cfg.evaluation.embed_pixels_per_image
    source_net, _ = io.load_checkpoint(run.path("source_model"))
    reports = {"source_only": evaluate(source_net, test, embed_pixels=ep, seed=run.cfg.sfs.seed)}
    if run.path("adapted_model.json").exists():
        adapted, _ = io.load_checkpoint(run.path("adapted_model"))
        reports["adapted"] = evaluate(adapted, test, baseline_pred=reports["source_only"].predictions,
                                      embed_pixels=ep, seed=run.cfg.sfs.seed)
    written = write_reports(run, reports, k)
    run.record("evaluate", *written)
    for phase, rep in reports.items():
        log.info("%s macro dice %.4f macro assd %s", phase, rep.macro_dice, rep.macro_assd)


def write_reports(run: Run, reports, k):
    rows = []
    for phase, rep in reports.items():
        for i, scores in enumerate(rep.per_image):
            for c in range(k):
                rows.append((phase, i, c, scores.dice[c], scores.assd[c]))
    io.write_csv(run.path("metrics.csv"), ["phase", "image_id", "class", "dice", "assd"], rows)
    written = ["metrics.csv", "report.json"]
    summary = dict(
        run.stamp,
        conventions={"surface_connectivity": SURFACE_CONNECTIVITY, "pixel_spacing": PIXEL_SPACING,
                     "macro_classes": list(range(1, k))},
        phases={phase: rep.summary() for phase, rep in reports.items()},
    )
    if "adapted" in reports:
        post = reports["adapted"]
        summary["dice_gain"] = post.macro_dice - reports["source_only"].macro_dice
        summary["migration_absent_rows"] = [i for i, r in enumerate(post.migration.cells) if r is None]
        for i, row in enumerate(post.migration.cells):
            name = f"migration_{i}.csv"
            cells = [] if row is None else [(j, *cell) for j, cell in enumerate(row)]
            io.write_csv(run.path(name), ["dest_class", "pct_moved", "pct_true_source", "pct_true_dest"], cells)
            written.append(name)
    for phase, tag in (("source_only", "pre"), ("adapted", "post")):
        rep = reports.get(phase)
        if rep is None or rep.embeddings is None:
            continue
        f = rep.embeddings.shape[1]
        header = [f"x{j}" for j in range(f)] + ["pred", "true"]
        rows = [(*z, int(p), int(t)) for z, p, t in zip(rep.embeddings, rep.embed_pred, rep.embed_true)]
        name = f"embeddings_{tag}.csv"
        io.write_csv(run.path(name), header, rows)
        written.append(name)
    io.write_json(run.path("report.json"), summary)
    return written


def cmd_ablate(run: Run):
    data = None
    if (run.out / "data").is_dir():
        data = _load_datasets(run)
    source_net = None
    if run.path("source_model.json").exists():
        source_net, _ = io.load_checkpoint(run.path("source_model"))
    ab = run.cfg.ablation
    rows = ablate(ab.kind, ab.grid, run.cfg, data=data, source_net=source_net)
    k = run.cfg.data.scene.num_classes
    header = ABLATION_FIELDS + ["dice_diff"] + [f"{m}_{c}" for m in ("dice", "assd") for c in range(k)]
    io.write_csv(run.path("ablation.csv"), header, [[r.get(h) for h in header] for r in rows])
    run.record("ablate", "ablation.csv")


def _load_datasets(run: Run):
    return Datasets(**{s: run.split(s) for s in SPLITS})


def _optim_dict(oc):
    return {"lr": oc.lr, "eps": oc.eps, "decay": oc.decay, "beta1": oc.beta1, "beta2": oc.beta2}


HANDLERS = {
    "generate-data": cmd_generate_data,
    "train-source": cmd_train_source,
    "estimate-gmm": cmd_estimate_gmm,
    "adapt": cmd_adapt,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="sfs", description="Source-free segmentation adaptation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the training/adaptation seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(sfs={"seed": args.seed})
        HANDLERS[args.command](Run(cfg, args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, io.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
