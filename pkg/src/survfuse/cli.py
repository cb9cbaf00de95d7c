"""Command-line interface.

Subcommands: simulate, pretrain, train, evaluate, predict, latefusion,
export-embeddings. Every stochastic command requires --seed.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import pipeline as P
from .config import RunConfig, load_config
from .data import read_volume
from .errors import SurvfuseError
from .synth import generate_synthetic_cohort


def _load_run_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _split_cohort(bundle, cfg, audit=None):
    audit = audit or P.SplitAudit()
    splits = P.stratified_split(bundle.table, cfg.split, cfg.seed)
    return P.SplitCohort(bundle, splits, audit), audit


def _write_json(path, payload):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def cmd_simulate(args):
    cfg = _load_run_config(args)
    sim = cfg.simulate
    cohort = generate_synthetic_cohort(
        cfg.seed,
        args.n or sim.n,
        {
            "beta_clinical": sim.beta_clinical,
            "beta_image": sim.beta_image,
            "beta_interaction": sim.beta_interaction,
        },
        sim.censor_rate,
        dims=tuple(cfg.encoder.dims),
    )
    truth = {
        "seed": cfg.seed,
        "true_risk": {pid: float(r) for pid, r in zip(cohort.table.ids, cohort.true_risk)},
        "lesion_radius": {pid: float(r) for pid, r in zip(cohort.table.ids, cohort.lesion_radius)},
    }
    P.save_cohort_dir(
        args.out,
        P.CohortBundle(table=cohort.table, volumes=cohort.volumes),
        extra_meta=truth,
    )
    print(f"wrote cohort of {len(cohort.table)} to {args.out}")


def cmd_pretrain(args):
    cfg = _load_run_config(args)
    names = sorted(f for f in os.listdir(args.volumes) if f.endswith(".mmgs"))
    if not names:
        raise SurvfuseError(f"no .mmgs volumes in {args.volumes}")
    volumes = [read_volume(os.path.join(args.volumes, f)) for f in names]
    enc_ckpt = P.pretrain_encoder(volumes, cfg)
    P.save_encoder_checkpoint(args.out, enc_ckpt)
    hist = enc_ckpt.history
    print(
        f"pretrained on {len(volumes)} volumes: held-out loss "
        f"{hist['heldout_before']:.4f} -> {hist['heldout_after']:.4f}; wrote {args.out}"
    )


def cmd_train(args):
    cfg = _load_run_config(args)
    bundle = P.load_cohort_dir(args.data, with_volumes=args.modality != "clinical")
    sc, audit = _split_cohort(bundle, cfg)
    encoder = None
    if args.modality != "clinical" and not args.end_to_end:
        if not args.encoder:
            raise SurvfuseError("imaging/multimodal training needs --encoder "
                                "(or --end-to-end)")
        encoder = P.load_encoder_checkpoint(args.encoder)
    ckpt = P.train_survival_model(
        sc, cfg, args.modality, encoder=encoder, end_to_end=args.end_to_end
    )
    P.save_checkpoint(args.out, ckpt)
    curve = ckpt["training_curve"]["val_ctd"]
    print(
        f"trained {args.modality} model: best val Ctd {max(curve):.3f} "
        f"at epoch {ckpt['best_epoch']}; wrote {args.out}"
    )
    if audit.quarantine_violations():
        raise SurvfuseError(f"split quarantine violated: {audit.quarantine_violations()}")


def cmd_evaluate(args):
    cfg = _load_run_config(args)
    ckpt = P.load_checkpoint(args.checkpoint)
    sc = None
    audit = P.SplitAudit()
    if args.data:
        bundle = P.load_cohort_dir(args.data, with_volumes=ckpt["modality"] != "clinical")
        sc = P.SplitCohort(
            bundle, {k: np.asarray(v) for k, v in ckpt["split_indices"].items()}, audit
        )
    externals = [
        P.load_cohort_dir(spec.split("=", 1)[1], name=spec.split("=", 1)[0],
                          with_volumes=ckpt["modality"] != "clinical")
        for spec in args.external
    ]
    report = P.evaluate_checkpoint(
        ckpt, sc, externals=externals, n_boot=args.bootstrap or cfg.bootstrap, seed=cfg.seed
    )
    report["audit"] = audit.to_json()
    _write_json(args.out, report)
    for name, entry in report["cohorts"].items():
        lo, hi = entry["ctd_ci"]
        print(
            f"{name}: Ctd {entry['ctd']:.3f} "
            f"({(lo + hi) / 2:.3f} +/- {(hi - lo) / 2:.3f}), "
            f"IBS {entry['ibs']:.3f}, logrank p {entry['logrank_p']}"
        )


def cmd_predict(args):
    ckpt = P.load_checkpoint(args.checkpoint)
    bundle = P.load_cohort_dir(args.data, with_volumes=ckpt["modality"] != "clinical")
    curves = P.predict_monthly(ckpt, bundle.table, bundle.volumes, horizon=args.horizon)
    _write_json(args.out, curves)
    print(f"wrote {len(curves)} monthly survival curves to {args.out}")


def cmd_latefusion(args):
    cfg = _load_run_config(args)
    bundle = P.load_cohort_dir(args.data)
    sc, audit = _split_cohort(bundle, cfg)
    encoder = P.load_encoder_checkpoint(args.encoder)
    report, _fit = P.late_fusion_baseline(sc, cfg, encoder, n_boot=args.bootstrap or cfg.bootstrap)
    report["audit"] = audit.to_json()
    _write_json(args.out, report)
    print(f"late fusion: Ctd {report['ctd']:.3f}, index z {report['index_z']:.2f}")


def cmd_export_embeddings(args):
    ckpt = P.load_checkpoint(args.checkpoint)
    bundle = P.load_cohort_dir(args.data, with_volumes=ckpt["modality"] != "clinical")
    d = P.export_embeddings(ckpt, bundle.table, bundle.volumes, args.out)
    print(f"wrote {len(bundle.table)} embeddings of width {d} to {args.out}")


def build_parser():
    top = argparse.ArgumentParser(prog="survfuse", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)

    def add(name, fn, seed_required, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="run-config JSON")
        p.add_argument("--seed", type=int, required=seed_required)
        return p

    p = add("simulate", cmd_simulate, True, help="generate a synthetic cohort")
    p.add_argument("--n", type=int, help="cohort size (overrides config)")
    p.add_argument("--out", required=True, help="output cohort directory")

    p = add("pretrain", cmd_pretrain, True, help="self-supervised encoder pretraining")
    p.add_argument("--volumes", required=True, help="directory of .mmgs volumes")
    p.add_argument("--out", required=True, help="encoder checkpoint (.npz)")

    p = add("train", cmd_train, True, help="train a survival model")
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--modality", required=True, choices=["clinical", "imaging", "multimodal"])
    p.add_argument("--encoder", help="frozen encoder checkpoint")
    p.add_argument("--end-to-end", action="store_true",
                   help="train the volume encoder from scratch (ablation arm)")
    p.add_argument("--out", required=True, help="model checkpoint (.npz)")

    p = add("evaluate", cmd_evaluate, True, help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="training cohort directory (evaluates its test split)")
    p.add_argument("--external", action="append", default=[], metavar="NAME=DIR",
                   help="external cohort directory (repeatable)")
    p.add_argument("--bootstrap", type=int, help="bootstrap resamples")
    p.add_argument("--out", default="-", help="report JSON path (default stdout)")

    p = add("predict", cmd_predict, False, help="per-patient monthly survival curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, help="months (default: last grid edge)")
    p.add_argument("--out", default="-")

    p = add("latefusion", cmd_latefusion, True,
            help="image-index + CoxPH late-fusion baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--out", default="-")

    p = add("export-embeddings", cmd_export_embeddings, False,
            help="pooled fused embeddings with labels, for external t-SNE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    return top


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except SurvfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
