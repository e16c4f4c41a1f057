"""Pipeline orchestration: one config file, nine subcommands.

Stage order follows the three-stage training scheme: make-data trains the
attribute oracle alongside the synthetic dataset, train-gan fits the
generator on images alone, project inverts training images to latent
codes, train-align fits the text-to-latent encoder, and train-retrieval /
evaluate / ablate run the downstream retrieval experiments. Every stage
writes a RunManifest and is a no-op when its config and input hashes are
unchanged.

Exit codes: 0 success, 2 config error, 3 missing/stale artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import (aligner, augmentor, datakit, evalkit, ganlite, oracle,
               projector, retriever)
from .config import ConfigError, PipelineConfig, load_config
from .manifests import MissingArtifactError, StaleArtifactError, run_stage
from .seeding import derive_seed, np_rng, torch_gen

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4

ROOT_ENV = "PAIRAUG_ROOT"


# ---------------------------------------------------------------------------
# Paths


def data_dir(root: Path) -> Path:
    return root / "data"


def oracle_dir(root: Path) -> Path:
    return root / "oracle"


def gan_dir(root: Path) -> Path:
    return root / "gan"


def projection_dir(root: Path) -> Path:
    return root / "projection"


def alignment_dir(root: Path) -> Path:
    return root / "alignment"


def run_label(mode: str, r: float, strategy: str, seed_index: int) -> str:
    return f"{mode}_r{r:g}_{strategy}_s{seed_index}"


def retrieval_dir(root: Path, label: str) -> Path:
    return root / "retrieval" / label


def eval_dir(root: Path, label: str) -> Path:
    return root / "eval" / label


def resolve_root(args, cfg: PipelineConfig) -> Path:
    if getattr(args, "root", None):
        return Path(args.root)
    env = os.environ.get(ROOT_ENV)
    if env:
        return Path(env)
    return Path(cfg.artifact_root)


# ---------------------------------------------------------------------------
# Stage builders


def _load_dataset(root: Path) -> datakit.Dataset:
    return datakit.load_dataset(data_dir(root))


def cmd_make_data(args, cfg: PipelineConfig, root: Path) -> dict:
    out_data = data_dir(root)

    def build_data() -> dict:
        ds = datakit.generate_synth_dataset(
            cfg.dataset, out_data, np_rng(cfg.seed, "data"))
        return {"captions": len(ds.captions),
                "images": len(ds.images),
                "vocab_size": len(ds.vocab)}

    m1, skip1 = run_stage(
        "make-data", out_data,
        {"dataset": dataclasses.asdict(cfg.dataset), "seed": cfg.seed},
        inputs={}, producers={}, builder=build_data, force=args.force)

    out_oracle = oracle_dir(root)

    def build_oracle() -> dict:
        ds = _load_dataset(root)
        net = oracle.train_oracle(ds, cfg.oracle, torch_gen(cfg.seed, "oracle"))
        oracle.save_oracle(net, out_oracle)
        acc = oracle.clean_accuracy(net, ds, "test")
        return {"clean_accuracy": {k: round(v, 4) for k, v in acc.items()}}

    m2, skip2 = run_stage(
        "oracle", out_oracle,
        {"oracle": dataclasses.asdict(cfg.oracle), "seed": cfg.seed},
        inputs={"data": out_data}, producers={"data": "make-data"},
        builder=build_oracle, force=args.force)

    return {"stage": "make-data",
            "status": "skipped" if (skip1 and skip2) else "ok",
            "outputs": [str(out_data), str(out_oracle)],
            "summary": {**m1["summary"], **m2["summary"]}}


def cmd_train_gan(args, cfg: PipelineConfig, root: Path) -> dict:
    out = gan_dir(root)

    def build() -> dict:
        ds = _load_dataset(root)
        state = ganlite.train_gan(ds, cfg.gan, cfg.seed, out)
        last = state.loss_history[-1] if state.loss_history else (0, 0.0, 0.0, 0.0)
        return {"steps": state.step,
                "d_loss": round(last[1], 4), "g_loss": round(last[2], 4)}

    manifest, skipped = run_stage(
        "train-gan", out,
        {"gan": dataclasses.asdict(cfg.gan), "seed": cfg.seed},
        inputs={"data": data_dir(root)}, producers={"data": "make-data"},
        builder=build, force=args.force)
    return {"stage": "train-gan", "status": "skipped" if skipped else "ok",
            "outputs": [str(out)], "summary": manifest["summary"]}


def _load_extractor(cfg: PipelineConfig, root: Path):
    if cfg.projection.extractor == "oracle":
        net = oracle.load_oracle(oracle_dir(root))
    else:
        net = oracle.OracleNet(cfg.dataset.resolution,
                               feature_dim=cfg.oracle.feature_dim,
                               generator=torch_gen(cfg.seed, "extractor"))
    return projector.build_extractor(net)


def cmd_project(args, cfg: PipelineConfig, root: Path) -> dict:
    out = projection_dir(root)
    inputs = {"data": data_dir(root), "gan": gan_dir(root)}
    producers = {"data": "make-data", "gan": "train-gan",
                 "oracle": "make-data"}
    if cfg.projection.extractor == "oracle":
        inputs["oracle"] = oracle_dir(root)

    def build() -> dict:
        ds = _load_dataset(root)
        gan = ganlite.load_gan(gan_dir(root))
        extractor = _load_extractor(cfg, root)
        stats = projector.estimate_w_stats(
            gan, cfg.projection.n_stat_samples, torch_gen(cfg.seed, "wstats"))
        store = projector.project_dataset(
            gan, extractor, ds, stats, cfg.projection, cfg.seed, out)
        ratios = store.final_losses / np.maximum(store.initial_losses, 1e-12)
        return {"images": len(store.ids),
                "median_loss_ratio": round(float(np.median(ratios)), 4),
                "sigma2_w": round(stats.sigma2_w, 4)}

    manifest, skipped = run_stage(
        "project", out,
        {"projection": dataclasses.asdict(cfg.projection), "seed": cfg.seed},
        inputs=inputs, producers=producers, builder=build, force=args.force)
    return {"stage": "project", "status": "skipped" if skipped else "ok",
            "outputs": [str(out)], "summary": manifest["summary"]}


def cmd_train_align(args, cfg: PipelineConfig, root: Path) -> dict:
    out = alignment_dir(root)

    def build() -> dict:
        ds = _load_dataset(root)
        store = projector.load_latent_store(projection_dir(root))
        aligner.train_alignment(ds, store, cfg.alignment, cfg.seed, out)
        with open(out / "loss_history.csv") as f:
            rows = list(csv.DictReader(f))
        return {"epochs": len(rows),
                "final_loss": round(float(rows[-1]["train_loss"]), 4) if rows else None}

    manifest, skipped = run_stage(
        "train-align", out,
        {"alignment": dataclasses.asdict(cfg.alignment), "seed": cfg.seed},
        inputs={"data": data_dir(root), "projection": projection_dir(root)},
        producers={"data": "make-data", "projection": "project"},
        builder=build, force=args.force)
    return {"stage": "train-align", "status": "skipped" if skipped else "ok",
            "outputs": [str(out)], "summary": manifest["summary"]}


def cmd_augment(args, cfg: PipelineConfig, root: Path) -> dict:
    out = root / "augpairs" / str(cfg.seed)

    def build() -> dict:
        ds = _load_dataset(root)
        enc = aligner.load_aligner(alignment_dir(root), ds.vocab)
        gan = ganlite.load_gan(gan_dir(root))
        count = augmentor.augment_offline(
            ds, cfg.augmentation.replacement(), enc, gan, cfg.seed, out,
            scale=cfg.augmentation.scale)
        return {"pairs": count, "r": cfg.augmentation.r,
                "strategy": cfg.augmentation.strategy}

    manifest, skipped = run_stage(
        "augment", out,
        {"augmentation": dataclasses.asdict(cfg.augmentation), "seed": cfg.seed},
        inputs={"data": data_dir(root), "alignment": alignment_dir(root),
                "gan": gan_dir(root)},
        producers={"data": "make-data", "alignment": "train-align",
                   "gan": "train-gan"},
        builder=build, force=args.force)
    return {"stage": "augment", "status": "skipped" if skipped else "ok",
            "outputs": [str(out)], "summary": manifest["summary"]}


def _arm_params(args, cfg: PipelineConfig) -> tuple[str, float, str, float, int]:
    mode = getattr(args, "mode", None) or cfg.retrieval.mode
    r = cfg.augmentation.r if getattr(args, "r", None) is None else args.r
    strategy = getattr(args, "strategy", None) or cfg.augmentation.strategy
    scale = (cfg.augmentation.scale if getattr(args, "scale", None) is None
             else args.scale)
    seed_index = getattr(args, "seed_index", 0) or 0
    return mode, r, strategy, scale, seed_index


def _run_retrieval_arm(cfg: PipelineConfig, root: Path, mode: str, r: float,
                       strategy: str, scale: float, seed_index: int,
                       force: bool) -> tuple[str, dict, bool]:
    if mode == "baseline" and r > 0:
        raise ConfigError(
            "baseline mode is the r = 0 arm; set r to 0 or pick joint mode")
    label = run_label(mode, r, strategy, seed_index)
    out = retrieval_dir(root, label)
    rcfg = dataclasses.replace(cfg.retrieval, mode=mode, scale=scale)
    try:
        aug = augmentor.ReplacementConfig(
            r=r, strategy=strategy,
            exclude_original=cfg.augmentation.exclude_original)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run_seed = derive_seed(cfg.seed, "retrieval-arm", label)

    inputs = {"data": data_dir(root)}
    producers = {"data": "make-data", "alignment": "train-align",
                 "gan": "train-gan"}
    needs_checkpoints = mode not in ("baseline", "text_only")
    if needs_checkpoints:
        inputs["alignment"] = alignment_dir(root)
        inputs["gan"] = gan_dir(root)

    def build() -> dict:
        ds = _load_dataset(root)
        enc = gan = None
        if needs_checkpoints:
            enc = aligner.load_aligner(alignment_dir(root), ds.vocab)
            gan = ganlite.load_gan(gan_dir(root))
        retriever.train_retrieval(ds, rcfg, aug, run_seed, out,
                                  aligner_enc=enc, gan=gan)
        meta = json.loads((out / "retrieval.json").read_text())
        return {"label": label, "best_epoch": meta["best_epoch"],
                "best_val_r1": meta["best_val_r1"]}

    manifest, skipped = run_stage(
        f"train-retrieval:{label}", out,
        {"retrieval": dataclasses.asdict(rcfg),
         "augmentation": dataclasses.asdict(aug),
         "run_seed": run_seed},
        inputs=inputs, producers=producers, builder=build, force=force)
    return label, manifest, skipped


def cmd_train_retrieval(args, cfg: PipelineConfig, root: Path) -> dict:
    mode, r, strategy, scale, seed_index = _arm_params(args, cfg)
    label, manifest, skipped = _run_retrieval_arm(
        cfg, root, mode, r, strategy, scale, seed_index, args.force)
    return {"stage": "train-retrieval",
            "status": "skipped" if skipped else "ok",
            "outputs": [str(retrieval_dir(root, label))],
            "summary": manifest["summary"]}


def _run_eval(cfg: PipelineConfig, root: Path, label: str, force: bool,
              ) -> tuple[dict, bool]:
    out = eval_dir(root, label)
    run = retrieval_dir(root, label)
    eval_seed = cfg.eval.seed if cfg.eval.seed is not None else cfg.seed

    def build() -> dict:
        ds = _load_dataset(root)
        encs = retriever.load_retrieval(run, "best")
        records = ds.split_records("test")
        f_img = retriever.embed_images(
            encs, np.stack([ds.images[rec.image_id] for rec in records]))
        f_txt = retriever.embed_texts(encs, ds.vocab,
                                      [rec.tokens for rec in records])
        class_ids = ([rec.class_id for rec in records]
                     if cfg.eval.protocol == "class" else None)
        rng = np_rng(eval_seed, "eval", label)
        report = evalkit.sampled_recall_protocol(
            f_img, f_txt, n=cfg.eval.n, repeats=cfg.eval.repeats, rng=rng,
            seed=eval_seed, class_ids=class_ids)
        evalkit.report(report, out)
        return {"label": label, "i2t_r1": round(report.i2t["r1"], 4),
                "t2i_r1": round(report.t2i["r1"], 4)}

    manifest, skipped = run_stage(
        f"evaluate:{label}", out,
        {"eval": dataclasses.asdict(cfg.eval), "eval_seed": eval_seed,
         "label": label},
        inputs={"data": data_dir(root), "run": run},
        producers={"data": "make-data", "run": "train-retrieval"},
        builder=build, force=force)
    return manifest, skipped


def cmd_evaluate(args, cfg: PipelineConfig, root: Path) -> dict:
    if args.run:
        label = args.run
    else:
        mode, r, strategy, scale, seed_index = _arm_params(args, cfg)
        label = run_label(mode, r, strategy, seed_index)
    manifest, skipped = _run_eval(cfg, root, label, args.force)
    return {"stage": "evaluate", "status": "skipped" if skipped else "ok",
            "outputs": [str(eval_dir(root, label))],
            "summary": manifest["summary"]}


# ---------------------------------------------------------------------------
# Ablations


def _parse_values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --values list {text!r}: {exc}") from exc


def _ablate_arms(args, cfg: PipelineConfig) -> tuple[str, list[dict]]:
    base_r = cfg.augmentation.r
    preset = args.preset
    if args.grid == "r" or preset == "paper-table1":
        values = (_parse_values(args.values) if args.values
                  else [round(0.1 * i, 1) for i in range(11)])
        arms = []
        for r in values:
            mode = "baseline" if r == 0.0 else "joint"
            arms.append({"name": f"r={r:g}", "mode": mode, "r": r,
                         "strategy": "random", "scale": cfg.augmentation.scale})
        return "table1", arms
    if preset == "paper-table2":
        return "table2", [
            {"name": s, "mode": "joint", "r": base_r, "strategy": s,
             "scale": cfg.augmentation.scale}
            for s in ("random", "pos")]
    if preset == "paper-table3":
        sc = cfg.augmentation.scale
        return "table3", [
            {"name": "joint", "mode": "joint", "r": base_r,
             "strategy": "random", "scale": sc},
            {"name": "noise_pair", "mode": "noise_pair", "r": min(base_r, 0.3),
             "strategy": "random", "scale": sc},
            {"name": "text_only", "mode": "text_only", "r": base_r,
             "strategy": "random", "scale": sc},
            {"name": "unpaired", "mode": "unpaired", "r": base_r,
             "strategy": "random", "scale": sc},
            {"name": "scale=0.9", "mode": "joint", "r": base_r,
             "strategy": "random", "scale": 0.9},
            {"name": "scale=1.1", "mode": "joint", "r": base_r,
             "strategy": "random", "scale": 1.1},
        ]
    raise ConfigError("ablate needs --preset paper-table{1,2,3} or --grid r")


def cmd_ablate(args, cfg: PipelineConfig, root: Path) -> dict:
    name, arms = _ablate_arms(args, cfg)
    out = root / "ablate" / name
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seeds))
    rows = []
    for arm in arms:
        per_seed = []
        for seed_index in seeds:
            label, _, _ = _run_retrieval_arm(
                cfg, root, arm["mode"], arm["r"], arm["strategy"],
                arm["scale"], seed_index, args.force)
            manifest, _ = _run_eval(cfg, root, label, args.force)
            metrics = json.loads(
                (eval_dir(root, label) / "metrics.json").read_text())
            per_seed.append(metrics)
        row = {"arm": arm["name"], "mode": arm["mode"], "r": arm["r"],
               "strategy": arm["strategy"], "scale": arm["scale"],
               "seeds": len(seeds)}
        for direction in ("i2t", "t2i"):
            for k in ("r1", "r5", "r10"):
                vals = [m[direction][k] for m in per_seed]
                row[f"{direction}_{k}"] = round(float(np.median(vals)), 4)
        rows.append(row)

    cols = ["arm", "mode", "r", "strategy", "scale", "seeds",
            "i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10"]
    with open(out / "table.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)
    datakit._write_json(out / "table.json", {"preset": name, "rows": rows})
    return {"stage": "ablate", "status": "ok",
            "outputs": [str(out / "table.csv"), str(out / "table.json")],
            "summary": {"preset": name, "arms": len(rows),
                        "seeds": len(seeds)}}


# ---------------------------------------------------------------------------
# Report


def cmd_report(args, cfg: PipelineConfig, root: Path) -> dict:
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(root)
    enc = aligner.load_aligner(alignment_dir(root), ds.vocab)
    gan = ganlite.load_gan(gan_dir(root))

    r_values = _parse_values(args.r_values) if args.r_values else [0.0, 0.3, 0.7, 1.0]
    records = ds.split_records("test")[:args.examples]
    rows = []
    for rec in records:
        row = [ds.images[rec.image_id]]
        for j, r in enumerate(r_values):
            rng = np_rng(cfg.seed, "report", rec.caption_id, j)
            aug = augmentor.ReplacementConfig(r=r, strategy=cfg.augmentation.strategy)
            pair = augmentor.generate_augmented_pair(
                rec, aug, enc, ds.vocab, ds.pos_vocab, gan, rng, seed=cfg.seed)
            row.append(pair.image_prime)
        rows.append(row)
    evalkit.save_montage(rows, out / "montage.png")

    lines = ["# Run report", ""]
    eval_root = root / "eval"
    if eval_root.exists():
        lines.append("## Retrieval metrics")
        lines.append("")
        lines.append("| run | i2t R@1 | i2t R@5 | i2t R@10 | t2i R@1 | t2i R@5 | t2i R@10 |")
        lines.append("|---|---|---|---|---|---|---|")
        for mfile in sorted(eval_root.glob("*/metrics.json")):
            m = json.loads(mfile.read_text())
            lines.append(
                "| {} | {r1:.2f} | {r5:.2f} | {r10:.2f} | {t1:.2f} | {t5:.2f} | {t10:.2f} |".format(
                    mfile.parent.name,
                    r1=m["i2t"]["r1"], r5=m["i2t"]["r5"], r10=m["i2t"]["r10"],
                    t1=m["t2i"]["r1"], t5=m["t2i"]["r5"], t10=m["t2i"]["r10"]))
        lines.append("")
    ablate_root = root / "ablate"
    if ablate_root.exists():
        for tfile in sorted(ablate_root.glob("*/table.json")):
            table = json.loads(tfile.read_text())
            lines.append(f"## Ablation: {table['preset']}")
            lines.append("")
            lines.append("| arm | i2t R@1 | t2i R@1 |")
            lines.append("|---|---|---|")
            for row in table["rows"]:
                lines.append(f"| {row['arm']} | {row['i2t_r1']:.2f} | {row['t2i_r1']:.2f} |")
            lines.append("")
    lines.append(f"Montage: montage.png ({len(rows)} examples x "
                 f"{1 + len(r_values)} columns)")
    (out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"stage": "report", "status": "ok",
            "outputs": [str(out / "summary.md"), str(out / "montage.png")],
            "summary": {"examples": len(rows), "r_values": r_values}}


# ---------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairaug",
        description="Paired cross-modal data augmentation pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline YAML config")
    common.add_argument("--root", default=None,
                        help=f"artifact root (overrides ${ROOT_ENV} and config)")
    common.add_argument("--json", action="store_true",
                        help="machine-readable stage summary on stdout")
    common.add_argument("--force", action="store_true",
                        help="rebuild even when the stage manifest is current")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("make-data", parents=[common]).set_defaults(func=cmd_make_data)
    sub.add_parser("train-gan", parents=[common]).set_defaults(func=cmd_train_gan)
    sub.add_parser("project", parents=[common]).set_defaults(func=cmd_project)
    sub.add_parser("train-align", parents=[common]).set_defaults(func=cmd_train_align)
    sub.add_parser("augment", parents=[common]).set_defaults(func=cmd_augment)

    arm = argparse.ArgumentParser(add_help=False)
    arm.add_argument("--mode", default=None, choices=retriever.MODES)
    arm.add_argument("--r", type=float, default=None)
    arm.add_argument("--strategy", default=None, choices=("random", "pos"))
    arm.add_argument("--scale", type=float, default=None)
    arm.add_argument("--seed-index", type=int, default=0, dest="seed_index")

    tr = sub.add_parser("train-retrieval", parents=[common, arm])
    tr.set_defaults(func=cmd_train_retrieval)

    ev = sub.add_parser("evaluate", parents=[common, arm])
    ev.add_argument("--run", default=None,
                    help="retrieval run label (default: derived from config)")
    ev.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", parents=[common])
    ab.add_argument("--preset", default=None,
                    choices=("paper-table1", "paper-table2", "paper-table3"))
    ab.add_argument("--grid", default=None, choices=("r",))
    ab.add_argument("--values", default=None,
                    help="comma-separated grid values (with --grid)")
    ab.add_argument("--seeds", type=int, default=1,
                    help="arms are medians over this many seed indices")
    ab.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", parents=[common])
    rp.add_argument("--examples", type=int, default=4)
    rp.add_argument("--r-values", default=None, dest="r_values")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        root = resolve_root(args, cfg)
        summary = args.func(args, cfg, root)
        summary["root"] = str(root)
        if args.json:
            print(json.dumps(summary, sort_keys=True))
        else:
            status = summary.get("status", "ok")
            print(f"[{summary['stage']}] {status}: " +
                  json.dumps(summary.get("summary", {}), sort_keys=True))
        return EXIT_OK
    except ConfigError as exc:
        return _fail(args, EXIT_CONFIG, "config error", exc)
    except (MissingArtifactError, StaleArtifactError, projector.ProjectionError,
            datakit.DatasetError, FileNotFoundError) as exc:
        return _fail(args, EXIT_ARTIFACT, "artifact error", exc)
    except (ganlite.NumericalError, projector.NumericalError) as exc:
        return _fail(args, EXIT_NUMERIC, "numerical failure", exc)
    except (retriever.RetrievalError, aligner.AlignmentError,
            evalkit.EvalError) as exc:
        return _fail(args, EXIT_CONFIG, "config error", exc)


def _fail(args, code: int, kind: str, exc: Exception) -> int:
    if getattr(args, "json", False):
        print(json.dumps({"status": "error", "code": code, "kind": kind,
                          "message": str(exc)}, sort_keys=True))
    else:
        print(f"pairaug: {kind}: {exc}", file=sys.stderr)
    return code
