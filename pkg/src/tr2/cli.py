"""Command line: gen, train, eval, ablate, gradcheck, report."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import ConfigError, RunConfig, format_config, parse_config
from .metrics import stratified_eval, write_strata_csv
from .scenegraph import DatasetFormatError, write_dataset
from .synth import generate, write_embeddings
from .train import (
    FIG4_ROWS,
    TABLE3_ROWS,
    TABLE4_ROWS,
    RunRecord,
    TrainingError,
    ablate,
    evaluate,
    format_ablation_table,
    gradcheck,
    load_data,
    partition,
    save_run,
    toy_config,
    train,
)

TABLES = {"fig4": FIG4_ROWS, "table3": TABLE3_ROWS, "table4": TABLE4_ROWS}


def _config(args) -> RunConfig:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    for item in args.set or []:
        text += "\n" + item
    return parse_config(text)


def _split(cfg: RunConfig, data: str, which: str):
    videos, emb = load_data(data)
    parts = dict(zip(("train", "val", "test"), partition(cfg, videos)))
    if which == "all":
        return videos, emb
    if not parts[which]:
        raise ConfigError(f"split {which!r} is empty")
    return parts[which], emb


def cmd_gen(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    videos, emb = generate(cfg.gen)
    write_dataset(out / "dataset.txt", videos)
    write_embeddings(out / "embeddings.txt", emb, cfg.gen.d_clip)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    print(f"wrote {len(videos)} videos to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    train_videos, emb = _split(cfg, args.data, "train")
    every = args.eval_every or (1 if cfg.select_best else 0)
    val = _split(cfg, args.data, "val")[0] if every else ()
    params, record = train(cfg, train_videos, emb, val, eval_every=every)
    record.label = args.label or ""
    save_run(args.out, params, record)
    (Path(args.out) / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    last = record.epochs[-1].loss if record.epochs else {}
    print(f"trained {cfg.epochs} epochs in {record.wall_time:.1f}s; final loss {last.get('total', float('nan')):.6f}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    videos, emb = _split(cfg, args.data, args.split)
    params = checkpoint.load(args.checkpoint)
    report, per_video = evaluate(cfg, params, videos, emb)
    report.write_csv(args.out)
    if args.strata:
        base = None
        if args.baseline:
            base = evaluate(cfg, checkpoint.load(args.baseline), videos, emb,
                            strategies=("with_constraints",))[1]["with_constraints"]
        strata = stratified_eval(videos, per_video["with_constraints"], cfg.eval.Ks[0], base)
        write_strata_csv(args.strata, strata)
    for t, s, k, v in report.rows():
        print(f"{t},{s},R@{k},{v:.4f}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    train_videos, emb = _split(cfg, args.data, "train")
    held_out, _ = _split(cfg, args.data, args.split)
    seeds = [int(s) for s in args.seeds.split(",")]
    val = _split(cfg, args.data, "val")[0] if cfg.select_best else ()
    rows = ablate(cfg, TABLES[args.table], seeds, train_videos, held_out, emb, val_videos=val)
    table = format_ablation_table(rows, cfg.eval.Ks)
    Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)


def cmd_gradcheck(args) -> None:
    cfg = _config(args) if (args.config or args.set) else toy_config()
    result = gradcheck(cfg, tolerance=args.tolerance)
    for mode, rep in result.reports.items():
        print(f"{mode}: max_rel_error={rep.max_rel_error:.3e} worst={rep.worst} {'PASS' if rep.passed else 'FAIL'}")
    print(f"runtime {result.seconds:.1f}s")
    if not result.passed:
        mode, name, err = result.worst
        raise TrainingError(f"gradcheck failed: {mode} parameter {name} relative error {err:.3e}")


def cmd_report(args) -> None:
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "label", "seed", "config_hash", "epoch", "obj", "rel", "guidance", "total"])
        # runs are numbered by argument position so the file does not depend on where records live
        for run, path in enumerate(args.records):
            rec = RunRecord.from_json(Path(path).read_text(encoding="utf-8"))
            for ep in rec.epochs:
                w.writerow([run, rec.label, rec.seed, rec.config_hash, ep.epoch]
                           + [f"{ep.loss[k]:.6f}" for k in ("obj", "rel", "guidance", "total")])
    print(f"merged {len(args.records)} records into {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tr2", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    sp = with_config(sub.add_parser("gen", help="write a synthetic dataset and embeddings"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen)

    sp = with_config(sub.add_parser("train", help="train and write checkpoint + run record"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--eval-every", type=int, default=0)
    sp.add_argument("--label")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="recall report for a checkpoint"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--strata", help="also write change-degree strata CSV here")
    sp.add_argument("--baseline", help="checkpoint whose recall the strata gains are measured against")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="train a variant matrix and emit a comparison table"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--table", choices=sorted(TABLES), default="table4")
    sp.add_argument("--seeds", default="0")
    sp.add_argument("--split", choices=("val", "test"), default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = with_config(sub.add_parser("gradcheck", help="finite-difference check of the full objective"))
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("report", help="merge run records into one CSV")
    sp.add_argument("records", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigError, DatasetFormatError, TrainingError, OSError, KeyError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
