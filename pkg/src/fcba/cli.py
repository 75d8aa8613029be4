"""Command line entry point: ``fcba run|sweep|partition-stats|enumerate-triggers|report``.

The log level comes from the ``FCBA_LOG_LEVEL`` environment variable
(default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .config import build_config, load_document, set_dotted
from .errors import FCBAError
from .runner import partition_report, read_rounds_csv, run_config
from .trigger import trigger_listing

log = logging.getLogger("fcba")

SWEEP_AXES = {
    "gamma": "attack.gamma",
    "alpha": "data.alpha",
    "TS": "attack.trigger.size",
    "TL": "attack.trigger.location",
    "TG": "attack.trigger.gap",
    "r": "attack.r",
    "I": "attack.interval",
    "S": "defense.clip",
    "sigma": "defense.sigma",
}


def _load(path, seed: int | None):
    doc, lines = load_document(path)
    if seed is not None:
        doc["seed"] = seed
    return doc, lines


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", "null", "off"):
        return None
    value = yaml.safe_load(text)
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return float("inf")
    return value


def _value_name(value) -> str:
    return str(value).replace("/", "_").replace(" ", "")


# ----------------------------------------------------------------- commands


def cmd_run(args) -> int:
    doc, lines = _load(args.config, args.seed)
    cfg = build_config(doc, lines, str(args.config))
    arts = run_config(cfg, args.out, cache_dir=args.cache_dir, base_dir=Path(args.config).parent)
    print(f"wrote {arts.out_dir}")
    if arts.persistence is not None:
        for t in arts.persistence.offsets:
            v = arts.persistence.asr[t]
            print(f"ASR-{t}: {'n/a' if v is None else f'{v:.4f}'}")
    print(f"final CDA: {arts.result.records[-1].cda:.4f}")
    return 0


def _sweep_job(job):
    doc, source, out, cache_dir, base_dir = job
    cfg = build_config(doc, None, source)
    arts = run_config(cfg, out, cache_dir=cache_dir, base_dir=base_dir)
    asr = {t: arts.persistence.asr[t] for t in cfg.eval.offsets} if arts.persistence else {}
    return asr, arts.result.records[-1].cda


def cmd_sweep(args) -> int:
    key = SWEEP_AXES[args.axis]
    doc, _ = _load(args.config, args.seed)
    values = [_parse_value(v) for v in args.values.split(",")]
    out = Path(args.out or doc.get("output", {}).get("dir", "runs/sweep"))
    out.mkdir(parents=True, exist_ok=True)
    cache_dir = args.cache_dir or str(out / ".cache")
    base_dir = Path(args.config).parent
    jobs = [(set_dotted(doc, key, v), f"{args.config} [{args.axis}={v}]", out / f"{args.axis}={_value_name(v)}",
             cache_dir, base_dir) for v in values]
    offsets = sorted(build_config(jobs[0][0], None, str(args.config)).eval.offsets)

    results: list = [None] * len(jobs)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_job, j) for j in jobs]
            for i, fut in enumerate(futures):
                try:
                    results[i] = fut.result()
                except Exception as exc:  # noqa: BLE001 - a failed value must not stop the sweep
                    results[i] = exc
    else:
        for i, j in enumerate(jobs):
            try:
                results[i] = _sweep_job(j)
            except Exception as exc:  # noqa: BLE001
                results[i] = exc

    failed = 0
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([args.axis] + [f"asr_{t}" for t in offsets] + ["final_cda", "error"])
        for v, res in zip(values, results):
            if isinstance(res, Exception):
                failed += 1
                log.error("%s=%s failed: %s", args.axis, v, res)
                w.writerow([v] + [""] * len(offsets) + ["", f"{type(res).__name__}: {res}"])
                continue
            asr, final_cda = res
            cells = ["" if asr.get(t) is None else f"{asr[t]:.6f}" for t in offsets]
            w.writerow([v] + cells + [f"{final_cda:.6f}", ""])
    print(f"wrote {out / 'summary.csv'} ({len(values) - failed}/{len(values)} values succeeded)")
    return 1 if failed else 0


def cmd_partition_stats(args) -> int:
    doc, lines = _load(args.config, args.seed)
    cfg = build_config(doc, lines, str(args.config))
    stats, table = partition_report(cfg, Path(args.config).parent)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "partition_stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
        (out / "partition_stats.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def cmd_enumerate_triggers(args) -> int:
    rows = trigger_listing(args.m, args.strategy)
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        for row in rows:
            print(row["label"])
    return 0


def cmd_report(args) -> int:
    for run in args.runs:
        run = Path(run)
        summary = run / "summary.csv"
        if summary.exists() and not (run / "rounds.csv").exists():
            print(f"== {run} (sweep)")
            print(summary.read_text(encoding="utf-8"), end="")
            continue
        rows = read_rounds_csv(run / "rounds.csv")
        print(f"== {run}")
        pers = run / "persistence.json"
        if pers.exists():
            data = json.loads(pers.read_text(encoding="utf-8"))
            print(f"attack ended at round {data['attack_end_round']}")
            for t in data["offsets"]:
                a, c, f = data["asr"][str(t)], data["cda"][str(t)], data["feat_dist"][str(t)]
                fmt = lambda x: "n/a" if x is None else f"{x:.4f}"  # noqa: E731
                print(f"  t={t:<4d} ASR={fmt(a)}  CDA={fmt(c)}  feat_dist={fmt(f)}")
        last = rows[-1]
        print(f"final round {last['round']}: CDA={last['cda']:.4f}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fcba", description="Federated backdoor attack simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory (overrides output.dir)"):
        sp.add_argument("--config", required=True, help="YAML config file")
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--seed", type=int, help="override the master seed")

    sp = sub.add_parser("run", help="run one experiment")
    common(sp)
    sp.add_argument("--cache-dir", help="directory for cached warm-up checkpoints")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run one experiment per value of an ablation axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values, e.g. 1,50,100 or inf,5,1")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.add_argument("--cache-dir", help="warm-up cache (default: <out>/.cache)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("partition-stats", help="client sizes and class histograms")
    common(sp, "directory for partition_stats.json/.txt")
    sp.set_defaults(func=cmd_partition_stats)

    sp = sub.add_parser("enumerate-triggers", help="list local trigger patterns")
    sp.add_argument("--m", type=int, default=4, help="number of sub-blocks")
    sp.add_argument("--strategy", default="FC", help="FC (full combination) or SD (simple division)")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_enumerate_triggers)

    sp = sub.add_parser("report", help="summarise run or sweep directories")
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get("FCBA_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FCBAError, OSError) as exc:
        print(f"fcba: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
