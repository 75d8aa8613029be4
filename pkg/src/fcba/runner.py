"""Turn an :class:`ExperimentConfig` into a run and its artifact files."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .config import ExperimentConfig
from .data import Dataset, dirichlet_partition, load_idx, partition_stats, synth_dataset
from .errors import ConfigurationError, IngestionError
from .federation import FederatedData, RunResult, run_experiment
from .metrics import PersistenceReport, persistence

ROUNDS_SCHEMA = "fcba.rounds/1"
ROUNDS_COLUMNS = ("round", "phase", "cda", "asr", "feat_dist", "clip_S", "noise_sigma")


def build_arch(cfg: ExperimentConfig) -> nn.ModelArch:
    dims = tuple(cfg.data.dims)
    m = cfg.model
    if m.arch == "cnn":
        return nn.cnn_arch(dims, cfg.data.classes, m.conv1, m.conv2, m.kernel, m.hidden)
    if m.arch == "mlp":
        return nn.mlp_arch(dims, cfg.data.classes, (m.hidden,))
    return nn.logistic_arch(dims, cfg.data.classes)


def _first(ds: Dataset, n: int | None) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    return ds.subset(np.arange(n))


def build_data(cfg: ExperimentConfig, base_dir: Path | None = None) -> FederatedData:
    d = cfg.data
    if d.kind == "synthetic":
        train = synth_dataset(d.classes, d.train_per_class, d.dims, cfg.seed, "train", d.synthetic)
        test = synth_dataset(d.classes, d.test_per_class, d.dims, cfg.seed, "test", d.synthetic)
    else:
        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() or base_dir is None else base_dir / p

        train = _first(load_idx(resolve(d.train_images), resolve(d.train_labels), d.classes), d.train_subset)
        test = _first(load_idx(resolve(d.test_images), resolve(d.test_labels), d.classes), d.test_subset)
        if train.dims != tuple(d.dims):
            raise ConfigurationError(f"data.dims {list(d.dims)} does not match the files ({list(train.dims)})")
    seed = cfg.seed if d.partition_seed is None else d.partition_seed
    part = dirichlet_partition(train, cfg.federation.n_total, d.alpha, seed)
    return FederatedData(train, test, part)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return str(v)


def rounds_csv(records) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {ROUNDS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROUNDS_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in ROUNDS_COLUMNS])
    return buf.getvalue()


def read_rounds_csv(path) -> list[dict]:
    """Rows of a ``rounds.csv`` with numbers parsed and blanks as None."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for row in csv.DictReader(lines):
        out = {}
        for k, v in row.items():
            if k == "phase":
                out[k] = v
            elif k == "round":
                out[k] = int(v)
            else:
                out[k] = float(v) if v != "" else None
        rows.append(out)
    return rows


def _write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class RunArtifacts:
    out_dir: Path
    result: RunResult
    persistence: PersistenceReport | None


def run_config(cfg: ExperimentConfig, out_dir=None, cache_dir=None, base_dir=None) -> RunArtifacts:
    """Run one experiment and write rounds.csv, persistence.json, config.resolved.json, partition_stats.json."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create output directory: {exc}", out) from None
    data = build_data(cfg, base_dir)
    arch = build_arch(cfg)
    resolved = cfg.resolved()
    resolved["output"]["dir"] = str(out)
    _write(out / "config.resolved.json", _json(resolved))
    _write(out / "partition_stats.json", _json(partition_stats(data.train, data.partition).to_dict()))

    result = run_experiment(cfg.federation, cfg.attack, cfg.defense, data, arch, cfg.eval, cache_dir=cache_dir)
    _write(out / "rounds.csv", rounds_csv(result.records))
    report = None
    if result.attack_end is not None:
        report = persistence(result.records, result.attack_end, cfg.eval.offsets)
        _write(out / "persistence.json", _json(report.to_dict()))
    return RunArtifacts(out, result, report)


def partition_report(cfg: ExperimentConfig, base_dir=None) -> tuple[dict, str]:
    """Partition statistics as a JSON-ready dict and a text table."""
    data = build_data(cfg, base_dir)
    stats = partition_stats(data.train, data.partition)
    lines = [f"{'client':>6} {'size':>7}  class histogram"]
    for i, (n, h) in enumerate(zip(stats.sizes, stats.histograms)):
        lines.append(f"{i:>6} {n:>7}  {' '.join(str(x) for x in h)}")
    lines.append(f"total {sum(stats.sizes)}  max {stats.max_size}  min {stats.min_size}")
    return stats.to_dict(), "\n".join(lines) + "\n"
