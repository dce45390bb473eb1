"""Experiment orchestration: method presets, train -> prune -> evaluate
pipelines, BER sweeps and the comparison table."""
import csv
import datetime
import io
import json
import logging
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .channel import ML_MAX_K, generate_batch, hard_sign, ml_decode_batch, zf_decode_batch
from .compression import COST_CSV_COLUMNS, PruneSpec, apply_prune, cost_report
from .errors import CapacityError, ConfigurationError
from .model import detect, load_checkpoint, param_dims, save_checkpoint
from .numerics import make_rng
from .training import LossSpec, train_full, train_incremental

log = logging.getLogger(__name__)

SWEEP_SCHEMA = "# sparsedetnet-sweep v1"
CURVES_SCHEMA = "# sparsedetnet-curves v1"
REPORT_SCHEMA = "# sparsedetnet-report v1"
COSTS_SCHEMA = "# sparsedetnet-costs v1"
SWEEP_COLUMNS = ("method", "snr_db", "ber", "errors", "symbols", "memory_bytes", "flops", "layers")
REPORT_COLUMNS = ("architecture", "memory_mb", "flops", "ber", "memory_ratio", "flops_ratio")
BASELINES = ("zf", "ml", "oracle")
STREAM_SWEEP = 10_000
EVAL_CHUNK = 10_000


@dataclass(frozen=True)
class MethodPlan:
    label: str
    loss: LossSpec
    prune: PruneSpec
    incremental: bool


def method_plan(cfg, label):
    """Loss, pruning rule and schedule for one of the named method families."""
    lam = cfg.loss.lam
    lam1, lam2 = cfg.loss.lam1, cfg.loss.lam2
    eta = cfg.prune.eta
    sgl_prune = PruneSpec("sparse_group", eta1=cfg.prune.eta1, eta2=cfg.prune.eta2)
    plans = {
        "DetNet": (LossSpec("plain"), PruneSpec(), False),
        "Pruned DetNet": (LossSpec("plain"), PruneSpec("element", eta=eta), False),
        "R-DetNet": (LossSpec("element_l1", lam=lam), PruneSpec("element", eta=eta), False),
        "R-DetNet(GL)": (LossSpec("sparse_group", lam1=lam1), PruneSpec("group", eta1=cfg.eta_gl), False),
        "R-DetNet(SGL)": (LossSpec("sparse_group", lam1=lam1, lam2=lam2), sgl_prune, False),
        "R-I-DetNet": (LossSpec("element_l1", lam=lam), PruneSpec("element", eta=cfg.eta_incremental), True),
        "R-I-DetNet(SGL)": (LossSpec("sparse_group", lam1=lam1, lam2=lam2), sgl_prune, True),
    }
    if label not in plans:
        raise ConfigurationError(f"unknown method {label!r}")
    return MethodPlan(label, *plans[label])


def threads():
    try:
        return max(1, int(os.environ.get("UNFOLD_THREADS", "1")))
    except ValueError:
        return 1


def write_manifest(path, cfg, extra=None):
    manifest = {
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
        "backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": repr(cfg),
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def train_model(cfg, loss, incremental, out_dir=None, label="model", snr_range=None):
    """Train one network under ``cfg``; writes checkpoint, log and manifest when ``out_dir`` is set."""
    z_dim, v_dim, _ = param_dims(cfg.K, cfg.z_mult, cfg.v_mult)
    train_cfg = cfg.train if snr_range is None else replace(cfg.train, snr_range_db=snr_range)
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        if log_path.exists():
            log_path.unlink()
    kw = dict(z_dim=z_dim, v_dim=v_dim, log_path=log_path, init_gain=cfg.init_gain)
    if incremental:
        params, records = train_incremental(train_cfg, loss, cfg.seed, cfg.K, cfg.N, **kw)
    else:
        params, records = train_full(train_cfg, loss, cfg.seed, cfg.K, cfg.N, train_cfg.max_layers, **kw)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.npz", params, {"label": label, "loss": asdict(loss)})
        write_manifest(out_dir / "manifest.json", cfg, {"label": label, "layers": params.L})
    return params, records


def _eval_batches(cfg_seed, N, K, samples, snr_db, snr_index):
    for c, lo in enumerate(range(0, samples, EVAL_CHUNK)):
        n = min(EVAL_CHUNK, samples - lo)
        yield generate_batch(make_rng(cfg_seed, STREAM_SWEEP, snr_index, c), N, K, n, snr_db)


def _decide(method, batch):
    if method == "zf":
        return hard_sign(zf_decode_batch(batch.H, batch.y))
    if method == "ml":
        return ml_decode_batch(batch.H, batch.y)
    if method == "oracle":
        return batch.x
    return detect(method, batch.H, batch.y)


def _eval_point(label, method, snr, index, seed, N, K, samples, cost=None):
    """BER row for one method at one SNR; ``method`` is a baseline name or ModelParams."""
    errors = symbols = 0
    for batch in _eval_batches(seed, N, K, samples, snr, index):
        d = _decide(method, batch)
        errors += int(np.count_nonzero(d != batch.x))
        symbols += batch.x.size
    return {
        "method": label,
        "snr_db": snr,
        "ber": errors / symbols,
        "errors": errors,
        "symbols": symbols,
        "memory_bytes": cost.memory_bytes if cost else "",
        "flops": cost.flops_per_detection if cost else "",
        "layers": len(cost.layers) if cost else "",
    }


def evaluate(models, grid, samples, seed, baselines=(), K=None, N=None):
    """BER of every model and baseline on a shared evaluation set per SNR point.

    ``models`` maps label -> ModelParams. Returns rows sorted by method then SNR.
    """
    if models:
        first = next(iter(models.values()))
        K, N = first.K, first.N
    for b in baselines:
        if b not in BASELINES:
            raise ConfigurationError(f"unknown baseline {b!r}")
    if "ml" in baselines and K > ML_MAX_K:
        raise CapacityError(f"ML baseline needs K <= {ML_MAX_K}, got K={K}")
    costs = {label: cost_report(p) for label, p in models.items()}
    methods = list(models.items()) + [(b.upper(), b) for b in baselines]
    tasks = [(label, m, snr, i) for label, m in methods for i, snr in enumerate(grid.values())]

    def run(task):
        label, m, snr, i = task
        return _eval_point(label, m, snr, i, seed, N, K, samples, costs.get(label))

    with ThreadPoolExecutor(max_workers=threads()) as pool:
        rows = list(pool.map(run, tasks))
    rows.sort(key=lambda r: (r["method"], r["snr_db"]))
    return rows


def _fmt(value):
    if isinstance(value, float):
        return repr(round(value, 12))
    return str(value)


def write_rows(path, schema, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(schema + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_rows(path, schema, columns):
    with open(path, newline="") as fh:
        head = fh.readline().rstrip("\n")
        if head != schema:
            raise ConfigurationError(f"{path}: expected header {schema!r}, found {head!r}")
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(columns):
            raise ConfigurationError(f"{path}: columns {reader.fieldnames} do not match {columns}")
        return list(reader)


def write_sweep(path, rows):
    write_rows(path, SWEEP_SCHEMA, SWEEP_COLUMNS, rows)


def read_sweep(path):
    rows = read_rows(path, SWEEP_SCHEMA, SWEEP_COLUMNS)
    for r in rows:
        r["snr_db"] = float(r["snr_db"])
        r["ber"] = float(r["ber"])
        for key in ("errors", "symbols"):
            r[key] = int(r[key])
        for key in ("memory_bytes", "flops", "layers"):
            r[key] = int(r[key]) if r[key] != "" else ""
    return rows


def write_curves(path, rows):
    """Plot-ready long format: one (series, snr_db, ber, stderr) line per point."""
    out = []
    for r in rows:
        p, n = r["ber"], r["symbols"]
        out.append({"series": r["method"], "snr_db": r["snr_db"], "ber": p,
                    "stderr": float(np.sqrt(p * (1 - p) / n))})
    write_rows(path, CURVES_SCHEMA, ("series", "snr_db", "ber", "stderr"), out)


def report_table(rows, snr_db=12.0, baseline="DetNet"):
    """One row per trained method at the grid SNR closest to ``snr_db``.

    Ratios are relative to the ``baseline`` method when present, otherwise to
    the first method in the input.
    """
    trained = [r for r in rows if r["memory_bytes"] != ""]
    if not trained:
        raise ConfigurationError("no trained-method rows to report")
    snrs = sorted({r["snr_db"] for r in trained})
    target = min(snrs, key=lambda s: (abs(s - snr_db), s))
    at = [r for r in trained if r["snr_db"] == target]
    ref = next((r for r in at if r["method"] == baseline), at[0])
    table = []
    for r in at:
        table.append({
            "architecture": r["method"],
            "memory_mb": r["memory_bytes"] / 1e6,
            "flops": r["flops"],
            "ber": r["ber"],
            "memory_ratio": r["memory_bytes"] / ref["memory_bytes"],
            "flops_ratio": r["flops"] / ref["flops"],
        })
    return table, target


def format_table(table, snr_db):
    buf = io.StringIO()
    buf.write(f"Comparison at SNR = {snr_db:g} dB\n")
    head = ("Architecture", "Memory (MB)", "FLOPs", "BER", "Memory vs ref", "FLOPs vs ref")
    cells = [head] + [(
        t["architecture"], f"{t['memory_mb']:.4f}", f"{t['flops']:.3g}", f"{t['ber']:.5g}",
        f"{t['memory_ratio']:.3g}x", f"{t['flops_ratio']:.3g}x") for t in table]
    widths = [max(len(row[i]) for row in cells) for i in range(len(head))]
    for row in cells:
        buf.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")
    return buf.getvalue()


def write_costs(path, reports):
    rows = [dict(zip(COST_CSV_COLUMNS, rep.csv_row())) for rep in reports]
    write_rows(path, COSTS_SCHEMA, COST_CSV_COLUMNS, rows)


def run_sweep(cfg, out_dir=None):
    """Train, prune and evaluate every configured method, then write the
    sweep CSV, plot curves, cost table and comparison report."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = {}
    reports = []
    per_snr_rows = []
    for label in cfg.methods:
        plan = method_plan(cfg, label)
        if cfg.per_snr:
            # one model per SNR point, each evaluated only at its own SNR
            for i, snr in enumerate(cfg.snr.values()):
                tag = f"{label}@{snr:g}dB"
                params, _ = train_model(cfg, plan.loss, plan.incremental, out / "models" / _slug(tag),
                                        tag, snr_range=(snr, snr))
                pruned = apply_prune(params, plan.prune)
                per_snr_rows.append(_eval_point(label, pruned, snr, i, cfg.seed, cfg.N, cfg.K,
                                                cfg.eval_samples, cost_report(pruned)))
            continue
        params, _ = train_model(cfg, plan.loss, plan.incremental, out / "models" / _slug(label), label)
        if plan.incremental:
            label = f"{label}-{params.L}L"
        pruned = apply_prune(params, plan.prune)
        save_checkpoint(out / "models" / _slug(plan.label) / "pruned.npz", pruned,
                        {"label": label, "prune": asdict(plan.prune)})
        models[label] = pruned
        reports.append(cost_report(pruned, label))
    rows = evaluate(models, cfg.snr, cfg.eval_samples, cfg.seed, cfg.baselines, K=cfg.K, N=cfg.N)
    if per_snr_rows:
        rows = sorted(rows + per_snr_rows, key=lambda r: (r["method"], r["snr_db"]))
    write_sweep(out / "sweep.csv", rows)
    write_curves(out / "ber_curves.csv", rows)
    if reports:
        write_costs(out / "costs.csv", reports)
    if any(r["memory_bytes"] != "" for r in rows):
        table, at = report_table(rows, cfg.report_snr_db)
        write_rows(out / "report.csv", REPORT_SCHEMA, REPORT_COLUMNS, table)
        (out / "report.txt").write_text(format_table(table, at))
    write_manifest(out / "manifest.json", cfg, {"command": "sweep"})
    return rows


def _slug(label):
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label)


def load_models(paths):
    models = {}
    for p in paths:
        params, meta = load_checkpoint(p)
        label = meta.get("label") or Path(p).stem
        while label in models:
            label += "'"
        models[label] = params
    return models
