"""Command line interface: ``sparsedetnet {train,prune,eval,report,sweep}``.

Exit codes: 0 success, 2 invalid input (config, missing file, capacity),
3 numerical divergence during training.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .channel import SnrGrid
from .compression import PruneSpec, apply_prune, cost_report
from .config import ExperimentConfig, load_config
from .errors import CapacityError, ConfigurationError, ContractError
from .harness import (
    REPORT_COLUMNS, REPORT_SCHEMA, evaluate, format_table, load_models, read_sweep, report_table,
    run_sweep, train_model, write_costs, write_curves, write_manifest, write_rows, write_sweep,
)
from .model import load_checkpoint, save_checkpoint
from .training import DivergenceError, LossSpec

log = logging.getLogger("sparsedetnet")


def _config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "snr", None):
        overrides["snr"] = SnrGrid.parse(args.snr)
    if getattr(args, "samples", None):
        overrides["eval_samples"] = args.samples
    if getattr(args, "baselines", None) is not None:
        overrides["baselines"] = tuple(b for b in args.baselines.split(",") if b)
    return replace(cfg, **overrides) if overrides else cfg


def _prune_spec(args, cfg):
    spec = cfg.prune
    kw = {}
    if args.kind:
        kw["kind"] = args.kind
    for name in ("eta", "eta1", "eta2"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    if kw:
        spec = replace(spec, **kw)
        if "kind" not in kw and spec.kind == "none":
            spec = replace(spec, kind="sparse_group" if "eta2" in kw else
                           "group" if "eta1" in kw else "element")
    return spec


def cmd_train(args):
    cfg = _config(args)
    loss = cfg.loss if args.loss is None else LossSpec(args.loss, cfg.loss.lam, cfg.loss.lam1, cfg.loss.lam2)
    incremental = cfg.incremental or args.incremental
    out = Path(cfg.output_dir)
    params, records = train_model(cfg, loss, incremental, out, args.label or "model")
    last = records[-1]
    print(f"trained {params.L} layers: val_ber={last.val_ber:.5g} val_loss={last.val_loss:.5g} -> {out}")
    return 0


def cmd_prune(args):
    cfg = _config(args)
    if not Path(args.checkpoint).is_file():
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}")
    params, meta = load_checkpoint(args.checkpoint)
    spec = _prune_spec(args, cfg)
    pruned = apply_prune(params, spec)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    label = meta.get("label", Path(args.checkpoint).stem)
    save_checkpoint(out / "pruned.npz", pruned, {**meta, "label": label, "prune": spec.__dict__})
    report = cost_report(pruned, label)
    (out / "cost.json").write_text(report.to_json() + "\n")
    write_costs(out / "cost.csv", [report])
    print(f"{label}: {report.params_nonzero}/{report.params_total} parameters kept, "
          f"{report.memory_mb:.4f} MB, {report.flops_per_detection} FLOPs")
    return 0


def cmd_eval(args):
    cfg = _config(args)
    for p in args.checkpoints:
        if not Path(p).is_file():
            raise ConfigurationError(f"checkpoint not found: {p}")
    models = load_models(args.checkpoints)
    rows = evaluate(models, cfg.snr, cfg.eval_samples, cfg.seed, cfg.baselines, K=cfg.K, N=cfg.N)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_sweep(out / "sweep.csv", rows)
    write_curves(out / "ber_curves.csv", rows)
    write_manifest(out / "manifest.json", cfg, {"command": "eval", "checkpoints": list(args.checkpoints)})
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def cmd_report(args):
    rows = []
    for path in args.sweeps:
        if not Path(path).is_file():
            raise ConfigurationError(f"sweep file not found: {path}")
        rows.extend(read_sweep(path))
    table, at = report_table(rows, args.at, args.baseline)
    text = format_table(table, at)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "report.csv", REPORT_SCHEMA, REPORT_COLUMNS, table)
        (out / "report.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_sweep(args):
    cfg = _config(args)
    rows = run_sweep(cfg)
    print(f"sweep finished: {len(rows)} rows in {cfg.output_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="sparsedetnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a network (whole or incremental)")
    common(p)
    p.add_argument("--loss", choices=("plain", "element_l1", "sparse_group"))
    p.add_argument("--incremental", action="store_true")
    p.add_argument("--label")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="prune a checkpoint and write its cost report")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--kind", choices=("none", "element", "group", "sparse_group"))
    p.add_argument("--eta", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="BER-vs-SNR sweep of checkpoints and baselines")
    p.add_argument("checkpoints", nargs="*")
    common(p)
    p.add_argument("--snr", help="min:max:points")
    p.add_argument("--samples", type=int, help="channel realizations per SNR point")
    p.add_argument("--baselines", help="comma list of zf,ml,oracle")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="comparison table from sweep CSVs")
    p.add_argument("sweeps", nargs="+")
    p.add_argument("--at", type=float, default=12.0, help="SNR (dB) of the table")
    p.add_argument("--baseline", default="DetNet")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="train + prune + eval every configured method")
    common(p)
    p.add_argument("--snr", help="min:max:points")
    p.add_argument("--samples", type=int)
    p.add_argument("--baselines")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, CapacityError, ContractError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
