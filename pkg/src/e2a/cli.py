"""Command-line entry point: ``e2a <subcommand> [options]``.

Every subcommand writes into ``--out`` (default ``$E2A_OUT_DIR`` or
``runs``) together with a ``config.yaml`` snapshot.  Exit status is 0 on
success, 1 when a property check fails, 2 on configuration, usage or
input-file errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, E2AError, FormatError, MissingCheckpoint, UnknownVariant
from .exphar import RunConfig, bench_timing, dump_config, energy_shift_report, kde, load_config, radius_trace_report
from .gnn import init_model, load_checkpoint, save_checkpoint, train_erm
from .landscape import diagnostic_rows
from .pipeline import VARIANTS, ablate, explore, run_e2a
from .properties import run_all
from .syngraph import SPLITS, dataset_load, dataset_save, graph_stats, make_motif_dataset


class UsageError(Exception):
    pass


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "shift", None):
        overrides.append(f"dataset.shift={args.shift}")
    if getattr(args, "data_seed", None) is not None:
        overrides.append(f"dataset.seed={args.data_seed}")
    if args.seeds:
        overrides.append(f"seeds=[{args.seeds}]")
    if args.out:
        overrides.append(f"out_dir={args.out}")
    return load_config(args.config, overrides)


def _dataset(cfg: RunConfig, args):
    if getattr(args, "data", None):
        return dataset_load(args.data)
    return make_motif_dataset(cfg.dataset)


def _out(cfg: RunConfig, name: str | None = None) -> Path:
    out = Path(cfg.out_dir)
    if name:
        out = out / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _trace_rows(trace: list[dict]) -> tuple[list[dict], list[str]]:
    cols = ["epoch", "train_loss"] + [f"{s}_acc" for s in SPLITS]
    return trace, cols


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    ds = make_motif_dataset(cfg.dataset)
    out = _out(cfg)
    dataset_save(ds, out / "dataset.e2ag")
    write_json(out / "dataset_stats.json", graph_stats(ds))
    dump_config(cfg, out / "config.yaml")
    print(f"wrote {out / 'dataset.e2ag'} ({sum(len(ds[s]) for s in SPLITS)} graphs)")
    return 0


def cmd_train_erm(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg, args)
    root = _out(cfg, "erm")
    dump_config(cfg, root / "config.yaml")
    summary = []
    for seed in cfg.seeds:
        out = root / f"seed_{seed}"
        theta, phi = init_model(ds.d_in, ds.n_classes, cfg.model, seed)
        res = train_erm(theta, phi, ds, cfg.train_config(seed), cfg.model, checkpoint_dir=out / "checkpoints", keep_checkpoints=())
        write_csv(out / "trace.csv", *_trace_rows(res.trace))
        write_csv(out / "timing.csv", [{"epoch": i + 1, "train_seconds": t} for i, t in enumerate(res.train_seconds)])
        save_checkpoint(out / "final.e2am", res.theta, res.phi, meta={"epoch": cfg.e2a.epochs, "seed": seed, "config_hash": cfg.hash()})
        last = res.trace[-1]
        summary.append({"seed": seed, "id_acc": last["id_test_acc"], "ood_acc": last["ood_test_acc"]})
        print(f"seed {seed}: id {last['id_test_acc']:.4f} ood {last['ood_test_acc']:.4f}")
    write_csv(root / "summary.csv", summary)
    return 0


def cmd_run_e2a(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg, args)
    root = _out(cfg, "e2a")
    dump_config(cfg, root / "config.yaml")
    summary = []
    for seed in cfg.seeds:
        out = root / f"seed_{seed}"
        res = run_e2a(cfg.e2a_config(seed), ds, out_dir=out)
        write_csv(out / "trace.csv", *_trace_rows(res.trace))
        write_csv(out / "timing.csv", [{"epoch": i + 1, "train_seconds": t} for i, t in enumerate(res.train_seconds)])
        last = res.trace[-1]
        summary.append({"seed": seed, "id_acc": last["id_test_acc"], "ood_acc": last["ood_test_acc"]})
        print(f"seed {seed}: id {last['id_test_acc']:.4f} ood {last['ood_test_acc']:.4f}")
    write_csv(root / "summary.csv", summary)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg, args)
    out = _out(cfg)
    dump_config(cfg, out / "config.yaml")
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    rows = []
    for v in variants:
        vrows = ablate(v, cfg.e2a_config(cfg.seeds[0]), ds, cfg.seeds)
        rows += vrows
        print(f"{v:10s} id {np.mean([r['id_acc'] for r in vrows]):.4f} ood {np.mean([r['ood_acc'] for r in vrows]):.4f}")
    write_csv(out / "ablate.csv", rows, ["variant", "seed", "id_acc", "ood_acc"])
    return 0


def cmd_probe_radius(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg, args)
    out = _out(cfg)
    dump_config(cfg, out / "config.yaml")
    d = cfg.diagnostics
    method = args.method or d.radius_method
    graphs = ds[args.split][: d.max_samples]
    kw = {} if method == "margin_approx" else {"n_directions": d.n_directions, "tol": d.oracle_tol}
    if args.run_dir:
        rep = radius_trace_report(Path(args.run_dir) / "checkpoints", graphs, method, cfg.model, args.epochs or d.radius_epochs, **kw)
        write_csv(out / "radius_trace.csv", [{"epoch": e, "median_radius": m} for e, m in zip(rep.epochs, rep.medians)])
        kde_rows = [r for e, c in zip(rep.epochs, rep.curves) for r in c.rows(epoch=e)]
        write_csv(out / "radius_kde.csv", kde_rows, ["epoch", "x", "density"])
        for e, m in zip(rep.epochs, rep.medians):
            print(f"epoch {e}: median radius {m:.4f}")
        return 0
    if not args.checkpoint:
        raise UsageError("probe-radius needs --checkpoint or --run-dir")
    theta, phi, _, _ = load_checkpoint(args.checkpoint)
    rows = diagnostic_rows(theta, phi, args.split, graphs, method, cfg.model, **kw)
    write_csv(out / "radius.csv", rows, ["sample_id", "split", "method", "radius", "margin", "energy"])
    print(f"median radius ({method}) on {args.split}: {np.median([r['radius'] for r in rows]):.4f}")
    return 0


def cmd_energy_kde(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg, args)
    out = _out(cfg)
    dump_config(cfg, out / "config.yaml")
    theta, phi, cv, _ = load_checkpoint(args.checkpoint)
    rep = energy_shift_report(theta, phi, ds, cfg.model, cfg.diagnostics.kde_points)
    rows = [r for s, c in rep.curves.items() for r in c.rows(split=s)]
    means = dict(rep.means)
    if cv:
        # energy of decoded prior samples before and after latent ascent
        rng = np.random.default_rng(cfg.seeds[0])
        n = args.pseudo
        y = np.arange(n) % ds.n_classes
        z0 = rng.standard_normal((n, cfg.cvae.d_z))
        zT, trace = explore(cv, phi, y, z0, cfg.e2a.steps, cfg.e2a.eta)
        for name, e in (("pseudo_before", trace.energies[0]), ("pseudo_after", trace.energies[-1])):
            rows += kde(e, n_grid=cfg.diagnostics.kde_points).rows(split=name)
            means[name] = float(np.mean(e))
        means["pseudo_delta_positive_frac"] = float(np.mean(trace.delta > 0))
    write_csv(out / "energy_kde.csv", rows, ["split", "x", "density"])
    write_json(out / "energy_means.json", means)
    for k, v in means.items():
        print(f"{k}: {v:.4f}")
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg, args)
    out = _out(cfg)
    dump_config(cfg, out / "config.yaml")
    sw = cfg.sweep
    rows = []
    for param, values in (("steps", sw.steps), ("eta", sw.eta), ("lam", sw.lam)):
        for v in values:
            for seed in cfg.seeds:
                res = run_e2a(cfg.e2a_config(seed, **{param: v}), ds)
                last = res.trace[-1]
                rows.append({"param": param, "value": v, "seed": seed, "id_acc": last["id_test_acc"], "ood_acc": last["ood_test_acc"]})
            sel = rows[-len(cfg.seeds) :]
            print(f"{param}={v}: id {np.mean([r['id_acc'] for r in sel]):.4f} ood {np.mean([r['ood_acc'] for r in sel]):.4f}")
    write_csv(out / "sensitivity.csv", rows, ["param", "value", "seed", "id_acc", "ood_acc"])
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg, args)
    out = _out(cfg)
    dump_config(cfg, out / "config.yaml")
    sw = cfg.sweep
    rows = bench_timing([tuple(g) for g in sw.bench_grid], ds, cfg.e2a_config(cfg.seeds[0]), sw.bench_epochs, sw.bench_rounds)
    erm = rows[0]["train_ms"]
    for r in rows:
        r["train_ratio"] = r["train_ms"] / erm
        print(f"{r['method']:4s} T={r['T']:<3d} eta={r['eta']:<5g} train {r['train_ms']:.1f} ms/epoch ({r['train_ratio']:.2f}x)  inference {r['infer_ms']:.1f} ms")
    write_csv(out / "bench.csv", rows, ["method", "T", "eta", "train_ms", "train_ratio", "infer_ms"])
    return 0


def cmd_verify(args) -> int:
    results = run_all(args.check_seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. e2a.eta=0.5")
    common.add_argument("--out", help="output directory (default $E2A_OUT_DIR or ./runs)")
    common.add_argument("--seeds", help="comma-separated training seeds, e.g. 0,1,2")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset file written by generate-data (default: generate from config)")

    p = argparse.ArgumentParser(prog="e2a", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", parents=[common], help="build the motif dataset")
    g.add_argument("--shift", choices=("basis", "size"))
    g.add_argument("--seed", dest="data_seed", type=int, help="dataset generator seed")
    g.set_defaults(func=cmd_generate_data)

    for name, func, hlp in (
        ("train-erm", cmd_train_erm, "plain ERM training"),
        ("run-e2a", cmd_run_e2a, "training with energy-guided augmentation"),
        ("sensitivity", cmd_sensitivity, "sweep steps, step size and CE weight"),
        ("bench", cmd_bench, "train and inference timing"),
    ):
        s = sub.add_parser(name, parents=[common, data], help=hlp)
        s.set_defaults(func=func)

    a = sub.add_parser("ablate", parents=[common, data], help="ablation variants")
    a.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("probe-radius", parents=[common, data], help="robust radius per sample or per epoch")
    r.add_argument("--checkpoint", help="single checkpoint file")
    r.add_argument("--run-dir", help="run directory with checkpoints/ (per-epoch trace)")
    r.add_argument("--epochs", type=lambda s: [int(x) for x in s.split(",")], help="epochs for --run-dir, e.g. 10,50,100")
    r.add_argument("--split", choices=SPLITS, default="ood_test")
    r.add_argument("--method", choices=("margin_approx", "oracle_bisection"))
    r.set_defaults(func=cmd_probe_radius)

    e = sub.add_parser("energy-kde", parents=[common, data], help="energy densities per split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pseudo", type=int, default=256, help="pseudo samples when the checkpoint holds a cVAE")
    e.set_defaults(func=cmd_energy_kde)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--check-seed", type=int, default=0)
    v.set_defaults(func=cmd_verify, config=None, set=None, out=None, seeds=None)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigInvalid, UnknownVariant, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except (FormatError, MissingCheckpoint, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except E2AError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
