"""Command line entry point: ``advwt <group> <action> [options]``.

Exit status is 0 on success, 1 on configuration or usage errors and 2 on
runtime errors.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from advwt import __version__
from advwt.analysis import analyze_pair
from advwt.classifier import ModelSpec, TrainConfig, evaluate, load_model, save_model, train, with_classes
from advwt.config import SCHEMA, ConfigError, from_dict, load_config, with_overrides
from advwt.damage import DamageModel, generate_damaged
from advwt.experiments import read_run, replay, run_experiment, write_run
from advwt.ganmath import selftest
from advwt.imaging import check_image, load_image, save_image
from advwt.report import FORMATS, emit_report, write_csv
from advwt.signs import default_catalog, generate_dataset, load_external, load_manifest, write_dataset

EXPERIMENT_COMMANDS = {
    ("transfer", "run"): "transfer",
    ("defend", "at"): "defense_at",
    ("ood", "run"): "ood",
    ("stability", "run"): "corruption_stability",
    ("timing", "run"): "timing",
}


class UsageError(ConfigError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _out(args, default):
    return Path(args.out if args.out else default)


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _experiment_config(args, experiment):
    _require(args, "config")
    cfg = load_config(args.config)
    if cfg.experiment != experiment:
        raise ConfigError(f"{args.config} describes a {cfg.experiment!r} experiment, expected {experiment!r}")
    return with_overrides(cfg, seed=args.seed, out=args.out)


def _attack_config(args, experiment):
    """Experiment config for ``attack run|sweep`` from a config file and/or manifest + model."""
    if args.manifest or args.model:
        _require(args, "manifest", "model")
        data = {"schema": SCHEMA, "experiment": experiment}
        if args.config:
            base = json.loads(Path(args.config).read_text())
            for key in ("attack", "damage", "analysis", "alphas", "global_seed"):
                if key in base:
                    data[key] = base[key]
        data["dataset"] = {"source": "manifest", "manifest": str(Path(args.manifest).resolve())}
        data["models"] = [{"name": Path(args.model).stem, "path": str(Path(args.model).resolve())}]
        data["output_dir"] = args.out or "runs/attack"
        cfg = from_dict(data)
        return with_overrides(cfg, seed=args.seed)
    return _experiment_config(args, experiment)


def _run_and_write(cfg, args):
    record = run_experiment(cfg, jobs=args.jobs)
    out = Path(cfg.output_dir)
    write_run(record, out)
    emit_report(record, out)
    for name, agg in record.aggregates.items():
        print(f"[{name}] " + ",".join(agg["columns"]))
        for row in agg["rows"]:
            print("  " + ",".join("" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))
                                  for v in row))
    print(f"run written to {out / 'run.json'}")
    return 0


def cmd_dataset(args):
    out = _out(args, "data")
    if args.action == "gen":
        seed = args.seed if args.seed is not None else 0
        tr, te = generate_dataset(default_catalog(), args.n_per_class, seed, args.resolution)
        path = write_dataset(out, [tr, te])
    else:
        _require(args, "source")
        ds = load_external(args.source, args.resolution, args.split)
        path = write_dataset(out, [ds])
    print(f"manifest written to {path}")
    return 0


def _split(args, splits, name):
    if name not in splits:
        raise ConfigError(f"manifest has no {name!r} split (have {sorted(splits)})")
    return splits[name]


def cmd_classifier(args):
    _require(args, "manifest")
    splits = load_manifest(args.manifest)
    if args.action == "train":
        tr = _split(args, splits, "train")
        spec = ModelSpec(arch=args.arch, hidden=tuple(args.hidden), feature=args.feature,
                         input_resolution=args.input_resolution, num_classes=max(tr.num_classes, 2))
        cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                          seed=args.seed if args.seed is not None else 0)
        model = train(tr, with_classes(spec, tr.num_classes), cfg, eval_set=splits.get("test"))
        out = _out(args, "models")
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{args.name}.awtm"
        save_model(model, path)
        print(json.dumps({"model": str(path), **model.training_meta}))
    else:
        _require(args, "model")
        model = load_model(args.model)
        ds = _split(args, splits, args.split)
        print(json.dumps({"model": args.model, "split": args.split, "accuracy": evaluate(model, ds)}))
    return 0


def cmd_damage(args):
    _require(args, "image")
    x = check_image(load_image(args.image))
    dm = DamageModel()
    if args.code:
        s = np.asarray(json.loads(Path(args.code).read_text()), dtype=np.float64)
    else:
        seed = args.seed if args.seed is not None else 0
        s = dm.map(dm.sample_noise(np.random.default_rng(seed))) * args.scale
    out = Path(args.out) if args.out else Path("damaged.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(generate_damaged(x, s, args.texture_seed), out)
    Path(str(out) + ".code.json").write_text(json.dumps([float(v) for v in s]))
    print(f"wrote {out}")
    return 0


def cmd_attack(args):
    cfg = _attack_config(args, "attack" if args.action == "run" else "alpha_sweep")
    return _run_and_write(cfg, args)


def cmd_experiment(args):
    cfg = _experiment_config(args, EXPERIMENT_COMMANDS[(args.group, args.action)])
    return _run_and_write(cfg, args)


def cmd_analyze(args):
    _require(args, "pairs")
    pairs_path = Path(args.pairs)
    try:
        pairs = json.loads(pairs_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read pairs manifest {pairs_path}: {exc}") from exc
    if isinstance(pairs, dict):
        pairs = pairs.get("pairs", [])
    out = _out(args, "analysis")
    out.mkdir(parents=True, exist_ok=True)
    stats = []
    with open(out / "pairs.jsonl", "w") as fh:
        for k, p in enumerate(pairs):
            adv = load_image(pairs_path.parent / p["adversarial"])
            clean = load_image(pairs_path.parent / p["clean"])
            st = analyze_pair(adv, clean, args.threshold, args.bins, args.mode)
            stats.append(st.to_dict())
            fh.write(json.dumps({"id": p.get("id", k), **st.to_dict()}, sort_keys=True) + "\n")
    keys = list(stats[0]) if stats else []
    agg = {"columns": ["pairs"] + keys, "rows": [[len(stats)] + [float(np.mean([s[k] for s in stats])) for k in keys]]}
    write_csv(agg, out / "analysis.csv")
    print(f"analyzed {len(stats)} pairs into {out}")
    return 0


def cmd_report(args):
    record = read_run(args.run)
    formats = [f.strip() for f in args.formats.split(",") if f.strip()]
    if set(formats) - set(FORMATS):
        raise UsageError(f"formats must be drawn from {FORMATS}")
    paths = emit_report(record, _out(args, Path(args.run).parent if Path(args.run).is_file() else args.run),
                        formats)
    for p in paths:
        print(p)
    return 0


def cmd_replay(args):
    diffs, record = replay(args.run, jobs=args.jobs)
    if args.out:
        write_run(record, args.out)
    if diffs:
        print("replay differs in: " + ", ".join(diffs))
        return 2
    print(f"replay identical ({len(record.aggregates)} aggregates)")
    return 0


def cmd_ganmath(args):
    rows = selftest()
    width = max(len(r[0]) for r in rows)
    for name, value, expected, ok in rows:
        print(f"{name:<{width}}  {value: .9f}  {expected: .9f}  {'ok' if ok else 'FAIL'}")
    return 0 if all(r[3] for r in rows) else 2


def _common(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=d, help="global seed override")
    parser.add_argument("--out", default=d, help="output directory or file")
    parser.add_argument("--jobs", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker processes for per-item work")


def build_parser():
    p = Parser(prog="advwt", description="Adversarial wear-and-tear damage toolkit.")
    p.add_argument("--version", action="version", version=f"advwt {__version__}")
    _common(p, suppress=False)
    groups = p.add_subparsers(dest="group", required=True, parser_class=Parser)

    def action(group, name, func, **kw):
        sp = group.add_parser(name, **kw)
        _common(sp, suppress=True)
        sp.set_defaults(func=func)
        return sp

    g = groups.add_parser("dataset").add_subparsers(dest="action", required=True, parser_class=Parser)
    sp = action(g, "gen", cmd_dataset, help="render a synthetic sign dataset")
    sp.add_argument("--n-per-class", type=int, default=100)
    sp.add_argument("--resolution", type=int, default=64)
    sp = action(g, "import", cmd_dataset, help="ingest a directory-per-class image tree")
    sp.add_argument("source", nargs="?")
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--split", default="test")

    g = groups.add_parser("classifier").add_subparsers(dest="action", required=True, parser_class=Parser)
    sp = action(g, "train", cmd_classifier)
    sp.add_argument("--manifest")
    sp.add_argument("--name", default="model")
    sp.add_argument("--arch", default="mlp", choices=("linear", "mlp", "smallconv"))
    sp.add_argument("--hidden", type=int, nargs="*", default=[128])
    sp.add_argument("--feature", default="raw_pixels", choices=("raw_pixels", "pooled8", "edge_hist"))
    sp.add_argument("--input-resolution", type=int, default=32)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--batch-size", type=int, default=16)
    sp = action(g, "eval", cmd_classifier)
    sp.add_argument("--manifest")
    sp.add_argument("--model")
    sp.add_argument("--split", default="test")

    g = groups.add_parser("damage").add_subparsers(dest="action", required=True, parser_class=Parser)
    sp = action(g, "render", cmd_damage)
    sp.add_argument("image", nargs="?")
    sp.add_argument("--code", help="JSON array style code (otherwise mapped from --seed noise)")
    sp.add_argument("--scale", type=float, default=1.0, help="multiplier for a seed-mapped code")
    sp.add_argument("--texture-seed", type=int, default=0)

    g = groups.add_parser("attack").add_subparsers(dest="action", required=True, parser_class=Parser)
    for name in ("run", "sweep"):
        sp = action(g, name, cmd_attack)
        sp.add_argument("--manifest")
        sp.add_argument("--model")

    for (grp, act) in EXPERIMENT_COMMANDS:
        g = groups.add_parser(grp).add_subparsers(dest="action", required=True, parser_class=Parser)
        action(g, act, cmd_experiment)

    sp = groups.add_parser("analyze", help="structure metrics for adversarial/clean pairs")
    _common(sp, suppress=True)
    sp.set_defaults(func=cmd_analyze, action=None)
    sp.add_argument("pairs", nargs="?")
    sp.add_argument("--threshold", type=float, default=0.05)
    sp.add_argument("--bins", type=int, default=36)
    sp.add_argument("--mode", default="full_spectrum", choices=("full_spectrum", "orientation_bins"))

    sp = groups.add_parser("report", help="render CSV/JSON/SVG for a run record")
    _common(sp, suppress=True)
    sp.set_defaults(func=cmd_report, action=None)
    sp.add_argument("run")
    sp.add_argument("--formats", default=",".join(FORMATS))

    sp = groups.add_parser("replay", help="re-run a recorded experiment and compare aggregates")
    _common(sp, suppress=True)
    sp.set_defaults(func=cmd_replay, action=None)
    sp.add_argument("run")

    g = groups.add_parser("ganmath").add_subparsers(dest="action", required=True, parser_class=Parser)
    action(g, "selftest", cmd_ganmath)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit status 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
