"""``geoformer`` command line: train, eval, predict, inspect, convert, gradcheck.

Exit codes: 0 success, 1 unexpected error, 2 configuration, 3 data,
4 numeric abort, 5 gradient check failure.  Data goes to stdout,
diagnostics to stderr.
"""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_overrides
from .data import (DatasetManifest, load_extxyz, make_batch, read_reference_table,
                   subtract_references, write_extxyz)
from .exceptions import ConfigError, DataError, GeoformerError, NumericError
from .model import GeoTransformer, load_checkpoint
from .training import MetricsRow, evaluate, n_atoms_of, predict_molecules, predict_molecules_forces, scaler_from_meta, train
from .verification import run_gradcheck

log = logging.getLogger("geoformer")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5
CURVE_GRID = np.round(np.arange(0.5, 20.0 + 1e-9, 0.05), 10)
ENERGY_PROPERTIES = ("U0", "U", "H", "G")
XYZ_SUFFIXES = (".xyz", ".extxyz")


def exit_code_for(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_ERROR


# -- helpers ------------------------------------------------------------------------

def _open_out(path):
    if path is None or str(path) == "-":
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _psplit(molecules, manifest, split):
    tr, va, te = manifest.splits(molecules)
    chosen = {"train": tr, "val": va, "test": te}
    if split not in chosen:
        raise ConfigError(f"--split must be train, val or test, got {split!r}")
    return chosen[split]


def load_manifest(path):
    """A manifest file, or a config file (such as ``config.resolved``) with ``data.*`` keys."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    raw = read_config_text_loose(path)
    if any(k.startswith("data.") for k in raw):
        cfg = RunConfig.from_sources(path)
        if cfg.data is None:
            raise ConfigError(f"{path} has no data section")
        return cfg.data
    return DatasetManifest.from_file(path)


def read_config_text_loose(path):
    keys = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            keys[k] = v
    return keys


def eval_molecules(data, split):
    """Molecules named by ``data``: an xyz file (all records) or a manifest split."""
    data = Path(data)
    if data.suffix.lower() in XYZ_SUFFIXES:
        return load_extxyz(data), None
    manifest = load_manifest(data)
    mols = manifest.load()
    return _psplit(mols, manifest, split), manifest


# -- verbs --------------------------------------------------------------------------

def cmd_train(args, extra):
    overrides = parse_overrides(extra)
    cfg = RunConfig.from_sources(args.config, overrides)
    if args.run_dir:
        cfg.run_dir = args.run_dir
    if cfg.data is None:
        raise ConfigError("no dataset: set data.manifest or data.data/target/split")
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(run_dir / "config.resolved")
    molecules = cfg.data.load()
    tr, va, _ = cfg.data.splits(molecules)
    log.info("loaded %d molecules: %d train / %d val", len(molecules), len(tr), len(va))
    model = GeoTransformer(cfg.model, seed=cfg.seed)
    result = train(model, tr, va, cfg.train, cfg.data.target, run_dir=run_dir)
    unit = cfg.data.unit or ""
    print(f"best_epoch {result.best_epoch} best_objective {result.best_val!r} {unit}".rstrip())
    print(f"steps {result.steps} run_dir {run_dir}")
    return EXIT_OK


def _load(ckpt):
    if not Path(ckpt).exists():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    model, header, _ = load_checkpoint(ckpt)
    return model, header.get("meta", {})


def cmd_eval(args, extra):
    model, meta = _load(args.checkpoint)
    target = meta.get("target")
    molecules, manifest = eval_molecules(args.data, args.split)
    if manifest is not None and target is not None and manifest.target != target:
        raise ConfigError(f"checkpoint predicts {target!r} but the manifest target is {manifest.target!r}")
    target = target or (manifest.target if manifest else None)
    if target is None:
        raise ConfigError("cannot tell which property to evaluate")
    mae = evaluate(model, molecules, target, args.batch_size, scaler_from_meta(meta))
    unit = (manifest.unit if manifest else None) or molecules[0].units.get(target, "")
    print(f"mae {mae!r} {unit}".rstrip())
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(MetricsRow(int(meta.get("epoch", -1)), args.split, mae).as_csv())
    return EXIT_OK


def cmd_predict(args, extra):
    model, meta = _load(args.checkpoint)
    molecules = load_extxyz(args.xyz)
    scaler = scaler_from_meta(meta)
    fh, close = _open_out(args.out)
    try:
        w = csv.writer(fh, lineterminator="\n")
        if args.forces:
            preds, forces = predict_molecules_forces(model, molecules, args.batch_size)
            scale = 1.0 if scaler is None else scaler.scale_
            preds = preds if scaler is None else scaler.inverse_transform(preds, n_atoms_of(molecules))
            w.writerow(["index", "atom", "prediction", "fx", "fy", "fz"])
            for i, p in enumerate(preds):
                w.writerow([i, "", repr(float(p)), "", "", ""])
            for i, f in enumerate(forces):
                for a, row in enumerate(f * scale):
                    w.writerow([i, a, ""] + [repr(float(v)) for v in row])
        else:
            preds = predict_molecules(model, molecules, args.batch_size)
            preds = preds if scaler is None else scaler.inverse_transform(preds, n_atoms_of(molecules))
            w.writerow(["index", "prediction"])
            for i, p in enumerate(preds):
                w.writerow([i, repr(float(p))])
    finally:
        if close:
            fh.close()
    return EXIT_OK


def write_metric_curves(model, fh):
    curves = model.metric_curves(CURVE_GRID)
    blocks, heads, _ = curves.shape
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["d"] + [f"block{m}_head{k}" for m in range(blocks) for k in range(heads)])
    flat = curves.reshape(blocks * heads, -1)
    for j, d in enumerate(CURVE_GRID):
        w.writerow([repr(float(d))] + [repr(float(v)) for v in flat[:, j]])


def write_attention_maps(model, molecules, out_dir):
    """One CSV per (molecule, block, head, kind); head ``mean`` holds the head average."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, m in enumerate(molecules):
        batch = make_batch([m], dtype=model.config.dtype)
        for b, maps in enumerate(model.attention_maps(batch)):
            for kind, arr in maps.items():
                if kind.endswith("_mean"):
                    series = [("mean", batch.atom_pairs(arr, 0))]
                    kind = kind[:-5]
                else:
                    pairs = batch.atom_pairs(arr, 0)
                    series = [(str(k), pairs[k]) for k in range(arr.shape[1])]
                for head, mat in series:
                    path = out_dir / f"mol{i}_block{b}_head{head}_{kind}.csv"
                    np.savetxt(path, mat, delimiter=",", fmt="%.17g")
                    written.append(path)
    return written


def cmd_inspect(args, extra):
    model, _ = _load(args.checkpoint)
    if not args.metric_curves and not args.attention_maps:
        raise ConfigError("inspect needs --metric-curves and/or --attention-maps XYZ")
    if args.metric_curves:
        out = args.out if not args.attention_maps else (Path(args.out or ".") / "metric_curves.csv")
        fh, close = _open_out(out)
        try:
            write_metric_curves(model, fh)
        finally:
            if close:
                fh.close()
    if args.attention_maps:
        molecules = load_extxyz(args.attention_maps)
        paths = write_attention_maps(model, molecules, args.out or "attention_maps")
        print(f"wrote {len(paths)} attention map files", file=sys.stderr)
    return EXIT_OK


def cmd_convert(args, extra):
    molecules = load_extxyz(args.input)
    if args.atomization_ref:
        table = read_reference_table(args.atomization_ref)
        props = args.properties.split(",") if args.properties else list(ENERGY_PROPERTIES)
        molecules = subtract_references(molecules, table, props)
    write_extxyz(args.output, molecules)
    print(f"wrote {len(molecules)} molecules to {args.output}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args, extra):
    overrides = parse_overrides(extra)
    cfg = RunConfig.from_sources(args.config, overrides) if (args.config or overrides) else None
    report = run_gradcheck(cfg.model if cfg else None, seed=cfg.seed if cfg else 0)
    for line in report.lines():
        print(line)
    print(f"{'PASS' if report.passed else 'FAIL'} in {report.seconds:.1f} s")
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# -- entry point -------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="geoformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", help="train a model; extra --section.key value pairs override the config")
    t.add_argument("config", nargs="?")
    t.add_argument("--run-dir", dest="run_dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="MAE of a checkpoint on an xyz file or a manifest split")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--split", default="test")
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="per-molecule predictions (and forces) as CSV")
    pr.add_argument("checkpoint")
    pr.add_argument("xyz")
    pr.add_argument("--forces", action="store_true")
    pr.add_argument("--out")
    pr.add_argument("--batch-size", type=int, default=16)
    pr.set_defaults(fn=cmd_predict)

    i = sub.add_parser("inspect", help="dump learned metric curves or attention maps as CSV")
    i.add_argument("checkpoint")
    i.add_argument("--metric-curves", action="store_true")
    i.add_argument("--attention-maps", metavar="XYZ")
    i.add_argument("--out")
    i.set_defaults(fn=cmd_inspect)

    c = sub.add_parser("convert", help="normalize extended-XYZ, optionally to atomization energies")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--atomization-ref", metavar="TABLE")
    c.add_argument("--properties", help=f"comma-separated energies (default {','.join(ENERGY_PROPERTIES)})")
    c.set_defaults(fn=cmd_convert)

    g = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    g.add_argument("config", nargs="?")
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    extra = []
    if argv and argv[0] in ("train", "gradcheck"):
        # Everything after the optional config path is a key override.
        head, rest = argv[:1], argv[1:]
        if rest and not rest[0].startswith("-"):
            head.append(rest.pop(0))
        while rest:
            a = rest.pop(0)
            if a in ("-h", "--help", "-v", "--verbose"):
                head.append(a)
            elif argv[0] == "train" and a == "--run-dir" and rest:
                head += [a, rest.pop(0)]
            elif argv[0] == "train" and a.startswith("--run-dir="):
                head.append(a)
            else:
                extra.append(a)
        argv = head
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args, extra)
    except GeoformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
