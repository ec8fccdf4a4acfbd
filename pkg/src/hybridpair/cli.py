"""Command-line entry point: generate, extract, train, eval, sweep, monitor."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config
from .dataset import Archive
from .features import FeatureMatrix, WindowSpec
from .mlcp import EvalReport, ForestModel, monitor, sweep_table_csv
from .sim import SimTrace
from .util import sha256_file

log = logging.getLogger("hybridpair")

ARCHIVE_DIR = "archive"
FEATURES = "features.csv"
MODEL = "model.json"
REPORT = "report.json"
SWEEP = "sweep.csv"
MANIFEST = "manifest.json"


class ArtifactError(RuntimeError):
    pass


# -- manifest ----------------------------------------------------------------------

def _manifest_path(out: Path) -> Path:
    return out / MANIFEST


def read_manifest(out: Path) -> dict:
    p = _manifest_path(out)
    return json.loads(p.read_text()) if p.exists() else {}


def record_artifact(out: Path, name: str, file: str, digest: str, inputs: dict | None = None, **extra):
    man = read_manifest(out)
    man[name] = {"file": file, "digest": digest, "inputs": inputs or {}, **extra}
    _manifest_path(out).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")


def _declared(out: Path, name: str) -> dict:
    entry = read_manifest(out).get(name)
    if entry is None or not (out / entry["file"]).exists():
        raise ArtifactError(f"missing artifact: {name} not found under {out} (run the step that produces it first)")
    return entry


def _check(name: str, declared: str, actual: str):
    if declared != actual:
        raise ArtifactError(f"digest mismatch for {name}: manifest declares {declared[:16]}, "
                            f"file has {actual[:16]}; refusing to run")


def load_archive(out: Path) -> tuple[Archive, str]:
    entry = _declared(out, "archive")
    archive = Archive.load(out / entry["file"])
    digest = archive.digest()
    _check("archive", entry["digest"], digest)
    return archive, digest


def load_features(out: Path) -> tuple[FeatureMatrix, str]:
    entry = _declared(out, "features")
    matrix = FeatureMatrix.load(out / entry["file"])
    digest = matrix.digest()
    _check("features", entry["digest"], digest)
    return matrix, digest


def load_model(out: Path) -> tuple[ForestModel, str]:
    entry = _declared(out, "model")
    model = ForestModel.load(out / entry["file"])
    digest = model.digest()
    _check("model", entry["digest"], digest)
    return model, digest


# -- commands ------------------------------------------------------------------------

def _out(args, cfg=None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir if cfg else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    out = _out(args, cfg)
    archive, summary = pipeline.generate(cfg, args.pairs)
    digest = archive.save(out / ARCHIVE_DIR)
    summary["archive_digest"] = digest
    summary["config_digest"] = cfg.digest()
    (out / "generation_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "generation_summary.txt").write_text(pipeline.summary_text(summary))
    record_artifact(out, "archive", ARCHIVE_DIR, digest, {"config": cfg.digest()})
    print(pipeline.summary_text(summary), end="")
    print(f"archive digest {digest}")
    return 0


def cmd_extract(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    out = _out(args, cfg)
    archive, arc_digest = load_archive(out)
    matrix = pipeline.extract(cfg, archive)
    digest = matrix.save(out / FEATURES)
    record_artifact(out, "features", FEATURES, digest, {"archive": arc_digest, "config": cfg.digest()})
    print(f"feature matrix {matrix.X.shape[0]} x {matrix.X.shape[1]}, digest {digest}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    out = _out(args, cfg)
    matrix, feat_digest = load_features(out)
    model, tr, te = pipeline.train_split(cfg, matrix)
    model.manifest["features_digest"] = feat_digest
    digest = model.save(out / MODEL)
    record_artifact(out, "model", MODEL, digest, {"features": feat_digest, "config": cfg.digest()})
    print(f"trained {len(model.trees)} trees on {len(tr)} rows ({len(te)} held out), digest {digest}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    out = _out(args, cfg)
    model, model_digest = load_model(out)
    matrix, feat_digest = load_features(out)
    report = pipeline.evaluate_split(model, matrix)
    rec = {"report": report.to_record(), "inputs": {"model": model_digest, "features": feat_digest}}
    (out / REPORT).write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
    (out / "report.csv").write_text(report.to_csv())
    record_artifact(out, "report", REPORT, sha256_file(out / REPORT), rec["inputs"])
    for k, v in report.to_record().items():
        print(f"{k:<24} {v}")
    return 0


def parse_x(text: str) -> list[float]:
    """``1..5`` (integer steps) or a comma list such as ``1,2.5,4``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty range {text}")
        return [float(x) for x in range(lo, hi + 1)]
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot read X values from {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed_override)
    out = _out(args, cfg)
    archive, arc_digest = load_archive(out)
    rows, dropped = pipeline.sweep(cfg, archive, args.x)
    table = sweep_table_csv(rows)
    (out / SWEEP).write_text(table)
    record_artifact(out, "sweep", SWEEP, sha256_file(out / SWEEP), {"archive": arc_digest, "config": cfg.digest()},
                    dropped=len(dropped))
    print(table, end="")
    return 0 if all(r.feasible for r in rows) else 1


def cmd_monitor(args) -> int:
    model_path, trace_path = Path(args.model), Path(args.trace)
    for p in (model_path, trace_path):
        if not p.exists():
            raise ArtifactError(f"missing artifact: {p}")
    model = ForestModel.load(model_path)
    spec = WindowSpec(**model.manifest["window"])
    trace = SimTrace.load(trace_path)
    flags = monitor(model, trace, spec, args.stride)
    out = Path(args.out) if args.out else trace_path.parent
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / (trace_path.stem + ".flags.csv")
    with open(log_path, "w") as fh:
        fh.write("time,label,score\n")
        for t, label, score in flags:
            fh.write(f"{t!r},{label},{score!r}\n")
    print(f"{len(flags)} windows, {sum(f[1] for f in flags)} flagged -> {log_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridpair", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run configuration (YAML)")
        sp.add_argument("--out", help="output directory (default: the config's output_dir)")
        sp.add_argument("--seed-override", type=int, dest="seed_override")

    g = sub.add_parser("generate", help="build the labeled path archive")
    common(g)
    g.add_argument("--pairs", type=int, help="number of core pair searches (overrides the config)")
    g.set_defaults(func=cmd_generate)
    for name, func, text in (("extract", cmd_extract, "feature matrix from the archive"),
                             ("train", cmd_train, "train the forest on the training split"),
                             ("eval", cmd_eval, "evaluate the model on the held-out split")):
        sp = sub.add_parser(name, help=text)
        common(sp)
        sp.set_defaults(func=func)
    s = sub.add_parser("sweep", help="F1 against the advance-notice gap X")
    common(s)
    s.add_argument("--x", type=parse_x, help="X values, e.g. 1..5 or 1,3,5")
    s.set_defaults(func=cmd_sweep)
    m = sub.add_parser("monitor", help="slide the trained property over a logged trace")
    m.add_argument("model")
    m.add_argument("trace")
    m.add_argument("--stride", type=float, default=0.5)
    m.add_argument("--out")
    m.set_defaults(func=cmd_monitor)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
