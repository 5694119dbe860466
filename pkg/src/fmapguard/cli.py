"""Command-line pipeline.

    fmapguard train      --out DIR                         -> model.json/.bin, training.csv
    fmapguard calibrate  --model M --out DIR               -> profile.csv
    fmapguard inject     --model M --profile P --split ts  -> split.csv, records_<split>_<model>.csv
    fmapguard estimate   --model M --split es [--records R ...]  -> scores_<split>.csv, table_<split>.csv
    fmapguard compare    --model M --baseline R [--records R ...] [--scores S] [--oracle R --sweep K,..]
                                                           -> curves.csv, distances.csv[, convergence.csv]
    fmapguard select     --model M --table T --coverage C [--validate R]  -> plan.json, coverage.csv
    fmapguard harden     --model M --plan P                -> hardened.json/.bin
    fmapguard verify     --model H --profile P             -> efficacy.csv, protected_<split>_<model>.csv
    fmapguard report     --out DIR                         -> report.csv

Every stage also writes ``<stage>.manifest.json`` (inputs, digests, timings).
All randomness derives from ``--seed``. ``--threads`` only changes speed.

Exit status: 0 ok, 1 other tool error, 2 usage, 3 corrupt or unreadable
file, 4 schema version mismatch, 5 invalid input or undefined result,
6 training diverged.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__, kernels
from .analysis import (CoveragePlan, build_curve, convergence_study, coverage_curve, greedy_select, manhattan_distance,
                       scores_v, split_dataset, validate_coverage)
from .datasets import load_dataset
from .errors import FmapGuardError
from .formats import (RunManifest, base_network, bundled_model_path, load_config, load_model, read_csv, read_plan, read_profile,
                      read_records, read_scores, read_split, read_table_propp, save_model, sha256_file, write_coverage,
                      write_csv, write_curves, write_distances, write_convergence, write_efficacy, write_plan,
                      write_profile, write_protected_records, write_records, write_scores, write_split,
                      write_table)
from .injector import CampaignConfig, ErrorModel, run_campaign
from .metrics import HEURISTICS, compose_vulnerability, heuristic_profile, injection_propp
from .nn import count_macs
from .protection import HardenedNetwork, harden, measure_protection_efficacy
from .quant import calibrate
from .seeding import derive_seed
from .train import accuracy, desknet, train_sgd

log = logging.getLogger("fmapguard")

DEFAULTS = {
    "seed": 0,
    "out": ".",
    "error_model": "fxp-flip",
    "inj_per_fmap": 256,
    "split": "ts",
    "coverage": 0.9,
    "epochs": 40,
    "lr": 0.02,
    "metric": None,
}


def _common(p):
    p.add_argument("--config", help="JSON file whose keys mirror the long flags; flags given here win")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", help="output directory (default .)")
    p.add_argument("--threads", type=int, help="worker cap; never changes results (default: all cores)")
    p.add_argument("--model", help="model manifest (.json); default: the bundled desknet")
    p.add_argument("--dataset", help="dataset directory (default: bundled 8x8 digits)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fmapguard", description=__doc__.split("\n\n")[0],
                                 epilog="exit status: 0 ok, 1 tool error, 2 usage, 3 corrupt/unreadable file, "
                                        "4 schema version mismatch, 5 invalid input or undefined result, "
                                        "6 training diverged")
    ap.add_argument("--version", action="version", version=f"fmapguard {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the desk-scale CNN")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("calibrate", help="record per-fmap activation ranges on the training split")
    _common(p)

    for name, helptext in (("inject", "run an error-injection campaign"),
                           ("verify", "measure protection efficacy of a hardened model")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--profile", help="range profile CSV from calibrate")
        p.add_argument("--error-model", choices=[m.value for m in ErrorModel])
        p.add_argument("--inj-per-fmap", type=int)
        p.add_argument("--split", choices=["es", "ts"])

    p = sub.add_parser("estimate", help="heuristic scores and vulnerability tables")
    _common(p)
    p.add_argument("--split", choices=["es", "ts"])
    p.add_argument("--records", nargs="*", default=None, help="injection record CSVs to include")
    p.add_argument("--metric", help="metric that drives V_fmap in the table")

    p = sub.add_parser("compare", help="cumulative curves, distances and convergence")
    _common(p)
    p.add_argument("--baseline", help="record CSV providing the baseline relV")
    p.add_argument("--baseline-metric", choices=["mismatch", "delta_loss"], default=None)
    p.add_argument("--records", nargs="*", default=None, help="record CSVs whose metrics are compared")
    p.add_argument("--scores", help="heuristic scores CSV from estimate")
    p.add_argument("--oracle", help="oracle record CSV for a convergence sweep")
    p.add_argument("--sweep", help="comma-separated inj/fmap values (prefixes of --records)")

    p = sub.add_parser("select", help="greedy coverage plan")
    _common(p)
    p.add_argument("--table", help="table CSV from estimate")
    p.add_argument("--metric")
    p.add_argument("--coverage", type=float)
    p.add_argument("--validate", help="TS record CSV for predicted-vs-actual coverage")

    p = sub.add_parser("harden", help="duplicate the planned fmaps")
    _common(p)
    p.add_argument("--plan")

    p = sub.add_parser("report", help="merge scalar CSV outputs of a run directory")
    _common(p)
    p.add_argument("inputs", nargs="*", help="CSV files (default: every CSV in --out)")
    return ap


def _merge_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else {}
    for k, v in vars(args).items():
        if v is None and k in cfg:
            setattr(args, k, cfg[k])
    for k, v in DEFAULTS.items():
        if getattr(args, k, "absent") is None:
            setattr(args, k, v)
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise ValueError(f"{args.command}: missing --{missing[0].replace('_', '-')}")


def _settings(args):
    """Result-determining settings of this invocation (excludes --threads and paths' directories)."""
    skip = {"command", "verbose", "config", "threads", "out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


class Stage:
    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, _settings(args), int(args.seed))
        self._t = time.perf_counter()

    def input(self, path):
        if path and Path(path).is_file():
            self.manifest.inputs[str(path)] = sha256_file(path)
        return path

    def tick(self, label):
        now = time.perf_counter()
        self.manifest.timings[label] = round(now - self._t, 6)
        self._t = now

    def path(self, name):
        return self.out / name

    def done(self, *paths):
        for p in paths:
            self.manifest.outputs[Path(p).name] = sha256_file(p)
        self.manifest.write(self.out)

    @property
    def meta(self):
        return self.manifest.artifact_meta()


def _dataset(stage):
    ds_dir = stage.args.dataset
    if ds_dir:
        for f in sorted(Path(ds_dir).iterdir()):
            stage.input(f)
    return load_dataset(ds_dir)


def _model(stage):
    if not stage.args.model:
        stage.args.model = str(bundled_model_path())
    stage.input(stage.args.model)
    stage.input(Path(stage.args.model).with_suffix(".bin"))
    return load_model(stage.args.model)


def _split(stage, net, ds):
    return split_dataset(net, ds.test_images, ds.test_labels, stage.args.seed)


def _profile(stage):
    _require(stage.args, "profile")
    return read_profile(stage.input(stage.args.profile))


# ---------------------------------------------------------------- stages

def cmd_train(args):
    st = Stage(args)
    ds = _dataset(st)
    net = desknet(seed=derive_seed(args.seed, "init") % (2**32), input_shape=ds.input_shape)
    net = train_sgd(net, ds.train_images, ds.train_labels, args.epochs, args.lr, derive_seed(args.seed, "train"))
    st.tick("train")
    model = save_model(st.path("model.json"), net)
    rows = [["train_accuracy", repr(accuracy(net, ds.train_images, ds.train_labels))],
            ["test_accuracy", repr(accuracy(net, ds.test_images, ds.test_labels))],
            ["epochs", args.epochs], ["learning_rate", repr(float(args.lr))]]
    write_csv(st.path("training.csv"), "summary", ["quantity", "value"], rows, st.meta)
    st.tick("evaluate")
    st.done(model, model.with_suffix(".bin"), st.path("training.csv"))
    print(f"test accuracy {rows[1][1]}; model written to {model}")


def cmd_calibrate(args):
    st = Stage(args)
    net = base_network(_model(st))
    ds = _dataset(st)
    prof = calibrate(net, ds.train_images)
    st.tick("calibrate")
    write_profile(st.path("profile.csv"), prof, st.meta, net.dtype)
    st.done(st.path("profile.csv"))


def _campaign_config(args):
    split = args.split.upper()
    return CampaignConfig(args.error_model, int(args.inj_per_fmap), split=split,
                          master_seed=derive_seed(args.seed, "inject", split), threads=args.threads)


def cmd_inject(args):
    st = Stage(args)
    net = base_network(_model(st))
    ds = _dataset(st)
    prof = _profile(st)
    sp = _split(st, net, ds)
    write_split(st.path("split.csv"), sp, st.meta)
    cfg = _campaign_config(args)
    kernels.set_threads(args.threads)
    recs = run_campaign(net, ds.test_images, ds.test_labels, sp.ids(cfg.split), cfg, prof)
    st.tick("campaign")
    out = st.path(f"records_{args.split}_{cfg.error_model.value}.csv")
    write_records(out, recs, st.meta)
    st.done(st.path("split.csv"), out)
    print(f"{len(recs)} injections, {int(recs.mismatch.sum())} mismatches -> {out}")


def cmd_estimate(args):
    st = Stage(args)
    net = base_network(_model(st))
    ds = _dataset(st)
    sp = _split(st, net, ds)
    ids = sp.ids(args.split)
    prof = heuristic_profile(net, ds.test_images[ids], ds.test_labels[ids])
    st.tick("heuristics")
    scores = dict(prof.scores)
    for path in args.records or []:
        recs = read_records(st.input(path))
        tag = recs.meta.get("split", "").lower() or "x"
        for m in ("mismatch", "delta_loss"):
            scores[f"{m}_{tag}_{recs.error_model.value}"] = injection_propp(recs, m)
    census = count_macs(net)
    metric = args.metric or next((k for k in scores if k.startswith("delta_loss")), "gradient")
    if metric not in scores:
        raise ValueError(f"metric {metric!r} not available; choose from {sorted(scores)}")
    table = compose_vulnerability(census, scores, metric)
    meta = dict(st.meta, skipped_gain_terms=prof.diagnostics.get("skipped_gain_terms", 0), split=args.split.upper(),
                samples=len(ids))
    s_path, t_path = st.path(f"scores_{args.split}.csv"), st.path(f"table_{args.split}.csv")
    write_scores(s_path, scores, meta)
    write_table(t_path, table, census, meta)
    st.tick("write")
    st.done(s_path, t_path)


def _rel(census, prop):
    return compose_vulnerability(census, prop, "x").rel_v_map()


def cmd_compare(args):
    st = Stage(args)
    net = base_network(_model(st))
    census = count_macs(net)
    outputs = []
    if args.baseline:
        base = read_records(st.input(args.baseline))
        bmetric = args.baseline_metric or "delta_loss"
        base_rel = _rel(census, injection_propp(base, bmetric))
        ideal = build_curve(base_rel, base_rel)
        curves = {"baseline": ideal}
        dist = {}
        for path in args.records or []:
            recs = read_records(st.input(path))
            tag = f"{recs.meta.get('split', '').lower()}_{recs.error_model.value}"
            for m in ("mismatch", "delta_loss"):
                c = build_curve(scores_v(census, injection_propp(recs, m)), base_rel)
                curves[f"{m}_{tag}"] = c
                dist[f"{m}_{tag}"] = manhattan_distance(c, ideal)
        if args.scores:
            for name, sc in read_scores(st.input(args.scores)).items():
                if name in HEURISTICS:
                    c = build_curve(scores_v(census, sc), base_rel)
                    curves[name] = c
                    dist[name] = manhattan_distance(c, ideal)
        meta = dict(st.meta, baseline_metric=bmetric)
        write_curves(st.path("curves.csv"), curves, meta)
        write_distances(st.path("distances.csv"), dist, meta)
        outputs += [st.path("curves.csv"), st.path("distances.csv")]
    if args.oracle:
        if not args.records or not args.sweep:
            raise ValueError("compare: a convergence sweep needs --records, --oracle and --sweep")
        oracle = read_records(st.input(args.oracle))
        recs = read_records(args.records[0])
        sweep = [int(k) for k in str(args.sweep).split(",") if k.strip()]
        rows = convergence_study(census, recs, oracle, sweep)
        write_convergence(st.path("convergence.csv"), rows, st.meta)
        outputs.append(st.path("convergence.csv"))
    if not outputs:
        raise ValueError("compare: give --baseline and/or --oracle")
    st.tick("compare")
    st.done(*outputs)


def cmd_select(args):
    st = Stage(args)
    net = base_network(_model(st))
    _require(args, "table")
    census = count_macs(net)
    driving, props = read_table_propp(st.input(args.table))
    metric = args.metric or driving
    if metric not in props:
        raise ValueError(f"table has no metric {metric!r}; choose from {sorted(props)}")
    table = compose_vulnerability(census, props, metric)
    plan = greedy_select(table, census, float(args.coverage))
    over, cov = coverage_curve(table, census)
    meta = dict(st.meta, metric=metric)
    extra = {}
    if args.validate:
        v = validate_coverage(plan, read_records(st.input(args.validate)), census)
        extra = {"actual_coverage": v.actual if v.defined else None, "validation_mismatches": v.mismatches}
        meta.update(predicted_coverage=repr(v.predicted), actual_coverage=repr(v.actual))
    write_plan(st.path("plan.json"), plan, extra)
    write_coverage(st.path("coverage.csv"), over, cov, meta)
    st.tick("select")
    st.done(st.path("plan.json"), st.path("coverage.csv"))
    print(f"{len(plan.selected_fmaps)} fmaps, predicted coverage {plan.predicted_coverage:.4f}, "
          f"MAC overhead {plan.mac_overhead_fraction:.4f}")


def cmd_harden(args):
    st = Stage(args)
    net = base_network(_model(st))
    _require(args, "plan")
    plan = read_plan(st.input(args.plan))
    hnet = harden(net, plan)
    path = save_model(st.path("hardened.json"), hnet)
    st.tick("harden")
    st.done(path, path.with_suffix(".bin"))


def cmd_verify(args):
    st = Stage(args)
    model = _model(st)
    if not isinstance(model, HardenedNetwork):
        model = harden(model, ())
    ds = _dataset(st)
    prof = _profile(st)
    sp = _split(st, model.base, ds)
    cfg = _campaign_config(args)
    kernels.set_threads(args.threads)
    eff, base, prot = measure_protection_efficacy(model, ds.test_images, ds.test_labels, sp.ids(cfg.split), cfg, prof)
    st.tick("campaigns")
    val = validate_coverage(_plan_of(model), base, count_macs(model.base)) if base.mismatch.any() else None
    extra = {}
    if val is not None:
        extra["actual_coverage"] = val.actual
        extra["predicted_factor"] = (1.0 / (1.0 - val.actual)) if val.actual < 1 else float("inf")
    e_path = st.path("efficacy.csv")
    p_path = st.path(f"protected_{args.split}_{cfg.error_model.value}.csv")
    write_efficacy(e_path, eff, extra, st.meta)
    write_protected_records(p_path, prot, st.meta)
    st.done(e_path, p_path)
    print(f"residual mismatch fraction {eff.residual_mismatch_fraction!r}, "
          f"improvement factor {eff.improvement_factor!r}")


def _plan_of(hnet):
    return CoveragePlan(hnet.protected_fmaps, float("nan"), float("nan"))


def cmd_report(args):
    st = Stage(args)
    paths = [Path(p) for p in args.inputs] if args.inputs else sorted(st.out.glob("*.csv"))
    rows = []
    for p in paths:
        if p.name == "report.csv":
            continue
        doc = read_csv(st.input(p), None)  # validates schema name and version
        schema = doc.schema
        if schema in ("distances", "efficacy", "summary"):
            for r in doc.rows:
                rows.append([p.name, r[0], r[1]])
        elif schema == "convergence":
            for r in doc.rows:
                rows.append([p.name, f"{r[0]}@{r[1]}", r[2]])
        else:
            rows.append([p.name, "rows", str(len(doc.rows))])
    write_csv(st.path("report.csv"), "report", ["source", "quantity", "value"], rows, st.meta)
    st.done(st.path("report.csv"))


COMMANDS = {
    "train": cmd_train, "calibrate": cmd_calibrate, "inject": cmd_inject, "estimate": cmd_estimate,
    "compare": cmd_compare, "select": cmd_select, "harden": cmd_harden, "verify": cmd_verify, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _merge_config(args)
        COMMANDS[args.command](args)
    except FmapGuardError as exc:
        print(f"fmapguard {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"fmapguard {args.command}: invalid input: {exc}", file=sys.stderr)
        return 5
    except OSError as exc:
        print(f"fmapguard {args.command}: cannot access file: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
