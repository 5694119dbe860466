"""On-disk formats.

Model: ``NAME.json`` manifest plus ``NAME.bin`` weights (little-endian, all
parameters concatenated in layer order, weight then bias). A hardened model
adds a ``duplication`` section mapping protected fmaps to shadow channels; the
weights stay those of the base network.

Tables: CSV with a first line ``#schema=<name>/<version>``, further ``#key=value``
metadata lines, one header row, then data. Reals are written with ``repr``,
which round-trips IEEE doubles exactly.

Plans, configs and run manifests are JSON.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import ConvergenceRow, CoveragePlan, SplitSpec, VulnCurve
from .errors import FormatError, SchemaError
from .injector import ErrorModel, InjectionRecords
from .metrics import VulnerabilityTable
from .nn import AvgPool2d, Conv2d, Dense, FmapId, Flatten, MaxPool2d, Network, ReLU
from .protection import HardenedNetwork, ProtectedRecords, ProtectionEfficacy
from .quant import RangeProfile, QuantScheme

MODEL_FORMAT = "fmapguard-model"
MODEL_VERSION = 1
PLAN_FORMAT = "fmapguard-plan"
PLAN_VERSION = 1

SCHEMAS = {
    "records": 1,
    "protected-records": 1,
    "profile": 1,
    "table": 1,
    "scores": 1,
    "curves": 1,
    "distances": 1,
    "convergence": 1,
    "coverage": 1,
    "efficacy": 1,
    "split": 1,
    "summary": 1,
    "report": 1,
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def fmt_real(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- models

def _layer_entry(layer, offset):
    kind = layer.kind
    entry = {"kind": kind}
    if kind == "conv2d":
        entry.update(stride=layer.stride, padding=layer.padding)
    elif kind in ("maxpool2d", "avgpool2d"):
        entry.update(size=layer.size, stride=layer.step)
    if layer.has_params:
        w, b = layer.params()
        entry["weight"] = {"offset": offset, "shape": list(w.shape)}
        offset += w.size
        entry["bias"] = {"offset": offset, "shape": list(b.shape)}
        offset += b.size
    return entry, offset


def save_model(path, model: Network | HardenedNetwork) -> Path:
    """Write ``path`` (manifest) and the sibling ``.bin`` weights; returns the manifest path."""
    path = Path(path)
    hnet = model if isinstance(model, HardenedNetwork) else None
    net = hnet.base if hnet else model
    dtype = np.dtype(net.dtype).newbyteorder("<")
    entries, blobs, offset = [], [], 0
    for layer in net.layers:
        entry, offset = _layer_entry(layer, offset)
        entries.append(entry)
        if layer.has_params:
            blobs.extend(p.astype(dtype).tobytes() for p in layer.params())
    blob = b"".join(blobs)
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(blob)
    manifest = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "input_shape": list(net.input_shape),
        "class_count": net.class_count,
        "dtype": dtype.str,
        "layers": entries,
        "weights": {"file": bin_path.name, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()},
    }
    if hnet is not None:
        manifest["duplication"] = {
            "epsilon": hnet.epsilon,
            "fmaps": [{"layer": f.layer, "channel": f.channel, "shadow": s} for f, s in hnet.duplication.items()],
        }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _load_json(path, what):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read {what} {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON: {exc.msg}", offset=len(text[:exc.pos].encode())) from None


def _check_format(doc, path, fmt, version):
    if not isinstance(doc, dict) or doc.get("format") != fmt:
        raise FormatError(f"{path}: not a {fmt} file", offset=0)
    if doc.get("version") != version:
        raise SchemaError(f"{path}: {fmt} version {doc.get('version')!r} is not supported (expected {version})")


def load_model(path) -> Network | HardenedNetwork:
    """Inverse of ``save_model``; returns a HardenedNetwork when the manifest has a duplication section."""
    path = Path(path)
    doc = _load_json(path, "model manifest")
    _check_format(doc, path, MODEL_FORMAT, MODEL_VERSION)
    try:
        wmeta = doc["weights"]
        bin_path = path.parent / wmeta["file"]
        dtype = np.dtype(doc["dtype"])
        try:
            blob = bin_path.read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read weights {bin_path}: {exc}") from exc
        if len(blob) != wmeta["bytes"]:
            raise FormatError(f"{bin_path}: {len(blob)} bytes, manifest promises {wmeta['bytes']}",
                              offset=min(len(blob), wmeta["bytes"]))
        if hashlib.sha256(blob).hexdigest() != wmeta["sha256"]:
            raise FormatError(f"{bin_path}: checksum mismatch")
        flat = np.frombuffer(blob, dtype=dtype)

        def arr(spec):
            n = int(np.prod(spec["shape"]))
            lo = spec["offset"]
            if lo < 0 or lo + n > len(flat):
                raise FormatError(f"{bin_path}: tensor at element {lo} runs past the end",
                                  offset=lo * dtype.itemsize)
            return flat[lo:lo + n].reshape(spec["shape"]).astype(dtype.newbyteorder("="))

        layers = []
        for e in doc["layers"]:
            kind = e["kind"]
            if kind == "conv2d":
                layers.append(Conv2d(arr(e["weight"]), arr(e["bias"]), e["stride"], e["padding"]))
            elif kind == "dense":
                layers.append(Dense(arr(e["weight"]), arr(e["bias"])))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "maxpool2d":
                layers.append(MaxPool2d(e["size"], e["stride"]))
            elif kind == "avgpool2d":
                layers.append(AvgPool2d(e["size"], e["stride"]))
            elif kind == "flatten":
                layers.append(Flatten())
            else:
                raise FormatError(f"{path}: unknown layer kind {kind!r}")
        net = Network(tuple(doc["input_shape"]), layers, doc["class_count"])
        dup = doc.get("duplication")
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing or malformed field {exc}") from None
    if dup is None:
        return net
    return HardenedNetwork(net, {FmapId(d["layer"], d["channel"]): d["shadow"] for d in dup["fmaps"]},
                           float(dup.get("epsilon", 0.0)))


def bundled_model_path() -> Path:
    """The bundled desk-scale model (trained by ``fmapguard train`` with seed 0)."""
    return Path(str(resources.files("fmapguard") / "data" / "desknet" / "desknet.json"))


def base_network(model) -> Network:
    return model.base if isinstance(model, HardenedNetwork) else model


# ---------------------------------------------------------------- CSV core

def write_csv(path, schema: str, header, rows, meta: dict | None = None) -> None:
    buf = io.StringIO()
    buf.write(f"#schema={schema}/{SCHEMAS[schema]}\n")
    for k, v in (meta or {}).items():
        text = str(v)
        if "\n" in text:
            raise ValueError(f"metadata value for {k!r} spans lines")
        buf.write(f"#{k}={text}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_bytes(buf.getvalue().encode())


@dataclass
class CsvDoc:
    schema: str
    meta: dict
    header: list
    rows: list = field(repr=False)

    def column(self, name, conv=str):
        try:
            i = self.header.index(name)
        except ValueError:
            raise SchemaError(f"{self.schema} file lacks column {name!r}") from None
        return [conv(r[i]) for r in self.rows]


def read_csv(path, schema: str | None) -> CsvDoc:
    """Parse and validate; ``schema=None`` accepts any known schema."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        text = data.decode()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not UTF-8 text", offset=exc.start) from None
    lines = text.split("\n")
    first = lines[0] if lines else ""
    if not first.startswith("#schema="):
        raise FormatError(f"{path}: missing #schema line", offset=0)
    name, _, version = first[len("#schema="):].partition("/")
    if schema is None:
        schema = name
    if schema not in SCHEMAS:
        raise SchemaError(f"{path}: unknown schema {schema!r}")
    if name != schema:
        raise SchemaError(f"{path}: expected a {schema} file, found {name!r}")
    if version != str(SCHEMAS[schema]):
        raise SchemaError(f"{path}: {schema} schema version {version!r} is not supported "
                          f"(expected {SCHEMAS[schema]})")
    meta = {}
    i = 1
    offset = len(first) + 1
    while i < len(lines) and lines[i].startswith("#"):
        k, sep, v = lines[i][1:].partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed metadata line {i + 1}", offset=offset)
        meta[k] = v
        offset += len(lines[i].encode()) + 1
        i += 1
    body = list(csv.reader(io.StringIO("\n".join(lines[i:]))))
    if not body:
        raise FormatError(f"{path}: missing header row", offset=offset)
    header, rows = body[0], [r for r in body[1:] if r]
    for n, r in enumerate(rows):
        if len(r) != len(header):
            raise FormatError(f"{path}: row {n + 1} has {len(r)} fields, header has {len(header)}")
    return CsvDoc(name, meta, header, rows)


def _num(conv, path, what):
    def f(s):
        try:
            return conv(s)
        except ValueError:
            raise FormatError(f"{path}: bad {what} value {s!r}") from None
    return f


# ---------------------------------------------------------------- records

def write_records(path, records: InjectionRecords, meta: dict | None = None) -> None:
    m = {"error_model": records.error_model.value}
    m.update({k: v for k, v in records.meta.items()})
    m.update(meta or {})
    ints = {"layer", "channel", "ordinal", "image", "h", "w", "bit", "golden_top1", "injected_top1"}
    cols = [getattr(records, c).tolist() for c in InjectionRecords.COLUMNS]
    rows = [[str(v) if c in ints else fmt_real(v) for c, v in zip(InjectionRecords.COLUMNS, r)] for r in zip(*cols)]
    write_csv(path, "records", InjectionRecords.COLUMNS, rows, m)


def _records_from(doc, path):
    ints = {"layer", "channel", "ordinal", "image", "h", "w", "bit", "golden_top1", "injected_top1"}
    arrays = []
    for c in InjectionRecords.COLUMNS:
        conv = int if c in ints else float
        arrays.append(np.array(doc.column(c, _num(conv, path, c)), dtype=np.int64 if c in ints else np.float64))
    try:
        model = ErrorModel.parse(doc.meta["error_model"])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: missing or unknown error_model metadata") from None
    return InjectionRecords(model, *arrays, meta=dict(doc.meta))


def read_records(path) -> InjectionRecords:
    return _records_from(read_csv(path, "records"), path)


def write_protected_records(path, pr: ProtectedRecords, meta: dict | None = None) -> None:
    r = pr.records
    header = list(InjectionRecords.COLUMNS) + ["copy", "protected", "detected", "max_abs_divergence"]
    ints = {"layer", "channel", "ordinal", "image", "h", "w", "bit", "golden_top1", "injected_top1"}
    cols = [getattr(r, c).tolist() for c in InjectionRecords.COLUMNS]
    rows = []
    for i, vals in enumerate(zip(*cols)):
        row = [str(v) if c in ints else fmt_real(v) for c, v in zip(InjectionRecords.COLUMNS, vals)]
        row += [str(int(pr.copy[i])), str(int(pr.protected[i])), str(int(pr.detected[i])),
                fmt_real(pr.max_abs_divergence[i])]
        rows.append(row)
    m = {"error_model": r.error_model.value}
    m.update(r.meta)
    m.update(meta or {})
    write_csv(path, "protected-records", header, rows, m)


def read_protected_records(path) -> ProtectedRecords:
    doc = read_csv(path, "protected-records")
    recs = _records_from(doc, path)
    i = _num(int, path, "flag")
    return ProtectedRecords(recs, np.array(doc.column("copy", i), np.int64),
                            np.array(doc.column("protected", i), bool), np.array(doc.column("detected", i), bool),
                            np.array(doc.column("max_abs_divergence", _num(float, path, "divergence"))))


# ---------------------------------------------------------------- profile

def write_profile(path, profile: RangeProfile, meta: dict | None = None, dtype=np.float32) -> None:
    scheme = QuantScheme.from_profile(profile, dtype)
    rows = [[f.layer, f.channel, fmt_real(profile.min_of(f)), fmt_real(profile.max_of(f)), fmt_real(scheme.scale_of(f))]
            for f in profile.fmaps]
    m = {"sample_count": profile.sample_count}
    m.update(meta or {})
    write_csv(path, "profile", ["layer", "channel", "min", "max", "scale"], rows, m)


def read_profile(path) -> RangeProfile:
    doc = read_csv(path, "profile")
    layers = doc.column("layer", _num(int, path, "layer"))
    chans = doc.column("channel", _num(int, path, "channel"))
    mins = doc.column("min", _num(float, path, "min"))
    maxs = doc.column("max", _num(float, path, "max"))
    if not layers:
        raise FormatError(f"{path}: empty profile")
    nl = max(layers) + 1
    per = [dict() for _ in range(nl)]
    for l, c, lo, hi in zip(layers, chans, mins, maxs):
        if c in per[l]:
            raise FormatError(f"{path}: fmap {l}:{c} listed twice")
        per[l][c] = (lo, hi)
    for l, d in enumerate(per):
        if sorted(d) != list(range(len(d))) or not d:
            raise FormatError(f"{path}: conv {l} channels are not 0..n-1")
    try:
        return RangeProfile(tuple(np.array([d[c][0] for c in range(len(d))]) for d in per),
                            tuple(np.array([d[c][1] for c in range(len(d))]) for d in per),
                            int(doc.meta.get("sample_count", 0)))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- tables and scores

def write_table(path, table: VulnerabilityTable, census, meta: dict | None = None) -> None:
    names = list(table.prop_p)
    header = ["layer", "channel", "macs", "orig_p"] + [f"propp_{n}" for n in names] + ["v_fmap", "rel_v"]
    rows = []
    for i, f in enumerate(table.fmaps):
        rows.append([f.layer, f.channel, census.fmap_macs[f], fmt_real(table.orig_p[i])]
                    + [fmt_real(table.prop_p[n][i]) for n in names]
                    + [fmt_real(table.v_fmap[i]), fmt_real(table.rel_v[i])])
    m = {"metric": table.metric, "v_cnn": fmt_real(table.v_cnn), "defined": int(table.defined),
         "total_macs": census.total}
    m.update(meta or {})
    write_csv(path, "table", header, rows, m)


def read_table_propp(path) -> tuple[str, dict]:
    """(driving metric, {metric: {FmapId: propP}}) from a table CSV."""
    doc = read_csv(path, "table")
    fm = [FmapId(l, c) for l, c in zip(doc.column("layer", int), doc.column("channel", int))]
    out = {}
    for h in doc.header:
        if h.startswith("propp_"):
            out[h[len("propp_"):]] = dict(zip(fm, doc.column(h, _num(float, path, h))))
    return doc.meta.get("metric", ""), out


def write_scores(path, scores: dict, meta: dict | None = None) -> None:
    """Per-fmap scores, one column per name; ``scores`` maps name -> {FmapId: value}."""
    names = list(scores)
    fmaps = sorted(next(iter(scores.values())))
    rows = [[f.layer, f.channel] + [fmt_real(scores[n][f]) for n in names] for f in fmaps]
    write_csv(path, "scores", ["layer", "channel"] + names, rows, meta)


def read_scores(path) -> dict:
    doc = read_csv(path, "scores")
    fm = [FmapId(l, c) for l, c in zip(doc.column("layer", int), doc.column("channel", int))]
    return {h: dict(zip(fm, doc.column(h, _num(float, path, h)))) for h in doc.header[2:]}


# ---------------------------------------------------------------- curves, distances, convergence

def write_curves(path, curves: dict, meta: dict | None = None) -> None:
    rows = []
    for name, c in curves.items():
        for k, (f, v) in enumerate(zip(c.fmap_order, c.cumulative)):
            rows.append([name, k, f.layer, f.channel, fmt_real(v)])
    write_csv(path, "curves", ["curve", "rank", "layer", "channel", "cumulative"], rows, meta)


def read_curves(path) -> dict:
    doc = read_csv(path, "curves")
    out = {}
    for name, l, c, v in zip(doc.column("curve"), doc.column("layer", int), doc.column("channel", int),
                             doc.column("cumulative", float)):
        out.setdefault(name, ([], []))
        out[name][0].append(FmapId(l, c))
        out[name][1].append(v)
    return {k: VulnCurve(tuple(a), np.array(b)) for k, (a, b) in out.items()}


def write_distances(path, distances: dict, meta: dict | None = None) -> None:
    write_csv(path, "distances", ["metric", "distance"], [[k, fmt_real(v)] for k, v in distances.items()], meta)


def read_distances(path) -> dict:
    doc = read_csv(path, "distances")
    return dict(zip(doc.column("metric"), doc.column("distance", float)))


def write_convergence(path, rows, meta: dict | None = None) -> None:
    write_csv(path, "convergence", ["metric", "inj_per_fmap", "distance"],
              [[r.metric, r.inj_per_fmap, fmt_real(r.distance)] for r in rows], meta)


def read_convergence(path) -> list[ConvergenceRow]:
    doc = read_csv(path, "convergence")
    return [ConvergenceRow(m, k, d) for m, k, d in
            zip(doc.column("metric"), doc.column("inj_per_fmap", int), doc.column("distance", float))]


def write_coverage(path, overhead, coverage, meta: dict | None = None) -> None:
    write_csv(path, "coverage", ["prefix", "mac_overhead", "coverage"],
              [[k, fmt_real(o), fmt_real(c)] for k, (o, c) in enumerate(zip(overhead, coverage))], meta)


def write_efficacy(path, eff: ProtectionEfficacy, extra: dict | None = None, meta: dict | None = None) -> None:
    items = {
        "detected_fraction": eff.detected_fraction,
        "residual_mismatch_fraction": eff.residual_mismatch_fraction,
        "baseline_mismatch_fraction": eff.baseline_mismatch_fraction,
        "improvement_factor": eff.improvement_factor,
        "protected_injections": eff.protected_injections,
        "total_injections": eff.total_injections,
        "undetected_mismatches": eff.undetected_mismatches,
    }
    items.update(extra or {})
    rows = [[k, v if isinstance(v, int) else fmt_real(v)] for k, v in items.items()]
    write_csv(path, "efficacy", ["quantity", "value"], rows, meta)


def read_efficacy(path) -> dict:
    doc = read_csv(path, "efficacy")
    return dict(zip(doc.column("quantity"), doc.column("value", float)))


def write_split(path, split: SplitSpec, meta: dict | None = None) -> None:
    rows = [[int(i), "ES"] for i in split.es_image_ids] + [[int(i), "TS"] for i in split.ts_image_ids]
    rows.sort()
    m = {"seed": split.seed, "ratio": fmt_real(split.split_ratio)}
    m.update(meta or {})
    write_csv(path, "split", ["image", "split"], rows, m)


def read_split(path) -> SplitSpec:
    doc = read_csv(path, "split")
    ids = np.array(doc.column("image", _num(int, path, "image")), np.int64)
    tags = np.array(doc.column("split"))
    if not set(tags) <= {"ES", "TS"}:
        raise FormatError(f"{path}: split tags must be ES or TS")
    return SplitSpec(ids[tags == "ES"], ids[tags == "TS"], int(doc.meta.get("seed", 0)),
                     float(doc.meta.get("ratio", 0.8)))


# ---------------------------------------------------------------- plan

def write_plan(path, plan: CoveragePlan, meta: dict | None = None) -> None:
    doc = {
        "format": PLAN_FORMAT,
        "version": PLAN_VERSION,
        "metric": plan.metric,
        "target": plan.target,
        "predicted_coverage": plan.predicted_coverage,
        "mac_overhead_fraction": plan.mac_overhead_fraction,
        "selected": [[f.layer, f.channel] for f in plan.selected_fmaps],
    }
    doc.update(meta or {})
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_plan(path) -> CoveragePlan:
    doc = _load_json(path, "plan")
    _check_format(doc, path, PLAN_FORMAT, PLAN_VERSION)
    try:
        return CoveragePlan(tuple(FmapId(int(a), int(b)) for a, b in doc["selected"]),
                            float(doc["predicted_coverage"]), float(doc["mac_overhead_fraction"]),
                            float(doc["target"]), str(doc.get("metric", "")))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed plan: {exc}") from None


# ---------------------------------------------------------------- config and run manifest

def load_config(path) -> dict:
    """Campaign config file: a JSON object whose keys mirror the long CLI flags."""
    doc = _load_json(path, "config")
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: config must be a JSON object", offset=0)
    return {k.replace("-", "_"): v for k, v in doc.items()}


def config_hash(config: dict) -> str:
    """Digest of the result-determining settings (``threads`` never changes results)."""
    clean = {k: v for k, v in sorted(config.items()) if k not in ("threads", "config") and v is not None}
    return hashlib.sha256(json.dumps(clean, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunManifest:
    stage: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)  # name -> sha256
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)  # stage part -> seconds
    tool_version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def filename(self) -> str:
        return f"{self.stage}.manifest.json"

    def artifact_meta(self) -> dict:
        """Metadata every artifact of this run carries (deliberately free of timings)."""
        return {"tool": f"fmapguard {self.tool_version}", "manifest": self.filename, "config_hash": self.config_hash,
                "seed": self.seed}

    def write(self, directory) -> Path:
        path = Path(directory) / self.filename
        doc = {"tool": "fmapguard", "version": self.tool_version, "stage": self.stage,
               "config_hash": self.config_hash, "seed": self.seed,
               "config": {k: v for k, v in sorted(self.config.items()) if v is not None},
               "inputs": self.inputs, "outputs": self.outputs, "timings": self.timings}
        path.write_text(json.dumps(doc, indent=2, default=str) + "\n")
        return path
