"""Batch orchestration: configuration, scenario batteries, reports, rendering.

A run is a flat list of jobs.  Each job derives its own RNG stream from
(master seed, job index), draws target classes, generates one scenario,
scores every configured attribution method on it, and emits audited
metric rows.  Rows land in ``samples.csv``; per-(method, metric)
aggregates and cross-scenario correlations land in ``report.json``;
every generated scenario is persisted in the container format so any
sample can be re-derived.  With a fixed config and seed the entire
output directory is byte-identical across reruns — the only
non-deterministic artifact, wall-clock timing, is quarantined in
``timing.json``.
"""

import hashlib
import json
import math
import multiprocessing
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import attributions, metrics, micronet, scenarios
from .attributions import MethodConfig

FORMAT_VERSION = 1

SCENARIO_KINDS = ("null", "class_single", "class_double", "saturation")

CSV_COLUMNS = ("job", "scenario_id", "kind", "converged", "method", "layer",
               "metric", "value", "c1", "c2", "c3", "c4", "flag")

MAX_COMPONENTS = 4


class ConfigError(ValueError):
    """The run configuration is malformed."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioBlock:
    """A batch of same-kind scenario jobs with shared generation options."""

    kind: str
    count: int
    gen: dict = field(default_factory=dict)

    def validate(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if int(self.count) < 0:
            raise ConfigError(f"negative count for {self.kind}")
        try:
            self.gen_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad gen options for {self.kind}: {exc}") from exc
        return self

    def gen_config(self):
        cfg = scenarios.GenConfig(**dict(self.gen))
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; JSON-serializable and hashable by content."""

    master_seed: int = 0
    out_dir: str = "bench-out"
    model: dict = field(default_factory=dict)
    blocks: tuple = ()
    methods: tuple = ()
    rectify: str = "positive"
    render_per_kind: int = 1

    def validate(self):
        if int(self.master_seed) < 0:
            raise ConfigError("master_seed must be nonnegative")
        kind = self.model.get("kind", "train")
        if kind not in ("train", "build", "load"):
            raise ConfigError(f"unknown model source kind {kind!r}")
        if kind == "load" and not self.model.get("path"):
            raise ConfigError("model source 'load' needs a path")
        known = {"kind", "path", "arch", "dataset", "epochs",
                 "model_seed", "train_seed", "lr"}
        unknown = set(self.model) - known
        if unknown:
            raise ConfigError(f"unknown model options {sorted(unknown)}")
        for block in self.blocks:
            block.validate()
        if not self.methods:
            raise ConfigError("no attribution methods configured")
        for method in self.methods:
            try:
                method.validate()
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.rectify not in metrics.RECTIFY_MODES:
            raise ConfigError(f"unknown rectify mode {self.rectify!r}")
        if int(self.render_per_kind) < 0:
            raise ConfigError("render_per_kind must be nonnegative")
        return self

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "master_seed": int(self.master_seed),
            "out_dir": self.out_dir,
            "model": dict(self.model),
            "scenarios": [{"kind": b.kind, "count": int(b.count),
                           "gen": dict(b.gen)} for b in self.blocks],
            "methods": [{"kind": m.kind, "options": dict(m.options)}
                        for m in self.methods],
            "rectify": self.rectify,
            "render_per_kind": int(self.render_per_kind),
        }

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        known = {"format_version", "master_seed", "out_dir", "model",
                 "scenarios", "methods", "rectify", "render_per_kind"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        version = data.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        try:
            blocks = tuple(ScenarioBlock(s["kind"], int(s["count"]),
                                         dict(s.get("gen", {})))
                           for s in data.get("scenarios", []))
            methods = tuple(MethodConfig(m["kind"], dict(m.get("options", {})))
                            for m in data.get("methods", []))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config entry: {exc}") from exc
        return cls(
            master_seed=int(data.get("master_seed", 0)),
            out_dir=str(data.get("out_dir", "bench-out")),
            model=dict(data.get("model", {})),
            blocks=blocks,
            methods=methods,
            rectify=str(data.get("rectify", "positive")),
            render_per_kind=int(data.get("render_per_kind", 1)),
        ).validate()

    def canonical_bytes(self):
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode()

    def sha256(self):
        return hashlib.sha256(self.canonical_bytes()).hexdigest()


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def default_config(out_dir="bench-out", master_seed=0):
    """The stock desk-scale battery: three scenario kinds, eight methods."""
    gen = {"max_steps": 800}
    return RunConfig(
        master_seed=master_seed,
        out_dir=out_dir,
        model={"kind": "train", "model_seed": 21, "train_seed": 22,
               "epochs": 40},
        blocks=(
            ScenarioBlock("null", 50, dict(gen)),
            ScenarioBlock("class_double", 50, dict(gen)),
            ScenarioBlock("saturation", 50, dict(gen)),
        ),
        methods=tuple(attributions.default_method_suite()),
        rectify="positive",
        render_per_kind=1,
    ).validate()


def resolve_model(model_cfg):
    """Build, train, or load the model a config points at."""
    kind = model_cfg.get("kind", "train")
    if kind == "load":
        return micronet.load_model(model_cfg["path"])
    arch = micronet.ArchConfig(**model_cfg.get("arch", {}))
    model = micronet.build_classifier(arch, seed=int(model_cfg.get("model_seed", 21)))
    if kind == "train":
        dataset = micronet.DatasetConfig(**model_cfg.get("dataset", {}))
        result = micronet.train_synthetic(
            model, dataset,
            epochs=int(model_cfg.get("epochs", 40)),
            seed=int(model_cfg.get("train_seed", 22)),
            lr=float(model_cfg.get("lr", 0.003)))
        model = result.model
    return model


# ---------------------------------------------------------------------------
# job execution
# ---------------------------------------------------------------------------

@dataclass
class JobSpec:
    index: int
    kind: str
    gen: dict
    render: bool


def enumerate_jobs(config):
    jobs = []
    for block in config.blocks:
        for i in range(int(block.count)):
            jobs.append(JobSpec(len(jobs), block.kind, dict(block.gen),
                                render=i < int(config.render_per_kind)))
    return jobs


def _job_rng(master_seed, job_index):
    return np.random.default_rng(
        np.random.SeedSequence((int(master_seed), int(job_index))))


def _generate(model, kind, gen_cfg, rng):
    """Draw targets and run the matching scenario generator."""
    seed = int(rng.integers(0, 2**31))
    n = model.num_classes
    if kind == "saturation":
        a = int(rng.integers(0, n))
        return scenarios.gen_saturation(model, a, gen_cfg, seed=seed)
    a, b = (int(v) for v in rng.choice(n, size=2, replace=False))
    if kind == "null":
        return scenarios.gen_null_feature(model, a, b, gen_cfg, seed=seed)
    if kind == "class_single":
        return scenarios.gen_class_single(model, a, b, gen_cfg, seed=seed)
    if kind == "class_double":
        return scenarios.gen_class_double(model, a, b, gen_cfg, seed=seed)
    raise ConfigError(f"unknown scenario kind {kind!r}")


def _row(job_index, sid, kind, converged, method_cfg, metric, result,
         flag="ok"):
    layer = ""
    if method_cfg.kind == "gradcam":
        layer = str(method_cfg.options.get("layer", "conv2"))
    row = {"job": job_index, "scenario_id": sid, "kind": kind,
           "converged": bool(converged), "method": method_cfg.kind,
           "layer": layer, "metric": metric, "flag": flag,
           "value": None, "components": ()}
    if flag == "ok":
        sample = metrics.make_sample(sid, method_cfg.kind, metric, result,
                                     converged=bool(converged))
        row["value"] = sample.value
        row["components"] = sample.components
    return row


_PLAYER_ORDER = {
    "null": ("f_a", "f_null"),
    "class_single": ("f_a",),
    "class_double": ("f_a", "f_b"),
    "saturation": ("f_a1", "f_a2"),
}


def score_instance(model, inst, sid, job_index, methods, rectify_mode,
                   keep_maps=False):
    """All metric rows for one scenario; optionally the maps themselves."""
    composed = inst.composed()
    regions = inst.regions()
    players = [regions[name] for name in _PLAYER_ORDER[inst.kind]]
    rows = []
    maps = {}

    def compute(method_cfg, target):
        return attributions.run_method(model, composed, target, method_cfg,
                                       reference=inst.reference,
                                       players=players)

    for method_cfg in methods:
        if inst.kind == "null":
            amap = compute(method_cfg, inst.target_a)
            mass = metrics.rectify(amap.scores, rectify_mode)
            try:
                value = metrics.null_feature_metric(mass, regions["f_null"])
                rows.append(_row(job_index, sid, inst.kind, inst.converged,
                                 method_cfg, "null", value))
            except metrics.UndefinedMetricError:
                rows.append(_row(job_index, sid, inst.kind, inst.converged,
                                 method_cfg, "null", None, flag="undefined"))
        elif inst.kind == "class_double":
            amap = compute(method_cfg, inst.target_a)
            bmap = compute(method_cfg, inst.target_b)
            mass_a = metrics.rectify(amap.scores, rectify_mode)
            mass_b = metrics.rectify(bmap.scores, rectify_mode)
            try:
                value = metrics.class_sensitivity_double(
                    mass_a, mass_b, regions["f_a"], regions["f_b"])
                rows.append(_row(job_index, sid, inst.kind, inst.converged,
                                 method_cfg, "class_double", value))
            except metrics.UndefinedMetricError:
                rows.append(_row(job_index, sid, inst.kind, inst.converged,
                                 method_cfg, "class_double", None,
                                 flag="undefined"))
        elif inst.kind == "class_single":
            amap = compute(method_cfg, inst.target_a)
            bmap = compute(method_cfg, inst.target_b)
            for metric, scores in (("single_ratio_a", amap.scores),
                                   ("single_ratio_b", bmap.scores)):
                mass = metrics.rectify(scores, rectify_mode)
                try:
                    value = metrics.in_out_ratio(mass, regions["f_a"])
                    rows.append(_row(job_index, sid, inst.kind,
                                     inst.converged, method_cfg, metric,
                                     value))
                except metrics.UndefinedMetricError:
                    rows.append(_row(job_index, sid, inst.kind,
                                     inst.converged, method_cfg, metric,
                                     None, flag="undefined"))
        elif inst.kind == "saturation":
            amap = compute(method_cfg, inst.target_a)
            mass = metrics.rectify(amap.scores, rectify_mode)
            for metric, name in (("sat_mass_1", "f_a1"),
                                 ("sat_mass_2", "f_a2")):
                row_, col_, h_, w_ = regions[name]
                patch_mass = float(mass[row_:row_ + h_, col_:col_ + w_].sum())
                rows.append(_row(job_index, sid, inst.kind, inst.converged,
                                 method_cfg, metric, patch_mass))
        if keep_maps:
            maps[_method_label(method_cfg)] = amap
    return rows, maps


def _method_label(method_cfg):
    if method_cfg.kind == "gradcam":
        return f"gradcam_{method_cfg.options.get('layer', 'conv2')}"
    return method_cfg.kind


_WORKER = {}


def _init_worker(model, methods, rectify_mode, master_seed):
    _WORKER.update(model=model, methods=methods, rectify=rectify_mode,
                   master_seed=master_seed)


def _execute_job(job):
    """One job, crash-isolated; returns a picklable result record."""
    model = _WORKER["model"]
    try:
        rng = _job_rng(_WORKER["master_seed"], job.index)
        gen_cfg = scenarios.GenConfig(**job.gen)
        inst = _generate(model, job.kind, gen_cfg, rng)
        sid = f"{job.kind}-{job.index:04d}"
        rows, maps = score_instance(model, inst, sid, job.index,
                                    _WORKER["methods"], _WORKER["rectify"],
                                    keep_maps=job.render)
        return {"index": job.index, "sid": sid, "kind": job.kind,
                "error": None, "instance": inst, "rows": rows, "maps": maps}
    except Exception as exc:  # job isolation: record, never propagate
        return {"index": job.index, "sid": f"{job.kind}-{job.index:04d}",
                "kind": job.kind, "error": f"{type(exc).__name__}: {exc}",
                "instance": None, "rows": [], "maps": {}}


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def _write_bytes(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_json(path, obj):
    _write_bytes(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n")
                 .encode())


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows):
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        comps = list(row["components"])[:MAX_COMPONENTS]
        comps += [None] * (MAX_COMPONENTS - len(comps))
        fields = [_fmt(row["job"]), row["scenario_id"], row["kind"],
                  _fmt(row["converged"]), row["method"], row["layer"],
                  row["metric"], _fmt(row["value"]),
                  *(_fmt(c) for c in comps), row["flag"]]
        lines.append(",".join(fields))
    return ("\n".join(lines) + "\n").encode()


def write_pgm(path, gray01):
    """Binary portable graymap from values in [0, 1]."""
    arr = np.asarray(gray01, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"pgm needs a 2-D array, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("pgm: non-finite values")
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode()
    _write_bytes(path, header + data.tobytes())


def normalize_map(scores):
    """Min-max to [0, 1]; constant maps sit at mid-gray 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = float(scores.min()), float(scores.max())
    if hi - lo <= 0.0:
        return np.full(scores.shape, 0.5)
    return (scores - lo) / (hi - lo)


def render_heatmaps(inst, maps, out_dir):
    """Composed input plus each map as P5 graymaps, with a JSON index."""
    os.makedirs(out_dir, exist_ok=True)
    lo, hi = inst.pixel_range
    composed = inst.composed()
    input_gray = (composed.sum(axis=0) / composed.shape[0] - lo) / (hi - lo)
    write_pgm(os.path.join(out_dir, "input.pgm"), np.clip(input_gray, 0, 1))
    files = {"input": "input.pgm"}
    for label in sorted(maps):
        amap = maps[label]
        name = f"{label}.pgm"
        write_pgm(os.path.join(out_dir, name), normalize_map(amap.scores))
        files[label] = name
    index = {
        "format_version": FORMAT_VERSION,
        "kind": inst.kind,
        "target_a": inst.target_a,
        "target_b": inst.target_b,
        "converged": inst.converged,
        "patches": {name: list(region)
                    for name, region in inst.regions().items()},
        "files": files,
    }
    _write_json(os.path.join(out_dir, "index.json"), index)
    return index


# ---------------------------------------------------------------------------
# aggregation + reports
# ---------------------------------------------------------------------------

PER_SCENARIO_METRICS = ("null", "class_double", "single_ratio_a",
                        "single_ratio_b", "sat_mass_1", "sat_mass_2")

CORRELATION_SOURCES = {
    "class_single_corr": ("single_ratio_a", "single_ratio_b",
                          metrics.class_sensitivity_single),
    "saturation_corr": ("sat_mass_1", "sat_mass_2", metrics.saturation_corr),
}


def aggregate_rows(rows):
    """Means over converged, unflagged rows, grouped by (method, layer, metric)."""
    groups = {}
    for row in rows:
        key = (row["method"], row["layer"], row["metric"])
        groups.setdefault(key, []).append(row)
    out = []
    for (method, layer, metric) in sorted(groups):
        bucket = groups[(method, layer, metric)]
        included = [r["value"] for r in bucket
                    if r["flag"] == "ok" and r["converged"]]
        out.append({
            "method": method, "layer": layer, "metric": metric,
            "mean": (sum(included) / len(included)) if included else None,
            "n": len(included),
            "excluded": len(bucket) - len(included),
        })
    return out


def correlate_rows(rows):
    """Cross-scenario correlations per (method, layer), converged rows only."""
    cells = {}
    for row in rows:
        if row["flag"] != "ok" or not row["converged"]:
            continue
        key = (row["method"], row["layer"], row["scenario_id"])
        cells.setdefault(key, {})[row["metric"]] = row["value"]
    out = []
    method_layers = sorted({(m, l) for (m, l, _s) in cells})
    for corr_name, (metric_x, metric_y, func) in sorted(
            CORRELATION_SOURCES.items()):
        for method, layer in method_layers:
            pairs = []
            incomplete = 0
            for (m, l, sid), got in sorted(cells.items()):
                if (m, l) != (method, layer):
                    continue
                if metric_x in got or metric_y in got:
                    if metric_x in got and metric_y in got:
                        pairs.append((got[metric_x], got[metric_y]))
                    else:
                        incomplete += 1
            if not pairs and not incomplete:
                continue
            entry = {"method": method, "layer": layer, "metric": corr_name,
                     "n": len(pairs), "excluded": incomplete, "value": None,
                     "note": ""}
            try:
                entry["value"] = func(pairs).value
            except metrics.UndefinedMetricError as exc:
                entry["note"] = str(exc)
            out.append(entry)
    return out


@dataclass
class EvaluationReport:
    """A finished run: deterministic report dict plus local bookkeeping."""

    out_dir: str
    report: dict
    wall_clock: float

    def aggregate(self, method, metric, layer=""):
        for entry in self.report["aggregates"]:
            if (entry["method"], entry["layer"], entry["metric"]) \
                    == (method, layer, metric):
                return entry
        raise KeyError(f"no aggregate for {(method, layer, metric)}")

    def correlation(self, method, metric, layer=""):
        for entry in self.report["correlations"]:
            if (entry["method"], entry["layer"], entry["metric"]) \
                    == (method, layer, metric):
                return entry
        raise KeyError(f"no correlation for {(method, layer, metric)}")


def run(config, out_dir=None, jobs=1):
    """Execute the full battery described by `config`.

    Results are gathered by job index regardless of worker completion
    order, so `jobs > 1` changes wall-clock time only, never bytes.
    """
    config.validate()
    started = time.time()
    out = out_dir or config.out_dir
    os.makedirs(out, exist_ok=True)
    os.makedirs(os.path.join(out, "scenarios"), exist_ok=True)

    _write_json(os.path.join(out, "config.json"), config.to_dict())
    model = resolve_model(config.model)
    micronet.save_model(model, os.path.join(out, "model.axbm"))

    specs = enumerate_jobs(config)
    methods = tuple(config.methods)
    if jobs > 1 and len(specs) > 1:
        with multiprocessing.Pool(
                processes=int(jobs), initializer=_init_worker,
                initargs=(model, methods, config.rectify,
                          config.master_seed)) as pool:
            results = pool.map(_execute_job, specs, chunksize=1)
    else:
        _init_worker(model, methods, config.rectify, config.master_seed)
        results = [_execute_job(spec) for spec in specs]
    results.sort(key=lambda r: r["index"])

    rows = []
    failures = []
    kind_counts = {}
    for result in results:
        stats = kind_counts.setdefault(result["kind"],
                                       {"jobs": 0, "converged": 0})
        stats["jobs"] += 1
        if result["error"] is not None:
            failures.append([result["index"], result["error"]])
            continue
        inst = result["instance"]
        stats["converged"] += int(inst.converged)
        scenarios.save_instance(
            inst, os.path.join(out, "scenarios", result["sid"]),
            result["sid"])
        rows.extend(result["rows"])
        if result["maps"]:
            render_heatmaps(inst, result["maps"],
                            os.path.join(out, "heatmaps", result["sid"]))

    _write_bytes(os.path.join(out, "samples.csv"), rows_to_csv(rows))
    report = {
        "format_version": FORMAT_VERSION,
        "config_sha256": config.sha256(),
        "master_seed": int(config.master_seed),
        "counts": {
            "total_jobs": len(specs),
            "failed_jobs": len(failures),
            "per_kind": kind_counts,
        },
        "aggregates": aggregate_rows(rows),
        "correlations": correlate_rows(rows),
        "failures": failures,
    }
    _write_json(os.path.join(out, "report.json"), report)
    wall = time.time() - started
    _write_json(os.path.join(out, "timing.json"),
                {"wall_clock_seconds": wall})
    return EvaluationReport(out, report, wall)


def layer_sweep(config, layers, out_dir=None, jobs=1):
    """The same battery scored by one gradcam instance per conv layer."""
    config.validate()
    layers = [str(layer) for layer in layers]
    if not layers:
        raise ConfigError("layer sweep needs at least one layer")
    model = resolve_model(config.model)
    known = model.conv_layer_names()
    unknown = [layer for layer in layers if layer not in known]
    if unknown:
        raise ConfigError(f"unknown conv layer(s) {unknown}; model has {known}")
    swept = RunConfig(
        master_seed=config.master_seed,
        out_dir=out_dir or config.out_dir,
        model=dict(config.model),
        blocks=tuple(config.blocks),
        methods=tuple(MethodConfig("gradcam", {"layer": layer})
                      for layer in layers),
        rectify=config.rectify,
        render_per_kind=config.render_per_kind,
    ).validate()
    return run(swept, out_dir=out_dir, jobs=jobs)
