"""Command line: ``lrscat <subcommand> --config cfg.json [--out DIR] [--jobs N]``.

Exit codes: 0 success, 1 a verification check failed, 2 configuration or
runtime error (diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import InvalidModel, LrscatError, SchemaError
from .verify import CHECK_IDS, ConformanceConfig, fmt17, run_conformance, write_csv

SUBCOMMANDS = ("flow", "hj", "wavemap", "scatmap", "smatrix", "verify")

_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 1, "maxItems": 3}
_POS = {"type": "number", "exclusiveMinimum": 0, "x-message": "must be positive"}
_POSINT = {"type": "integer", "minimum": 1, "x-message": "must be a positive integer"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCHEMA = _obj({
    "scenario": {"type": "string"},
    "model": _obj({
        "dimension": {"type": "integer", "minimum": 1, "maximum": 3,
                      "x-message": "must be 1, 2 or 3"},
        "p0_family": {"enum": ["quadratic", "relativistic", "cosine"]},
        "potential_family": {"enum": ["isotropic", "anisotropic", "zero"]},
        "coupling": {"type": "number"},
        "mu": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1,
               "x-message": "must be in (0,1)"},
        "cutoff_radius": _POS,
        "calibrate": {"type": "boolean"},
        "energy_interval": {"type": "array", "items": {"type": "number"},
                            "minItems": 2, "maxItems": 2},
        "epsilon0": _POS,
        "anisotropy": {"type": "number"},
    }),
    "flow": _obj({
        "data": {"type": "array", "items": _obj({"x": _VEC, "xi": _VEC}, ("x", "xi"))},
        "t": {"type": "number"},
        "samples": _POSINT,
    }),
    "hj": _obj({
        "points": {"type": "array",
                   "items": _obj({"t": {"type": "number"}, "xi": _VEC}, ("t", "xi"))},
    }),
    "wavemap": _obj({
        "data": {"type": "array", "items": _obj({"x": _VEC, "xi": _VEC}, ("x", "xi"))},
        "sign": {"enum": [1, -1]},
    }),
    "scatmap": _obj({
        "points": {"type": "array", "items": _obj({"y": _VEC, "xi": _VEC}, ("y", "xi"))},
    }),
    "smatrix": _obj({
        "lambda": {"type": "number"},
        "N": {"type": "integer", "minimum": 2, "x-message": "must be an integer >= 2"},
        "Y": _POS,
        "Ny": {"type": "integer", "minimum": 2, "x-message": "must be an integer >= 2"},
        "method": {"enum": ["auto", "rotation", "generic"]},
    }),
    "verify": _obj({
        "checks": {"type": "array", "items": {"enum": CHECK_IDS}},
        "seed": {"type": "integer", "minimum": 0},
        "quick": {"type": "boolean"},
        "sizes": {"type": "object", "additionalProperties": _POSINT},
    }),
    "output": _obj({
        "dir": {"type": "string"},
        "formats": {"type": "array", "items": {"enum": ["csv", "json"]}},
    }),
})

DEFAULTS = {
    "scenario": "reference",
    "model": {"dimension": 2, "p0_family": "quadratic", "potential_family": "isotropic",
              "coupling": 0.1, "mu": 0.5, "calibrate": True, "energy_interval": [0.45, 0.55],
              "epsilon0": 0.01, "anisotropy": 0.5},
    "flow": {"data": [{"x": [10.0, 0.0], "xi": [-1.0, 0.2]}], "t": 20.0, "samples": 101},
    "hj": {"points": [{"t": 100.0, "xi": [1.0, 0.0]}]},
    "wavemap": {"data": [{"x": [10.0, 0.0], "xi": [-1.0, 0.2]}], "sign": 1},
    "scatmap": {"points": [{"y": [0.0, 5.0], "xi": [1.0, 0.0]}]},
    "smatrix": {"lambda": 0.5, "N": 128, "Y": 60.0, "Ny": 1024, "method": "auto"},
    "verify": {"checks": list(CHECK_IDS), "seed": 42, "quick": False, "sizes": {}},
    "output": {"dir": "out", "formats": ["csv", "json"]},
}


def _pointer(path):
    return "/" + "/".join(str(p) for p in path) if path else "/"


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    source: str = ""
    model_obj: object = field(default=None, repr=False)

    @property
    def hash(self):
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def section(self, name):
        return self.raw[name]

    def model(self):
        if self.model_obj is None:
            self.model_obj = build_model(self.raw["model"])
        return self.model_obj


def build_model(block):
    from .model import HamiltonianModel, calibrate_R

    kw = dict(block)
    calibrate = kw.pop("calibrate", True)
    kw["energy_interval"] = tuple(kw["energy_interval"])
    try:
        m = HamiltonianModel(**kw)
    except InvalidModel as exc:
        raise SchemaError("/model", str(exc)) from exc
    if calibrate and "cutoff_radius" not in block:
        m = calibrate_R(m).model
    return m


def validate(doc):
    """Schema-check a config document and fill defaults; raises SchemaError."""
    if not isinstance(doc, dict):
        raise SchemaError("/", "config must be a JSON object")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        msg = err.schema.get("x-message", err.message) if isinstance(err.schema, dict) else err.message
        raise SchemaError(_pointer(err.absolute_path), msg)
    merged = _merge(DEFAULTS, doc)
    e0, e1 = merged["model"]["energy_interval"]
    if not e0 <= e1:
        raise SchemaError("/model/energy_interval", "must satisfy E0 <= E1")
    d = merged["model"]["dimension"]
    for sec, key, fields in (("flow", "data", ("x", "xi")), ("wavemap", "data", ("x", "xi")),
                             ("scatmap", "points", ("y", "xi")), ("hj", "points", ("xi",))):
        if sec not in doc:
            continue
        for i, item in enumerate(merged[sec][key]):
            for f in fields:
                if len(item[f]) != d:
                    raise SchemaError(f"/{sec}/{key}/{i}/{f}", f"must have length {d}")
    return merged


def parse_config(path):
    """Read and validate a JSON config file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("/", f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    return RunConfig(validate(doc), str(p))


# ---------------------------------------------------------------- subcommands

def _header(cfg):
    return {"config_sha256": cfg.hash}


def _write_json(path, cfg, payload, stamp=True):
    doc = {"config_sha256": cfg.hash}
    doc.update(payload)
    if stamp:
        doc["metadata"] = dict(doc.get("metadata", {}))
        doc["metadata"]["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    path.write_text(json.dumps(doc, indent=2, default=_jsonify) + "\n")


def _jsonify(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return str(v)


def _formats(cfg):
    return set(cfg.section("output")["formats"])


def run_flow(cfg, out, jobs):
    from .flow import integrate_flow

    m = cfg.model()
    sec = cfg.section("flow")
    d = m.dimension
    cols = ["datum", "t", *[f"x{i + 1}" for i in range(d)], *[f"xi{i + 1}" for i in range(d)],
            "energy_drift"]
    rows = []
    ts = np.linspace(0.0, sec["t"], sec["samples"])[1:]
    for n, item in enumerate(sec["data"]):
        tr = integrate_flow(m, (item["x"], item["xi"]), sec["t"], sample_times=ts)
        for k in range(tr.times.size):
            rows.append([n, tr.times[k], *tr.x[k], *tr.xi[k], tr.energy_drift[k]])
    _emit(cfg, out, "flow", cols, rows, {"model": _model_meta(m)})
    return 0


def run_hj(cfg, out, jobs):
    from .hj import grad_phi, phi, phi_minus_free

    m = cfg.model()
    d = m.dimension
    cols = ["t", *[f"xi{i + 1}" for i in range(d)], "phi", "phi_minus_t_p0",
            *[f"dphi{i + 1}" for i in range(d)]]
    rows = []
    for item in cfg.section("hj")["points"]:
        t, xi = item["t"], np.asarray(item["xi"], float)
        rows.append([t, *xi, phi(m, t, xi), phi_minus_free(m, t, xi), *grad_phi(m, t, xi)])
    _emit(cfg, out, "hj", cols, rows, {"model": _model_meta(m)})
    return 0


def run_wavemap(cfg, out, jobs):
    from .wavemaps import wave_map

    m = cfg.model()
    d = m.dimension
    sec = cfg.section("wavemap")
    cols = [*[f"x{i + 1}" for i in range(d)], *[f"xi{i + 1}" for i in range(d)],
            *[f"x_pm{i + 1}" for i in range(d)], *[f"xi_pm{i + 1}" for i in range(d)],
            "action", "t_stop", "tail_bound"]
    rows = []
    for item in sec["data"]:
        w = wave_map(m, item["x"], item["xi"], sec["sign"])
        rows.append([*item["x"], *item["xi"], *w.x_pm, *w.xi_pm, w.action, w.t_stop,
                     w.tail_bound])
    _emit(cfg, out, "wavemap", cols, rows, {"model": _model_meta(m), "sign": sec["sign"]})
    return 0


def run_scatmap(cfg, out, jobs):
    from .scatmap import ScatteringPhase

    m = cfg.model()
    d = m.dimension
    ph = ScatteringPhase(m)
    cols = [*[f"y{i + 1}" for i in range(d)], *[f"xi{i + 1}" for i in range(d)], "psi",
            *[f"eta{i + 1}" for i in range(d)], *[f"x_plus{i + 1}" for i in range(d)], "theta"]
    rows = []
    for item in cfg.section("scatmap")["points"]:
        y, xi = np.asarray(item["y"], float), np.asarray(item["xi"], float)
        sp = ph.stationary_point(y, xi)
        rows.append([*y, *xi, ph.psi_from(sp), *sp.eta, *sp.x_plus, ph.theta(y, xi)])
    _emit(cfg, out, "scatmap", cols, rows, {"model": _model_meta(m)})
    return 0


def run_smatrix(cfg, out, jobs):
    import warnings

    from .errors import TruncationWarning
    from .scatmap import ScatteringPhase
    from .smatrix import build_smatrix, build_surface

    m = cfg.model()
    sec = cfg.section("smatrix")
    grid = build_surface(m, sec["lambda"], sec["N"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", TruncationWarning)
        S = build_smatrix(ScatteringPhase(m), grid, sec["Y"], sec["Ny"], method=sec["method"],
                          jobs=jobs)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    rows = [[j, k, S.matrix[j, k].real, S.matrix[j, k].imag]
            for j in range(S.N) for k in range(S.N)]
    meta = {"lambda": S.lam, "N": S.N, "Y": S.Y, "Ny": S.Ny,
            "unitarity_defect": S.unitarity_defect(), **S.metadata}
    _emit(cfg, out, "smatrix", ["j", "k", "re", "im"], rows,
          {"model": _model_meta(m), "metadata": meta})
    return 0


def run_verify(cfg, out, jobs):
    m = cfg.model()
    sec = cfg.section("verify")
    base = ConformanceConfig.quick() if sec["quick"] else ConformanceConfig()
    fields = {k: v for k, v in sec["sizes"].items()}
    unknown = sorted(k for k in fields if not hasattr(base, k))
    if unknown:
        raise SchemaError(f"/verify/sizes/{unknown[0]}", "unknown sample-size key")
    conf = ConformanceConfig(**{**vars(base), **fields, "seed": sec["seed"], "jobs": jobs})
    bundle = run_conformance(m, conf, sec["checks"], out_dir=out, header=_header(cfg))
    for r in bundle.reports:
        print(f"{r.status.upper():16s} {r.id:20s} observed={r.observed:.6g} "
              f"expected={r.expected:.6g} tol={r.tolerance:.3g}", file=sys.stderr)
    return 0 if bundle.passed else 1


def _model_meta(m):
    from .verify import model_summary

    return model_summary(m)


def _emit(cfg, out, stem, cols, rows, payload):
    """CSV rows plus a JSON sidecar; without CSV the rows go into the JSON."""
    fm = _formats(cfg)
    if "csv" in fm:
        write_csv(out / f"{stem}.csv", cols, rows, _header(cfg))
    if "json" in fm:
        if "csv" not in fm:
            payload = {**payload, "columns": cols, "rows": [[fmt17(v) for v in r] for r in rows]}
        _write_json(out / f"{stem}.json", cfg, payload)


RUNNERS = {"flow": run_flow, "hj": run_hj, "wavemap": run_wavemap, "scatmap": run_scatmap,
           "smatrix": run_smatrix, "verify": run_verify}


def dispatch(command, cfg, out_dir=None, jobs=None):
    """Run one subcommand; returns the process exit code."""
    out = Path(out_dir or cfg.section("output")["dir"])
    out.mkdir(parents=True, exist_ok=True)
    jobs = jobs or os.cpu_count() or 1
    try:
        return RUNNERS[command](cfg, out, jobs)
    except (LrscatError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def build_parser():
    ap = argparse.ArgumentParser(prog="lrscat", description="Long-range scattering toolkit")
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--out", default=None, help="output directory (default ./out)")
    ap.add_argument("--jobs", type=int, default=None, help="worker threads (default: all cores)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.jobs is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = parse_config(args.config)
    except SchemaError as exc:
        print(f"schema error at {exc.pointer}: {exc.reason}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        cfg.model()
    except SchemaError as exc:
        print(f"schema error at {exc.pointer}: {exc.reason}", file=sys.stderr)
        return 2
    except LrscatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return dispatch(args.command, cfg, args.out, args.jobs)


if __name__ == "__main__":
    sys.exit(main())
