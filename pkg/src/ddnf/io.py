"""Model files, run manifests and CSV helpers."""

from __future__ import annotations

import csv
import json
import platform
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .flow import FlowModel, FlowSpec
from .planar import PlanarFlow
from .targets import BaseDistribution
from .velocity import VelocityField, VelocitySpec

MODEL_FORMAT = "ddnf-model"
MODEL_VERSION = 1


class ModelFileError(OSError):
    """The file could not be read or parsed as a model document."""


class ModelValidationError(ValueError):
    """The document parsed but its contents are inconsistent."""


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a).reshape(-1)]


def model_to_dict(flow, base: BaseDistribution | None = None) -> dict:
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION}
    if isinstance(flow, PlanarFlow):
        doc["kind"] = "planar"
        doc["planar"] = {"dim": flow.dim, "layers": flow.layers, "params": _floats(flow.params)}
    else:
        s = flow.spec
        v = s.velocity
        doc["kind"] = "ddnf"
        doc["flow_spec"] = {
            "dim": s.dim, "blocks": s.blocks, "cells_per_block": s.cells_per_block,
            "logdet_method": s.logdet_method, "hutchinson_probes": s.hutchinson_probes,
            "velocity": {"dim": v.dim, "hidden": list(v.hidden), "context_dim": v.context_dim,
                         "init_scale": v.init_scale, "zero_init_output": v.zero_init_output},
        }
        doc["blocks"] = [_floats(f.params) for f in flow.fields]
    if base is not None:
        doc["base"] = {"dim": base.dim, "mu": _floats(base.mu), "log_sigma": _floats(base.log_sigma),
                       "learnable": base.learnable}
    return doc


def model_from_dict(doc: dict):
    """Return ``(flow, base)``; ``base`` is None if the document has none."""
    try:
        if doc.get("format") != MODEL_FORMAT:
            raise ModelValidationError(f"not a model document (format={doc.get('format')!r})")
        if doc.get("version") != MODEL_VERSION:
            raise ModelValidationError(f"unsupported model version {doc.get('version')!r}")
        kind = doc["kind"]
        if kind == "planar":
            p = doc["planar"]
            flow = PlanarFlow(int(p["dim"]), int(p["layers"]), np.array(p["params"], dtype=np.float64))
        elif kind == "ddnf":
            fs = dict(doc["flow_spec"])
            vs = VelocitySpec(**{**fs.pop("velocity"), })
            spec = FlowSpec(velocity=vs, **fs)
            blocks = doc["blocks"]
            if len(blocks) != spec.blocks:
                raise ModelValidationError(f"{len(blocks)} parameter blocks for {spec.blocks} blocks")
            fields = [VelocityField(vs, np.array(b, dtype=np.float64)) for b in blocks]
            flow = FlowModel(spec, fields)
        else:
            raise ModelValidationError(f"unknown model kind {kind!r}")
        base = None
        if "base" in doc:
            b = doc["base"]
            base = BaseDistribution(int(b["dim"]), b["mu"], b["log_sigma"], bool(b["learnable"]))
            if base.dim != (flow.dim if isinstance(flow, PlanarFlow) else flow.spec.dim):
                raise ModelValidationError("base dimension does not match flow dimension")
    except ModelValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelValidationError(f"invalid model document: {exc}") from exc
    return flow, base


def save_model(flow, path, base: BaseDistribution | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(flow, base), indent=1) + "\n")


def load_model(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ModelFileError(f"{path}: top level is not an object")
    return model_from_dict(doc)


def _jsonable(x):
    if is_dataclass(x):
        return _jsonable(asdict(x))
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_manifest(out_dir, command: str, config: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"tool": "ddnf", "version": __version__, "command": command,
           "python": platform.python_version(), "numpy": np.__version__,
           "config": _jsonable(config)}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
