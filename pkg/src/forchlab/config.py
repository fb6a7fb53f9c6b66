"""Run configuration: TOML in, validated :class:`RunConfig` out, and back."""
from __future__ import annotations

import copy
import hashlib
import os
import re
from dataclasses import dataclass, field

import numpy as np
import tomli
import tomli_w

from .constitutive import ForchheimerModel
from .expr import ExpressionError, compile_expr
from .fields import PRESETS, build_medium

SECTIONS = ("medium", "model", "boundary", "initial", "solver", "verify", "pair", "sweep",
            "odecheck")

DEFAULTS = {
    "medium": {"preset": "homogeneous", "dim": 1, "resolution": [32], "porosity": 0.5},
    "model": {"alphas": [0.0, 1.0], "coeffs": [1.0, 1.0], "linear_test_mode": False},
    "boundary": {"Psi": "0"},
    "initial": {"p0": "Psi + sin(pi*x)"},
    "solver": {"dt": 0.02, "t_end": 4.0, "picard_tol": 1e-10, "picard_max": 200, "stride": 1},
    "verify": {"families": ["energy", "l2", "gradient", "time_derivative", "monitor"],
               "tail_window": 0.25, "t0": 0.5, "T": 1.0, "refine": False,
               "pointwise_samples": 2000, "cp_safety": 1.1, "checkpoint": ""},
    "pair": {},
    "sweep": {},
    "odecheck": {"battery": "default"},
}

PAIR_DEFAULTS = {"boundary": None, "initial": None, "unbounded": False, "calibration": []}
SWEEP_DEFAULTS = {"command": "verify", "parameters": {}}
_ALLOWED = {
    "solver": {"dt", "t_end", "picard_tol", "picard_max", "stride"},
    "boundary": {"Psi", "Psi_t", "Psi_tt"},
    "initial": {"p0"},
    "model": {"alphas", "coeffs", "linear_test_mode"},
    "verify": set(DEFAULTS["verify"]),
    "pair": set(PAIR_DEFAULTS),
    "sweep": set(SWEEP_DEFAULTS),
    "odecheck": {"battery", "names"},
}


class ConfigError(ValueError):
    def __init__(self, message, field=None, line=None, column=None):
        super().__init__(message)
        self.field = field
        self.line = line
        self.column = column


@dataclass
class RunConfig:
    medium: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    boundary: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    solver: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    pair: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    odecheck: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self):
        out = {"seed": self.seed}
        for name in SECTIONS:
            sec = getattr(self, name)
            if sec:
                out[name] = copy.deepcopy(sec)
        return out

    def medium_description(self):
        desc = dict(self.medium)
        desc.update({k: self.model[k] for k in ("alphas", "coeffs", "linear_test_mode")})
        desc.setdefault("seed", self.seed)
        return desc

    def digest(self):
        return hashlib.sha256(dumps(self).encode()).hexdigest()

    def replace(self, **sections):
        new = copy.deepcopy(self)
        for k, v in sections.items():
            setattr(new, k, v)
        return new

    def with_override(self, dotted, value):
        """Copy with ``section.key`` set to ``value`` (used by sweeps and CLI flags)."""
        new = copy.deepcopy(self)
        if dotted == "seed":
            new.seed = int(value)
            return validate(new)
        sec, _, key = dotted.partition(".")
        if sec not in SECTIONS or not key:
            raise ConfigError(f"cannot override {dotted!r}", field=dotted)
        getattr(new, sec)[key] = value
        return validate(new)


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _check_keys(name, sec):
    allowed = _ALLOWED.get(name)
    if allowed is None:
        return
    extra = set(sec) - allowed
    if extra:
        raise ConfigError(f"{name}: unknown keys {sorted(extra)}", field=f"{name}.{sorted(extra)[0]}")


def from_dict(doc, base_dir=None):
    """Fill defaults, resolve file paths and validate."""
    doc = dict(doc)
    unknown = set(doc) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown sections {sorted(unknown)}", field=sorted(unknown)[0])
    seed = doc.pop("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer", field="seed")
    kw = {}
    for name in SECTIONS:
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{name} must be a table", field=name)
        if name == "pair":
            sec = _merge(PAIR_DEFAULTS, given) if given else {}
        elif name == "sweep":
            sec = _merge(SWEEP_DEFAULTS, given) if given else {}
        elif name == "medium" and given.get("preset", "homogeneous") != "homogeneous":
            sec = _merge({"preset": "homogeneous", "dim": 1, "resolution": [32]}, given)
        else:
            sec = _merge(DEFAULTS[name], given)
        _check_keys(name, sec)
        kw[name] = sec
    cfg = RunConfig(seed=seed, **kw)
    if base_dir is not None:
        _resolve_paths(cfg, base_dir)
    return validate(cfg)


def _resolve_paths(cfg, base_dir):
    for key in ("porosity", "coeffs"):
        v = cfg.medium.get(key)
        if isinstance(v, str) and v.endswith(".npy"):
            cfg.medium[key] = os.path.normpath(os.path.join(base_dir, v))
    ck = cfg.verify.get("checkpoint")
    if ck:
        cfg.verify["checkpoint"] = os.path.normpath(os.path.join(base_dir, ck))


def validate(cfg):
    m = cfg.medium
    if m.get("preset") not in PRESETS:
        raise ConfigError(f"medium.preset must be one of {sorted(PRESETS)}; got {m.get('preset')!r}",
                          field="medium.preset")
    dim = m.get("dim")
    if dim not in (1, 2):
        raise ConfigError("medium.dim must be 1 or 2", field="medium.dim")
    res = m.get("resolution")
    if isinstance(res, int):
        m["resolution"] = res = [res] * dim
    if not (isinstance(res, list) and len(res) == dim and all(isinstance(r, int) for r in res)):
        raise ConfigError("medium.resolution must list one integer per axis", field="medium.resolution")
    for key in ("porosity", "coeffs"):
        v = m.get(key)
        if isinstance(v, str) and v.endswith(".npy") and not os.path.exists(v):
            raise ConfigError(f"medium.{key}: file {v!r} does not exist", field=f"medium.{key}")
    alphas = cfg.model["alphas"]
    coeffs = cfg.model["coeffs"]
    if not isinstance(alphas, list) or not alphas:
        raise ConfigError("model.alphas must be a non-empty list", field="model.alphas")
    if not isinstance(coeffs, list) or len(coeffs) != len(alphas):
        raise ConfigError("model.coeffs must list one coefficient per exponent", field="model.coeffs")
    try:
        ForchheimerModel(np.asarray(alphas, float), np.ones(len(alphas)),
                         linear_test_mode=bool(cfg.model["linear_test_mode"]))
    except ValueError as exc:
        raise ConfigError(f"model.alphas: {exc}", field="model.alphas") from None
    for sec in ("boundary", "initial"):
        for k, v in getattr(cfg, sec).items():
            _check_expr(v, f"{sec}.{k}")
    for k, v in cfg.solver.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
            raise ConfigError(f"solver.{k} must be a positive number", field=f"solver.{k}")
    v = cfg.verify
    if not 0 < v["tail_window"] <= 1:
        raise ConfigError("verify.tail_window must lie in (0, 1]", field="verify.tail_window")
    if v["cp_safety"] < 1:
        raise ConfigError("verify.cp_safety must be >= 1", field="verify.cp_safety")
    if v["checkpoint"] and not os.path.exists(v["checkpoint"]):
        raise ConfigError(f"verify.checkpoint: file {v['checkpoint']!r} does not exist",
                          field="verify.checkpoint")
    if cfg.pair:
        for k in ("boundary", "initial"):
            sub = cfg.pair.get(k)
            if sub is not None:
                if not isinstance(sub, dict):
                    raise ConfigError(f"pair.{k} must be a table", field=f"pair.{k}")
                for kk, vv in sub.items():
                    _check_expr(vv, f"pair.{k}.{kk}")
        for i, c in enumerate(cfg.pair["calibration"]):
            _check_expr(c, f"pair.calibration[{i}]")
    if cfg.sweep:
        if cfg.sweep["command"] not in ("simulate", "verify", "pair"):
            raise ConfigError("sweep.command must be simulate, verify or pair", field="sweep.command")
        for k, vals in cfg.sweep["parameters"].items():
            if not isinstance(vals, list) or not vals:
                raise ConfigError(f"sweep.parameters.{k} must be a non-empty list",
                                  field=f"sweep.parameters.{k}")
    try:
        build_medium(cfg.medium_description())
    except ValueError as exc:
        msg = str(exc)
        fld = "medium.porosity" if "porosity" in msg else "medium"
        raise ConfigError(f"{fld}: {msg}", field=fld) from None
    return cfg


def _check_expr(value, name):
    if isinstance(value, str) and (name.startswith("initial") or ".initial" in name
                                   or name.startswith("pair.calibration")):
        # initial data may refer to the boundary extension at t = 0
        value = re.sub(r"\bPsi\b", "0", value)
    try:
        compile_expr(value)
    except ExpressionError as exc:
        raise ConfigError(f"{name}: {exc}", field=name) from None


_POS = re.compile(r"line (\d+), column (\d+)")


def loads(text, base_dir=None):
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = _POS.search(str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        raise ConfigError(f"config parse error: {exc}", line=line, column=col) from None
    return from_dict(doc, base_dir)


def parse_config(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return loads(text, base_dir=os.path.dirname(os.path.abspath(path)))


def dumps(cfg):
    return tomli_w.dumps(_toml_safe(cfg.to_dict()))


def _toml_safe(obj):
    # TOML has no null; drop unset optional keys
    if isinstance(obj, dict):
        return {k: _toml_safe(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_toml_safe(v) for v in obj]
    return obj


def write_config(cfg, path):
    from .io import atomic_write
    atomic_write(path, dumps(cfg))
