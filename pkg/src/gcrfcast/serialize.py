"""Versioned text serialization of trained structured-model parameters."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .extensions import Architecture, UfgcrfParams, UgcrfParams
from .gcrf import GcrfParams
from .kvconfig import FORMAT_VERSION, ConfigError, dumps_kv, floats, fmt_floats, parse_kv


def params_to_mapping(params):
    if isinstance(params, GcrfParams):
        K = params.u.shape[0]
        N = params.u.shape[1] if params.mode == "per-node" else 0
        return {
            "model": "gcrf", "mode": params.mode, "K": K, "L": len(params.v), "N": N,
            "u": fmt_floats(params.u.ravel()), "v": fmt_floats(params.v),
        }
    if isinstance(params, UgcrfParams):
        K, P = params.ci.shape
        return {
            "model": "ugcrf", "K": K, "L": len(params.v), "P": P,
            "u_columns": params.u.shape[1],
            "u": fmt_floats(params.u.ravel()), "v": fmt_floats(params.v),
            "ci": fmt_floats(params.ci.ravel()),
        }
    if isinstance(params, UfgcrfParams):
        a = params.arch
        return {
            "model": "ufgcrf", "K": params.theta.shape[0], "L": len(params.v),
            "input_dim": a.input_dim, "hidden": a.hidden, "activation": a.activation,
            "theta": fmt_floats(params.theta.ravel()), "v": fmt_floats(params.v),
            "feature_mean": fmt_floats(params.feature_mean),
            "feature_scale": fmt_floats(params.feature_scale),
        }
    raise ConfigError(f"cannot serialize {type(params).__name__}")


def dumps_params(params):
    return dumps_kv(params_to_mapping(params))


def loads_params(text):
    first = text.splitlines()[0] if text else ""
    if not first.startswith("# format-version"):
        raise ConfigError("missing format-version line")
    version = int(first.split()[-1])
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported parameter format version {version}")
    m = parse_kv(text)
    model = m.get("model")
    K, L = int(m["K"]), int(m["L"])
    v = np.array(floats(m["v"]))
    if len(v) != L:
        raise ConfigError("v length does not match L")
    if model == "gcrf":
        u = np.array(floats(m["u"]))
        if m["mode"] == "per-node":
            u = u.reshape(K, int(m["N"]))
        return GcrfParams(u, v, m["mode"])
    if model == "ugcrf":
        P, cols = int(m["P"]), int(m["u_columns"])
        return UgcrfParams(
            np.array(floats(m["u"])).reshape(K, cols), v, np.array(floats(m["ci"])).reshape(K, P)
        )
    if model == "ufgcrf":
        arch = Architecture(int(m["input_dim"]), int(m["hidden"]), m.get("activation", "tanh"))
        theta = np.array(floats(m["theta"])).reshape(K, arch.n_params)
        return UfgcrfParams(
            theta, v, arch, np.array(floats(m["feature_mean"])), np.array(floats(m["feature_scale"]))
        )
    raise ConfigError(f"unknown model tag {model!r}")


def save_params(params, path):
    Path(path).write_text(dumps_params(params), encoding="utf-8")


def load_params(path):
    return loads_params(Path(path).read_text(encoding="utf-8"))
