"""Model-state files.

A state file is a JSON document::

    {"format": "lavaheat-state", "version": 1,
     "config": {...features / estimator options...},
     "meta":   {...consumer id, training window, ...},
     "state":  {"theta": [...], "z_hat": [...], "d": [...], "sigma2": ...,
                "active": [...], "P_active": [...], "loglik": ..., "n_iter": ...},
     "stats":  {"p": ..., "K": ..., "lam": ..., "n": ..., "S_pp": [...], ...}}

Floats are written with Python's shortest round-trip representation, so
every vector reads back bit for bit. Symmetric matrices are stored as their
packed upper triangle (row major); ``P_active`` is the posterior covariance
restricted to the active components.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .config import model_config_from_dict, model_config_to_dict
from .errors import DataError
from .estimator import ModelState, SufficientStats
from .forecaster import ModelConfig

FORMAT = "lavaheat-state"
VERSION = 1


def _floats(a) -> list:
    return [float(x) for x in np.ravel(a)]


def _pack(A: np.ndarray) -> list:
    return _floats(A[np.triu_indices(len(A))])


def _unpack(values, n: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size != n * (n + 1) // 2:
        raise DataError(f"packed matrix has {values.size} entries, expected {n * (n + 1) // 2}")
    A = np.zeros((n, n))
    A[np.triu_indices(n)] = values
    return A + np.triu(A, 1).T


def _scalar(x):
    x = float(x)
    return x if math.isfinite(x) else None


def state_to_dict(state: ModelState, cfg: ModelConfig, meta: dict | None = None) -> dict:
    st = state.stats
    idx = np.flatnonzero(state.active)
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": model_config_to_dict(cfg),
        "meta": dict(meta or {}),
        "state": {
            "theta": _floats(state.theta),
            "z_hat": _floats(state.z_hat),
            "d": _floats(state.d),
            "sigma2": float(state.sigma2),
            "active": [bool(a) for a in state.active],
            "P_active": _pack(state.P[np.ix_(idx, idx)]),
            "loglik": _scalar(state.loglik),
            "n_iter": int(state.n_iter),
            "nonzero_params": state.nonzero_params,
        },
        "stats": {
            "p": st.p, "K": st.K, "lam": st.lam, "n": st.n,
            "S_pp": _pack(st.S_pp), "S_gg": _pack(st.S_gg), "S_gp": _floats(st.S_gp),
            "s_py": _floats(st.s_py), "s_gy": _floats(st.s_gy),
            "s_yy": float(st.s_yy), "s_y": float(st.s_y),
        },
    }


def state_from_dict(doc: dict) -> tuple[ModelState, ModelConfig, dict]:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise DataError("not a model-state document")
    if doc.get("version") != VERSION:
        raise DataError(f"unsupported state file version {doc.get('version')!r}")
    try:
        cfg = model_config_from_dict(doc["config"])
        s, m = doc["stats"], doc["state"]
        p, K = int(s["p"]), int(s["K"])
        stats = SufficientStats(
            p=p, K=K, lam=float(s["lam"]), n=float(s["n"]),
            S_pp=_unpack(s["S_pp"], p), S_gg=_unpack(s["S_gg"], K),
            S_gp=np.asarray(s["S_gp"], dtype=float).reshape(K, p),
            s_py=np.asarray(s["s_py"], dtype=float), s_gy=np.asarray(s["s_gy"], dtype=float),
            s_yy=float(s["s_yy"]), s_y=float(s["s_y"]),
        )
        active = np.asarray(m["active"], dtype=bool)
        idx = np.flatnonzero(active)
        P = np.zeros((K, K))
        P[np.ix_(idx, idx)] = _unpack(m["P_active"], idx.size)
        state = ModelState(
            theta=np.asarray(m["theta"], dtype=float),
            z_hat=np.asarray(m["z_hat"], dtype=float),
            P=P,
            d=np.asarray(m["d"], dtype=float),
            sigma2=float(m["sigma2"]),
            active=active,
            stats=stats,
            loglik=float("nan") if m.get("loglik") is None else float(m["loglik"]),
            n_iter=int(m.get("n_iter", 0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed state document: {exc}") from None
    if state.theta.shape != (p,) or state.z_hat.shape != (K,) or state.d.shape != (K,) or active.shape != (K,):
        raise DataError("state vectors do not match the recorded dimensions")
    if (cfg.nominal.p, cfg.latent.n_gamma) != (p, K):
        raise DataError("state dimensions do not match its feature configuration")
    return state, cfg, dict(doc.get("meta", {}))


def save_state(path, state: ModelState, cfg: ModelConfig, meta: dict | None = None) -> None:
    text = json.dumps(state_to_dict(state, cfg, meta), allow_nan=False, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_state(path) -> tuple[ModelState, ModelConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read state file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"state file {path} is not valid JSON: {exc}") from None
    return state_from_dict(doc)
