"""JSON checkpoints of a fit.

Floats are written with ``repr`` precision, so a save/load round trip is
exact and the same fit always produces the same bytes. GP component models
are not stored; they are rebuilt deterministically from the hyperparameters
and the grid.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .dynamics import MlpDynamics
from .gp import GpHyper, build_component_model
from .inference import FitResult, MagixConfig, MagixState, ObservationSet
from .kernels import MaternParams

__all__ = ["FORMAT", "VERSION", "to_dict", "from_dict", "save", "load", "dumps"]

FORMAT = "magix-checkpoint"
VERSION = 1


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def _hyper_dict(h: GpHyper):
    return dict(omega2=h.matern.omega2, rho=h.matern.rho, nu=h.matern.nu,
                mean_c=h.mean_c, sigma2=h.sigma2)


def to_dict(result: FitResult):
    st = result.state
    mlp = st.mlp
    opt = {k: dict(m=_arr(v["m"]), v=_arr(v["v"]), t=int(v["t"]))
           for k, v in result.optimizer_state.items()}
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": result.config.to_dict(),
        "scale": float(result.scale),
        "grid": _arr(result.grid),
        "observations": {"tau": [_arr(t) for t in result.obs.tau],
                         "y": [_arr(v) for v in result.obs.y]},
        "hyper": [_hyper_dict(m.hyper) for m in result.models],
        "state": {
            "iteration": int(st.iteration),
            "step_scale": float(st.step_scale),
            "u": _arr(st.u),
            "sigma2": _arr(st.sigma2),
            "mlp": {"widths": list(mlp.widths), "theta": _arr(mlp.theta),
                    "in_shift": _arr(mlp.in_shift), "in_scale": _arr(mlp.in_scale),
                    "out_scale": _arr(mlp.out_scale)},
        },
        "trace": [float(v) for v in result.trace],
        "optimizer": opt,
    }


def from_dict(d):
    if d.get("format") != FORMAT:
        raise ValueError("not a checkpoint file")
    if d.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    cfg = MagixConfig.from_dict(d["config"])
    grid = np.array(d["grid"], dtype=float)
    models = [
        build_component_model(
            GpHyper(MaternParams(h["omega2"], h["rho"], h["nu"]), h["mean_c"], h["sigma2"]), grid)
        for h in d["hyper"]
    ]
    s = d["state"]
    m = s["mlp"]
    mlp = MlpDynamics(tuple(m["widths"]), np.array(m["theta"], dtype=float),
                      np.array(m["in_shift"]), np.array(m["in_scale"]), np.array(m["out_scale"]))
    u = np.array(s["u"], dtype=float).reshape(grid.size, len(models))
    state = MagixState(u, mlp, np.array(s["sigma2"], dtype=float), int(s["iteration"]),
                       float(s.get("step_scale", 1.0)))
    obs = ObservationSet(d["observations"]["tau"], d["observations"]["y"])
    opt = {k: dict(m=np.array(v["m"]), v=np.array(v["v"]), t=v["t"])
           for k, v in d.get("optimizer", {}).items()}
    return FitResult(state, models, obs, cfg, float(d["scale"]), list(d["trace"]), opt)


def dumps(result: FitResult):
    return json.dumps(to_dict(result), sort_keys=True, indent=1)


def save(result: FitResult, path):
    """Write ``result`` to ``path`` atomically."""
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(dumps(result))
        fh.write("\n")
    os.replace(tmp, path)


def load(path) -> FitResult:
    with open(path) as fh:
        return from_dict(json.load(fh))
