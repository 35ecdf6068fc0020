"""Scenario files: loading, overrides, schema validation and assembly.

A scenario is a YAML document with the sections ``system``, ``density``,
``controller``, ``sim`` and ``output``. The schema lives next to this module
in ``scenario.schema.json``; unknown keys are rejected. Defaults that are not
written in the file are filled in by the dataclasses they feed.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np
import yaml
from scipy.linalg import solve_continuous_lyapunov

from .cbf import CbfConfig, circle_barrier, quadratic_lyapunov
from .controller import ControllerConfig, NominalSpec, compute_gamma, estimate_bound_constants
from .density import DensityConfig, ObstacleSpec
from .dynamics import (
    LaneKeepingParams,
    PerturbationSpec,
    make_bicycle,
    make_double_gyre,
    make_lane_keeping,
    make_single_integrator,
)
from .errors import CdfError, ConfigError
from .simulator import BicyclePlant, LaneKeepingPlant, SimConfig
from .tracking import BicycleTrackingConfig

PRESET_SUFFIX = ".scenario"


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads 1e-5 style numbers as floats (YAML 1.2 rule)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                    |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                    |[-+]?\.(?:inf|Inf|INF)
                    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _yaml(text):
    return yaml.load(text, Loader=_Loader)  # noqa: S506 - SafeLoader subclass


def schema():
    text = resources.files("cdfnav").joinpath("scenario.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def preset_names():
    root = resources.files("cdfnav").joinpath("presets")
    return sorted(p.name[: -len(PRESET_SUFFIX)] for p in root.iterdir() if p.name.endswith(PRESET_SUFFIX))


def resolve_path(name_or_path):
    """A filesystem path, or the name of a shipped preset."""
    p = Path(name_or_path)
    if p.exists():
        return p
    stem = p.name[: -len(PRESET_SUFFIX)] if p.name.endswith(PRESET_SUFFIX) else p.name
    candidate = resources.files("cdfnav").joinpath("presets", stem + PRESET_SUFFIX)
    if candidate.is_file():
        return Path(str(candidate))
    raise ConfigError(f"no scenario file or preset named {name_or_path!r}")


def parse(text):
    try:
        doc = _yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse scenario: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a mapping at the top level")
    return doc


def apply_override(doc, item):
    """Set ``a.b.c=value`` in place; the value is read as YAML (so 1, 1.5, [1, 2], true)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = _yaml(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc
    node = doc
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
        node = nxt
    node[parts[-1]] = value
    return doc


def validate(doc):
    v = jsonschema.Draft202012Validator(schema())
    errors = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'.'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("invalid scenario:\n  " + "\n  ".join(lines))
    return doc


def load(name_or_path, overrides=(), seed=None):
    """Read, override and validate a scenario; returns the resolved document."""
    path = resolve_path(name_or_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    doc = parse(text)
    for item in overrides:
        apply_override(doc, item)
    if seed is not None:
        doc.setdefault("sim", {})["seed"] = int(seed)
    return validate(doc)


def dump(doc):
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None, allow_unicode=True)


# assembly -------------------------------------------------------------------

@dataclass
class Scenario:
    doc: dict
    model: object
    dcfg: DensityConfig
    ctrl: object
    sim: SimConfig
    plant_factory: Callable | None
    runs: int
    output_dir: str | None
    gamma: float | None = None

    def plant(self):
        return self.plant_factory() if self.plant_factory is not None else None


def _floats(v):
    return tuple(float(x) for x in v)


def _model(system):
    name = system["name"]
    p = system.get("params", {})
    if name == "single_integrator":
        return make_single_integrator(int(p.get("n", 2))), None
    if name == "double_gyre":
        return make_double_gyre(), None
    if name == "lane_keeping":
        lane = LaneKeepingParams(**{k: float(v) for k, v in p.get("lane", {}).items()})
        model = make_lane_keeping(lane, float(p.get("v0", 24.0)), float(p.get("r_d", 0.0)))
        return model, lambda: LaneKeepingPlant(model)
    # bicycle: the controller works on the planar single integrator
    l_r, L = float(p.get("l_r", 1.0)), float(p.get("L", 2.0))
    bike = make_bicycle(l_r, L)
    tr = {k: v for k, v in p.get("tracking", {}).items()}
    tcfg = BicycleTrackingConfig(l_r=l_r, L=L, **tr)
    return make_single_integrator(2), lambda: BicyclePlant(bike, tcfg)


def closed_loop_lyapunov(A, B, K):
    """P solving (Acl + mu I)' P + P (Acl + mu I) = -I, scaled to unit top eigenvalue.

    mu is 90% of the slowest closed-loop decay rate, so x'Px decays at a rate
    close to the slowest mode instead of the generic lower bound.
    """
    n = A.shape[0]
    Acl = A - np.asarray(B, dtype=float).reshape(n, -1) @ np.asarray(K, dtype=float).reshape(-1, n)
    rates = -np.linalg.eigvals(Acl).real
    if rates.min() <= 0:
        raise ConfigError("closed-loop-lyapunov needs a stabilizing nominal gain")
    mu = 0.9 * rates.min()
    P = solve_continuous_lyapunov((Acl + mu * np.eye(n)).T, -np.eye(n))
    P = 0.5 * (P + P.T)
    return P / np.linalg.eigvalsh(P).max()


def _density(dens, model, ctrl_doc):
    obstacles = []
    for ob in dens["obstacles"]:
        obstacles.append(ObstacleSpec(
            kind=ob["kind"], r1=float(ob["r1"]), r2=float(ob["r2"]),
            center=_floats(ob.get("center", ())),
            a_max=float(ob["a_max"]) if "a_max" in ob else None,
            side=int(ob.get("side", 1)),
        ))
    target = np.array(_floats(dens["target"]))
    P = dens.get("P")
    if P == "closed-loop-lyapunov":
        nom = ctrl_doc.get("nominal", {})
        if nom.get("kind") != "linear" or "A" not in model.params:
            raise ConfigError("closed-loop-lyapunov needs a linear model and a linear nominal")
        P = closed_loop_lyapunov(model.params["A"], model.params["B"], nom["K"])
    elif P is not None:
        P = np.array(P, dtype=float)
    return DensityConfig(
        tuple(obstacles), target,
        alpha=float(dens.get("alpha", 0.2)), P=P, eta=float(dens.get("eta", 0.05)),
    )


def _disturbance(d, model):
    if d is None:
        return None
    matrix = d.get("matrix")
    if matrix == "lane-keeping":
        if "D1" not in model.params:
            raise ConfigError("matrix 'lane-keeping' needs the lane_keeping system")
        matrix = np.column_stack([model.params["D1"], model.params["D2"]]).tolist()
    return PerturbationSpec(
        amplitude=_floats(d["amplitude"]),
        mode=d.get("mode", "seeded-random-constant"),
        matrix=matrix,
        value=_floats(d["value"]) if "value" in d else None,
        frequency=float(d.get("frequency", 1.0)),
    )


def _gamma(c, dcfg, disturbance, n_obs):
    g = c.get("gamma", 0.0)
    if g != "auto":
        return float(g)
    gb = c.get("gamma_bounds")
    if gb is None:
        raise ConfigError("gamma: auto needs controller.gamma_bounds")
    box = np.array(gb["box"], dtype=float)
    if box.shape != (dcfg.n, 2):
        raise ConfigError("gamma_bounds.box needs one [lo, hi] pair per state")
    c_dD, c_psi = estimate_bound_constants(
        dcfg, box, int(gb.get("n_samples", 20000)), int(gb.get("seed", 0)),
        psi_floor=float(gb.get("psi_floor", 1e-9)),
        exclude_radius=float(gb["exclude_radius"]) if "exclude_radius" in gb else None,
    )
    if "c_delta1" in gb:
        c1 = float(gb["c_delta1"])
    else:
        c1 = disturbance.bound_value(rows=range(n_obs)) if disturbance is not None else 0.0
    if "c_delta2" in gb:
        c2 = float(gb["c_delta2"])
    else:
        c2 = disturbance.bound_div() if disturbance is not None else 0.0
    return compute_gamma(c1, c2, c_dD, c_psi, dcfg.alpha)


def build(doc) -> Scenario:
    """Turn a validated document into model, density, controller and sim configs."""
    try:
        return _build(doc)
    except ConfigError:
        raise
    except (CdfError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{type(exc).__name__}: {exc}") from exc


def _build(doc):
    doc = copy.deepcopy(doc)
    model, plant_factory = _model(doc["system"])
    c = doc["controller"]
    dcfg = _density(doc["density"], model, c)
    s = doc["sim"]
    out = doc.get("output", {})
    disturbance = _disturbance(s.get("disturbance"), model)
    seed = int(s.get("seed", 0))
    sim = SimConfig(
        dt=float(s["dt"]), max_steps=int(s["max_steps"]), x0=_floats(s["x0"]),
        integrator=s.get("integrator", "euler"),
        convergence_radius=float(s.get("convergence_radius", 0.1)),
        disturbance=disturbance, record_every=int(out.get("cadence", 1)), seed=seed,
    )
    gamma = None
    if c["mode"] == "cbf":
        idx = int(c.get("barrier_obstacle", 0))
        if idx >= len(dcfg.obstacles) or dcfg.obstacles[idx].kind != "circle":
            raise ConfigError("cbf needs barrier_obstacle to name a circle obstacle")
        ob = dcfg.obstacles[idx]
        if "e1" not in c or "e2" not in c:
            raise ConfigError("cbf needs e1 and e2")
        ctrl = CbfConfig(
            float(c["e1"]), float(c["e2"]),
            circle_barrier(ob.center, ob.r1), quadratic_lyapunov(dcfg.target, dcfg.P),
            relaxation=None if c.get("relaxation", 1e3) is None else float(c.get("relaxation", 1e3)),
        )
    else:
        nominal = None
        if "nominal" in c:
            n = c["nominal"]
            nominal = NominalSpec(
                kind=n["kind"], gain=float(n.get("gain", 1.0)),
                K=_floats(n["K"]) if "K" in n else None,
                cancel_drift=bool(n.get("cancel_drift", False)),
                max_norm=float(n["max_norm"]) if "max_norm" in n else None,
            ).build(model, dcfg.target)
        n_obs = dcfg.n
        gamma = _gamma(c, dcfg, disturbance, n_obs) if c["mode"] == "robust-gamma" else None
        ctrl = ControllerConfig(
            mode=c["mode"], lam=float(c.get("lam", 1e-3)), dt=sim.dt,
            zeta_floor=float(c["zeta_floor"]) if "zeta_floor" in c else None,
            nominal_control=nominal,
            H=np.array(c["H"], dtype=float) if "H" in c else None,
            J=np.array(c["J"], dtype=float) if "J" in c else None,
            gamma=gamma or 0.0, beta=float(c.get("beta", 0.0)),
            n_samples=int(c.get("n_samples", 0)), seed=seed,
            initial_state=np.array(_floats(c["initial_state"])) if "initial_state" in c else None,
            initial_radius=float(c.get("initial_radius", 0.0)),
        )
    return Scenario(
        doc=doc, model=model, dcfg=dcfg, ctrl=ctrl, sim=sim, plant_factory=plant_factory,
        runs=int(s.get("runs", 1)), output_dir=out.get("directory"), gamma=gamma,
    )


def load_scenario(name_or_path, overrides=(), seed=None) -> Scenario:
    return build(load(name_or_path, overrides, seed))
