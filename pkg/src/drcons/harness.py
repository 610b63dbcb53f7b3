"""Scenario configs, per-cell experiment runners and result I/O.

A scenario is a YAML mapping::

    id: known-regret
    kind: known            # known | unknown | sensitivity | tradeoff | diagnostics
    system:                # either a generator ...
      generator: random
      dx: 3
      du: 1
      dy: 2
      rho_open: 0.9
      gain: computed       # computed | zero | random
      seed: 0              # offset added to the cell seed
    # ... or explicit matrices: {A: [[..]], B: [[..]], C: [[..]], K: [[..]]}
    disturbance: {kind: mixed, w_max: 1.0, e_max: 0.1}
    loss: {kind: identity, u_weight: 1.0}
    params:
      T: [1024, 2048]
      m: null              # null means the documented default
      h: null
      R_M: null
      eta: null
      lam: null
      horizon_T: null      # m, h defaults use this horizon instead of the cell's T (null: the cell's T)
      N: auto              # unknown kind: auto = ceil(h^2 sqrt(T) (dy+du)), or an int
      eps: [0.02, 0.04]    # sensitivity kind
      mu: [1.0]            # tradeoff kind; also the weight of the reported Reg_mu
      c: 0.5               # tradeoff kind: epoch-count constant
      lam_grid: {n: 17, decades: 2.0}
      check: kappa         # diagnostics kind: kappa | covariance | gradcheck | projection
      n_instances: 20
    seeds: [0, 1, 2]
    output: null

Cells are ``(seed, T)`` for ``known``/``unknown``, ``seed`` for
``sensitivity`` and ``diagnostics``, and ``(T, mu)`` for ``tradeoff``
(all seeds of a tradeoff cell are simulated together; the arithmetic is
elementwise so the result for a seed does not depend on its batch).
"""

import copy
import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import control, estimation, numcore, ocoam, tradeoff
from .errors import InvalidInputError

log = logging.getLogger(__name__)

__all__ = [
    "Scenario",
    "ResultRow",
    "run_scenario",
    "slope_fit",
    "write_csv",
    "read_csv",
    "write_outputs",
    "load_scenario",
    "builtin_scenario",
    "build_system",
]

KINDS = ("known", "unknown", "sensitivity", "tradeoff", "diagnostics")

DEFAULTS = {
    "system": {"generator": "random", "dx": 3, "du": 1, "dy": 2, "rho_open": 0.9, "gain": "computed", "seed": 0},
    "disturbance": {"kind": "mixed", "w_max": 1.0, "e_max": 0.1},
    "loss": {"kind": "identity", "u_weight": 1.0},
    "params": {
        "T": [1024], "m": None, "h": None, "R_M": None, "eta": None, "lam": None, "N": "auto", "horizon_T": None,
        "eps": [0.02, 0.04, 0.08, 0.16], "mu": [1.0], "c": 0.5,
        "lam_grid": {"n": 17, "decades": 2.0},
        "check": "kappa", "n_instances": 20,
    },
    "seeds": [0],
    "output": None,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class Scenario:
    """Validated, fully resolved experiment configuration."""

    id: str
    kind: str
    system: dict
    disturbance: dict
    loss: dict
    params: dict
    seeds: list
    output: str = None

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise InvalidInputError("scenario must be a mapping")
        unknown = set(d) - {"id", "kind", "system", "disturbance", "loss", "params", "seeds", "output"}
        if unknown:
            raise InvalidInputError(f"unknown scenario keys: {sorted(unknown)}")
        kind = d.get("kind")
        if kind not in KINDS:
            raise InvalidInputError(f"kind must be one of {KINDS}, got {kind!r}")
        sys_over = d.get("system") or {}
        system = copy.deepcopy(sys_over) if "A" in sys_over else _merge(DEFAULTS["system"], sys_over)
        r = _merge(DEFAULTS, {k: d[k] for k in ("disturbance", "loss", "params", "seeds", "output") if k in d})
        p = r["params"]
        for key in ("T", "eps", "mu"):
            if not isinstance(p[key], (list, tuple)):
                p[key] = [p[key]]
        if any(int(T) < 1 for T in p["T"]):
            raise InvalidInputError("every T must be a positive integer")
        p["T"] = [int(T) for T in p["T"]]
        seeds = [int(s) for s in r["seeds"]]
        return cls(id=str(d.get("id", kind)), kind=kind, system=system, disturbance=r["disturbance"],
                   loss=r["loss"], params=p, seeds=seeds, output=r["output"])

    def resolved(self):
        """Plain-data echo of the configuration."""
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in dataclasses.fields(self)}


def load_scenario(path):
    with open(path, "r", encoding="utf-8") as fh:
        return Scenario.from_dict(yaml.safe_load(fh))


def builtin_scenario(name):
    """Scenario shipped in the package ``scenarios`` directory."""
    path = os.path.join(os.path.dirname(__file__), "scenarios", f"{name}.yaml")
    if not os.path.exists(path):
        raise InvalidInputError(f"no built-in scenario named {name!r}")
    return load_scenario(path)


# ---------------------------------------------------------------------------
# Rows and I/O
# ---------------------------------------------------------------------------

@dataclass
class ResultRow:
    """One output record. ``wall_time`` does not take part in equality (it is not reproducible)."""

    scenario: str
    kind: str
    algo: str
    seed: int
    T: int
    mu: float = 0.0
    eps: float = 0.0
    lam: float = 0.0
    memory_reg: float = 0.0
    oco_reg: float = 0.0
    control_reg: float = 0.0
    euc_cost: float = 0.0
    adap_cost: float = 0.0
    move_diff: float = 0.0
    eps_G: float = 0.0
    regmu: float = 0.0
    metric: str = ""
    value: float = 0.0
    status: str = "ok"
    reason: str = ""
    wall_time: float = field(default=0.0, compare=False)

    @property
    def ok(self):
        return self.status == "ok"


_FIELDS = [f for f in dataclasses.fields(ResultRow) if f.name != "wall_time"]
HEADER = [f.name for f in _FIELDS]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows, path_or_buf=None, *, timing=False):
    """Serialize rows as CSV with :data:`HEADER` (plus ``wall_time`` if ``timing``). Returns the text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER + (["wall_time"] if timing else []))
    for r in rows:
        vals = [_fmt(getattr(r, n)) for n in HEADER]
        if timing:
            vals.append(_fmt(r.wall_time))
        w.writerow(vals)
    text = buf.getvalue()
    if path_or_buf is not None:
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    return text


def read_csv(path_or_text):
    """Parse rows written by :func:`write_csv`."""
    if isinstance(path_or_text, str) and "\n" not in path_or_text and os.path.exists(path_or_text):
        with open(path_or_text, "r", encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = path_or_text
    rd = csv.DictReader(io.StringIO(text))
    types = {f.name: f.type for f in dataclasses.fields(ResultRow)}
    rows = []
    for rec in rd:
        kw = {}
        for k, v in rec.items():
            t = types[k]
            kw[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else v
        rows.append(ResultRow(**kw))
    return rows


def rows_to_json(rows, cfg):
    return json.dumps({"scenario": cfg.resolved(), "rows": [dataclasses.asdict(r) for r in rows]},
                      indent=2, sort_keys=True)


def write_outputs(rows, cfg, out, fmt="csv", env=None):
    """Write ``out`` (CSV or JSON) and a sidecar ``<out>.config.json`` with the resolved config."""
    if fmt == "csv":
        write_csv(rows, out)
    elif fmt == "json":
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(rows_to_json(rows, cfg))
    else:
        raise InvalidInputError(f"unknown format {fmt!r}")
    side = {"scenario": cfg.resolved(), "environment": env or {},
            "wall_time": {f"{r.algo}/{r.seed}/{r.T}/{r.mu}/{r.eps}/{r.lam}": r.wall_time for r in rows}}
    with open(out + ".config.json", "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Slope fitting
# ---------------------------------------------------------------------------

def slope_fit(pairs):
    """Ordinary least squares of ``log y`` on ``log x``.

    Returns ``(slope, intercept, r2)``. Needs at least three points with
    positive coordinates.
    """
    pairs = list(pairs)
    if len(pairs) < 3:
        raise InvalidInputError("need at least 3 points")
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    if not (np.all(x > 0) and np.all(y > 0) and np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("slope_fit needs finite positive values")
    lx, ly = np.log(x), np.log(y)
    xm, ym = lx.mean(), ly.mean()
    sxx = float(np.sum((lx - xm) ** 2))
    if sxx == 0:
        raise InvalidInputError("x values must not all coincide")
    slope = float(np.sum((lx - xm) * (ly - ym)) / sxx)
    icpt = float(ym - slope * xm)
    resid = ly - (icpt + slope * lx)
    sst = float(np.sum((ly - ym) ** 2))
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 1.0
    return slope, icpt, r2


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_system(spec, seed):
    """LinearSystem from an explicit-matrix spec or the random generator."""
    if "A" in spec:
        return control.LinearSystem(np.array(spec["A"], dtype=float), np.array(spec["B"], dtype=float),
                                    np.array(spec["C"], dtype=float), np.array(spec["K"], dtype=float))
    if spec.get("generator", "random") != "random":
        raise InvalidInputError(f"unknown system generator {spec.get('generator')!r}")
    return control.random_system(int(spec["dx"]), int(spec["du"]), int(spec["dy"]), int(spec.get("seed", 0)) + seed,
                                 rho_open=float(spec["rho_open"]), gain=spec["gain"])


def _gen(cfg, seed):
    d = cfg.disturbance
    return control.DisturbanceGen(d["kind"], d["w_max"], d["e_max"], seed=seed)


def _losses(cfg, sys, T, seed):
    L = cfg.loss
    return control.LossSequence.make(L["kind"], sys.dy, sys.du, T, seed=seed, u_weight=L.get("u_weight", 1.0))


def _overrides(p):
    return {k: p[k] for k in ("m", "h", "R_M", "eta", "lam", "horizon_T") if p.get(k) is not None}


def _base(cfg, algo, seed, T, **kw):
    return ResultRow(scenario=cfg.id, kind=cfg.kind, algo=algo, seed=int(seed), T=int(T), **kw)


def _failed(cfg, algo, seed, T, exc, **kw):
    return _base(cfg, algo, seed, T, status="failed", reason=f"{type(exc).__name__}: {exc}", **kw)


# ---------------------------------------------------------------------------
# Cell runners
# ---------------------------------------------------------------------------

def _control_row(cfg, algo, seed, T, run, mu):
    s = run.summary
    return _base(cfg, algo, seed, T, mu=mu, lam=run.params.lam, memory_reg=s.memory_reg, oco_reg=s.oco_reg,
                 control_reg=run.control_reg, euc_cost=s.euc_cost, adap_cost=s.adap_cost,
                 move_diff=s.move_diff, eps_G=run.eps_G, regmu=s.oco_reg + mu * s.euc_cost,
                 metric="ledger_identity", value=(s.memory_reg - s.oco_reg) - s.move_diff,
                 wall_time=run.wall_time)


def _cell_known(cfg, seed, T):
    mu = float(cfg.params["mu"][0])
    sys = build_system(cfg.system, seed)
    run = control.drc_ons_run(sys, _losses(cfg, sys, T, seed), _gen(cfg, seed), T, **_overrides(cfg.params))
    return [_control_row(cfg, "drc-ons", seed, T, run, mu)]


def _cell_unknown(cfg, seed, T):
    mu = float(cfg.params["mu"][0])
    p = cfg.params
    sys = build_system(cfg.system, seed)
    losses = _losses(cfg, sys, T, seed)
    gen = _gen(cfg, seed)
    params = control.resolve_params(sys, losses, T, w_max=gen.w_max, e_max=gen.e_max, approximate=True,
                                    **_overrides(p))
    params.N = estimation.exploration_length(params.h, T, sys.dy, sys.du) if p["N"] == "auto" else int(p["N"])
    run = control.drc_ons_unknown_run(sys, losses, gen, T, params, seed=seed)
    return [_control_row(cfg, "drc-ons-est", seed, T, run, mu)]


def perturbation(G, eps_unit_seed):
    """Unit ``l1,op`` perturbation of blocks ``1..h`` (block 0 is left exact)."""
    rng = numcore.Rng(eps_unit_seed, stream=(29,))
    D = rng.normal(G.blocks.shape)
    D[0] = 0.0
    D /= sum(numcore.op_norm(b) for b in D)
    return D


def _cell_sensitivity(cfg, seed):
    p = cfg.params
    T = int(p["T"][0])
    sys = build_system(cfg.system, seed)
    losses = _losses(cfg, sys, T, seed)
    gen = _gen(cfg, seed)
    params = control.resolve_params(sys, losses, T, w_max=gen.w_max, e_max=gen.e_max, **_overrides(p))
    W, E = gen.sample(T, sys.dx, sys.dy)
    inst = control.nominal_instance(sys, W, E, params.h, params.m)
    D = perturbation(inst.G, seed)
    xi = numcore.Rng(seed, stream=(31,)).rademacher(inst.V.shape) / math.sqrt(inst.V.shape[1])
    rows = []
    for eps in [0.0] + [float(e) for e in p["eps"]]:
        t0 = time.perf_counter()
        G_hat = ocoam.MarkovOperator(inst.G.blocks + eps * D)
        s = control.semi_ons_on_instance(inst, losses, eta=params.eta, lam=params.lam, radius=params.radius,
                                         G_hat=G_hat, V_hat=inst.V + eps * xi)
        rows.append(_base(cfg, "semi-ons-approx", seed, T, eps=eps, lam=params.lam, memory_reg=s.memory_reg,
                          oco_reg=s.oco_reg, euc_cost=s.euc_cost, adap_cost=s.adap_cost, move_diff=s.move_diff,
                          eps_G=(G_hat - inst.G).l1_op, metric="ledger_identity",
                          value=(s.memory_reg - s.oco_reg) - s.move_diff, wall_time=time.perf_counter() - t0))
    return rows


def _cell_tradeoff(cfg, T, mu):
    p = cfg.params
    c = float(p.get("c", 0.5))
    t0 = time.perf_counter()
    advs = [tradeoff.EpochAdversary.from_mu(T, mu, seed=s, c=c) for s in cfg.seeds]
    if not advs:
        return []
    eps = advs[0].epsilon
    G, _, eta = tradeoff.ons_defaults(eps)
    grid = p.get("lam_grid") or {}
    lams = tradeoff.lambda_grid(G, eta, mu, T, n=int(grid.get("n", 17)), decades=float(grid.get("decades", 2.0)))
    V = np.stack([a.v for a in advs])
    comps = np.array([a.comparator()[1] for a in advs])
    loss, move = tradeoff.batch_ons_scalar(V, eps, lams, eta)
    s_loss, s_move = tradeoff.batch_semi_ons_lifted(V, eps)
    wall = (time.perf_counter() - t0) / len(advs)
    rows = []
    for i, s in enumerate(cfg.seeds):
        for j, lam in enumerate(lams):
            reg = float(loss[i, j] - comps[i])
            rows.append(_base(cfg, "ons", s, T, mu=float(mu), eps=eps, lam=float(lam), memory_reg=reg, oco_reg=reg,
                              euc_cost=float(move[i, j]), regmu=reg + mu * float(move[i, j]), wall_time=wall))
        reg = float(s_loss[i] - comps[i])
        rows.append(_base(cfg, "semi-ons", s, T, mu=float(mu), eps=eps, lam=eps * eps, memory_reg=reg, oco_reg=reg,
                          euc_cost=float(s_move[i]), regmu=reg + mu * float(s_move[i]), wall_time=wall))
    return rows


def _cell_diagnostics(cfg, seed):
    from . import diagnostics

    p = cfg.params
    check = p.get("check", "kappa")
    fn = diagnostics.CHECKS.get(check)
    if fn is None:
        raise InvalidInputError(f"unknown diagnostic {check!r}; choose from {sorted(diagnostics.CHECKS)}")
    t0 = time.perf_counter()
    values = fn(seed, int(p.get("n_instances", 20)))
    wall = time.perf_counter() - t0
    return [_base(cfg, check, seed, 0, metric=name, value=float(v), wall_time=wall) for name, v in values]


def _cells(cfg):
    p = cfg.params
    if cfg.kind in ("known", "unknown"):
        return [(s, T) for s in cfg.seeds for T in p["T"]]
    if cfg.kind in ("sensitivity", "diagnostics"):
        return [(s,) for s in cfg.seeds]
    if cfg.kind == "tradeoff":
        if not cfg.seeds:
            return []
        return [(T, float(mu)) for T in p["T"] for mu in p["mu"]]
    raise AssertionError(cfg.kind)


def _run_cell(cfg, cell):
    runner = {"known": _cell_known, "unknown": _cell_unknown, "sensitivity": _cell_sensitivity,
              "tradeoff": _cell_tradeoff, "diagnostics": _cell_diagnostics}[cfg.kind]
    try:
        rows = runner(cfg, *cell)
        bad = [r for r in rows if r.ok and not all(math.isfinite(getattr(r, f.name)) for f in _FIELDS
                                                  if f.type in (float, "float"))]
        for r in bad:
            r.status, r.reason = "failed", "non-finite result"
        return rows
    except Exception as exc:  # a failed cell is reported, the scenario keeps going
        log.warning("cell %s of %s failed: %s", cell, cfg.id, exc)
        if cfg.kind == "tradeoff":
            T, mu = cell
            return [_failed(cfg, "ons", s, T, exc, mu=mu) for s in cfg.seeds]
        seed = cell[0]
        T = cell[1] if len(cell) > 1 else (cfg.params["T"][0] if cfg.kind == "sensitivity" else 0)
        return [_failed(cfg, cfg.kind, seed, T, exc)]


def run_scenario(cfg, jobs=1):
    """Run every cell of ``cfg``; rows come back in cell order regardless of ``jobs``."""
    if isinstance(cfg, dict):
        cfg = Scenario.from_dict(cfg)
    cells = _cells(cfg)
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs <= 1 or len(cells) <= 1:
        out = [_run_cell(cfg, c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_run_cell, [cfg] * len(cells), cells))
    return [r for rows in out for r in rows]
