"""Run configuration: TOML loading, strict key checking and construction of
the model objects, with errors that name the offending field."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .kernels import AsianAverage, Deterministic, EuropeanCall, GBMTerminal, LinearWiener, LognormalIncrement
from .replicator import make_system
from .sde import Market, build_grid
from .weights import make_weight

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]

_SCHEMA = {
    "system": {"n", "d", "A", "b", "a", "T"},
    "weight": {"kind", "alpha", "T1", "G"},
    "payoff": {"family", "f0", "c0", "C", "c", "K", "S0", "sigma", "component", "theta", "eta",
               "t_start", "t_end"},
    "simulation": {"paths", "steps", "grading", "seed", "block_size", "scheme"},
    "application": {"kind", "T", "rate", "proportion", "strike", "maturities", "theta", "eta", "targets"},
    "output": {"directory", "keep"},
}
_FAMILIES = ("deterministic", "linear-wiener", "gbm-terminal", "european-call", "asian-average",
             "lognormal-increment")
_APPLICATIONS = ("cash", "dividend", "bonds")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key at fault."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration, kept as plain data so it can be hashed."""

    data: dict
    source: str = "<memory>"

    def block(self, name):
        return self.data.get(name, {})

    @property
    def seed(self):
        return int(self.block("simulation").get("seed", 0))

    @property
    def application(self):
        return self.block("application").get("kind")

    def with_seed(self, seed):
        data = json.loads(json.dumps(self.data))
        data.setdefault("simulation", {})["seed"] = int(seed)
        return parse_config(data, self.source)

    def fingerprint(self):
        """SHA-256 of the canonical JSON form, output block excluded."""
        core = {k: v for k, v in self.data.items() if k != "output"}
        text = json.dumps(core, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    # -- model objects -------------------------------------------------

    def weight(self):
        w = self.block("weight")
        T = self._horizon()
        return _build("weight", make_weight, w.get("kind", "pure-power"), w["alpha"], T,
                      w.get("G", 1.0), w.get("T1"))

    def system(self):
        app = self.application
        if app in ("cash", "dividend"):
            rate = self.block("application").get("rate", 0.0) if app == "cash" else 0.0
            return _build("application.rate", make_system, rate, 1.0, 0.0, self._horizon(), 1)
        s = self.block("system")
        return _build("system", make_system, s.get("A", 0.0), s.get("b", 1.0), s.get("a", 0.0),
                      s["T"], s.get("d", 1))

    def grid(self, steps=None):
        sim = self.block("simulation")
        N = int(steps if steps is not None else sim.get("steps", 256))
        return _build("simulation.steps", build_grid, N, self._horizon(), sim.get("grading"), self.weight())

    def market(self):
        p = self.block("payoff")
        return _build("payoff.sigma", Market, p.get("S0", 1.0), p.get("sigma", 0.2), p.get("component", 0))

    def payoff(self):
        p = self.block("payoff")
        fam = p["family"]
        T = self._horizon()
        if fam == "deterministic":
            return _build("payoff.f0", Deterministic, p.get("f0", 0.0))
        if fam == "linear-wiener":
            return _build("payoff.C", LinearWiener, p.get("c0", 0.0), p.get("C", 1.0))
        if fam == "lognormal-increment":
            return _build("payoff", LognormalIncrement, p.get("theta", 0.0), p.get("eta", 1.0),
                          p.get("t_start", 0.0), p.get("t_end", T), p.get("component", 0))
        market = self.market()
        c = p.get("c", 1.0)
        if self.application == "dividend":
            c = self.block("application").get("proportion", 0.05)
        if fam == "gbm-terminal":
            return GBMTerminal(c, market)
        if fam == "european-call":
            K = self.block("application").get("strike", p.get("K", 1.0))
            return _build("payoff.K", EuropeanCall, c, K, market, T)
        return AsianAverage(c, market, T)

    def bond_spec(self):
        from .finance import make_bond_spec

        app = self.block("application")
        mats = app["maturities"]
        if "targets" in app:
            targets = app["targets"]
        else:
            theta = np.broadcast_to(np.asarray(app["theta"], dtype=float), (len(mats),))
            eta = np.broadcast_to(np.asarray(app["eta"], dtype=float), (len(mats),))
            targets = list(zip(theta.tolist(), eta.tolist()))
        return _build("application", make_bond_spec, mats, targets, self.block("weight")["alpha"],
                      self.block("simulation").get("steps", 256))

    def _horizon(self):
        if "system" in self.data:
            return float(self.data["system"]["T"])
        return float(self.block("application").get("T", 1.0))


def _build(field, fn, *args):
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(field, str(exc)) from exc


def _num(field, value, *, positive=False, integer=False, lo=None, hi=None, open_lo=False, open_hi=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(field, f"expected an integer, got {value!r}")
    if not np.isfinite(value):
        raise ConfigError(field, "must be finite")
    if positive and not value > 0:
        raise ConfigError(field, f"must be positive, got {value!r}")
    if lo is not None and (value < lo or (open_lo and value == lo)):
        raise ConfigError(field, f"must be {'>' if open_lo else '>='} {lo}, got {value!r}")
    if hi is not None and (value > hi or (open_hi and value == hi)):
        raise ConfigError(field, f"must be {'<' if open_hi else '<='} {hi}, got {value!r}")
    return value


def _matrix(field, value, n=None):
    try:
        arr = np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(field, "expected a number or a nested list of numbers") from exc
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise ConfigError(field, "expected a finite matrix")
    if n is not None and arr.shape != (n, n):
        raise ConfigError(field, f"expected a {n}x{n} matrix, got shape {arr.shape}")
    return arr


def parse_config(data, source="<memory>"):
    """Validate a configuration mapping; raises :class:`ConfigError`."""
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a table")
    for name, block in data.items():
        if name not in _SCHEMA:
            raise ConfigError(name, "unknown block")
        if not isinstance(block, dict):
            raise ConfigError(name, "must be a table")
        for key in block:
            if key not in _SCHEMA[name]:
                raise ConfigError(f"{name}.{key}", "unknown key")

    app = data.get("application", {})
    kind = app.get("kind")
    if "application" in data:
        if kind not in _APPLICATIONS:
            raise ConfigError("application.kind", f"expected one of {_APPLICATIONS}, got {kind!r}")
        if "system" in data:
            raise ConfigError("system", f"the {kind} application fixes the system; remove this block")
    elif "system" not in data:
        raise ConfigError("system", "missing block")
    if "weight" not in data:
        raise ConfigError("weight", "missing block")
    if kind != "bonds" and "payoff" not in data:
        raise ConfigError("payoff", "missing block")

    s = data.get("system", {})
    n = None
    if "system" in data:
        if "T" not in s:
            raise ConfigError("system.T", "missing")
        _num("system.T", s["T"], positive=True)
        n = int(_num("system.n", s.get("n", np.size(s.get("a", 0.0))), integer=True, lo=1))
        _num("system.d", s.get("d", 1), integer=True, lo=1)
        _matrix("system.A", s.get("A", np.zeros((n, n))), n)
        _matrix("system.b", s.get("b", np.eye(n)), n)
        a = np.atleast_1d(np.asarray(s.get("a", np.zeros(n)), dtype=float))
        if a.shape != (n,):
            raise ConfigError("system.a", f"expected {n} entries")

    w = data["weight"]
    if "alpha" not in w:
        raise ConfigError("weight.alpha", "missing")
    _num("weight.alpha", w["alpha"], lo=0.5, hi=1.0, open_lo=True, open_hi=True)
    if w.get("kind", "pure-power") not in ("pure-power", "plateau-power"):
        raise ConfigError("weight.kind", f"expected pure-power or plateau-power, got {w.get('kind')!r}")
    if "T1" in w:
        _num("weight.T1", w["T1"], positive=True)
    if "G" in w:
        _matrix("weight.G", w["G"], n)

    p = data.get("payoff", {})
    if "payoff" in data:
        fam = p.get("family")
        if fam not in _FAMILIES:
            raise ConfigError("payoff.family", f"expected one of {_FAMILIES}, got {fam!r}")
        for key in ("c", "K", "S0", "sigma"):
            if key in p:
                _num(f"payoff.{key}", p[key], positive=key in ("K", "S0", "sigma"))
        if kind in ("cash", "dividend") and fam not in ("gbm-terminal", "european-call", "asian-average"):
            raise ConfigError("payoff.family", f"the {kind} application needs an equity payoff")
        if kind == "dividend" and fam != "gbm-terminal":
            raise ConfigError("payoff.family", "dividend plans pay a share of S(T): use gbm-terminal")

    sim = data.get("simulation", {})
    _num("simulation.paths", sim.get("paths", 1000), integer=True, lo=1)
    _num("simulation.steps", sim.get("steps", 256), integer=True, lo=2)
    _num("simulation.seed", sim.get("seed", 0), integer=True, lo=0, hi=2 ** 64 - 1)
    _num("simulation.block_size", sim.get("block_size", 1024), integer=True, lo=1)
    if "grading" in sim:
        _num("simulation.grading", sim["grading"], lo=1.0)
    if sim.get("scheme", "cell") not in ("cell", "left"):
        raise ConfigError("simulation.scheme", f"expected cell or left, got {sim.get('scheme')!r}")

    if kind == "bonds":
        for key in ("T1", "G"):
            if key in w:
                raise ConfigError(f"weight.{key}", "bond intervals use scalar pure-power weights")
        if w.get("kind", "pure-power") != "pure-power":
            raise ConfigError("weight.kind", "bond intervals use scalar pure-power weights")
    if "T" in app:
        _num("application.T", app["T"], positive=True)
    if "rate" in app:
        _num("application.rate", app["rate"], lo=0.0)
    if "proportion" in app:
        _num("application.proportion", app["proportion"], lo=0.0)
    if "strike" in app:
        _num("application.strike", app["strike"], positive=True)
    if kind == "bonds":
        mats = app.get("maturities")
        if not isinstance(mats, list) or not mats:
            raise ConfigError("application.maturities", "expected a non-empty list")
        for m in mats:
            _num("application.maturities", m, positive=True)
        if np.any(np.diff(mats) <= 0):
            raise ConfigError("application.maturities", f"must be strictly increasing, got {mats}")
        if "targets" in app:
            if len(app["targets"]) != len(mats):
                raise ConfigError("application.targets", "need one target per maturity")
            for f in app["targets"]:
                _num("application.targets", f)
                if not f > 0:
                    raise ConfigError("application.targets", f"targets must be positive, got {f!r}")
        elif "theta" not in app or "eta" not in app:
            raise ConfigError("application", "bonds need either targets or theta and eta")

    out = data.get("output", {})
    _num("output.keep", out.get("keep", 32), integer=True, lo=0)
    if "directory" in out and not isinstance(out["directory"], str):
        raise ConfigError("output.directory", "expected a string")

    cfg = RunConfig(data=data, source=source)
    # Build every object once so range errors surface at load time.
    if kind == "bonds":
        cfg.bond_spec()
    else:
        cfg.weight()
        cfg.system()
        cfg.payoff()
        cfg.grid()
    return cfg


def load_config(path):
    """Read and validate a TOML configuration file."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from exc
    return parse_config(data, str(path))
