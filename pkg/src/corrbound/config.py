"""INI run configuration with field-path validation.

See the README for a complete annotated example. Section and key names
are case-insensitive except inside ``[labeler]``, where keys are cell names.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import bounds as bd
from . import dynamics as dyn
from . import expr as ex
from .gibbs import DEFAULT_BURN_IN, DEFAULT_THIN
from .labeler import InvariantLabeler, LabelError

SECTIONS = ("system", "gibbs", "observable", "dynamics", "bounds", "labeler", "output")


class ConfigError(ValueError):
    """One or more invalid settings; ``problems`` holds (field path, message) pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in problems))


@dataclass
class SystemConfig:
    name: str = "oscillator"
    r: int | None = None
    hamiltonian: str | None = None
    conserved: list[str] = field(default_factory=list)
    periodic: list[int] = field(default_factory=list)


@dataclass
class GibbsConfig:
    beta: float = 1.0
    n: int = 100_000
    burn_in: int = DEFAULT_BURN_IN
    thin: int = DEFAULT_THIN
    proposal_scale: float | None = None
    seed: int = 0


@dataclass
class DynamicsConfig:
    T: float = 500.0
    dt: float = 0.05
    n_traj: int | None = 20_000
    drift_tol: float = dyn.DEFAULT_DRIFT_TOL
    max_steps: int = dyn.DEFAULT_MAX_STEPS


@dataclass
class BoundsConfig:
    degrees: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    d_probe: int | None = None
    saturation_degree: int | None = None
    jitter: float | None = None
    standardize: bool = True
    resamples: int = bd.DEFAULT_RESAMPLES
    max_degree: int = bd.DEFAULT_MAX_DEGREE
    basis_cap: int = bd.DEFAULT_BASIS_CAP
    partition_gram: list[str] = field(default_factory=lambda: list(bd.GRAM_MODES))


@dataclass
class OutputConfig:
    dir: str = "out"
    prefix: str = "run"


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    gibbs: GibbsConfig = field(default_factory=GibbsConfig)
    observable: str = "q1^2"
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    labeler: list[tuple[str, str]] = field(default_factory=list)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labeler"] = [list(x) for x in self.labeler]
        return d

    # built objects; validated by load_config

    def build_system(self) -> dyn.SystemSpec:
        s = self.system
        if s.name in dyn.BUILTIN_SYSTEMS and s.hamiltonian is None:
            return dyn.builtin(s.name)
        return dyn.make_system(s.r, s.hamiltonian, s.conserved, name=s.name, periodic=s.periodic)

    def build_labeler(self, sys: dyn.SystemSpec) -> InvariantLabeler | None:
        if not self.labeler:
            return None
        return InvariantLabeler.from_predicates(sys, self.labeler)

    @property
    def output_dir(self) -> Path:
        return Path(self.output.dir)

    def output_path(self, suffix: str) -> Path:
        return self.output_dir / f"{self.output.prefix}.{suffix}"


# ------------------------------------------------------------------ parsing helpers


class _Reader:
    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp
        self.problems: list[tuple[str, str]] = []
        self.seen: set[tuple[str, str]] = set()

    def raw(self, section: str, key: str) -> str | None:
        self.seen.add((section, key.lower()))
        if not self.cp.has_section(section):
            return None
        for k, v in self.cp.items(section):
            if k.lower() == key.lower():
                return v.strip()
        return None

    def get(self, section: str, key: str, conv, default, check=None, msg=""):
        text = self.raw(section, key)
        if text is None or text == "":
            return default
        try:
            val = conv(text)
        except (TypeError, ValueError) as err:
            self.problems.append((f"{section}.{key}", f"cannot read {text!r} ({err})"))
            return default
        if check is not None and not check(val):
            self.problems.append((f"{section}.{key}", msg or f"invalid value {text!r}"))
        return val

    def fail(self, path: str, msg: str):
        self.problems.append((path, msg))


def _int(text: str) -> int:
    f = float(text)
    if not f.is_integer():
        raise ValueError("expected an integer")
    return int(f)


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("expected a finite number")
    return v


def _optional(conv):
    def f(text: str):
        return None if text.lower() in ("auto", "none", "default") else conv(text)
    return f


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _int_list(text: str) -> list[int]:
    out = []
    for part in text.replace(",", " ").split():
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out += list(range(_int(lo), _int(hi) + 1))
        else:
            out.append(_int(part))
    return out


def _lines(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def _words(text: str) -> list[str]:
    return [w for w in text.replace(",", " ").split() if w]


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError([("<file>", str(err).splitlines()[0])]) from None
    unknown = [s for s in cp.sections() if s.lower() not in SECTIONS]
    rd = _Reader(cp)
    for s in unknown:
        rd.fail(s, f"unknown section; expected one of {', '.join(SECTIONS)}")
    # normalise section names
    for s in cp.sections():
        if s != s.lower() and s.lower() in SECTIONS:
            for k, v in cp.items(s):
                if not cp.has_section(s.lower()):
                    cp.add_section(s.lower())
                cp.set(s.lower(), k, v)

    cfg = RunConfig()
    sc = cfg.system
    sc.name = rd.get("system", "name", str, sc.name)
    sc.r = rd.get("system", "r", _int, None, lambda v: v >= 1, "must be >= 1")
    sc.hamiltonian = rd.get("system", "hamiltonian", str, None)
    sc.conserved = rd.get("system", "conserved", _lines, [])
    sc.periodic = rd.get("system", "periodic", _int_list, [])

    g = cfg.gibbs
    g.beta = rd.get("gibbs", "beta", _float, g.beta, lambda v: v > 0, "must be > 0")
    g.n = rd.get("gibbs", "n", _int, g.n, lambda v: v >= 2, "must be >= 2")
    g.burn_in = rd.get("gibbs", "burn_in", _int, g.burn_in, lambda v: v >= 0, "must be >= 0")
    g.thin = rd.get("gibbs", "thin", _int, g.thin, lambda v: v >= 1, "must be >= 1")
    g.proposal_scale = rd.get("gibbs", "proposal_scale", _optional(_float), None,
                              lambda v: v is None or v > 0, "must be > 0 or auto")
    g.seed = rd.get("gibbs", "seed", _int, g.seed, lambda v: v >= 0, "must be >= 0")

    obs = rd.raw("observable", "A")
    if obs is None:
        obs = rd.raw("observable", "expression")
    if obs:
        cfg.observable = obs
    elif cp.has_section("observable"):
        rd.fail("observable.A", "missing observable expression")

    dc = cfg.dynamics
    dc.T = rd.get("dynamics", "T", _float, dc.T, lambda v: v > 0, "must be > 0")
    dc.dt = rd.get("dynamics", "dt", _float, dc.dt, lambda v: v > 0, "must be > 0")
    dc.n_traj = rd.get("dynamics", "n_traj", _optional(_int), dc.n_traj, lambda v: v is None or v >= 2,
                       "must be >= 2 or auto")
    dc.drift_tol = rd.get("dynamics", "drift_tol", _float, dc.drift_tol, lambda v: v > 0, "must be > 0")
    dc.max_steps = rd.get("dynamics", "max_steps", _int, dc.max_steps, lambda v: v >= 1, "must be >= 1")
    if dc.T > 0 and dc.dt > 0 and math.ceil(dc.T / dc.dt - 1e-9) > dc.max_steps:
        rd.fail("dynamics.dt", f"T/dt = {dc.T / dc.dt:.3g} steps exceeds max_steps = {dc.max_steps}")
    if dc.dt > 0 and dc.T > 0 and dc.dt > dc.T:
        rd.fail("dynamics.dt", "must not exceed T")

    b = cfg.bounds
    b.degrees = rd.get("bounds", "degrees", _int_list, b.degrees)
    b.d_probe = rd.get("bounds", "d_probe", _optional(_int), None)
    b.saturation_degree = rd.get("bounds", "saturation_degree", _optional(_int), None)
    b.jitter = rd.get("bounds", "jitter", _optional(_float), None,
                      lambda v: v is None or 0 < v <= bd.JITTER_MAX, f"must be in (0, {bd.JITTER_MAX:g}] or auto")
    b.standardize = rd.get("bounds", "standardize", _bool, b.standardize)
    b.resamples = rd.get("bounds", "resamples", _int, b.resamples, lambda v: v >= 2, "must be >= 2")
    b.max_degree = rd.get("bounds", "max_degree", _int, b.max_degree, lambda v: v >= 0, "must be >= 0")
    b.basis_cap = rd.get("bounds", "basis_cap", _int, b.basis_cap, lambda v: v >= 1, "must be >= 1")
    b.partition_gram = rd.get("bounds", "partition_gram", _words, b.partition_gram,
                              lambda v: bool(v) and all(x in bd.GRAM_MODES for x in v),
                              f"entries must be among {', '.join(bd.GRAM_MODES)}")

    if cp.has_section("labeler"):
        cfg.labeler = [(k, v.strip()) for k, v in cp.items("labeler")]

    cfg.output.dir = rd.get("output", "dir", str, cfg.output.dir)
    cfg.output.prefix = rd.get("output", "prefix", str, cfg.output.prefix)

    for s in SECTIONS:
        if s != "labeler" and cp.has_section(s):
            for k, _ in cp.items(s):
                if (s, k.lower()) not in rd.seen:
                    rd.fail(f"{s}.{k}", "unknown key")

    _validate(cfg, rd)
    if rd.problems:
        raise ConfigError(rd.problems)
    return cfg


def _validate(cfg: RunConfig, rd: _Reader) -> None:
    """Cross-field checks: expressions parse, degrees respect the caps."""
    sc = cfg.system
    sys = None
    if sc.hamiltonian is None and sc.name not in dyn.BUILTIN_SYSTEMS:
        rd.fail("system.name", f"unknown built-in {sc.name!r}; choose from {sorted(dyn.BUILTIN_SYSTEMS)} "
                               "or give r and hamiltonian")
    elif sc.hamiltonian is not None and sc.r is None:
        rd.fail("system.r", "required with an inline hamiltonian")
    elif sc.hamiltonian is None and (sc.conserved or sc.periodic):
        rd.fail("system.conserved", "only allowed with an inline hamiltonian")
    else:
        if any(not 1 <= i <= (sc.r or 0) for i in sc.periodic) and sc.hamiltonian is not None:
            rd.fail("system.periodic", f"indices must lie in 1..{sc.r}")
        else:
            try:
                sys = cfg.build_system()
            except ex.ExpressionError as err:
                rd.fail("system.hamiltonian", str(err))
            except ValueError as err:
                rd.fail("system", str(err))

    if sys is not None:
        try:
            sys.parse(cfg.observable)
        except ex.ExpressionError as err:
            rd.fail("observable.A", str(err))
        try:
            cfg.build_labeler(sys)
        except (ex.ExpressionError, LabelError) as err:
            rd.fail("labeler", str(err))

    b = cfg.bounds
    if not b.degrees:
        rd.fail("bounds.degrees", "needs at least one degree")
        return
    if min(b.degrees) < 0:
        rd.fail("bounds.degrees", "degrees must be >= 0")
        return
    dmax = max(b.degrees)
    if b.d_probe is not None and b.d_probe <= 0:
        rd.fail("bounds.d_probe", "must be >= 1")
    if dmax > b.max_degree:
        rd.fail("bounds.degrees", f"degree {dmax} exceeds the cap max_degree = {b.max_degree}")
        return
    if b.d_probe is not None and b.d_probe > b.max_degree:
        rd.fail("bounds.d_probe", f"degree {b.d_probe} exceeds the cap max_degree = {b.max_degree}")
        return
    top = max(dmax, b.d_probe or 0)
    if sys is not None and bd.basis_size(sys.k, top) > b.basis_cap:
        rd.fail("bounds.degrees", f"basis size {bd.basis_size(sys.k, top)} for k={sys.k}, d={top} "
                                  f"exceeds basis_cap = {b.basis_cap}")
    if b.saturation_degree is not None and b.d_probe is not None and b.saturation_degree >= b.d_probe:
        rd.fail("bounds.saturation_degree", "must be below d_probe")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError([("<file>", f"cannot read {path}: {err.strerror}")]) from None
    return parse_config(text, str(path))
