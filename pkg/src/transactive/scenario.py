"""Scenario documents, synthetic households and metered-data ingestion.

A scenario is one YAML document. Per-user series are either embedded lists or
a reference to a CSV file (relative to the document) with the columns
``slot,outdoor_temp,renewable_avail,inflexible_load``.
"""

from __future__ import annotations

import csv
import math
from datetime import datetime, timezone
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .energy import ExogenousSeries, HouseholdParams, ParameterError


RHO_MODES = ("diminishing", "fixed", "adaptive")


@dataclass
class CoordinatorConfig:
    eps1: float = 1e-6
    eps2: float = 1e-6
    # "adaptive" (start at rho1/rho2 and rescale by powers of two to keep primal
    # and dual residuals balanced), "fixed", or "diminishing" (rho = 1/k)
    rho_mode: str = "adaptive"
    rho1: float = 0.3
    rho2: float = 1.0
    max_iter_tcmp: int = 500
    max_iter_tbap: int = 500

    def validate(self) -> None:
        if self.rho_mode not in RHO_MODES:
            raise ParameterError(f"unknown rho_mode {self.rho_mode!r}")
        if self.eps1 <= 0 or self.eps2 <= 0:
            raise ParameterError("convergence thresholds must be positive")
        if self.rho1 <= 0 or self.rho2 <= 0:
            raise ParameterError("rho1 and rho2 must be positive")
        if self.max_iter_tcmp < 1 or self.max_iter_tbap < 1:
            raise ParameterError("iteration caps must be at least 1")


@dataclass
class FaultSpec:
    node: str
    behavior: str  # crash | mute | equivocate | delay
    at: float = 0.0
    extra_delay: float = 0.0


@dataclass
class Partition:
    start: float
    end: float
    group: list[str]


@dataclass
class NetConfig:
    seed: int = 0
    latency_min: float = 5.0
    latency_max: float = 5.0
    drop_prob: float = 0.0
    partitions: list[Partition] = field(default_factory=list)
    faults: list[FaultSpec] = field(default_factory=list)

    def validate(self, known: set[str] | None = None) -> None:
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ParameterError("drop_prob must lie in [0, 1]")
        if self.latency_min < 0 or self.latency_max < self.latency_min:
            raise ParameterError("need 0 <= latency_min <= latency_max")
        if known is not None:
            for p in self.partitions:
                unknown = set(p.group) - known
                if unknown:
                    raise ParameterError(f"partition references unknown nodes {sorted(unknown)}")
            for f in self.faults:
                if f.node not in known:
                    raise ParameterError(f"fault script references unknown node {f.node!r}")


@dataclass
class ChainConfig:
    validators: int = 4
    block_capacity: int = 2000
    block_reward: float = 0.0
    genesis_balance: float = 1000.0
    heartbeat: float = 1000.0


@dataclass
class User:
    name: str
    params: HouseholdParams
    exo: ExogenousSeries


@dataclass
class Scenario:
    users: list[User]
    horizon: int
    slot_hours: float = 1.0
    coordinator: CoordinatorConfig = field(default_factory=CoordinatorConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    net: NetConfig = field(default_factory=NetConfig)
    seed: int = 0
    name: str = "scenario"

    @property
    def n_users(self) -> int:
        return len(self.users)

    def validator_ids(self) -> list[str]:
        return [f"v{i}" for i in range(self.chain.validators)]

    def validate(self) -> None:
        if not self.users:
            raise ParameterError("scenario needs at least one user")
        names = [u.name for u in self.users]
        if len(set(names)) != len(names):
            raise ParameterError("user names must be unique")
        for u in self.users:
            try:
                u.exo.validate()
                if u.exo.horizon != self.horizon:
                    raise ParameterError(f"outdoor_temp has length {u.exo.horizon}, expected {self.horizon}")
                if u.params.horizon != self.horizon:
                    raise ParameterError(f"flex profiles have length {u.params.horizon}, expected {self.horizon}")
                u.params.validate(self.slot_hours)
            except ParameterError as e:
                raise ParameterError(f"user {u.name}: {e}") from None
        self.coordinator.validate()
        if self.chain.validators < 1:
            raise ParameterError("need at least one validator")
        self.net.validate(set(self.validator_ids()))


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthTemplate:
    """Parameter ranges for generated households. Values are synthetic, not
    calibrated against any metered dataset."""

    horizon: int = 24
    slot_hours: float = 1.0
    start_hour: float = 0.0
    pv_share: float = 0.6
    battery_share: float = 0.5
    pv_cap: tuple[float, float] = (2.0, 6.0)
    base_load: tuple[float, float] = (0.3, 0.9)
    battery_kwh: tuple[float, float] = (5.0, 13.5)
    flex_kwh: tuple[float, float] = (1.0, 4.0)
    outdoor_mean: float = 29.0
    outdoor_swing: float = 5.0
    # one utility tariff for the whole community
    energy_price: float = 0.12
    peak_price: float = 0.5
    grid_cap: float = 12.0
    rho_mode: str = "adaptive"
    rho1: float = 0.3
    rho2: float = 1.0
    validators: int = 4


def _hours(tpl: SynthTemplate) -> np.ndarray:
    return (tpl.start_hour + tpl.slot_hours * np.arange(tpl.horizon)) % 24.0


def synth_household(rng: np.random.Generator, tpl: SynthTemplate, name: str) -> User:
    H, h = tpl.horizon, tpl.slot_hours
    hours = _hours(tpl)
    u = lambda lo_hi: float(rng.uniform(*lo_hi))  # noqa: E731

    t_out = tpl.outdoor_mean + tpl.outdoor_swing * np.sin(2 * np.pi * (hours - 9.0) / 24.0) + rng.normal(0, 0.4, H)
    base = u(tpl.base_load)
    load = base * (1.0 + 0.6 * np.sin(2 * np.pi * (hours - 13.0) / 24.0)) + rng.normal(0, 0.05, H)
    load = np.clip(load, 0.05, None)
    if rng.random() < tpl.pv_share:
        shape = np.clip(np.sin(np.pi * (hours - 6.5) / 13.0), 0.0, None)
        pv = u(tpl.pv_cap) * shape * rng.uniform(0.8, 1.0, H)
    else:
        pv = np.zeros(H)

    # flexible load window: a contiguous run of slots
    length = max(1, min(H, int(round(rng.uniform(0.3, 0.6) * H))))
    start = int(rng.integers(0, H - length + 1))
    window = tuple(range(start, start + length))
    flex_max = np.full(H, 2.0)
    cap = h * 2.0 * length
    d_f = min(u(tpl.flex_kwh) * min(1.0, H * h / 24.0), 0.8 * cap)
    ref = np.zeros(H)
    pref = window[: max(1, length // 2)]
    ref[list(pref)] = d_f / (h * len(pref))

    has_batt = rng.random() < tpl.battery_share
    e_cap = u(tpl.battery_kwh) if has_batt else 0.0
    params = HouseholdParams(
        thermal_capacity=u((1.5, 3.0)),
        thermal_resistance=u((1.5, 3.0)),
        hvac_mode_coeff=u((2.0, 3.0)),
        temp_ref=24.0,
        temp_min=21.0,
        temp_max=27.0,
        discomfort_ac=u((0.02, 0.08)),
        discomfort_flex=u((0.01, 0.05)),
        flex_total=d_f,
        flex_window=window,
        flex_min=np.zeros(H),
        flex_max=flex_max,
        flex_ref=ref,
        grid_cap=tpl.grid_cap,
        energy_price=tpl.energy_price,
        peak_price=tpl.peak_price,
        battery_capacity=e_cap,
        charge_eff=0.95 if has_batt else 1.0,
        discharge_eff=0.95 if has_batt else 1.0,
        soc_min_frac=0.1,
        soc_max_frac=0.9,
        charge_cap=e_cap / 2.5 if has_batt else 0.0,
        discharge_cap=e_cap / 2.5 if has_batt else 0.0,
        soc_initial=0.5 * e_cap,
        battery_wear=0.01 if has_batt else 0.0,
        hvac_max=5.0,
    )
    # keep the night-time outdoor temperature above the comfort floor: cooling only
    t_out = np.maximum(t_out, params.temp_min + 0.5)
    exo = ExogenousSeries(outdoor_temp=t_out, renewable_avail=pv, inflexible_load=load, slot_hours=h)
    return User(name, params, exo)


def synth_generate(template: SynthTemplate | None = None, seed: int = 0, n: int = 10) -> Scenario:
    """Reproducible synthetic community of ``n`` households."""
    if n < 1:
        raise ParameterError("need at least one user")
    tpl = template or SynthTemplate()
    rng = np.random.default_rng(seed)
    users = [synth_household(rng, tpl, f"u{i}") for i in range(n)]
    sc = Scenario(
        users=users,
        horizon=tpl.horizon,
        slot_hours=tpl.slot_hours,
        coordinator=CoordinatorConfig(rho_mode=tpl.rho_mode, rho1=tpl.rho1, rho2=tpl.rho2),
        chain=ChainConfig(validators=tpl.validators),
        net=NetConfig(seed=seed),
        seed=seed,
        name=f"synth-n{n}-s{seed}",
    )
    sc.validate()
    return sc


# --------------------------------------------------------------------------
# scenario documents

SERIES_COLUMNS = ("slot", "outdoor_temp", "renewable_avail", "inflexible_load")
_SERIES_FIELDS = SERIES_COLUMNS[1:]
_ARRAY_PARAMS = ("flex_min", "flex_max", "flex_ref")


class ScenarioError(ParameterError):
    """Validation failure tied to a place in a scenario document."""

    def __init__(self, message: str, source: str = "<scenario>", line: int | None = None):
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line


class _Doc:
    """YAML mapping with the source line of every key (1-based)."""

    def __init__(self, data: dict, lines: dict, line: int):
        self.data = data
        self.lines = lines
        self.line = line

    def get(self, key, default=None):
        return self.data.get(key, default)

    def line_of(self, key) -> int:
        return self.lines.get(key, self.line)


def _plain(node):
    """Compose-tree node to Python values; mappings become _Doc."""
    if isinstance(node, yaml.MappingNode):
        data, lines = {}, {}
        for k, v in node.value:
            key = yaml.safe_load(yaml.serialize(k))
            data[key] = _plain(v)
            lines[key] = k.start_mark.line + 1
        return _Doc(data, lines, node.start_mark.line + 1)
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v) for v in node.value]
    return yaml.safe_load(yaml.serialize(node))


def _unwrap(v):
    if isinstance(v, _Doc):
        return {k: _unwrap(x) for k, x in v.data.items()}
    if isinstance(v, list):
        return [_unwrap(x) for x in v]
    return v


class _Reader:
    def __init__(self, source: str, base: Path | None):
        self.source = source
        self.base = base

    def fail(self, msg: str, line: int | None) -> ScenarioError:
        return ScenarioError(msg, self.source, line)

    def section(self, doc: _Doc, key: str, required: bool = False) -> _Doc | None:
        v = doc.get(key)
        if v is None:
            if required:
                raise self.fail(f"missing field '{key}'", doc.line)
            return None
        if not isinstance(v, _Doc):
            raise self.fail(f"'{key}' must be a mapping", doc.line_of(key))
        return v

    def number(self, doc: _Doc, key: str, where: str, default=None, kind=float):
        v = doc.get(key, default)
        if v is None:
            raise self.fail(f"{where}: missing field '{key}'", doc.line)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self.fail(f"{where}: '{key}' must be a number", doc.line_of(key))
        if kind is int:
            if float(v) != int(v):
                raise self.fail(f"{where}: '{key}' must be an integer", doc.line_of(key))
            return int(v)
        if math.isnan(float(v)) or (math.isinf(float(v)) and key not in _MAY_BE_INFINITE):
            raise self.fail(f"{where}: '{key}' must be finite", doc.line_of(key))
        return float(v)

    def array(self, doc: _Doc, key: str, where: str, length: int) -> np.ndarray:
        v = doc.get(key)
        if v is None:
            raise self.fail(f"{where}: missing field '{key}'", doc.line)
        if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            raise self.fail(f"{where}: '{key}' must be a list of numbers", doc.line_of(key))
        if len(v) != length:
            raise self.fail(f"{where}: '{key}' has length {len(v)}, expected {length}", doc.line_of(key))
        return np.asarray(v, dtype=float)

    def known(self, doc: _Doc, allowed, where: str) -> None:
        for k in doc.data:
            if k not in allowed:
                raise self.fail(f"{where}: unknown field '{k}'", doc.line_of(k))


_PARAM_NAMES = [f.name for f in fields(HouseholdParams)]
_MAY_BE_INFINITE = ("hvac_max",)


def _user_from(r: _Reader, doc: _Doc, H: int, slot_hours: float) -> User:
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise r.fail("user needs a non-empty 'name'", doc.line)
    where = f"user {name}"
    r.known(doc, ("name", "params", "series", "series_csv"), where)
    pdoc = r.section(doc, "params", required=True)
    r.known(pdoc, _PARAM_NAMES, where)
    kw: dict[str, Any] = {}
    for f in fields(HouseholdParams):
        if f.name not in pdoc.data:
            if f.default is MISSING:
                raise r.fail(f"{where}: missing field '{f.name}'", pdoc.line)
            continue
        if f.name in _ARRAY_PARAMS:
            kw[f.name] = r.array(pdoc, f.name, where, H)
        elif f.name == "flex_window":
            w = pdoc.get("flex_window")
            if not isinstance(w, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in w):
                raise r.fail(f"{where}: 'flex_window' must be a list of slot indices", pdoc.line_of("flex_window"))
            kw[f.name] = tuple(w)
        elif f.name == "cyclic_soc":
            kw[f.name] = bool(pdoc.get("cyclic_soc"))
        else:
            kw[f.name] = r.number(pdoc, f.name, where)
    params = HouseholdParams(**kw)

    has_inline, has_csv = "series" in doc.data, "series_csv" in doc.data
    if has_inline == has_csv:
        raise r.fail(f"{where}: give exactly one of 'series' or 'series_csv'", doc.line)
    t_init = None
    if has_inline:
        sdoc = r.section(doc, "series")
        r.known(sdoc, _SERIES_FIELDS + ("t_in_initial",), where)
        cols = {k: r.array(sdoc, k, where, H) for k in _SERIES_FIELDS}
        if "t_in_initial" in sdoc.data:
            t_init = r.number(sdoc, "t_in_initial", where)
        line_of = sdoc.line_of
    else:
        ref = doc.get("series_csv")
        if not isinstance(ref, str):
            raise r.fail(f"{where}: 'series_csv' must be a file name", doc.line_of("series_csv"))
        path = (r.base / ref) if r.base is not None else Path(ref)
        try:
            cols = read_series_csv(path, H)
        except (OSError, ParameterError) as e:
            raise r.fail(f"{where}: {e}", doc.line_of("series_csv")) from None
        line_of = lambda k: doc.line_of("series_csv")  # noqa: E731
    exo = ExogenousSeries(cols["outdoor_temp"], cols["renewable_avail"], cols["inflexible_load"], slot_hours, t_init)
    try:
        exo.validate()
    except ParameterError as e:
        bad = next((k for k in _SERIES_FIELDS if k in str(e)), None)
        raise r.fail(f"{where}: {e}", line_of(bad) if bad else doc.line) from None
    try:
        params.validate(slot_hours)
    except ParameterError as e:
        bad = next((k for k in sorted(_PARAM_NAMES, key=len, reverse=True) if k in str(e)), None)
        raise r.fail(f"{where}: {e}", pdoc.line_of(bad) if bad else pdoc.line) from None
    return User(name, params, exo)


def read_series_csv(path: Path, horizon: int) -> dict[str, np.ndarray]:
    """Per-user series from a CSV with header ``slot,outdoor_temp,renewable_avail,inflexible_load``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != SERIES_COLUMNS:
        raise ParameterError(f"{path}: header must be {','.join(SERIES_COLUMNS)}")
    body = [r for r in rows[1:] if r]
    if len(body) != horizon:
        raise ParameterError(f"{path}: {len(body)} rows, expected {horizon}")
    out = np.zeros((horizon, 3))
    for n, row in enumerate(body):
        line = n + 2
        if len(row) != 4:
            raise ParameterError(f"{path}:{line}: expected 4 columns")
        try:
            slot = int(row[0])
            out[n] = [float(x) for x in row[1:]]
        except ValueError:
            raise ParameterError(f"{path}:{line}: non-numeric value") from None
        if slot != n:
            raise ParameterError(f"{path}:{line}: slot {slot}, expected {n}")
    return {k: out[:, i].copy() for i, k in enumerate(_SERIES_FIELDS)}


def write_series_csv(path: Path, exo: ExogenousSeries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for t in range(exo.horizon):
            w.writerow([t, repr(float(exo.outdoor_temp[t])), repr(float(exo.renewable_avail[t])),
                        repr(float(exo.inflexible_load[t]))])


def parse_scenario(text: str, source: str = "<scenario>", base: Path | None = None) -> Scenario:
    """Build and validate a Scenario from YAML text; errors carry ``source:line``."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioError(f"not valid YAML: {getattr(e, 'problem', e)}", source,
                            None if mark is None else mark.line + 1) from None
    if root is None:
        raise ScenarioError("empty document", source, 1)
    doc = _plain(root)
    r = _Reader(source, base)
    if not isinstance(doc, _Doc):
        raise r.fail("top level must be a mapping", 1)
    r.known(doc, ("name", "horizon", "slot_hours", "seed", "coordinator", "chain", "net", "users"), "scenario")
    H = r.number(doc, "horizon", "scenario", kind=int)
    if H < 1:
        raise r.fail("horizon must be at least 1", doc.line_of("horizon"))
    slot_hours = r.number(doc, "slot_hours", "scenario", default=1.0)
    if slot_hours <= 0:
        raise r.fail("slot_hours must be positive", doc.line_of("slot_hours"))
    users_doc = doc.get("users")
    if not isinstance(users_doc, list) or not users_doc:
        raise r.fail("'users' must be a non-empty list", doc.line_of("users"))
    users = []
    for u in users_doc:
        if not isinstance(u, _Doc):
            raise r.fail("each user must be a mapping", doc.line_of("users"))
        users.append(_user_from(r, u, H, slot_hours))
    names = [u.name for u in users]
    if len(set(names)) != len(names):
        raise r.fail("user names must be unique", doc.line_of("users"))

    coord = CoordinatorConfig()
    cdoc = r.section(doc, "coordinator")
    if cdoc is not None:
        r.known(cdoc, [f.name for f in fields(CoordinatorConfig)], "coordinator")
        for f in fields(CoordinatorConfig):
            if f.name in cdoc.data:
                if f.name == "rho_mode":
                    setattr(coord, f.name, str(cdoc.get(f.name)))
                else:
                    kind = int if f.name.startswith("max_iter") else float
                    setattr(coord, f.name, r.number(cdoc, f.name, "coordinator", kind=kind))
        try:
            coord.validate()
        except ParameterError as e:
            raise r.fail(f"coordinator: {e}", cdoc.line) from None

    chain = ChainConfig()
    hdoc = r.section(doc, "chain")
    if hdoc is not None:
        r.known(hdoc, [f.name for f in fields(ChainConfig)], "chain")
        for f in fields(ChainConfig):
            if f.name in hdoc.data:
                kind = int if f.name in ("validators", "block_capacity") else float
                setattr(chain, f.name, r.number(hdoc, f.name, "chain", kind=kind))
        if chain.validators < 1 or chain.block_capacity < 1:
            raise r.fail("chain: validators and block_capacity must be at least 1", hdoc.line)
        if chain.genesis_balance < 0 or chain.block_reward < 0 or chain.heartbeat <= 0:
            raise r.fail("chain: balances and rewards must be non-negative, heartbeat positive", hdoc.line)

    net = NetConfig()
    ndoc = r.section(doc, "net")
    if ndoc is not None:
        r.known(ndoc, ("seed", "latency_min", "latency_max", "drop_prob", "partitions", "faults"), "net")
        for k in ("latency_min", "latency_max", "drop_prob"):
            if k in ndoc.data:
                setattr(net, k, r.number(ndoc, k, "net"))
        if "seed" in ndoc.data:
            net.seed = r.number(ndoc, "seed", "net", kind=int)
        for p in ndoc.get("partitions") or []:
            if not isinstance(p, _Doc):
                raise r.fail("net: each partition must be a mapping", ndoc.line_of("partitions"))
            group = p.get("group")
            if not isinstance(group, list):
                raise r.fail("net: partition 'group' must be a list of node names", p.line)
            net.partitions.append(Partition(r.number(p, "start", "partition"), r.number(p, "end", "partition"),
                                            [str(g) for g in group]))
        for f in ndoc.get("faults") or []:
            if not isinstance(f, _Doc):
                raise r.fail("net: each fault must be a mapping", ndoc.line_of("faults"))
            net.faults.append(FaultSpec(str(f.get("node")), str(f.get("behavior")),
                                        r.number(f, "at", "fault", default=0.0),
                                        r.number(f, "extra_delay", "fault", default=0.0)))
    seed = r.number(doc, "seed", "scenario", default=0, kind=int)
    name = str(doc.get("name", Path(source).stem if source != "<scenario>" else "scenario"))
    sc = Scenario(users, H, slot_hours, coord, chain, net, seed, name)
    try:
        sc.net.validate(set(sc.validator_ids()))
        for f in sc.net.faults:
            if f.behavior not in ("crash", "mute", "equivocate", "delay"):
                raise ParameterError(f"unknown fault behavior {f.behavior!r}")
    except ParameterError as e:
        raise r.fail(f"net: {e}", ndoc.line if ndoc is not None else doc.line) from None
    try:
        sc.validate()
    except ParameterError as e:
        raise r.fail(str(e), doc.line) from None
    return sc


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"cannot read: {e.strerror}", str(path)) from None
    return parse_scenario(text, str(path), path.parent)


def _num(x) -> float:
    return float(x)


def scenario_to_dict(sc: Scenario) -> dict:
    users = []
    for u in sc.users:
        p: dict[str, Any] = {}
        for f in fields(HouseholdParams):
            v = getattr(u.params, f.name)
            if f.name in _ARRAY_PARAMS:
                p[f.name] = [_num(x) for x in v]
            elif f.name == "flex_window":
                p[f.name] = [int(t) for t in v]
            elif f.name == "cyclic_soc":
                p[f.name] = bool(v)
            else:
                p[f.name] = _num(v)
        series = {k: [_num(x) for x in getattr(u.exo, k)] for k in _SERIES_FIELDS}
        if u.exo.t_in_initial is not None:
            series["t_in_initial"] = _num(u.exo.t_in_initial)
        users.append({"name": u.name, "params": p, "series": series})
    return {
        "name": sc.name,
        "horizon": int(sc.horizon),
        "slot_hours": _num(sc.slot_hours),
        "seed": int(sc.seed),
        "coordinator": asdict(sc.coordinator),
        "chain": asdict(sc.chain),
        "net": {"seed": sc.net.seed, "latency_min": sc.net.latency_min, "latency_max": sc.net.latency_max,
                "drop_prob": sc.net.drop_prob,
                "partitions": [asdict(p) for p in sc.net.partitions],
                "faults": [asdict(f) for f in sc.net.faults]},
        "users": users,
    }


def dump_scenario(sc: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(sc), sort_keys=False, default_flow_style=None, width=120)


def save_scenario(sc: Scenario, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_scenario(sc), encoding="utf-8")


# --------------------------------------------------------------------------
# metered data in the Pecan Street layout

# Circuit columns (kW) that form the household's HVAC draw in the metered data;
# they are removed from the inflexible load because HVAC is scheduled.
PECAN_HVAC = ("air1", "air2", "air3", "airwindowunit1", "furnace1", "furnace2", "heater1")
PECAN_SOLAR = ("solar", "solar2")
PECAN_TIME = ("localminute", "local_15min", "localhour")


def pecan_series(path, dataid: int, horizon: int, slot_hours: float = 1.0, outdoor_temp=None,
                 start: str | None = None) -> ExogenousSeries:
    """Exogenous series for one household from a Pecan-Street-style CSV.

    Expected columns: ``dataid``, one time column (``localminute``,
    ``local_15min`` or ``localhour``), ``grid`` and optionally ``solar``,
    ``solar2`` and the HVAC circuits in PECAN_HVAC, all in kW. Rows are
    averaged into slots of ``slot_hours``; renewable_avail is solar + solar2,
    inflexible_load is total use (grid + solar) minus HVAC circuits. Outdoor
    temperature is not part of that dataset and must be supplied.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        tcol = next((c for c in PECAN_TIME if c in cols), None)
        if tcol is None or "dataid" not in cols or "grid" not in cols:
            raise ParameterError(f"{path}: need columns dataid, grid and one of {', '.join(PECAN_TIME)}")
        rows = [r for r in reader if r["dataid"].strip() == str(dataid)]
    if not rows:
        raise ParameterError(f"{path}: no rows for dataid {dataid}")
    rows.sort(key=lambda r: r[tcol])
    if start is not None:
        rows = [r for r in rows if r[tcol] >= start]

    def val(r, c):
        v = r.get(c, "")
        return float(v) if v not in ("", None) else 0.0

    stamps = [_parse_stamp(r[tcol]) for r in rows]
    t0 = stamps[0]
    buckets: list[list[tuple[float, float]]] = [[] for _ in range(horizon)]
    for r, ts in zip(rows, stamps):
        k = int((ts - t0) // (slot_hours * 3600.0))
        if k >= horizon:
            break
        solar = sum(val(r, c) for c in PECAN_SOLAR)
        hvac = sum(val(r, c) for c in PECAN_HVAC)
        use = val(r, "grid") + solar
        buckets[k].append((max(solar, 0.0), max(use - hvac, 0.0)))
    if any(not b for b in buckets):
        raise ParameterError(f"{path}: dataid {dataid} does not cover {horizon} slots")
    pv = np.array([np.mean([a for a, _ in b]) for b in buckets])
    load = np.array([np.mean([c for _, c in b]) for b in buckets])
    if outdoor_temp is None:
        raise ParameterError("outdoor_temp must be supplied; the metered data has no weather")
    return ExogenousSeries(np.asarray(outdoor_temp, dtype=float), pv, load, slot_hours)


def _parse_stamp(s: str) -> float:
    s = s.strip()
    for cut in ("+", "-"):
        # drop a trailing UTC offset such as -05 or +00:00
        i = s.rfind(cut)
        if i > 10:
            s = s[:i]
            break
    return datetime.fromisoformat(s).replace(tzinfo=timezone.utc).timestamp()
