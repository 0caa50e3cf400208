"""Network case model and import.

Holds the static description of a transmission network: buses, branches,
generators with quadratic cost curves, and the bus admittance matrix built
from them. Two text formats are accepted by :func:`parse_case_text`:

* a MATPOWER-compatible subset (``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen``,
  ``mpc.branch``, ``mpc.gencost`` tables), with powers in MW/MVAr, and
* a native JSON schema where all power quantities are already per-unit.

Everything downstream works in per-unit on ``base_mva``. External bus ids
are kept on the records; positional (internal) indices are assigned in
file order and used for all matrices.
"""

import json
import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

BUS_PQ = "PQ"
BUS_PV = "PV"
BUS_REF = "ref"

_MP_BUS_TYPES = {1: BUS_PQ, 2: BUS_PV, 3: BUS_REF}


class CaseError(ValueError):
    """Malformed or inconsistent case input."""


@dataclass
class BusRecord:
    id: int
    bus_type: str
    p_load: float
    q_load: float
    v_min: float
    v_max: float
    g_shunt: float = 0.0
    b_shunt: float = 0.0


@dataclass
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    tap: float = 1.0
    i_max: float = math.inf


@dataclass
class GenRecord:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    v_setpoint: float
    p_start: float = 0.0
    cost: tuple = (0.0, 0.0, 0.0)  # (c2, c1, c0), $/h with p in MW


@dataclass
class Diagnostic:
    level: str  # "error" | "warning" | "info"
    message: str

    def __str__(self):
        return f"[{self.level}] {self.message}"


@dataclass
class NetworkCase:
    """Parsed network with contiguous internal indexing.

    Records keep the external bus ids from the source file; ``index_of``
    maps them to 0-based positions used by every matrix in the package.
    """

    base_mva: float
    buses: list
    branches: list
    generators: list
    name: str = ""

    @cached_property
    def _index(self):
        idx = {}
        for i, bus in enumerate(self.buses):
            if bus.id in idx:
                raise CaseError(f"duplicate bus id {bus.id}")
            idx[bus.id] = i
        return idx

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    @property
    def n_gen(self):
        return len(self.generators)

    def index_of(self, bus_id):
        try:
            return self._index[bus_id]
        except KeyError:
            raise CaseError(f"unknown bus id {bus_id}") from None

    @cached_property
    def ref_index(self):
        refs = [i for i, b in enumerate(self.buses) if b.bus_type == BUS_REF]
        if len(refs) != 1:
            raise CaseError(f"expected exactly one reference bus, found {len(refs)}")
        return refs[0]

    @cached_property
    def pv_indices(self):
        return np.array([i for i, b in enumerate(self.buses) if b.bus_type == BUS_PV], dtype=int)

    @cached_property
    def pq_indices(self):
        return np.array([i for i, b in enumerate(self.buses) if b.bus_type == BUS_PQ], dtype=int)

    @cached_property
    def non_ref_indices(self):
        return np.array([i for i in range(self.n_bus) if i != self.ref_index], dtype=int)

    @cached_property
    def gen_bus_index(self):
        return np.array([self.index_of(g.bus) for g in self.generators], dtype=int)

    @cached_property
    def vset_bus_index(self):
        """Buses carrying a voltage setpoint (PV and ref), internal order."""
        seen = sorted(set(self.gen_bus_index.tolist()))
        return np.array(seen, dtype=int)

    def loads(self):
        p = np.array([b.p_load for b in self.buses])
        q = np.array([b.q_load for b in self.buses])
        return p, q


@dataclass
class AdmittanceMatrix:
    """Dense bus admittance Y = G + jB in per-unit."""

    G: np.ndarray
    B: np.ndarray

    @property
    def complex(self):
        return self.G + 1j * self.B


def build_admittance(case):
    """Assemble the bus admittance matrix from branch and shunt data.

    Branches use the standard pi model with an off-nominal tap on the
    from side: series y = 1/(r+jx), total charging b split half per end.
    """
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        i = case.index_of(br.from_bus)
        j = case.index_of(br.to_bus)
        if br.r == 0.0 and br.x == 0.0:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b / 2.0
        t = br.tap if br.tap else 1.0
        Y[i, i] += (ys + bc) / (t * t)
        Y[j, j] += ys + bc
        Y[i, j] += -ys / t
        Y[j, i] += -ys / t
    for bus in case.buses:
        k = case.index_of(bus.id)
        Y[k, k] += complex(bus.g_shunt, bus.b_shunt)
    return AdmittanceMatrix(G=Y.real.copy(), B=Y.imag.copy())


# ---------------------------------------------------------------------------
# MATPOWER-compatible importer


def _scan_matrices(text):
    """Return {name: list of (lineno, [floats])} for mpc.<name> = [...] blocks."""
    tables = {}
    scalars = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw
        pos = line.find("%")
        if pos != -1:
            line = line[:pos]
        line = line.strip()
        if not line:
            continue
        if current is None:
            m = re.match(r"mpc\.(\w+)\s*=\s*(.*)$", line)
            if not m:
                continue
            name, rest = m.group(1), m.group(2).strip()
            if rest.startswith("["):
                current = name
                tables[current] = []
                rest = rest[1:].strip()
                if not rest:
                    continue
                line = rest
            else:
                val = rest.rstrip(";").strip().strip("'\"")
                scalars[name] = (lineno, val)
                continue
        # inside a matrix block
        closed = False
        if "]" in line:
            line = line[: line.index("]")]
            closed = True
        row_text = line.strip().rstrip(";").strip()
        if row_text:
            parts = row_text.replace(",", " ").split()
            row = []
            for tok in parts:
                try:
                    row.append(float(tok))
                except ValueError:
                    raise CaseError(f"line {lineno}: expected a number, got {tok!r}") from None
            tables[current].append((lineno, row))
        if closed:
            current = None
    if current is not None:
        raise CaseError(f"table mpc.{current} is never closed with ']'")
    return scalars, tables


def _parse_matpower(text):
    scalars, tables = _scan_matrices(text)
    if "baseMVA" not in scalars:
        raise CaseError("missing mpc.baseMVA")
    lineno, sval = scalars["baseMVA"]
    try:
        base = float(sval)
    except ValueError:
        raise CaseError(f"line {lineno}: mpc.baseMVA is not a number: {sval!r}") from None
    if base <= 0:
        raise CaseError(f"line {lineno}: mpc.baseMVA must be positive")
    for required in ("bus", "gen", "branch"):
        if required not in tables:
            raise CaseError(f"missing mpc.{required} table")

    buses = []
    for lineno, row in tables["bus"]:
        if len(row) < 13:
            raise CaseError(f"line {lineno}: bus row needs 13 columns, got {len(row)}")
        code = int(row[1])
        if code == 4:
            continue  # isolated bus, dropped like out-of-service equipment
        if code not in _MP_BUS_TYPES:
            raise CaseError(f"line {lineno}: unknown bus type code {code}")
        buses.append(
            BusRecord(
                id=int(row[0]),
                bus_type=_MP_BUS_TYPES[code],
                p_load=row[2] / base,
                q_load=row[3] / base,
                v_min=row[12],
                v_max=row[11],
                g_shunt=row[4] / base,
                b_shunt=row[5] / base,
            )
        )

    gens = []
    gen_rows = []
    for lineno, row in tables["gen"]:
        if len(row) < 10:
            raise CaseError(f"line {lineno}: gen row needs 10 columns, got {len(row)}")
        if int(row[7]) == 0:
            continue
        gens.append(
            GenRecord(
                bus=int(row[0]),
                p_min=row[9] / base,
                p_max=row[8] / base,
                q_min=row[4] / base,
                q_max=row[3] / base,
                v_setpoint=row[5],
                p_start=row[1] / base,
            )
        )
        gen_rows.append(lineno)

    branches = []
    for lineno, row in tables["branch"]:
        if len(row) < 11:
            raise CaseError(f"line {lineno}: branch row needs 11 columns, got {len(row)}")
        if int(row[10]) == 0:
            continue
        if row[9] != 0.0:
            raise CaseError(f"line {lineno}: phase-shifting branches are not supported")
        if row[2] == 0.0 and row[3] == 0.0:
            raise CaseError(f"line {lineno}: branch has zero impedance")
        rate = row[5]
        branches.append(
            BranchRecord(
                from_bus=int(row[0]),
                to_bus=int(row[1]),
                r=row[2],
                x=row[3],
                b=row[4],
                tap=row[8] if row[8] != 0.0 else 1.0,
                i_max=(rate / base) if rate > 0 else math.inf,
            )
        )

    if "gencost" in tables:
        rows = tables["gencost"]
        if len(rows) not in (len(gen_rows), len(tables["gen"])):
            raise CaseError(
                f"gencost has {len(rows)} rows for {len(tables['gen'])} generators"
            )
        # align with in-service generators when row counts match the full table
        cost_iter = rows if len(rows) == len(gen_rows) else [
            rows[i] for i, (_, grow) in enumerate(tables["gen"]) if int(grow[7]) != 0
        ]
        for g, (lineno, row) in zip(gens, cost_iter):
            if len(row) < 4:
                raise CaseError(f"line {lineno}: gencost row needs at least 4 columns")
            model, npoly = int(row[0]), int(row[3])
            if model != 2:
                raise CaseError(f"line {lineno}: only polynomial cost model 2 is supported")
            if npoly > 3:
                raise CaseError(
                    f"line {lineno}: only polynomial costs of degree <= 2 are supported"
                )
            coeffs = row[4 : 4 + npoly]
            padded = [0.0] * (3 - len(coeffs)) + list(coeffs)
            g.cost = (padded[0], padded[1], padded[2])

    case = NetworkCase(base_mva=base, buses=buses, branches=branches, generators=gens)
    _check_structure(case)
    return case


# ---------------------------------------------------------------------------
# Native JSON schema (per-unit quantities)


def _req(obj, key, where):
    if key not in obj:
        raise CaseError(f"{where}: missing field {key!r}")
    return obj[key]


def _parse_json(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise CaseError("top-level JSON value must be an object")
    base = float(_req(doc, "base_mva", "case"))
    if base <= 0:
        raise CaseError("base_mva must be positive")
    buses = []
    for i, b in enumerate(doc.get("buses", [])):
        where = f"buses[{i}]"
        btype = _req(b, "type", where)
        if btype not in (BUS_PQ, BUS_PV, BUS_REF):
            raise CaseError(f"{where}: unknown bus type {btype!r}")
        buses.append(
            BusRecord(
                id=int(_req(b, "id", where)),
                bus_type=btype,
                p_load=float(b.get("p_load", 0.0)),
                q_load=float(b.get("q_load", 0.0)),
                v_min=float(_req(b, "v_min", where)),
                v_max=float(_req(b, "v_max", where)),
                g_shunt=float(b.get("g_shunt", 0.0)),
                b_shunt=float(b.get("b_shunt", 0.0)),
            )
        )
    branches = []
    for i, br in enumerate(doc.get("branches", [])):
        where = f"branches[{i}]"
        imax = br.get("i_max", None)
        branches.append(
            BranchRecord(
                from_bus=int(_req(br, "from", where)),
                to_bus=int(_req(br, "to", where)),
                r=float(_req(br, "r", where)),
                x=float(_req(br, "x", where)),
                b=float(br.get("b", 0.0)),
                tap=float(br.get("tap", 1.0)),
                i_max=math.inf if imax is None else float(imax),
            )
        )
    gens = []
    for i, g in enumerate(doc.get("generators", [])):
        where = f"generators[{i}]"
        cost = g.get("cost", [0.0, 0.0, 0.0])
        if len(cost) != 3:
            raise CaseError(f"{where}: cost must be [c2, c1, c0]")
        gens.append(
            GenRecord(
                bus=int(_req(g, "bus", where)),
                p_min=float(_req(g, "p_min", where)),
                p_max=float(_req(g, "p_max", where)),
                q_min=float(_req(g, "q_min", where)),
                q_max=float(_req(g, "q_max", where)),
                v_setpoint=float(_req(g, "v_setpoint", where)),
                p_start=float(g.get("p_start", 0.0)),
                cost=(float(cost[0]), float(cost[1]), float(cost[2])),
            )
        )
    case = NetworkCase(
        base_mva=base,
        buses=buses,
        branches=branches,
        generators=gens,
        name=str(doc.get("name", "")),
    )
    _check_structure(case)
    return case


def _check_structure(case):
    """Hard consistency requirements; anything softer goes to validate_case."""
    ids = set()
    for b in case.buses:
        if b.id in ids:
            raise CaseError(f"duplicate bus id {b.id}")
        ids.add(b.id)
    if not any(b.bus_type == BUS_REF for b in case.buses):
        raise CaseError("case has no reference bus")
    if sum(b.bus_type == BUS_REF for b in case.buses) > 1:
        raise CaseError("case has more than one reference bus")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in ids:
                raise CaseError(f"branch {br.from_bus}-{br.to_bus} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} is a self loop")
    gen_buses = set()
    for g in case.generators:
        if g.bus not in ids:
            raise CaseError(f"generator references unknown bus {g.bus}")
        gen_buses.add(g.bus)
    # a PV bus without a machine cannot hold its magnitude; demote it
    for b in case.buses:
        if b.bus_type == BUS_PV and b.id not in gen_buses:
            b.bus_type = BUS_PQ
    ref_bus = next(b for b in case.buses if b.bus_type == BUS_REF)
    if ref_bus.id not in gen_buses:
        raise CaseError(f"reference bus {ref_bus.id} has no generator")


def parse_case_text(text):
    """Parse case text, sniffing the format from the first printable byte."""
    stripped = text.lstrip()
    if not stripped:
        raise CaseError("empty case text")
    if stripped[0] == "{":
        return _parse_json(text)
    return _parse_matpower(text)


def load_case(path):
    with open(path, "r") as fh:
        case = parse_case_text(fh.read())
    if not case.name:
        case.name = re.sub(r"\.[^.]*$", "", str(path).rsplit("/", 1)[-1])
    return case


def serialize_case(case):
    """Render a case to the native JSON schema (per-unit). Round-trips exactly."""
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [
            {
                "id": b.id,
                "type": b.bus_type,
                "p_load": b.p_load,
                "q_load": b.q_load,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "g_shunt": b.g_shunt,
                "b_shunt": b.b_shunt,
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "r": br.r,
                "x": br.x,
                "b": br.b,
                "tap": br.tap,
                "i_max": None if math.isinf(br.i_max) else br.i_max,
            }
            for br in case.branches
        ],
        "generators": [
            {
                "bus": g.bus,
                "p_min": g.p_min,
                "p_max": g.p_max,
                "q_min": g.q_min,
                "q_max": g.q_max,
                "v_setpoint": g.v_setpoint,
                "p_start": g.p_start,
                "cost": list(g.cost),
            }
            for g in case.generators
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def validate_case(case):
    """Collect soft diagnostics. An empty list means the case looks sane."""
    out = []
    gen_buses = {g.bus for g in case.generators}
    touched = set()
    for b in case.buses:
        if b.v_min >= b.v_max:
            out.append(Diagnostic("error", f"bus {b.id}: v_min {b.v_min} >= v_max {b.v_max}"))
        if b.v_min <= 0:
            out.append(Diagnostic("error", f"bus {b.id}: v_min {b.v_min} is not positive"))
    for br in case.branches:
        touched.add(br.from_bus)
        touched.add(br.to_bus)
        if br.x == 0.0:
            out.append(
                Diagnostic("warning", f"branch {br.from_bus}-{br.to_bus}: zero series reactance")
            )
        if br.r < 0:
            out.append(
                Diagnostic("warning", f"branch {br.from_bus}-{br.to_bus}: negative resistance")
            )
        if br.tap <= 0:
            out.append(
                Diagnostic("error", f"branch {br.from_bus}-{br.to_bus}: tap ratio {br.tap} <= 0")
            )
        if br.i_max <= 0:
            out.append(
                Diagnostic(
                    "error", f"branch {br.from_bus}-{br.to_bus}: current limit {br.i_max} <= 0"
                )
            )
    if case.n_bus > 1:
        for b in case.buses:
            if b.id not in touched:
                out.append(Diagnostic("warning", f"bus {b.id}: not connected to any branch"))
    for k, g in enumerate(case.generators):
        tag = f"generator {k} at bus {g.bus}"
        if g.p_min > g.p_max:
            out.append(Diagnostic("error", f"{tag}: p_min {g.p_min} > p_max {g.p_max}"))
        if g.q_min > g.q_max:
            out.append(Diagnostic("error", f"{tag}: q_min {g.q_min} > q_max {g.q_max}"))
        bus = case.buses[case.index_of(g.bus)]
        if not (bus.v_min <= g.v_setpoint <= bus.v_max):
            out.append(
                Diagnostic(
                    "warning",
                    f"{tag}: setpoint {g.v_setpoint} outside bus range"
                    f" [{bus.v_min}, {bus.v_max}]",
                )
            )
        if not (g.p_min <= g.p_start <= g.p_max):
            out.append(Diagnostic("warning", f"{tag}: start dispatch outside [p_min, p_max]"))
    return out
