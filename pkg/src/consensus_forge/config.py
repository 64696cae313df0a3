"""JSON problem configs, certificate files, trajectory CSV and the pendulum demo."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .coupling import LtiFilter, MemorylessGain
from .errors import ConfigError, SpecHashMismatch
from .lmi import MARGIN_TOL, POS_TOL, SYM_TOL
from .network import ORTH_TOL, Graph, Pinning
from .simulator import SimConfig, SimulationResult
from .synthesis import METHODS, NetworkSpec, SynthesisCertificate

TOL_ENV = "CONSENSUS_FORGE_TOL"

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_vector = {"type": "array", "items": {"type": "number"}}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["dynamics", "weights", "graph"],
    "properties": {
        "dynamics": {
            "type": "object",
            "required": ["n", "m_in", "A", "B1", "B2"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "m_in": {"type": "integer", "minimum": 1},
                "A": _matrix, "B1": _matrix, "B2": _matrix,
            },
        },
        "weights": {
            "type": "object",
            "required": ["Q", "R"],
            "properties": {"Q": _matrix, "R": _matrix},
        },
        "graph": {
            "type": "object",
            "required": ["N", "edges", "pinned"],
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "edges": {"type": "array", "items": {
                    "type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}},
                "pinned": {"type": "array", "items": {"type": "integer"}},
            },
        },
        "iqc": {"type": "object", "properties": {"d": {"type": "number", "minimum": 0}}},
        "coupling": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["memoryless", "lti_filter"]},
                "k": {"type": "number"},
                "gain": _matrix,
                "A": _matrix, "B": _matrix, "C": _matrix, "D": _matrix,
            },
        },
        "simulation": {
            "type": "object",
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "t_final": {"type": "number", "exclusiveMinimum": 0},
                "x0_init": _vector,
                "agent_init": _matrix,
                "record_stride": {"type": "integer", "minimum": 1},
            },
        },
        "synthesis": {
            "type": "object",
            "properties": {
                "method": {"enum": list(METHODS)},
                "margin_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
    },
}

SIM_DEFAULTS = {"dt": 1e-3, "t_final": 20.0, "record_stride": 1}


def _path(parts):
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def _matrix_field(doc, path, rows, cols):
    value = doc
    for key in path:
        value = value[key]
    where = _path(path)
    if len(value) != rows:
        raise ConfigError(where, f"expected {rows} rows, got {len(value)}")
    for r, row in enumerate(value):
        if len(row) != cols:
            raise ConfigError(f"{where}[{r}]", f"expected {cols} entries, got {len(row)}")
    return np.array(value, dtype=float).reshape(rows, cols)


@dataclass(frozen=True)
class ProblemConfig:
    spec: NetworkSpec
    sim: SimConfig | None
    method: str
    margin_tol: float
    doc: dict


def margin_tol_from_env(default):
    raw = os.environ.get(TOL_ENV)
    if raw is None:
        return default
    try:
        value = float(raw)
    except ValueError as exc:
        raise ConfigError(TOL_ENV, f"not a number: {raw!r}") from exc
    if value <= 0:
        raise ConfigError(TOL_ENV, "must be positive")
    return value


def coupling_from_doc(doc, n, n_w, k_override=None):
    if k_override is not None:
        if n_w != n:
            raise ConfigError("coupling.k", f"scalar gain k*I needs n_w == n, got {n_w} != {n}")
        return MemorylessGain.scalar(float(k_override), n)
    if doc is None:
        return MemorylessGain(np.zeros((n_w, n)))
    if doc["kind"] == "memoryless":
        if "gain" in doc:
            return MemorylessGain(_matrix_field(doc, ["gain"], n_w, n))
        if "k" in doc:
            if n_w != n:
                raise ConfigError("coupling.k", f"scalar gain k*I needs n_w == n, got {n_w} != {n}")
            return MemorylessGain.scalar(float(doc["k"]), n)
        raise ConfigError("coupling", "memoryless coupling needs 'gain' or 'k'")
    for key in "ABCD":
        if key not in doc:
            raise ConfigError(f"coupling.{key}", "required for lti_filter")
    nf = len(doc["A"])
    try:
        return LtiFilter(_matrix_field(doc, ["A"], nf, nf), _matrix_field(doc, ["B"], nf, n),
                         _matrix_field(doc, ["C"], n_w, nf), _matrix_field(doc, ["D"], n_w, n))
    except ConfigError as exc:
        raise ConfigError(f"coupling.{exc.path}", str(exc).split(": ", 1)[-1]) from exc


def parse_config(doc: dict, k_override=None) -> ProblemConfig:
    """Validate ``doc`` against the schema and dimension rules and build the problem."""
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(_path(list(err.absolute_path)) or "<root>", err.message)

    dyn = doc["dynamics"]
    n, m = dyn["n"], dyn["m_in"]
    A = _matrix_field(doc, ["dynamics", "A"], n, n)
    B1 = _matrix_field(doc, ["dynamics", "B1"], n, m)
    if len(dyn["B2"]) != n:
        raise ConfigError("dynamics.B2", f"expected {n} rows, got {len(dyn['B2'])}")
    n_w = len(dyn["B2"][0]) if n else 0
    B2 = _matrix_field(doc, ["dynamics", "B2"], n, n_w)
    Q = _matrix_field(doc, ["weights", "Q"], n, n)
    R = _matrix_field(doc, ["weights", "R"], m, m)

    g = doc["graph"]
    N = g["N"]
    try:
        graph = Graph.from_edges(N, g["edges"])
    except ValueError as exc:
        raise ConfigError("graph.edges", str(exc)) from exc
    try:
        pinning = Pinning.from_nodes(N, g["pinned"])
    except ValueError as exc:
        raise ConfigError("graph.pinned", str(exc)) from exc
    d = float(doc.get("iqc", {}).get("d", 0.0))

    sim_doc = doc.get("simulation")
    sim, e0 = None, None
    coupling = coupling_from_doc(doc.get("coupling"), n, n_w, k_override)
    if sim_doc is not None and "x0_init" in sim_doc and "agent_init" in sim_doc:
        if len(sim_doc["x0_init"]) != n:
            raise ConfigError("simulation.x0_init", f"expected {n} entries, got {len(sim_doc['x0_init'])}")
        x0 = np.array(sim_doc["x0_init"], dtype=float)
        agents = _matrix_field(doc, ["simulation", "agent_init"], N, n)
        opts = {**SIM_DEFAULTS, **{k: sim_doc[k] for k in SIM_DEFAULTS if k in sim_doc}}
        try:
            sim = SimConfig(float(opts["t_final"]), float(opts["dt"]), x0, agents, coupling,
                            int(opts["record_stride"]))
        except ValueError as exc:
            raise ConfigError("simulation", str(exc)) from exc
        e0 = sim.e0

    try:
        spec = NetworkSpec(A, B1, B2, Q, R, graph, pinning, d, e0)
    except ValueError as exc:
        raise ConfigError("weights", str(exc)) from exc

    syn = doc.get("synthesis", {})
    margin_tol = margin_tol_from_env(float(syn.get("margin_tol", MARGIN_TOL)))
    return ProblemConfig(spec, sim, syn.get("method", "th1"), margin_tol, doc)


def load_config(path, k_override=None) -> ProblemConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
    return parse_config(doc, k_override)


def config_to_doc(problem: ProblemConfig) -> dict:
    """Serialise a parsed problem back to a config document."""
    spec, sim = problem.spec, problem.sim
    doc = {
        "dynamics": {"n": spec.n, "m_in": spec.m_in, "A": spec.A.tolist(),
                     "B1": spec.B1.tolist(), "B2": spec.B2.tolist()},
        "weights": {"Q": spec.Q.tolist(), "R": spec.R.tolist()},
        "graph": {"N": spec.N, "edges": [list(e) for e in spec.graph.sorted_edges()],
                  "pinned": spec.pinning.pinned_nodes},
        "iqc": {"d": spec.d},
        "synthesis": {"method": problem.method, "margin_tol": problem.margin_tol},
    }
    if sim is not None:
        op = sim.coupling
        if isinstance(op, MemorylessGain):
            doc["coupling"] = {"kind": "memoryless", "gain": op.gain.tolist()}
        else:
            doc["coupling"] = {"kind": "lti_filter", "A": op.A.tolist(), "B": op.B.tolist(),
                               "C": op.C.tolist(), "D": op.D.tolist()}
        doc["simulation"] = {"dt": sim.dt, "t_final": sim.t_final, "x0_init": sim.x0_init.tolist(),
                             "agent_init": sim.agent_init.tolist(), "record_stride": sim.record_stride}
    return doc


def spec_hash(doc: dict) -> str:
    """SHA-256 over the parts of a config that a certificate depends on."""
    sim = doc.get("simulation", {})
    relevant = {
        "dynamics": doc["dynamics"],
        "weights": doc["weights"],
        "graph": {**doc["graph"], "edges": sorted(sorted(e) for e in doc["graph"]["edges"]),
                  "pinned": sorted(doc["graph"]["pinned"])},
        "iqc": {"d": float(doc.get("iqc", {}).get("d", 0.0))},
        "initial": {"x0_init": sim.get("x0_init"), "agent_init": sim.get("agent_init")},
    }
    canonical = json.dumps(_floatify(relevant), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _floatify(obj):
    if isinstance(obj, dict):
        return {k: _floatify(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_floatify(v) for v in obj]
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, (int, float)):
        return float(obj)
    return obj


_ARRAY_FIELDS = ("K", "Y", "F", "pis", "thetas", "lambdas", "lmi_margins", "block_margins",
                 "riccati_margins", "closed_loop_abscissa")


def certificate_to_doc(cert: SynthesisCertificate, hash_: str) -> dict:
    body = {}
    for f in fields(cert):
        value = getattr(cert, f.name)
        if f.name in _ARRAY_FIELDS:
            value = np.asarray(value, dtype=float).tolist()
        elif f.name == "diagnostics":
            value = {k: (float(v) if isinstance(v, (int, float, np.floating, np.integer)) else v)
                     for k, v in value.items()}
        elif isinstance(value, (np.floating, np.integer)):
            value = float(value)
        body[f.name] = value
    return {
        "tool": "consensus-forge",
        "version": __version__,
        "spec_hash": hash_,
        "tolerances": {"margin_tol": cert.margin_tol, "pos_tol": POS_TOL,
                       "orth_tol": ORTH_TOL, "sym_tol": SYM_TOL},
        "certificate": body,
    }


def certificate_from_doc(doc: dict) -> tuple[SynthesisCertificate, str]:
    try:
        body = dict(doc["certificate"])
        hash_ = doc["spec_hash"]
        for name in _ARRAY_FIELDS:
            body[name] = np.array(body[name], dtype=float)
        return SynthesisCertificate(**body), hash_
    except (KeyError, TypeError) as exc:
        raise ConfigError("certificate", f"malformed certificate: {exc}") from exc


def write_certificate(path, cert, hash_):
    Path(path).write_text(json.dumps(certificate_to_doc(cert, hash_), indent=2) + "\n")


def read_certificate(path, expected_hash=None):
    cert, hash_ = certificate_from_doc(json.loads(Path(path).read_text()))
    if expected_hash is not None and hash_ != expected_hash:
        raise SpecHashMismatch(f"certificate spec hash {hash_[:12]}... does not match config "
                               f"{expected_hash[:12]}...")
    return cert


def trajectory_header(n, N, m_in):
    cols = ["t"] + [f"x0_{k}" for k in range(1, n + 1)]
    cols += [f"x{i}_{k}" for i in range(1, N + 1) for k in range(1, n + 1)]
    cols += [f"u_{k}" for k in range(1, N * m_in + 1)]
    return cols + ["e_norm", "J_running"]


def write_trajectory_csv(path, result: SimulationResult):
    T, N, n = result.agents.shape
    m = result.controls.shape[2]
    table = np.column_stack([result.t, result.leader, result.agents.reshape(T, N * n),
                             result.controls.reshape(T, N * m), result.error_norm, result.running_cost])
    np.savetxt(path, table, delimiter=",", fmt="%.17g",
               header=",".join(trajectory_header(n, N, m)), comments="")


def write_relative_csv(path, result: SimulationResult, component, label):
    """One column per agent: component ``component`` of ``e_i = x0 - x_i``."""
    E = result.errors[:, :, component]
    header = ["t"] + [f"{label}_{i}" for i in range(1, E.shape[1] + 1)]
    np.savetxt(path, np.column_stack([result.t, E]), delimiter=",", fmt="%.17g",
               header=",".join(header), comments="")


def pendulum_config(k=0.5, m=0.25, length=1.0, a=0.5, g=10.0):
    """Three pendulums on a path graph, node 1 sees the leader."""
    ml2 = m * length**2
    return {
        "dynamics": {
            "n": 2, "m_in": 1,
            "A": [[0.0, 1.0], [-g / length, 0.0]],
            "B1": [[0.0], [-1.0 / ml2]],
            "B2": [[0.0, 0.0], [a**2 / ml2, 0.0]],
        },
        "weights": {"Q": [[1.0, 0.0], [0.0, 1.0]], "R": [[0.1]]},
        "graph": {"N": 3, "edges": [[1, 2], [2, 3]], "pinned": [1]},
        "iqc": {"d": 0.0},
        "coupling": {"kind": "memoryless", "k": k},
        "simulation": {"dt": 1e-3, "t_final": 20.0, "x0_init": [0.1, 0.0],
                       "agent_init": [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]], "record_stride": 1},
        "synthesis": {"method": "th1", "margin_tol": MARGIN_TOL},
    }


DEMOS = {"pendulum": pendulum_config}
