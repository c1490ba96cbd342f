"""Run configuration: JSON schema, validation and model construction.

Example::

    {
      "schema_version": 1,
      "mode": "exchange",
      "model": {"type": "heisenberg", "J": 1.0, "omega": 1.0, "beta": 1.0,
                "beta_r": 0.5, "tau": 3.141592653589793},
      "grid": {"min": 0.0, "max": 3.141592653589793, "points": 65},
      "propagator": {"slices": 2048, "target_error": 1e-9, "max_slices": 1048576},
      "outputs": {"csv": "exchange.csv", "json": null},
      "flags": []
    }

Custom models give every operator as a Pauli expression. Any ``{...}``
group inside an expression or affinity string is evaluated as arithmetic in
``theta`` (with ``pi``, ``sin``, ``cos``, ``tan``, ``sqrt``, ``exp``, ``log``)
at each grid point.
"""

from __future__ import annotations

import ast
import json
import math
import operator
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dynamics import DrivenTerm, PropagatorConfig, Protocol
from .heisenberg import FLAGS, HeisenbergParams
from .linalg import HermitianOperator
from .pauli import expr_to_matrix, parse_pauli_expr
from .trajectories import JointSetup, build_joint_setup

SCHEMA_VERSION = 1
MODES = ("exchange", "work", "custom")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# theta placeholders

_FUNCS = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "sqrt": math.sqrt,
    "exp": math.exp,
    "log": math.log,
    "abs": abs,
}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def eval_arithmetic(text: str, theta: float) -> float:
    """Evaluate a small arithmetic expression in ``theta`` without ``eval``."""
    names = {"theta": theta, "pi": math.pi}

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id in names:
            return names[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            return _UNOPS[type(node.op)](ev(node.operand))
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and node.func.id in _FUNCS
            and len(node.args) == 1
            and not node.keywords
        ):
            return float(_FUNCS[node.func.id](ev(node.args[0])))
        raise ConfigError(f"unsupported syntax in arithmetic {text!r}")

    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse arithmetic {text!r}: {exc.msg}") from None
    return float(ev(tree))


_PLACEHOLDER = re.compile(r"\{([^{}]*)\}")


def substitute(text: str, theta: float) -> str:
    out = _PLACEHOLDER.sub(lambda m: repr(eval_arithmetic(m.group(1), theta)), text)
    # fold sign pairs left by negative substitutions
    out = re.sub(r"\+\s*-", "- ", out)
    return re.sub(r"-\s*-", "+ ", out)


def _number(value, theta: float) -> float:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        s = value.strip()
        if s.startswith("{") and s.endswith("}"):
            s = s[1:-1]
        return eval_arithmetic(s, theta)
    raise ConfigError(f"expected a number or arithmetic string, got {value!r}")


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class GridSpec:
    min: float = 0.0
    max: float = math.pi
    points: int = 65

    def values(self) -> list[float]:
        if self.points == 1:
            return [self.min]
        return [float(x) for x in np.linspace(self.min, self.max, self.points)]


@dataclass(frozen=True)
class HeisenbergModel:
    J: float = 1.0
    omega: float = 1.0
    beta: float = 1.0
    beta_r: float = 0.5
    tau: float = math.pi
    g0: float = 10.0
    g_tau: float = 0.1

    def params(self, propagator: PropagatorConfig) -> HeisenbergParams:
        return HeisenbergParams(
            J=self.J,
            omega=self.omega,
            beta=self.beta,
            beta_r=self.beta_r,
            tau=self.tau,
            g0=self.g0,
            g_tau=self.g_tau,
            slices=propagator.slices,
            target_error=propagator.target_error,
        )


@dataclass(frozen=True)
class CustomDrive:
    """Linear interpolation from the static operators to these endpoint values."""

    system_hamiltonian_final: str | None = None
    system_charges_final: tuple[str, ...] | None = None


@dataclass(frozen=True)
class CustomModel:
    system_sites: int
    reservoir_sites: int
    system_charges: tuple[str, ...]
    reservoir_charges: tuple[str, ...]
    affinities: tuple
    reservoir_affinities: tuple
    system_hamiltonian: str
    reservoir_hamiltonian: str
    interaction: str
    duration: float
    charge_names: tuple[str, ...] = ()
    drive: CustomDrive | None = None

    @property
    def driven(self) -> bool:
        return self.drive is not None

    def _op(self, text: str, sites: int, theta: float, what: str) -> HermitianOperator:
        from .pauli import PauliParseError

        try:
            return expr_to_matrix(parse_pauli_expr(substitute(text, theta), sites))
        except PauliParseError as exc:
            raise ConfigError(f"{what}: {exc}") from None

    def build(self, theta: float, propagator: PropagatorConfig) -> JointSetup:
        ns, nr = self.system_sites, self.reservoir_sites
        A0 = [self._op(a, ns, theta, f"system charge {k}") for k, a in enumerate(self.system_charges)]
        AR = [self._op(a, nr, theta, f"reservoir charge {k}") for k, a in enumerate(self.reservoir_charges)]
        H = self._op(self.system_hamiltonian, ns, theta, "system_hamiltonian")
        HR = self._op(self.reservoir_hamiltonian, nr, theta, "reservoir_hamiltonian")
        V = self._op(self.interaction, ns + nr, theta, "interaction")
        tau = float(self.duration)
        drive, charge_drive = (), ()
        if self.drive is not None:
            ramp = lambda t: np.asarray(t, dtype=float) / tau  # noqa: E731
            if self.drive.system_hamiltonian_final is not None:
                H1 = self._op(self.drive.system_hamiltonian_final, ns, theta, "drive hamiltonian")
                drive = (DrivenTerm(HermitianOperator(H1.matrix - H.matrix, "dH"), ramp),)
            if self.drive.system_charges_final is not None:
                if len(self.drive.system_charges_final) != len(A0):
                    raise ConfigError("drive.system_charges_final must list every charge")
                finals = [
                    self._op(a, ns, theta, f"drive charge {k}")
                    for k, a in enumerate(self.drive.system_charges_final)
                ]
                charge_drive = tuple(
                    (k, DrivenTerm(HermitianOperator(a1.matrix - a0.matrix, f"dA{k}"), ramp))
                    for k, (a0, a1) in enumerate(zip(A0, finals))
                    if np.any(a1.matrix != a0.matrix)
                )
        protocol = Protocol(tau, H, HR, V, tuple(A0), tuple(AR), drive, charge_drive)
        lam = [_number(x, theta) for x in self.affinities]
        lam_r = [_number(x, theta) for x in self.reservoir_affinities]
        if len(lam) != len(A0) or len(lam_r) != len(AR):
            raise ConfigError("affinity arrays must match the number of charges")
        return build_joint_setup(protocol, lam, lam_r, cfg=propagator, charge_names=self.charge_names)


@dataclass(frozen=True)
class Outputs:
    csv: str | None = None
    json: str | None = None


@dataclass(frozen=True)
class RunConfig:
    mode: str = "exchange"
    model: HeisenbergModel | CustomModel = field(default_factory=HeisenbergModel)
    grid: GridSpec = field(default_factory=GridSpec)
    propagator: PropagatorConfig = field(default_factory=PropagatorConfig)
    outputs: Outputs = field(default_factory=Outputs)
    flags: tuple[str, ...] = ()
    schema_version: int = SCHEMA_VERSION

    @property
    def evaluation_mode(self) -> str:
        """exchange or work; custom models are evaluated as work iff driven."""
        if self.mode == "custom":
            return "work" if isinstance(self.model, CustomModel) and self.model.driven else "exchange"
        return self.mode

    def build_setup(self, theta: float) -> JointSetup:
        from .heisenberg import build_driven_model, build_exchange_model

        if isinstance(self.model, CustomModel):
            return self.model.build(theta, self.propagator)
        p = self.model.params(self.propagator)
        from dataclasses import replace

        p = replace(p, theta=float(theta))
        return build_driven_model(p) if self.mode == "work" else build_exchange_model(p)

    def to_dict(self) -> dict:
        if isinstance(self.model, CustomModel):
            model = {"type": "custom", **_lists(asdict(self.model))}
        else:
            model = {"type": "heisenberg", **asdict(self.model)}
        return {
            "schema_version": self.schema_version,
            "mode": self.mode,
            "model": model,
            "grid": asdict(self.grid),
            "propagator": asdict(self.propagator),
            "outputs": asdict(self.outputs),
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def _take(cls, data: dict, where: str, convert=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    kwargs = {k: (convert(k, v) if convert else v) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _real(where):
    def conv(k, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}.{k} must be a number")
        return v

    return conv


def _custom(data: dict) -> CustomModel:
    def conv(k, v):
        if k in ("system_charges", "reservoir_charges", "affinities", "reservoir_affinities", "charge_names"):
            if not isinstance(v, list):
                raise ConfigError(f"model.{k} must be a list")
            return tuple(v)
        if k == "drive":
            if v is None:
                return None
            return _take(
                CustomDrive,
                v,
                "model.drive",
                lambda kk, vv: tuple(vv) if isinstance(vv, list) else vv,
            )
        return v

    return _take(CustomModel, data, "model", conv)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    mode = data.get("mode", "exchange")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    unknown = set(data) - {"schema_version", "mode", "model", "grid", "propagator", "outputs", "flags"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")

    model_data = dict(data.get("model", {"type": "heisenberg"}))
    kind = model_data.pop("type", "heisenberg")
    if kind == "heisenberg":
        model = _take(HeisenbergModel, model_data, "model", _real("model"))
        if mode == "custom":
            raise ConfigError("mode 'custom' needs a custom model")
    elif kind == "custom":
        model = _custom(model_data)
        if mode != "custom":
            raise ConfigError("custom models need mode 'custom'")
    else:
        raise ConfigError(f"unknown model type {kind!r}")

    grid = _take(GridSpec, data.get("grid", {}), "grid")
    if grid.points < 1:
        raise ConfigError("grid.points must be >= 1")
    prop = _take(PropagatorConfig, data.get("propagator", {}), "propagator")
    outputs = _take(Outputs, data.get("outputs", {}), "outputs")
    flags = data.get("flags", [])
    if not isinstance(flags, list) or any(f not in FLAGS for f in flags):
        raise ConfigError(f"flags must be a list drawn from {FLAGS}")
    cfg = RunConfig(mode, model, grid, prop, outputs, tuple(flags), version)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Check that every expression parses and dimensions agree (at grid.min)."""
    if not isinstance(cfg.model, CustomModel):
        try:
            cfg.model.params(cfg.propagator)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
        return
    m = cfg.model
    if m.system_sites < 1 or m.reservoir_sites < 1:
        raise ConfigError("site counts must be positive")
    if len(m.system_charges) != len(m.reservoir_charges) or not m.system_charges:
        raise ConfigError("system and reservoir charge lists must be nonempty and equal in length")
    if m.charge_names and len(m.charge_names) != len(m.system_charges):
        raise ConfigError("charge_names must name every charge")
    theta = cfg.grid.min
    try:
        for text, sites in (
            *((a, m.system_sites) for a in m.system_charges),
            *((a, m.reservoir_sites) for a in m.reservoir_charges),
            (m.system_hamiltonian, m.system_sites),
            (m.reservoir_hamiltonian, m.reservoir_sites),
            (m.interaction, m.system_sites + m.reservoir_sites),
        ):
            m._op(text, sites, theta, "expression")
        for x in (*m.affinities, *m.reservoir_affinities):
            _number(x, theta)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(data)
