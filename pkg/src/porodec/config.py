"""Run configuration: sectioned ``key = value`` files, presets and overrides.

Values are parsed with :mod:`configparser`.  Load and initial-data entries
are expressions in ``x``, ``y`` and ``t`` evaluated with numpy functions.
"""

from __future__ import annotations

import configparser
import copy
import io

import numpy as np

SECTIONS = ("mesh", "params", "time", "loads", "initial", "beta", "toy", "run")

# key -> type; every key a config may contain
SCHEMA = {
    "mesh": {"n": int, "domain": str, "hole_radius": float, "hole_center_x": float,
             "hole_center_y": float, "pressure_bc": str},
    "params": {"lambda": float, "mu": float, "kappa_over_nu": "floats", "inv_M": float,
               "alpha": "floats", "m": int},
    "time": {"T": float, "tau": float, "scheme": str, "capture_every": int},
    "loads": {"f_x": str, "f_y": str, "g": str, **{f"g{i}": str for i in range(1, 10)}},
    "initial": {"p0": str, **{f"p{i}": str for i in range(1, 10)}},
    "beta": {f"b_{i}_{j}": float for i in range(1, 10) for j in range(1, 10)},
    "toy": {"omega": float, "p0": float},
    "run": {"model": str},
}

_BUMP = ("where((x-0.75)**2 + (y-0.75)**2 <= 1/256, "
         "13300 - 3238400*((x-0.75)**2 + (y-0.75)**2), 650)")

PRESETS = {
    "poro-5.1": {
        "run": {"model": "two-field"},
        "mesh": {"n": "16", "domain": "square", "pressure_bc": "dirichlet"},
        "params": {"lambda": "1.2e10", "mu": "6.0e9", "kappa_over_nu": "6.33e2",
                   "inv_M": "7.8e3", "alpha": "0.79"},
        "time": {"T": "10", "tau": "0.0625", "scheme": "semi-explicit"},
        "loads": {"f_x": "0", "f_y": "0", "g": "10*exp(t)"},
        "initial": {"p0": "3000*x*(1-x)*y*(1-y)"},
    },
    "network-5.2": {
        "run": {"model": "network"},
        "mesh": {"n": "16", "domain": "punched", "hole_radius": "0.25",
                 "hole_center_x": "0.5", "hole_center_y": "0.5"},
        "params": {"lambda": "7786.42", "mu": "3337.037",
                   "kappa_over_nu": "3.75e-4, 3.75e-4, 1.57e-5, 3.75e-5",
                   "inv_M": "4.5e-2", "alpha": "0.99, 0.99, 0.99, 0.99", "m": "4"},
        "time": {"T": "10", "tau": "0.0625", "scheme": "semi-explicit"},
        "loads": {"f_x": "0", "f_y": "0", "g": "0"},
        "initial": {"p1": _BUMP, "p2": "650", "p3": "1000", "p4": "650"},
        "beta": {"b_1_2": "1.5e-19", "b_2_4": "1.5e-19", "b_2_3": "2e-19", "b_3_4": "1e-13"},
    },
    "toy-5.3": {
        "run": {"model": "toy"},
        "toy": {"omega": "0.1", "p0": "1"},
        "time": {"T": "1", "tau": "0.01", "scheme": "semi-explicit"},
    },
}
# desk-scale variants used by the convergence studies
PRESETS["poro-5.1-desk"] = copy.deepcopy(PRESETS["poro-5.1"])
PRESETS["poro-5.1-desk"]["time"].update({"T": "1"})
PRESETS["network-conv"] = {
    "run": {"model": "network"},
    "mesh": {"n": "8", "domain": "square"},
    "params": {"lambda": "7786.42", "mu": "3337.037", "kappa_over_nu": "3.75e-4, 1.57e-5",
               "inv_M": "4.5e-2", "alpha": "0.99, 0.99", "m": "2"},
    "time": {"T": "1", "tau": "0.125", "scheme": "semi-explicit"},
    "loads": {"f_x": "0", "f_y": "0", "g": "0"},
    "initial": {"p1": "650 + 1000*cos(pi*x)*cos(pi*y)", "p2": "1000 + 300*cos(pi*x)"},
    "beta": {"b_1_2": "1e-13", "b_2_1": "1e-13"},
}


class ConfigError(ValueError):
    pass


_NAMESPACE = {name: getattr(np, name) for name in (
    "exp", "sin", "cos", "tan", "sinh", "cosh", "tanh", "sqrt", "log", "abs", "where",
    "minimum", "maximum", "pi", "e", "arctan2", "heaviside")}


class Expression:
    """A numpy expression in ``x``, ``y``, ``t``."""

    def __init__(self, source):
        self.source = str(source).strip()
        try:
            self._code = compile(self.source, "<expression>", "eval")
        except SyntaxError as exc:
            raise ConfigError(f"invalid expression {self.source!r}: {exc.msg}") from None
        unknown = set(self._code.co_names) - set(_NAMESPACE) - {"x", "y", "t"}
        if unknown:
            raise ConfigError(f"expression {self.source!r} uses unknown names {sorted(unknown)}")
        self.names = set(self._code.co_names)

    def depends_on(self, var):
        return var in self.names

    @property
    def spatial(self):
        return self.depends_on("x") or self.depends_on("y")

    def __call__(self, x=0.0, y=0.0, t=0.0):
        env = dict(_NAMESPACE, x=x, y=y, t=t)
        val = eval(self._code, {"__builtins__": {}}, env)  # noqa: S307 - restricted namespace
        return np.broadcast_to(np.asarray(val, dtype=float), np.broadcast(x, y).shape)

    def __repr__(self):
        return f"Expression({self.source!r})"


class RunConfig:
    """Parsed configuration: ``sections -> key -> raw string``."""

    def __init__(self, data=None, source="<empty>"):
        self.data = {s: dict(v) for s, v in (data or {}).items()}
        self.source = source
        self.validate()

    @classmethod
    def from_preset(cls, name):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
        return cls(copy.deepcopy(PRESETS[name]), source=f"preset:{name}")

    @classmethod
    def from_text(cls, text, source="<text>"):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {source}: {exc}") from None
        return cls({s: dict(parser[s]) for s in parser.sections()}, source=source)

    @classmethod
    def from_file(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), source=str(path))

    def validate(self):
        errors = []
        for section, entries in self.data.items():
            if section not in SCHEMA:
                errors.append(f"unknown section [{section}]")
                continue
            for key, raw in entries.items():
                if key not in SCHEMA[section]:
                    errors.append(f"unknown key {section}.{key}")
                    continue
                try:
                    self._convert(section, key, raw)
                except (TypeError, ValueError) as exc:
                    errors.append(f"{section}.{key}: {exc}")
        if errors:
            raise ConfigError("invalid configuration: " + "; ".join(errors))

    @staticmethod
    def _convert(section, key, raw):
        kind = SCHEMA[section][key]
        if kind == "floats":
            return tuple(float(v) for v in str(raw).split(","))
        if section in ("loads", "initial"):
            return Expression(raw)
        return kind(raw)

    def with_overrides(self, overrides):
        """Apply ``section.key=value`` strings (later ones win)."""
        data = copy.deepcopy(self.data)
        for item in overrides or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            data.setdefault(section, {})[key.strip()] = value.strip()
        return RunConfig(data, source=self.source)

    def has(self, section, key):
        return key in self.data.get(section, {})

    def get(self, section, key, default=None):
        if not self.has(section, key):
            return default
        return self._convert(section, key, self.data[section][key])

    def raw(self, section, key, default=None):
        return self.data.get(section, {}).get(key, default)

    def to_text(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section in SECTIONS:
            if section in self.data:
                parser[section] = self.data[section]
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()
