"""Flat key = value experiment configuration.

A config file holds one section per experiment; keys are typed, range
checked against the module preconditions, and unknown keys are rejected.
Parse failures surface with file line numbers. Override mappings (from CLI
flags) replace file values before checking.
"""

import configparser
import os

from .errors import ConfigError


class Param:
    """One typed key: kind in {float, int, str, floats, ints}, optional
    range check, default None means the key is required."""

    def __init__(self, kind, default, check=None, choices=None):
        self.kind = kind
        self.default = default
        self.check = check
        self.choices = choices

    def convert(self, name, raw):
        try:
            if self.kind == "float":
                value = float(raw)
            elif self.kind == "int":
                value = int(str(raw).strip())
            elif self.kind == "floats":
                value = _split_list(raw, float)
            elif self.kind == "ints":
                value = _split_list(raw, int)
            else:
                value = str(raw).strip()
        except ValueError:
            raise ConfigError(
                f"key {name!r}: cannot parse {raw!r} as {self.kind}"
            ) from None
        if self.choices is not None and value not in self.choices:
            raise ConfigError(
                f"key {name!r} must be one of {sorted(self.choices)}, "
                f"got {value!r}"
            )
        if self.check is not None:
            self.check(name, value)
        return value


def _split_list(raw, cast):
    if isinstance(raw, (list, tuple)):
        return [cast(v) for v in raw]
    parts = [p for p in str(raw).replace(",", " ").split() if p]
    if not parts:
        return []
    return [cast(p) for p in parts]


def _unit_interval(name, value):
    values = value if isinstance(value, list) else [value]
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {v}")


def _nonnegative(name, value):
    values = value if isinstance(value, list) else [value]
    for v in values:
        if v < 0:
            raise ConfigError(f"{name} must be >= 0, got {v}")


def _positive(name, value):
    values = value if isinstance(value, list) else [value]
    for v in values:
        if v <= 0:
            raise ConfigError(f"{name} must be > 0, got {v}")


def _filling_string(name, value):
    if not value or any(c not in "01" for c in value):
        raise ConfigError(
            f"{name} must be a nonempty string of 0/1 characters, got {value!r}"
        )


def _run_params(T, n_traj, record_stride):
    return {
        "dt": Param("float", 0.005, _positive),
        "T": Param("float", T, _positive),
        "n_traj": Param("int", n_traj, _positive),
        "master_seed": Param("int", 1, _nonnegative),
        "record_stride": Param("int", record_stride, _positive),
        "threads": Param("int", 0, _nonnegative),
        "output_dir": Param("str", ""),
    }


def _deterministic_params(T, record_stride):
    return {
        "dt": Param("float", 0.005, _positive),
        "T": Param("float", T, _positive),
        "record_stride": Param("int", record_stride, _positive),
        "output_dir": Param("str", ""),
    }


SCHEMAS = {
    "atom-purity": {
        "J": Param("float", 1.0, _positive),
        "gamma": Param("float", 0.5, _nonnegative),
        "etas": Param("floats", [0.0, 0.4, 0.8, 1.0], _unit_interval),
        **_deterministic_params(T=10.0, record_stride=5),
    },
    "atom-method-compare": {
        "J": Param("float", 1.0, _positive),
        "gamma": Param("float", 0.5, _nonnegative),
        "eta": Param("float", 0.2, _unit_interval),
        "qt1_n_traj": Param("int", 2000, _positive),
        **_run_params(T=10.0, n_traj=10000, record_stride=20),
    },
    "trivial-chain": {
        "L": Param("int", 4, _positive),
        "J": Param("float", 1.0, _positive),
        "gamma": Param("float", 0.3, _nonnegative),
        "eta": Param("float", 0.5, _unit_interval),
        "boundary": Param("str", "periodic", choices={"periodic", "open"}),
        "filling": Param("str", "1010", _filling_string),
        **_deterministic_params(T=10.0, record_stride=50),
    },
    "skin-steady-state": {
        "L": Param("int", 50, _positive),
        "J": Param("float", 1.0, _positive),
        "gamma": Param("float", 0.4, _nonnegative),
        "eta": Param("float", 0.6, _unit_interval),
        "method": Param("str", "QT2", choices={"QT1", "QT2"}),
        "window_start": Param("float", -1.0),
        "window_end": Param("float", -1.0),
        **_run_params(T=300.0, n_traj=60, record_stride=200),
    },
    "beta-scan": {
        "L": Param("int", 30, _positive),
        "J": Param("float", 1.0, _positive),
        "gammas": Param("floats", [0.2, 0.4, 0.6, 0.8], _positive),
        "eta": Param("float", 0.6, _unit_interval),
        "window_start": Param("float", -1.0),
        "window_end": Param("float", -1.0),
        **_run_params(T=300.0, n_traj=60, record_stride=200),
    },
    "entropy-scan": {
        "L": Param("int", 30, _positive),
        "J": Param("float", 1.0, _positive),
        "gammas": Param("floats", [0.4], _nonnegative),
        "etas": Param("floats", [0.6], _unit_interval),
        "deltas": Param("ints", [], _positive),
        "window_start": Param("float", -1.0),
        "window_end": Param("float", -1.0),
        **_run_params(T=300.0, n_traj=60, record_stride=200),
    },
}

EXPERIMENT_NAMES = tuple(SCHEMAS)


def effective_params(experiment, raw=None, overrides=None):
    """Typed parameter dict for one experiment.

    `raw` and `overrides` map key -> string (or already-typed value);
    overrides win. Unknown keys and range violations raise ConfigError.
    """
    if experiment not in SCHEMAS:
        raise ConfigError(
            f"unknown experiment {experiment!r}; expected one of "
            f"{', '.join(EXPERIMENT_NAMES)}"
        )
    schema = SCHEMAS[experiment]
    merged = dict(raw or {})
    merged.update(overrides or {})
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise ConfigError(
            f"unknown key(s) for {experiment}: {', '.join(unknown)}; "
            f"valid keys: {', '.join(sorted(schema))}"
        )
    params = {}
    for name, param in schema.items():
        if name in merged:
            params[name] = param.convert(name, merged[name])
        elif param.default is None:
            raise ConfigError(f"{experiment} requires key {name!r}")
        else:
            params[name] = param.default
    return params


def read_config_file(path):
    """All sections of a flat key = value file, as raw string dicts."""
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#", ";")
    )
    # keep key case: L and dt are distinct parameters, not INI options
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh, source=str(path))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}: expected an [experiment] section header"
        ) from None
    except configparser.ParsingError as exc:
        lines = ", ".join(str(lineno) for lineno, _ in exc.errors)
        raise ConfigError(
            f"{path}: cannot parse line(s) {lines}: key = value expected"
        ) from None
    sections = {}
    for name in parser.sections():
        if name not in SCHEMAS:
            raise ConfigError(
                f"{path}: unknown experiment section [{name}]; expected one "
                f"of {', '.join(EXPERIMENT_NAMES)}"
            )
        sections[name] = dict(parser.items(name))
    if not sections:
        raise ConfigError(
            f"{path}: config defines no experiment section; add one of "
            f"[{'] ['.join(EXPERIMENT_NAMES)}]"
        )
    return sections


def load_config(path, experiment, overrides=None):
    """Effective params for `experiment`, from file section + overrides.

    A file without a section for the experiment contributes defaults only.
    """
    raw = {}
    if path is not None:
        sections = read_config_file(path)
        raw = sections.get(experiment, {})
    return effective_params(experiment, raw, overrides)


def parse_overrides(pairs):
    """key=value strings (from repeated CLI flags) into a raw dict."""
    out = {}
    for pair in pairs or []:
        key, sep, value = str(pair).partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        out[key.strip()] = value.strip()
    return out


def resolve_output_dir(experiment, params, cli_output=None):
    """Precedence: --output flag, config output_dir, $JUMPLOSS_OUTPUT_ROOT,
    then ./runs/<experiment>."""
    if cli_output:
        return str(cli_output)
    if params.get("output_dir"):
        return params["output_dir"]
    root = os.environ.get("JUMPLOSS_OUTPUT_ROOT")
    if root:
        return os.path.join(root, experiment)
    return os.path.join("runs", experiment)


def resolve_threads(params):
    n = int(params.get("threads", 0))
    return n if n >= 1 else (os.cpu_count() or 1)


def format_params(experiment, params):
    """Effective parameter set, one key = value per line."""
    lines = [f"[{experiment}]"]
    for name in sorted(params):
        value = params[name]
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines)


def validate_file(path, experiment=None):
    """Parse and range-check without running; returns the effective
    parameter report for every section (or just `experiment`)."""
    sections = read_config_file(path)
    if experiment is not None:
        if experiment not in sections:
            raise ConfigError(
                f"{path}: no [{experiment}] section; found "
                f"[{'] ['.join(sections)}]"
            )
        sections = {experiment: sections[experiment]}
    reports = []
    for name, raw in sections.items():
        params = effective_params(name, raw)
        reports.append(format_params(name, params))
    return "\n\n".join(reports)
