"""Pipeline configuration: a line-based ``key = value`` file with ``[sections]``.

Example::

    bits = 4
    seed = 0

    [psot]
    temperature = 2.0

    asot.gamma = 30        # dotted keys work outside sections too

Comments start with ``#``. Booleans are ``true``/``false``; ``none`` clears an
optional value; lists are comma separated; threshold grids may be written
``start:stop:step``. Unknown keys and bad values raise ``ConfigError`` with the
offending line number. Overrides given as ``{"section.key": "text"}`` are
applied after the file.
"""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import SyntheticSpec
from .asot import AsotConfig
from .errors import ConfigError
from .lac import LacConfig
from .psot import PsotConfig

STAGES = ("baseline", "hadamard", "psot", "psot+lac")


@dataclass(frozen=True)
class BlockConfig:
    out_dim: int = 32
    nonlinearity: str = "identity"
    weight_bits: int | None = None

    def __post_init__(self):
        if self.out_dim < 1:
            raise ConfigError("block out_dim must be positive")
        if self.nonlinearity not in ("identity", "gelu"):
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.weight_bits is not None and not 2 <= self.weight_bits <= 16:
            raise ConfigError("weight_bits must lie in [2, 16]")


@dataclass(frozen=True)
class PipelineConfig:
    inputs: tuple = ()
    synthetic: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(
        dim=64, n_tokens=20, outlier_rate=0.01, outlier_gain=20.0))
    samples: int = 32
    bits: int = 4
    eval_fraction: float = 0.2
    stages: tuple = STAGES
    use_asot: bool = True
    psot: PsotConfig = field(default_factory=PsotConfig)
    asot: AsotConfig = field(default_factory=AsotConfig)
    lac: LacConfig = field(default_factory=LacConfig)
    block: BlockConfig = field(default_factory=BlockConfig)
    output: str = "run"
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ConfigError(f"bits must lie in [2, 16], got {self.bits}")
        if self.samples < 1:
            raise ConfigError("samples must be positive")
        if not 0 < self.eval_fraction < 1:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; expected a subset of {STAGES}")
        if "baseline" not in self.stages:
            raise ConfigError("the baseline stage cannot be disabled")
        if "psot+lac" in self.stages and "psot" not in self.stages:
            raise ConfigError("stage psot+lac requires psot")
        self.synthetic.validate()


# -- value parsers -------------------------------------------------------------

def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _optional(parse):
    def inner(text):
        return None if text.lower() == "none" else parse(text)
    return inner


def _strings(text):
    return tuple(part.strip() for part in text.split(",") if part.strip())


def parse_grid(text):
    """``"2:8:0.25"`` (inclusive stop) or a comma-separated list of numbers."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid range must be start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if not step > 0:
            raise ValueError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(v) for v in np.round(start + step * np.arange(n), 10))
    return tuple(float(v) for v in _strings(text))


_PARSERS = {
    "": {"inputs": _strings, "samples": int, "bits": int, "eval_fraction": float,
         "stages": _strings, "use_asot": _bool, "output": str, "seed": int},
    "synthetic": {"family": str, "dim": int, "n_tokens": int, "scale": float,
                  "outlier_rate": float, "outlier_gain": float, "outlier_mode": str},
    "psot": {"temperature": float, "learning_rate": float, "epochs": int, "batch_size": int,
             "lr_schedule": str, "blocks": int, "init": str, "momentum": float,
             "max_step": _optional(float), "fd_check": _bool},
    "asot": {"grid": parse_grid, "delta": float, "tau": float, "gamma": float, "m": int,
             "outliers_only": _bool, "difference": str},
    "lac": {"grid": int, "tol": float, "sweeps": int},
    "block": {"out_dim": int, "nonlinearity": str, "weight_bits": _optional(int)},
}


def _strip(line):
    # '#' inside a quoted value is kept
    out, quote = [], None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def _unquote(text):
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    return text


def _assign(values, key, text, line):
    section, _, name = key.rpartition(".")
    if section not in _PARSERS or name not in _PARSERS[section]:
        raise ConfigError(f"unknown key {key!r}", line=line)
    try:
        value = _PARSERS[section][name](_unquote(text))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", line=line) from None
    trial = dict(values)
    trial[(section, name)] = value
    try:
        _build(trial)
    except ConfigError as exc:
        raise ConfigError(f"{key} = {text}: {exc}", line=line) from None
    except TypeError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}", line=line) from None
    values[(section, name)] = value


def _build(values):
    def sub(section):
        return {name: v for (sec, name), v in values.items() if sec == section}

    base = PipelineConfig()
    kwargs = sub("")
    kwargs["synthetic"] = dataclasses.replace(base.synthetic, **sub("synthetic"))
    kwargs["psot"] = dataclasses.replace(base.psot, **sub("psot"))
    kwargs["asot"] = dataclasses.replace(base.asot, **sub("asot"))
    kwargs["lac"] = dataclasses.replace(base.lac, **sub("lac"))
    kwargs["block"] = dataclasses.replace(base.block, **sub("block"))
    cfg = PipelineConfig(**kwargs)
    # one run seed drives both the generator and the trainer
    return dataclasses.replace(cfg, psot=dataclasses.replace(cfg.psot, seed=cfg.seed),
                               synthetic=dataclasses.replace(cfg.synthetic, seed=cfg.seed))


def parse_config_text(text, overrides=None):
    values = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", line=lineno)
            section = line[1:-1].strip()
            if section not in _PARSERS or not section:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        key, eq, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not eq or not key:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        if not value:
            raise ConfigError(f"missing value for {key!r}", line=lineno)
        full = f"{section}.{key}" if section and "." not in key else key
        _assign(values, full, value, lineno)
    for key, value in (overrides or {}).items():
        _assign(values, key, str(value), None)
    return _build(values)


def parse_config(path=None, overrides=None):
    """Read a config file (or none) and apply flag overrides on top."""
    text = "" if path is None else Path(path).read_text(encoding="utf-8")
    return parse_config_text(text, overrides)
