"""Experiment configuration

A configuration file holds one ``key = value`` pair per line; ``#``
starts a comment and lists are comma-separated. Valid keys and their
defaults are defined in :data:`CONFIG_DEF`.
"""
import collections
import hashlib
import pathlib
import warnings

import numpy as np

from .dram import DramGeometry
from .leak import AttackConfig, CostModel, Strategy
from .subtrain import PgdConfig, TrainConfig


#: marks a key without default value
REQUIRED = None

#: valid configuration keys: (description, type, default)
CONFIG_DEF = {
    "seed": ("master seed of all stages", "int", 0),
    "output directory": ("directory for all stage outputs", "str",
                         "bitleak_out"),
    # memory system
    "rows total": ("number of physical DRAM rows", "int", 16384),
    "pages per row": ("pages sharing one DRAM row", "int", 2),
    "page size": ("page size [bytes]", "int", 4096),
    "frac vuln pages": ("probability that a page holds vulnerable cells",
                        "float", 0.71),
    "cells per vuln page": ("mean vulnerable cells per vulnerable page",
                            "float", 7.85),
    "miss prob": ("probability that an eligible flip does not happen",
                  "float", 0.0),
    "pageset capacity": ("per-cpu pageset capacity [pages]", "int", 512),
    "non secret between": ("non-secret victim pages per weight page",
                           "int", 1),
    # victim
    "victim dims": ("victim layer dimensions (input, hidden..., classes)",
                    "intlist", REQUIRED),
    "chunk rows": ("rows of a packing chunk", "int", 512),
    "chunk cols": ("columns of a packing chunk", "int", 8),
    "victim epochs": ("training epochs of the victim", "int", 60),
    "victim lr": ("learning rate of the victim", "float", 0.05),
    # task
    "train samples": ("samples in the victim training split", "int", 4000),
    "test samples": ("samples in the test split", "int", 2000),
    "subset fraction": ("fraction of the training split known to the "
                        "attacker", "float", 0.08),
    "blobs per class": ("Gaussian blobs per class", "int", 4),
    "cluster std": ("standard deviation of the blobs", "float", 6.0),
    # attack
    "rounds": ("round budgets of the leakage attack", "intlist", [100, 400]),
    "strategy": ("attack strategies ('msb' and/or 'allbits')", "strlist",
                 ["msb", "allbits"]),
    "msb only": ("train MSB-priority arms with the MSB only", "bool", False),
    "t exhaust": ("memory exhaustion time per round [s]", "float", 12.0),
    "t release": ("page release time per round [s]", "float", 21.0),
    "t inference": ("victim inference time per round [s]", "float", 1.0),
    "t row msb": ("hammering time per row, MSB priority [s]", "float",
                  239 / 11000),
    "t row allbits": ("hammering time per row, all bits [s]", "float",
                      375 / 17000),
    # substitute training
    "lambda": ("mean clustering penalty strength", "float", 0.01),
    "lr": ("learning rate", "float", 0.05),
    "momentum": ("SGD momentum", "float", 0.9),
    "epochs": ("training epochs", "int", 120),
    "finetune epochs": ("final epochs without penalty and clipping", "int",
                        40),
    "batch size": ("mini-batch size", "int", 32),
    # evaluation
    "pgd epsilon": ("L-infinity radius of PGD", "float", 0.031),
    "pgd steps": ("PGD iterations", "int", 7),
    "pgd step size": ("PGD step size (default 2 eps / steps)", "float",
                      REQUIRED),
}

#: keys that may stay unset
OPTIONAL_KEYS = ["pgd step size"]

#: valid configuration keys
CONFIG_KEYS = sorted(CONFIG_DEF.keys())

#: stage identifiers for sub-seed derivation
STAGE_IDS = {"template": 1,
             "task": 2,
             "victim": 3,
             "attack": 4,
             "subset": 5,
             "train": 6,
             }


class ConfigMissingError(BaseException):
    """Raised when a required configuration key is not set"""
    pass


class ConfigValidationError(BaseException):
    """Raised when a configuration is invalid

    The line-numbered messages are available in :attr:`errors`.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        super(ConfigValidationError, self).__init__(
            "Invalid configuration:\n" + "\n".join(self.errors))


class ConfigDict(collections.UserDict):
    """Configuration values restricted to :const:`CONFIG_KEYS`"""
    valid_keys = CONFIG_KEYS

    def __init__(self, *args, **kwargs):
        super(ConfigDict, self).__init__(*args, **kwargs)
        for key in self:
            if key not in self.valid_keys:
                raise KeyError("Unknown config key: '{}'".format(key))

    def __setitem__(self, key, value):
        if key not in self.valid_keys:
            raise KeyError("Unknown config key: '{}'".format(key))
        super(ConfigDict, self).__setitem__(key, value)

    def __getitem__(self, key):
        if key not in self and key in self.valid_keys:
            raise ConfigMissingError(
                "No value was set for the required key '{}'!".format(key))
        elif key not in self:
            raise KeyError("Unknown config key: '{}'!".format(key))
        return super(ConfigDict, self).__getitem__(key)


def _convert(text, kind):
    text = text.strip()
    if kind == "int":
        return int(text)
    elif kind == "float":
        return float(text)
    elif kind == "bool":
        low = text.lower()
        if low in ["true", "yes", "1"]:
            return True
        elif low in ["false", "no", "0"]:
            return False
        raise ValueError("expected a boolean, got '{}'".format(text))
    elif kind == "str":
        return text
    elif kind == "intlist":
        return [int(s) for s in text.split(",") if s.strip()]
    elif kind == "strlist":
        return [s.strip() for s in text.split(",") if s.strip()]
    raise ValueError("unknown type '{}'".format(kind))


def _format(value, kind):
    if kind in ["intlist", "strlist"]:
        return ", ".join(str(v) for v in value)
    elif kind == "float":
        return repr(float(value))
    return str(value)


class ExperimentConfig(ConfigDict):
    def __repr__(self):
        return "ExperimentConfig(seed={}, hash={})".format(
            self.get("seed"), self.hash())

    @property
    def strategies(self):
        return [Strategy(s) for s in self["strategy"]]

    def to_text(self):
        """Canonical text form (all keys, sorted)"""
        lines = []
        for key in CONFIG_KEYS:
            if key in self and self.data[key] is not None:
                lines.append("{} = {}".format(
                    key, _format(self.data[key], CONFIG_DEF[key][1])))
        return "\n".join(lines) + "\n"

    def hash(self):
        """Short SHA-256 digest of :func:`to_text`

        The output directory does not enter the digest.
        """
        lines = [ln for ln in self.to_text().splitlines()
                 if not ln.startswith("output directory")]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:16]

    def sub_seed(self, stage, *extra):
        """Seed of a stage derived from the master seed"""
        ss = np.random.SeedSequence([self["seed"], STAGE_IDS[stage]]
                                    + [int(e) for e in extra])
        return int(ss.generate_state(1)[0])

    def geometry(self):
        return DramGeometry(rows_total=self["rows total"],
                            pages_per_row=self["pages per row"],
                            page_size_bytes=self["page size"])

    def layout(self):
        """Keyword arguments of the victim weight layout"""
        return {"chunk_rows": self["chunk rows"],
                "chunk_cols": self["chunk cols"],
                "page_size_bytes": self["page size"]}

    def cost_model(self, strategy):
        strategy = Strategy(strategy)
        row = self["t row msb"] if strategy == Strategy.MSB_PRIORITY \
            else self["t row allbits"]
        return CostModel(t_exhaust=self["t exhaust"],
                         t_release=self["t release"],
                         t_inference=self["t inference"],
                         t_per_hammered_row=row)

    def attack_config(self, strategy, rounds=None):
        strategy = Strategy(strategy)
        if rounds is None:
            rounds = max(self["rounds"])
        return AttackConfig(rounds=rounds,
                            strategy=strategy,
                            cost_model=self.cost_model(strategy),
                            seed=self.sub_seed(
                                "attack", list(Strategy).index(strategy)),
                            miss_prob=self["miss prob"],
                            pageset_capacity=self["pageset capacity"],
                            non_secret_between=self["non secret between"])

    def train_config(self):
        return TrainConfig(lam=self["lambda"],
                           lr=self["lr"],
                           epochs=self["epochs"],
                           finetune_epochs=self["finetune epochs"],
                           batch_size=self["batch size"],
                           momentum=self["momentum"],
                           seed=self.sub_seed("train"))

    def victim_train_config(self):
        return TrainConfig(lam=0,
                           lr=self["victim lr"],
                           epochs=self["victim epochs"],
                           finetune_epochs=0,
                           batch_size=self["batch size"],
                           momentum=self["momentum"],
                           seed=self.sub_seed("victim"))

    def pgd_config(self):
        return PgdConfig(epsilon=self["pgd epsilon"],
                         steps=self["pgd steps"],
                         step_size=self.data.get("pgd step size"))

    def save(self, path):
        pathlib.Path(path).write_text(self.to_text())


def _check_values(cfg, where):
    """Range and cross-field checks; returns a list of messages"""
    errors = []

    def err(key, msg):
        errors.append("line {}: {}: {}".format(where.get(key, 0), key, msg))

    positive = ["rows total", "pages per row", "page size",
                "pageset capacity", "chunk rows", "chunk cols",
                "train samples", "test samples", "blobs per class",
                "batch size", "lr", "victim lr", "cluster std"]
    non_negative = ["lambda", "epochs", "finetune epochs", "victim epochs",
                    "pgd epsilon", "pgd steps", "non secret between",
                    "t exhaust", "t release", "t inference", "t row msb",
                    "t row allbits", "momentum"]
    for key in positive:
        if key in cfg.data and not cfg.data[key] > 0:
            err(key, "must be positive, got {}".format(cfg.data[key]))
    for key in non_negative:
        if key in cfg.data and cfg.data[key] < 0:
            err(key, "must be non-negative, got {}".format(cfg.data[key]))
    size = cfg.data.get("page size", 1)
    if size > 0 and size & (size - 1):
        err("page size", "must be a power of two, got {}".format(size))
    if cfg.data.get("pages per row", 2) < 2:
        err("pages per row", "leakage needs at least 2 pages per row")
    for key in ["frac vuln pages", "subset fraction"]:
        if key in cfg.data and not 0 <= cfg.data[key] <= 1:
            err(key, "must be in [0, 1], got {}".format(cfg.data[key]))
    if not 0 <= cfg.data.get("miss prob", 0) < 1:
        err("miss prob", "must be in [0, 1), got {}".format(
            cfg.data["miss prob"]))
    if cfg.data.get("cells per vuln page", 1) <= 0:
        err("cells per vuln page", "must be positive")
    if cfg.data.get("finetune epochs", 0) > cfg.data.get("epochs", 0):
        err("finetune epochs", "must not exceed epochs ({})".format(
            cfg.data.get("epochs")))
    step = cfg.data.get("pgd step size")
    if step is not None and not 0 <= step <= cfg.data.get("pgd epsilon", 0):
        err("pgd step size", "must be in [0, pgd epsilon]")
    dims = cfg.data.get("victim dims")
    if dims is None:
        err("victim dims", "required key is missing")
    elif len(dims) < 2 or min(dims) < 1:
        err("victim dims", "need at least two positive dimensions")
    rounds = cfg.data.get("rounds", [])
    if not rounds:
        err("rounds", "at least one round budget is required")
    elif min(rounds) < 0:
        err("rounds", "round budgets must be non-negative")
    else:
        cfg.data["rounds"] = sorted(set(rounds))
    strategies = []
    for name in cfg.data.get("strategy", []):
        if name not in [s.value for s in Strategy]:
            err("strategy", "unknown strategy '{}'".format(name))
        elif name not in strategies:
            strategies.append(name)
    if "strategy" in cfg.data:
        if not cfg.data["strategy"]:
            err("strategy", "at least one strategy is required")
        cfg.data["strategy"] = strategies
    return errors


def normalize(values, where=None):
    """Validate configuration values and fill in all defaults

    Parameters
    ----------
    values: dict
        Configuration values (already converted to their types)
    where: dict or None
        Line number of every key (for error messages)

    Returns
    -------
    cfg: ExperimentConfig

    Raises
    ------
    ConfigValidationError
        With all errors found
    """
    if where is None:
        where = {}
    errors = []
    cfg = ExperimentConfig()
    for key in CONFIG_KEYS:
        default = CONFIG_DEF[key][2]
        if key in values:
            cfg.data[key] = values[key]
        elif default is not REQUIRED:
            cfg.data[key] = list(default) if isinstance(default, list) \
                else default
    for key in values:
        if key not in CONFIG_DEF:
            errors.append("line {}: {}: unknown key".format(
                where.get(key, 0), key))
    errors += _check_values(cfg, where)
    if errors:
        raise ConfigValidationError(errors)
    return cfg


def parse_config(text):
    """Parse configuration text (see :func:`validate_config`)"""
    values = {}
    where = {}
    errors = []
    for num, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append("line {}: {}: expected 'key = value'".format(
                num, line))
            continue
        key, value = [s.strip() for s in line.split("=", 1)]
        if key in where:
            errors.append("line {}: {}: duplicate key (first set in line "
                          "{})".format(num, key, where[key]))
            continue
        where[key] = num
        if key not in CONFIG_DEF:
            errors.append("line {}: {}: unknown key".format(num, key))
            continue
        kind = CONFIG_DEF[key][1]
        try:
            values[key] = _convert(value, kind)
        except ValueError:
            errors.append("line {}: {}: expected {}, got '{}'".format(
                num, key, kind, value))
    if values.get("msb only") and "strategy" in values \
            and "msb" not in values["strategy"]:
        warnings.warn("'msb only' has no effect without the 'msb' "
                      "strategy (line {}).".format(where["msb only"]))
    try:
        cfg = normalize(values, where)
    except ConfigValidationError as e:
        errors += e.errors
    if errors:
        # report in line order
        errors.sort(key=lambda s: int(s.split(":", 1)[0].split()[1]))
        raise ConfigValidationError(errors)
    return cfg


def validate_config(path):
    """Load and validate a configuration file

    All defaults are filled in and ``rounds`` is normalized to a
    sorted list of unique budgets.

    Returns
    -------
    cfg: ExperimentConfig

    Raises
    ------
    ConfigValidationError
        With line-numbered messages ``"line N: key: message"``
    """
    return parse_config(pathlib.Path(path).read_text())
