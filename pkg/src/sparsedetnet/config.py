"""INI experiment configuration.

Every default equals the published experimental setting where one exists;
see ``configs/`` for the full-scale and desk-scale files.
"""
import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace

from .channel import SnrGrid
from .compression import PruneSpec
from .errors import ConfigurationError
from .training import LossSpec, TrainConfig

SCHEMA_VERSION = 1
METHODS = ("DetNet", "Pruned DetNet", "R-DetNet", "R-DetNet(GL)", "R-DetNet(SGL)",
           "R-I-DetNet", "R-I-DetNet(SGL)")


@dataclass(frozen=True)
class ExperimentConfig:
    K: int = 20
    N: int = 30
    seed: int = 0
    eval_samples: int = 50000
    output_dir: str = "runs/default"
    z_mult: int = 8
    v_mult: int = 2
    init_gain: float = 0.3
    incremental: bool = False
    per_snr: bool = False
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(start_layers=30, T_step=10, max_layers=90))
    prune: PruneSpec = field(default_factory=PruneSpec)
    snr: SnrGrid = field(default_factory=lambda: SnrGrid(0.0, 15.0, 16))
    methods: tuple = METHODS
    baselines: tuple = ("zf",)
    eta_gl: float = 0.005
    eta_incremental: float = 0.01
    report_snr_db: float = 12.0

    def __post_init__(self):
        if self.N < self.K or self.K < 1:
            raise ConfigurationError(f"need N >= K >= 1, got K={self.K}, N={self.N}")
        if self.eval_samples < 1:
            raise ConfigurationError("eval_samples must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown method {m!r}; choose from {METHODS}")
        for b in self.baselines:
            if b not in ("zf", "ml", "oracle"):
                raise ConfigurationError(f"unknown baseline {b!r}")

    def digest(self):
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


def _coerce(value, typ, key):
    try:
        if typ is bool:
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("1", "true", "yes", "on")
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {value!r}") from exc


def _opt_float(value):
    return None if value.strip().lower() in ("", "none") else float(value)


def _list(value):
    return tuple(v.strip() for v in value.split(",") if v.strip())


_TRAIN_KEYS = {
    "lr0": float, "decay_factor": float, "decay_step": int, "batch_size": int,
    "total_batches": int, "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "val_snr_db": float, "val_samples": int, "loss_over_frozen": bool,
}
_SCHEDULE_KEYS = {"start_layers": int, "T_step": int, "max_layers": int}


def parse_config(text):
    """Parse INI text into an :class:`ExperimentConfig`."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"unreadable config: {exc}") from exc
    known = {"meta", "experiment", "model", "schedule", "loss", "train", "prune", "snr", "sweep"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigurationError(f"unknown config sections {sorted(unknown)}")
    if cp.has_option("meta", "schema"):
        version = _coerce(cp.get("meta", "schema"), int, "meta.schema")
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"config schema {version} unsupported (expected {SCHEMA_VERSION})")

    base = ExperimentConfig()
    top = {}
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    sections = {
        "experiment": ("K", "N", "seed", "eval_samples", "output_dir", "per_snr"),
        "model": ("z_mult", "v_mult", "init_gain"),
        "schedule": ("incremental",),
        "sweep": ("eta_gl", "eta_incremental", "report_snr_db"),
    }
    for section, keys in sections.items():
        if not cp.has_section(section):
            continue
        for key, value in cp.items(section):
            if key in keys:
                top[key] = _coerce(value, types[key], f"{section}.{key}")
            elif not (section == "schedule" and key in _SCHEDULE_KEYS) and not (
                    section == "sweep" and key in ("methods", "baselines")):
                raise ConfigurationError(f"unknown key {section}.{key}")

    train_kw = {}
    if cp.has_section("train"):
        for key, value in cp.items("train"):
            if key in _TRAIN_KEYS:
                train_kw[key] = _coerce(value, _TRAIN_KEYS[key], f"train.{key}")
            elif key in ("target_ber", "halt_epsilon"):
                train_kw[key] = _opt_float(value)
            elif key == "snr_range_db":
                lo, hi = (float(v) for v in value.split(":"))
                train_kw[key] = (lo, hi)
            else:
                raise ConfigurationError(f"unknown key train.{key}")
    if cp.has_section("schedule"):
        for key, typ in _SCHEDULE_KEYS.items():
            if cp.has_option("schedule", key):
                train_kw[key] = _coerce(cp.get("schedule", key), typ, f"schedule.{key}")
    train = replace(base.train, **train_kw)

    loss_kw = {}
    if cp.has_section("loss"):
        names = {"kind": str, "lambda": float, "lambda1": float, "lambda2": float}
        for key, value in cp.items("loss"):
            if key not in names:
                raise ConfigurationError(f"unknown key loss.{key}")
            loss_kw[{"lambda": "lam", "lambda1": "lam1", "lambda2": "lam2"}.get(key, key)] = \
                _coerce(value, names[key], f"loss.{key}")
    loss = LossSpec(**loss_kw)

    prune_kw = {}
    if cp.has_section("prune"):
        names = {"kind": str, "eta": float, "eta1": float, "eta2": float, "absolute_groups": bool}
        for key, value in cp.items("prune"):
            if key not in names:
                raise ConfigurationError(f"unknown key prune.{key}")
            prune_kw[key] = _coerce(value, names[key], f"prune.{key}")
    prune = PruneSpec(**prune_kw)

    snr = base.snr
    if cp.has_option("snr", "grid"):
        snr = SnrGrid.parse(cp.get("snr", "grid"))
    extra = {}
    if cp.has_option("sweep", "methods"):
        extra["methods"] = _list(cp.get("sweep", "methods"))
    if cp.has_option("sweep", "baselines"):
        extra["baselines"] = _list(cp.get("sweep", "baselines"))
    return ExperimentConfig(**top, **extra, loss=loss, train=train, prune=prune, snr=snr)


def load_config(path):
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
