"""Experiment configuration: a TOML document with one table per config type.

::

    [experiment]  out_dir
    [data]        LongTailSpec fields
    [train]       TrainConfig scalar fields (epochs, lr0, seed, metric_every, ...)
    [loss]        LossConfig fields
    [model]       ModelConfig fields
    [ablation]    seeds, variants

Unknown tables or keys are errors. Any key can be overridden from the
environment as ``TRIPARTITE_<TABLE>__<KEY>=<value>``; the value is read as a
TOML literal (``0.1``, ``[1, 2]``, ``true``) and falls back to a plain string.
"""

import dataclasses
import enum
import os
import types
from dataclasses import dataclass, replace
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .data import LongTailSpec
from .errors import ConfigError
from .losses import Family, LossConfig
from .model import ModelConfig
from .train import TrainConfig

ENV_PREFIX = "TRIPARTITE_"

# -- ablation grid ----------------------------------------------------------------


@dataclass(frozen=True)
class AblationVariant:
    """One row of the ablation grid: joint family plus optional contrastive / uniform families."""

    joint: Family
    ss: Family | None = None
    cc: Family | None = None

    @property
    def name(self):
        parts = [f"sc-{self.joint.value}"]
        if self.ss is not None:
            parts.append(f"ss-{self.ss.value}")
        if self.cc is not None:
            parts.append(f"cc-{self.cc.value}")
        return "_".join(parts)

    @classmethod
    def parse(cls, name):
        """Inverse of :attr:`name`, e.g. ``"sc-bce_ss-bce_cc-bce"``."""
        found = {}
        for part in str(name).split("_"):
            term, _, fam = part.partition("-")
            if term not in ("sc", "ss", "cc") or term in found:
                raise ConfigError(f"bad ablation variant {name!r}")
            try:
                found[term] = Family(fam)
            except ValueError:
                raise ConfigError(f"bad family {fam!r} in ablation variant {name!r}") from None
        if "sc" not in found:
            raise ConfigError(f"ablation variant {name!r} has no joint term 'sc-<family>'")
        return cls(found["sc"], found.get("ss"), found.get("cc"))

    def loss_config(self, base):
        """``base`` with the terms this variant does not use switched off."""
        if self.ss is not None and base.lambda_ss <= 0:
            raise ConfigError(f"variant {self.name} uses contrastive learning but lambda_ss = 0")
        if self.cc is not None and base.lambda_cc <= 0:
            raise ConfigError(f"variant {self.name} uses uniform learning but lambda_cc = 0")
        return replace(
            base,
            family=self.joint,
            lambda_ss=base.lambda_ss if self.ss is not None else 0.0,
            lambda_cc=base.lambda_cc if self.cc is not None else 0.0,
            ss_family=self.ss,
            cc_family=self.cc,
        )


_B, _C = Family.BCE, Family.CE

# row order of the ablation table: joint only, + contrastive, + uniform, all three
TABLE_VARIANTS = (
    AblationVariant(_C), AblationVariant(_B),
    AblationVariant(_C, _C), AblationVariant(_C, _B), AblationVariant(_B, _C), AblationVariant(_B, _B),
    AblationVariant(_C, None, _C), AblationVariant(_C, None, _B),
    AblationVariant(_B, None, _C), AblationVariant(_B, None, _B),
    AblationVariant(_C, _C, _C), AblationVariant(_C, _B, _B),
    AblationVariant(_B, _C, _C), AblationVariant(_B, _B, _B),
)


@dataclass(frozen=True)
class AblationGrid:
    variants: tuple = TABLE_VARIANTS
    seeds: tuple = (1, 2, 3)

    def __post_init__(self):
        variants = tuple(v if isinstance(v, AblationVariant) else AblationVariant.parse(v)
                         for v in self.variants)
        object.__setattr__(self, "variants", variants)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not variants:
            raise ConfigError("ablation grid is empty")
        names = [v.name for v in variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate ablation variants in {names}")
        if not self.seeds:
            raise ConfigError("ablation needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate ablation seeds {self.seeds}")


# -- experiment config ------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    data: LongTailSpec = LongTailSpec()
    train: TrainConfig = TrainConfig()
    out_dir: Path = Path("runs")
    ablation: AblationGrid = AblationGrid()

    @property
    def loss(self):
        return self.train.loss

    def with_seed(self, seed):
        """Same experiment with ``seed`` for both data generation and training."""
        return replace(self, data=replace(self.data, seed=seed),
                       train=replace(self.train, seed=seed))

    def with_loss(self, loss):
        return replace(self, train=replace(self.train, loss=loss))

    def with_out_dir(self, out_dir):
        return replace(self, out_dir=Path(out_dir))

    def to_dict(self):
        """Plain nested dict (enums as values, tuples as lists) for logging."""
        return _plain({
            "experiment": {"out_dir": str(self.out_dir)},
            "data": _fields(self.data),
            "train": {k: v for k, v in _fields(self.train).items() if k not in ("loss", "model")},
            "loss": _fields(self.train.loss),
            "model": _fields(self.train.model),
            "ablation": {"seeds": self.ablation.seeds,
                         "variants": [v.name for v in self.ablation.variants]},
        })


def _fields(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, enum.Enum):
        return v.value
    return v


def _coerce(tp, value, where):
    if isinstance(tp, types.UnionType):
        if value is None and type(None) in tp.__args__:
            return None
        members = [t for t in tp.__args__ if t is not type(None)]
        errors = []
        for t in members:
            try:
                return _coerce(t, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0])
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str or (isinstance(tp, type) and issubclass(tp, enum.Enum)):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected an array, got {value!r}")
        return tuple(value)
    return value


def _build(cls, table, section, exclude=()):
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(
                f"unknown key '{key}' in [{section}]; expected one of {sorted(known)}"
            )
        kwargs[key] = _coerce(known[key].type, value, f"[{section}] {key}")
    return cls(**kwargs)


SECTIONS = ("experiment", "data", "train", "loss", "model", "ablation")


def _parse_env_value(raw):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def env_overrides(environ=None):
    """``{table: {key: value}}`` from ``TRIPARTITE_<TABLE>__<KEY>`` variables."""
    environ = os.environ if environ is None else environ
    out = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX) or "__" not in name[len(ENV_PREFIX):]:
            continue
        section, _, key = name[len(ENV_PREFIX):].partition("__")
        section, key = section.lower(), key.lower()
        if section not in SECTIONS:
            raise ConfigError(f"{name}: unknown config table [{section}]")
        out.setdefault(section, {})[key] = _parse_env_value(environ[name])
    return out


def config_from_dict(doc):
    """Validate and build an :class:`ExperimentConfig` from a parsed document."""
    for section, table in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config table [{section}]; expected one of {list(SECTIONS)}")
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
    exp = dict(doc.get("experiment", {}))
    unknown = set(exp) - {"out_dir"}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [experiment]; expected ['out_dir']")
    loss = _build(LossConfig, doc.get("loss", {}), "loss")
    model = _build(ModelConfig, doc.get("model", {}), "model")
    train = _build(TrainConfig, doc.get("train", {}), "train", exclude=("loss", "model"))
    train = replace(train, loss=loss, model=model)
    data = _build(LongTailSpec, doc.get("data", {}), "data")
    ablation = _build(AblationGrid, doc.get("ablation", {}), "ablation")
    out_dir = exp.get("out_dir", "runs")
    if not isinstance(out_dir, str):
        raise ConfigError("[experiment] out_dir must be a string")
    return ExperimentConfig(data=data, train=train, out_dir=Path(out_dir), ablation=ablation)


def merge(doc, overrides):
    out = {k: dict(v) for k, v in doc.items()}
    for section, table in overrides.items():
        out.setdefault(section, {}).update(table)
    return out


def load_config(path=None, environ=None):
    """Read a TOML config (or defaults when ``path`` is None) and apply env overrides."""
    doc = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(merge(doc, env_overrides(environ)))
