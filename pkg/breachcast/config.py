"""Pipeline hyper-parameters and switches.

Every field carries its published default. A config file overrides the defaults and
command line flags override the file. The file format is one ``key = value`` pair per
line; ``#`` starts a comment and keys are field names written with dashes or
underscores::

    # stage 1
    stage1-epochs = 10
    n_clusters = 20
    calibration = kmeans2
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from breachcast.errors import InvalidConfigError

logger = logging.getLogger(__name__)

CALIBRATION_STRATEGIES = ("percentile", "kmeans2")
FAIL_COUNT_SCOPES = ("all", "post-breach")
DELTA_SOURCES = ("extraction", "history")

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


@dataclass(frozen=True)
class PipelineConfig:
    # stage 1: contrastive projection
    stage1_lr: float = 1e-4
    stage1_batch: int = 32
    stage1_epochs: int = 15
    margin: float = 1.0
    random_negative_weight: float = 0.5

    # stage 2: proactive head
    stage2_lr: float = 1e-3
    stage2_batch: int = 32
    stage2_epochs: int = 15
    label_smoothing: float = 0.1
    n_clusters: int = 30
    top_m: int = 5

    # architectures
    score_hidden: int = 128
    projection_hidden: int = 2048
    causal_dim: int = 1024
    head_hidden: int = 512

    # quantizer
    kmeans_batch: int = 256
    kmeans_max_iters: int = 200
    kmeans_tol: float = 1e-4

    # transition model
    epsilon: float = 1.0
    beta: float = 2.0
    fail_counts_scope: str = "all"

    # detector
    calibration: str = "percentile"
    percentile: float = 85.0
    jump: float = 0.15
    panic_offset: float = 0.30
    static_threshold: bool = False

    # data
    train_fraction: float = 0.20
    seed: int = 42
    step_index_base: int = 0
    delta_source: str = "extraction"

    # ablations
    no_triplet: bool = False
    absolute_states: bool = False
    binary_baseline: bool = False

    def validate(self) -> "PipelineConfig":
        if self.calibration not in CALIBRATION_STRATEGIES:
            raise InvalidConfigError("calibration must be one of " + ", ".join(CALIBRATION_STRATEGIES))
        if self.fail_counts_scope not in FAIL_COUNT_SCOPES:
            raise InvalidConfigError("fail-counts-scope must be one of " + ", ".join(FAIL_COUNT_SCOPES))
        if self.delta_source not in DELTA_SOURCES:
            raise InvalidConfigError("delta-source must be one of " + ", ".join(DELTA_SOURCES))
        if not 0.0 < self.epsilon < self.beta:
            raise InvalidConfigError("smoothing priors need 0 < epsilon < beta")
        if self.n_clusters < 1:
            raise InvalidConfigError("n-clusters must be positive")
        if not 1 <= self.top_m <= self.n_clusters:
            raise InvalidConfigError("top-m must lie in [1, {}], got {}".format(self.n_clusters, self.top_m))
        if not 0.0 <= self.random_negative_weight <= 1.0:
            raise InvalidConfigError("random negative weight must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise InvalidConfigError("label smoothing must lie in [0, 1)")
        if not 0.0 < self.percentile <= 100.0:
            raise InvalidConfigError("percentile must lie in (0, 100]")
        if self.jump <= 0.0 or self.panic_offset <= 0.0 or self.margin <= 0.0:
            raise InvalidConfigError("jump, panic offset and margin must be positive")
        if self.step_index_base not in (0, 1):
            raise InvalidConfigError("step index base must be 0 or 1")
        for name in ("stage1_batch", "stage2_batch", "kmeans_batch", "kmeans_max_iters",
                     "score_hidden", "projection_hidden", "causal_dim", "head_hidden"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(name.replace("_", "-") + " must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise InvalidConfigError("epochs cannot be negative")
        return self

    def replace(self, **overrides) -> "PipelineConfig":
        return dataclasses.replace(self, **overrides).validate()

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "PipelineConfig":
        """Build a config from loosely typed values, ignoring ``None`` entries."""
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise InvalidConfigError("unknown configuration key " + key)
            if value is not None:
                kwargs[name] = coerce(known[name], value)
        return cls(**kwargs).validate()


def coerce(field: dataclasses.Field, value: Any) -> Any:
    kind = field.type if isinstance(field.type, type) else type(field.default)
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError as exc:
        raise InvalidConfigError("{}: cannot read {!r} as {}".format(field.name, value, kind.__name__)) from exc


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    """Parse a ``key = value`` file into raw string values keyed by field name."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InvalidConfigError("cannot read config file {}: {}".format(path, exc)) from exc

    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError("{}:{}: expected 'key = value'".format(path, number))
        key, value = (part.strip() for part in line.split("=", 1))
        name = key.replace("-", "_")
        if name not in known:
            raise InvalidConfigError("{}:{}: unknown key {}".format(path, number, key))
        values[name] = value
    logger.debug("Read %d setting(s) from %s", len(values), path)
    return values


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> PipelineConfig:
    """Defaults, then the file at ``path``, then non-``None`` ``overrides``."""
    values: Dict[str, Any] = read_config_file(path) if path is not None else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_mapping(values)
