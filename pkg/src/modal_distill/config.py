"""Run configuration documents (JSON) and the results-table row enumeration."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .distill import METHODS, DistillLossConfig
from .errors import ConfigError
from .networks import BRANCHES, TEACHER_FOR_CONFIG, NetworkConfig
from .train import TrainConfig

SEED_ENV = "MODAL_DISTILL_SEED"
NETWORK_OVERRIDES = ("d_model", "n_heads", "n_layers", "ffn_mult", "kernel", "head_hidden")
TRAIN_FIELDS = ("epochs", "batch", "lr", "patience", "factor", "betas", "adam_eps", "clip")
KD_FIELDS = ("alpha", "beta", "t", "tau", "d_crd", "eps")


def _reject_unknown(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown field(s) in {where}: {unknown}")


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from e


@dataclass
class RunConfig:
    role: str = "student"
    branch: str | None = None
    config: int | None = None
    method: str = "none"
    preset: str = "desk"
    network: dict = field(default_factory=dict)
    kd: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: str | None = None
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0
    seed: int | None = None
    teacher: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.role not in ("teacher", "student"):
            raise ConfigError(f"role must be 'teacher' or 'student', got {self.role!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.role == "teacher":
            if self.branch not in BRANCHES:
                raise ConfigError(f"teacher branch must be one of {BRANCHES}, got {self.branch!r}")
            if self.method != "none":
                raise ConfigError("teachers are trained without distillation (method must be 'none')")
        else:
            if self.config not in TEACHER_FOR_CONFIG:
                raise ConfigError(f"student config must be 1-5, got {self.config!r}")
            if self.method != "none" and not self.teacher:
                raise ConfigError(f"method {self.method!r} needs a teacher checkpoint path")
        _reject_unknown(self.network, NETWORK_OVERRIDES, "network")
        _reject_unknown(self.kd, KD_FIELDS, "kd")
        _reject_unknown(self.train, TRAIN_FIELDS, "train")
        self.network_config()
        self.loss_config()
        self.train_config(0)

    @property
    def alignment(self) -> str:
        return "T_up" if self.method == "edam_t_up" else "S_down"

    def resolved_seed(self, override: int | None = None) -> int:
        if override is not None:
            return int(override)
        if self.seed is not None:
            return int(self.seed)
        return default_seed()

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.preset(self.preset, **self.network)

    def loss_config(self) -> DistillLossConfig:
        return DistillLossConfig(**self.kd)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            **self.train,
            seed=seed,
            method=self.method,
            config=self.config if self.role == "student" else None,
            kd=self.loss_config(),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, cls.__dataclass_fields__, "run config")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"malformed run config: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(d)


# results table ---------------------------------------------------------------

BASELINE_GROUP = "Baseline"
GROUPS = {
    "KD from the Complete Teacher Network": 1,
    "KD from Video Branch": 2,
    "KD from Language Branch": 3,
    "KD from Audio Branch": 4,
    "KD from Language and Audio Branches": 5,
}
DESCRIPTION_METHOD = {
    "Without KD": "none",
    "CRD on final linear layer": "crd_final",
    "CRD on penultimate linear layer": "crd_penultimate",
    "CRD on post-attention linear layers": "crd_postattn",
    "CRD on attention maps": "crd_attnmap",
    "EDAM-S$\\downarrow$ on attention maps": "edam_s_down",
    "EDAM-T$\\uparrow$ on attention maps": "edam_t_up",
}
BRANCH_DESCRIPTION = {
    "complete": "Complete Teacher Network",
    "video": "Video Branch",
    "language": "Language Branch",
    "audio": "Audio Branch",
}

# (group, network, description) in table order
TABLE_ROWS: tuple[tuple[str, str, str], ...] = (
    (BASELINE_GROUP, "Student", "Without KD"),
    ("KD from the Complete Teacher Network", "Teacher", "Complete Teacher Network"),
    ("KD from the Complete Teacher Network", "Student", "EDAM-S$\\downarrow$ on attention maps"),
    ("KD from Video Branch", "Teacher", "Video Branch"),
    ("KD from Video Branch", "Student", "CRD on final linear layer"),
    ("KD from Video Branch", "Student", "CRD on penultimate linear layer"),
    ("KD from Video Branch", "Student", "CRD on attention maps"),
    ("KD from Language Branch", "Teacher", "Language Branch"),
    ("KD from Language Branch", "Student", "CRD on final linear layer"),
    ("KD from Language Branch", "Student", "CRD on penultimate linear layer"),
    ("KD from Audio Branch", "Teacher", "Audio Branch"),
    ("KD from Audio Branch", "Student", "CRD on final linear layer"),
    ("KD from Audio Branch", "Student", "CRD on penultimate linear layer"),
    ("KD from Language and Audio Branches", "Teacher", "Complete Teacher Network"),
    ("KD from Language and Audio Branches", "Student", "CRD on final linear layer"),
    ("KD from Language and Audio Branches", "Student", "CRD on penultimate linear layer"),
    ("KD from Language and Audio Branches", "Student", "CRD on post-attention linear layers"),
    ("KD from Language and Audio Branches", "Student", "CRD on attention maps"),
    ("KD from Language and Audio Branches", "Student", "EDAM-S$\\downarrow$ on attention maps"),
    ("KD from Language and Audio Branches", "Student", "EDAM-T$\\uparrow$ on attention maps"),
)


def row_config(group: str, network: str, description: str, teacher_path: str = "teacher.ckpt") -> RunConfig:
    """The run that produces one row of the results table."""
    if (group, network, description) not in TABLE_ROWS:
        raise ConfigError(f"not a results-table row: {(group, network, description)}")
    if group == BASELINE_GROUP:
        # the no-KD baseline shares the config-5 student architecture
        return RunConfig(role="student", config=5, method="none")
    config = GROUPS[group]
    if network == "Teacher":
        return RunConfig(role="teacher", branch=TEACHER_FOR_CONFIG[config], method="none")
    return RunConfig(role="student", config=config, method=DESCRIPTION_METHOD[description], teacher=teacher_path)
