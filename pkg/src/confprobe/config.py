"""Pipeline configuration: one JSON file drives all stages.

Unknown keys are rejected so typos fail loudly, and the resolved config is
hashed into the run manifest for reproducibility. See README for a complete
example file.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .calibration import DEFAULT_BINS, DEFAULT_MIN_DP, DEFAULT_THRESHOLD_GRID
from .mutation import (
    LABEL_STYLES,
    MutationSettings,
    TEMPLATE_COT,
    TEMPLATE_COT_NUMERIC,
    TEMPLATE_TASK,
    TEMPLATE_TASK_NUMERIC,
)
from .sampling import DEFAULT_PROFILES, DecodingProfile
from .simulator import MODE_PLAIN, MODES


class ConfigError(ValueError):
    pass


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class CorpusConfig:
    path: str = "corpus.jsonl"
    split_fraction: float | None = None  # None = no split; all stages share the set
    split_seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> "CorpusConfig":
        _check_keys(obj, {"path", "split_fraction", "split_seed"}, "corpus")
        return cls(**obj)


@dataclass
class ParaphraseConfig:
    enabled: bool = False
    per_stem: int = 1
    cache_path: str | None = None
    helper_base_url: str | None = None
    helper_model: str | None = None
    helper_timeout: float = 30.0

    @classmethod
    def from_dict(cls, obj: dict) -> "ParaphraseConfig":
        _check_keys(
            obj,
            {"enabled", "per_stem", "cache_path", "helper_base_url", "helper_model",
             "helper_timeout"},
            "mutation.paraphrase",
        )
        return cls(**obj)


@dataclass
class MutationConfig:
    label_styles: list[str] = field(default_factory=lambda: list(LABEL_STYLES))
    shuffle: bool = True
    distractors: list[str] = field(
        default_factory=lambda: ["none_of_the_above", "all_of_the_above"]
    )
    templates_mcq: list[str] = field(default_factory=lambda: [TEMPLATE_TASK, TEMPLATE_COT])
    templates_numeric: list[str] = field(
        default_factory=lambda: [TEMPLATE_TASK_NUMERIC, TEMPLATE_COT_NUMERIC]
    )
    paraphrase: ParaphraseConfig = field(default_factory=ParaphraseConfig)
    template_dir: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "MutationConfig":
        _check_keys(
            obj,
            {"label_styles", "shuffle", "distractors", "templates_mcq",
             "templates_numeric", "paraphrase", "template_dir"},
            "mutation",
        )
        obj = dict(obj)
        if "paraphrase" in obj:
            obj["paraphrase"] = ParaphraseConfig.from_dict(obj["paraphrase"])
        return cls(**obj)

    def settings(self) -> MutationSettings:
        paraphrase_ids = ()
        if self.paraphrase.enabled:
            paraphrase_ids = tuple(f"p{i}" for i in range(self.paraphrase.per_stem))
        s = MutationSettings(
            label_styles=tuple(self.label_styles),
            shuffle=self.shuffle,
            distractors=tuple(self.distractors),
            templates_mcq=tuple(self.templates_mcq),
            templates_numeric=tuple(self.templates_numeric),
            paraphrase_ids=paraphrase_ids,
        )
        s.validate()
        return s


@dataclass
class HttpConfig:
    base_url: str | None = None
    model: str | None = None
    timeout: float = 60.0
    logprobs: bool = True

    @classmethod
    def from_dict(cls, obj: dict) -> "HttpConfig":
        _check_keys(obj, {"base_url", "model", "timeout", "logprobs"}, "backend.http")
        return cls(**obj)


@dataclass
class SimulatorConfig:
    latent: dict = field(default_factory=lambda: {"distribution": "uniform", "low": 0.0, "high": 1.0})
    mode: str = MODE_PLAIN

    @classmethod
    def from_dict(cls, obj: dict) -> "SimulatorConfig":
        _check_keys(obj, {"latent", "mode"}, "backend.simulator")
        cfg = cls(**obj)
        if cfg.mode not in MODES:
            raise ConfigError(f"backend.simulator.mode: unknown mode {cfg.mode!r}")
        return cfg


@dataclass
class BackendConfig:
    kind: str = "simulator"
    http: HttpConfig = field(default_factory=HttpConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    retries: int = 3
    concurrency: int = 4
    backoff: float = 0.5

    @classmethod
    def from_dict(cls, obj: dict) -> "BackendConfig":
        _check_keys(
            obj, {"kind", "http", "simulator", "retries", "concurrency", "backoff"}, "backend"
        )
        obj = dict(obj)
        if "http" in obj:
            obj["http"] = HttpConfig.from_dict(obj["http"])
        if "simulator" in obj:
            obj["simulator"] = SimulatorConfig.from_dict(obj["simulator"])
        cfg = cls(**obj)
        if cfg.kind not in ("simulator", "http"):
            raise ConfigError(f"backend.kind must be 'simulator' or 'http', got {cfg.kind!r}")
        if cfg.retries < 1 or cfg.concurrency < 1:
            raise ConfigError("backend.retries and backend.concurrency must be >= 1")
        return cfg


@dataclass
class LabelingConfig:
    prompt_pool_size: int = 5
    prompt_pool_cache: str | None = None
    per_draw: bool = False

    @classmethod
    def from_dict(cls, obj: dict) -> "LabelingConfig":
        _check_keys(obj, {"prompt_pool_size", "prompt_pool_cache", "per_draw"}, "labeling")
        return cls(**obj)


@dataclass
class CalibrationConfig:
    bins: int = DEFAULT_BINS
    threshold_grid: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLD_GRID))
    min_dp: float = DEFAULT_MIN_DP

    @classmethod
    def from_dict(cls, obj: dict) -> "CalibrationConfig":
        _check_keys(obj, {"bins", "threshold_grid", "min_dp"}, "calibration")
        return cls(**obj)


@dataclass
class ExtractionConfig:
    phrase_file: str | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> "ExtractionConfig":
        _check_keys(obj, {"phrase_file"}, "extraction")
        return cls(**obj)


@dataclass
class PipelineConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    out_dir: str = "runs/out"
    seed: int = 0
    draws_per_question: int = 10
    requery_threshold: float = 0.3
    requery_extra: int | None = None  # None = same as draws_per_question
    max_tokens: int = 256
    simulate_repeats: int = 1
    mutation: MutationConfig = field(default_factory=MutationConfig)
    profiles: list[DecodingProfile] = field(default_factory=lambda: list(DEFAULT_PROFILES))
    backend: BackendConfig = field(default_factory=BackendConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        _check_keys(
            obj,
            {"corpus", "out_dir", "seed", "draws_per_question", "requery_threshold",
             "requery_extra", "max_tokens", "simulate_repeats", "mutation", "profiles",
             "backend", "labeling", "calibration", "extraction"},
            "config",
        )
        obj = dict(obj)
        for key, sub in (
            ("corpus", CorpusConfig),
            ("mutation", MutationConfig),
            ("backend", BackendConfig),
            ("labeling", LabelingConfig),
            ("calibration", CalibrationConfig),
            ("extraction", ExtractionConfig),
        ):
            if key in obj:
                obj[key] = sub.from_dict(obj[key])
        if "profiles" in obj:
            obj["profiles"] = [DecodingProfile.from_dict(p) for p in obj["profiles"]]
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.draws_per_question < 1:
            raise ConfigError("draws_per_question must be >= 1")
        if self.requery_threshold < 0:
            raise ConfigError("requery_threshold must be >= 0")
        if self.requery_extra is not None and self.requery_extra < 1:
            raise ConfigError("requery_extra must be >= 1 (or null for draws_per_question)")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if self.simulate_repeats < 1:
            raise ConfigError("simulate_repeats must be >= 1")
        if not self.profiles:
            raise ConfigError("at least one decoding profile is required")
        self.mutation.settings()

    @property
    def effective_requery_extra(self) -> int:
        return self.requery_extra if self.requery_extra is not None else self.draws_per_question

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["profiles"] = [p.to_dict() for p in self.profiles]
        return obj

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> PipelineConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return PipelineConfig.from_dict(obj)
