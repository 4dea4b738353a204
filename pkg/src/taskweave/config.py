"""Experiment configuration: JSON with an explicit schema version.

Unknown keys are errors (silent typos are the main reproducibility hazard).
A single master seed fans out to every submodule through named substreams,
so adding one consumer never perturbs another's randomness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import CorpusSpec, TaskGenSpec
from .errors import ValidationError

SCHEMA_VERSION = 1


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValidationError(f"unknown key(s) {unknown} in {path}")


def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ValidationError(f"missing required key {key!r} in {path}")
    return section[key]


@dataclass
class EncoderConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [32])
    embedding_dim: int = 16

    @classmethod
    def from_dict(cls, d: dict, path: str) -> "EncoderConfig":
        _check_keys(d, {"hidden_dims", "embedding_dim"}, path)
        return cls(**d)


@dataclass
class OptimizerConfig:
    learning_rate: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-6

    @classmethod
    def from_dict(cls, d: dict, path: str) -> "OptimizerConfig":
        _check_keys(d, {"learning_rate", "beta1", "beta2", "epsilon", "weight_decay"}, path)
        return cls(**d)


@dataclass
class BatchConfig:
    identities: int = 10
    positives: int = 4

    @classmethod
    def from_dict(cls, d: dict, path: str) -> "BatchConfig":
        _check_keys(d, {"identities", "positives"}, path)
        return cls(**d)


@dataclass
class CurriculumConfig:
    mode: str = "balanced"
    goals: dict[str, float] = field(default_factory=dict)
    batches_per_task: int = 1
    total_batches: int | None = None
    epsilon: float = 1e-8
    floor: float = 0.05
    accuracy_cadence: int = 1
    probe_batches: int = 2
    steps_per_epoch: int | None = None
    subsample: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, path: str) -> "CurriculumConfig":
        _check_keys(
            d,
            {
                "mode",
                "goals",
                "batches_per_task",
                "total_batches",
                "epsilon",
                "floor",
                "accuracy_cadence",
                "probe_batches",
                "steps_per_epoch",
                "subsample",
            },
            path,
        )
        return cls(**d)


@dataclass
class TrainingConfig:
    epochs: int = 5

    @classmethod
    def from_dict(cls, d: dict, path: str) -> "TrainingConfig":
        _check_keys(d, {"epochs"}, path)
        return cls(**d)


@dataclass
class EvaluationConfig:
    suites: list[str] = field(default_factory=lambda: ["scores", "geometry"])
    verification_pairs: int = 1500
    far_values: list[float] = field(default_factory=lambda: [1e-2, 1e-3])
    probe_window: int = 3
    probe_folds: int = 10
    variance_fraction: float = 0.99
    projection_max_pcs: int = 200

    @classmethod
    def from_dict(cls, d: dict, path: str) -> "EvaluationConfig":
        _check_keys(
            d,
            {
                "suites",
                "verification_pairs",
                "far_values",
                "probe_window",
                "probe_folds",
                "variance_fraction",
                "projection_max_pcs",
            },
            path,
        )
        cfg = cls(**d)
        bad = sorted(set(cfg.suites) - {"scores", "geometry"})
        if bad:
            raise ValidationError(f"unknown evaluation suite(s) {bad} in {path}")
        return cfg


@dataclass
class ForgettingConfig:
    pretrain_task: str = ""
    pretrain_steps: int = 60
    pretrain_batches_per_step: int = 1
    finetune_epochs: int = 5

    @classmethod
    def from_dict(cls, d: dict, path: str) -> "ForgettingConfig":
        _check_keys(
            d,
            {"pretrain_task", "pretrain_steps", "pretrain_batches_per_step", "finetune_epochs"},
            path,
        )
        return cls(**d)


_TASK_KEYS = {
    "name",
    "regime",
    "classes",
    "samples_per_class",
    "within_class_spread",
    "between_class_spread",
    "degradation_noise",
    "twin",
}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    tasks: list[TaskGenSpec]
    ambient_dim: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    margin: float = 0.35
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    forgetting: ForgettingConfig = field(default_factory=ForgettingConfig)

    def corpus_spec(self, seed: int) -> CorpusSpec:
        return CorpusSpec(tasks=tuple(self.tasks), seed=seed, ambient_dim=self.ambient_dim)

    def validate(self) -> None:
        from .curriculum import MODES

        if self.curriculum.mode not in MODES:
            raise ValidationError(f"unknown curriculum mode {self.curriculum.mode!r}")
        names = {t.name for t in self.tasks}
        for task in self.curriculum.goals:
            if task not in names:
                raise ValidationError(f"curriculum goal names unknown task {task!r}")
        for task in self.curriculum.subsample:
            if task not in names:
                raise ValidationError(f"subsample names unknown task {task!r}")
        if self.forgetting.pretrain_task and self.forgetting.pretrain_task not in names:
            raise ValidationError(
                f"forgetting pretrain_task {self.forgetting.pretrain_task!r} is not a task"
            )
        self.corpus_spec(seed=0).validate(self.batch.positives)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(
            d,
            {
                "schema_version",
                "seed",
                "output_dir",
                "corpus",
                "encoder",
                "optimizer",
                "batch",
                "margin",
                "curriculum",
                "training",
                "evaluation",
                "forgetting",
            },
            "config",
        )
        version = _require(d, "schema_version", "config")
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {version!r}")
        corpus = _require(d, "corpus", "config")
        _check_keys(corpus, {"ambient_dim", "tasks"}, "config.corpus")
        tasks = []
        for i, t in enumerate(_require(corpus, "tasks", "config.corpus")):
            _check_keys(t, _TASK_KEYS, f"config.corpus.tasks[{i}]")
            tasks.append(TaskGenSpec(**t))
        config = cls(
            seed=_require(d, "seed", "config"),
            output_dir=_require(d, "output_dir", "config"),
            tasks=tasks,
            ambient_dim=_require(corpus, "ambient_dim", "config.corpus"),
            encoder=EncoderConfig.from_dict(d.get("encoder", {}), "config.encoder"),
            optimizer=OptimizerConfig.from_dict(d.get("optimizer", {}), "config.optimizer"),
            batch=BatchConfig.from_dict(d.get("batch", {}), "config.batch"),
            margin=d.get("margin", 0.35),
            curriculum=CurriculumConfig.from_dict(d.get("curriculum", {}), "config.curriculum"),
            training=TrainingConfig.from_dict(d.get("training", {}), "config.training"),
            evaluation=EvaluationConfig.from_dict(d.get("evaluation", {}), "config.evaluation"),
            forgetting=ForgettingConfig.from_dict(d.get("forgetting", {}), "config.forgetting"),
        )
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "corpus": {
                "ambient_dim": self.ambient_dim,
                "tasks": [
                    {
                        "name": t.name,
                        "regime": t.regime,
                        "classes": t.classes,
                        "samples_per_class": t.samples_per_class,
                        "within_class_spread": t.within_class_spread,
                        "between_class_spread": t.between_class_spread,
                        "degradation_noise": t.degradation_noise,
                        "twin": t.twin,
                    }
                    for t in self.tasks
                ],
            },
            "encoder": vars(self.encoder),
            "optimizer": vars(self.optimizer),
            "batch": vars(self.batch),
            "margin": self.margin,
            "curriculum": vars(self.curriculum),
            "training": vars(self.training),
            "evaluation": vars(self.evaluation),
            "forgetting": vars(self.forgetting),
        }


def default_config(output_dir: str = "runs/benchmark", seed: int = 7_2025) -> ExperimentConfig:
    """The stock 4-task benchmark: one coarse task, a fine identity task with
    a degraded twin, and an intermediate task; 800 samples each."""
    tasks = [
        TaskGenSpec(
            name="objects",
            regime="coarse-category",
            classes=10,
            samples_per_class=80,
            within_class_spread=0.45,
            between_class_spread=1.0,
        ),
        TaskGenSpec(
            name="faces_hq",
            regime="fine-identity",
            classes=40,
            samples_per_class=20,
            within_class_spread=0.25,
            between_class_spread=1.0,
        ),
        TaskGenSpec(
            name="faces_lq",
            regime="fine-identity-degraded",
            classes=40,
            samples_per_class=20,
            within_class_spread=0.25,
            between_class_spread=1.0,
            degradation_noise=0.35,
            twin="faces_hq",
        ),
        TaskGenSpec(
            name="persons",
            regime="intermediate",
            classes=20,
            samples_per_class=40,
            within_class_spread=0.35,
            between_class_spread=1.0,
        ),
    ]
    config = ExperimentConfig(
        seed=seed,
        output_dir=output_dir,
        tasks=tasks,
        ambient_dim=24,
        encoder=EncoderConfig(hidden_dims=[48], embedding_dim=24),
        optimizer=OptimizerConfig(learning_rate=3e-3),
        batch=BatchConfig(identities=10, positives=4),
        margin=0.35,
        curriculum=CurriculumConfig(
            mode="balanced",
            goals={"objects": 0.95, "faces_hq": 0.95, "faces_lq": 0.9, "persons": 0.95},
            batches_per_task=1,
            steps_per_epoch=20,
        ),
        training=TrainingConfig(epochs=5),
        evaluation=EvaluationConfig(),
        forgetting=ForgettingConfig(pretrain_task="objects", pretrain_steps=60, finetune_epochs=10),
    )
    config.validate()
    return config
