"""
Incremental experiment engine

Runs the train / fuse / evaluate loop over an incremental stream, writes
reports and checkpoints, and drives the derived studies: the ablation
ladder, orthogonality variants, the rank/lambda sweep and the entropy pilot.
"""

import csv
from dataclasses import dataclass, field
import json
import os

import numpy as np

from cilkit.errors import ConfigError, DataError
from cilkit.models import Backbone, Classifier, ModelState
from cilkit.services.fusion_service import fuse
from cilkit.services.inference_service import InferenceEngine, InferenceStrategy, StrategyKind
from cilkit.services.trainer_service import pretrain_backbone, train_task, up_projection_gram_l1
from cilkit.utils.checkpoint import load_backbone, save_checkpoint
from cilkit.utils.datasets import (
    build_stream,
    load_feature_dataset,
    make_auxiliary_dataset,
    make_synthetic_stream,
)
from cilkit.utils.logging_config import ContextualLogger, run_context
from cilkit.utils.metrics import (
    accuracy,
    average_accuracy,
    entropy_accuracy_quartiles,
    final_accuracy,
    pair_error_rates,
    selection_accuracy,
)
from cilkit.utils.performance import PerformanceMonitor, TimingLog

logger = ContextualLogger(__name__)

SWEEP_RANKS = (8, 16, 32, 64, 128)
SWEEP_LAMBDAS = (0.001, 0.005, 0.01, 0.05, 0.1)


@dataclass
class StageResult:
    stage: int
    classes_seen: int
    accuracies: dict
    selection_accuracy: float

    def to_dict(self):
        return {
            "stage": self.stage,
            "classes_seen": self.classes_seen,
            "accuracies": dict(self.accuracies),
            "selection_accuracy": self.selection_accuracy,
        }


@dataclass
class RunReport:
    """Per-stage accuracies plus everything needed to reproduce the run"""

    config_echo: dict
    strategies: list
    stages: list = field(default_factory=list)
    training: list = field(default_factory=list)
    pair_errors: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)
    state: ModelState = None

    def accuracies(self, strategy):
        return [s.accuracies[strategy] for s in self.stages]

    def average(self, strategy):
        return average_accuracy(self.accuracies(strategy))

    def final(self, strategy):
        return final_accuracy(self.accuracies(strategy))

    @property
    def selection_accuracies(self):
        return [s.selection_accuracy for s in self.stages]

    def summary(self):
        return {name: {"average": self.average(name), "final": self.final(name)} for name in self.strategies}

    def to_dict(self, include_wall_clock=False):
        out = {
            "config": self.config_echo,
            "strategies": list(self.strategies),
            "stages": [s.to_dict() for s in self.stages],
            "summary": self.summary(),
            "training": self.training,
            "pair_errors": self.pair_errors,
        }
        if include_wall_clock:
            out["wall_clock"] = self.wall_clock
        return out


def _strategies(names):
    return [InferenceStrategy.from_name(name) for name in names]


def evaluate_stage(state, stream, stage, strategy=InferenceStrategy()):
    """A_b: Top-1 accuracy over the test union of tasks 1..stage"""
    return score_stage(state, stream, stage, [strategy]).accuracies[strategy.name]


def score_stage(state, stream, stage, strategies):
    """Accuracy of every strategy plus entropy-selection accuracy at one stage"""
    if not 1 <= stage <= state.num_tasks:
        raise DataError(f"stage {stage} is beyond the {state.num_tasks} trained tasks")
    test = stream.test_union(stage)
    wanted = list(strategies)
    selector = InferenceStrategy(StrategyKind.ENTROPY_ONLY)
    if selector not in wanted:
        wanted.append(selector)
    predictions = InferenceEngine(state).predict_all(test.x, wanted)
    true_tasks = stream.task_of_class()[test.y]
    return StageResult(
        stage=stage,
        classes_seen=stream.classes_seen(stage),
        accuracies={s.name: accuracy(predictions[s.name].classes, test.y) for s in strategies},
        selection_accuracy=selection_accuracy(predictions[selector.name].selected_tasks, true_tasks),
    )


def load_stream(cfg):
    """The configured stream: exported files when ``data`` is set, synthetic otherwise"""
    if cfg.uses_files:
        dims = {"seq_len": cfg.backbone.seq_len, "token_dim": cfg.backbone.token_dim}
        train = load_feature_dataset(cfg.data["train"], **dims)
        test = load_feature_dataset(cfg.data["test"], **dims)
        return build_stream(train, test, cfg.protocol)
    return make_synthetic_stream(cfg.synthetic, cfg.protocol)


def build_backbone(cfg, progress=False):
    """Load the configured backbone checkpoint or pre-train a fresh backbone"""
    if cfg.backbone_checkpoint:
        return load_backbone(cfg.backbone_checkpoint, cfg.backbone)
    p = cfg.pretrain
    auxiliary = make_auxiliary_dataset(
        p.num_classes, p.instances_per_class, cfg.backbone.token_dim, cfg.backbone.seq_len, p.noise_std, p.seed
    )
    backbone = Backbone(cfg.backbone)
    pretrain_backbone(backbone, auxiliary, p, progress=progress)
    return backbone


def _write_stages_csv(report, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["stage", "classes_seen"] + list(report.strategies) + ["selection_accuracy"])
        for s in report.stages:
            writer.writerow(
                [s.stage, s.classes_seen]
                + [repr(s.accuracies[name]) for name in report.strategies]
                + [repr(s.selection_accuracy)]
            )


def write_json(payload, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def write_run_outputs(report, output_dir, save_model=True):
    """report.json, timings.json, stages.csv and the model/ checkpoint"""
    os.makedirs(output_dir, exist_ok=True)
    write_json(report.to_dict(), os.path.join(output_dir, "report.json"))
    write_json(report.wall_clock, os.path.join(output_dir, "timings.json"))
    _write_stages_csv(report, os.path.join(output_dir, "stages.csv"))
    if save_model and report.state is not None:
        save_checkpoint(report.state, os.path.join(output_dir, "model"))
    logger.info(f"Run outputs written to {output_dir}")


def run_experiment(cfg, output_dir=None, backbone=None, stream=None, progress=False):
    """
    Train, fuse and evaluate every task of the configured stream

    Args:
        cfg: ExperimentConfig (validated here before any work)
        output_dir: where to write report files and the model checkpoint
        backbone: frozen backbone to reuse instead of building one
        stream: IncrementalStream to reuse instead of loading one
        progress: show tqdm bars

    Returns:
        RunReport (with the final ModelState attached)
    """
    cfg.validate()
    strategies = _strategies(cfg.strategies)
    timings = TimingLog()
    run_id = f"{cfg.name}-s{cfg.seed}"

    with run_context(run_id=run_id):
        log = logger.bind(run=run_id)
        if stream is None:
            with PerformanceMonitor("load stream", timings):
                stream = load_stream(cfg)
        if stream.num_tasks != cfg.protocol.num_tasks:
            raise ConfigError(
                f"stream has {stream.num_tasks} tasks, protocol {cfg.protocol.label} expects {cfg.protocol.num_tasks}"
            )
        if backbone is None:
            with PerformanceMonitor("pretrain", timings):
                backbone = build_backbone(cfg, progress=progress)

        state = ModelState(backbone=backbone, classifier=Classifier(cfg.backbone.embed_dim), config_echo=cfg.to_dict())
        report = RunReport(config_echo=cfg.to_dict(), strategies=[s.name for s in strategies], state=state)
        log.info(f"Starting {cfg.protocol.label} over {stream.num_classes} classes with {len(strategies)} strategies")

        for task in stream.tasks:
            stage = task.task_id
            with run_context(stage=stage, task=task.task_id):
                with PerformanceMonitor(f"train task {stage}", timings):
                    result = train_task(task, state, cfg.train, progress=progress)
                with PerformanceMonitor(f"fuse stage {stage}", timings):
                    state.universal = fuse(state.task_adapters)
                with PerformanceMonitor(f"evaluate stage {stage}", timings):
                    stage_result = score_stage(state, stream, stage, strategies)

            report.training.append({"task": stage, **result.history[-1]})
            report.stages.append(stage_result)
            scores = " ".join(f"{name}={acc:.4f}" for name, acc in stage_result.accuracies.items())
            log.info(
                f"Stage {stage}/{stream.num_tasks} ({stage_result.classes_seen} classes): {scores} "
                f"selection={stage_result.selection_accuracy:.4f}"
            )

        if stream.confusable_pairs:
            test = stream.test_union(stream.num_tasks)
            predictions = InferenceEngine(state).predict_all(test.x, strategies)
            for strategy in strategies:
                pair, other = pair_error_rates(predictions[strategy.name].classes, test.y, stream.confusable_pairs)
                report.pair_errors[strategy.name] = {"pair": pair, "other": other}

        report.wall_clock = timings.as_dict()
        report.wall_clock["total"] = timings.total()
        if output_dir:
            write_run_outputs(report, output_dir)
        log.info(
            "Finished: " + " ".join(f"{name} A_B={v['final']:.4f} avg={v['average']:.4f}" for name, v in report.summary().items())
        )
    return report


class ExperimentService:
    """Runs experiments and studies, sharing pre-trained backbones between runs"""

    def __init__(self, settings=None, output_dir=None):
        self.settings = settings
        self.output_dir = output_dir or (settings.get("OUTPUT_DIR") if settings else None) or "runs"
        self.progress = bool(settings.get("PROGRESS_BARS", False)) if settings else False
        self._backbones = {}
        self.stats = {"runs": 0, "failed_runs": 0, "last_error": None}

    def backbone_for(self, cfg):
        """Pre-trained backbone for ``cfg``, built once per backbone/pretrain setting"""
        key = json.dumps(
            {"backbone": cfg.backbone.to_dict(), "pretrain": cfg.pretrain.to_dict(), "path": cfg.backbone_checkpoint},
            sort_keys=True,
        )
        if key not in self._backbones:
            self._backbones[key] = build_backbone(cfg, progress=self.progress)
        return self._backbones[key]

    def _target(self, *parts):
        return os.path.join(self.output_dir, *[str(p) for p in parts])

    def run(self, cfg, output_dir=None, write=True):
        """One full experiment; outputs land in ``output_dir`` (default OUTPUT_DIR/<name>)"""
        target = output_dir or self._target(cfg.name)
        try:
            report = run_experiment(
                cfg,
                output_dir=target if write else None,
                backbone=self.backbone_for(cfg),
                progress=self.progress,
            )
            self.stats["runs"] += 1
            return report
        except Exception as e:
            self.stats["failed_runs"] += 1
            self.stats["last_error"] = str(e)
            logger.error(f"Experiment '{cfg.name}' failed: {e}")
            raise

    def _quiet_run(self, cfg, strategies=None):
        if strategies is not None:
            cfg.strategies = list(strategies)
        return self.run(cfg, write=False)

    def run_ablation(self, cfg, output_dir=None):
        """
        Four-step ladder: max-logit baseline, entropy selection, entropy
        selection with the orthogonal loss, then the dual-adapter ensemble

        Steps 1-2 come from one run with lambda0 = 0 and steps 3-4 from one
        run with the configured lambda0.
        """
        cfg.validate()
        if cfg.train.lambda0 == 0:
            raise ConfigError("ablation needs train.lambda0 > 0 for its orthogonal-loss steps")
        plain = self._quiet_run(
            cfg.with_train(lambda0=0.0),
            [StrategyKind.MAXLOGIT_BASELINE.value, StrategyKind.ENTROPY_ONLY.value],
        )
        orth = self._quiet_run(cfg.with_train(), [k.value for k in StrategyKind])
        ladder = [
            ("baseline", plain, StrategyKind.MAXLOGIT_BASELINE, 0.0),
            ("entropy selection", plain, StrategyKind.ENTROPY_ONLY, 0.0),
            ("entropy selection + orthogonal loss", orth, StrategyKind.ENTROPY_ONLY, cfg.train.lambda0),
            ("ensemble + orthogonal loss", orth, StrategyKind.ENSEMBLE, cfg.train.lambda0),
        ]
        result = {
            "steps": [
                {
                    "step": label,
                    "strategy": kind.value,
                    "lambda0": lam,
                    "final": report.final(kind.value),
                    "average": report.average(kind.value),
                }
                for label, report, kind, lam in ladder
            ],
            "strategies": orth.summary(),
            "pair_errors": orth.pair_errors,
        }
        write_json(result, os.path.join(output_dir or self._target(cfg.name), "ablation.json"))
        return result

    def run_orth_variants(self, cfg, output_dir=None):
        """UP / DOWN / BOTH orthogonality plus a lambda0 = 0 control"""
        cfg.validate()
        variants = [(mode, cfg.with_train(orth_mode=mode)) for mode in ("up", "down", "both")]
        variants.append(("none", cfg.with_train(lambda0=0.0, orth_mode="up")))
        rows = []
        for label, variant in variants:
            report = self._quiet_run(variant, [StrategyKind.ENSEMBLE.value])
            rows.append(
                {
                    "variant": label,
                    "lambda0": variant.train.lambda0,
                    "final": report.final(StrategyKind.ENSEMBLE.value),
                    "average": report.average(StrategyKind.ENSEMBLE.value),
                    "up_gram_l1": up_projection_gram_l1(report.state.task_adapters),
                }
            )
            logger.info(f"Orthogonality variant {label}: A_B={rows[-1]['final']:.4f} gram={rows[-1]['up_gram_l1']:.6f}")
        result = {"variants": rows}
        write_json(result, os.path.join(output_dir or self._target(cfg.name), "orth_variants.json"))
        return result

    def run_sweep(self, cfg, ranks=SWEEP_RANKS, lambdas=SWEEP_LAMBDAS, output_dir=None):
        """One-at-a-time sweep of the adapter rank and lambda0 around the defaults"""
        cfg.validate()
        result = {"rank": [], "lambda0": []}
        for rank in ranks:
            report = self._quiet_run(cfg.with_train(rank=rank), [StrategyKind.ENSEMBLE.value])
            result["rank"].append({"value": rank, **report.summary()[StrategyKind.ENSEMBLE.value]})
        for lam in lambdas:
            report = self._quiet_run(cfg.with_train(lambda0=lam), [StrategyKind.ENSEMBLE.value])
            result["lambda0"].append({"value": lam, **report.summary()[StrategyKind.ENSEMBLE.value]})
        write_json(result, os.path.join(output_dir or self._target(cfg.name), "sweep.json"))
        return result

    def run_pilot(self, cfg, output_dir=None):
        """
        Entropy pilot: mean entropy and accuracy of every adapter on every
        task's test data, plus accuracy per entropy quartile of the
        entropy-selected predictions
        """
        cfg.validate()
        report = self._quiet_run(cfg.with_train(), [StrategyKind.ENTROPY_ONLY.value])
        state = report.state
        stream = load_stream(cfg)
        engine = InferenceEngine(state)
        t = state.num_tasks
        mean_entropy = np.zeros((t, t))
        adapter_accuracy = np.zeros((t, t))
        for task in stream.tasks:
            outputs = engine.batch_outputs(task.test.x)
            column = task.task_id - 1
            mean_entropy[:, column] = outputs.entropies.mean(axis=1)
            for i in range(t):
                adapter_accuracy[i, column] = accuracy(outputs.task_probs[i].argmax(axis=1), task.test.y)

        test = stream.test_union(t)
        selected = engine.predict_batch(test.x, InferenceStrategy(StrategyKind.ENTROPY_ONLY))
        min_entropy = selected.entropies.min(axis=1)
        quartiles = entropy_accuracy_quartiles(min_entropy, selected.classes == test.y)

        own = np.diag(mean_entropy)
        matching_lowest = all(
            own[b] < mean_entropy[i, b] for b in range(t) for i in range(t) if i != b
        )
        result = {
            "mean_entropy": mean_entropy.tolist(),
            "adapter_accuracy": adapter_accuracy.tolist(),
            "quartile_accuracy": quartiles,
            "matching_adapter_lowest_entropy": matching_lowest,
        }
        write_json(result, os.path.join(output_dir or self._target(cfg.name), "pilot.json"))
        return result
