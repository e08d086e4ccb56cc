"""
Experiment harness: config documents in, CSV reports and SVG plots out.
"""

import copy
import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from django.conf import settings

from . import memory
from .condenser import CondenseConfig, LossWeights
from .datagen import SynthSpec, generate_dataset
from .exceptions import ConfigError, DomainError
from .incremental import IncrementalRun, RunResult, TaskSplit, TrainConfig
from .memory import MemoryConfig
from .plotting import emit_plot
from .serializers import AblationSerializer, ExperimentSerializer, validate

logger = logging.getLogger(__name__)

STAGE_COLUMNS = ['stage', 'seen_classes', 'acc_cnn', 'acc_nme', 'memory_mb']
SUMMARY_COLUMNS = ['metric', 'mean', 'std', 'seeds']
MEMORY_COLUMNS = ['frames', 'videos', 'bytes', 'mb']

BUDGET_AXIS = 'memory.budget'


@dataclass
class ExperimentConfig:
    name: str
    data: dict
    split: TaskSplit
    train: TrainConfig
    condense: CondenseConfig
    memory: MemoryConfig
    output_dir: Path
    seeds: List[int]
    shift_fold: float = 0.125
    # the validated document, defaults filled in
    document: dict = field(default_factory=dict)

    def synth_spec(self, seed: int) -> SynthSpec:
        return SynthSpec(**self.data, seed=seed)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: Dict[int, RunResult]
    stages: pd.DataFrame
    summary: pd.DataFrame
    files: Dict[str, Path] = field(default_factory=dict)


@dataclass
class AblationReport:
    name: str
    table: pd.DataFrame
    path: Optional[Path] = None


def read_document(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except OSError as exc:
        raise ConfigError({'config': [f"Cannot read {path}: {exc.strerror}"]}) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError({'config': [f"Invalid JSON at line {exc.lineno}: {exc.msg}"]}) from exc


def _plain(value):
    """Validated data as plain JSON types."""
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def build_config(document: dict) -> ExperimentConfig:
    """Validate an experiment document and turn it into engine configs."""
    validated = _plain(validate(ExperimentSerializer, document))
    train = dict(validated['train'])
    shift_fold = train.pop('shift_fold')
    condense = dict(validated['condense'])
    loss_weights = condense.pop('loss_weights')
    mem = validated['memory']
    split = validated['split']

    seeds = list(settings.CONDENSA_SEED or validated['seeds'])
    output_dir = Path(validated.get('output_dir') or Path(settings.CONDENSA_OUTPUT_DIR) / validated['name'])
    try:
        config = ExperimentConfig(
            name=validated['name'],
            data=validated['data'],
            split=(
                TaskSplit(split['stages']) if 'stages' in split
                else TaskSplit.from_counts(split['base_classes'], split['increment'], validated['data']['num_classes'])
            ),
            train=TrainConfig(**train),
            condense=CondenseConfig(**condense, loss_weights=LossWeights(**loss_weights), store_float=mem['store_float']),
            memory=MemoryConfig(**mem),
            output_dir=output_dir,
            seeds=seeds,
            shift_fold=shift_fold,
            document=validated,
        )
        config.synth_spec(seeds[0])
    except DomainError as exc:
        raise ConfigError({'config': [str(exc)]}) from exc
    return config


def load_config(source: Union[str, Path, dict, ExperimentConfig]) -> ExperimentConfig:
    if isinstance(source, ExperimentConfig):
        return source
    if isinstance(source, dict):
        return build_config(source)
    return build_config(read_document(source))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def run_seed(config: ExperimentConfig, seed: int) -> RunResult:
    dataset = generate_dataset(config.synth_spec(seed))
    runner = IncrementalRun(
        dataset,
        config.split,
        replace(config.train, seed=seed),
        config.condense,
        config.memory,
        shift_fold=config.shift_fold,
    )
    return runner.run()


def run_seeds(config: ExperimentConfig) -> Dict[int, RunResult]:
    """Independent pipelines, one per seed, kept in config order."""
    results = {}
    for seed in config.seeds:
        logger.info(f"{config.name}: seed {seed}")
        results[seed] = run_seed(config, seed)
    return results


def stage_table(results: Dict[int, RunResult]) -> pd.DataFrame:
    rows = [
        {'seed': seed, **report.as_row()}
        for seed, result in results.items()
        for report in result.reports
    ]
    return pd.DataFrame(rows, columns=['seed', *STAGE_COLUMNS])


def summarize(results: Dict[int, RunResult]) -> pd.DataFrame:
    """
    Seed statistics of per-run metrics: average accuracy over stages, final
    stage accuracy and final memory. Std is the sample std, 0 for one seed.
    """
    per_seed = pd.DataFrame([
        {
            'avg_acc_cnn': result.average('acc_cnn'),
            'avg_acc_nme': result.average('acc_nme'),
            'final_acc_cnn': result.reports[-1].acc_cnn,
            'final_acc_nme': result.reports[-1].acc_nme,
            'final_memory_mb': result.reports[-1].memory_mb,
        }
        for result in results.values()
    ])
    count = len(per_seed)
    rows = []
    for metric in per_seed.columns:
        values = per_seed[metric].to_numpy(dtype=np.float64)
        std = float(np.std(values, ddof=1)) if count > 1 else 0.0
        rows.append({'metric': metric, 'mean': float(np.mean(values)), 'std': std, 'seeds': count})
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def stage_means(stages: pd.DataFrame) -> pd.DataFrame:
    means = stages.groupby(['stage', 'seen_classes'], sort=True)[['memory_mb', 'acc_cnn', 'acc_nme']].mean()
    return means.reset_index()


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, lineterminator='\n')
    logger.info(f"Wrote {path}")
    return path


def run_experiment(source, output_dir=None) -> ExperimentReport:
    """
    Run every seed of an experiment and write its reports:
    stages.csv, summary.csv, memory.csv, stage_means.csv,
    accuracy_vs_budget.svg and one FMEX bank per seed.
    """
    config = load_config(source)
    if output_dir is not None:
        config = replace(config, output_dir=Path(output_dir))
    results = run_seeds(config)

    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    stages = stage_table(results)
    summary = summarize(results)
    spec = config.synth_spec(config.seeds[0])
    budget = pd.DataFrame(
        memory.budget_table(config.memory.budget_grid, spec.height, spec.width, spec.channels),
        columns=MEMORY_COLUMNS,
    )

    files = {
        'stages': _write_csv(stages[STAGE_COLUMNS], out / 'stages.csv'),
        'summary': _write_csv(summary, out / 'summary.csv'),
        'memory': _write_csv(budget, out / 'memory.csv'),
        'stage_means': _write_csv(stage_means(stages), out / 'stage_means.csv'),
    }
    files['plot'] = emit_plot(
        files['stage_means'], 'memory_mb', ['acc_cnn', 'acc_nme'], out / 'accuracy_vs_budget.svg',
        title=f"{config.name}: accuracy vs memory",
    )
    for seed, result in results.items():
        path = out / f"bank_seed{seed}.fmex"
        memory.store(result.bank, path, result.params)
        files[f"bank_seed{seed}"] = path

    logger.info(f"{config.name}: reports in {out}")
    return ExperimentReport(config=config, results=results, stages=stages, summary=summary, files=files)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def _set_dotted(document: dict, key: str, value):
    if key == BUDGET_AXIS:
        if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) for v in value)):
            raise ConfigError({f"axes.{key}": [f"Expected [frames, videos], got {value!r}"]})
        section = document.setdefault('memory', {})
        section['frames_per_exemplar'], section['videos_per_class'] = value
        return
    *parents, leaf = key.split('.')
    node = document
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError({f"axes.{key}": [f"{part!r} is not a section"]})
        node = child
    node[leaf] = value


def _cell_label(value):
    if isinstance(value, list) and len(value) == 2:
        return f"{value[0]}Fx{value[1]}V"
    return value


def ablation_cells(source) -> Tuple[dict, List[str], List[Tuple[tuple, ExperimentConfig]]]:
    """
    Validate a grid document and build the config of every cartesian cell.

    Returns the validated grid, the axis keys and one (axis values, config) pair per cell.
    """
    document = source if isinstance(source, dict) else read_document(source)
    grid = _plain(validate(AblationSerializer, document))
    axes = grid['axes']
    if not axes or any(len(values) == 0 for values in axes.values()):
        raise DomainError("Ablation grid is empty")

    keys = list(axes)
    cells = []
    for index, values in enumerate(itertools.product(*(axes[k] for k in keys))):
        cell = copy.deepcopy(grid['base'])
        for key, value in zip(keys, values):
            _set_dotted(cell, key, value)
        cell['name'] = f"{grid['name']}-{index}"
        try:
            cells.append((values, build_config(cell)))
        except ConfigError as exc:
            raise ConfigError({f"cell{index}.{k}": v for k, v in exc.errors.items()}) from exc
    return grid, keys, cells


def run_ablation(source, output_dir=None) -> AblationReport:
    """
    One row per cartesian cell of the grid axes with seed-mean metrics.
    """
    grid, keys, cells = ablation_cells(source)
    rows = []
    for index, (values, config) in enumerate(cells):
        logger.info(f"{grid['name']} cell {index}: " + ', '.join(f"{k}={v}" for k, v in zip(keys, values)))
        summary = summarize(run_seeds(config)).set_index('metric')
        row = {key: _cell_label(value) for key, value in zip(keys, values)}
        row.update({
            'avg_acc_cnn': summary.loc['avg_acc_cnn', 'mean'],
            'avg_acc_cnn_std': summary.loc['avg_acc_cnn', 'std'],
            'avg_acc_nme': summary.loc['avg_acc_nme', 'mean'],
            'avg_acc_nme_std': summary.loc['avg_acc_nme', 'std'],
            'memory_mb': summary.loc['final_memory_mb', 'mean'],
            'seeds': int(summary.loc['avg_acc_cnn', 'seeds']),
        })
        rows.append(row)

    table = pd.DataFrame(rows)
    out = Path(output_dir or grid.get('output_dir') or Path(settings.CONDENSA_OUTPUT_DIR) / grid['name'])
    out.mkdir(parents=True, exist_ok=True)
    path = _write_csv(table, out / 'ablation.csv')
    return AblationReport(name=grid['name'], table=table, path=path)
