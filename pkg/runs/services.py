from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from django.conf import settings
from django.db import transaction
from django.utils.text import slugify

from embeddings.services import Embedder, EmbeddingError, build_embedder
from environments.services import (
    EnvironmentGraph,
    Episode,
    NavigationGraphError,
    load_environment,
    load_episodes,
    score_episode,
)
from memory.services import ExperienceMemory, build_memory, seed_scene_descriptions
from memory.storage import load_memory, save_memory
from navigation.domain import RuleMode, TrajectoryStep
from navigation.services import EpisodeResult, FusionMode, NavigationConfig, run_episode
from policies.chat import MissingChatConfiguration
from policies.services import BackendKind, ChatBackend, DecisionBackend, GreedyBackend, OracleBackend, OracleScript
from reflection.services import (
    ReflectionOutcome,
    append_reflection_log,
    classify,
    reflect_and_commit,
    reflection_record,
)
from runs.models import EpisodeRecord, NavigationRun
from runs.reports import EpisodeRow, RunReport

logger = logging.getLogger(__name__)

TRACE_FORMAT_VERSION = 1
EMBEDDER_KINDS = ('hash', 'vocab', 'remote')


class RunConfigurationError(Exception):
    """Raised when a run cannot start: missing files, bad flags or unusable backends."""


class TraceFormatError(Exception):
    def __init__(self, message: str, *, path: str | Path | None = None, line: int | None = None) -> None:
        location = f'{path}:{line}' if path and line else (str(path) if path else '')
        super().__init__(f'{location}: {message}' if location else message)
        self.path = path
        self.line = line


@dataclass
class RunConfig:
    environment: Path
    episodes: Path
    memory: Optional[Path] = None
    backend: str = BackendKind.ORACLE
    rule_mode: str = RuleMode.CONSTRAINT
    tau: Optional[float] = None
    radius: Optional[float] = None
    max_steps: Optional[int] = None
    seed: int = 0
    continual: bool = False
    scene_description: bool = False
    passes: int = 1
    embedder: str = 'hash'
    fusion: str = FusionMode.ATTENTION
    workers: int = 1
    empty_memory: bool = False
    report: Optional[Path] = None
    traces_dir: Optional[Path] = None
    reflection_log: Optional[Path] = None
    record: bool = False
    dimension: Optional[int] = None
    check_geometry: bool = True

    def validate(self) -> None:
        for label, path in (('environment', self.environment), ('episodes', self.episodes)):
            if not Path(path).is_file():
                raise RunConfigurationError(f'The {label} file {path} does not exist.')
        if not self.empty_memory:
            if self.memory is None:
                raise RunConfigurationError('Pass a memory file or use an empty memory.')
            if not Path(self.memory).is_file():
                raise RunConfigurationError(f'The memory file {self.memory} does not exist.')
        if self.backend not in BackendKind.values:
            raise RunConfigurationError(f'Unknown backend "{self.backend}".')
        if self.rule_mode not in RuleMode.values:
            raise RunConfigurationError(f'Unknown rule mode "{self.rule_mode}".')
        if self.embedder not in EMBEDDER_KINDS:
            raise RunConfigurationError(f'Unknown embedder "{self.embedder}".')
        if self.fusion not in FusionMode.choices:
            raise RunConfigurationError(f'Unknown fusion mode "{self.fusion}".')
        if self.passes < 1:
            raise RunConfigurationError('At least one pass is required.')
        if self.workers < 1:
            raise RunConfigurationError('At least one worker is required.')
        if self.continual and self.workers > 1:
            raise RunConfigurationError('Continual runs are sequential; drop --workers.')
        if self.max_steps is not None and self.max_steps < 0:
            raise RunConfigurationError('--max-steps must not be negative.')

    @property
    def reflection_enabled(self) -> bool:
        return self.continual and not self.scene_description

    def as_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        return {key: str(value) if isinstance(value, Path) else value for key, value in values.items()}


@dataclass
class RunOutcome:
    report: RunReport
    memory: ExperienceMemory
    results: List[EpisodeResult] = field(default_factory=list)
    run: Optional[NavigationRun] = None

    @property
    def error_count(self) -> int:
        return self.report.error_count


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def embedder_for(
    kind: str,
    graph: EnvironmentGraph,
    episodes: Sequence[Episode] = (),
    *,
    dimension: Optional[int] = None,
) -> Embedder:
    """The embedder a run uses; memory files must be built with the same inputs."""
    texts = [' '.join(viewpoint.landmarks) for viewpoint in graph.viewpoints.values()]
    texts.extend(episode.instruction for episode in episodes)
    image_refs = [viewpoint.image_ref for viewpoint in graph.viewpoints.values()]
    return build_embedder(kind, texts=texts, image_refs=image_refs, dimension=dimension)


def build_memory_for(graph: EnvironmentGraph, embedder: Embedder, *, scene_description: bool = False) -> ExperienceMemory:
    memory = build_memory(graph, embedder)
    if scene_description:
        seed_scene_descriptions(memory)
    return memory


def build_memory_file(
    environment: str | Path,
    output: str | Path,
    *,
    episodes: Optional[str | Path] = None,
    embedder: str = 'hash',
    scene_description: bool = False,
    dimension: Optional[int] = None,
    check_geometry: bool = True,
) -> ExperienceMemory:
    graph = load_environment(environment, check_geometry=check_geometry)
    episode_list = load_episodes(episodes, graph) if episodes else []
    memory = build_memory_for(
        graph,
        embedder_for(embedder, graph, episode_list, dimension=dimension),
        scene_description=scene_description,
    )
    save_memory(memory, output)
    return memory


def backend_factory(kind: str, embedder: Embedder) -> Callable[[Episode], DecisionBackend]:
    if kind == BackendKind.ORACLE:
        return lambda episode: OracleBackend(OracleScript.following(episode.reference_path))
    if kind == BackendKind.GREEDY:
        greedy = GreedyBackend(embedder)
        return lambda episode: greedy
    if kind == BackendKind.CHAT:
        try:
            chat = ChatBackend()
        except MissingChatConfiguration as exc:
            raise RunConfigurationError(str(exc)) from exc
        return lambda episode: chat
    raise RunConfigurationError(f'Unknown backend "{kind}".')


def navigation_config(config: RunConfig, dimension: int) -> NavigationConfig:
    try:
        return NavigationConfig.from_settings(
            dimension=dimension,
            max_steps=config.max_steps,
            radius=config.radius,
            retrieval_threshold=config.tau,
            rule_mode=config.rule_mode,
            fusion=config.fusion,
            seed=config.seed,
        )
    except (ValueError, EmbeddingError) as exc:
        raise RunConfigurationError(str(exc)) from exc


def episode_row(pass_index: int, position: int, result: EpisodeResult, outcome: Optional[ReflectionOutcome]) -> EpisodeRow:
    metrics = result.metrics
    return EpisodeRow(
        pass_index=pass_index,
        position=position,
        episode_id=result.episode_id,
        trajectory=list(result.path),
        stopped=result.stopped,
        ne=metrics.ne,
        success=metrics.success,
        oracle_success=metrics.oracle_success,
        spl=metrics.spl,
        label=outcome.label if outcome else '',
        first_wrong_step=outcome.first_wrong_step if outcome else None,
        budget_exhausted=outcome.budget_exhausted if outcome else False,
        error=result.error,
    )


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

def trace_filename(pass_index: int, position: int, episode_id: str) -> str:
    return f'{pass_index:02d}-{position:04d}-{slugify(episode_id) or "episode"}.jsonl'


def trace_records(
    pass_index: int,
    position: int,
    episode: Episode,
    result: EpisodeResult,
    nav_config: NavigationConfig,
    backend: str,
) -> List[Dict[str, Any]]:
    header = {
        'record': 'header',
        'version': TRACE_FORMAT_VERSION,
        'pass': pass_index,
        'position': position,
        'episode_id': episode.id,
        'instruction': episode.instruction,
        'start_id': episode.start_id,
        'goal_id': episode.goal_id,
        'reference_path': list(episode.reference_path),
        'radius': nav_config.radius,
        'rule_mode': str(nav_config.rule_mode),
        'backend': str(backend),
    }
    steps = [{'record': 'step', **step} for step in result.trace]
    footer = {
        'record': 'footer',
        'path': list(result.path),
        'stopped': result.stopped,
        'error': result.error,
        'metrics': result.metrics.as_dict(),
    }
    return [header, *steps, footer]


def write_trace(directory: str | Path, records: Iterable[Dict[str, Any]], filename: str) -> Path:
    path = Path(directory) / filename
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        for record in records:
            handle.write(json.dumps(record, ensure_ascii=False) + '\n')
    return path


def clear_traces(directory: str | Path) -> int:
    """Remove trace files left by an earlier run so rescoring sees only this one."""
    stale = sorted(Path(directory).glob('*.jsonl'))
    for path in stale:
        path.unlink()
    if stale:
        logger.warning('Removed %d stale trace(s) from %s', len(stale), directory)
    return len(stale)


def _read_trace(path: Path) -> List[Tuple[int, Dict[str, Any]]]:
    records = []
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f'Invalid JSON ({exc.msg}).', path=path, line=number) from exc
            if not isinstance(record, dict) or record.get('record') not in ('header', 'step', 'footer'):
                raise TraceFormatError('Expected a header, step or footer record.', path=path, line=number)
            records.append((number, record))
    if not records or records[0][1]['record'] != 'header':
        raise TraceFormatError('Trace must start with a header record.', path=path, line=records[0][0] if records else None)
    if records[-1][1]['record'] != 'footer':
        raise TraceFormatError('Trace must end with a footer record.', path=path, line=records[-1][0])
    return records


def _history_from_steps(steps: Sequence[Tuple[int, Dict[str, Any]]], path: Path) -> Tuple[TrajectoryStep, ...]:
    history = []
    for number, record in steps:
        decision = record.get('decision')
        if decision is None:
            continue
        try:
            action = decision['action']
            origin = record['viewpoint_id']
        except (KeyError, TypeError) as exc:
            raise TraceFormatError(f'Step record is missing {exc}.', path=path, line=number) from exc
        stop = action == 'STOP'
        history.append(
            TrajectoryStep(
                origin_id=origin,
                viewpoint_id=origin if stop else action,
                rationale=decision.get('rationale', ''),
                analysis=decision.get('analysis', ''),
                plan=(),
                stop=stop,
                forced=bool(record.get('forced')),
            )
        )
    return tuple(history)


def score_trace_file(path: str | Path, graph: EnvironmentGraph) -> EpisodeRow:
    path = Path(path)
    records = _read_trace(path)
    header_line, header = records[0]
    footer_line, footer = records[-1]
    try:
        episode = Episode(
            id=str(header['episode_id']),
            instruction=str(header['instruction']),
            start_id=str(header['start_id']),
            goal_id=str(header['goal_id']),
            reference_path=tuple(header.get('reference_path') or ()),
        )
        radius = float(header['radius'])
        pass_index = int(header['pass'])
        position = int(header['position'])
        trajectory = tuple(str(item) for item in footer['path'])
        stopped = bool(footer['stopped'])
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f'Malformed header or footer: {exc}.', path=path, line=header_line) from exc
    try:
        graph.viewpoint(episode.goal_id)
        metrics = score_episode(graph, episode, trajectory, stopped, radius)
    except NavigationGraphError as exc:
        raise TraceFormatError(f'Trace does not match the environment: {exc}', path=path, line=footer_line) from exc

    result = EpisodeResult(
        episode_id=episode.id,
        path=trajectory,
        history=_history_from_steps(records[1:-1], path),
        stopped=stopped,
        metrics=metrics,
        error=str(footer.get('error') or ''),
    )
    try:
        outcome = classify(graph, episode, result, radius)
    except Exception as exc:
        raise TraceFormatError(f'Cannot classify the episode: {exc}', path=path, line=footer_line) from exc
    return episode_row(pass_index, position, result, outcome)


def score_traces(traces_dir: str | Path, graph: EnvironmentGraph) -> RunReport:
    """Recompute the report of a run from its trace directory."""
    directory = Path(traces_dir)
    if not directory.is_dir():
        raise TraceFormatError(f'Trace directory {directory} does not exist.')
    rows = [score_trace_file(path, graph) for path in sorted(directory.glob('*.jsonl'))]
    rows.sort(key=lambda row: (row.pass_index, row.position))
    return RunReport(rows=rows)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def _load_run_memory(config: RunConfig, graph: EnvironmentGraph, embedder: Embedder) -> ExperienceMemory:
    if config.empty_memory:
        return build_memory_for(graph, embedder, scene_description=config.scene_description)
    memory = load_memory(config.memory)
    if memory.dimension != embedder.dimension:
        raise RunConfigurationError(
            f'Memory file {config.memory} has dimension {memory.dimension}; the embedder uses {embedder.dimension}.'
        )
    missing = sorted(set(graph.viewpoints) - set(memory.units))
    if missing:
        raise RunConfigurationError(f'Memory file {config.memory} has no units for {", ".join(missing[:5])}.')
    if config.scene_description:
        seed_scene_descriptions(memory)
    return memory


def _run_pass_parallel(
    episodes: Sequence[Episode],
    run_one: Callable[[Episode], EpisodeResult],
    workers: int,
) -> List[EpisodeResult]:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, episodes))


def execute_run(
    config: RunConfig,
    *,
    backends: Optional[Callable[[Episode], DecisionBackend]] = None,
    embedder: Optional[Embedder] = None,
) -> RunOutcome:
    config.validate()
    try:
        graph = load_environment(config.environment, check_geometry=config.check_geometry)
        episodes = load_episodes(config.episodes, graph)
        embedder = embedder or embedder_for(config.embedder, graph, episodes, dimension=config.dimension)
        memory = _load_run_memory(config, graph, embedder)
    except RunConfigurationError:
        raise
    except Exception as exc:
        raise RunConfigurationError(str(exc)) from exc
    nav_config = navigation_config(config, embedder.dimension)
    if config.traces_dir:
        clear_traces(config.traces_dir)
    backends = backends or backend_factory(config.backend, embedder)
    checkpoint_every = getattr(settings, 'RUN_CHECKPOINT_EVERY', 10)

    def run_one(episode: Episode) -> EpisodeResult:
        try:
            return run_episode(graph, episode, memory, embedder, backends(episode), nav_config)
        except Exception as exc:
            logger.exception('Episode %s failed', episode.id)
            metrics = score_episode(graph, episode, [episode.start_id], False, nav_config.radius)
            return EpisodeResult(episode_id=episode.id, path=(episode.start_id,), history=(), stopped=False, metrics=metrics, error=str(exc))

    rows: List[EpisodeRow] = []
    results: List[EpisodeResult] = []
    completed = 0
    logger.info(
        'Starting run: %d episodes x %d passes, backend=%s, rule_mode=%s, continual=%s',
        len(episodes),
        config.passes,
        config.backend,
        config.rule_mode,
        config.continual,
    )
    for pass_index in range(1, config.passes + 1):
        outcomes: List[Optional[ReflectionOutcome]] = []
        if config.continual or config.workers == 1:
            pass_results = []
            for episode in episodes:
                result = run_one(episode)
                pass_results.append(result)
                if config.continual:
                    # Reflection must land before the next episode starts.
                    outcomes.append(_reflect(config, memory, graph, episode, result, embedder, nav_config, pass_index))
                    completed += 1
                    if config.reflection_enabled and config.memory and checkpoint_every and completed % checkpoint_every == 0:
                        save_memory(memory, config.memory)
        else:
            pass_results = _run_pass_parallel(episodes, run_one, config.workers)

        for position, (episode, result) in enumerate(zip(episodes, pass_results)):
            if config.continual:
                outcome = outcomes[position]
            else:
                outcome = _classify_quietly(graph, episode, result, nav_config.radius)
                _log_reflection(config, episode.id, outcome, {}, pass_index)
            rows.append(episode_row(pass_index, position, result, outcome))
            if config.traces_dir:
                write_trace(
                    config.traces_dir,
                    trace_records(pass_index, position, episode, result, nav_config, config.backend),
                    trace_filename(pass_index, position, episode.id),
                )
        results.extend(pass_results)

    if config.reflection_enabled and config.memory:
        save_memory(memory, config.memory)

    report = RunReport(rows=rows, config=config.as_dict())
    if config.report:
        report.write(config.report)
    run = record_run(config, report) if config.record else None
    logger.info('Run finished: %s', report.summary_lines()[0])
    return RunOutcome(report=report, memory=memory, results=results, run=run)


def _classify_quietly(
    graph: EnvironmentGraph,
    episode: Episode,
    result: EpisodeResult,
    radius: float,
) -> Optional[ReflectionOutcome]:
    try:
        return classify(graph, episode, result, radius)
    except Exception:
        logger.warning('Episode %s could not be classified', episode.id, exc_info=True)
        return None


def _log_reflection(
    config: RunConfig,
    episode_id: str,
    outcome: Optional[ReflectionOutcome],
    inserts: Dict[str, str],
    pass_index: int,
) -> None:
    if not config.reflection_log or outcome is None:
        return
    append_reflection_log(config.reflection_log, [reflection_record(episode_id, outcome, inserts, **{'pass': pass_index})])


def _reflect(
    config: RunConfig,
    memory: ExperienceMemory,
    graph: EnvironmentGraph,
    episode: Episode,
    result: EpisodeResult,
    embedder: Embedder,
    nav_config: NavigationConfig,
    pass_index: int,
) -> Optional[ReflectionOutcome]:
    outcome: Optional[ReflectionOutcome]
    inserts: Dict[str, str] = {}
    if result.error:
        logger.warning('Episode %s ended with an error; reflection skipped', episode.id)
        outcome = _classify_quietly(graph, episode, result, nav_config.radius)
    elif config.reflection_enabled:
        outcome, inserts = reflect_and_commit(memory, graph, episode, result, embedder=embedder, radius=nav_config.radius)
    else:
        outcome = _classify_quietly(graph, episode, result, nav_config.radius)
    _log_reflection(config, episode.id, outcome, inserts, pass_index)
    return outcome


@transaction.atomic
def record_run(config: RunConfig, report: RunReport) -> NavigationRun:
    aggregates = report.aggregates
    run = NavigationRun.objects.create(
        backend=config.backend,
        rule_mode=config.rule_mode,
        continual=config.continual,
        scene_description=config.scene_description,
        passes=config.passes,
        seed=config.seed,
        environment_path=str(config.environment),
        episodes_path=str(config.episodes),
        memory_path=str(config.memory or ''),
        config=config.as_dict(),
        episode_count=aggregates['episodes'],
        navigation_error=aggregates['ne'],
        success_rate=aggregates['sr'],
        oracle_success_rate=aggregates['osr'],
        spl=aggregates['spl'],
        status=NavigationRun.Status.COMPLETED_WITH_ERRORS if report.error_count else NavigationRun.Status.COMPLETED,
    )
    EpisodeRecord.objects.bulk_create(
        [
            EpisodeRecord(
                run=run,
                pass_index=row.pass_index,
                position=row.position,
                episode_id=row.episode_id,
                trajectory=row.trajectory,
                stopped=row.stopped,
                navigation_error=row.ne,
                success=row.success,
                oracle_success=row.oracle_success,
                spl=row.spl,
                label=row.label,
                first_wrong_step=row.first_wrong_step,
                error=row.error,
            )
            for row in report.rows
        ]
    )
    logger.info('Recorded run %s with %d episodes', run.pk, len(report.rows))
    return run
