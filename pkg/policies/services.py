from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from django.conf import settings
from django.db import models

from embeddings.services import Embedder, similarity_or_floor, tokenize, viewpoint_embedding
from memory.services import FailureType
from navigation.domain import NavRule, Observation, PromptBundle, RuleKind
from navigation.prompts import assemble_prompt
from policies.chat import ChatClient, ChatTransportError

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Raised when a backend cannot produce a reply; the episode is aborted."""


class OracleScriptError(BackendError):
    """Raised when a scripted action is not available at its step."""


class BackendKind(models.TextChoices):
    ORACLE = 'oracle', 'Oracle'
    GREEDY = 'greedy', 'Greedy embedding'
    CHAT = 'chat', 'Chat completion'


class InjectionKind(models.TextChoices):
    WRONG_TARGET = 'wrong', 'wrong target'
    PREMATURE_STOP = 'stop', 'premature stop'
    OVERSHOOT = 'overshoot', 'overshoot'


def format_reply(analysis: str, plan: Sequence[Tuple[str, str]], rationale: str, action: str) -> str:
    lines = [f'Analysis: {analysis}', 'Planning:']
    lines.extend(f'{number}. {step} -> {goal}' for number, (step, goal) in enumerate(plan, start=1))
    lines.append(f'Rationale: {rationale}')
    lines.append(f'Action: {action}')
    return '\n'.join(lines)


class DecisionBackend(ABC):
    name = ''

    @abstractmethod
    def decide(self, bundle: PromptBundle, candidates: Sequence[str], seed: int = 0) -> str:
        """Return a raw reply in the Analysis/Planning/Action format."""


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InjectedError:
    step: int
    kind: str
    target: str = ''
    count: int = 1

    def __post_init__(self) -> None:
        if self.kind not in InjectionKind.values:
            raise ValueError(f'Unknown injection kind "{self.kind}".')
        if self.kind == InjectionKind.WRONG_TARGET and not self.target:
            raise ValueError('A wrong-target injection needs a target viewpoint.')
        if self.kind == InjectionKind.OVERSHOOT and self.count < 1:
            raise ValueError('An overshoot injection needs a positive count.')


@dataclass(frozen=True)
class OracleScript:
    reference_path: Tuple[str, ...]
    injected_errors: Tuple[InjectedError, ...] = ()

    @classmethod
    def following(cls, reference_path: Sequence[str], *injections: InjectedError) -> 'OracleScript':
        return cls(reference_path=tuple(reference_path), injected_errors=tuple(injections))

    def injection_at(self, step: int) -> Optional[InjectedError]:
        """The injection governing ``step``; overshoots cover ``count`` consecutive steps."""
        for injection in self.injected_errors:
            if injection.step == step:
                return injection
            if injection.kind == InjectionKind.OVERSHOOT and injection.step <= step < injection.step + injection.count:
                return injection
        return None

    def injected_move_at(self, step: int) -> bool:
        injection = self.injection_at(step)
        return injection is not None and injection.kind != InjectionKind.PREMATURE_STOP


def oracle_decide(script: OracleScript, step: int, current: str, candidates: Sequence[str], visited: FrozenSet[str] = frozenset()) -> str:
    injection = script.injection_at(step)
    if injection is not None:
        if injection.kind == InjectionKind.PREMATURE_STOP:
            return format_reply(f'Step {step}: the goal appears to be here.', (), f'Step {step}: stopping at {current}', 'STOP')
        if injection.kind == InjectionKind.WRONG_TARGET:
            if injection.target not in candidates:
                raise OracleScriptError(f'Step {step}: scripted target "{injection.target}" is not a candidate at {current}.')
            target = injection.target
            rationale = f'Step {step}: scripted detour from {current} to {target}'
        else:
            unvisited = sorted(candidate for candidate in candidates if candidate not in visited)
            target = unvisited[0] if unvisited else sorted(candidates)[0]
            rationale = f'Step {step}: continuing past {current} toward {target}'
        return format_reply(rationale, ((f'move to {target}', 'follow the script'),), rationale, target)

    route = script.reference_path
    if step > 0 and script.injected_move_at(step - 1):
        return format_reply(f'Step {step}: off the scripted route.', (), f'Step {step}: stopping at {current}', 'STOP')
    if current not in route or current == route[-1]:
        return format_reply(f'Step {step}: end of the route.', (), f'Step {step}: stopping at {current}', 'STOP')
    position = step if step < len(route) and route[step] == current else route.index(current)
    target = route[position + 1]
    if target not in candidates:
        raise OracleScriptError(f'Step {step}: reference step "{target}" is not a candidate at {current}.')
    rationale = f'Step {step}: following the reference route from {current} to {target}'
    return format_reply(rationale, ((f'move to {target}', f'reach {route[-1]}'),), rationale, target)


class OracleBackend(DecisionBackend):
    name = BackendKind.ORACLE

    def __init__(self, script: OracleScript) -> None:
        self.script = script

    def decide(self, bundle: PromptBundle, candidates: Sequence[str], seed: int = 0) -> str:
        visited = frozenset(step.origin_id for step in bundle.history) | {bundle.current.viewpoint_id}
        return oracle_decide(self.script, len(bundle.history), bundle.current.viewpoint_id, candidates, visited)


# ---------------------------------------------------------------------------
# Greedy
# ---------------------------------------------------------------------------

def _shared_landmarks(instruction: str, landmarks: Sequence[str]) -> List[str]:
    wanted = set(tokenize(instruction))
    return [landmark for landmark in landmarks if wanted.intersection(tokenize(landmark))]


def _route_successor(rule: NavRule, current: str) -> Optional[str]:
    for here, following in zip(rule.route, rule.route[1:]):
        if here == current:
            return following
    return None


class GreedyBackend(DecisionBackend):
    """Deterministic baseline that follows instruction and candidate similarity.

    Rules only apply when rendered as a binding constraint: a failure rule vetoes
    its viewpoint, a success rule forces the route's next step.
    """

    name = BackendKind.GREEDY

    def __init__(self, embedder: Embedder, stop_threshold: Optional[float] = None) -> None:
        self.embedder = embedder
        self.stop_threshold = (
            stop_threshold if stop_threshold is not None else getattr(settings, 'GREEDY_STOP_THRESHOLD', 0.6)
        )

    def _score(self, instruction_vector, observation: Observation) -> float:
        vector = viewpoint_embedding(observation.image_ref, observation.landmarks, self.embedder)
        return similarity_or_floor(instruction_vector, vector, floor=-1.0)

    def score_candidates(self, bundle: PromptBundle, candidates: Sequence[str]) -> Dict[str, float]:
        instruction_vector = self.embedder.embed_text(bundle.instruction)
        scores = {
            observation.viewpoint_id: self._score(instruction_vector, observation)
            for observation in bundle.observations
            if observation.viewpoint_id in candidates
        }
        rule = bundle.active_rule
        if rule is None:
            return scores
        if rule.kind == RuleKind.FAILURE_AVOIDANCE and rule.avoid_viewpoint in scores and len(scores) > 1:
            scores[rule.avoid_viewpoint] = -math.inf
        elif rule.kind == RuleKind.SUCCESS_GUIDANCE:
            successor = _route_successor(rule, bundle.current.viewpoint_id)
            if successor in scores:
                scores[successor] = math.inf
        return scores

    def decide(self, bundle: PromptBundle, candidates: Sequence[str], seed: int = 0) -> str:
        instruction_vector = self.embedder.embed_text(bundle.instruction)
        current = bundle.current
        current_score = self._score(instruction_vector, current)
        landmark_score = similarity_or_floor(instruction_vector, self.embedder.embed_text(' '.join(current.landmarks)))
        scores = self.score_candidates(bundle, candidates)
        rule = bundle.active_rule
        stop_vetoed = bool(
            rule is not None
            and rule.kind == RuleKind.FAILURE_AVOIDANCE
            and rule.failure_type == FailureType.FGR
            and rule.anchored
        )

        best = min(scores, key=lambda candidate: (-scores[candidate], candidate)) if scores else None
        analysis = f'At {current.viewpoint_id} (similarity {current_score:.4f}); candidates ' + ', '.join(
            f'{candidate}={scores[candidate]:.4f}' for candidate in sorted(scores)
        )
        if best is None:
            wants_stop = True
        elif scores[best] == math.inf or stop_vetoed:
            wants_stop = False
        else:
            wants_stop = landmark_score >= self.stop_threshold or scores[best] <= current_score
        if wants_stop:
            rationale = f'{current.viewpoint_id} matches the instruction as well as any neighbor'
            return format_reply(analysis, (), rationale, 'STOP')

        observation = next(item for item in bundle.observations if item.viewpoint_id == best)
        shared = _shared_landmarks(bundle.instruction, observation.landmarks)
        if scores[best] == math.inf:
            rationale = f'{best} continues a route that previously succeeded'
        elif shared:
            rationale = f'{best} matched the instruction landmarks ({", ".join(shared)})'
        else:
            rationale = f'{best} is the closest match to the instruction'
        return format_reply(analysis, ((f'move to {best}', 'follow the instruction'),), rationale, best)


# ---------------------------------------------------------------------------
# Chat
# ---------------------------------------------------------------------------

class ChatBackend(DecisionBackend):
    name = BackendKind.CHAT

    def __init__(self, client: Optional[ChatClient] = None) -> None:
        self.client = client or ChatClient()

    def decide(self, bundle: PromptBundle, candidates: Sequence[str], seed: int = 0) -> str:
        try:
            return self.client.complete(assemble_prompt(bundle))
        except ChatTransportError as exc:
            raise BackendError(str(exc)) from exc
