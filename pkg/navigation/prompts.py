from __future__ import annotations

import logging
import re
from typing import Dict, List, Sequence

from django.template.loader import render_to_string

from memory.services import FailureExperience, FailureType, RetrievalHit, SceneDescription, SuccessExperience
from navigation.domain import Decision, Move, NavRule, PlanStep, PromptBundle, RuleKind, Stop

logger = logging.getLogger(__name__)

PROMPT_TEMPLATE = 'navigation/prompt.txt'
SECTION_PATTERN = re.compile(r'^\s*(analysis|planning|plan|rationale|action)\s*:\s*(.*)$', re.IGNORECASE)
PLAN_BULLET_PATTERN = re.compile(r'^\s*(?:\d+[.)]|[-*•])\s*')
STOP_TOKEN = 'STOP'

FAILURE_RULE_TEMPLATE = (
    'PRIOR FAILURE at viewpoint {viewpoint}: the choice made for reason ‘{rationale}’ caused '
    '{failure}. Do not repeat this decision in a similar situation.'
)
SUCCESS_RULE_TEMPLATE = (
    'PRIOR SUCCESS: instruction ‘{instruction}’ was completed via path {path}. '
    'Prefer the consistent next step when the context matches.'
)
SCENE_RULE_TEMPLATE = 'SCENE NOTE: {text}'


class DecisionError(Exception):
    """Base error for decision handling."""


class ParseError(DecisionError):
    """Raised when a backend reply does not follow the Analysis/Planning/Action format."""


def failure_type_name(code: str) -> str:
    return f'{FailureType(code).label} ({code})'


def synthesize_rule(hit: RetrievalHit, current_viewpoint: str) -> NavRule:
    experience = hit.experience
    if isinstance(experience, FailureExperience):
        return NavRule(
            kind=RuleKind.FAILURE_AVOIDANCE,
            text=FAILURE_RULE_TEMPLATE.format(
                viewpoint=experience.decision_viewpoint,
                rationale=experience.rationale,
                failure=failure_type_name(experience.failure_type),
            ),
            source_viewpoint=hit.unit.viewpoint_id,
            source_episode=experience.episode_id,
            image_ref=experience.image_ref or None,
            failure_type=experience.failure_type,
            avoid_viewpoint=experience.chosen_viewpoint,
            anchored=experience.decision_viewpoint == current_viewpoint,
        )
    if isinstance(experience, SuccessExperience):
        return NavRule(
            kind=RuleKind.SUCCESS_GUIDANCE,
            text=SUCCESS_RULE_TEMPLATE.format(
                instruction=experience.instruction,
                path=' -> '.join(experience.trajectory),
            ),
            source_viewpoint=hit.unit.viewpoint_id,
            source_episode=experience.episode_id,
            route=experience.trajectory,
            anchored=current_viewpoint in experience.trajectory,
        )
    if isinstance(experience, SceneDescription):
        return NavRule(
            kind=RuleKind.SCENE_DESCRIPTION,
            text=SCENE_RULE_TEMPLATE.format(text=experience.text),
            source_viewpoint=hit.unit.viewpoint_id,
        )
    raise DecisionError(f'Cannot build a rule from {type(experience).__name__}.')


def prompt_context(bundle: PromptBundle) -> Dict[str, object]:
    return {
        'instruction': bundle.instruction,
        'current': bundle.current,
        'observations': bundle.observations,
        'history': bundle.history,
        'map_nodes': bundle.map.sorted_nodes(),
        'map_edges': [f'{a}-{b}' for a, b in bundle.map.sorted_edges()],
        'rule': bundle.rule,
        'rule_mode': bundle.rule_mode,
        'candidate_ids': bundle.candidate_ids,
    }


def assemble_prompt(bundle: PromptBundle) -> str:
    return render_to_string(PROMPT_TEMPLATE, prompt_context(bundle))


def _split_sections(raw: str) -> Dict[str, List[str]]:
    sections: Dict[str, List[str]] = {}
    current = None
    for line in raw.splitlines():
        match = SECTION_PATTERN.match(line)
        if match:
            current = match.group(1).lower()
            if current == 'plan':
                current = 'planning'
            sections[current] = [match.group(2)] if match.group(2).strip() else []
            continue
        if current is not None and line.strip():
            sections[current].append(line)
    return sections


def _parse_plan(lines: Sequence[str]) -> tuple[PlanStep, ...]:
    steps = []
    for line in lines:
        text = PLAN_BULLET_PATTERN.sub('', line).strip()
        if not text:
            continue
        if '->' in text:
            action, goal = text.split('->', 1)
            steps.append(PlanStep(action=action.strip(), goal=goal.strip()))
        else:
            steps.append(PlanStep(action=text, goal=''))
    return tuple(steps)


def parse_decision(raw: str, candidates: Sequence[str]) -> Decision:
    sections = _split_sections(raw or '')
    action_lines = sections.get('action')
    if not action_lines:
        raise ParseError('Reply has no Action section.')
    value = action_lines[0].strip().strip('`"\'*. ')
    analysis = '\n'.join(line.strip() for line in sections.get('analysis', [])).strip()
    plan = _parse_plan(sections.get('planning', []))
    rationale = ' '.join(line.strip() for line in sections.get('rationale', [])).strip() or analysis

    if value.upper() == STOP_TOKEN:
        return Decision(analysis=analysis, plan=plan, action=Stop(), rationale=rationale or 'stop: goal judged reached')
    if value not in candidates:
        raise ParseError(f'Action "{value}" is not one of the candidates {list(candidates)}.')
    if not plan:
        plan = (PlanStep(action=f'move to {value}', goal=''),)
    return Decision(analysis=analysis, plan=plan, action=Move(value), rationale=rationale or f'move to {value}')
