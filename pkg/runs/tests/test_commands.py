import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings

from memory.services import FailureExperience, FailureType, SceneDescription, insert_failure
from memory.storage import load_memory, save_memory
from navigation.tests.fixtures import corridor_episode, corridor_graph, fork_episode, fork_graph, write_scenario
from policies.chat import ChatTransportError
from runs.models import EpisodeRecord, NavigationRun
from runs.services import RunConfig, TraceFormatError, execute_run, score_traces


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.directory = Path(self.tmp.name)

    def corridor_files(self):
        episodes = [corridor_episode('A', 'from-a'), corridor_episode('B', 'from-b'), corridor_episode('X', 'from-x')]
        return write_scenario(self.directory, corridor_graph(), episodes)

    def fork_files(self):
        return write_scenario(self.directory, fork_graph(), [fork_episode()])

    def call(self, name, *args):
        out = StringIO()
        call_command(name, *args, stdout=out, stderr=StringIO())
        return out.getvalue()

    def read_report(self, name='report.json'):
        return json.loads((self.directory / name).read_text(encoding='utf-8'))


class BuildMemoryCommandTests(CommandTestCase):
    def test_one_unit_per_viewpoint(self):
        env, _ = self.corridor_files()
        output = self.call('build_memory', '--env', str(env), '--memory', str(self.directory / 'memory.json'))
        self.assertIn('6 units', output)
        memory = load_memory(self.directory / 'memory.json')
        self.assertEqual(sorted(memory.units), ['A', 'B', 'C', 'D', 'X', 'Y'])
        self.assertEqual(memory.experience_count(), 0)

    def test_scene_descriptions(self):
        env, _ = self.corridor_files()
        self.call('build_memory', '--env', str(env), '--memory', str(self.directory / 'memory.json'), '--scene-desc')
        memory = load_memory(self.directory / 'memory.json')
        self.assertEqual(memory.unit('D').experiences, [SceneDescription('D', 'Viewpoint D shows sofa.')])

    def test_rebuild_is_byte_identical(self):
        env, episodes = self.fork_files()
        for name in ('one.json', 'two.json'):
            self.call(
                'build_memory', '--env', str(env), '--memory', str(self.directory / name),
                '--episodes', str(episodes), '--embedder', 'vocab', '--dimension', '64',
            )
        self.assertEqual((self.directory / 'one.json').read_bytes(), (self.directory / 'two.json').read_bytes())

    def test_missing_environment(self):
        with self.assertRaises(CommandError):
            self.call('build_memory', '--env', str(self.directory / 'absent.json'), '--memory', str(self.directory / 'm.json'))


class RunEpisodesCommandTests(CommandTestCase):
    def test_oracle_reaches_every_goal(self):
        env, episodes = self.corridor_files()
        output = self.call(
            'run_episodes', '--env', str(env), '--episodes', str(episodes), '--empty-memory',
            '--radius', '0.5', '--report', str(self.directory / 'report.json'),
        )
        self.assertIn('all: 3 episodes, NE 0.00 m, SR 100%, OSR 100%, SPL 1.00', output)
        self.assertIn('labels: Success=3', output)
        self.assertEqual(self.read_report()['aggregates']['sr'], 100.0)

    def test_workers_give_the_same_rows(self):
        env, episodes = self.corridor_files()
        common = ['--env', str(env), '--episodes', str(episodes), '--empty-memory', '--radius', '0.5', '--backend', 'greedy']
        self.call('run_episodes', *common, '--report', str(self.directory / 'serial.json'))
        self.call('run_episodes', *common, '--workers', '3', '--report', str(self.directory / 'parallel.json'))
        self.assertEqual(self.read_report('serial.json')['episodes'], self.read_report('parallel.json')['episodes'])

    def continual_fork(self, *extra):
        env, episodes = self.fork_files()
        memory = self.directory / 'memory.json'
        self.call(
            'build_memory', '--env', str(env), '--memory', str(memory),
            '--episodes', str(episodes), '--embedder', 'vocab', '--dimension', '64',
        )
        self.call(
            'run_episodes', '--env', str(env), '--episodes', str(episodes), '--memory', str(memory),
            '--backend', 'greedy', '--embedder', 'vocab', '--dimension', '64', '--continual', '--passes', '2',
            '--report', str(self.directory / 'report.json'), *extra,
        )
        return self.read_report(), load_memory(memory)

    def test_continual_run_learns_from_its_failure(self):
        report, memory = self.continual_fork('--reflection-log', str(self.directory / 'reflection.jsonl'))
        self.assertEqual(report['passes']['1']['sr'], 0.0)
        self.assertEqual(report['passes']['2']['sr'], 100.0)
        self.assertEqual(report['episodes'][0]['trajectory'], ['p1', 'p2', 'p5'])
        self.assertEqual(report['episodes'][0]['label'], 'MRD')
        self.assertEqual(report['episodes'][0]['first_wrong_step'], 1)
        self.assertEqual(report['episodes'][1]['trajectory'], ['p1', 'p2', 'p6', 'p7'])
        failure = memory.unit('p2').experiences[0]
        self.assertEqual(failure.chosen_viewpoint, 'p5')
        self.assertEqual([item.kind for item in memory.unit('p7').experiences], ['success'])
        records = [json.loads(line) for line in (self.directory / 'reflection.jsonl').read_text().splitlines()]
        self.assertEqual([record['pass'] for record in records], [1, 2])
        self.assertEqual(records[0]['inserts'], {'p2': 'inserted'})

    def test_rule_only_helps_as_a_binding_constraint(self):
        for extra in (('--rule-mode', 'context'), ('--rule-mode', 'none'), ('--scene-desc',)):
            with self.subTest(extra=extra):
                report, _ = self.continual_fork(*extra)
                self.assertEqual(report['passes']['2']['sr'], 0.0)

    def test_scene_description_run_leaves_the_memory_file_alone(self):
        env, episodes = self.corridor_files()
        path = self.directory / 'memory.json'
        self.call('build_memory', '--env', str(env), '--memory', str(path), '--dimension', '64')
        memory = load_memory(path)
        lesson = FailureExperience(
            instruction='Walk down the hallway past the table to the sofa',
            decision_viewpoint='B',
            rationale='Turned into the closet',
            failure_type=FailureType.MRD,
            image_ref='img-b',
            episode_id='earlier',
            instr_embedding=tuple(np.full(64, 0.125)),
            chosen_viewpoint='X',
        )
        insert_failure(memory, lesson)
        save_memory(memory, path)
        before = path.read_bytes()
        self.call(
            'run_episodes', '--env', str(env), '--episodes', str(episodes), '--memory', str(path),
            '--dimension', '64', '--radius', '0.5', '--continual', '--scene-desc',
        )
        self.assertEqual(path.read_bytes(), before)
        self.assertEqual(load_memory(path).unit('B').experiences, [lesson])

    def test_identical_runs_write_identical_files(self):
        env, episodes = self.corridor_files()
        args = [
            '--env', str(env), '--episodes', str(episodes), '--empty-memory', '--backend', 'greedy',
            '--radius', '0.5', '--seed', '3', '--passes', '2',
            '--report', str(self.directory / 'report.json'), '--traces-dir', str(self.directory / 'traces'),
        ]
        self.call('run_episodes', *args)
        first = {path.name: path.read_bytes() for path in (self.directory / 'traces').glob('*.jsonl')}
        first_report = (self.directory / 'report.json').read_bytes()
        self.call('run_episodes', *args)
        second = {path.name: path.read_bytes() for path in (self.directory / 'traces').glob('*.jsonl')}
        self.assertEqual(len(first), 6)
        self.assertEqual(second, first)
        self.assertEqual((self.directory / 'report.json').read_bytes(), first_report)

    def test_missing_memory_file_is_a_configuration_error(self):
        env, episodes = self.corridor_files()
        with self.assertRaises(CommandError) as caught:
            self.call('run_episodes', '--env', str(env), '--episodes', str(episodes), '--memory', str(self.directory / 'none.json'))
        self.assertEqual(caught.exception.returncode, 1)

    def test_continual_runs_refuse_workers(self):
        env, episodes = self.corridor_files()
        with self.assertRaisesMessage(CommandError, 'sequential'):
            self.call('run_episodes', '--env', str(env), '--episodes', str(episodes), '--empty-memory', '--continual', '--workers', '2')

    @override_settings(CHAT_API_KEY='token', CHAT_API_BASE='https://chat.test/v1')
    def test_episode_errors_exit_with_code_two(self):
        env, episodes = self.corridor_files()
        failure = ChatTransportError('Chat completion failed after 2 attempts', status_code=500)
        with mock.patch('policies.chat.ChatClient.complete', side_effect=failure):
            with self.assertRaises(CommandError) as caught:
                self.call(
                    'run_episodes', '--env', str(env), '--episodes', str(episodes), '--empty-memory',
                    '--backend', 'chat', '--report', str(self.directory / 'report.json'),
                )
        self.assertEqual(caught.exception.returncode, 2)
        report = self.read_report()
        self.assertTrue(all('failed after 2 attempts' in row['error'] for row in report['episodes']))

    @override_settings(CHAT_API_KEY='')
    def test_unconfigured_chat_backend(self):
        env, episodes = self.corridor_files()
        with self.assertRaises(CommandError) as caught:
            self.call('run_episodes', '--env', str(env), '--episodes', str(episodes), '--empty-memory', '--backend', 'chat')
        self.assertEqual(caught.exception.returncode, 1)


class ScoreTracesTests(CommandTestCase):
    def run_with_traces(self):
        env, episodes = self.corridor_files()
        config = RunConfig(
            environment=env,
            episodes=episodes,
            empty_memory=True,
            backend='greedy',
            radius=0.5,
            passes=2,
            traces_dir=self.directory / 'traces',
        )
        return env, execute_run(config)

    def test_scoring_traces_reproduces_the_run(self):
        env, outcome = self.run_with_traces()
        self.assertEqual(len(list((self.directory / 'traces').glob('*.jsonl'))), 6)
        rescored = score_traces(self.directory / 'traces', corridor_graph())
        self.assertEqual(rescored.rows, outcome.report.rows)
        self.assertEqual(rescored.aggregates, outcome.report.aggregates)
        output = self.call('score_traces', '--traces-dir', str(self.directory / 'traces'), '--env', str(env))
        self.assertIn(outcome.report.summary_lines()[0], output)
        self.assertIn('Scored 6 trace(s).', output)

    def test_trace_layout(self):
        self.run_with_traces()
        path = self.directory / 'traces' / '01-0000-from-a.jsonl'
        records = [json.loads(line) for line in path.read_text(encoding='utf-8').splitlines()]
        self.assertEqual(records[0]['record'], 'header')
        self.assertEqual(records[0]['episode_id'], 'from-a')
        self.assertEqual(records[-1]['record'], 'footer')
        self.assertTrue(all(record['record'] == 'step' for record in records[1:-1]))
        self.assertIn('prompt', records[1])

    def test_stale_traces_are_cleared_before_a_run(self):
        self.run_with_traces()
        stale = self.directory / 'traces' / '03-0000-from-a.jsonl'
        stale.write_text((self.directory / 'traces' / '01-0000-from-a.jsonl').read_text(encoding='utf-8'), encoding='utf-8')
        _, outcome = self.run_with_traces()
        self.assertFalse(stale.exists())
        self.assertEqual(score_traces(self.directory / 'traces', corridor_graph()).rows, outcome.report.rows)

    def test_empty_directory(self):
        env, _ = self.corridor_files()
        (self.directory / 'traces').mkdir()
        output = self.call('score_traces', '--traces-dir', str(self.directory / 'traces'), '--env', str(env))
        self.assertIn('all: no episodes', output)
        self.assertIn('Scored 0 trace(s).', output)

    def test_corrupted_line_is_reported_with_its_location(self):
        env, _ = self.run_with_traces()
        path = self.directory / 'traces' / '01-0001-from-b.jsonl'
        lines = path.read_text(encoding='utf-8').splitlines()
        lines[1] = lines[1][:20]
        path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
        with self.assertRaisesMessage(TraceFormatError, f'{path}:2:'):
            score_traces(self.directory / 'traces', corridor_graph())
        with self.assertRaises(CommandError):
            self.call('score_traces', '--traces-dir', str(self.directory / 'traces'), '--env', str(env))


class RecordRunTests(TestCase):
    def test_run_and_episodes_are_stored(self):
        with tempfile.TemporaryDirectory() as directory:
            env, episodes = write_scenario(directory, corridor_graph(), [corridor_episode('A', 'from-a'), corridor_episode('X', 'from-x')])
            call_command(
                'run_episodes', '--env', str(env), '--episodes', str(episodes), '--empty-memory',
                '--radius', '0.5', '--record', stdout=StringIO(),
            )
        run = NavigationRun.objects.get()
        self.assertEqual(run.episode_count, 2)
        self.assertEqual(run.success_rate, 100.0)
        self.assertEqual(run.status, NavigationRun.Status.COMPLETED)
        self.assertEqual(list(run.episodes.values_list('episode_id', flat=True)), ['from-a', 'from-x'])
        self.assertEqual(EpisodeRecord.objects.filter(label='Success').count(), 2)
