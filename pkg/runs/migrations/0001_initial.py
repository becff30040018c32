# Generated by Django 5.2.6 on 2026-10-17 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='NavigationRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('backend', models.CharField(max_length=16)),
                ('rule_mode', models.CharField(max_length=16)),
                ('continual', models.BooleanField(default=False)),
                ('scene_description', models.BooleanField(default=False)),
                ('passes', models.PositiveIntegerField(default=1)),
                ('seed', models.IntegerField(default=0)),
                ('environment_path', models.CharField(max_length=500)),
                ('episodes_path', models.CharField(max_length=500)),
                ('memory_path', models.CharField(blank=True, max_length=500)),
                ('config', models.JSONField(blank=True, default=dict)),
                ('episode_count', models.PositiveIntegerField(default=0)),
                ('navigation_error', models.FloatField(blank=True, null=True)),
                ('success_rate', models.FloatField(blank=True, null=True)),
                ('oracle_success_rate', models.FloatField(blank=True, null=True)),
                ('spl', models.FloatField(blank=True, null=True)),
                ('status', models.CharField(choices=[('completed', 'Completed'), ('completed_with_errors', 'Completed with episode errors')], default='completed', max_length=32)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='EpisodeRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('pass_index', models.PositiveIntegerField(default=1)),
                ('position', models.PositiveIntegerField()),
                ('episode_id', models.CharField(max_length=120)),
                ('trajectory', models.JSONField(blank=True, default=list)),
                ('stopped', models.BooleanField(default=False)),
                ('navigation_error', models.FloatField()),
                ('success', models.BooleanField(default=False)),
                ('oracle_success', models.BooleanField(default=False)),
                ('spl', models.FloatField(default=0.0)),
                ('label', models.CharField(blank=True, max_length=16)),
                ('first_wrong_step', models.IntegerField(blank=True, null=True)),
                ('error', models.TextField(blank=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='episodes', to='runs.navigationrun')),
            ],
            options={
                'ordering': ['run', 'pass_index', 'position'],
                'unique_together': {('run', 'pass_index', 'position')},
            },
        ),
    ]
