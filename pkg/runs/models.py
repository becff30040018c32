from __future__ import annotations

from django.db import models


class TimeStampedModel(models.Model):
    """Abstract base model that stores creation and update timestamps."""

    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        abstract = True


class NavigationRun(TimeStampedModel):
    class Status(models.TextChoices):
        COMPLETED = 'completed', 'Completed'
        COMPLETED_WITH_ERRORS = 'completed_with_errors', 'Completed with episode errors'

    backend = models.CharField(max_length=16)
    rule_mode = models.CharField(max_length=16)
    continual = models.BooleanField(default=False)
    scene_description = models.BooleanField(default=False)
    passes = models.PositiveIntegerField(default=1)
    seed = models.IntegerField(default=0)
    environment_path = models.CharField(max_length=500)
    episodes_path = models.CharField(max_length=500)
    memory_path = models.CharField(max_length=500, blank=True)
    config = models.JSONField(default=dict, blank=True)
    episode_count = models.PositiveIntegerField(default=0)
    navigation_error = models.FloatField(null=True, blank=True)
    success_rate = models.FloatField(null=True, blank=True)
    oracle_success_rate = models.FloatField(null=True, blank=True)
    spl = models.FloatField(null=True, blank=True)
    status = models.CharField(max_length=32, choices=Status.choices, default=Status.COMPLETED)

    class Meta:
        ordering = ['-created_at']

    def __str__(self) -> str:
        return f'Run {self.pk} ({self.backend}, {self.rule_mode})'


class EpisodeRecord(TimeStampedModel):
    run = models.ForeignKey(NavigationRun, on_delete=models.CASCADE, related_name='episodes')
    pass_index = models.PositiveIntegerField(default=1)
    position = models.PositiveIntegerField()
    episode_id = models.CharField(max_length=120)
    trajectory = models.JSONField(default=list, blank=True)
    stopped = models.BooleanField(default=False)
    navigation_error = models.FloatField()
    success = models.BooleanField(default=False)
    oracle_success = models.BooleanField(default=False)
    spl = models.FloatField(default=0.0)
    label = models.CharField(max_length=16, blank=True)
    first_wrong_step = models.IntegerField(null=True, blank=True)
    error = models.TextField(blank=True)

    class Meta:
        ordering = ['run', 'pass_index', 'position']
        unique_together = ('run', 'pass_index', 'position')

    def __str__(self) -> str:
        return f'{self.episode_id} (pass {self.pass_index})'
