"""
Training run registry.

One TrainingRun per recorded learning run, with one CycleRecord per cycle.
Rows are written once by RunRegistry and never edited.
"""

import uuid
from django.db import models
from django.core.validators import MinValueValidator


class TrainingRun(models.Model):
    """
    A finished learning run: its parameters, where its artifacts went and
    how it ended.
    """
    METHOD_CHOICES = [
        ('proposed', 'Fast coupled update'),
        ('ksvd', 'K-SVD baseline'),
    ]
    MODE_CHOICES = [
        ('single', 'Single dictionary'),
        ('coupled', 'Coupled dictionaries'),
        ('joint', 'Joint (3+ spaces)'),
    ]
    SCHEDULE_CHOICES = [
        ('graduated', 'Graduated'),
        ('constant', 'Constant'),
    ]

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    method = models.CharField(max_length=20, choices=METHOD_CHOICES, default='proposed')
    mode = models.CharField(max_length=20, choices=MODE_CHOICES)
    schedule_mode = models.CharField(max_length=20, choices=SCHEDULE_CHOICES)

    # LearnConfig snapshot
    cycles = models.PositiveIntegerField(validators=[MinValueValidator(1)])
    max_nonzeros = models.PositiveIntegerField(validators=[MinValueValidator(1)])
    error_threshold = models.FloatField(validators=[MinValueValidator(0.0)])
    natoms = models.PositiveIntegerField(validators=[MinValueValidator(1)])
    seed = models.BigIntegerField(default=0)

    # Data
    signal_count = models.PositiveIntegerField()
    space_dims = models.JSONField(default=list, help_text='Signal dimension of each feature space')

    # Artifacts
    model_path = models.CharField(max_length=500, blank=True)
    metrics_path = models.CharField(max_length=500, blank=True)

    # Outcome
    final_avg_nonzeros = models.FloatField(null=True, blank=True)
    final_avg_error = models.FloatField(null=True, blank=True)
    total_wall_time = models.FloatField(default=0.0)

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']
        verbose_name = 'Training Run'
        verbose_name_plural = 'Training Runs'

    def __str__(self):
        return f"{self.method} {self.mode} K={self.natoms} T0={self.max_nonzeros} [{self.id}]"


class CycleRecord(models.Model):
    """Metrics of one learning cycle."""
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name='cycle_records')
    cycle = models.PositiveIntegerField()
    wall_time = models.FloatField()
    avg_nonzeros = models.FloatField()
    avg_error = models.FloatField()
    schedule_limit = models.PositiveIntegerField()

    class Meta:
        ordering = ['run', 'cycle']
        verbose_name = 'Cycle Record'
        verbose_name_plural = 'Cycle Records'
        constraints = [
            models.UniqueConstraint(fields=['run', 'cycle'], name='unique_cycle_per_run'),
        ]

    def __str__(self):
        return f"cycle {self.cycle} of {self.run_id}"
