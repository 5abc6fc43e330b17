"""
Serializers for the run registry export.
"""

from rest_framework import serializers

from .models import TrainingRun, CycleRecord


class CycleRecordSerializer(serializers.ModelSerializer):

    class Meta:
        model = CycleRecord
        fields = ['cycle', 'wall_time', 'avg_nonzeros', 'avg_error', 'schedule_limit']


class TrainingRunSummarySerializer(serializers.ModelSerializer):
    """Run without its cycles, for listings."""

    class Meta:
        model = TrainingRun
        fields = [
            'id',
            'method',
            'mode',
            'schedule_mode',
            'cycles',
            'max_nonzeros',
            'error_threshold',
            'natoms',
            'seed',
            'signal_count',
            'space_dims',
            'final_avg_nonzeros',
            'final_avg_error',
            'total_wall_time',
            'created_at',
        ]


class TrainingRunSerializer(TrainingRunSummarySerializer):
    """Run with its per-cycle metrics."""
    cycle_records = CycleRecordSerializer(many=True, read_only=True)

    class Meta(TrainingRunSummarySerializer.Meta):
        fields = TrainingRunSummarySerializer.Meta.fields + [
            'model_path',
            'metrics_path',
            'cycle_records',
        ]
