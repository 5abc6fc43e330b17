"""
Admin configuration for the run registry. Runs are browse-only.
"""

from django.contrib import admin
from .models import TrainingRun, CycleRecord


class CycleRecordInline(admin.TabularInline):
    model = CycleRecord
    extra = 0
    readonly_fields = ['cycle', 'wall_time', 'avg_nonzeros', 'avg_error', 'schedule_limit']
    can_delete = False

    def has_add_permission(self, request, obj=None):
        return False


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = [
        'id', 'method', 'mode', 'schedule_mode', 'natoms', 'max_nonzeros',
        'error_threshold', 'signal_count', 'final_avg_nonzeros', 'final_avg_error', 'created_at'
    ]
    list_filter = ['method', 'mode', 'schedule_mode', 'created_at']
    search_fields = ['id', 'model_path', 'metrics_path']
    readonly_fields = [
        'id', 'method', 'mode', 'schedule_mode', 'cycles', 'max_nonzeros', 'error_threshold',
        'natoms', 'seed', 'signal_count', 'space_dims', 'model_path', 'metrics_path',
        'final_avg_nonzeros', 'final_avg_error', 'total_wall_time', 'created_at'
    ]
    inlines = [CycleRecordInline]
    date_hierarchy = 'created_at'
    ordering = ['-created_at']

    def has_add_permission(self, request):
        return False

    def has_change_permission(self, request, obj=None):
        return False


@admin.register(CycleRecord)
class CycleRecordAdmin(admin.ModelAdmin):
    list_display = ['run', 'cycle', 'schedule_limit', 'avg_nonzeros', 'avg_error', 'wall_time']
    list_filter = ['run__method']
    ordering = ['run', 'cycle']

    def has_add_permission(self, request):
        return False

    def has_change_permission(self, request, obj=None):
        return False
