"""
Writes finished learning runs to the run registry.
"""

import logging
from typing import Optional

from django.db import transaction

from .domain import CoupledModel, LearnConfig
from .models import TrainingRun, CycleRecord

logger = logging.getLogger(__name__)


class RunRegistry:
    """
    Records a learned model's configuration and per-cycle metrics.
    """

    @staticmethod
    def mode_for(spaces: int) -> str:
        if spaces == 1:
            return 'single'
        if spaces == 2:
            return 'coupled'
        return 'joint'

    @transaction.atomic
    def record(
        self,
        model: CoupledModel,
        config: LearnConfig,
        space_dims,
        method: str = 'proposed',
        schedule_mode: Optional[str] = None,
        model_path: str = '',
        metrics_path: str = '',
    ) -> TrainingRun:
        """
        Create a TrainingRun and its CycleRecords in one transaction.
        """
        metrics = model.metrics
        last = metrics[-1] if metrics else None

        run = TrainingRun.objects.create(
            method=method,
            mode=self.mode_for(model.spaces),
            schedule_mode=schedule_mode or config.schedule_mode,
            cycles=config.cycles,
            max_nonzeros=config.max_nonzeros,
            error_threshold=config.error_threshold,
            natoms=config.natoms,
            seed=config.seed,
            signal_count=model.code.count,
            space_dims=[int(d) for d in space_dims],
            model_path=str(model_path),
            metrics_path=str(metrics_path),
            final_avg_nonzeros=last.avg_nonzeros if last else None,
            final_avg_error=last.avg_error if last else None,
            total_wall_time=sum(m.wall_time for m in metrics),
        )

        CycleRecord.objects.bulk_create([
            CycleRecord(
                run=run,
                cycle=m.cycle,
                wall_time=m.wall_time,
                avg_nonzeros=m.avg_nonzeros,
                avg_error=m.avg_error,
                schedule_limit=m.schedule_limit,
            )
            for m in metrics
        ])

        logger.info(f"Recorded {method} run {run.id} with {len(metrics)} cycles")
        return run
