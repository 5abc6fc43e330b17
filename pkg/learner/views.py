"""
Read-only API views for the run registry.
"""

from django.core.exceptions import ValidationError
from rest_framework.views import APIView
from rest_framework.response import Response
from rest_framework import status

from .models import TrainingRun
from .serializers import TrainingRunSerializer, TrainingRunSummarySerializer


class TrainingRunListView(APIView):
    """
    GET /api/runs/

    Recorded runs, newest first. Optional ?method=proposed|ksvd filter.
    """

    def get(self, request):
        runs = TrainingRun.objects.all()

        method = request.query_params.get('method')
        if method:
            runs = runs.filter(method=method)

        serializer = TrainingRunSummarySerializer(runs, many=True)
        return Response(serializer.data)


class TrainingRunDetailView(APIView):
    """
    GET /api/runs/<run_id>/

    One run with its per-cycle metrics.
    """

    def get(self, request, run_id):
        try:
            run = TrainingRun.objects.prefetch_related('cycle_records').get(pk=run_id)
        except (TrainingRun.DoesNotExist, ValidationError, ValueError):
            return Response(
                {'error': 'Run not found'},
                status=status.HTTP_404_NOT_FOUND
            )

        serializer = TrainingRunSerializer(run)
        return Response(serializer.data)
