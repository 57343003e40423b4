"""
=============================================================================
fits/views.py - Fit Run Views
=============================================================================
"""

import logging

import numpy as np
from django_filters.rest_framework import DjangoFilterBackend
from rest_framework import filters, viewsets
from rest_framework.decorators import action

from etc.exceptions import StnngpError
from etc.helper_functions import json_float
from etc.paginator_classes import DefaultPagination
from etc.permissions import IsOwnerOrStaff
from etc.responses import bad_request, created, success
from spatial.graph import mean_edge_distance, to_dot
from .artifacts import dumps_fit_artifact
from .config import validate_config
from .datasets import ingest
from .models import FitRun
from .serializers import (
    FitRunCreateSerializer, FitRunDetailSerializer, FitRunListSerializer,
    PredictRequestSerializer, ResidualRequestSerializer, SimulateRequestSerializer,
)
from .services import label_of, predict_points, residual_report, run_fit, simulate_fit

logger = logging.getLogger(__name__)


class FitRunViewSet(viewsets.ModelViewSet):
    """
    ViewSet for fitted models
    - Create: upload a dataset and configuration, fit synchronously
    - List/Retrieve/Delete: owner or staff
    - Actions: predict, simulate, residuals, graph, parameters
    """
    queryset = FitRun.objects.select_related('owner').all()
    permission_classes = [IsOwnerOrStaff]
    pagination_class = DefaultPagination
    filter_backends = [DjangoFilterBackend, filters.SearchFilter, filters.OrderingFilter]
    filterset_fields = ['family', 'link', 'status']
    search_fields = ['name', 'message']
    ordering_fields = ['created_at', 'nll', 'n_obs', 'name']
    ordering = ['-created_at']
    http_method_names = ['get', 'post', 'delete', 'head', 'options']

    def get_serializer_class(self):
        if self.action == 'create':
            return FitRunCreateSerializer
        elif self.action == 'list':
            return FitRunListSerializer
        return FitRunDetailSerializer

    def get_queryset(self):
        """Staff see every run, users their own"""
        user = self.request.user
        if user.is_staff:
            return self.queryset
        return self.queryset.filter(owner=user)

    def list(self, request, *args, **kwargs):
        queryset = self.filter_queryset(self.get_queryset())
        page = self.paginate_queryset(queryset)

        if page is not None:
            serializer = self.get_serializer(page, many=True)
            return self.get_paginated_response(serializer.data)

        serializer = self.get_serializer(queryset, many=True)
        return success(message="Fit runs retrieved successfully", data=serializer.data)

    def retrieve(self, request, *args, **kwargs):
        instance = self.get_object()
        try:
            data = self.get_serializer(instance).data
        except StnngpError as exc:
            return bad_request(message="Stored fit artifact is unreadable", errors={'artifact': [str(exc)]})
        return success(message="Fit run retrieved successfully", data=data)

    def create(self, request, *args, **kwargs):
        serializer = self.get_serializer(data=request.data)
        if not serializer.is_valid():
            return bad_request(message="Failed to create fit run", errors=serializer.errors)

        upload = serializer.validated_data['dataset']
        try:
            config = validate_config(serializer.validated_data['config'])
            dataset = ingest(upload, config)
            artifact = run_fit(dataset, config)
        except StnngpError as exc:
            return bad_request(message="Failed to fit model", errors={'detail': [str(exc)]})

        result = artifact.fit
        run = FitRun(
            name=serializer.validated_data['name'],
            owner=request.user,
            dataset=upload,
            family=config.family,
            link=config.link,
            status='converged' if result.converged else 'not_converged',
            message=result.message,
            nll=json_float(result.nll),
            n_obs=dataset.n_obs,
            n_times=dataset.n_times,
            n_refs=len(result.model.refs),
            config=config.as_dict(),
            artifact=dumps_fit_artifact(artifact),
        )
        run.save()
        run._artifact = artifact
        logger.info("Fit run %s stored: %s", run.slug, result.message)
        return created(
            message="Fit run created successfully",
            data=FitRunDetailSerializer(run, context=self.get_serializer_context()).data
        )

    def destroy(self, request, *args, **kwargs):
        instance = self.get_object()
        instance.dataset.delete(save=False)
        instance.delete()
        return success(message="Fit run deleted successfully")

    # ======================== Model Actions ========================

    def fitted_artifact(self):
        return self.get_object().load_artifact()

    @action(detail=True, methods=['get'])
    def parameters(self, request, pk=None):
        """Estimates with standard errors"""
        run = self.get_object()
        try:
            rows = run.parameter_rows()
        except StnngpError as exc:
            return bad_request(message="Stored fit artifact is unreadable", errors={'artifact': [str(exc)]})
        return success(message="Parameters retrieved successfully", data=rows)

    @action(detail=True, methods=['post'])
    def predict(self, request, pk=None):
        """Predictions at points given in input times"""
        serializer = PredictRequestSerializer(data=request.data)
        if not serializer.is_valid():
            return bad_request(message="Invalid prediction request", errors=serializer.errors)
        data = serializer.validated_data

        try:
            artifact = self.fitted_artifact()
            dataset = artifact.dataset
            points = data['points']
            dims = {len(point['coords']) for point in points}
            if dims != {dataset.coords.shape[1]}:
                return bad_request(
                    message="Invalid prediction request",
                    errors={'points': [f"Every point needs {dataset.coords.shape[1]} coordinates."]}
                )
            missing = sorted({
                name for point in points for name in dataset.covariate_names if name not in point['covariates']
            })
            if missing:
                return bad_request(
                    message="Invalid prediction request",
                    errors={'points': [f"Missing covariates: {', '.join(missing)}."]}
                )

            coords = np.array([point['coords'] for point in points], dtype=float)
            labels = np.array([point['time'] for point in points], dtype=np.int64)
            covariates = None
            if dataset.covariate_names:
                covariates = np.array(
                    [[point['covariates'][name] for name in dataset.covariate_names] for point in points]
                )
            table = predict_points(artifact, coords, labels, covariates,
                                   horizon=data.get('forecast_horizon'), hold_state=data['hold_state'])
        except StnngpError as exc:
            return bad_request(message="Prediction failed", errors={'detail': [str(exc)]})

        to_label = label_of(artifact)
        rows = [
            {
                'coords': [float(c) for c in record.coords],
                'time': to_label(record.t),
                'w': json_float(record.w),
                'w_se': json_float(record.w_se),
                'linear': json_float(record.linear),
                'linear_se': json_float(record.linear_se),
                'response': json_float(record.response),
                'response_se': json_float(record.response_se),
            }
            for record in table.records()
        ]
        return success(message="Predictions computed successfully", data=rows)

    @action(detail=True, methods=['post'])
    def simulate(self, request, pk=None):
        """Simulated responses at the fitted rows"""
        serializer = SimulateRequestSerializer(data=request.data)
        if not serializer.is_valid():
            return bad_request(message="Invalid simulation request", errors=serializer.errors)
        data = serializer.validated_data

        try:
            sims = simulate_fit(
                self.fitted_artifact(), data['n_sim'], conditional=data['conditional'], seed=data['seed'],
                family=data.get('family'), family_params=data['family_params'],
            )
        except StnngpError as exc:
            return bad_request(message="Simulation failed", errors={'detail': [str(exc)]})

        return success(message="Simulations computed successfully", data={
            'n_sim': sims.n_sim,
            'conditional': sims.conditional,
            'seed': sims.seed,
            'y': [[json_float(v) for v in row] for row in sims.y],
        })

    @action(detail=True, methods=['post'])
    def residuals(self, request, pk=None):
        """PIT residuals with the KS uniformity test"""
        serializer = ResidualRequestSerializer(data=request.data)
        if not serializer.is_valid():
            return bad_request(message="Invalid residual request", errors=serializer.errors)
        data = serializer.validated_data

        try:
            report = residual_report(self.fitted_artifact(), data['n_sim'], seed=data['seed'])
        except StnngpError as exc:
            return bad_request(message="Residuals failed", errors={'detail': [str(exc)]})

        return success(message="Residuals computed successfully", data={
            'statistic': json_float(report.statistic),
            'pvalue': json_float(report.pvalue),
            'direction': report.direction,
            'pit': [json_float(v) for v in report.residuals.values],
        })

    @action(detail=True, methods=['get'])
    def graph(self, request, pk=None):
        """Persistent neighbour graph as DOT"""
        try:
            model = self.fitted_artifact().model
            summary = mean_edge_distance(model.dag, model.refs)
            dot = to_dot(model.dag, model.refs)
        except StnngpError as exc:
            return bad_request(message="Graph unavailable", errors={'detail': [str(exc)]})

        return success(message="Graph retrieved successfully", data={
            'nodes': len(model.refs),
            'edges': model.dag.n_edges,
            'mean_edge_distance': json_float(summary.mean_edge_distance),
            'dot': dot,
        })
