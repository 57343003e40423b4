from django.apps import AppConfig


class SpatialConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'spatial'
    verbose_name = 'Spatial graph & covariance'
