from django.apps import AppConfig


class ObservationConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'observation'
    verbose_name = 'Response families & links'
