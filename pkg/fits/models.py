from autoslug import AutoSlugField
from django.conf import settings
from django.db import models

from etc.choices import FAMILY_CHOICES, FIT_STATUS_CHOICES, LINK_CHOICES
from etc.helper_functions import dataset_uploader, json_float


class FitRun(models.Model):
    """
    A fitted model kept as its JSON artifact
    """
    name = models.CharField(max_length=200)
    slug = AutoSlugField(populate_from='name', unique=True)
    owner = models.ForeignKey(
        settings.AUTH_USER_MODEL,
        on_delete=models.SET_NULL,
        null=True,
        blank=True,
        related_name='fit_runs'
    )
    dataset = models.FileField(upload_to=dataset_uploader)
    family = models.CharField(max_length=20, choices=FAMILY_CHOICES)
    link = models.CharField(max_length=20, choices=LINK_CHOICES)
    status = models.CharField(max_length=20, choices=FIT_STATUS_CHOICES)
    message = models.CharField(max_length=50)
    nll = models.FloatField(null=True, blank=True)
    n_obs = models.PositiveIntegerField(default=0)
    n_times = models.PositiveIntegerField(default=0)
    n_refs = models.PositiveIntegerField(default=0)
    config = models.JSONField(default=dict)
    artifact = models.TextField()
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.name} ({self.family}/{self.link}, {self.status})"

    def load_artifact(self):
        """The stored fit, rebuilt once per instance"""
        from .artifacts import loads_fit_artifact

        if not hasattr(self, '_artifact'):
            self._artifact = loads_fit_artifact(self.artifact)
        return self._artifact

    def parameter_rows(self):
        fit = self.load_artifact().fit
        return [
            {'group': group, 'name': name, 'par': json_float(par), 'se': json_float(se), 'fixed': fixed}
            for group, name, par, se, fixed in fit.parameter_table()
        ]
