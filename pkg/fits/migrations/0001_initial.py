# Generated by Django 5.2.7 on 2026-10-17 09:12

import autoslug.fields
import django.db.models.deletion
import etc.helper_functions
from django.conf import settings
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
        migrations.swappable_dependency(settings.AUTH_USER_MODEL),
    ]

    operations = [
        migrations.CreateModel(
            name='FitRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=200)),
                ('slug', autoslug.fields.AutoSlugField(editable=False, populate_from='name', unique=True)),
                ('dataset', models.FileField(upload_to=etc.helper_functions.dataset_uploader)),
                ('family', models.CharField(choices=[('gaussian', 'Gaussian'), ('poisson', 'Poisson'), ('negative_binomial', 'Negative binomial'), ('compois', 'Conway-Maxwell-Poisson'), ('bernoulli', 'Bernoulli')], max_length=20)),
                ('link', models.CharField(choices=[('identity', 'Identity'), ('log', 'Log'), ('logit', 'Logit')], max_length=20)),
                ('status', models.CharField(choices=[('converged', 'Converged'), ('not_converged', 'Not converged')], max_length=20)),
                ('message', models.CharField(max_length=50)),
                ('nll', models.FloatField(blank=True, null=True)),
                ('n_obs', models.PositiveIntegerField(default=0)),
                ('n_times', models.PositiveIntegerField(default=0)),
                ('n_refs', models.PositiveIntegerField(default=0)),
                ('config', models.JSONField(default=dict)),
                ('artifact', models.TextField()),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('owner', models.ForeignKey(blank=True, null=True, on_delete=django.db.models.deletion.SET_NULL, related_name='fit_runs', to=settings.AUTH_USER_MODEL)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]
