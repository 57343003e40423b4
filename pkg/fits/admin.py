from django.contrib import admin
from .models import FitRun


class FitRunAdmin(admin.ModelAdmin):
    list_display = ('id', 'name', 'owner', 'family', 'link', 'status', 'nll', 'n_obs', 'created_at')
    search_fields = ('name', 'slug', 'message')
    list_filter = ('family', 'link', 'status')
    readonly_fields = ('artifact', 'config', 'created_at', 'updated_at')


admin.site.register(FitRun, FitRunAdmin)
