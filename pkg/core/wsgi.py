"""
WSGI entry point for the stnngp REST API (``application``), used by
runserver through WSGI_APPLICATION.

Settings come from STNNGP_SETTINGS, falling back to core.settings.
"""

import os

from django.core.wsgi import get_wsgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', os.environ.get('STNNGP_SETTINGS', 'core.settings'))

application = get_wsgi_application()
