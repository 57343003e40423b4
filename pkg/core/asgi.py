"""
ASGI entry point for the stnngp REST API (``application``).

Settings come from STNNGP_SETTINGS, falling back to core.settings.
"""

import os

from django.core.asgi import get_asgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', os.environ.get('STNNGP_SETTINGS', 'core.settings'))

application = get_asgi_application()
