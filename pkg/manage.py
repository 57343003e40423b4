#!/usr/bin/env python
"""
stnngp command line: fit, predict, simulate, residuals, graph, simstudy,
plus the usual Django commands (migrate, runserver, test).
"""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', os.environ.get('STNNGP_SETTINGS', 'core.settings'))
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Django is not importable; install requirements.txt into the active environment."
        ) from exc
    execute_from_command_line(sys.argv)


if __name__ == '__main__':
    main()
