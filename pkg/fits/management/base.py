"""
=============================================================================
fits/management/base.py - Shared Command Behaviour
=============================================================================

Exit codes: 0 success, 1 usage, 2 data/model error, 3 not converged.
"""

import logging
import os
import sys

from django.core.management.base import BaseCommand, CommandError

from etc.exceptions import EXIT_USAGE, StnngpError

logger = logging.getLogger(__name__)


class StnngpCommand(BaseCommand):
    """
    Runs handle_command and turns model errors into exit codes
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)

        def usage_error(message):
            if self._called_from_command_line:
                parser.print_usage(sys.stderr)
                sys.stderr.write(f"{prog_name} {subcommand}: error: {message}\n")
                sys.exit(EXIT_USAGE)
            raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)

        parser.error = usage_error
        return parser

    def add_arguments(self, parser):
        parser.add_argument(
            '--threads', type=int, default=None,
            help='Worker threads for the optimiser (default: available cores)',
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        threads = options.get('threads')
        if threads is not None and threads < 1:
            raise CommandError("--threads must be at least 1.", returncode=EXIT_USAGE)
        if threads is None:
            options['threads'] = os.cpu_count() or 1
        try:
            self.handle_command(**options)
        except StnngpError as exc:
            logger.debug("Command failed", exc_info=True)
            raise CommandError(str(exc), returncode=exc.exit_code)

    def handle_command(self, **options):
        raise NotImplementedError

    def usage(self, message):
        return CommandError(message, returncode=EXIT_USAGE)

    def out_path(self, directory, name):
        os.makedirs(directory, exist_ok=True)
        return os.path.join(directory, name)
