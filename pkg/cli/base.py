"""Shared flags and the exit-code contract of the pdsm management commands."""

import logging

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from numcore.errors import PdsmError

from .forms import resolve_config

logger = logging.getLogger(__name__)

CONFIG_ERROR = 2
RUNTIME_ERROR = 1


class PdsmCommand(BaseCommand):
    """
    Subclasses implement run(config, **options).

    Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration or
    validation failure.
    """

    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument('--config', help='flat JSON file of dotted config keys')
        parser.add_argument('--seed', type=int, help='overrides run.seed')
        parser.add_argument('--threads', type=int, help='overrides run.threads')
        parser.add_argument('--out', required=True, help='output directory')

    def handle(self, *args, **options):
        try:
            flags = {name: options.get(name) for name in ('seed', 'threads', 'k', 'baseline')}
            config = resolve_config(options.pop('config', None), **flags)
            return self.run(config, **options)
        except CommandError:
            raise
        except ValidationError as exc:
            raise CommandError('; '.join(exc.messages), returncode=CONFIG_ERROR)
        except (OSError, PdsmError) as exc:
            logger.error('%s failed: %s', self.__module__.rsplit('.', 1)[-1], exc)
            raise CommandError(str(exc), returncode=RUNTIME_ERROR)

    def run(self, config, **options):
        raise NotImplementedError

    def done(self, message):
        self.stdout.write(self.style.SUCCESS(message))
