import logging

from django.core.management.base import BaseCommand, CommandError

from replay.exceptions import CondensaError, ConfigError

logger = logging.getLogger(__name__)

CONFIG_ERROR_EXIT = 2
RUNTIME_ERROR_EXIT = 3


class EngineCommand(BaseCommand):
    """
    Base for the engine verbs.
    Subclasses implement run(); engine errors become exit codes 2 (config) or 3 (runtime).
    """

    def run(self, *args, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            return self.run(*args, **options)
        except ConfigError as exc:
            for key in exc.keys:
                self.stderr.write(self.style.ERROR(f"  {key}: {'; '.join(exc.errors[key])}"))
            raise CommandError(str(exc), returncode=CONFIG_ERROR_EXIT) from exc
        except CondensaError as exc:
            logger.error(f"{type(exc).__name__}: {exc}")
            raise CommandError(f"{type(exc).__name__}: {exc}", returncode=RUNTIME_ERROR_EXIT) from exc
