import logging

from django.core.management.base import BaseCommand, CommandError

from refinement.exceptions import ConfigurationError, PoseRefinementError
from refinement.pipeline import load_run_config

VERBOSITY_LEVELS = {0: logging.ERROR, 1: logging.WARNING, 2: logging.INFO, 3: logging.DEBUG}

# exit codes
HARD_FAILURE = 1
CONFIG_ERROR = 2


class PPCCommand(BaseCommand):
    """
    Common surface of the toolkit's subcommands: an optional run-config JSON
    file, flags that override its path entries, and the exit-code mapping
    (1 hard failure, 2 configuration error).
    """

    # run-config keys that may be given as flags
    override_keys = ()

    def add_arguments(self, parser):
        parser.add_argument('config', nargs='?', help='Run configuration (JSON)')
        parser.add_argument('--seed', type=int, help='Seed; the PPC_SEED environment variable wins over it')
        parser.add_argument('--parallelism', type=int, help='Worker processes')
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        pass

    def overrides(self, options):
        keys = ('seed', 'parallelism') + tuple(self.override_keys)
        return {k: options.get(k) for k in keys}

    def handle(self, *args, **options):
        verbosity = options.get('verbosity', 1)
        if verbosity != 1:
            logging.getLogger('refinement').setLevel(VERBOSITY_LEVELS.get(verbosity, logging.DEBUG))
        try:
            config = load_run_config(options.get('config'), self.overrides(options))
            return self.run(config, options)
        except ConfigurationError as exc:
            details = f" {exc.details}" if exc.details else ''
            raise CommandError(f"{exc}{details}", returncode=CONFIG_ERROR) from exc
        except PoseRefinementError as exc:
            raise CommandError(str(exc), returncode=HARD_FAILURE) from exc

    def run(self, config, options):
        raise NotImplementedError
