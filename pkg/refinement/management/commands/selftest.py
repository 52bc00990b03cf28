from django.core.management.base import CommandError

from refinement.management.base import HARD_FAILURE, PPCCommand
from refinement.pipeline import selftest


class Command(PPCCommand):
    help = 'Check core invariants and run one short oracle refinement.'

    def run(self, config, options):
        results = selftest(config['seed'])
        for check in results:
            status = 'PASS' if check.passed else 'FAIL'
            self.stdout.write(f"{status}  {check.name}: {check.detail}")
        failed = [c.name for c in results if not c.passed]
        if failed:
            raise CommandError(f"Self-test failed: {', '.join(failed)}", returncode=HARD_FAILURE)
