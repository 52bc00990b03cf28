from django.core.management.base import CommandError

from refinement.management.base import HARD_FAILURE, PPCCommand
from refinement.pipeline import cmd_refine


class Command(PPCCommand):
    help = 'Refine pose proposals against a dataset with the selected critic.'
    override_keys = ('dataset', 'proposals', 'output', 'refinement_config', 'trace', 'probe_workers')

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory')
        parser.add_argument('--proposals', help='Proposal file (JSON)')
        parser.add_argument('--output', help='Refined pose file to write')
        parser.add_argument('--refinement-config', dest='refinement_config', help='Refinement config (JSON)')
        parser.add_argument('--critic', choices=['oracle', 'noisy', 'external'], help='Critic kind')
        parser.add_argument('--critic-command', dest='critic_command', help='Command starting an external critic')
        parser.add_argument('--probe-workers', dest='probe_workers', type=int,
                            help='Threads evaluating the gradient probes')
        parser.add_argument('--trace', action='store_true', default=None, help='Write one trace file per branch')

    def overrides(self, options):
        overrides = super().overrides(options)
        if options.get('critic') or options.get('critic_command'):
            critic = {'kind': options.get('critic') or 'external'}
            if options.get('critic_command'):
                critic['command'] = options['critic_command']
            overrides['critic'] = critic
        return overrides

    def run(self, config, options):
        report = cmd_refine(config)
        self.stdout.write(
            f"Refined {len(report.entries)} instance(s) in {report.seconds:.1f} s -> {report.output}"
        )
        if report.trace_files:
            self.stdout.write(f"Wrote {len(report.trace_files)} trace file(s)")
        if report.failures:
            lines = '\n'.join(f"  frame {key[0]} object {key[1]}: {error}" for key, error in report.failures)
            raise CommandError(f"{len(report.failures)} instance(s) failed:\n{lines}", returncode=HARD_FAILURE)
