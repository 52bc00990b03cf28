from refinement.management.base import PPCCommand
from refinement.pipeline import cmd_sample_proposals


class Command(PPCCommand):
    help = 'Perturb dataset ground truth into pose proposals.'
    override_keys = ('dataset', 'output')

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory')
        parser.add_argument('--output', help='Proposal file to write')

    def run(self, config, options):
        path = cmd_sample_proposals(config)
        self.stdout.write(f"Proposals written to {path}")
