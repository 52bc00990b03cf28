from refinement.management.base import PPCCommand
from refinement.pipeline import cmd_render


class Command(PPCCommand):
    help = 'Write rendered and observed patches at ground truth or at given poses.'
    override_keys = ('dataset', 'proposals', 'output')

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory')
        parser.add_argument('--proposals', help='Pose file to render instead of ground truth')
        parser.add_argument('--output', help='Directory for the patch PNGs')

    def run(self, config, options):
        written = cmd_render(config)
        self.stdout.write(f"Wrote {len(written)} image(s)")
