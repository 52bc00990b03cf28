from refinement.management.base import PPCCommand
from refinement.pipeline import cmd_gen


class Command(PPCCommand):
    help = 'Generate a synthetic dataset of observed images with ground truth.'
    override_keys = ('output', 'n_frames', 'meshes')

    def add_run_arguments(self, parser):
        parser.add_argument('--output', help='Dataset directory to write')
        parser.add_argument('--n-frames', dest='n_frames', type=int, help='Number of frames')
        parser.add_argument('--meshes', nargs='+', help='Mesh files (default: the shipped meshes)')

    def run(self, config, options):
        root = cmd_gen(config)
        self.stdout.write(f"Dataset written to {root}")
