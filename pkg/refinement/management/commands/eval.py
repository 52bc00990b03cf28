from refinement.management.base import PPCCommand
from refinement.pipeline import cmd_eval


class Command(PPCCommand):
    help = 'Score estimated poses against dataset ground truth and report recalls.'
    override_keys = ('dataset', 'estimates', 'output')

    def add_run_arguments(self, parser):
        parser.add_argument('--dataset', help='Dataset directory')
        parser.add_argument('--estimates', help='Estimated pose file (JSON)')
        parser.add_argument('--output', help='Directory for metrics.csv, summary.json and table.txt')

    def run(self, config, options):
        report = cmd_eval(config)
        self.stdout.write(report.text)
        self.stdout.write(f"Results: {report.csv_path}, {report.json_path}")
