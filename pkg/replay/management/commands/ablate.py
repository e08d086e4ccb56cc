from replay.experiment import run_ablation
from replay.management.base import EngineCommand


class Command(EngineCommand):
    help = 'Run an ablation grid (cartesian product of config axes) and write ablation.csv'

    def add_arguments(self, parser):
        parser.add_argument('grid', type=str, help='Ablation grid (JSON)')
        parser.add_argument('--output-dir', type=str, default=None, help='Directory for ablation.csv')

    def run(self, *args, **options):
        report = run_ablation(options['grid'], output_dir=options['output_dir'])
        self.stdout.write(report.table.to_string(index=False))
        self.stdout.write(self.style.SUCCESS(f"{len(report.table)} cells written to {report.path}"))
