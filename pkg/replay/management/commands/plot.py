from replay.management.base import EngineCommand
from replay.plotting import emit_plot


class Command(EngineCommand):
    help = 'Draw CSV columns as an SVG line chart'

    def add_arguments(self, parser):
        parser.add_argument('csv', type=str, help='Input CSV with a header row')
        parser.add_argument('--x', required=True, help='Column for the x axis')
        parser.add_argument('--y', required=True, help='Comma-separated columns, one line each')
        parser.add_argument('--out', required=True, help='Output SVG path')
        parser.add_argument('--title', default=None)

    def run(self, *args, **options):
        ys = [col.strip() for col in options['y'].split(',') if col.strip()]
        path = emit_plot(options['csv'], options['x'], ys, options['out'], title=options['title'])
        self.stdout.write(self.style.SUCCESS(f"Wrote {path}"))
