from replay.management.base import EngineCommand
from replay.memory import DEFAULT_BUDGET_GRID, budget_table


class Command(EngineCommand):
    help = 'Print the raw memory cost of frames×videos exemplars per class as frames,videos,bytes,mb'

    def add_arguments(self, parser):
        parser.add_argument('--frames', type=int, default=1, help='Frames stored per video')
        parser.add_argument('--videos', type=int, default=1, help='Videos stored per class')
        parser.add_argument('--height', type=int, default=224)
        parser.add_argument('--width', type=int, default=224)
        parser.add_argument('--channels', type=int, default=3)
        parser.add_argument(
            '--grid',
            action='store_true',
            help='Print every row of the standard budget grid instead of one row'
        )

    def run(self, *args, **options):
        grid = DEFAULT_BUDGET_GRID if options['grid'] else [(options['frames'], options['videos'])]
        rows = budget_table(grid, options['height'], options['width'], options['channels'])
        self.stdout.write('frames,videos,bytes,mb')
        for row in rows:
            self.stdout.write(f"{row['frames']},{row['videos']},{row['bytes']},{row['mb']}")
