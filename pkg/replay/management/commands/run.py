import logging

from django.db import transaction
from django.utils import timezone

from replay.experiment import load_config, run_experiment
from replay.management.base import EngineCommand
from replay.models import ExperimentRun, StageResult

logger = logging.getLogger(__name__)


class Command(EngineCommand):
    help = 'Run a class-incremental experiment from a JSON config and write its reports'

    def add_arguments(self, parser):
        parser.add_argument('config', type=str, help='Experiment config (JSON)')
        parser.add_argument(
            '--output-dir',
            type=str,
            default=None,
            help='Directory for reports (default: config output_dir or CONDENSA_OUTPUT_DIR/<name>)'
        )
        parser.add_argument(
            '--record',
            action='store_true',
            help='Keep an ExperimentRun row with per-stage results in the database'
        )

    def run(self, *args, **options):
        config = load_config(options['config'])
        output_dir = options['output_dir'] or config.output_dir
        self.stdout.write(f"Running {config.name} over seeds {config.seeds}...")

        record = None
        if options['record']:
            record = ExperimentRun.objects.create(
                name=config.name,
                config=config.document,
                seeds=config.seeds,
                output_dir=str(output_dir),
            )

        try:
            if record:
                record.status = 'running'
                record.save(update_fields=['status'])
            report = run_experiment(config, output_dir=output_dir)
        except Exception as e:
            if record:
                record.status = 'failed'
                record.error_message = str(e)
                record.finished_at = timezone.now()
                record.save()
            raise

        if record:
            self._record(record, report)

        self.stdout.write(report.summary.to_string(index=False))
        self.stdout.write(self.style.SUCCESS(f"Reports written to {report.config.output_dir}"))

    def _record(self, record, report):
        summary = report.summary.set_index('metric')
        with transaction.atomic():
            StageResult.objects.bulk_create([
                StageResult(run=record, seed=int(row.seed), stage=int(row.stage),
                            seen_classes=int(row.seen_classes), acc_cnn=float(row.acc_cnn),
                            acc_nme=float(row.acc_nme), memory_mb=float(row.memory_mb))
                for row in report.stages.itertuples(index=False)
            ])
            record.status = 'completed'
            record.avg_acc_cnn = float(summary.loc['avg_acc_cnn', 'mean'])
            record.avg_acc_nme = float(summary.loc['avg_acc_nme', 'mean'])
            record.finished_at = timezone.now()
            record.save()
        logger.info(f"Recorded run {record.pk} with {len(report.stages)} stage rows")
