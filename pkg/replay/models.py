from django.db import models


class ExperimentRun(models.Model):
    """
    Bookkeeping for one `run --record` invocation.
    Tracks status and the seed-averaged accuracies once finished.
    """
    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('running', 'Running'),
        ('completed', 'Completed'),
        ('failed', 'Failed'),
    ]

    name = models.CharField(max_length=255)
    config = models.JSONField()
    seeds = models.JSONField(default=list)
    output_dir = models.CharField(max_length=1024)
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='pending')

    # Filled in when the run completes
    avg_acc_cnn = models.FloatField(null=True, blank=True)
    avg_acc_nme = models.FloatField(null=True, blank=True)
    error_message = models.TextField(null=True, blank=True)

    created_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.name} - {self.status}"


class StageResult(models.Model):
    """One stages.csv row of a recorded run."""
    run = models.ForeignKey(
        ExperimentRun,
        on_delete=models.CASCADE,
        related_name='stages'
    )
    seed = models.IntegerField()
    stage = models.PositiveIntegerField()
    seen_classes = models.PositiveIntegerField()
    acc_cnn = models.FloatField()
    acc_nme = models.FloatField()
    memory_mb = models.FloatField()

    class Meta:
        ordering = ['seed', 'stage']
        constraints = [
            models.UniqueConstraint(fields=['run', 'seed', 'stage'], name='unique_stage_per_seed'),
        ]

    def __str__(self):
        return f"seed {self.seed} stage {self.stage}: cnn={self.acc_cnn:.3f} nme={self.acc_nme:.3f}"
