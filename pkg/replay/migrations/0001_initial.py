# Generated by Django 6.0.1 on 2026-10-19 09:12

import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('name', models.CharField(max_length=255)),
                ('config', models.JSONField()),
                ('seeds', models.JSONField(default=list)),
                ('output_dir', models.CharField(max_length=1024)),
                ('status', models.CharField(choices=[('pending', 'Pending'), ('running', 'Running'), ('completed', 'Completed'), ('failed', 'Failed')], default='pending', max_length=20)),
                ('avg_acc_cnn', models.FloatField(blank=True, null=True)),
                ('avg_acc_nme', models.FloatField(blank=True, null=True)),
                ('error_message', models.TextField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='StageResult',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('seed', models.IntegerField()),
                ('stage', models.PositiveIntegerField()),
                ('seen_classes', models.PositiveIntegerField()),
                ('acc_cnn', models.FloatField()),
                ('acc_nme', models.FloatField()),
                ('memory_mb', models.FloatField()),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='stages', to='replay.experimentrun')),
            ],
            options={
                'ordering': ['seed', 'stage'],
                'constraints': [models.UniqueConstraint(fields=('run', 'seed', 'stage'), name='unique_stage_per_seed')],
            },
        ),
    ]
