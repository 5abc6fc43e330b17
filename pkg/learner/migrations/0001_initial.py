import django.core.validators
import django.db.models.deletion
import uuid
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='TrainingRun',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('method', models.CharField(choices=[('proposed', 'Fast coupled update'), ('ksvd', 'K-SVD baseline')], default='proposed', max_length=20)),
                ('mode', models.CharField(choices=[('single', 'Single dictionary'), ('coupled', 'Coupled dictionaries'), ('joint', 'Joint (3+ spaces)')], max_length=20)),
                ('schedule_mode', models.CharField(choices=[('graduated', 'Graduated'), ('constant', 'Constant')], max_length=20)),
                ('cycles', models.PositiveIntegerField(validators=[django.core.validators.MinValueValidator(1)])),
                ('max_nonzeros', models.PositiveIntegerField(validators=[django.core.validators.MinValueValidator(1)])),
                ('error_threshold', models.FloatField(validators=[django.core.validators.MinValueValidator(0.0)])),
                ('natoms', models.PositiveIntegerField(validators=[django.core.validators.MinValueValidator(1)])),
                ('seed', models.BigIntegerField(default=0)),
                ('signal_count', models.PositiveIntegerField()),
                ('space_dims', models.JSONField(default=list, help_text='Signal dimension of each feature space')),
                ('model_path', models.CharField(blank=True, max_length=500)),
                ('metrics_path', models.CharField(blank=True, max_length=500)),
                ('final_avg_nonzeros', models.FloatField(blank=True, null=True)),
                ('final_avg_error', models.FloatField(blank=True, null=True)),
                ('total_wall_time', models.FloatField(default=0.0)),
                ('created_at', models.DateTimeField(auto_now_add=True)),
            ],
            options={
                'verbose_name': 'Training Run',
                'verbose_name_plural': 'Training Runs',
                'ordering': ['-created_at'],
            },
        ),
        migrations.CreateModel(
            name='CycleRecord',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('cycle', models.PositiveIntegerField()),
                ('wall_time', models.FloatField()),
                ('avg_nonzeros', models.FloatField()),
                ('avg_error', models.FloatField()),
                ('schedule_limit', models.PositiveIntegerField()),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='cycle_records', to='learner.trainingrun')),
            ],
            options={
                'verbose_name': 'Cycle Record',
                'verbose_name_plural': 'Cycle Records',
                'ordering': ['run', 'cycle'],
                'constraints': [models.UniqueConstraint(fields=('run', 'cycle'), name='unique_cycle_per_run')],
            },
        ),
    ]
