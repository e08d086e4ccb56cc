from rest_framework import serializers

from .condenser import PromptMode, Strategy
from .exceptions import ConfigError


class StrictSerializer(serializers.Serializer):
    """
    Serializer that rejects keys it does not declare.
    Nested sections inherit the check so typos never pass silently.
    """

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown key.'] for key in unknown})
        return super().to_internal_value(data)


class DataSerializer(StrictSerializer):
    num_classes = serializers.IntegerField(min_value=1, default=8)
    train_per_class = serializers.IntegerField(min_value=1, default=20)
    test_per_class = serializers.IntegerField(min_value=1, default=10)
    frames = serializers.IntegerField(min_value=1, default=8)
    height = serializers.IntegerField(min_value=1, default=32)
    width = serializers.IntegerField(min_value=1, default=32)
    channels = serializers.IntegerField(min_value=1, default=3)
    noise_std = serializers.FloatField(min_value=0.0, default=0.05)
    radius = serializers.IntegerField(min_value=1, default=4)


class SplitSerializer(StrictSerializer):
    base_classes = serializers.IntegerField(min_value=1, default=4)
    increment = serializers.IntegerField(min_value=1, default=2)
    # explicit class sets override base_classes/increment
    stages = serializers.ListField(
        child=serializers.ListField(child=serializers.IntegerField(min_value=0), allow_empty=False),
        required=False,
        allow_empty=False,
    )


class TrainSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=1, default=6)
    batch_size = serializers.IntegerField(min_value=1, default=16)
    lr_base = serializers.FloatField(min_value=0.0, default=0.05)
    lr_incremental = serializers.FloatField(min_value=0.0, default=0.02)
    momentum = serializers.FloatField(min_value=0.0, max_value=0.999, default=0.9)
    distillation = serializers.BooleanField(default=True)
    replay = serializers.BooleanField(default=True)
    shift_fold = serializers.FloatField(min_value=0.0, max_value=0.5, default=0.125)

    def validate(self, attrs):
        for name in ('lr_base', 'lr_incremental'):
            if attrs.get(name) == 0:
                raise serializers.ValidationError({name: ['Must be positive.']})
        return attrs


class LossWeightsSerializer(StrictSerializer):
    alpha = serializers.FloatField(min_value=0.0, default=1.0)
    beta = serializers.FloatField(min_value=0.0, default=1.0)
    gamma = serializers.FloatField(min_value=0.0, default=1.0)
    eta = serializers.FloatField(min_value=0.0, default=1.0)


class CondenseSerializer(StrictSerializer):
    iterations = serializers.IntegerField(min_value=0, default=400)
    lr_weights = serializers.FloatField(min_value=0.0, default=0.01)
    lr_prompt = serializers.FloatField(min_value=0.0, default=0.001)
    loss_weights = LossWeightsSerializer(required=False)
    prompt_mode = serializers.ChoiceField(choices=[m.value for m in PromptMode], default=PromptMode.INSTANCE.value)
    strategy = serializers.ChoiceField(choices=[s.value for s in Strategy], default=Strategy.CONDENSED.value)
    frames = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)

    def validate(self, attrs):
        for name in ('lr_weights', 'lr_prompt'):
            if attrs.get(name) == 0:
                raise serializers.ValidationError({name: ['Must be positive.']})
        if attrs.get('strategy') == Strategy.PROMPT_ONLY.value and attrs.get('prompt_mode') == PromptMode.DISABLED.value:
            raise serializers.ValidationError({'prompt_mode': ['prompt_only needs an enabled prompt mode.']})
        return attrs


class MemorySerializer(StrictSerializer):
    frames_per_exemplar = serializers.IntegerField(min_value=1, allow_null=True, default=None)
    videos_per_class = serializers.IntegerField(min_value=1, default=5)
    store_float = serializers.BooleanField(default=False)
    budget_grid = serializers.ListField(
        child=serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=2, max_length=2),
        required=False,
    )


class ExperimentSerializer(StrictSerializer):
    name = serializers.CharField(max_length=255, default='experiment')
    data = DataSerializer(required=False)
    split = SplitSerializer(required=False)
    train = TrainSerializer(required=False)
    condense = CondenseSerializer(required=False)
    memory = MemorySerializer(required=False)
    output_dir = serializers.CharField(required=False, allow_blank=False)
    seeds = serializers.ListField(child=serializers.IntegerField(min_value=0), allow_empty=False, default=lambda: [0])

    def validate(self, attrs):
        # fill omitted sections with their defaults so callers see one shape
        for name in ('data', 'split', 'train', 'condense', 'memory'):
            if name not in attrs:
                attrs[name] = self.fields[name].run_validation({})
        if 'loss_weights' not in attrs['condense']:
            attrs['condense']['loss_weights'] = LossWeightsSerializer().run_validation({})

        frames = attrs['memory']['frames_per_exemplar']
        if frames is not None and frames > 1 and attrs['condense']['strategy'] != Strategy.ALL.value:
            raise serializers.ValidationError({
                'memory.frames_per_exemplar': ['Several frames per exemplar need strategy "all".'],
            })
        if frames is not None and frames > attrs['data']['frames']:
            raise serializers.ValidationError({
                'memory.frames_per_exemplar': [f"Cannot exceed data.frames ({attrs['data']['frames']})."],
            })

        num_classes = attrs['data']['num_classes']
        split = attrs['split']
        if 'stages' in split:
            covered = sorted(c for stage in split['stages'] for c in stage)
            if covered != list(range(num_classes)):
                raise serializers.ValidationError({
                    'split.stages': [f'Stages must cover classes 0..{num_classes - 1} exactly once.'],
                })
        elif split['base_classes'] > num_classes or (num_classes - split['base_classes']) % split['increment']:
            raise serializers.ValidationError({
                'split': [f"{num_classes} classes cannot be split as {split['base_classes']} + k×{split['increment']}."],
            })

        if attrs['memory']['videos_per_class'] > attrs['data']['train_per_class']:
            raise serializers.ValidationError({
                'memory.videos_per_class': ['Cannot exceed data.train_per_class.'],
            })
        return attrs


class AblationSerializer(StrictSerializer):
    name = serializers.CharField(max_length=255, default='ablation')
    base = serializers.DictField(default=dict)
    axes = serializers.DictField(child=serializers.ListField(allow_empty=True))
    output_dir = serializers.CharField(required=False, allow_blank=False)


def flatten_errors(errors, prefix: str = '') -> dict:
    """Nested DRF errors as a dotted-key -> messages mapping."""
    flat = {}
    if isinstance(errors, dict):
        for key, value in errors.items():
            if key == 'non_field_errors':
                dotted = prefix or 'config'
            else:
                dotted = f"{prefix}.{key}" if prefix else str(key)
            flat.update(flatten_errors(value, dotted))
    elif isinstance(errors, list) and errors and all(isinstance(e, (dict, list)) for e in errors):
        for index, value in enumerate(errors):
            if value:
                flat.update(flatten_errors(value, f"{prefix}.{index}" if prefix else str(index)))
    else:
        messages = errors if isinstance(errors, list) else [errors]
        flat.setdefault(prefix or 'config', []).extend(str(m) for m in messages)
    return flat


def validate(serializer_class, data) -> dict:
    """Run a serializer and raise ConfigError with dotted keys on failure."""
    if not isinstance(data, dict):
        raise ConfigError({'config': ['Expected a JSON object.']})
    serializer = serializer_class(data=data)
    if not serializer.is_valid():
        raise ConfigError(flatten_errors(serializer.errors))
    return serializer.validated_data
