from pathlib import Path

from rest_framework import serializers

from dcolab.conf import lab_setting, setting_default
from diffusion.networks import ARCHITECTURES
from diffusion.schedules import SCHEDULES
from oracle.exceptions import WorldError
from oracle.worlds import load_world

OBJECTIVES = ('dm', 'dm-prior', 'dco')


class ExistingFileField(serializers.CharField):
    """A path that must exist, resolved against the config file's directory."""

    def to_internal_value(self, data):
        value = super().to_internal_value(data)
        path = Path(value).expanduser()
        if not path.is_absolute():
            path = Path(self.context.get('root', '.')) / path
        if not path.is_file():
            raise serializers.ValidationError(f"File {value!r} does not exist.")
        return path


class BaseTrainingSerializer(serializers.Serializer):
    steps = serializers.IntegerField(min_value=1, default=setting_default('BASE_STEPS'))
    seed = serializers.IntegerField(default=0)
    hidden = serializers.ListField(
        child=serializers.IntegerField(min_value=1), allow_empty=True, default=lambda: list(lab_setting('HIDDEN'))
    )
    architecture = serializers.ChoiceField(choices=ARCHITECTURES, default='mlp')
    schedule = serializers.ChoiceField(choices=sorted(SCHEDULES), default=setting_default('SCHEDULE'))
    lr = serializers.FloatField(default=setting_default('BASE_LR'))
    batch_size = serializers.IntegerField(min_value=1, default=setting_default('BASE_BATCH'))
    condition_dropout = serializers.FloatField(
        min_value=0.0, max_value=0.99, default=setting_default('CONDITION_DROPOUT')
    )
    # reuse a pretrained checkpoint instead of training one
    checkpoint = ExistingFileField(required=False)

    def validate_lr(self, value):
        if value <= 0:
            raise serializers.ValidationError("Learning rate must be positive.")
        return value


class FinetuneSerializer(serializers.Serializer):
    label = serializers.RegexField(r'^[A-Za-z0-9_.-]+$')
    objective = serializers.ChoiceField(choices=OBJECTIVES)
    concept = serializers.CharField()
    token = serializers.CharField(required=False, allow_null=True, default=None)
    initializer = serializers.CharField(required=False, allow_null=True, default=None)
    train_embedding = serializers.BooleanField(default=True)
    beta = serializers.FloatField(default=setting_default('BETA_T'))
    beta_mode = serializers.ChoiceField(choices=('constant', 'theoretical'), default='constant')
    rank = serializers.IntegerField(min_value=1, default=setting_default('SUBJECT_RANK'))
    steps = serializers.IntegerField(min_value=1, default=2000)
    early_stop_steps = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    batch_size = serializers.IntegerField(min_value=1, default=1)
    adapter_lr = serializers.FloatField(default=setting_default('ADAPTER_LR'))
    embedding_lr = serializers.FloatField(default=setting_default('EMBEDDING_LR'))
    offset_noise = serializers.FloatField(min_value=0.0, default=setting_default('OFFSET_NOISE'))
    lambda_prior = serializers.FloatField(min_value=0.0, default=1.0)
    prior_size = serializers.IntegerField(min_value=1, default=16)
    reference_size = serializers.IntegerField(min_value=1, default=4)
    reference_seed = serializers.IntegerField(default=0)
    seeds = serializers.ListField(child=serializers.IntegerField(), allow_empty=False, default=lambda: [0])

    def validate_beta(self, value):
        if value <= 0:
            raise serializers.ValidationError("beta must be positive.")
        return value

    def validate_adapter_lr(self, value):
        if value <= 0:
            raise serializers.ValidationError("Learning rates must be positive.")
        return value

    validate_embedding_lr = validate_adapter_lr

    def validate_seeds(self, value):
        if len(set(value)) != len(value):
            raise serializers.ValidationError("Seeds must be distinct within a block.")
        return value

    def validate(self, attrs):
        if (attrs.get('token') is None) != (attrs.get('initializer') is None):
            raise serializers.ValidationError("'token' and 'initializer' go together.")
        if attrs['objective'] == 'dm-prior' and attrs.get('initializer') is None:
            raise serializers.ValidationError("dm-prior needs an 'initializer' class to synthesize the prior set.")
        early = attrs.get('early_stop_steps')
        if early is not None and early > attrs['steps']:
            raise serializers.ValidationError("'early_stop_steps' cannot exceed 'steps'.")
        return attrs


class SweepSerializer(serializers.Serializer):
    omega_text = serializers.FloatField(min_value=0.0, default=setting_default('OMEGA_TEXT'))
    omega_con = serializers.ListField(
        child=serializers.FloatField(min_value=0.0), allow_empty=False, default=lambda: list(lab_setting('OMEGA_CON'))
    )
    samples = serializers.IntegerField(min_value=1, default=256)
    steps = serializers.IntegerField(min_value=1, default=setting_default('SAMPLER_STEPS'))
    # world condition scored by prompt fidelity; defaults to each block's initializer
    prompt = serializers.CharField(required=False, allow_null=True, default=None)
    plain_cfg = serializers.BooleanField(default=True)
    t_max = serializers.FloatField(min_value=0.0, max_value=1.0, default=setting_default('SAMPLER_T_MAX'))
    clip_denoised = serializers.FloatField(required=False, allow_null=True, default=None)

    def validate_t_max(self, value):
        if value <= lab_setting('SAMPLER_T_MIN'):
            raise serializers.ValidationError(f"'t_max' must exceed {lab_setting('SAMPLER_T_MIN')}.")
        return value

    def validate_clip_denoised(self, value):
        if value is not None and value <= 0:
            raise serializers.ValidationError("'clip_denoised' must be positive.")
        return value


class MergePairSerializer(serializers.Serializer):
    name = serializers.RegexField(r'^[A-Za-z0-9_.-]+$')
    subject = serializers.CharField()
    style = serializers.CharField()


class MergeSerializer(serializers.Serializer):
    tau = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2, default=lambda: [1.0, 1.0])
    prompt = serializers.CharField()
    samples = serializers.IntegerField(min_value=1, default=256)
    omega_text = serializers.FloatField(min_value=0.0, default=setting_default('OMEGA_TEXT'))
    omega_con = serializers.FloatField(min_value=0.0, default=lambda: lab_setting('OMEGA_CON')[0])
    steps = serializers.IntegerField(min_value=1, default=setting_default('SAMPLER_STEPS'))
    pairs = MergePairSerializer(many=True, allow_empty=False)


class ExperimentSerializer(serializers.Serializer):
    world = ExistingFileField()
    output = serializers.CharField(required=False, allow_null=True, default=None)
    workers = serializers.IntegerField(min_value=1, default=setting_default('WORKERS'))
    base = BaseTrainingSerializer(required=False)
    finetune = FinetuneSerializer(many=True, required=False, default=list)
    sweep = SweepSerializer(required=False, allow_null=True, default=None)
    merge = MergeSerializer(required=False, allow_null=True, default=None)

    def to_internal_value(self, data):
        if isinstance(data, dict) and data.get('base') is None:
            data = {**data, 'base': {}}
        return super().to_internal_value(data)

    def validate_finetune(self, value):
        labels = [block['label'] for block in value]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise serializers.ValidationError(f"Duplicate fine-tune labels: {duplicates}.")
        return value

    def validate(self, attrs):
        try:
            world = load_world(attrs['world'])
        except WorldError as exc:
            raise serializers.ValidationError({'world': [str(exc)]}) from exc
        errors = {}
        for index, block in enumerate(attrs['finetune']):
            for name in ('concept', 'initializer'):
                value = block.get(name)
                if value is not None and value not in world.conditions:
                    errors.setdefault(index, {})[name] = [f"Unknown world condition {value!r}."]
            if block.get('initializer') in world.conditions and block['initializer'] not in world.pretrain_conditions:
                errors.setdefault(index, {})['initializer'] = ["The initializer must be a base (pretrain) condition."]
            if block.get('token') is None and block['concept'] in world.conditions \
                    and block['concept'] not in world.pretrain_conditions:
                errors.setdefault(index, {})['concept'] = [
                    "Without a token the concept must be a base (pretrain) condition."
                ]
            if attrs.get('sweep') and attrs['sweep']['prompt'] is None and block.get('initializer') is None:
                errors.setdefault(index, {})['initializer'] = ['The sweep needs a prompt condition or an initializer.']
        if errors:
            raise serializers.ValidationError({'finetune': errors})
        for section in ('sweep', 'merge'):
            prompt = (attrs.get(section) or {}).get('prompt')
            if prompt is not None and prompt not in world.conditions:
                raise serializers.ValidationError({section: {'prompt': [f"Unknown world condition {prompt!r}."]}})

        labels = {block['label'] for block in attrs['finetune']}
        if attrs.get('merge'):
            for pair in attrs['merge']['pairs']:
                missing = [name for name in (pair['subject'], pair['style']) if name not in labels]
                if missing:
                    raise serializers.ValidationError({'merge': [f"Unknown fine-tune labels {missing}."]})
        attrs['world_model'] = world
        return attrs
