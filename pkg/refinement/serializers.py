from rest_framework import serializers

from .exceptions import ConfigurationError, InvalidArgumentError
from .geometry import Pose


def validated(serializer_cls, data, what='configuration'):
    """
    Validate ``data`` with ``serializer_cls`` and return plain Python data,
    or raise ConfigurationError carrying the serializer's errors.
    """
    serializer = serializer_cls(data=data)
    if not serializer.is_valid():
        raise ConfigurationError(f"Invalid {what}", details=serializer.errors)
    return _plain(serializer.validated_data)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def _vector(size, **kwargs):
    return serializers.ListField(child=serializers.FloatField(), min_length=size, max_length=size, **kwargs)


class StrictSerializer(serializers.Serializer):
    """Rejects keys the serializer does not declare, so typos in config files surface."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = set(data) - set(self.fields)
            if unknown:
                raise serializers.ValidationError({k: ['Unknown field.'] for k in sorted(unknown)})
        return super().to_internal_value(data)


class PoseSerializer(serializers.Serializer):
    R = serializers.ListField(child=_vector(3), min_length=3, max_length=3)
    t = _vector(3)

    def validate(self, attrs):
        try:
            Pose(attrs['R'], attrs['t'])
        except InvalidArgumentError as exc:
            raise serializers.ValidationError(str(exc))
        return attrs


class IntrinsicsSerializer(StrictSerializer):
    fx = serializers.FloatField()
    fy = serializers.FloatField()
    cx = serializers.FloatField()
    cy = serializers.FloatField()
    width = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=1)

    def validate(self, attrs):
        attrs = super().validate(attrs)
        if attrs['fx'] <= 0 or attrs['fy'] <= 0:
            raise serializers.ValidationError('Focal lengths must be positive.')
        return attrs


class ModelSidecarSerializer(StrictSerializer):
    """
    Model metadata next to a mesh file
    """
    diameter_m = serializers.FloatField(required=False, min_value=0.0)
    # axis-angle vectors, radians, object frame
    symmetries = serializers.ListField(child=_vector(3), required=False, default=list)


class ScheduleSerializer(StrictSerializer):
    breakpoints = serializers.ListField(
        child=serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2),
        min_length=1,
    )
    interpolation = serializers.ChoiceField(choices=['linear', 'log'], default='linear')


class FiniteDifferenceStepsSerializer(StrictSerializer):
    rotation = serializers.FloatField(default=0.01)
    lateral = serializers.FloatField(default=1.0)
    depth = serializers.FloatField(default=0.005)


class SchedulesSerializer(StrictSerializer):
    rotation = ScheduleSerializer(required=False)
    depth = ScheduleSerializer(required=False)
    lateral = ScheduleSerializer(required=False)


class RefinementConfigSerializer(StrictSerializer):
    iterations = serializers.IntegerField(min_value=1, default=100)
    rotation_step = serializers.FloatField(min_value=0.0, default=0.04)
    depth_step = serializers.FloatField(min_value=0.0, default=0.01)
    lateral_step = serializers.FloatField(min_value=0.0, default=1.0)
    rotation_betas = _vector(2, default=[0.6, 0.9])
    depth_betas = _vector(2, default=[0.4, 0.9])
    momentum = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.5)
    epsilon = serializers.FloatField(min_value=0.0, default=1e-8)
    fd_steps = FiniteDifferenceStepsSerializer(required=False)
    schedules = SchedulesSerializer(required=False)
    branch_selection = serializers.ChoiceField(choices=['final', 'best'], default='final')
    evaluate_initial = serializers.BooleanField(default=False)
    seed = serializers.IntegerField(default=0)


class CriticSelectionSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=['oracle', 'noisy', 'external'], default='oracle')
    # external
    command = serializers.CharField(required=False)
    timeout = serializers.FloatField(required=False, min_value=0.0)
    patch_resolution = serializers.IntegerField(required=False, min_value=1)
    # noisy
    noise_sigma = serializers.FloatField(required=False, min_value=0.0)
    bias_amplitude = serializers.FloatField(required=False, min_value=0.0)
    bias_length_scale = _vector(3, required=False)
    saturation = serializers.FloatField(required=False, min_value=0.0)
    seed = serializers.IntegerField(required=False)

    NOISY_FIELDS = ('noise_sigma', 'bias_amplitude', 'bias_length_scale', 'saturation', 'seed')
    EXTERNAL_FIELDS = ('command', 'timeout', 'patch_resolution')

    def validate(self, attrs):
        attrs = super().validate(attrs)
        kind = attrs['kind']
        if kind == 'external' and not attrs.get('command'):
            raise serializers.ValidationError({'command': ['The external critic needs a command.']})
        allowed = {'noisy': self.NOISY_FIELDS, 'external': self.EXTERNAL_FIELDS}.get(kind, ())
        stray = [k for k in attrs if k != 'kind' and k not in allowed]
        if stray:
            raise serializers.ValidationError({k: [f"Not an option of the {kind} critic."] for k in stray})
        return attrs


class ProposalSamplerConfigSerializer(StrictSerializer):
    p_rotation = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.30)
    p_lateral = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.30)
    p_depth = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.40)
    rotation_sigma_deg = serializers.FloatField(min_value=0.0, default=45.0)
    lateral_sigma_fraction = serializers.FloatField(min_value=0.0, default=0.1)
    depth_log_sigma = serializers.FloatField(min_value=0.0, default=0.04879016416943205)
    seed = serializers.IntegerField(default=0)

    def validate(self, attrs):
        attrs = super().validate(attrs)
        total = attrs['p_rotation'] + attrs['p_lateral'] + attrs['p_depth']
        if abs(total - 1.0) > 1e-9:
            raise serializers.ValidationError(f"Category probabilities must sum to 1, got {total}.")
        return attrs


class DatagenConfigSerializer(StrictSerializer):
    light_position_min = _vector(3, required=False)
    light_position_max = _vector(3, required=False)
    ambient_range = _vector(2, required=False)
    diffuse_range = _vector(2, required=False)
    specular_range = _vector(2, required=False)
    shininess_range = _vector(2, required=False)
    whiteness_range = _vector(2, required=False)
    occluder_probability = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    occluder_count = serializers.IntegerField(min_value=0, required=False)
    min_visible_pixels = serializers.IntegerField(min_value=1, required=False)
    max_attempts = serializers.IntegerField(min_value=1, required=False)
    occluded_to_background_probability = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    occluder_depth_fraction = _vector(2, required=False)
    occluder_lateral_fraction = serializers.FloatField(min_value=0.0, required=False)
    border_blur_sigma_range = _vector(2, required=False)
    border_band_px = serializers.IntegerField(min_value=1, required=False)
    object_blur_sigma_range = _vector(2, required=False)
    hsv_noise = serializers.BooleanField(required=False)
    hsv_noise_amplitude = _vector(3, required=False)
    depth_range = _vector(2, required=False)
    center_region_fraction = serializers.FloatField(min_value=0.0, max_value=1.0, required=False)
    background_dir = serializers.CharField(required=False, allow_null=True)
    n_backgrounds = serializers.IntegerField(min_value=1, required=False)
    seed = serializers.IntegerField(required=False)


class RunConfigSerializer(StrictSerializer):
    """
    Run configuration shared by the subcommands. Paths are checked for
    existence by the command that needs them.
    """
    dataset = serializers.CharField(required=False)
    meshes = serializers.ListField(child=serializers.CharField(), required=False, default=list)
    proposals = serializers.CharField(required=False)
    estimates = serializers.CharField(required=False)
    output = serializers.CharField(required=False)
    critic = CriticSelectionSerializer(required=False)
    refinement_config = serializers.CharField(required=False)
    thresholds = serializers.DictField(child=serializers.FloatField(), required=False)
    sampler = ProposalSamplerConfigSerializer(required=False)
    datagen = DatagenConfigSerializer(required=False)
    n_frames = serializers.IntegerField(min_value=1, required=False)
    parallelism = serializers.IntegerField(min_value=1, default=1)
    probe_workers = serializers.IntegerField(min_value=1, default=1)
    trace = serializers.BooleanField(default=False)
    seed = serializers.IntegerField(default=0)

    def validate_thresholds(self, value):
        allowed = {'add_fraction', 'reproj_px', 'rotation_deg', 'translation_m'}
        unknown = set(value) - allowed
        if unknown:
            raise serializers.ValidationError(f"Unknown threshold(s): {sorted(unknown)}")
        return value


class ProposalEntrySerializer(StrictSerializer):
    frame_id = serializers.IntegerField(min_value=0)
    object_id = serializers.CharField()
    pose = PoseSerializer()


class GroundTruthEntrySerializer(serializers.Serializer):
    """Entries of gt.json; extra keys (shading, occluders...) are kept out of validation."""
    frame_id = serializers.IntegerField(min_value=0)
    object_id = serializers.CharField()
    pose = PoseSerializer()
    image = serializers.CharField()
    visible_pixels = serializers.IntegerField(min_value=0, required=False)
