from rest_framework import serializers


class MatrixField(serializers.ListField):
    """A list of equal-length numeric rows."""

    child = serializers.ListField(child=serializers.FloatField(), min_length=1)

    def to_internal_value(self, data):
        rows = super().to_internal_value(data)
        if len({len(row) for row in rows}) > 1:
            raise serializers.ValidationError("Rows must all have the same length.")
        return rows


class ComponentSerializer(serializers.Serializer):
    """One Gaussian mixture component; give either ``cov`` or ``cov_factor`` (cov = F F^T)."""

    weight = serializers.FloatField(required=False, default=1.0)
    mean = serializers.ListField(child=serializers.FloatField(), min_length=1)
    cov = MatrixField(required=False)
    cov_factor = MatrixField(required=False)

    def validate_weight(self, value):
        if value <= 0:
            raise serializers.ValidationError("Mixture weights must be positive.")
        return value

    def validate(self, attrs):
        if ('cov' in attrs) == ('cov_factor' in attrs):
            raise serializers.ValidationError("Give exactly one of 'cov' or 'cov_factor'.")
        return attrs


class ConditionSerializer(serializers.Serializer):
    pretrain = serializers.BooleanField(required=False, default=True)
    components = ComponentSerializer(many=True, allow_empty=False)


class WorldSerializer(serializers.Serializer):
    seed = serializers.IntegerField(required=False, default=0)
    conditions = serializers.DictField(child=ConditionSerializer(), allow_empty=False)

    def validate_conditions(self, value):
        if '<null>' in value:
            raise serializers.ValidationError("'<null>' is reserved for the null condition.")
        dims = {len(c['mean']) for condition in value.values() for c in condition['components']}
        if len(dims) != 1:
            raise serializers.ValidationError(f"All means must share one dimension, got {sorted(dims)}.")
        return value
