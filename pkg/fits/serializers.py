"""
=============================================================================
fits/serializers.py - Run Configuration & Fit Run Serializers
=============================================================================
"""

from rest_framework import serializers

from etc.choices import COVARIANCE_CHOICES, DISTANCE_CHOICES, FAMILY_CHOICES, FAMILY_LINKS, LINK_CHOICES
from etc.conf import stnngp_setting
from etc.validators import validate_dataset_file, validate_file_size, validate_positive_number
from observation.families import FAMILY_PARAMETERS
from .models import FitRun

CONFIG_SECTIONS = ('data', 'model', 'graph', 'prediction', 'optimizer', 'random', 'parameters')
PARAMETER_NAMES = ('tau', 'mu', 'phi', 'sigma', 'sd', 'overdispersion', 'dispersion')


def default_link(family):
    if family == stnngp_setting('FAMILY'):
        return stnngp_setting('LINK')
    return FAMILY_LINKS[family][0]


class StrictSerializer(serializers.Serializer):
    """
    Rejects keys it does not declare
    """

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({str(key): ['Unknown key.'] for key in unknown})
        return super().to_internal_value(data)


# ======================== Run Configuration Sections ========================

class DataSectionSerializer(StrictSerializer):
    coords = serializers.ListField(child=serializers.CharField(), min_length=1, default=lambda: ['x', 'y'])
    time = serializers.CharField(default='time')
    response = serializers.CharField(default='count')
    covariates = serializers.ListField(child=serializers.CharField(), default=list)

    def validate(self, attrs):
        names = list(attrs['coords']) + [attrs['time'], attrs['response']] + list(attrs['covariates'])
        repeated = sorted({name for name in names if names.count(name) > 1})
        if repeated:
            raise serializers.ValidationError(f"Columns used twice: {', '.join(repeated)}.")
        return attrs


class ModelSectionSerializer(StrictSerializer):
    family = serializers.ChoiceField(choices=FAMILY_CHOICES, default=lambda: stnngp_setting('FAMILY'))
    link = serializers.ChoiceField(choices=LINK_CHOICES, required=False)
    covariance = serializers.ChoiceField(choices=COVARIANCE_CHOICES, default=lambda: stnngp_setting('COVARIANCE'))
    nu = serializers.FloatField(required=False, validators=[validate_positive_number])

    def validate(self, attrs):
        family = attrs['family']
        link = attrs.get('link') or default_link(family)
        if link not in FAMILY_LINKS[family]:
            raise serializers.ValidationError({
                'link': [f"The {family} family needs one of the links: {', '.join(FAMILY_LINKS[family])}."]
            })
        attrs['link'] = link

        nu = attrs.get('nu')
        if attrs['covariance'] == 'exponential':
            if nu is not None and nu != 0.5:
                raise serializers.ValidationError({'nu': ['The exponential covariance has nu = 0.5.']})
            nu = 0.5
        elif nu is None:
            nu = stnngp_setting('NU')
        if not nu > 0:
            raise serializers.ValidationError({'nu': ['The smoothness must be positive.']})
        attrs['nu'] = float(nu)
        return attrs


class GraphSectionSerializer(StrictSerializer):
    n_parents = serializers.IntegerField(min_value=1, default=lambda: stnngp_setting('N_PARENTS'))
    distance = serializers.ChoiceField(choices=DISTANCE_CHOICES, default=lambda: stnngp_setting('DISTANCE'))
    reference = serializers.CharField(default='observed')


class PredictionSectionSerializer(StrictSerializer):
    forecast_horizon = serializers.IntegerField(min_value=0, default=lambda: stnngp_setting('FORECAST_HORIZON'))


class OptimizerSectionSerializer(StrictSerializer):
    inner_tol = serializers.FloatField(min_value=0.0, default=lambda: stnngp_setting('INNER_TOL'))
    inner_max_iter = serializers.IntegerField(min_value=1, default=lambda: stnngp_setting('INNER_MAX_ITER'))
    outer_gtol = serializers.FloatField(min_value=0.0, default=lambda: stnngp_setting('OUTER_GTOL'))
    outer_rel_tol = serializers.FloatField(min_value=0.0, default=lambda: stnngp_setting('OUTER_REL_TOL'))
    outer_max_iter = serializers.IntegerField(min_value=1, default=lambda: stnngp_setting('OUTER_MAX_ITER'))


class RandomSectionSerializer(StrictSerializer):
    seed = serializers.IntegerField(min_value=0, default=lambda: stnngp_setting('SEED'))


class ParameterOverrideSerializer(StrictSerializer):
    value = serializers.FloatField(required=False)
    fixed = serializers.BooleanField(required=False)

    def validate(self, attrs):
        if not attrs:
            raise serializers.ValidationError("Give a value, fixed or both.")
        return attrs


class ParametersField(serializers.Field):
    """
    {name: {value, fixed}} with covariate coefficients nested under beta;
    validated to a flat {name: override} keyed tau, ..., beta.<covariate>.
    """
    default_error_messages = {
        'invalid': 'Expected a mapping from parameter names to {value, fixed}.',
    }

    def to_internal_value(self, data):
        if data is None:
            return {}
        if not isinstance(data, dict):
            self.fail('invalid')
        overrides, errors = {}, {}
        for name, entry in data.items():
            if name == 'beta':
                if not isinstance(entry, dict):
                    errors['beta'] = ['Expected one entry per covariate.']
                    continue
                for covariate, inner in entry.items():
                    self._override(f'beta.{covariate}', inner, overrides, errors)
            elif name in PARAMETER_NAMES:
                self._override(name, entry, overrides, errors)
            else:
                errors[str(name)] = ['Unknown key.']
        if errors:
            raise serializers.ValidationError(errors)
        return overrides

    @staticmethod
    def _override(name, entry, overrides, errors):
        serializer = ParameterOverrideSerializer(data={} if entry is None else entry)
        if serializer.is_valid():
            overrides[name] = dict(serializer.validated_data)
        else:
            errors[name] = serializer.errors

    def to_representation(self, value):
        return {name: dict(entry) for name, entry in value.items()}


class RunConfigSerializer(StrictSerializer):
    data = DataSectionSerializer()
    model = ModelSectionSerializer()
    graph = GraphSectionSerializer()
    prediction = PredictionSectionSerializer()
    optimizer = OptimizerSectionSerializer()
    random = RandomSectionSerializer()
    parameters = ParametersField()

    def to_internal_value(self, data):
        if isinstance(data, dict):
            missing = {name: {} for name in CONFIG_SECTIONS if data.get(name) is None}
            data = {**data, **missing}
        return super().to_internal_value(data)

    def validate(self, attrs):
        family = attrs['model']['family']
        covariates = attrs['data']['covariates']
        allowed = {'tau', 'mu', 'phi', 'sigma', *FAMILY_PARAMETERS[family]}
        allowed |= {f'beta.{name}' for name in covariates}
        unknown = sorted(set(attrs['parameters']) - allowed)
        if unknown:
            raise serializers.ValidationError({
                'parameters': {name: [f"Not a parameter of this {family} model."] for name in unknown}
            })
        return attrs


# ======================== Fit Run Serializers ========================

class FitRunListSerializer(serializers.ModelSerializer):
    """
    Minimal fit run serializer for lists
    """
    family_display = serializers.CharField(source='get_family_display', read_only=True)
    status_display = serializers.CharField(source='get_status_display', read_only=True)

    class Meta:
        model = FitRun
        fields = [
            'id', 'name', 'slug', 'family', 'family_display', 'link', 'status',
            'status_display', 'message', 'nll', 'n_obs', 'n_times', 'n_refs', 'created_at'
        ]
        read_only_fields = fields


class FitRunDetailSerializer(serializers.ModelSerializer):
    family_display = serializers.CharField(source='get_family_display', read_only=True)
    status_display = serializers.CharField(source='get_status_display', read_only=True)
    owner_name = serializers.CharField(source='owner.username', read_only=True, default=None)
    parameters = serializers.SerializerMethodField()

    class Meta:
        model = FitRun
        fields = [
            'id', 'name', 'slug', 'owner', 'owner_name', 'dataset', 'family', 'family_display',
            'link', 'status', 'status_display', 'message', 'nll', 'n_obs', 'n_times', 'n_refs',
            'config', 'parameters', 'created_at', 'updated_at'
        ]
        read_only_fields = fields

    def get_parameters(self, obj):
        return ParameterRowSerializer(obj.parameter_rows(), many=True).data


class FitRunCreateSerializer(serializers.ModelSerializer):
    """
    Upload a CSV or GeoJSON dataset with its run configuration
    """
    dataset = serializers.FileField(validators=[validate_dataset_file, validate_file_size])
    config = serializers.JSONField(required=False, default=dict)

    class Meta:
        model = FitRun
        fields = ['name', 'dataset', 'config']

    def validate_name(self, value):
        if not value or len(value.strip()) < 2:
            raise serializers.ValidationError("Name must be at least 2 characters.")
        return value.strip()

    def validate_config(self, value):
        if not isinstance(value, dict):
            raise serializers.ValidationError("The configuration must be a JSON object.")
        return value


class ParameterRowSerializer(serializers.Serializer):
    group = serializers.CharField()
    name = serializers.CharField()
    par = serializers.FloatField()
    se = serializers.FloatField(allow_null=True)
    fixed = serializers.BooleanField()


# ======================== Action Requests ========================

class PointSerializer(StrictSerializer):
    coords = serializers.ListField(child=serializers.FloatField(), min_length=1)
    time = serializers.IntegerField()
    covariates = serializers.DictField(child=serializers.FloatField(), default=dict)


class PredictRequestSerializer(StrictSerializer):
    points = PointSerializer(many=True, allow_empty=False)
    forecast_horizon = serializers.IntegerField(min_value=0, required=False)
    hold_state = serializers.BooleanField(default=False)


class SimulateRequestSerializer(StrictSerializer):
    n_sim = serializers.IntegerField(min_value=1, max_value=1000, default=1)
    conditional = serializers.BooleanField(default=True)
    seed = serializers.IntegerField(min_value=0, default=lambda: stnngp_setting('SEED'))
    family = serializers.ChoiceField(choices=FAMILY_CHOICES, required=False)
    family_params = serializers.DictField(child=serializers.FloatField(), default=dict)


class ResidualRequestSerializer(StrictSerializer):
    n_sim = serializers.IntegerField(max_value=5000, default=lambda: stnngp_setting('RESIDUAL_N_SIM'))
    seed = serializers.IntegerField(min_value=0, default=lambda: stnngp_setting('SEED'))

    def validate_n_sim(self, value):
        minimum = stnngp_setting('MIN_RESIDUAL_N_SIM')
        if value < minimum:
            raise serializers.ValidationError(f"PIT residuals need at least {minimum} simulations.")
        return value
