"""
Run configuration: settings defaults, overlaid by a flat JSON config file,
overlaid by command-line flags, validated by RunConfigForm.
"""

import json
import logging
from pathlib import Path

from django import forms
from django.conf import settings
from django.core.exceptions import ValidationError

from pipeline.models import BASELINES

logger = logging.getLogger(__name__)

# flag dest -> dotted key
FLAG_KEYS = {
    'seed': 'run.seed',
    'threads': 'run.threads',
    'k': 'cluster.k',
    'baseline': 'pipeline.baseline',
}


def _int(min_value=None, max_value=None):
    return forms.IntegerField(min_value=min_value, max_value=max_value)


def _float(min_value=None, max_value=None):
    return forms.FloatField(min_value=min_value, max_value=max_value)


def _flag():
    return forms.BooleanField(required=False)


class RunConfigForm(forms.Form):
    """
    One field per dotted key. Fields are built in __init__ because the keys
    contain dots; anything in the data without a field is rejected by name.
    """

    FIELDS = {
        'synthsite.patients': lambda: _int(2),
        'synthsite.sites': lambda: _int(1),
        'synthsite.vendors': lambda: _int(1),
        'synthsite.echoes': lambda: _int(1),
        'synthsite.image_size': lambda: _int(8),
        'synthsite.heterogeneity': lambda: _float(0.0),
        'synthsite.noise_sigma': lambda: _float(0.0),
        'synthsite.responder_rate': lambda: _float(0.0, 1.0),
        'synthsite.max_fat_fraction': lambda: _float(0.0, 1.0),
        'synthsite.train_fraction': lambda: _float(0.0, 1.0),
        'styleembed.weights_dir': lambda: forms.CharField(required=False),
        'styleembed.layers': lambda: forms.RegexField(r'^\d+(,\d+)*$'),
        'cluster.k': lambda: _int(1),
        'cluster.restarts': lambda: _int(1),
        'cluster.max_iter': lambda: _int(1),
        'taskmodel.pretrain.epochs': lambda: _int(0),
        'taskmodel.pretrain.learning_rate': lambda: _float(0.0),
        'taskmodel.finetune.epochs': lambda: _int(0),
        'taskmodel.finetune.learning_rate': lambda: _float(0.0),
        'taskmodel.batch_size': lambda: _int(1),
        'taskmodel.momentum': lambda: _float(0.0, 1.0),
        'taskmodel.weight_decay': lambda: _float(0.0),
        'taskmodel.min_finetune_samples': lambda: _int(0),
        'taskmodel.use_bias': _flag,
        'reduce.components': lambda: _int(1),
        'forest.n_trees': lambda: _int(1),
        'forest.max_features': lambda: _int(0),
        'forest.min_samples_leaf': lambda: _int(1),
        'forest.max_depth': lambda: _int(0),
        'forest.bootstrap': _flag,
        'pipeline.baseline': lambda: forms.ChoiceField(choices=[(b, b) for b in BASELINES]),
        'run.seed': lambda: _int(0),
        'run.threads': lambda: _int(1),
    }

    # must be strictly inside their bounds
    OPEN_BOUNDS = ('synthsite.train_fraction', 'taskmodel.pretrain.learning_rate', 'taskmodel.finetune.learning_rate')

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        for key, make in self.FIELDS.items():
            self.fields[key] = make()

    def clean(self):
        cleaned_data = super().clean()
        unknown = sorted(set(self.data) - set(self.FIELDS))
        if unknown:
            raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
        for key in self.OPEN_BOUNDS:
            value = cleaned_data.get(key)
            if value is None:
                continue
            if value <= 0.0 or (key == 'synthsite.train_fraction' and value >= 1.0):
                self.add_error(key, 'must lie strictly inside its range')
        return cleaned_data


def read_config_file(path):
    """Flat JSON object with dotted keys."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise ValidationError(f'{path}: not valid JSON ({exc})') from exc
    if not isinstance(data, dict):
        raise ValidationError(f'{path}: config must be a JSON object of dotted keys')
    return data


def resolve_config(config_path=None, **flags):
    """
    Defaults < config file < flags, validated. Returns the cleaned dotted dict
    and logs it in full. Raises ValidationError naming every offending key.
    """
    values = dict(settings.PDSM_DEFAULTS)
    if config_path:
        values.update(read_config_file(config_path))
    for name, key in FLAG_KEYS.items():
        if flags.get(name) is not None:
            values[key] = flags[name]

    form = RunConfigForm(data=values)
    if not form.is_valid():
        messages = [f'{key}: {" ".join(errors)}' if key != '__all__' else ' '.join(errors)
                    for key, errors in form.errors.items()]
        raise ValidationError(messages)
    resolved = {key: form.cleaned_data[key] for key in RunConfigForm.FIELDS}
    logger.info('resolved config: %s', json.dumps(resolved, sort_keys=True))
    return resolved
