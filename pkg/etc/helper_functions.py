import os
from datetime import date
from random import randint

import numpy as np


def file_rename(file_name, number_of_digits):
    min_value = 10 ** (number_of_digits - 1)
    max_value = (10 ** number_of_digits) - 1
    _, extension = os.path.splitext(file_name)
    extension = extension.lstrip('.')
    random_number = randint(min_value, max_value)
    formatted_date = date.today().strftime("%m-%Y")
    return f"{random_number}.{extension}", formatted_date


def dataset_uploader(instance, filename):
    file_name, file_date = file_rename(filename, 10)
    return f"Datasets/{file_date}/{instance.slug}-{file_name}"


def format_float(value):
    """Shortest text that reads back as the same double"""
    value = float(value)
    if np.isnan(value):
        return 'nan'
    if np.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return repr(value)


def format_int(value):
    return str(int(value))


def flatten(mapping, prefix=''):
    """{'a': {'b': 1}} -> {'a.b': 1}"""
    out = {}
    for key, value in mapping.items():
        name = f'{prefix}{key}'
        if isinstance(value, dict) and value:
            out.update(flatten(value, f'{name}.'))
        else:
            out[name] = value
    return out


def unflatten(mapping):
    """{'a.b': 1} -> {'a': {'b': 1}}; later keys win on conflicts"""
    out = {}
    for key, value in mapping.items():
        node = out
        parts = str(key).split('.')
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = node[part] = {}
            node = child
        node[parts[-1]] = value
    return out


def json_float(value):
    """A float for JSON bodies; NaN and infinities become null"""
    value = float(value)
    return value if np.isfinite(value) else None
