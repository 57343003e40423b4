import os

from django.core.exceptions import ValidationError


DATASET_EXTENSIONS = ['.csv', '.geojson', '.json']


def validate_file_size(file):
    """
    Validates file size (max 20MB)
    """
    max_size = 20 * 1024 * 1024  # 20MB

    if file.size > max_size:
        raise ValidationError(
            f"File size must not exceed 20MB. Current size: {file.size / (1024 * 1024):.2f}MB"
        )


def validate_dataset_file(file):
    """
    Validates that file is a CSV or GeoJSON dataset
    """
    _, ext = os.path.splitext(file.name.lower())

    if ext not in DATASET_EXTENSIONS:
        raise ValidationError(
            f"Only dataset files are allowed: {', '.join(DATASET_EXTENSIONS)}"
        )


def validate_positive_number(value):
    """
    Validates that number is positive
    """
    if value is not None and not value > 0:
        raise ValidationError("Value must be positive.")
