"""Bridge between foundation models and the ripelab file formats.

Everything analytic lives downstream; this package only turns berry
chips into a feature CSV and point prompts into instance-mask files,
both matching the schemas the analysis toolkit loads. A weight-free
"stub" backend keeps the whole adapter testable offline.
"""

from .backends import available_backends, get_backend
from .features import FeatureRow, validate_rows, write_feature_csv

__all__ = [
    "FeatureRow",
    "available_backends",
    "get_backend",
    "validate_rows",
    "write_feature_csv",
]

__version__ = "0.1.0"
