"""Per-session linear radiometric correction from gray-card patches.

Each channel gets an independent scalar regression: the six neutral
patches constrain gain and offset per channel, and the correction maps
stored 8-bit values, with no sRGB linearization (gamma handling is out of
scope). Corrected values are clamped to [0, 255].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FitError, ValidationError
from .model import N_CARD_PATCHES, GrayPatchSample


@dataclass(frozen=True)
class CalibrationModel:
    """Per-channel linear map from measured to reference intensity."""

    gain: tuple[float, float, float]
    offset: tuple[float, float, float]
    residual_rms: tuple[float, float, float]

    def __post_init__(self):
        if len(self.gain) != 3 or len(self.offset) != 3 or len(self.residual_rms) != 3:
            raise ValidationError("calibration model needs 3 channels")
        for g in self.gain:
            if not g > 0:
                raise ValidationError(f"gain must be positive, got {g}")
        for r in self.residual_rms:
            if r < 0:
                raise ValidationError(f"residual_rms must be >= 0, got {r}")
        object.__setattr__(self, "gain", tuple(float(g) for g in self.gain))
        object.__setattr__(self, "offset", tuple(float(o) for o in self.offset))
        object.__setattr__(
            self, "residual_rms", tuple(float(r) for r in self.residual_rms)
        )

    @classmethod
    def identity(cls) -> "CalibrationModel":
        return cls(gain=(1.0, 1.0, 1.0), offset=(0.0, 0.0, 0.0), residual_rms=(0.0, 0.0, 0.0))

    def to_dict(self) -> dict:
        return {
            "gain": list(self.gain),
            "offset": list(self.offset),
            "residual_rms": list(self.residual_rms),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationModel":
        return cls(
            gain=tuple(data["gain"]),
            offset=tuple(data["offset"]),
            residual_rms=tuple(data["residual_rms"]),
        )


def fit_calibration(patches: Sequence[GrayPatchSample]) -> CalibrationModel:
    """Fit per-channel (gain, offset) by ordinary least squares.

    For channel c, minimizes sum_i (gain_c * measured_i_c + offset_c -
    reference_i)^2 over the six patches, closed form.

    Raises:
        ValidationError: wrong patch count.
        FitError: zero variance of measured values in any channel, or a
            non-positive fitted gain (non-physical correction).
    """
    patches = list(patches)
    if len(patches) != N_CARD_PATCHES:
        raise ValidationError(
            f"calibration needs {N_CARD_PATCHES} patches, got {len(patches)}"
        )
    measured = np.array([p.measured_rgb for p in patches], dtype=np.float64)
    reference = np.array([p.reference_value for p in patches], dtype=np.float64)

    gains, offsets, rms = [], [], []
    for c in range(3):
        x = measured[:, c]
        var = np.mean((x - x.mean()) ** 2)
        if var == 0.0:
            raise FitError(f"rank-deficient calibration: channel {c} has zero variance")
        cov = np.mean((x - x.mean()) * (reference - reference.mean()))
        gain = cov / var
        offset = reference.mean() - gain * x.mean()
        if not gain > 0:
            raise FitError(
                f"rank-deficient calibration: channel {c} gain {gain} not positive"
            )
        resid = gain * x + offset - reference
        gains.append(float(gain))
        offsets.append(float(offset))
        rms.append(float(np.sqrt(np.mean(resid**2))))
    return CalibrationModel(gain=tuple(gains), offset=tuple(offsets), residual_rms=tuple(rms))


def apply_calibration(model: CalibrationModel, image: np.ndarray) -> np.ndarray:
    """Map every pixel channel x to clamp(gain_c * x + offset_c, 0, 255).

    Output keeps the input dtype and dimensions; integer inputs are
    rounded to nearest. Pure function, safe to run concurrently per tile.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {image.shape}")
    gain = np.asarray(model.gain, dtype=np.float64)
    offset = np.asarray(model.offset, dtype=np.float64)
    out = image.astype(np.float64) * gain + offset
    np.clip(out, 0.0, 255.0, out=out)
    if np.issubdtype(image.dtype, np.integer):
        return np.rint(out).astype(image.dtype)
    return out.astype(image.dtype)
