"""Feature backends: a deterministic stub plus optional hub encoders.

The stub needs no weights: it reduces a chip to its mean RGB over the
alpha-positive pixels, which is enough to exercise every downstream
schema and determinism check. Real encoders are loaded lazily so the
adapter imports cleanly on machines without torch/transformers.
"""

from __future__ import annotations

import numpy as np

HUB_MODELS = {
    "dinov2": "facebook/dinov2-giant",
    "vit": "google/vit-huge-patch14-224-in21k",
    "clip": "laion/CLIP-ViT-bigG-14-laion2B-39B-b160k",
}


class BackendError(RuntimeError):
    pass


class StubBackend:
    """Mean-RGB over visible pixels; D=3, no model weights."""

    name = "stub"
    dim = 3

    def encode(self, rgb: np.ndarray, alpha: np.ndarray | None) -> np.ndarray:
        pixels = rgb.reshape(-1, 3).astype(np.float64)
        if alpha is not None:
            keep = alpha.reshape(-1) > 0
            if keep.any():
                pixels = pixels[keep]
        return pixels.mean(axis=0)


class HubBackend:
    """transformers encoder; emits the CLS token (or pooled mean)."""

    def __init__(self, name: str, pooled: bool = False):
        self.name = name
        self.pooled = pooled
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise BackendError(
                f"backend {name!r} needs torch and transformers installed"
            ) from exc
        try:
            self._processor = AutoImageProcessor.from_pretrained(HUB_MODELS[name])
            self._model = AutoModel.from_pretrained(HUB_MODELS[name]).eval()
        except Exception as exc:
            raise BackendError(f"could not load model for {name!r}: {exc}") from exc
        self._torch = torch
        self.dim = int(self._model.config.hidden_size)

    def encode(self, rgb: np.ndarray, alpha: np.ndarray | None) -> np.ndarray:
        del alpha  # hub encoders see the full chip
        inputs = self._processor(images=rgb, return_tensors="pt")
        with self._torch.no_grad():
            hidden = self._model(**inputs).last_hidden_state[0]
        vec = hidden.mean(dim=0) if self.pooled else hidden[0]
        return vec.cpu().numpy().astype(np.float64)


def available_backends() -> tuple[str, ...]:
    return ("stub", *HUB_MODELS)


def get_backend(name: str, pooled: bool = False):
    if name == "stub":
        return StubBackend()
    if name in HUB_MODELS:
        return HubBackend(name, pooled=pooled)
    raise BackendError(
        f"unknown backend {name!r}; choose one of {', '.join(available_backends())}"
    )
