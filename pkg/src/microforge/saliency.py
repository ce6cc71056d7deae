"""Gradient saliency maps for stiffness predictions.

The map is the absolute gradient of the single-component MSE loss with
respect to the input pixels, computed with every patch visible and
scattered back from patch tokens to image layout. Targets are taken in
standardized units by default, recorded in the map metadata.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mmae import patchify, unpatchify
from .transfer import Regressor, COMPONENTS


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W), non-negative
    component: str
    standardized_target: bool
    checkpoint_id: str = ""
    image_id: str = ""


def saliency_from_predictor(predict, tokens_np: np.ndarray, label: float
                            ) -> tuple[np.ndarray, float]:
    """Signed input-token gradient of MSE(label, predict(tokens)).

    ``predict`` maps a (1, P, D) token Tensor to a scalar-per-sample
    Tensor. Returns (gradient with the tokens' shape, prediction).
    """
    tokens = Tensor(tokens_np, requires_grad=True)
    pred = predict(tokens)
    diff = pred - Tensor(np.full(pred.shape, label))
    loss = ad.mean(diff * diff)
    loss.backward()
    return tokens.grad.copy(), float(pred.data.reshape(-1)[0])


def saliency(regressor: Regressor, image: np.ndarray, component: str, label: float,
             standardized: bool = True, image_id: str = "",
             checkpoint_id: str = "") -> SaliencyMap:
    """Saliency of one stiffness component's MSE loss w.r.t. input pixels.

    ``label`` is the ground-truth component value in GPa; with
    ``standardized`` (the default) both prediction and label are taken
    in z-scored units before the loss.
    """
    if component not in COMPONENTS:
        raise ValueError(f"component must be one of {COMPONENTS}, got {component!r}")
    idx = COMPONENTS.index(component)
    cfg = regressor.model.cfg
    tokens_np = patchify(image, cfg.patch_size)[None]

    if standardized:
        target = float((label - regressor.scaler.mean[idx]) / regressor.scaler.std[idx])
    else:
        target = float(label)

    def predict(tokens: Tensor) -> Tensor:
        out = regressor.predict_graph(tokens)  # standardized units
        comp = ad.slice_axis(out, 1, idx, idx + 1)
        if not standardized:
            comp = comp * regressor.scaler.std[idx] + regressor.scaler.mean[idx]
        return comp

    grad, _ = saliency_from_predictor(predict, tokens_np, target)
    values = np.abs(unpatchify(grad[0], cfg.patch_size))
    return SaliencyMap(values=values, component=component,
                       standardized_target=standardized,
                       checkpoint_id=checkpoint_id, image_id=image_id)


# -- rendering ----------------------------------------------------------

# warm-cool ramp endpoints (cool blue -> warm red) in RGB
_COOL = np.array([59.0, 76.0, 192.0])
_WARM = np.array([180.0, 4.0, 38.0])


def render_overlay(map_values: np.ndarray, image: np.ndarray,
                   alpha: float = 0.6) -> np.ndarray:
    """Min-max normalized warm-cool overlay on the grayscale input.

    A constant map renders uniformly at the ramp midpoint.
    """
    m = np.asarray(map_values, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    if m.shape != img.shape:
        raise ValueError(f"map {m.shape} and image {img.shape} dims differ")
    span = m.max() - m.min()
    t = np.full_like(m, 0.5) if span == 0.0 else (m - m.min()) / span
    ramp = _COOL[None, None, :] + t[:, :, None] * (_WARM - _COOL)[None, None, :]
    blended = alpha * ramp + (1.0 - alpha) * img[:, :, None]
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def save_map_csv(map_: SaliencyMap, path) -> None:
    header = (f"component={map_.component} standardized={map_.standardized_target} "
              f"checkpoint={map_.checkpoint_id} image={map_.image_id}")
    np.savetxt(path, map_.values, delimiter=",", header=header)
