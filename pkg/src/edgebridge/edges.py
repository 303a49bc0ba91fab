"""Fixed (non-learned) edge mappings and small image transforms.

Everything here is a pure function over numpy arrays: images are H*W*3
float arrays in [0, 1], edge maps are H*W float arrays in [0, 1]. The
Canny detector is implemented from scratch (grayscale, Gaussian smooth,
Sobel, non-maximum suppression, double-threshold hysteresis) so its
conventions are fully pinned down and testable.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# Default hysteresis thresholds on the normalized ([0,1]) gradient scale.
CANNY_LOW_DEFAULT = 0.1
CANNY_HIGH_DEFAULT = 0.2


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """H*W*3 [0,1] image -> H*W luma, ITU-R 601 weights."""
    if image.ndim == 2:
        return image.astype(np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected H*W*3 image, got shape {image.shape}")
    return image.astype(np.float64) @ _LUMA


def gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel of odd length."""
    if kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd, got {kernel_size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    half = kernel_size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve1d_reflect(values: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = len(kernel) // 2
    pad = [(0, 0)] * values.ndim
    pad[axis] = (half, half)
    padded = np.pad(values, pad, mode="reflect")
    out = np.zeros_like(values, dtype=np.float64)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(i, i + values.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def gaussian_blur(values: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding over the last two axes.

    Accepts H*W maps or stacks (...*H*W); the kernel is normalized to sum 1
    so constant inputs are fixed points and interior mass is preserved.
    """
    k = gaussian_kernel1d(kernel_size, sigma)
    out = _convolve1d_reflect(values.astype(np.float64), k, axis=-2)
    out = _convolve1d_reflect(out, k, axis=-1)
    return out


def stretch_to_unit(values: np.ndarray) -> np.ndarray:
    """Affine stretch to span [0, 1]; a constant map collapses to all zeros."""
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax == vmin:
        return np.zeros_like(values, dtype=np.float64)
    return (values.astype(np.float64) - vmin) / (vmax - vmin)


def _sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sobel gradients normalized so each component lies in [-1, 1]."""
    padded = np.pad(gray, ((1, 1), (1, 1)), mode="reflect")
    c = padded
    # 3x3 Sobel, separable form applied via shifted slices
    gx = (
        (c[:-2, 2:] + 2.0 * c[1:-1, 2:] + c[2:, 2:])
        - (c[:-2, :-2] + 2.0 * c[1:-1, :-2] + c[2:, :-2])
    ) / 4.0
    gy = (
        (c[2:, :-2] + 2.0 * c[2:, 1:-1] + c[2:, 2:])
        - (c[:-2, :-2] + 2.0 * c[:-2, 1:-1] + c[:-2, 2:])
    ) / 4.0
    return gx, gy


def _nonmax_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep gradient-magnitude ridge pixels along the quantized gradient axis.

    Ties on a two-pixel plateau are broken asymmetrically (>= forward,
    > backward) so an ideal step edge yields a one-pixel-wide line.
    """
    h, w = mag.shape
    padded = np.pad(mag, ((1, 1), (1, 1)), mode="constant")

    # Quantize gradient direction to 4 axes, modulo 180 degrees so the
    # result is invariant to flipping the gradient sign (image inversion).
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    axis = np.zeros(mag.shape, dtype=np.int8)  # 0=E/W, 1=NE/SW, 2=N/S, 3=NW/SE
    axis[(angle >= 22.5) & (angle < 67.5)] = 1
    axis[(angle >= 67.5) & (angle < 112.5)] = 2
    axis[(angle >= 112.5) & (angle < 157.5)] = 3

    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for a, (dy, dx) in offsets.items():
        fwd = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        sel = axis == a
        keep |= sel & (mag >= fwd) & (mag > bwd)
    return np.where(keep & (mag > 0), mag, 0.0)


def canny(
    image: np.ndarray,
    low: float = CANNY_LOW_DEFAULT,
    high: float = CANNY_HIGH_DEFAULT,
    smooth_sigma: float = 1.0,
    smooth_kernel: int = 5,
) -> np.ndarray:
    """Classic Canny edge detection; returns a binary {0,1} H*W map.

    Thresholds live on a normalized gradient-magnitude scale: Sobel
    components are scaled into [-1, 1] and the magnitude divided by
    sqrt(2), so `low`/`high` are meaningful fractions of the strongest
    possible edge regardless of image content.
    """
    if not 0 <= low < high:
        raise ValueError(f"need 0 <= low < high, got low={low} high={high}")
    gray = to_grayscale(image)
    smoothed = gaussian_blur(gray, smooth_kernel, smooth_sigma)
    gx, gy = _sobel_gradients(smoothed)
    mag = np.hypot(gx, gy) / np.sqrt(2.0)
    # Rounding keeps the map invariant to image inversion: the magnitude is
    # sign-invariant analytically, but last-ULP float asymmetries would
    # otherwise break suppression ties differently for 1-I.
    mag = np.round(mag, 12)
    nms = _nonmax_suppress(mag, gx, gy)

    strong = nms >= high
    weak = nms >= low
    if not strong.any():
        return np.zeros_like(gray)
    # Hysteresis: keep weak components 8-connected to a strong pixel.
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep_labels = np.unique(labels[strong])
    keep_labels = keep_labels[keep_labels > 0]
    edges = np.isin(labels, keep_labels)
    return edges.astype(np.float64)


def canny_batch(images: np.ndarray, low: float = CANNY_LOW_DEFAULT,
                high: float = CANNY_HIGH_DEFAULT) -> np.ndarray:
    """Canny over a B*H*W*3 stack -> B*H*W binary maps."""
    return np.stack([canny(img, low, high) for img in images])


def blurred_canny(
    image: np.ndarray,
    low: float = CANNY_LOW_DEFAULT,
    high: float = CANNY_HIGH_DEFAULT,
    blur_kernel: int = 5,
    blur_sigma: float = 0.15,
) -> np.ndarray:
    """Canny map softened by a small Gaussian, the regularization target
    used when no pretrained edge network is available. The default
    kernel-5 / sigma-0.15 blur is nearly an identity; both knobs are
    exposed because wider blurs are often more useful in practice."""
    return gaussian_blur(canny(image, low, high), blur_kernel, blur_sigma)


class FrozenEdgeNet:
    """A frozen multi-stage side-output edge network loaded from a weights file.

    Optional oracle: used as the regression target when a pretrained
    edge model is supplied. All other code paths work without it.
    """

    def __init__(self, weights_path):
        import torch

        from .bridge import EdgeNet

        try:
            payload = torch.load(weights_path, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise ValueError(f"malformed edge-network weights file {weights_path}: {exc}")
        if not isinstance(payload, dict) or "state_dict" not in payload or "arch" not in payload:
            raise ValueError(
                f"malformed edge-network weights file {weights_path}: "
                "expected dict with 'arch' and 'state_dict'"
            )
        self.net = EdgeNet(stages=payload["arch"]["stages"],
                           widths=tuple(payload["arch"]["widths"]))
        self.net.load_state_dict(payload["state_dict"])
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        """H*W*3 [0,1] image -> H*W edge map in [0,1]."""
        import torch

        x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))[None]).float()
        with torch.no_grad():
            out = self.net(x)
        return out[0, 0].numpy().astype(np.float64)
