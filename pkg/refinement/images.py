"""Image I/O: 8-bit PNG/PPM to [0, 1] RGB floats and back, via OpenCV."""

import base64
from pathlib import Path

import cv2
import numpy as np

from .exceptions import InvalidArgumentError


def load_image(path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InvalidArgumentError(f"Could not read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, rgb: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(to_uint8(rgb), cv2.COLOR_RGB2BGR)):
        raise InvalidArgumentError(f"Could not write image {path}")


def save_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), np.where(mask, 255, 0).astype(np.uint8))


def encode_png_base64(rgb: np.ndarray) -> str:
    ok, buf = cv2.imencode('.png', cv2.cvtColor(to_uint8(rgb), cv2.COLOR_RGB2BGR))
    if not ok:
        raise InvalidArgumentError("PNG encoding failed")
    return base64.b64encode(buf.tobytes()).decode('ascii')


def decode_png_base64(data: str) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    bgr = cv2.imdecode(raw, cv2.IMREAD_COLOR)
    if bgr is None:
        raise InvalidArgumentError("Invalid PNG payload")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0
