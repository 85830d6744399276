"""PNG image I/O.

Only 8-bit grayscale and RGB PNG are supported; that keeps byte-level
determinism trivial and covers the corpora this package processes.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError
from .geometry import Image
from .ioutil import atomic_write_bytes


def load_image(path) -> Image:
    with PILImage.open(path) as pil:
        if pil.format != "PNG":
            raise FormatError(f"{path}: only PNG input is supported, got {pil.format}")
        if pil.mode not in ("L", "RGB"):
            raise FormatError(f"{path}: unsupported PNG mode {pil.mode!r} "
                              "(need 8-bit gray or RGB)")
        return Image(np.asarray(pil, dtype=np.uint8))


def save_image(path, image: Image) -> None:
    mode = "L" if image.channels == 1 else "RGB"
    buf = io.BytesIO()
    PILImage.fromarray(image.array, mode=mode).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
