import math

import numpy as np


def format_float_literal(value) -> str:
    """C float literal that re-parses to exactly the same binary32 value.

    Nine significant digits always round-trip binary32; trailing zeros are
    dropped, so ``1.0`` prints as ``1.0f`` and ``0.1`` as ``0.100000001f``.
    """
    v = float(np.float32(value))
    if not math.isfinite(v):
        raise ValueError(f"cannot emit non-finite constant {value!r}")
    text = f"{v:.9g}"
    if not any(ch in text for ch in ".e"):
        text += ".0"
    return text + "f"
