"""Binary file formats for images, masks and network checkpoints.

MOLIMG (16-byte header)::

    bytes 0-8    b"MOLIMG v1"
    byte  9      b"\\n"
    bytes 10-11  height, uint16 little-endian
    bytes 12-13  width, uint16 little-endian
    byte  14     b"c" (complex payload) or b"m" (mask payload)
    byte  15     b"\\n"

followed by row-major little-endian float64 (real, imag) pairs, or one byte
(0/1) per entry for masks. Measurements use the same layout with
``height = n_coils`` and ``width = n_samples``.

MOLNET::

    b"MOLNET v1\\n"
    uint32 layer count, uint8 activation code, float64 activation slope,
    uint32 image height, uint32 image width
    per layer: uint32 (out_ch, in_ch, k, k), uint32 spectral-state size
    per layer: float64 kernel block, float64 bias block, float64 spectral state
"""
import struct

import numpy as np

from .exceptions import DimensionError

IMG_MAGIC = b"MOLIMG v1"
NET_MAGIC = b"MOLNET v1\n"
_ACTIVATIONS = ("relu", "leaky_relu", "identity")


def _image_header(h, w, kind):
    if not (0 < h < 65536 and 0 < w < 65536):
        raise DimensionError(f"MOLIMG supports sizes up to 65535, got {h}x{w}")
    return IMG_MAGIC + b"\n" + struct.pack("<HH", h, w) + kind + b"\n"


def _read_header(buf, path):
    if len(buf) < 16 or buf[:9] != IMG_MAGIC:
        raise ValueError(f"{path}: not a MOLIMG v1 file")
    h, w = struct.unpack("<HH", buf[10:14])
    return h, w, buf[14:15]


def write_image(path, x):
    x = np.asarray(x, dtype=np.complex128)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {x.shape}")
    h, w = x.shape
    payload = np.ascontiguousarray(x).view(np.float64).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_image_header(h, w, b"c") + payload)


def read_image(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    h, w, kind = _read_header(buf, path)
    if kind != b"c":
        raise ValueError(f"{path}: expected complex payload, found {kind!r}")
    data = np.frombuffer(buf, dtype="<f8", offset=16)
    if data.size != 2 * h * w:
        raise ValueError(f"{path}: payload holds {data.size} reals, expected {2 * h * w}")
    return data.astype(np.float64).view(np.complex128).reshape(h, w)


def write_mask(path, pattern):
    pattern = np.asarray(pattern, dtype=bool)
    h, w = pattern.shape
    with open(path, "wb") as fh:
        fh.write(_image_header(h, w, b"m") + pattern.astype(np.uint8).tobytes())


def read_mask(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    h, w, kind = _read_header(buf, path)
    if kind != b"m":
        raise ValueError(f"{path}: expected mask payload, found {kind!r}")
    data = np.frombuffer(buf, dtype=np.uint8, offset=16)
    if data.size != h * w:
        raise ValueError(f"{path}: payload holds {data.size} entries, expected {h * w}")
    return data.reshape(h, w).astype(bool)


def write_checkpoint(path, weights):
    kernels, biases, state = weights.kernels, weights.biases, weights.spectral_state
    parts = [NET_MAGIC, struct.pack("<IBdII", len(kernels), _ACTIVATIONS.index(weights.activation),
                                    float(weights.slope), *weights.image_shape)]
    for k, s in zip(kernels, state):
        size = 0 if s is None else s.size
        parts.append(struct.pack("<5I", *k.shape, size))
    for k, b, s in zip(kernels, biases, state):
        parts.append(np.ascontiguousarray(k, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        if s is not None:
            parts.append(np.ascontiguousarray(s, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_checkpoint(path):
    from .network import NetworkWeights

    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(NET_MAGIC)] != NET_MAGIC:
        raise ValueError(f"{path}: not a MOLNET v1 file")
    off = len(NET_MAGIC)
    n_layers, act, slope, h, w = struct.unpack_from("<IBdII", buf, off)
    off += struct.calcsize("<IBdII")
    table = []
    for _ in range(n_layers):
        table.append(struct.unpack_from("<5I", buf, off))
        off += 20
    kernels, biases, state = [], [], []
    for co, ci, k1, k2, size in table:
        n = co * ci * k1 * k2
        kernels.append(np.frombuffer(buf, "<f8", n, off).astype(np.float64).reshape(co, ci, k1, k2))
        off += 8 * n
        biases.append(np.frombuffer(buf, "<f8", co, off).astype(np.float64))
        off += 8 * co
        if size:
            state.append(np.frombuffer(buf, "<f8", size, off).astype(np.float64).reshape(ci, h, w))
            off += 8 * size
        else:
            state.append(None)
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return NetworkWeights(kernels=tuple(kernels), biases=tuple(biases), activation=_ACTIVATIONS[act],
                          slope=slope, image_shape=(h, w), spectral_state=tuple(state))
